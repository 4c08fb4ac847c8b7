//! Calibration harness: runs the training-dependent experiments end to end
//! and prints the numbers the acceptance thresholds are frozen from.
//!
//! Usage: calibrate <sanity|ablation|selfsup> [args...]

use crossview::data::{make_corpus, split_corpus, strip_labels, Corpus};
use crossview::evaluation::{
    eval_cross_reconstruction, eval_identity_similarity, eval_latent_coverage, eval_view_accuracy,
    train_identity_embedder, IdentityEmbedder,
};
use crossview::rng::RngStream;
use crossview::training::{
    train_self_supervised, train_supervised, MemorySink, TrainConfig, TrainCtx, TrainMode,
    TrainState,
};
use crossview::Real;
use std::time::Instant;

fn acceptance_corpus() -> (Corpus<Real>, Corpus<Real>) {
    let corpus = make_corpus::<Real>(250, 32, 0xC0);
    split_corpus(&corpus, 0.8, 0xC0).unwrap()
}

fn base_config(seed: u64, batch: usize, width: usize, max_steps: u64) -> TrainConfig {
    TrainConfig {
        batch_size: batch,
        width,
        supervised_epochs: 10_000, // stop on max_steps
        self_supervised_epochs: 10_000,
        max_steps,
        seed,
        ..TrainConfig::default()
    }
}

fn l1_window_means(logs: &[crossview::training::StepLog<Real>]) -> (f64, f64) {
    let l1_of = |log: &crossview::training::StepLog<Real>| {
        log.report("recon_e").and_then(|r| r.l1).map(|v| v as f64)
    };
    let first: Vec<f64> = logs.iter().take(100).filter_map(l1_of).collect();
    let last: Vec<f64> = logs.iter().rev().take(100).filter_map(l1_of).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    (mean(&first), mean(&last))
}

fn sanity(steps: u64, batch: usize, width: usize) {
    let (train, hold) = acceptance_corpus();
    println!("corpus: train {} identities, held-out {}", train.n_identities(), hold.n_identities());
    let cfg = base_config(4242, batch, width, steps);
    let mut sink = MemorySink::default();
    let t0 = Instant::now();
    let state = {
        let mut ctx = TrainCtx::with_sink(&mut sink);
        train_supervised(&train, &cfg, &mut ctx).unwrap()
    };
    println!("{} steps in {:.0}s", state.step, t0.elapsed().as_secs_f64());
    let (first, last) = l1_window_means(&sink.logs);
    println!("recon L1: first-100 mean {first:.4}, last-100 mean {last:.4}, ratio {:.3}", last / first);
    let acc_train = eval_view_accuracy(&state.encoder, &train).unwrap();
    let acc_hold = eval_view_accuracy(&state.encoder, &hold).unwrap();
    println!("view accuracy: train {acc_train:.3}, held-out {acc_hold:.3}");
    let recon_hold = eval_cross_reconstruction(&state.encoder, &state.generator, &hold).unwrap();
    println!("held-out cross-recon L1 {recon_hold:.4}");
    crossview::checkpoint::save(&state, std::path::Path::new("/tmp/calib/sanity_ckpt")).unwrap();
}

fn eval_pair(
    state: &TrainState<Real>,
    embedder: &IdentityEmbedder<Real>,
    hold: &Corpus<Real>,
) -> (f64, f64, f64) {
    let sim = eval_identity_similarity(&state.encoder, &state.generator, embedder, hold).unwrap();
    let mut rng = RngStream::new(0xC07E);
    let (cov, div) = eval_latent_coverage(&state.generator, embedder, hold, 128, &mut rng).unwrap();
    (sim, cov, div)
}

fn ablation(budget: u64, batch: usize, width: usize, seeds: &[u64]) {
    let (train, hold) = acceptance_corpus();
    let full = make_corpus::<Real>(250, 32, 0xC0);
    println!("training evaluation embedder...");
    let embedder = train_identity_embedder(&full, 0xE1).unwrap();
    let mut two_sim = vec![];
    let mut two_cov = vec![];
    let mut one_sim = vec![];
    let mut one_cov = vec![];
    for &seed in seeds {
        for mode in [TrainMode::TwoPath, TrainMode::SinglePath] {
            let cfg = TrainConfig { mode, ..base_config(seed, batch, width, budget) };
            let t0 = Instant::now();
            let mut sink = MemorySink::default();
            let state = {
                let mut ctx = TrainCtx::with_sink(&mut sink);
                train_supervised(&train, &cfg, &mut ctx).unwrap()
            };
            let (sim, cov, div) = eval_pair(&state, &embedder, &hold);
            let acc = eval_view_accuracy(&state.encoder, &hold).unwrap();
            println!(
                "seed {seed} {:11}: sim {sim:.4} cov {cov:.4} div {div:.4} viewacc {acc:.3} ({:.0}s)",
                mode.as_str(),
                t0.elapsed().as_secs_f64()
            );
            match mode {
                TrainMode::TwoPath => {
                    two_sim.push(sim);
                    two_cov.push(cov);
                    crossview::checkpoint::save(
                        &state,
                        std::path::Path::new(&format!("/tmp/calib/two_{seed}")),
                    )
                    .unwrap();
                }
                TrainMode::SinglePath => {
                    one_sim.push(sim);
                    one_cov.push(cov);
                }
            }
        }
    }
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1).max(1) as f64;
        (m, var.sqrt())
    };
    let diff_stats = |a: &[f64], b: &[f64]| {
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
        stats(&d)
    };
    let (sim_margin, sim_sd) = diff_stats(&two_sim, &one_sim);
    let (cov_margin, cov_sd) = diff_stats(&two_cov, &one_cov);
    println!("identity similarity: two {two_sim:?} single {one_sim:?}");
    println!("  margin (single - two) {sim_margin:.4} vs paired sd {sim_sd:.4}");
    println!("latent coverage: two {two_cov:?} single {one_cov:?}");
    println!("  margin (single - two) {cov_margin:.4} vs paired sd {cov_sd:.4}");
}

fn selfsup(stage2_steps: u64, batch: usize, width: usize, seeds: &[u64]) {
    let (train, hold) = acceptance_corpus();
    let full = make_corpus::<Real>(250, 32, 0xC0);
    let embedder = train_identity_embedder(&full, 0xE1).unwrap();
    for &seed in seeds {
        let warm_path = format!("/tmp/calib/two_{seed}");
        let warm = crossview::checkpoint::load::<Real>(std::path::Path::new(&warm_path)).unwrap();
        let (labeled, unlabeled) = strip_labels(&train, 0.3, seed).unwrap();

        // arm A: self-supervised stage two on 70% labeled + 30% pseudo-labeled
        let mut a = warm.clone();
        a.config.max_steps = stage2_steps;
        let t0 = Instant::now();
        {
            let mut sink = MemorySink::default();
            let mut ctx = TrainCtx::with_sink(&mut sink);
            train_self_supervised(&mut a, &labeled, &unlabeled, &mut ctx).unwrap();
        }
        let recon_a = eval_cross_reconstruction(&a.encoder, &a.generator, &hold).unwrap();
        let (sim_a, _, _) = eval_pair(&a, &embedder, &hold);

        // arm B: continue stage one on the labeled subset alone
        let mut b = warm.clone();
        b.stage_step = 0;
        b.config.max_steps = stage2_steps;
        {
            let mut sink = MemorySink::default();
            let mut ctx = TrainCtx::with_sink(&mut sink);
            crossview::training::continue_supervised(&mut b, &labeled, &mut ctx).unwrap();
        }
        let recon_b = eval_cross_reconstruction(&b.encoder, &b.generator, &hold).unwrap();
        let (sim_b, _, _) = eval_pair(&b, &embedder, &hold);
        println!(
            "seed {seed}: self recon {recon_a:.4} sim {sim_a:.4} | labeled-only recon {recon_b:.4} sim {sim_b:.4} ({:.0}s)",
            t0.elapsed().as_secs_f64()
        );
    }
}

fn main() {
    std::fs::create_dir_all("/tmp/calib").unwrap();
    let args: Vec<String> = std::env::args().collect();
    let cmd = args.get(1).map(String::as_str).unwrap_or("sanity");
    let num = |i: usize, d: u64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    match cmd {
        "sanity" => sanity(num(2, 2000), num(3, 8) as usize, num(4, 16) as usize),
        "ablation" => ablation(num(2, 600), num(3, 8) as usize, num(4, 16) as usize, &[11, 22, 33]),
        "selfsup" => selfsup(num(2, 250), num(3, 8) as usize, num(4, 16) as usize, &[11, 22, 33]),
        other => eprintln!("unknown calibration command {other}"),
    }
}
