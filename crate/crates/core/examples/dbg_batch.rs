//! Does batch size rescue the view head under the (0, 0.9) Adam momenta?

use crossview::data::{make_corpus, split_corpus};
use crossview::evaluation::eval_view_accuracy;
use crossview::training::{train_supervised, MemorySink, TrainConfig, TrainCtx};
use crossview::Real;
use std::time::Instant;

fn main() {
    let full = make_corpus::<Real>(250, 32, 0xC0);
    let (train, hold) = split_corpus(&full, 0.8, 0xC0).unwrap();
    let args: Vec<String> = std::env::args().collect();
    let steps: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    for (batch, width) in [(32usize, 16usize), (64, 16), (64, 8)] {
        let cfg = TrainConfig {
            batch_size: batch,
            width,
            supervised_epochs: 10_000,
            max_steps: steps,
            seed: 4242,
            ..TrainConfig::default()
        };
        let mut sink = MemorySink::default();
        let t0 = Instant::now();
        let state = {
            let mut ctx = TrainCtx::with_sink(&mut sink);
            train_supervised(&train, &cfg, &mut ctx).unwrap()
        };
        let acc_t = eval_view_accuracy(&state.encoder, &train).unwrap();
        let acc_h = eval_view_accuracy(&state.encoder, &hold).unwrap();
        let l1_of = |log: &crossview::training::StepLog<Real>| {
            log.report("recon_e").and_then(|r| r.l1).map(|v| v as f64)
        };
        let first: Vec<f64> = sink.logs.iter().take(100).filter_map(l1_of).collect();
        let last: Vec<f64> = sink.logs.iter().rev().take(100).filter_map(l1_of).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        println!(
            "batch={batch} width={width}: {steps} steps in {:.0}s ({:.2}s/step) viewacc train {acc_t:.3} hold {acc_h:.3} l1 {:.3}->{:.3}",
            t0.elapsed().as_secs_f64(),
            t0.elapsed().as_secs_f64() / steps as f64,
            mean(&first),
            mean(&last),
        );
    }
}
