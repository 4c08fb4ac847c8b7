//! Diagnose the encoder view head: did training move it, do its logits vary
//! with the input view, and what gradient does the view-CE term deliver?

use crossview::checkpoint;
use crossview::data::{make_corpus, split_corpus};
use crossview::domain::VIEW_BINS;
use crossview::evaluation::eval_view_accuracy;
use crossview::training::{TrainConfig, TrainState};
use crossview::Real;

fn main() {
    let full = make_corpus::<Real>(250, 32, 0xC0);
    let (train, _) = split_corpus(&full, 0.8, 0xC0).unwrap();

    let trained = checkpoint::load::<Real>(std::path::Path::new("/tmp/calib/sanity_ckpt")).unwrap();
    let fresh = TrainState::<Real>::new(trained.config.clone()).unwrap();

    let norm = |s: &TrainState<Real>, name: &str| {
        s.encoder
            .tensors()
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.sq_norm().sqrt())
            .unwrap()
    };
    for name in ["e.view.w", "e.view.b", "e.latent.w", "e.conv_in.w"] {
        println!("{name}: init norm {:.4}, trained norm {:.4}", norm(&fresh, name), norm(&trained, name));
    }

    // logit spread across views for a few identities
    let mut by_view = vec![vec![0.0f64; VIEW_BINS]; VIEW_BINS];
    let mut counts = vec![0usize; VIEW_BINS];
    for s in train.samples().iter().take(90) {
        let logits = trained.encoder.view_logits(&s.image);
        for (k, l) in logits.iter().enumerate() {
            by_view[s.view.bin()][k] += *l as f64;
        }
        counts[s.view.bin()] += 1;
    }
    println!("mean logits by true view (rows = true view):");
    for (b, row) in by_view.iter().enumerate() {
        let r: Vec<String> = row.iter().map(|v| format!("{:+.2}", v / counts[b].max(1) as f64)).collect();
        println!("  v{b}: {}", r.join(" "));
    }
    println!("train view accuracy: {:.3}", eval_view_accuracy(&trained.encoder, &train).unwrap());

    let cfg = TrainConfig::default();
    println!("lambda5 = {}", cfg.lambda[4]);
}
