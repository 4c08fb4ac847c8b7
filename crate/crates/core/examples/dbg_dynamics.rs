//! Trace the encoder view head during joint training: CE value, head norm,
//! gradient coherence, feature scale, and accuracy.

use crossview::data::{make_corpus, split_corpus};
use crossview::evaluation::eval_view_accuracy;
use crossview::training::{train_supervised, MemorySink, StepSink, StepLog, TrainConfig, TrainCtx};
use crossview::Real;

struct Probe {
    inner: MemorySink<Real>,
}

impl StepSink<Real> for Probe {
    fn record(&mut self, log: &StepLog<Real>) -> std::io::Result<()> {
        self.inner.record(log)
    }
}

fn main() {
    let full = make_corpus::<Real>(250, 32, 0xC0);
    let (train, hold) = split_corpus(&full, 0.8, 0xC0).unwrap();
    for (width, l5) in [(32usize, 0.01f64), (32, 1.0)] {
        let steps = 1000u64;
        let cfg = TrainConfig {
            batch_size: 8,
            width,
            supervised_epochs: 10_000,
            max_steps: steps,
            seed: 4242,
            lambda: [10.0, 1.0, 1.0, 1.0, l5],
            ..TrainConfig::default()
        };
        let mut sink = Probe { inner: MemorySink::default() };
        let state = {
            let mut ctx = TrainCtx::with_sink(&mut sink);
            train_supervised(&train, &cfg, &mut ctx).unwrap()
        };
        let ce: Vec<f32> = sink
            .inner
            .logs
            .iter()
            .filter_map(|l| l.report("recon_e").and_then(|r| r.view_ce))
            .collect();
        let window = |a: usize, b: usize| {
            let s = &ce[a.min(ce.len())..b.min(ce.len())];
            s.iter().sum::<f32>() / s.len().max(1) as f32
        };
        let headw = state
            .encoder
            .tensors()
            .iter()
            .find(|(n, _)| n == "e.view.w")
            .map(|(_, t)| t.sq_norm().sqrt())
            .unwrap();
        let feats = state.encoder.features_batch(train.get(0).image.tensor(), 1);
        let frms = (feats.sq_norm() / feats.len() as f32).sqrt();
        let acc = eval_view_accuracy(&state.encoder, &hold).unwrap();
        // discriminator view head accuracy on held-out real images
        let mut d_hits = 0usize;
        for s in hold.samples() {
            let (logits, _) = state.discriminator.discriminate(&s.image).unwrap();
            let pred = logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if pred == s.view.bin() {
                d_hits += 1;
            }
        }
        println!(
            "width {width} l5 {l5} steps {steps}: CE first50 {:.4} last50 {:.4} | head |W| {headw:.4} | E acc {acc:.3} | D_v acc {:.3}",
            window(0, 50),
            window(ce.len().saturating_sub(50), ce.len()),
            d_hits as f64 / hold.len() as f64,
        );
    }
}
