//! Two probes: (a) can a freshly trained linear readout of the trained
//! encoder's latent codes classify view? (b) does the view head learn when
//! the view-CE weight is raised for a short run?

use crossview::checkpoint;
use crossview::data::{make_corpus, split_corpus};
use crossview::domain::VIEW_BINS;
use crossview::evaluation::eval_view_accuracy;
use crossview::rng::RngStream;
use crossview::tensor::Tensor;
use crossview::training::{train_supervised, MemorySink, TrainConfig, TrainCtx};
use crossview::Real;

fn main() {
    let full = make_corpus::<Real>(250, 32, 0xC0);
    let (train, hold) = split_corpus(&full, 0.8, 0xC0).unwrap();

    // (a) linear probe on the trained encoder's latent codes
    let trained = checkpoint::load::<Real>(std::path::Path::new("/tmp/calib/sanity_ckpt")).unwrap();
    let n = train.len();
    let mut feats = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for s in train.samples() {
        let f = trained.encoder.features_batch(s.image.tensor(), 1);
        feats.push(f.data().to_vec());
        labels.push(s.view.bin());
    }
    let dim = feats[0].len();
    // one linear layer, plain softmax regression with Adam-free SGD+momentum
    let mut w = vec![0.0f32; dim * VIEW_BINS];
    let mut b = vec![0.0f32; VIEW_BINS];
    let mut mw = vec![0.0f32; dim * VIEW_BINS];
    let mut mb = vec![0.0f32; VIEW_BINS];
    let lr = 0.1f32;
    let mut rng = RngStream::new(7);
    let mut order: Vec<usize> = (0..n).collect();
    for _epoch in 0..30 {
        rng.shuffle(&mut order);
        for chunk in order.chunks(32) {
            let mut gw = vec![0.0f32; dim * VIEW_BINS];
            let mut gb = vec![0.0f32; VIEW_BINS];
            for &i in chunk {
                let f = &feats[i];
                let mut logits = b.clone();
                for k in 0..VIEW_BINS {
                    for d in 0..dim {
                        logits[k] += w[k * dim + d] * f[d];
                    }
                }
                let mx = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let exps: Vec<f32> = logits.iter().map(|l| (l - mx).exp()).collect();
                let sum: f32 = exps.iter().sum();
                for k in 0..VIEW_BINS {
                    let p = exps[k] / sum - if k == labels[i] { 1.0 } else { 0.0 };
                    gb[k] += p;
                    for d in 0..dim {
                        gw[k * dim + d] += p * f[d];
                    }
                }
            }
            let scale = 1.0 / chunk.len() as f32;
            for (m, g) in mw.iter_mut().zip(&gw) {
                *m = 0.9 * *m + g * scale;
            }
            for (m, g) in mb.iter_mut().zip(&gb) {
                *m = 0.9 * *m + g * scale;
            }
            for (x, m) in w.iter_mut().zip(&mw) {
                *x -= lr * m;
            }
            for (x, m) in b.iter_mut().zip(&mb) {
                *x -= lr * m;
            }
        }
    }
    let mut hits = 0;
    for (f, &y) in feats.iter().zip(&labels) {
        let mut logits = b.clone();
        for k in 0..VIEW_BINS {
            for d in 0..dim {
                logits[k] += w[k * dim + d] * f[d];
            }
        }
        let pred = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if pred == y {
            hits += 1;
        }
    }
    println!("(a) linear probe on trained encoder TRUNK features: {:.3}", hits as f64 / n as f64);
    let _ = Tensor::<f32>::zeros(1, 1);

    // (b) short run with a larger view-CE weight
    for l5 in [] as [f64; 0] {
        let cfg = TrainConfig {
            batch_size: 8,
            width: 16,
            supervised_epochs: 10_000,
            max_steps: 300,
            seed: 4242,
            lambda: [10.0, 1.0, 1.0, 1.0, l5],
            ..TrainConfig::default()
        };
        let mut sink = MemorySink::default();
        let state = {
            let mut ctx = TrainCtx::with_sink(&mut sink);
            train_supervised(&train, &cfg, &mut ctx).unwrap()
        };
        let acc_t = eval_view_accuracy(&state.encoder, &train).unwrap();
        let acc_h = eval_view_accuracy(&state.encoder, &hold).unwrap();
        println!("(b) lambda5={l5}: 300 steps -> view accuracy train {acc_t:.3} held-out {acc_h:.3}");
    }
}
