//! Overfit one fixed batch through the real encoder objective + Adam loop:
//! the view cross-entropy must collapse if the update path is sound.

use crossview::autodiff::Tape;
use crossview::data::make_corpus;
use crossview::losses::{encoder_objective, LossWeights, ProbForm};
use crossview::networks::{build_networks, NetGeometry};
use crossview::optim::{adam_step, AdamConfig, AdamState};
use crossview::rng::RngStream;
use crossview::tensor::Tensor;
use crossview::training::stack_images;
use crossview::Real;

fn main() {
    let corpus = make_corpus::<Real>(4, 32, 0xC0);
    let geom = NetGeometry::new(32, 16).unwrap();
    let mut rng = RngStream::new(1);
    let (mut e, g, d) = build_networks::<Real>(geom, &mut rng);
    let batch = 8;
    let xs = stack_images(corpus.samples().iter().take(batch).map(|s| s.image.tensor()));
    let bins: Vec<usize> = corpus.samples().iter().take(batch).map(|s| s.view.bin()).collect();
    let xt = stack_images(corpus.samples().iter().skip(9).take(batch).map(|s| s.image.tensor()));
    let bins_j: Vec<usize> = corpus.samples().iter().skip(9).take(batch).map(|s| s.view.bin()).collect();

    let w = LossWeights::<Real> { view_estimator: 1.0, ..LossWeights::default() };
    let adam_cfg = AdamConfig::<Real> { beta1: 0.0, beta2: 0.9, ..AdamConfig::default() };
    let mut state = AdamState::zeros_like(&e.tensors());

    for step in 0..400 {
        let mut t = Tape::new();
        let evars = e.bind(&mut t, true);
        let gvars = g.bind(&mut t, false);
        let dvars = d.bind(&mut t, false);
        let xi = t.constant(xs.clone());
        let xj = t.constant(xt.clone());
        let (total, report) = encoder_objective(
            &mut t,
            |t, x| e.forward(t, &evars, x, batch),
            |t, v, z| g.forward(t, &gvars, v, z),
            |t, x| d.forward(t, &dvars, x, batch),
            xi,
            xj,
            &bins,
            &bins_j,
            &w,
            ProbForm::Log,
            "overfit",
        );
        let vars = evars.vars();
        let grads = t.backward(total, &vars);
        let gts: Vec<Option<Tensor<Real>>> =
            vars.iter().map(|v| grads.get(*v).map(|g| t.value(g).clone())).collect();
        drop(t);
        adam_step(e.tensors_mut(), &gts, &mut state, &adam_cfg).unwrap();
        if step % 100 == 99 || step == 0 {
            println!(
                "step {:3}: ce {:.4} l1 {:.4} adv {:.4} total(max) {:.4}",
                step + 1,
                report.view_ce.unwrap(),
                report.l1.unwrap(),
                report.adversarial,
                report.total
            );
        }
    }
}
