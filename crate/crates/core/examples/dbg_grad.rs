//! Inspect the encoder-objective gradient field: magnitude per tensor, a
//! finite-difference spot check on the view head, and a pure view-CE
//! training loop with the paper's Adam momenta.

use crossview::autodiff::Tape;
use crossview::data::{make_corpus, split_corpus};
use crossview::domain::VIEW_BINS;
use crossview::evaluation::eval_view_accuracy;
use crossview::losses::{encoder_objective, view_term_on_tape, LossWeights, ProbForm};
use crossview::networks::build_networks;
use crossview::optim::{adam_step, AdamConfig, AdamState};
use crossview::rng::RngStream;
use crossview::training::stack_images;
use crossview::Real;

fn main() {
    let full = make_corpus::<Real>(250, 32, 0xC0);
    let (train, hold) = split_corpus(&full, 0.8, 0xC0).unwrap();
    let geom = crossview::networks::NetGeometry::new(32, 16).unwrap();
    let mut rng = RngStream::new(1);
    let (e, g, d) = build_networks::<Real>(geom, &mut rng);

    let batch = 8;
    let xs = stack_images(train.samples().iter().take(batch).map(|s| s.image.tensor()));
    let bins: Vec<usize> = train.samples().iter().take(batch).map(|s| s.view.bin()).collect();
    let bins_j: Vec<usize> = train.samples().iter().skip(9).take(batch).map(|s| s.view.bin()).collect();
    let xt = stack_images(train.samples().iter().skip(9).take(batch).map(|s| s.image.tensor()));

    // gradient norms per tensor through the full encoder objective
    let w = LossWeights::<Real>::default();
    let mut t = Tape::new();
    let evars = e.bind(&mut t, true);
    let gvars = g.bind(&mut t, false);
    let dvars = d.bind(&mut t, false);
    let xi = t.constant(xs.clone());
    let xj = t.constant(xt.clone());
    let (total, _) = encoder_objective(
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
        "probe",
    );
    let vars = evars.vars();
    let grads = t.backward(total, &vars);
    let names: Vec<String> = e.tensors().iter().map(|(n, _)| n.clone()).collect();
    for (name, v) in names.iter().zip(&vars) {
        let gn = grads
            .get(*v)
            .map(|g| t.value(g).sq_norm().sqrt())
            .unwrap_or(-1.0);
        if name.contains("view") || name.contains("latent") || name.contains("conv_in") {
            println!("grad |{name}| = {gn:.6e}");
        }
    }

    // finite-difference spot check on two entries of e.view.w
    let eval_total = |enc: &crossview::networks::EncoderE<Real>| -> f64 {
        let mut t = Tape::new();
        let evars = enc.bind(&mut t, true);
        let gvars = g.bind(&mut t, false);
        let dvars = d.bind(&mut t, false);
        let xi = t.constant(xs.clone());
        let xj = t.constant(xt.clone());
        let (total, _) = encoder_objective(
            &mut t,
            |t, x| enc.forward(t, &evars, x, batch),
            |t, v, z| g.forward(t, &gvars, v, z),
            |t, x| d.forward(t, &dvars, x, batch),
            xi,
            xj,
            &bins,
            &bins_j,
            &w,
            ProbForm::Log,
            "probe",
        );
        t.value(total).at(0, 0) as f64
    };
    let view_w_index = names.iter().position(|n| n == "e.view.w").unwrap();
    let analytic = grads.get(vars[view_w_index]).map(|gv| t.value(gv).clone()).unwrap();
    for entry in [0usize, 777] {
        let mut ep = e.clone();
        let h = 1e-3f32;
        ep.tensors_mut()[view_w_index].data_mut()[entry] += h;
        let up = eval_total(&ep);
        ep.tensors_mut()[view_w_index].data_mut()[entry] -= 2.0 * h;
        let down = eval_total(&ep);
        let fd = (up - down) / (2.0 * h as f64);
        println!(
            "e.view.w[{entry}]: analytic {:.6e}, finite-diff {fd:.6e}",
            analytic.data()[entry]
        );
    }

    // pure view-CE training of the encoder with beta1 = 0 (paper momenta)
    let mut enc = e.clone();
    let adam_cfg = AdamConfig::<Real> { beta1: 0.0, beta2: 0.9, ..AdamConfig::default() };
    let mut state = AdamState::zeros_like(&enc.tensors());
    let mut order_rng = RngStream::new(5);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for step in 0..1000 {
        if step % (train.len() / 16) == 0 {
            order_rng.shuffle(&mut order);
        }
        let at = (step * 16) % (train.len() - 16);
        let idx = &order[at..at + 16];
        let bx = stack_images(idx.iter().map(|&i| train.get(i).image.tensor()));
        let bb: Vec<usize> = idx.iter().map(|&i| train.get(i).view.bin()).collect();
        let mut t = Tape::new();
        let evars = enc.bind(&mut t, true);
        let x = t.constant(bx);
        let (logits, _) = enc.forward(&mut t, &evars, x, 16);
        let lp = view_term_on_tape(&mut t, logits, &bb, ProbForm::Log);
        let loss = t.neg(lp);
        let vars = evars.vars();
        let grads = t.backward(loss, &vars);
        let gts: Vec<Option<crossview::tensor::Tensor<Real>>> =
            vars.iter().map(|v| grads.get(*v).map(|g| t.value(g).clone())).collect();
        drop(t);
        adam_step(enc.tensors_mut(), &gts, &mut state, &adam_cfg).unwrap();
        if step % 250 == 249 {
            let acc = eval_view_accuracy(&enc, &hold).unwrap();
            println!("pure-CE step {}: held-out view accuracy {acc:.3}", step + 1);
        }
    }
    let _ = VIEW_BINS;
}
