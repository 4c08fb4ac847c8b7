//! Per-term gradient norms into the encoder trunk: evaluate the encoder
//! objective with all-but-one weight zeroed and compare trunk gradients.

use crossview::autodiff::Tape;
use crossview::data::make_corpus;
use crossview::losses::{encoder_objective, LossWeights, ProbForm};
use crossview::networks::{build_networks, NetGeometry};
use crossview::rng::RngStream;
use crossview::training::stack_images;
use crossview::Real;

fn main() {
    let corpus = make_corpus::<Real>(30, 32, 0xC0);
    let geom = NetGeometry::new(32, 16).unwrap();
    let mut rng = RngStream::new(1);
    let (e, g, d) = build_networks::<Real>(geom, &mut rng);
    let batch = 8;
    let xs = stack_images(corpus.samples().iter().take(batch).map(|s| s.image.tensor()));
    let bins: Vec<usize> = corpus.samples().iter().take(batch).map(|s| s.view.bin()).collect();
    let xt = stack_images(corpus.samples().iter().skip(9).take(batch).map(|s| s.image.tensor()));
    let bins_j: Vec<usize> = corpus.samples().iter().skip(9).take(batch).map(|s| s.view.bin()).collect();

    // (adv-only keeps every lambda at 0; the D_s term has implicit weight 1)
    let variants: [(&str, LossWeights<Real>); 4] = [
        ("adv only ", LossWeights { gradient_penalty: 0.0, view_real: 0.0, view_fake: 0.0, reconstruction: 0.0, view_estimator: 0.0 }),
        ("viewfake 1", LossWeights { gradient_penalty: 0.0, view_real: 0.0, view_fake: 1.0, reconstruction: 0.0, view_estimator: 0.0 }),
        ("l1     1  ", LossWeights { gradient_penalty: 0.0, view_real: 0.0, view_fake: 0.0, reconstruction: 1.0, view_estimator: 0.0 }),
        ("ce     1  ", LossWeights { gradient_penalty: 0.0, view_real: 0.0, view_fake: 0.0, reconstruction: 0.0, view_estimator: 1.0 }),
    ];
    for (name, w) in variants {
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
            xi, xj, &bins, &bins_j, &w, ProbForm::Log, "terms",
        );
        let vars = evars.vars();
        let grads = t.backward(total, &vars);
        let names: Vec<String> = e.tensors().iter().map(|(n, _)| n.clone()).collect();
        let norm_of = |key: &str| -> f64 {
            names
                .iter()
                .zip(&vars)
                .find(|(n, _)| n.as_str() == key)
                .and_then(|(_, v)| grads.get(*v))
                .map(|g| t.value(g).sq_norm().sqrt() as f64)
                .unwrap_or(0.0)
        };
        println!(
            "{name}: conv_in {:.3e}  block2.c2 {:.3e}  latent_head {:.3e}  view_head {:.3e}",
            norm_of("e.conv_in.w"),
            norm_of("e.block2.c2.w"),
            norm_of("e.latent.w"),
            norm_of("e.view.w"),
        );
    }
}
