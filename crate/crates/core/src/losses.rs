//! Objective terms for both training pathways.
//!
//! Each update direction has a scalar "formula" function (the weighted
//! combination of term values, written out separately for the supervised and
//! self-supervised variants so their equivalence can be tested rather than
//! assumed) and a tape builder that produces the differentiable total plus a
//! [`LossReport`] snapshot.
//!
//! Sign convention: critic totals are minimized as written; generator and
//! encoder totals are maximized in the papers' convention, so their tape
//! builders return the negated total for a minimizer while the report keeps
//! the maximization-direction value.

use crate::autodiff::{Tape, Var};
use crate::domain::{one_hot_matrix, Image, ViewCode, VIEW_BINS};
use crate::networks::DiscriminatorD;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("image geometry mismatch between operands")]
    GeometryMismatch,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Coefficients of the five weighted terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights<F> {
    /// Gradient-penalty coefficient (default 10).
    pub gradient_penalty: F,
    /// View-classification term on real images, critic updates (default 1).
    pub view_real: F,
    /// View-classification term on generated images (default 1).
    pub view_fake: F,
    /// Reconstruction L1 coefficient (default 1).
    pub reconstruction: F,
    /// Encoder view cross-entropy coefficient (default 0.01).
    pub view_estimator: F,
}

impl<F: Scalar> Default for LossWeights<F> {
    fn default() -> Self {
        LossWeights {
            gradient_penalty: F::of_f64(10.0),
            view_real: F::one(),
            view_fake: F::one(),
            reconstruction: F::one(),
            view_estimator: F::of_f64(0.01),
        }
    }
}

impl<F: Scalar> LossWeights<F> {
    pub fn validate(&self) -> bool {
        [
            self.gradient_penalty,
            self.view_real,
            self.view_fake,
            self.reconstruction,
            self.view_estimator,
        ]
        .iter()
        .all(|w| w.is_finite() && *w >= F::zero())
    }
}

/// How view-classification probabilities enter the objectives: log form
/// (log-softmax, the usual auxiliary-classifier objective) or raw softmax
/// probabilities (ablation).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProbForm {
    #[default]
    Log,
    Raw,
}

/// Named term values of one objective evaluation plus the combined total
/// (in the direction the paper writes: minimized for critic updates,
/// maximized for generator/encoder updates).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport<F> {
    pub name: &'static str,
    pub adversarial: F,
    pub penalty: Option<F>,
    pub view: F,
    pub l1: Option<F>,
    pub view_ce: Option<F>,
    pub total: F,
}

impl<F: Scalar> LossReport<F> {
    /// Recompute the weighted combination from the stored terms; the report
    /// invariant is `total == weighted sum` to 1e-6 relative.
    pub fn weighted_sum(&self, w: &LossWeights<F>) -> F {
        match (self.penalty, self.l1, self.view_ce) {
            (Some(pen), None, None) => {
                self.adversarial + w.gradient_penalty * pen - w.view_real * self.view
            }
            (None, Some(l1), Some(ce)) => {
                self.adversarial + w.view_fake * self.view
                    - w.reconstruction * l1
                    - w.view_estimator * ce
            }
            (None, None, None) => self.adversarial + w.view_fake * self.view,
            _ => unreachable!("no objective mixes penalty with reconstruction terms"),
        }
    }

    pub fn is_consistent(&self, w: &LossWeights<F>, rel_tol: f64) -> bool {
        let expect = self.weighted_sum(w).into_f64();
        let got = self.total.into_f64();
        (expect - got).abs() <= rel_tol * 1.0f64.max(expect.abs())
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.adversarial.is_finite()
            && self.view.is_finite()
            && self.penalty.map_or(true, |x| x.is_finite())
            && self.l1.map_or(true, |x| x.is_finite())
            && self.view_ce.map_or(true, |x| x.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Formula combinators (scalar stand-in forms of the eight objectives)
// ---------------------------------------------------------------------------

/// Term-level objective formulas. Supervised and self-supervised variants
/// are written out independently; unit and acceptance tests check that each
/// self-supervised formula equals its supervised counterpart under the
/// pseudo-label substitution.
pub mod formulas {
    use super::LossWeights;
    use crate::scalar::Scalar;

    /// Generation path, critic update (minimized).
    pub fn gen_critic<F: Scalar>(ds_fake: F, ds_real: F, penalty: F, view_real: F, w: &LossWeights<F>) -> F {
        ds_fake - ds_real + w.gradient_penalty * penalty - w.view_real * view_real
    }

    /// Generation path, generator update (maximized).
    pub fn gen_generator<F: Scalar>(ds_fake: F, view_fake: F, w: &LossWeights<F>) -> F {
        ds_fake + w.view_fake * view_fake
    }

    /// Reconstruction path, critic update (minimized).
    pub fn recon_critic<F: Scalar>(ds_fake: F, ds_real: F, penalty: F, view_real: F, w: &LossWeights<F>) -> F {
        ds_fake - ds_real + w.gradient_penalty * penalty - w.view_real * view_real
    }

    /// Reconstruction path, encoder update (maximized).
    pub fn recon_encoder<F: Scalar>(ds_fake: F, view_fake: F, l1: F, view_ce: F, w: &LossWeights<F>) -> F {
        ds_fake + w.view_fake * view_fake - w.reconstruction * l1 - w.view_estimator * view_ce
    }

    /// Self-supervised reconstruction path, critic update: the supervised
    /// critic objective with the sample reconstructed to itself and the
    /// pseudo-label as the view target.
    pub fn self_recon_critic<F: Scalar>(
        ds_self_recon: F,
        ds_real: F,
        penalty: F,
        view_real_at_pseudo: F,
        w: &LossWeights<F>,
    ) -> F {
        ds_self_recon - ds_real + w.gradient_penalty * penalty - w.view_real * view_real_at_pseudo
    }

    /// Self-supervised reconstruction path, encoder update (maximized).
    pub fn self_recon_encoder<F: Scalar>(
        ds_self_recon: F,
        view_recon_at_pseudo: F,
        l1_self: F,
        view_ce_at_pseudo: F,
        w: &LossWeights<F>,
    ) -> F {
        ds_self_recon + w.view_fake * view_recon_at_pseudo
            - w.reconstruction * l1_self
            - w.view_estimator * view_ce_at_pseudo
    }

    /// Self-supervised generation path, critic update (minimized).
    pub fn self_gen_critic<F: Scalar>(
        ds_fake_at_pseudo: F,
        ds_real: F,
        penalty: F,
        view_real_at_pseudo: F,
        w: &LossWeights<F>,
    ) -> F {
        ds_fake_at_pseudo - ds_real + w.gradient_penalty * penalty - w.view_real * view_real_at_pseudo
    }

    /// Self-supervised generation path, generator update (maximized), with
    /// the pseudo-label conditioning the generated image and serving as the
    /// classification target.
    pub fn self_gen_generator<F: Scalar>(ds_fake_at_pseudo: F, view_fake_at_pseudo: F, w: &LossWeights<F>) -> F {
        ds_fake_at_pseudo + w.view_fake * view_fake_at_pseudo
    }
}

// ---------------------------------------------------------------------------
// Elementary operations
// ---------------------------------------------------------------------------

/// `eps * x_real + (1 - eps) * x_fake`, one image.
pub fn interpolate<F: Scalar>(x_real: &Image<F>, x_fake: &Image<F>, eps: F) -> Result<Image<F>, LossError> {
    if x_real.shape() != x_fake.shape() {
        return Err(LossError::GeometryMismatch);
    }
    let px = x_real
        .tensor()
        .zip(x_fake.tensor(), |a, b| eps * a + (F::one() - eps) * b);
    Ok(Image::from_tensor(x_real.height(), x_real.width(), px))
}

/// Batch interpolation with one epsilon per sample. `rows_per_sample` is
/// `h*w` for image matrices.
pub fn interpolate_batch<F: Scalar>(
    x_real: &Tensor<F>,
    x_fake: &Tensor<F>,
    eps: &[F],
    rows_per_sample: usize,
) -> Tensor<F> {
    assert_eq!(x_real.shape(), x_fake.shape());
    assert_eq!(x_real.rows(), eps.len() * rows_per_sample);
    let mut out = x_real.clone();
    let c = out.cols();
    for r in 0..out.rows() {
        let e = eps[r / rows_per_sample];
        let dst = &mut out.data_mut()[r * c..(r + 1) * c];
        let src = &x_fake.row(r).to_vec();
        for (d, &f) in dst.iter_mut().zip(src.iter()) {
            *d = e * *d + (F::one() - e) * f;
        }
    }
    out
}

/// Log-probability of the hot view under softmax of `logits`; always <= 0.
pub fn view_log_prob<F: Scalar>(logits: &[F], v: ViewCode) -> F {
    assert_eq!(logits.len(), VIEW_BINS);
    let max = logits.iter().cloned().fold(F::neg_infinity(), F::max);
    let lse = logits
        .iter()
        .map(|&l| (l - max).exp())
        .fold(F::zero(), |a, b| a + b)
        .ln()
        + max;
    logits[v.bin()] - lse
}

/// Cross-entropy of the hot view: `-view_log_prob`; always >= 0.
pub fn view_cross_entropy<F: Scalar>(logits: &[F], v: ViewCode) -> F {
    -view_log_prob(logits, v)
}

/// Mean absolute difference between two images.
pub fn l1_loss<F: Scalar>(a: &Image<F>, b: &Image<F>) -> Result<F, LossError> {
    if a.shape() != b.shape() {
        return Err(LossError::GeometryMismatch);
    }
    let mut acc = F::zero();
    for (x, y) in a.tensor().data().iter().zip(b.tensor().data()) {
        acc += (*x - *y).abs();
    }
    Ok(acc / F::from_usize(a.tensor().len()).unwrap())
}

/// Lipschitz penalty `(|d D_s / d x_hat|_2 - 1)^2` for one image.
pub fn gradient_penalty<F: Scalar>(d: &DiscriminatorD<F>, x_hat: &Image<F>) -> Result<F, LossError> {
    let mut t = Tape::new();
    let dvars = d.bind(&mut t, false);
    let x = t.leaf(x_hat.tensor().clone(), true);
    let hw = x_hat.height() * x_hat.width();
    let pen = gradient_penalty_on_tape(&mut t, |t, x| d.forward_score(t, &dvars, x, 1), x, hw);
    let v = t.value(pen).at(0, 0);
    if !v.is_finite() {
        return Err(LossError::NonFinite("gradient penalty"));
    }
    Ok(v)
}

// ---------------------------------------------------------------------------
// Tape builders
// ---------------------------------------------------------------------------

/// Mean over samples of `(|grad of realism score w.r.t. x_hat|_2 - 1)^2`.
/// `x_hat` must be a gradient-tracked leaf with `rows_per_sample` rows per
/// sample; `score_fn` is the critic's realism head (the only part
/// differentiated). The norm runs over all pixels and channels of a sample.
pub fn gradient_penalty_on_tape<F: Scalar>(
    t: &mut Tape<F>,
    score_fn: impl FnOnce(&mut Tape<F>, Var) -> Var,
    x_hat: Var,
    rows_per_sample: usize,
) -> Var {
    let score = score_fn(t, x_hat);
    let ssum = t.sum_all(score);
    let grads = t.backward(ssum, &[x_hat]);
    let gx = grads.get(x_hat).expect("x_hat feeds the score");
    let sq = t.mul(gx, gx);
    let per_pixel = t.sum_cols(sq);
    let per_sample = t.group_sum_rows(per_pixel, rows_per_sample);
    // tiny epsilon keeps sqrt differentiable at zero-gradient critics
    let shifted = t.add_const(per_sample, F::of_f64(1e-12));
    let norm = t.sqrt(shifted);
    let dev = t.add_const(norm, -F::one());
    let sqdev = t.mul(dev, dev);
    t.mean_all(sqdev)
}

/// Mean view term for a batch: log-softmax (or raw softmax) probability of
/// each row's target bin.
pub fn view_term_on_tape<F: Scalar>(t: &mut Tape<F>, logits: Var, bins: &[usize], form: ProbForm) -> Var {
    let (b, c) = t.value(logits).shape();
    assert_eq!(c, VIEW_BINS);
    assert_eq!(b, bins.len());
    // stability shift by the row max, treated as a constant
    let mut mx = Tensor::zeros(b, 1);
    for i in 0..b {
        let row = t.value(logits).row(i);
        mx.set(i, 0, row.iter().cloned().fold(F::neg_infinity(), F::max));
    }
    let mxc = t.constant(mx);
    let mxb = t.broadcast_col(mxc, VIEW_BINS);
    let shifted = t.sub(logits, mxb);
    let e = t.exp(shifted);
    let s = t.sum_cols(e);
    let lse = t.ln(s);
    let lse_b = t.broadcast_col(lse, VIEW_BINS);
    let logsm = t.sub(shifted, lse_b);
    let hot = t.constant(one_hot_matrix(bins));
    let picked = t.mul(logsm, hot);
    let per_row = t.sum_cols(picked);
    let per_row = match form {
        ProbForm::Log => per_row,
        ProbForm::Raw => t.exp(per_row),
    };
    t.mean_all(per_row)
}

/// Mean absolute difference of two image matrices.
pub fn l1_on_tape<F: Scalar>(t: &mut Tape<F>, a: Var, b: Var) -> Var {
    let d = t.sub(a, b);
    let ad = t.abs(d);
    t.mean_all(ad)
}

fn scalar_of<F: Scalar>(t: &Tape<F>, v: Var) -> F {
    t.value(v).at(0, 0)
}

/// Critic-update objective shared by both pathways (the reconstruction and
/// self-supervised variants substitute their own fake images and view
/// targets). `heads_fn` maps an image var to (view logits, realism score);
/// `score_fn` is the realism head alone for the penalty path. Returns the
/// scalar total to minimize plus the report.
#[allow(clippy::too_many_arguments)]
pub fn critic_objective<F: Scalar>(
    t: &mut Tape<F>,
    mut heads_fn: impl FnMut(&mut Tape<F>, Var) -> (Var, Var),
    score_fn: impl FnOnce(&mut Tape<F>, Var) -> Var,
    x_real: Var,
    x_fake: Var,
    x_hat: Var,
    real_bins: &[usize],
    rows_per_sample: usize,
    w: &LossWeights<F>,
    form: ProbForm,
    name: &'static str,
) -> (Var, LossReport<F>) {
    let (_, score_fake) = heads_fn(t, x_fake);
    let (logits_real, score_real) = heads_fn(t, x_real);
    let mean_fake = t.mean_all(score_fake);
    let mean_real = t.mean_all(score_real);
    let adv = t.sub(mean_fake, mean_real);
    let pen = gradient_penalty_on_tape(t, score_fn, x_hat, rows_per_sample);
    let view = view_term_on_tape(t, logits_real, real_bins, form);

    let pen_w = t.scale(pen, w.gradient_penalty);
    let view_w = t.scale(view, -w.view_real);
    let partial = t.add(adv, pen_w);
    let total = t.add(partial, view_w);

    let report = LossReport {
        name,
        adversarial: scalar_of(t, adv),
        penalty: Some(scalar_of(t, pen)),
        view: scalar_of(t, view),
        l1: None,
        view_ce: None,
        total: scalar_of(t, total),
    };
    (total, report)
}

/// Generator-update objective (both pathways): maximize realism plus the
/// view term of generated images. `gen_fn` maps (views, latents) vars to an
/// image var; `heads_fn` is the (frozen) critic. Returns the negated total
/// for a minimizer.
#[allow(clippy::too_many_arguments)]
pub fn generator_objective<F: Scalar>(
    t: &mut Tape<F>,
    gen_fn: impl FnOnce(&mut Tape<F>, Var, Var) -> Var,
    heads_fn: impl FnOnce(&mut Tape<F>, Var) -> (Var, Var),
    views: &Tensor<F>,
    latents: &Tensor<F>,
    target_bins: &[usize],
    w: &LossWeights<F>,
    form: ProbForm,
    name: &'static str,
) -> (Var, LossReport<F>) {
    let v = t.constant(views.clone());
    let z = t.constant(latents.clone());
    let fake = gen_fn(t, v, z);
    let (logits_fake, score_fake) = heads_fn(t, fake);
    let adv = t.mean_all(score_fake);
    let view = view_term_on_tape(t, logits_fake, target_bins, form);
    let view_w = t.scale(view, w.view_fake);
    let total_max = t.add(adv, view_w);
    let minimized = t.neg(total_max);

    let report = LossReport {
        name,
        adversarial: scalar_of(t, adv),
        penalty: None,
        view: scalar_of(t, view),
        l1: None,
        view_ce: None,
        total: scalar_of(t, total_max),
    };
    (minimized, report)
}

/// Encoder-update objective (both pathways): the encoder feeds the frozen
/// generator, which must reconstruct the target view; the encoder's own view
/// logits are pushed toward the input's view label. `enc_fn` maps an image
/// var to (view logits, latent); `gen_fn` and `heads_fn` are the frozen
/// generator and critic. Returns the negated total for a minimizer.
#[allow(clippy::too_many_arguments)]
pub fn encoder_objective<F: Scalar>(
    t: &mut Tape<F>,
    enc_fn: impl FnOnce(&mut Tape<F>, Var) -> (Var, Var),
    gen_fn: impl FnOnce(&mut Tape<F>, Var, Var) -> Var,
    heads_fn: impl FnOnce(&mut Tape<F>, Var) -> (Var, Var),
    x_input: Var,
    x_target: Var,
    input_bins: &[usize],
    target_bins: &[usize],
    w: &LossWeights<F>,
    form: ProbForm,
    name: &'static str,
) -> (Var, LossReport<F>) {
    let batch = input_bins.len();
    assert_eq!(batch, target_bins.len());
    let (enc_logits, z) = enc_fn(t, x_input);
    let v_target = t.constant(one_hot_matrix(target_bins));
    let recon = gen_fn(t, v_target, z);
    let (logits_recon, score_recon) = heads_fn(t, recon);

    let adv = t.mean_all(score_recon);
    let view = view_term_on_tape(t, logits_recon, target_bins, form);
    let l1 = l1_on_tape(t, recon, x_target);
    // the encoder's view head always trains in cross-entropy form
    let enc_log_prob = view_term_on_tape(t, enc_logits, input_bins, ProbForm::Log);
    let ce = t.neg(enc_log_prob);

    let view_w = t.scale(view, w.view_fake);
    let l1_w = t.scale(l1, -w.reconstruction);
    let ce_w = t.scale(ce, -w.view_estimator);
    let s1 = t.add(adv, view_w);
    let s2 = t.add(s1, l1_w);
    let total_max = t.add(s2, ce_w);
    let minimized = t.neg(total_max);

    let report = LossReport {
        name,
        adversarial: scalar_of(t, adv),
        penalty: None,
        view: scalar_of(t, view),
        l1: Some(scalar_of(t, l1)),
        view_ce: Some(scalar_of(t, ce)),
        total: scalar_of(t, total_max),
    };
    (minimized, report)
}
