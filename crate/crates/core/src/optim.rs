//! Adam with bias correction. Momentum pair defaults to (0.0, 0.9) with
//! learning rate 5e-4, the WGAN-GP convention.

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("gradient shape {got:?} does not match parameter shape {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig<F> {
    pub learning_rate: F,
    pub beta1: F,
    pub beta2: F,
    pub epsilon: F,
}

impl<F: Scalar> Default for AdamConfig<F> {
    fn default() -> Self {
        AdamConfig {
            learning_rate: F::of_f64(5e-4),
            beta1: F::zero(),
            beta2: F::of_f64(0.9),
            epsilon: F::of_f64(1e-8),
        }
    }
}

/// First/second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentPair<F> {
    pub m: Tensor<F>,
    pub v: Tensor<F>,
}

/// Optimizer state for an ordered parameter list (one network).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub moments: Vec<MomentPair<F>>,
    /// Number of updates applied (drives bias correction).
    pub step: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn zeros_like(params: &[(String, &Tensor<F>)]) -> Self {
        AdamState {
            moments: params
                .iter()
                .map(|(_, t)| MomentPair {
                    m: Tensor::zeros(t.rows(), t.cols()),
                    v: Tensor::zeros(t.rows(), t.cols()),
                })
                .collect(),
            step: 0,
        }
    }
}

/// One Adam update for a single tensor; `state_step` is the post-increment
/// step count (1 on the first call).
pub fn adam_update<F: Scalar>(
    param: &mut Tensor<F>,
    grad: &Tensor<F>,
    moments: &mut MomentPair<F>,
    state_step: u64,
    cfg: &AdamConfig<F>,
) -> Result<(), OptimError> {
    if param.shape() != grad.shape() {
        return Err(OptimError::ShapeMismatch {
            expected: param.shape(),
            got: grad.shape(),
        });
    }
    let b1 = cfg.beta1;
    let b2 = cfg.beta2;
    let bc1 = F::one() - b1.powi(state_step as i32);
    let bc2 = F::one() - b2.powi(state_step as i32);
    let pd = param.data_mut();
    let md = moments.m.data_mut();
    let vd = moments.v.data_mut();
    for i in 0..pd.len() {
        let g = grad.data()[i];
        md[i] = b1 * md[i] + (F::one() - b1) * g;
        vd[i] = b2 * vd[i] + (F::one() - b2) * g * g;
        let mhat = md[i] / bc1;
        let vhat = vd[i] / bc2;
        pd[i] = pd[i] - cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

/// Apply Adam across an ordered parameter list. Gradients may be absent for
/// parameters that did not participate (treated as zero gradient: moments
/// still decay).
pub fn adam_step<F: Scalar>(
    params: Vec<&mut Tensor<F>>,
    grads: &[Option<Tensor<F>>],
    state: &mut AdamState<F>,
    cfg: &AdamConfig<F>,
) -> Result<(), OptimError> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.moments.len());
    state.step += 1;
    let stepno = state.step;
    for ((p, g), mom) in params.into_iter().zip(grads).zip(&mut state.moments) {
        match g {
            Some(g) => adam_update(p, g, mom, stepno, cfg)?,
            None => {
                let zeros = Tensor::zeros(p.rows(), p.cols());
                adam_update(p, &zeros, mom, stepno, cfg)?;
            }
        }
    }
    Ok(())
}
