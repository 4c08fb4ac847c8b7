//! Domain types shared by every other module: images in [-1, 1], one-hot
//! view codes over the 9 yaw bins, 119-dimensional latent codes, and the
//! operations that construct them.

use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use thiserror::Error;

/// Number of discrete yaw bins (one-hot view code length).
pub const VIEW_BINS: usize = 9;
/// Latent code dimensionality.
pub const LATENT_DIM: usize = 119;
/// Yaw grid: -60..=60 degrees in 15 degree steps.
pub const YAW_STEP_DEG: f64 = 15.0;
pub const YAW_MIN_DEG: f64 = -60.0;
pub const YAW_MAX_DEG: f64 = 60.0;

#[derive(Debug, Error, PartialEq)]
pub enum DomainError {
    #[error("view bin {0} out of range 0..9")]
    ViewBinOutOfRange(usize),
    #[error("yaw {0} degrees outside [{YAW_MIN_DEG}, {YAW_MAX_DEG}]")]
    YawOutOfRange(f64),
    #[error("image geometry mismatch: expected {expected:?}, got {got:?}")]
    GeometryMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("image values must be finite and within [-1, 1]")]
    ImageOutOfBounds,
}

/// Dense raster with values in [-1, 1], stored row-major as
/// `[height * width, channels]` (pixel rows, channel columns).
#[derive(Debug, Clone, PartialEq)]
pub struct Image<F> {
    height: usize,
    width: usize,
    pixels: Tensor<F>,
}

impl<F: Scalar> Image<F> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<F>) -> Result<Self, DomainError> {
        if data.len() != height * width * channels {
            return Err(DomainError::GeometryMismatch {
                expected: (height, width, channels),
                got: (data.len() / (width * channels).max(1), width, channels),
            });
        }
        let img = Image {
            height,
            width,
            pixels: Tensor::from_vec(height * width, channels, data),
        };
        if !img.in_bounds() {
            return Err(DomainError::ImageOutOfBounds);
        }
        Ok(img)
    }

    /// Constant-valued image (useful for tests and backgrounds).
    pub fn filled(height: usize, width: usize, channels: usize, value: F) -> Self {
        Image {
            height,
            width,
            pixels: Tensor::filled(height * width, channels, value),
        }
    }

    pub fn from_tensor(height: usize, width: usize, pixels: Tensor<F>) -> Self {
        assert_eq!(pixels.rows(), height * width);
        Image { height, width, pixels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.pixels.cols()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels())
    }

    pub fn tensor(&self) -> &Tensor<F> {
        &self.pixels
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor<F> {
        &mut self.pixels
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[F] {
        self.pixels.row(y * self.width + x)
    }

    pub fn in_bounds(&self) -> bool {
        self.pixels
            .data()
            .iter()
            .all(|v| v.is_finite() && *v >= -F::one() && *v <= F::one())
    }
}

/// One-hot code over the 9 view bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViewCode {
    bin: usize,
}

impl ViewCode {
    pub fn bin(&self) -> usize {
        self.bin
    }

    pub fn yaw_degrees(&self) -> f64 {
        YAW_MIN_DEG + YAW_STEP_DEG * self.bin as f64
    }

    pub fn to_vec<F: Scalar>(&self) -> Vec<F> {
        let mut v = vec![F::zero(); VIEW_BINS];
        v[self.bin] = F::one();
        v
    }
}

/// Probability vector over the 9 view bins.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewDistribution<F> {
    probs: [F; VIEW_BINS],
}

impl<F: Scalar> ViewDistribution<F> {
    /// Validates nonnegativity and normalization (1e-5 tolerance).
    pub fn new(probs: [F; VIEW_BINS]) -> Option<Self> {
        let sum = probs.iter().fold(F::zero(), |a, &b| a + b);
        let ok = probs.iter().all(|p| *p >= F::zero() && p.is_finite())
            && (sum - F::one()).abs() <= F::of_f64(1e-5);
        ok.then_some(ViewDistribution { probs })
    }

    /// Softmax of raw logits.
    pub fn from_logits(logits: &[F]) -> Self {
        assert_eq!(logits.len(), VIEW_BINS);
        let max = logits.iter().cloned().fold(F::neg_infinity(), F::max);
        let exps: Vec<F> = logits.iter().map(|&l| (l - max).exp()).collect();
        let sum = exps.iter().fold(F::zero(), |a, &b| a + b);
        let mut probs = [F::zero(); VIEW_BINS];
        for (p, e) in probs.iter_mut().zip(exps) {
            *p = e / sum;
        }
        ViewDistribution { probs }
    }

    pub fn probs(&self) -> &[F; VIEW_BINS] {
        &self.probs
    }

    pub fn max_prob(&self) -> F {
        self.probs.iter().cloned().fold(F::zero(), F::max)
    }
}

/// 119-dimensional identity code with components in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Latent<F> {
    code: Vec<F>,
}

impl<F: Scalar> Latent<F> {
    pub fn new(code: Vec<F>) -> Option<Self> {
        (code.len() == LATENT_DIM
            && code.iter().all(|c| c.is_finite() && *c >= -F::one() && *c <= F::one()))
        .then_some(Latent { code })
    }

    pub fn code(&self) -> &[F] {
        &self.code
    }
}

/// Draw a latent code componentwise uniform on [-1, 1].
pub fn sample_latent<F: Scalar>(rng: &mut RngStream) -> Latent<F> {
    let code = (0..LATENT_DIM)
        .map(|_| F::of_f64(rng.uniform_in(-1.0, 1.0)))
        .collect();
    Latent { code }
}

/// One-hot view code for a bin index.
pub fn one_hot_view(index: usize) -> Result<ViewCode, DomainError> {
    if index >= VIEW_BINS {
        return Err(DomainError::ViewBinOutOfRange(index));
    }
    Ok(ViewCode { bin: index })
}

/// Map a continuous yaw angle to the nearest bin on the 15-degree grid.
/// Exact midpoints round toward the larger angle.
pub fn view_bin_of_angle(yaw_degrees: f64) -> Result<ViewCode, DomainError> {
    if !(YAW_MIN_DEG..=YAW_MAX_DEG).contains(&yaw_degrees) || yaw_degrees.is_nan() {
        return Err(DomainError::YawOutOfRange(yaw_degrees));
    }
    let pos = (yaw_degrees - YAW_MIN_DEG) / YAW_STEP_DEG;
    let bin = ((pos + 0.5).floor() as usize).min(VIEW_BINS - 1);
    Ok(ViewCode { bin })
}

/// One-hot rows for a batch of view bins: `[B, 9]`.
pub fn one_hot_matrix<F: Scalar>(bins: &[usize]) -> Tensor<F> {
    let mut t = Tensor::zeros(bins.len(), VIEW_BINS);
    for (i, &b) in bins.iter().enumerate() {
        assert!(b < VIEW_BINS, "bin out of range");
        t.set(i, b, F::one());
    }
    t
}

/// The one-hot code closest to a view distribution: argmax, ties to the
/// lowest index.
pub fn nearest_one_hot<F: Scalar>(dist: &ViewDistribution<F>) -> ViewCode {
    let mut best = 0;
    for i in 1..VIEW_BINS {
        if dist.probs[i] > dist.probs[best] {
            best = i;
        }
    }
    ViewCode { bin: best }
}
