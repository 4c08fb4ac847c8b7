//! Encoder, generator and critic: residual stacks over the tape ops.
//!
//! The generator consumes the 128-wide concatenation of a one-hot view code
//! and a 119-d latent, starts from a 4x4 map and upsamples to the target
//! size. Critic and encoder share the trunk shape (strided residual
//! downsampling, global mean pool) but no parameters. The critic's realism
//! head is a raw linear output; the encoder's latent head saturates through
//! tanh so its range matches the latent prior's support, and its view head
//! returns unnormalized logits. No normalization layers anywhere: the critic
//! is Lipschitz-penalized, and at this scale the residual trunks train fine
//! without them.

use crate::autodiff::{Spatial, Tape, Var};
use crate::domain::{DomainError, Image, Latent, ViewCode, ViewDistribution, LATENT_DIM, VIEW_BINS};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use thiserror::Error;

pub const IMAGE_CHANNELS: usize = 3;
/// Generator input width: one-hot view code plus latent code.
pub const GEN_INPUT_DIM: usize = VIEW_BINS + LATENT_DIM;
/// Side length of the generator's initial feature map.
const BASE_SIDE: usize = 4;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("unsupported image size {0}: expected 32 or 64")]
    UnsupportedImageSize(usize),
    #[error("channel multiplier {0} too small: need >= 8")]
    WidthTooSmall(usize),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// Shared geometry of all three networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetGeometry {
    pub image_size: usize,
    /// Channel multiplier (trunk width).
    pub width: usize,
}

impl NetGeometry {
    pub fn new(image_size: usize, width: usize) -> Result<Self, NetworkError> {
        if image_size != 32 && image_size != 64 {
            return Err(NetworkError::UnsupportedImageSize(image_size));
        }
        if width < 8 {
            return Err(NetworkError::WidthTooSmall(width));
        }
        Ok(NetGeometry { image_size, width })
    }

    /// Number of 2x resampling blocks between 4x4 and the image size.
    pub fn n_blocks(&self) -> usize {
        (self.image_size / BASE_SIDE).trailing_zeros() as usize
    }

    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size
    }

    pub fn spatial(&self, batch: usize) -> Spatial {
        Spatial::new(batch, self.image_size, self.image_size)
    }

    /// Flattened trunk feature width (4x4 base map times channel width).
    pub fn feature_dim(&self) -> usize {
        16 * self.width
    }
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<F> {
    pub w: Tensor<F>, // [in, out]
    pub b: Tensor<F>, // [1, out]
}

impl<F: Scalar> Dense<F> {
    pub(crate) fn init(fan_in: usize, fan_out: usize, gain: f64, rng: &mut RngStream) -> Self {
        let std = (gain / fan_in as f64).sqrt();
        Self::init_std(fan_in, fan_out, std, rng)
    }

    /// Near-zero init for classifier heads: a random head direction takes
    /// the optimizer thousands of steps to unlearn before any view signal
    /// shows, so heads start at a small fraction of the trunk's scale.
    pub(crate) fn init_std(fan_in: usize, fan_out: usize, std: f64, rng: &mut RngStream) -> Self {
        let w = Tensor::from_vec(
            fan_in,
            fan_out,
            (0..fan_in * fan_out)
                .map(|_| F::of_f64(rng.normal() * std))
                .collect(),
        );
        Dense { w, b: Tensor::zeros(1, fan_out) }
    }
}

const HEAD_INIT_STD: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv3<F> {
    pub w: Tensor<F>, // [cin*9, cout]
    pub b: Tensor<F>, // [1, cout]
}

impl<F: Scalar> Conv3<F> {
    fn init(cin: usize, cout: usize, gain: f64, rng: &mut RngStream) -> Self {
        let fan_in = cin * 9;
        let std = (gain / fan_in as f64).sqrt();
        let w = Tensor::from_vec(
            fan_in,
            cout,
            (0..fan_in * cout)
                .map(|_| F::of_f64(rng.normal() * std))
                .collect(),
        );
        Conv3 { w, b: Tensor::zeros(1, cout) }
    }
}

/// Bound (leafed) layer parameters on a tape.
#[derive(Clone, Copy)]
pub struct LayerVars {
    pub w: Var,
    pub b: Var,
}

pub(crate) fn bind_dense<F: Scalar>(t: &mut Tape<F>, l: &Dense<F>, grad: bool) -> LayerVars {
    LayerVars {
        w: t.leaf(l.w.clone(), grad),
        b: t.leaf(l.b.clone(), grad),
    }
}

fn bind_conv<F: Scalar>(t: &mut Tape<F>, l: &Conv3<F>, grad: bool) -> LayerVars {
    LayerVars {
        w: t.leaf(l.w.clone(), grad),
        b: t.leaf(l.b.clone(), grad),
    }
}

pub(crate) fn dense_fwd<F: Scalar>(t: &mut Tape<F>, l: LayerVars, x: Var) -> Var {
    let y = t.matmul(x, l.w);
    t.add_row(y, l.b)
}

fn conv_fwd<F: Scalar>(t: &mut Tape<F>, l: LayerVars, x: Var, sp: Spatial) -> Var {
    let y = t.conv3x3(x, l.w, sp);
    t.add_row(y, l.b)
}

#[derive(Debug, Clone, PartialEq)]
struct ResBlock<F> {
    c1: Conv3<F>,
    c2: Conv3<F>,
}

impl<F: Scalar> ResBlock<F> {
    fn init(width: usize, rng: &mut RngStream) -> Self {
        ResBlock {
            c1: Conv3::init(width, width, 2.0, rng),
            c2: Conv3::init(width, width, 2.0, rng),
        }
    }
}

struct ResBlockVars {
    c1: LayerVars,
    c2: LayerVars,
}

fn bind_block<F: Scalar>(t: &mut Tape<F>, b: &ResBlock<F>, grad: bool) -> ResBlockVars {
    ResBlockVars {
        c1: bind_conv(t, &b.c1, grad),
        c2: bind_conv(t, &b.c2, grad),
    }
}

/// Pre-activation residual block with 2x nearest upsampling.
fn block_up_fwd<F: Scalar>(t: &mut Tape<F>, b: &ResBlockVars, x: Var, sp: Spatial) -> (Var, Spatial) {
    let u = t.up_nearest2(x, sp);
    let sp2 = Spatial::new(sp.batch, sp.h * 2, sp.w * 2);
    let a = t.relu(u);
    let h = conv_fwd(t, b.c1, a, sp2);
    let h = t.relu(h);
    let h = conv_fwd(t, b.c2, h, sp2);
    (t.add(u, h), sp2)
}

/// Pre-activation residual block with 2x average-pool downsampling.
fn block_down_fwd<F: Scalar>(t: &mut Tape<F>, b: &ResBlockVars, x: Var, sp: Spatial) -> (Var, Spatial) {
    let a = t.relu(x);
    let h = conv_fwd(t, b.c1, a, sp);
    let h = t.relu(h);
    let h = conv_fwd(t, b.c2, h, sp);
    let h = t.avg_pool2(h, sp);
    let skip = t.avg_pool2(x, sp);
    let sp2 = Spatial::new(sp.batch, sp.h / 2, sp.w / 2);
    (t.add(skip, h), sp2)
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorG<F> {
    pub geom: NetGeometry,
    fc: Dense<F>,
    blocks: Vec<ResBlock<F>>,
    out: Conv3<F>,
}

pub struct GeneratorVars {
    fc: LayerVars,
    blocks: Vec<ResBlockVars>,
    out: LayerVars,
}

impl<F: Scalar> GeneratorG<F> {
    fn init(geom: NetGeometry, rng: &mut RngStream) -> Self {
        let w = geom.width;
        GeneratorG {
            geom,
            fc: Dense::init(GEN_INPUT_DIM, BASE_SIDE * BASE_SIDE * w, 1.0, rng),
            blocks: (0..geom.n_blocks()).map(|_| ResBlock::init(w, rng)).collect(),
            out: Conv3::init(w, IMAGE_CHANNELS, 1.0, rng),
        }
    }

    pub fn bind(&self, t: &mut Tape<F>, grad: bool) -> GeneratorVars {
        GeneratorVars {
            fc: bind_dense(t, &self.fc, grad),
            blocks: self.blocks.iter().map(|b| bind_block(t, b, grad)).collect(),
            out: bind_conv(t, &self.out, grad),
        }
    }

    /// Forward on a tape: `v` is `[B, 9]`, `z` is `[B, 119]`; output is the
    /// image matrix `[B * S * S, 3]` in (-1, 1).
    pub fn forward(&self, t: &mut Tape<F>, vars: &GeneratorVars, v: Var, z: Var) -> Var {
        let batch = t.value(v).rows();
        assert_eq!(t.value(v).cols(), VIEW_BINS);
        assert_eq!(t.value(z).cols(), LATENT_DIM);
        let input = t.concat_cols(v, z);
        let h = dense_fwd(t, vars.fc, input);
        let mut x = t.reshape(h, batch * BASE_SIDE * BASE_SIDE, self.geom.width);
        let mut sp = Spatial::new(batch, BASE_SIDE, BASE_SIDE);
        for b in &vars.blocks {
            let (nx, nsp) = block_up_fwd(t, b, x, sp);
            x = nx;
            sp = nsp;
        }
        debug_assert_eq!(sp.h, self.geom.image_size);
        let a = t.relu(x);
        let y = conv_fwd(t, vars.out, a, sp);
        t.tanh(y)
    }

    /// Generate a batch of images without tracking gradients.
    pub fn generate_batch(&self, views: &Tensor<F>, latents: &Tensor<F>) -> Tensor<F> {
        let mut t = Tape::new();
        let vars = self.bind(&mut t, false);
        let v = t.constant(views.clone());
        let z = t.constant(latents.clone());
        let img = self.forward(&mut t, &vars, v, z);
        t.value(img).clone()
    }

    /// Single-image convenience wrapper over [`Self::generate_batch`].
    pub fn generate(&self, view: ViewCode, z: &Latent<F>) -> Image<F> {
        let v = Tensor::from_vec(1, VIEW_BINS, view.to_vec());
        let zt = Tensor::from_vec(1, LATENT_DIM, z.code().to_vec());
        let px = self.generate_batch(&v, &zt);
        Image::from_tensor(self.geom.image_size, self.geom.image_size, px)
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = vec![
            ("g.fc.w".to_string(), &self.fc.w),
            ("g.fc.b".to_string(), &self.fc.b),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("g.block{i}.c1.w"), &b.c1.w));
            out.push((format!("g.block{i}.c1.b"), &b.c1.b));
            out.push((format!("g.block{i}.c2.w"), &b.c2.w));
            out.push((format!("g.block{i}.c2.b"), &b.c2.b));
        }
        out.push(("g.out.w".to_string(), &self.out.w));
        out.push(("g.out.b".to_string(), &self.out.b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = vec![&mut self.fc.w, &mut self.fc.b];
        for b in &mut self.blocks {
            out.push(&mut b.c1.w);
            out.push(&mut b.c1.b);
            out.push(&mut b.c2.w);
            out.push(&mut b.c2.b);
        }
        out.push(&mut self.out.w);
        out.push(&mut self.out.b);
        out
    }
}

impl GeneratorVars {
    /// Bound parameter vars, in [`GeneratorG::tensors`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.fc.w, self.fc.b];
        for b in &self.blocks {
            out.extend([b.c1.w, b.c1.b, b.c2.w, b.c2.b]);
        }
        out.extend([self.out.w, self.out.b]);
        out
    }
}

// ---------------------------------------------------------------------------
// Critic trunk shared by D and E
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Trunk<F> {
    conv_in: Conv3<F>,
    blocks: Vec<ResBlock<F>>,
}

pub struct TrunkVars {
    conv_in: LayerVars,
    blocks: Vec<ResBlockVars>,
}

impl<F: Scalar> Trunk<F> {
    pub(crate) fn init(geom: NetGeometry, rng: &mut RngStream) -> Self {
        Trunk {
            conv_in: Conv3::init(IMAGE_CHANNELS, geom.width, 2.0, rng),
            blocks: (0..geom.n_blocks())
                .map(|_| ResBlock::init(geom.width, rng))
                .collect(),
        }
    }

    pub(crate) fn bind(&self, t: &mut Tape<F>, grad: bool) -> TrunkVars {
        TrunkVars {
            conv_in: bind_conv(t, &self.conv_in, grad),
            blocks: self.blocks.iter().map(|b| bind_block(t, b, grad)).collect(),
        }
    }

    /// `[B*S*S, 3] -> [B, 16*width]` features: residual downsampling to the
    /// 4x4 base resolution, then flattened (pooling the base map away would
    /// discard the spatial cues that carry the view signal).
    pub(crate) fn forward(&self, t: &mut Tape<F>, vars: &TrunkVars, x: Var, batch: usize, geom: NetGeometry) -> Var {
        let mut sp = geom.spatial(batch);
        let mut h = conv_fwd(t, vars.conv_in, x, sp);
        for b in &vars.blocks {
            let (nh, nsp) = block_down_fwd(t, b, h, sp);
            h = nh;
            sp = nsp;
        }
        let a = t.relu(h);
        t.reshape(a, batch, sp.hw() * geom.width)
    }

    pub(crate) fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<F>)>) {
        out.push((format!("{prefix}.conv_in.w"), &self.conv_in.w));
        out.push((format!("{prefix}.conv_in.b"), &self.conv_in.b));
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("{prefix}.block{i}.c1.w"), &b.c1.w));
            out.push((format!("{prefix}.block{i}.c1.b"), &b.c1.b));
            out.push((format!("{prefix}.block{i}.c2.w"), &b.c2.w));
            out.push((format!("{prefix}.block{i}.c2.b"), &b.c2.b));
        }
    }

    pub(crate) fn push_tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<F>>) {
        out.push(&mut self.conv_in.w);
        out.push(&mut self.conv_in.b);
        for b in &mut self.blocks {
            out.push(&mut b.c1.w);
            out.push(&mut b.c1.b);
            out.push(&mut b.c2.w);
            out.push(&mut b.c2.b);
        }
    }

    pub(crate) fn push_vars(vars: &TrunkVars, out: &mut Vec<Var>) {
        out.extend([vars.conv_in.w, vars.conv_in.b]);
        for b in &vars.blocks {
            out.extend([b.c1.w, b.c1.b, b.c2.w, b.c2.b]);
        }
    }
}

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorD<F> {
    pub geom: NetGeometry,
    trunk: Trunk<F>,
    view_head: Dense<F>,
    score_head: Dense<F>,
}

pub struct DiscriminatorVars {
    trunk: TrunkVars,
    view_head: LayerVars,
    score_head: LayerVars,
}

impl<F: Scalar> DiscriminatorD<F> {
    fn init(geom: NetGeometry, rng: &mut RngStream) -> Self {
        DiscriminatorD {
            geom,
            trunk: Trunk::init(geom, rng),
            view_head: Dense::init_std(geom.feature_dim(), VIEW_BINS, HEAD_INIT_STD, rng),
            score_head: Dense::init_std(geom.feature_dim(), 1, HEAD_INIT_STD, rng),
        }
    }

    pub fn bind(&self, t: &mut Tape<F>, grad: bool) -> DiscriminatorVars {
        DiscriminatorVars {
            trunk: self.trunk.bind(t, grad),
            view_head: bind_dense(t, &self.view_head, grad),
            score_head: bind_dense(t, &self.score_head, grad),
        }
    }

    /// Forward on a tape: returns (view logits `[B,9]`, realism score `[B,1]`).
    pub fn forward(&self, t: &mut Tape<F>, vars: &DiscriminatorVars, x: Var, batch: usize) -> (Var, Var) {
        let feat = self.trunk.forward(t, &vars.trunk, x, batch, self.geom);
        let logits = dense_fwd(t, vars.view_head, feat);
        let score = dense_fwd(t, vars.score_head, feat);
        (logits, score)
    }

    /// Realism head only (the gradient-penalty path).
    pub fn forward_score(&self, t: &mut Tape<F>, vars: &DiscriminatorVars, x: Var, batch: usize) -> Var {
        let feat = self.trunk.forward(t, &vars.trunk, x, batch, self.geom);
        dense_fwd(t, vars.score_head, feat)
    }

    /// Untracked forward for evaluation: (view logits, realism scores).
    pub fn discriminate_batch(&self, xs: &Tensor<F>, batch: usize) -> (Tensor<F>, Tensor<F>) {
        let mut t = Tape::new();
        let vars = self.bind(&mut t, false);
        let x = t.constant(xs.clone());
        let (logits, score) = self.forward(&mut t, &vars, x, batch);
        (t.value(logits).clone(), t.value(score).clone())
    }

    /// Single image: (view logits 9-vector, realism scalar).
    pub fn discriminate(&self, img: &Image<F>) -> Result<(Vec<F>, F), NetworkError> {
        self.check_geometry(img)?;
        let (logits, score) = self.discriminate_batch(img.tensor(), 1);
        Ok((logits.data().to_vec(), score.at(0, 0)))
    }

    fn check_geometry(&self, img: &Image<F>) -> Result<(), DomainError> {
        let expected = (self.geom.image_size, self.geom.image_size, IMAGE_CHANNELS);
        if img.shape() != expected {
            return Err(DomainError::GeometryMismatch { expected, got: img.shape() });
        }
        Ok(())
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        self.trunk.push_tensors("d", &mut out);
        out.push(("d.view.w".to_string(), &self.view_head.w));
        out.push(("d.view.b".to_string(), &self.view_head.b));
        out.push(("d.score.w".to_string(), &self.score_head.w));
        out.push(("d.score.b".to_string(), &self.score_head.b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = Vec::new();
        self.trunk.push_tensors_mut(&mut out);
        out.push(&mut self.view_head.w);
        out.push(&mut self.view_head.b);
        out.push(&mut self.score_head.w);
        out.push(&mut self.score_head.b);
        out
    }
}

impl DiscriminatorVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        Trunk::<f32>::push_vars(&self.trunk, &mut out);
        out.extend([self.view_head.w, self.view_head.b, self.score_head.w, self.score_head.b]);
        out
    }
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderE<F> {
    pub geom: NetGeometry,
    trunk: Trunk<F>,
    view_head: Dense<F>,
    latent_head: Dense<F>,
}

pub struct EncoderVars {
    trunk: TrunkVars,
    view_head: LayerVars,
    latent_head: LayerVars,
}

/// Per-sample RMS normalization of feature rows (instance-agnostic: no
/// batch statistics). The encoder's trunk needs it: without a scale anchor
/// the reconstruction-vs-adversarial pull shrinks its features toward zero
/// and the view head starves.
fn row_rms_norm<F: Scalar>(t: &mut Tape<F>, x: Var) -> Var {
    let cols = t.value(x).cols();
    let sq = t.mul(x, x);
    let ms = t.sum_cols(sq);
    let ms = t.scale(ms, F::one() / F::from_usize(cols).unwrap());
    let ms = t.add_const(ms, F::of_f64(1e-8));
    let rms = t.sqrt(ms);
    let denom = t.broadcast_col(rms, cols);
    t.div(x, denom)
}

impl<F: Scalar> EncoderE<F> {
    fn init(geom: NetGeometry, rng: &mut RngStream) -> Self {
        EncoderE {
            geom,
            trunk: Trunk::init(geom, rng),
            view_head: Dense::init_std(geom.feature_dim(), VIEW_BINS, HEAD_INIT_STD, rng),
            latent_head: Dense::init(geom.feature_dim(), LATENT_DIM, 1.0, rng),
        }
    }

    pub fn bind(&self, t: &mut Tape<F>, grad: bool) -> EncoderVars {
        EncoderVars {
            trunk: self.trunk.bind(t, grad),
            view_head: bind_dense(t, &self.view_head, grad),
            latent_head: bind_dense(t, &self.latent_head, grad),
        }
    }

    /// Forward on a tape: returns (view logits `[B,9]`, latent `[B,119]` in
    /// (-1, 1) via tanh).
    pub fn forward(&self, t: &mut Tape<F>, vars: &EncoderVars, x: Var, batch: usize) -> (Var, Var) {
        let feat = self.trunk.forward(t, &vars.trunk, x, batch, self.geom);
        let feat = row_rms_norm(t, feat);
        let logits = dense_fwd(t, vars.view_head, feat);
        let pre = dense_fwd(t, vars.latent_head, feat);
        let z = t.tanh(pre);
        (logits, z)
    }

    /// Untracked forward: (view logits `[B,9]`, latents `[B,119]`).
    pub fn encode_batch(&self, xs: &Tensor<F>, batch: usize) -> (Tensor<F>, Tensor<F>) {
        let mut t = Tape::new();
        let vars = self.bind(&mut t, false);
        let x = t.constant(xs.clone());
        let (logits, z) = self.forward(&mut t, &vars, x, batch);
        (t.value(logits).clone(), t.value(z).clone())
    }

    /// Single image: (view distribution from logits, latent code).
    pub fn encode(&self, img: &Image<F>) -> Result<(ViewDistribution<F>, Latent<F>), NetworkError> {
        let expected = (self.geom.image_size, self.geom.image_size, IMAGE_CHANNELS);
        if img.shape() != expected {
            return Err(DomainError::GeometryMismatch { expected, got: img.shape() }.into());
        }
        let (logits, z) = self.encode_batch(img.tensor(), 1);
        let dist = ViewDistribution::from_logits(logits.data());
        let latent = Latent::new(z.data().to_vec()).expect("tanh output is in [-1,1]");
        Ok((dist, latent))
    }

    /// Flattened, RMS-normalized trunk features (what both heads read).
    pub fn features_batch(&self, xs: &Tensor<F>, batch: usize) -> Tensor<F> {
        let mut t = Tape::new();
        let vars = self.bind(&mut t, false);
        let x = t.constant(xs.clone());
        let feat = self.trunk.forward(&mut t, &vars.trunk, x, batch, self.geom);
        let feat = row_rms_norm(&mut t, feat);
        t.value(feat).clone()
    }

    /// Raw view logits of a single image.
    pub fn view_logits(&self, img: &Image<F>) -> Vec<F> {
        let (logits, _) = self.encode_batch(img.tensor(), 1);
        logits.data().to_vec()
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        self.trunk.push_tensors("e", &mut out);
        out.push(("e.view.w".to_string(), &self.view_head.w));
        out.push(("e.view.b".to_string(), &self.view_head.b));
        out.push(("e.latent.w".to_string(), &self.latent_head.w));
        out.push(("e.latent.b".to_string(), &self.latent_head.b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = Vec::new();
        self.trunk.push_tensors_mut(&mut out);
        out.push(&mut self.view_head.w);
        out.push(&mut self.view_head.b);
        out.push(&mut self.latent_head.w);
        out.push(&mut self.latent_head.b);
        out
    }
}

impl EncoderVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        Trunk::<f32>::push_vars(&self.trunk, &mut out);
        out.extend([self.view_head.w, self.view_head.b, self.latent_head.w, self.latent_head.b]);
        out
    }
}

/// Build E, G, D with matching geometry. Initial weights are small-variance
/// normal draws from `rng`, biases zero; two builds from the same stream
/// state are identical.
pub fn build_networks<F: Scalar>(
    geom: NetGeometry,
    rng: &mut RngStream,
) -> (EncoderE<F>, GeneratorG<F>, DiscriminatorD<F>) {
    let mut e_rng = rng.split(0xE);
    let mut g_rng = rng.split(0x6);
    let mut d_rng = rng.split(0xD);
    (
        EncoderE::init(geom, &mut e_rng),
        GeneratorG::init(geom, &mut g_rng),
        DiscriminatorD::init(geom, &mut d_rng),
    )
}

/// FNV-1a hash of a parameter list's raw little-endian bytes. Used by the
/// update-isolation audit to detect any parameter change.
pub fn param_hash<F: Scalar>(tensors: &[(String, &Tensor<F>)]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |byte: u8| {
        h ^= byte as u64;
        h = h.wrapping_mul(0x100000001b3);
    };
    for (name, t) in tensors {
        for b in name.as_bytes() {
            eat(*b);
        }
        for v in t.data() {
            for b in v.into_f32().to_le_bytes() {
                eat(b);
            }
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{one_hot_view, sample_latent};

    fn small_geom() -> NetGeometry {
        NetGeometry::new(32, 8).unwrap()
    }

    #[test]
    fn geometry_validation() {
        assert!(NetGeometry::new(16, 8).is_err());
        assert!(NetGeometry::new(32, 4).is_err());
        assert!(NetGeometry::new(64, 8).is_ok());
        assert_eq!(NetGeometry::new(32, 8).unwrap().n_blocks(), 3);
        assert_eq!(NetGeometry::new(64, 8).unwrap().n_blocks(), 4);
    }

    #[test]
    fn generator_input_width_is_128() {
        assert_eq!(GEN_INPUT_DIM, 128);
    }

    #[test]
    fn generator_output_geometry_and_bounds() {
        let mut rng = RngStream::new(5);
        let (_, g, _) = build_networks::<f32>(small_geom(), &mut rng);
        let mut zrng = RngStream::new(7);
        let z = sample_latent(&mut zrng);
        let img = g.generate(one_hot_view(0).unwrap(), &z);
        assert_eq!(img.shape(), (32, 32, 3));
        assert!(img.in_bounds());
    }

    #[test]
    fn same_seed_same_parameters() {
        let mut r1 = RngStream::new(11);
        let mut r2 = RngStream::new(11);
        let (e1, g1, d1) = build_networks::<f32>(small_geom(), &mut r1);
        let (e2, g2, d2) = build_networks::<f32>(small_geom(), &mut r2);
        assert_eq!(param_hash(&e1.tensors()), param_hash(&e2.tensors()));
        assert_eq!(param_hash(&g1.tensors()), param_hash(&g2.tensors()));
        assert_eq!(param_hash(&d1.tensors()), param_hash(&d2.tensors()));
        // distinct nets get distinct draws
        assert_ne!(param_hash(&e1.tensors()), param_hash(&d1.tensors()));
    }

    #[test]
    fn reseeding_changes_values_not_counts() {
        let mut r1 = RngStream::new(1);
        let mut r2 = RngStream::new(2);
        let (_, g1, _) = build_networks::<f32>(small_geom(), &mut r1);
        let (_, g2, _) = build_networks::<f32>(small_geom(), &mut r2);
        let n1: usize = g1.tensors().iter().map(|(_, t)| t.len()).sum();
        let n2: usize = g2.tensors().iter().map(|(_, t)| t.len()).sum();
        assert_eq!(n1, n2);
        assert_ne!(param_hash(&g1.tensors()), param_hash(&g2.tensors()));
    }

    #[test]
    fn size_64_geometry_forward_shapes() {
        let geom = NetGeometry::new(64, 8).unwrap();
        let mut rng = RngStream::new(2);
        let (e, g, d) = build_networks::<f32>(geom, &mut rng);
        let mut zrng = RngStream::new(4);
        let z = sample_latent(&mut zrng);
        let img = g.generate(one_hot_view(3).unwrap(), &z);
        assert_eq!(img.shape(), (64, 64, 3));
        let (logits, score) = d.discriminate(&img).unwrap();
        assert_eq!(logits.len(), 9);
        assert!(score.is_finite());
        let (dist, latent) = e.encode(&img).unwrap();
        assert_eq!(latent.code().len(), 119);
        assert!((dist.probs().iter().copied().sum::<f32>() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn encoder_outputs_bounded_latent_and_valid_softmax() {
        let mut rng = RngStream::new(3);
        let (e, _, _) = build_networks::<f32>(small_geom(), &mut rng);
        let img = Image::filled(32, 32, 3, 0.5f32);
        let (dist, z) = e.encode(&img).unwrap();
        assert!(z.code().iter().all(|c| (-1.0..=1.0).contains(c)));
        let sum: f32 = dist.probs().iter().sum();
        assert!((sum - 1.0).abs() < 1e-5);
    }

    #[test]
    fn encoder_rejects_geometry_mismatch() {
        let mut rng = RngStream::new(3);
        let (e, _, _) = build_networks::<f32>(small_geom(), &mut rng);
        let img = Image::filled(16, 16, 3, 0.0f32);
        assert!(e.encode(&img).is_err());
    }

    #[test]
    fn forward_maps_are_pure() {
        let mut rng = RngStream::new(13);
        let (e, g, d) = build_networks::<f32>(small_geom(), &mut rng);
        let mut zrng = RngStream::new(17);
        let z = sample_latent(&mut zrng);
        let v = one_hot_view(4).unwrap();
        let img1 = g.generate(v, &z);
        let img2 = g.generate(v, &z);
        assert_eq!(img1, img2);
        let (l1, s1) = d.discriminate(&img1).unwrap();
        let (l2, s2) = d.discriminate(&img1).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(s1, s2);
        assert!(l1.iter().all(|x| x.is_finite()) && s1.is_finite());
        let enc1 = e.encode(&img1).unwrap();
        let enc2 = e.encode(&img1).unwrap();
        assert_eq!(enc1, enc2);
    }

    #[test]
    fn discriminator_finite_at_input_bounds() {
        let mut rng = RngStream::new(19);
        let (_, _, d) = build_networks::<f32>(small_geom(), &mut rng);
        for v in [-1.0f32, 1.0] {
            let img = Image::filled(32, 32, 3, v);
            let (logits, score) = d.discriminate(&img).unwrap();
            assert_eq!(logits.len(), 9);
            assert!(logits.iter().all(|x| x.is_finite()));
            assert!(score.is_finite());
        }
    }
}
