//! Reverse-mode automatic differentiation on a tape of 2-D tensors.
//!
//! The backward pass does not write raw gradient buffers: it emits new ops
//! onto the same tape. Gradients are therefore ordinary tape values and can
//! be differentiated again, which is what the Lipschitz gradient penalty
//! needs (a loss built from `d/dx D(x)` that is then differentiated with
//! respect to the critic parameters).
//!
//! Feature maps are `[batch*h*w, channels]` matrices; convolution, pooling
//! and upsampling ops carry their spatial geometry in a [`Spatial`] tag.
//! All op forwards are eager and single-threaded with fixed reduction
//! order, so tape evaluation is deterministic on a given machine.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial geometry of a feature-map matrix (`batch * h * w` rows).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Spatial {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
}

impl Spatial {
    pub fn new(batch: usize, h: usize, w: usize) -> Self {
        Spatial { batch, h, w }
    }
    pub fn rows(&self) -> usize {
        self.batch * self.h * self.w
    }
    pub fn hw(&self) -> usize {
        self.h * self.w
    }
    fn halved(&self) -> Spatial {
        Spatial::new(self.batch, self.h / 2, self.w / 2)
    }
    fn doubled(&self) -> Spatial {
        Spatial::new(self.batch, self.h * 2, self.w * 2)
    }
}

#[derive(Clone, Debug)]
enum Op<F> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// a * mul + add, elementwise with constants.
    Affine(usize, F, F),
    /// [R,C] + broadcast [1,C].
    AddRow(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Relu(usize),
    /// 1 where parent > 0 else 0; derivative defined as zero.
    StepMask(usize),
    /// sign(parent) in {-1, 0, 1}; derivative defined as zero.
    SignMask(usize),
    Abs(usize),
    Tanh(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    /// Sum of all entries -> [1,1].
    SumAll(usize),
    /// Sum over rows -> [1,C].
    SumRows(usize),
    /// Sum over cols -> [R,1].
    SumCols(usize),
    /// [1,1] -> [R,C].
    BroadcastAll(usize),
    /// [1,C] -> [R,C].
    BroadcastRow(usize),
    /// [R,1] -> [R,C].
    BroadcastCol(usize),
    /// Sum groups of k consecutive rows: [G*k, C] -> [G, C].
    GroupSumRows(usize, usize),
    /// Repeat each row k times: [G, C] -> [G*k, C].
    RepeatRows(usize, usize),
    /// 2x2 spatial mean; `Spatial` is the input geometry.
    AvgPool2(usize, Spatial),
    /// 2x2 nearest-neighbor upsample; `Spatial` is the input geometry.
    UpNearest2(usize, Spatial),
    /// 3x3 stride-1 pad-1 convolution: (x [bhw, cin], w [cin*9, cout]).
    Conv(usize, usize, Spatial),
    /// Gradient of Conv w.r.t. its input: (dy [bhw, cout], w [cin*9, cout]) -> [bhw, cin].
    ConvGradInput(usize, usize, Spatial, usize),
    /// Gradient of Conv w.r.t. its weight: (x [bhw, cin], dy [bhw, cout]) -> [cin*9, cout].
    ConvGradWeight(usize, usize, Spatial),
    /// Same data, different 2-D shape.
    Reshape(usize),
    ConcatCols(usize, usize),
    /// Column range [from, to).
    SliceCols(usize, usize, usize),
    /// Embed into zero columns: `left` zeros before, `right` after.
    PadCols(usize, usize, usize),
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients returned by [`Tape::backward`]: one optional Var per tape node.
pub struct Grads {
    cotangent: Vec<Option<Var>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<Var> {
        self.cotangent.get(v.0).copied().flatten()
    }
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    pub fn leaf(&mut self, t: Tensor<F>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t, false)
    }

    pub fn scalar(&mut self, x: F) -> Var {
        self.constant(Tensor::scalar(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(v, Op::Add(a.0, b.0), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(v, Op::Sub(a.0, b.0), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(v, Op::Mul(a.0, b.0), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x / y);
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(v, Op::Div(a.0, b.0), ng)
    }

    /// `a * mul + add` elementwise.
    pub fn affine(&mut self, a: Var, mul: F, add: F) -> Var {
        let v = self.value(a).map(|x| x * mul + add);
        let ng = self.needs(a.0);
        self.push(v, Op::Affine(a.0, mul, add), ng)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        self.affine(a, c, F::zero())
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.affine(a, -F::one(), F::zero())
    }

    pub fn add_const(&mut self, a: Var, c: F) -> Var {
        self.affine(a, F::one(), c)
    }

    /// Add a `[1,C]` row (bias) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.value(a).shape();
        assert_eq!(self.value(row).shape(), (1, c), "bias row shape");
        let rowv = self.value(row).data().to_vec();
        let mut out = self.value(a).clone();
        for i in 0..r {
            let s = &mut out.data_mut()[i * c..(i + 1) * c];
            for (x, b) in s.iter_mut().zip(&rowv) {
                *x += *b;
            }
        }
        let ng = self.needs(a.0) || self.needs(row.0);
        self.push(out, Op::AddRow(a.0, row.0), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(v, Op::MatMul(a.0, b.0), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transposed();
        let ng = self.needs(a.0);
        self.push(v, Op::Transpose(a.0), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > F::zero() { x } else { F::zero() });
        let ng = self.needs(a.0);
        self.push(v, Op::Relu(a.0), ng)
    }

    fn step_mask(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .map(|x| if x > F::zero() { F::one() } else { F::zero() });
        self.push(v, Op::StepMask(a.0), false)
    }

    fn sign_mask(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| {
            if x > F::zero() {
                F::one()
            } else if x < F::zero() {
                -F::one()
            } else {
                F::zero()
            }
        });
        self.push(v, Op::SignMask(a.0), false)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.abs());
        let ng = self.needs(a.0);
        self.push(v, Op::Abs(a.0), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        let ng = self.needs(a.0);
        self.push(v, Op::Tanh(a.0), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        let ng = self.needs(a.0);
        self.push(v, Op::Exp(a.0), ng)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.ln());
        let ng = self.needs(a.0);
        self.push(v, Op::Ln(a.0), ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.sqrt());
        let ng = self.needs(a.0);
        self.push(v, Op::Sqrt(a.0), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(a.0);
        self.push(v, Op::SumAll(a.0), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, F::one() / F::from_usize(n).unwrap())
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.value(a).shape();
        let mut out = Tensor::zeros(1, c);
        for i in 0..r {
            let src = self.value(a).row(i).to_vec();
            for (o, s) in out.data_mut().iter_mut().zip(&src) {
                *o += *s;
            }
        }
        let ng = self.needs(a.0);
        self.push(out, Op::SumRows(a.0), ng)
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (r, c) = self.value(a).shape();
        let mut out = Tensor::zeros(r, 1);
        for i in 0..r {
            let mut acc = F::zero();
            for &x in self.value(a).row(i) {
                acc += x;
            }
            out.data_mut()[i] = acc;
        }
        let _ = c;
        let ng = self.needs(a.0);
        self.push(out, Op::SumCols(a.0), ng)
    }

    pub fn broadcast_all(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(self.value(a).shape(), (1, 1));
        let x = self.value(a).at(0, 0);
        let ng = self.needs(a.0);
        self.push(Tensor::filled(rows, cols, x), Op::BroadcastAll(a.0), ng)
    }

    pub fn broadcast_row(&mut self, a: Var, rows: usize) -> Var {
        let (r, c) = self.value(a).shape();
        assert_eq!(r, 1, "broadcast_row wants [1,C]");
        let src = self.value(a).data().to_vec();
        let mut out = Tensor::zeros(rows, c);
        for i in 0..rows {
            out.data_mut()[i * c..(i + 1) * c].copy_from_slice(&src);
        }
        let ng = self.needs(a.0);
        self.push(out, Op::BroadcastRow(a.0), ng)
    }

    pub fn broadcast_col(&mut self, a: Var, cols: usize) -> Var {
        let (r, c) = self.value(a).shape();
        assert_eq!(c, 1, "broadcast_col wants [R,1]");
        let mut out = Tensor::zeros(r, cols);
        for i in 0..r {
            let x = self.value(a).at(i, 0);
            for o in &mut out.data_mut()[i * cols..(i + 1) * cols] {
                *o = x;
            }
        }
        let ng = self.needs(a.0);
        self.push(out, Op::BroadcastCol(a.0), ng)
    }

    pub fn group_sum_rows(&mut self, a: Var, k: usize) -> Var {
        let (r, c) = self.value(a).shape();
        assert!(k > 0 && r % k == 0, "group size must divide rows");
        let g = r / k;
        let mut out = Tensor::zeros(g, c);
        for gi in 0..g {
            for i in 0..k {
                let src = self.value(a).row(gi * k + i).to_vec();
                let dst = &mut out.data_mut()[gi * c..(gi + 1) * c];
                for (o, s) in dst.iter_mut().zip(&src) {
                    *o += *s;
                }
            }
        }
        let ng = self.needs(a.0);
        self.push(out, Op::GroupSumRows(a.0, k), ng)
    }

    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Var {
        let (r, c) = self.value(a).shape();
        let mut out = Tensor::zeros(r * k, c);
        for i in 0..r {
            let src = self.value(a).row(i).to_vec();
            for j in 0..k {
                out.data_mut()[(i * k + j) * c..(i * k + j + 1) * c].copy_from_slice(&src);
            }
        }
        let ng = self.needs(a.0);
        self.push(out, Op::RepeatRows(a.0, k), ng)
    }

    /// Mean over each sample's spatial rows: `[b*h*w, C] -> [b, C]`.
    pub fn spatial_mean(&mut self, a: Var, sp: Spatial) -> Var {
        assert_eq!(self.value(a).rows(), sp.rows());
        let g = self.group_sum_rows(a, sp.hw());
        self.scale(g, F::one() / F::from_usize(sp.hw()).unwrap())
    }

    pub fn avg_pool2(&mut self, a: Var, sp: Spatial) -> Var {
        let (r, c) = self.value(a).shape();
        assert_eq!(r, sp.rows());
        assert!(sp.h % 2 == 0 && sp.w % 2 == 0, "pool wants even spatial dims");
        let (oh, ow) = (sp.h / 2, sp.w / 2);
        let quarter = F::of_f64(0.25);
        let input = self.value(a).data();
        let mut out = Tensor::zeros(sp.batch * oh * ow, c);
        {
            let outd = out.data_mut();
            outd.chunks_mut(c).enumerate().for_each(|(orow, dst)| {
                let b = orow / (oh * ow);
                let rem = orow % (oh * ow);
                let oy = rem / ow;
                let ox = rem % ow;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let iy = oy * 2 + dy;
                    let ix = ox * 2 + dx;
                    let irow = (b * sp.h + iy) * sp.w + ix;
                    let src = &input[irow * c..(irow + 1) * c];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += *s;
                    }
                }
                for d in dst.iter_mut() {
                    *d *= quarter;
                }
            });
        }
        let ng = self.needs(a.0);
        self.push(out, Op::AvgPool2(a.0, sp), ng)
    }

    pub fn up_nearest2(&mut self, a: Var, sp: Spatial) -> Var {
        let (r, c) = self.value(a).shape();
        assert_eq!(r, sp.rows());
        let (oh, ow) = (sp.h * 2, sp.w * 2);
        let input = self.value(a).data();
        let mut out = Tensor::zeros(sp.batch * oh * ow, c);
        {
            let outd = out.data_mut();
            outd.chunks_mut(c).enumerate().for_each(|(orow, dst)| {
                let b = orow / (oh * ow);
                let rem = orow % (oh * ow);
                let iy = (rem / ow) / 2;
                let ix = (rem % ow) / 2;
                let irow = (b * sp.h + iy) * sp.w + ix;
                dst.copy_from_slice(&input[irow * c..(irow + 1) * c]);
            });
        }
        let ng = self.needs(a.0);
        self.push(out, Op::UpNearest2(a.0, sp), ng)
    }

    /// 3x3 same-size convolution; `x` is `[b*h*w, cin]`, `w` is `[cin*9, cout]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, sp: Spatial) -> Var {
        let (r, cin) = self.value(x).shape();
        let (k, _cout) = self.value(w).shape();
        assert_eq!(r, sp.rows(), "conv input rows");
        assert_eq!(k, cin * 9, "conv weight rows");
        let col = im2col(self.value(x), sp, cin);
        let v = col.matmul(self.value(w));
        let ng = self.needs(x.0) || self.needs(w.0);
        self.push(v, Op::Conv(x.0, w.0, sp), ng)
    }

    fn conv_grad_input(&mut self, dy: Var, w: Var, sp: Spatial, cin: usize) -> Var {
        let wt = self.value(w).transposed();
        let gcol = self.value(dy).matmul(&wt);
        let v = col2im(&gcol, sp, cin);
        let ng = self.needs(dy.0) || self.needs(w.0);
        self.push(v, Op::ConvGradInput(dy.0, w.0, sp, cin), ng)
    }

    fn conv_grad_weight(&mut self, x: Var, dy: Var, sp: Spatial) -> Var {
        let cin = self.value(x).cols();
        let col = im2col(self.value(x), sp, cin);
        let cout = self.value(dy).cols();
        let mut out = Tensor::zeros(cin * 9, cout);
        ndarray::linalg::general_mat_mul(
            F::one(),
            &col.view().t(),
            &self.value(dy).view(),
            F::zero(),
            &mut out.view_mut(),
        );
        let ng = self.needs(x.0) || self.needs(dy.0);
        self.push(out, Op::ConvGradWeight(x.0, dy.0, sp), ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a).reshaped(rows, cols);
        let ng = self.needs(a.0);
        self.push(v, Op::Reshape(a.0), ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ra, ca) = self.value(a).shape();
        let (rb, cb) = self.value(b).shape();
        assert_eq!(ra, rb, "concat rows");
        let mut out = Tensor::zeros(ra, ca + cb);
        for i in 0..ra {
            let (left, right) = (self.value(a).row(i).to_vec(), self.value(b).row(i).to_vec());
            let dst = &mut out.data_mut()[i * (ca + cb)..(i + 1) * (ca + cb)];
            dst[..ca].copy_from_slice(&left);
            dst[ca..].copy_from_slice(&right);
        }
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(out, Op::ConcatCols(a.0, b.0), ng)
    }

    pub fn slice_cols(&mut self, a: Var, from: usize, to: usize) -> Var {
        let (r, c) = self.value(a).shape();
        assert!(from < to && to <= c, "slice bounds");
        let mut out = Tensor::zeros(r, to - from);
        for i in 0..r {
            let src = self.value(a).row(i)[from..to].to_vec();
            out.data_mut()[i * (to - from)..(i + 1) * (to - from)].copy_from_slice(&src);
        }
        let ng = self.needs(a.0);
        self.push(out, Op::SliceCols(a.0, from, to), ng)
    }

    pub fn pad_cols(&mut self, a: Var, left: usize, right: usize) -> Var {
        let (r, c) = self.value(a).shape();
        let oc = left + c + right;
        let mut out = Tensor::zeros(r, oc);
        for i in 0..r {
            let src = self.value(a).row(i).to_vec();
            out.data_mut()[i * oc + left..i * oc + left + c].copy_from_slice(&src);
        }
        let ng = self.needs(a.0);
        self.push(out, Op::PadCols(a.0, left, right), ng)
    }

    fn parents(&self, i: usize) -> [Option<usize>; 2] {
        match self.nodes[i].op {
            Op::Leaf => [None, None],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRow(a, b)
            | Op::MatMul(a, b)
            | Op::ConcatCols(a, b)
            | Op::Conv(a, b, _)
            | Op::ConvGradWeight(a, b, _) => [Some(a), Some(b)],
            Op::ConvGradInput(a, b, _, _) => [Some(a), Some(b)],
            Op::Affine(a, _, _)
            | Op::Transpose(a)
            | Op::Relu(a)
            | Op::StepMask(a)
            | Op::SignMask(a)
            | Op::Abs(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sqrt(a)
            | Op::SumAll(a)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::BroadcastAll(a)
            | Op::BroadcastRow(a)
            | Op::BroadcastCol(a)
            | Op::GroupSumRows(a, _)
            | Op::RepeatRows(a, _)
            | Op::AvgPool2(a, _)
            | Op::UpNearest2(a, _)
            | Op::Reshape(a)
            | Op::SliceCols(a, _, _)
            | Op::PadCols(a, _, _) => [Some(a), None],
        }
    }

    fn accumulate(&mut self, cot: &mut [Option<Var>], target: usize, grad: Var) {
        cot[target] = Some(match cot[target] {
            Some(existing) => self.add(existing, grad),
            None => grad,
        });
    }

    /// Reverse-mode gradients of scalar `output` with respect to `wrt`.
    ///
    /// Returned gradients are tape variables, so they can participate in
    /// further ops and be differentiated again. Nodes that do not lie on a
    /// path from a `wrt` leaf to `output` get no cotangent.
    pub fn backward(&mut self, output: Var, wrt: &[Var]) -> Grads {
        assert_eq!(self.value(output).shape(), (1, 1), "backward wants a scalar output");
        let n = output.0 + 1;

        // active: depends on some wrt leaf (parents always precede children)
        let mut active = vec![false; n];
        for v in wrt {
            assert!(v.0 < n, "wrt var created after output");
            active[v.0] = true;
        }
        for i in 0..n {
            if !active[i] {
                let [p, q] = self.parents(i);
                // masks detach their parent: no gradient flows through them
                let detached = matches!(self.nodes[i].op, Op::StepMask(_) | Op::SignMask(_));
                active[i] = !detached
                    && (p.map(|j| active[j]).unwrap_or(false)
                        || q.map(|j| active[j]).unwrap_or(false));
            }
        }

        // needed: output depends on it
        let mut needed = vec![false; n];
        needed[output.0] = true;
        for i in (0..n).rev() {
            if needed[i] {
                let [p, q] = self.parents(i);
                if let Some(j) = p {
                    needed[j] = true;
                }
                if let Some(j) = q {
                    needed[j] = true;
                }
            }
        }

        let mut cot: Vec<Option<Var>> = vec![None; n];
        cot[output.0] = Some(self.scalar(F::one()));

        for i in (0..n).rev() {
            if !(needed[i] && active[i]) {
                continue;
            }
            let g = match cot[i] {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf | Op::StepMask(_) | Op::SignMask(_) => {}
                Op::Add(a, b) => {
                    if active[a] {
                        self.accumulate(&mut cot, a, g);
                    }
                    if active[b] {
                        self.accumulate(&mut cot, b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if active[a] {
                        self.accumulate(&mut cot, a, g);
                    }
                    if active[b] {
                        let ng = self.neg(g);
                        self.accumulate(&mut cot, b, ng);
                    }
                }
                Op::Mul(a, b) => {
                    if active[a] {
                        let ga = self.mul(g, Var(b));
                        self.accumulate(&mut cot, a, ga);
                    }
                    if active[b] {
                        let gb = self.mul(g, Var(a));
                        self.accumulate(&mut cot, b, gb);
                    }
                }
                Op::Div(a, b) => {
                    if active[a] {
                        let ga = self.div(g, Var(b));
                        self.accumulate(&mut cot, a, ga);
                    }
                    if active[b] {
                        let y = self.div(Var(i), Var(b)); // a / b^2
                        let gb0 = self.mul(g, y);
                        let gb = self.neg(gb0);
                        self.accumulate(&mut cot, b, gb);
                    }
                }
                Op::Affine(a, m, _) => {
                    if active[a] {
                        let ga = self.scale(g, m);
                        self.accumulate(&mut cot, a, ga);
                    }
                }
                Op::AddRow(a, row) => {
                    if active[a] {
                        self.accumulate(&mut cot, a, g);
                    }
                    if active[row] {
                        let gr = self.sum_rows(g);
                        self.accumulate(&mut cot, row, gr);
                    }
                }
                Op::MatMul(a, b) => {
                    if active[a] {
                        let bt = self.transpose(Var(b));
                        let ga = self.matmul(g, bt);
                        self.accumulate(&mut cot, a, ga);
                    }
                    if active[b] {
                        let at = self.transpose(Var(a));
                        let gb = self.matmul(at, g);
                        self.accumulate(&mut cot, b, gb);
                    }
                }
                Op::Transpose(a) => {
                    if active[a] {
                        let ga = self.transpose(g);
                        self.accumulate(&mut cot, a, ga);
                    }
                }
                Op::Relu(a) => {
                    if active[a] {
                        let mask = self.step_mask(Var(a));
                        let ga = self.mul(g, mask);
                        self.accumulate(&mut cot, a, ga);
                    }
                }
                Op::Abs(a) => {
                    if active[a] {
                        let mask = self.sign_mask(Var(a));
                        let ga = self.mul(g, mask);
                        self.accumulate(&mut cot, a, ga);
                    }
                }
                Op::Tanh(a) => {
                    if active[a] {
                        let y2 = self.mul(Var(i), Var(i));
                        let one_minus = self.affine(y2, -F::one(), F::one());
                        let ga = self.mul(g, one_minus);
                        self.accumulate(&mut cot, a, ga);
                    }
                }
                Op::Exp(a) => {
                    if active[a] {
                        let ga = self.mul(g, Var(i));
                        self.accumulate(&mut cot, a, ga);
                    }
                }
                Op::Ln(a) => {
                    if active[a] {
                        let ga = self.div(g, Var(a));
                        self.accumulate(&mut cot, a, ga);
                    }
                }
                Op::Sqrt(a) => {
                    if active[a] {
                        let gh = self.scale(g, F::half());
                        let ga = self.div(gh, Var(i));
                        self.accumulate(&mut cot, a, ga);
                    }
                }
                Op::SumAll(a) => {
                    if active[a] {
                        let (r, c) = self.value(Var(a)).shape();
                        let ga = self.broadcast_all(g, r, c);
                        self.accumulate(&mut cot, a, ga);
                    }
                }
                Op::SumRows(a) => {
                    if active[a] {
                        let r = self.value(Var(a)).rows();
                        let ga = self.broadcast_row(g, r);
                        self.accumulate(&mut cot, a, ga);
                    }
                }
                Op::SumCols(a) => {
                    if active[a] {
                        let c = self.value(Var(a)).cols();
                        let ga = self.broadcast_col(g, c);
                        self.accumulate(&mut cot, a, ga);
                    }
                }
                Op::BroadcastAll(a) => {
                    if active[a] {
                        let ga = self.sum_all(g);
                        self.accumulate(&mut cot, a, ga);
                    }
                }
                Op::BroadcastRow(a) => {
                    if active[a] {
                        let ga = self.sum_rows(g);
                        self.accumulate(&mut cot, a, ga);
                    }
                }
                Op::BroadcastCol(a) => {
                    if active[a] {
                        let ga = self.sum_cols(g);
                        self.accumulate(&mut cot, a, ga);
                    }
                }
                Op::GroupSumRows(a, k) => {
                    if active[a] {
                        let ga = self.repeat_rows(g, k);
                        self.accumulate(&mut cot, a, ga);
                    }
                }
                Op::RepeatRows(a, k) => {
                    if active[a] {
                        let ga = self.group_sum_rows(g, k);
                        self.accumulate(&mut cot, a, ga);
                    }
                }
                Op::AvgPool2(a, sp) => {
                    if active[a] {
                        let up = self.up_nearest2(g, sp.halved());
                        let ga = self.scale(up, F::of_f64(0.25));
                        self.accumulate(&mut cot, a, ga);
                    }
                }
                Op::UpNearest2(a, sp) => {
                    if active[a] {
                        let pooled = self.avg_pool2(g, sp.doubled());
                        let ga = self.scale(pooled, F::of_f64(4.0));
                        self.accumulate(&mut cot, a, ga);
                    }
                }
                Op::Conv(x, w, sp) => {
                    let cin = self.value(Var(x)).cols();
                    if active[x] {
                        let gx = self.conv_grad_input(g, Var(w), sp, cin);
                        self.accumulate(&mut cot, x, gx);
                    }
                    if active[w] {
                        let gw = self.conv_grad_weight(Var(x), g, sp);
                        self.accumulate(&mut cot, w, gw);
                    }
                }
                Op::ConvGradInput(dy, w, sp, _cin) => {
                    if active[dy] {
                        let gdy = self.conv3x3(g, Var(w), sp);
                        self.accumulate(&mut cot, dy, gdy);
                    }
                    if active[w] {
                        let gw = self.conv_grad_weight(g, Var(dy), sp);
                        self.accumulate(&mut cot, w, gw);
                    }
                }
                Op::ConvGradWeight(x, dy, sp) => {
                    let cin = self.value(Var(x)).cols();
                    if active[x] {
                        let gx = self.conv_grad_input(Var(dy), g, sp, cin);
                        self.accumulate(&mut cot, x, gx);
                    }
                    if active[dy] {
                        let gdy = self.conv3x3(Var(x), g, sp);
                        self.accumulate(&mut cot, dy, gdy);
                    }
                }
                Op::Reshape(a) => {
                    if active[a] {
                        let (r, c) = self.value(Var(a)).shape();
                        let ga = self.reshape(g, r, c);
                        self.accumulate(&mut cot, a, ga);
                    }
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(Var(a)).cols();
                    let cb = self.value(Var(b)).cols();
                    if active[a] {
                        let ga = self.slice_cols(g, 0, ca);
                        self.accumulate(&mut cot, a, ga);
                    }
                    if active[b] {
                        let gb = self.slice_cols(g, ca, ca + cb);
                        self.accumulate(&mut cot, b, gb);
                    }
                }
                Op::SliceCols(a, from, to) => {
                    if active[a] {
                        let c = self.value(Var(a)).cols();
                        let ga = self.pad_cols(g, from, c - to);
                        self.accumulate(&mut cot, a, ga);
                    }
                }
                Op::PadCols(a, left, _right) => {
                    if active[a] {
                        let c = self.value(Var(a)).cols();
                        let ga = self.slice_cols(g, left, left + c);
                        self.accumulate(&mut cot, a, ga);
                    }
                }
            }
        }

        Grads { cotangent: cot }
    }
}

/// Unfold 3x3 neighborhoods: `[b*h*w, cin] -> [b*h*w, cin*9]`, zero padded.
/// Column layout: `(ky*3 + kx) * cin + c`.
fn im2col<F: Scalar>(x: &Tensor<F>, sp: Spatial, cin: usize) -> Tensor<F> {
    let (h, w) = (sp.h as isize, sp.w as isize);
    let input = x.data();
    let mut out = Tensor::zeros(sp.rows(), cin * 9);
    out.data_mut()
        .chunks_mut(cin * 9)
        .enumerate()
        .for_each(|(row, dst)| {
            let b = row / sp.hw();
            let rem = row % sp.hw();
            let y = (rem / sp.w) as isize;
            let xpos = (rem % sp.w) as isize;
            for ky in 0..3isize {
                let sy = y + ky - 1;
                for kx in 0..3isize {
                    let sx = xpos + kx - 1;
                    let seg = ((ky * 3 + kx) as usize) * cin;
                    if sy >= 0 && sy < h && sx >= 0 && sx < w {
                        let srow = (b as isize * h + sy) * w + sx;
                        let src = &input[srow as usize * cin..(srow as usize + 1) * cin];
                        dst[seg..seg + cin].copy_from_slice(src);
                    }
                }
            }
        });
    out
}

/// Adjoint of [`im2col`]: fold `[b*h*w, cin*9]` back to `[b*h*w, cin]`,
/// accumulating overlapping contributions. Written gather-style per target
/// pixel so parallel writes stay disjoint and deterministic.
fn col2im<F: Scalar>(cols: &Tensor<F>, sp: Spatial, cin: usize) -> Tensor<F> {
    let (h, w) = (sp.h as isize, sp.w as isize);
    let src = cols.data();
    let mut out = Tensor::zeros(sp.rows(), cin);
    out.data_mut()
        .chunks_mut(cin)
        .enumerate()
        .for_each(|(row, dst)| {
            let b = (row / sp.hw()) as isize;
            let rem = row % sp.hw();
            let y = (rem / sp.w) as isize;
            let xpos = (rem % sp.w) as isize;
            // target (y,x) was read by im2col row (y-ky+1, x-kx+1) at kernel slot (ky,kx)
            for ky in 0..3isize {
                let qy = y - (ky - 1);
                if qy < 0 || qy >= h {
                    continue;
                }
                for kx in 0..3isize {
                    let qx = xpos - (kx - 1);
                    if qx < 0 || qx >= w {
                        continue;
                    }
                    let qrow = ((b * h + qy) * w + qx) as usize;
                    let seg = ((ky * 3 + kx) as usize) * cin;
                    let s = &src[qrow * cin * 9 + seg..qrow * cin * 9 + seg + cin];
                    for (d, v) in dst.iter_mut().zip(s) {
                        *d += *v;
                    }
                }
            }
        });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::numerical_grad;
    use crate::rng::RngStream;

    fn rand_tensor(rng: &mut RngStream, r: usize, c: usize) -> Tensor<f64> {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.uniform_in(-1.0, 1.0)).collect())
    }

    /// Check d(scalar output)/d(leaf) against central finite differences for
    /// an arbitrary tape program.
    fn check_grad(
        build: impl Fn(&mut Tape<f64>, Var) -> Var,
        x0: &Tensor<f64>,
        tol: f64,
    ) {
        let f = |xs: &[f64]| {
            let mut t = Tape::new();
            let leaf = t.leaf(Tensor::from_vec(x0.rows(), x0.cols(), xs.to_vec()), true);
            let out = build(&mut t, leaf);
            t.value(out).at(0, 0)
        };
        let numeric = numerical_grad(&f, x0.data(), 1e-6);

        let mut t = Tape::new();
        let leaf = t.leaf(x0.clone(), true);
        let out = build(&mut t, leaf);
        let grads = t.backward(out, &[leaf]);
        let g = grads.get(leaf).expect("gradient exists");
        let analytic = t.value(g).data().to_vec();

        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let denom = 1.0_f64.max(a.abs()).max(n.abs());
            assert!(
                (a - n).abs() / denom < tol,
                "component {i}: analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn grad_elementwise_chain() {
        let mut rng = RngStream::new(11);
        let x = rand_tensor(&mut rng, 3, 4);
        check_grad(
            |t, leaf| {
                let a = t.tanh(leaf);
                let b = t.affine(a, 1.5, 0.25);
                let c = t.mul(b, a);
                let d = t.abs(c);
                let e = t.exp(d);
                t.mean_all(e)
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn grad_matmul_and_bias() {
        let mut rng = RngStream::new(5);
        let x = rand_tensor(&mut rng, 4, 3);
        let w = rand_tensor(&mut rng, 3, 2);
        let b = rand_tensor(&mut rng, 1, 2);
        check_grad(
            move |t, leaf| {
                let wv = t.constant(w.clone());
                let bv = t.constant(b.clone());
                let y = t.matmul(leaf, wv);
                let y = t.add_row(y, bv);
                let y = t.relu(y);
                t.sum_all(y)
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn grad_conv_wrt_input_and_weight() {
        let mut rng = RngStream::new(7);
        let sp = Spatial::new(2, 4, 4);
        let x = rand_tensor(&mut rng, sp.rows(), 2);
        let w = rand_tensor(&mut rng, 2 * 9, 3);

        // w.r.t. input
        let wc = w.clone();
        check_grad(
            move |t, leaf| {
                let wv = t.constant(wc.clone());
                let y = t.conv3x3(leaf, wv, sp);
                let y = t.tanh(y);
                t.mean_all(y)
            },
            &x,
            1e-6,
        );

        // w.r.t. weight
        let xc = x.clone();
        check_grad(
            move |t, leaf| {
                let xv = t.constant(xc.clone());
                let y = t.conv3x3(xv, leaf, sp);
                let y = t.tanh(y);
                t.mean_all(y)
            },
            &w,
            1e-6,
        );
    }

    #[test]
    fn grad_pool_upsample_slice_concat() {
        let mut rng = RngStream::new(13);
        let sp = Spatial::new(1, 4, 4);
        let x = rand_tensor(&mut rng, sp.rows(), 3);
        check_grad(
            move |t, leaf| {
                let up = t.up_nearest2(leaf, sp);
                let down = t.avg_pool2(up, sp.doubled());
                let a = t.slice_cols(down, 0, 2);
                let b = t.slice_cols(down, 1, 3);
                let cat = t.concat_cols(a, b);
                let sq = t.mul(cat, cat);
                t.sum_all(sq)
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn grad_group_and_spatial_reductions() {
        let mut rng = RngStream::new(17);
        let x = rand_tensor(&mut rng, 6, 2);
        check_grad(
            |t, leaf| {
                let g = t.group_sum_rows(leaf, 3);
                let r = t.repeat_rows(g, 2);
                let s = t.sum_cols(r);
                let q = t.mul(s, s);
                t.mean_all(q)
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn second_order_gradient_of_grad_norm() {
        // loss = (|df/dx|_2 - 1)^2 for f(x) = sum(tanh(x W)); check d loss/dW
        // by finite differences, exercising the double-backward path.
        let mut rng = RngStream::new(23);
        let x0 = rand_tensor(&mut rng, 1, 3);
        let w0 = rand_tensor(&mut rng, 3, 1);

        let eval = |wdata: &[f64]| {
            let mut t: Tape<f64> = Tape::new();
            let x = t.leaf(x0.clone(), true);
            let w = t.leaf(Tensor::from_vec(3, 1, wdata.to_vec()), true);
            let h = t.matmul(x, w);
            let h = t.tanh(h);
            let f = t.sum_all(h);
            let grads = t.backward(f, &[x]);
            let gx = grads.get(x).unwrap();
            let sq = t.mul(gx, gx);
            let ssq = t.sum_all(sq);
            let norm = t.sqrt(ssq);
            let dev = t.add_const(norm, -1.0);
            let loss = t.mul(dev, dev);
            (t, w, loss)
        };

        let f = |wdata: &[f64]| {
            let (t, _, loss) = eval(wdata);
            t.value(loss).at(0, 0)
        };
        let numeric = numerical_grad(&f, w0.data(), 1e-6);

        let (mut t, w, loss) = eval(w0.data());
        let grads = t.backward(loss, &[w]);
        let gw = grads.get(w).unwrap();
        let analytic = t.value(gw).data().to_vec();

        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let denom = 1.0_f64.max(a.abs()).max(n.abs());
            assert!(
                (a - n).abs() / denom < 1e-5,
                "component {i}: analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = RngStream::new(31);
        let sp = Spatial::new(2, 3, 5);
        let cin = 2;
        let x = rand_tensor(&mut rng, sp.rows(), cin);
        let y = rand_tensor(&mut rng, sp.rows(), cin * 9);
        // <im2col(x), y> == <x, col2im(y)>
        let lhs: f64 = im2col(&x, sp, cin)
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = x
            .data()
            .iter()
            .zip(col2im(&y, sp, cin).data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}
