//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation of one forward pass together with
//! whatever the backward rule needs (im2col buffers, normalized activations).
//! [`Graph::backward`] walks the tape in reverse once, seeded with output
//! gradients, and returns gradients for every parameter leaf.
//!
//! Layouts: images are `[N, C, H, W]` (here `H` is time and `W` frequency);
//! sequences are 2-D `[T * N, D]` with row `t * N + n`, so one time step is a
//! contiguous block of rows.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{s, Array2, ArrayD, ArrayView2, Axis, Ix2, Ix4, IxDyn, LinalgScalar, ScalarOperand, Zip};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

/// Scalar types the network can run in.
pub trait Float:
    num_traits::Float
    + LinalgScalar
    + ScalarOperand
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Float for f32 {
    const DTYPE: DType = DType::F32;
    fn of(v: f64) -> Self {
        v as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Float for f64 {
    const DTYPE: DType = DType::F64;
    fn of(v: f64) -> Self {
        v
    }
    fn f64(self) -> f64 {
        self
    }
}

pub const BN_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-channel statistics of a batch-norm input in training mode.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Elements per channel the statistics were taken over.
    pub count: usize,
}

enum Op<F> {
    Input,
    Param(usize),
    Conv2d {
        x: Var,
        w: Var,
        cols: Vec<Array2<F>>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: ArrayD<F>,
        inv_std: Vec<F>,
        train: bool,
    },
    Relu(Var),
    AvgPool {
        x: Var,
        kt: usize,
        kf: usize,
    },
    FreqMean(Var),
    Channels {
        x: Var,
        start: usize,
    },
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
}

struct Node<F> {
    value: ArrayD<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Recorded forward computation.
pub struct Graph<F: Float> {
    nodes: Vec<Node<F>>,
    n_params: usize,
}

fn as2<F>(a: &ArrayD<F>) -> ArrayView2<'_, F> {
    a.view().into_dimensionality::<Ix2>().expect("2-D tensor")
}

impl<F: Float> Graph<F> {
    /// Empty graph for a model with `n_params` parameter tensors.
    pub fn new(n_params: usize) -> Self {
        Self {
            nodes: Vec::new(),
            n_params,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let needs_grad = matches!(op, Op::Param(_)) || inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v.0].value
    }

    /// Constant leaf; receives no gradient.
    pub fn input(&mut self, value: ArrayD<F>) -> Var {
        self.push(value, Op::Input, &[])
    }

    /// Trainable leaf bound to parameter slot `index`.
    pub fn param(&mut self, index: usize, value: ArrayD<F>) -> Var {
        assert!(index < self.n_params, "parameter index out of range");
        self.push(value, Op::Param(index), &[])
    }

    /// 3x3 convolution, stride 1, zero padding 1, no bias.
    /// `x: [N, C, H, W]`, `w: [O, C, 3, 3]` -> `[N, O, H, W]`.
    pub fn conv3x3(&mut self, x: Var, w: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("conv input is 4-D");
        let wv = self.value(w);
        let (n, c, h, wd) = xv.dim();
        let o = wv.shape()[0];
        assert_eq!(wv.shape(), &[o, c, 3, 3], "conv weight shape");
        let w2 = wv.view().into_shape_with_order((o, c * 9)).expect("contiguous weight");
        let mut out = ArrayD::<F>::zeros(IxDyn(&[n, o, h, wd]));
        let mut cols = Vec::with_capacity(n);
        let xs = xv.as_standard_layout();
        for b in 0..n {
            let col = im2col(xs.slice(s![b, .., .., ..]).as_slice().unwrap(), c, h, wd);
            let y = w2.dot(&col);
            out.slice_mut(s![b, .., .., ..])
                .as_slice_mut()
                .unwrap()
                .copy_from_slice(y.as_slice().unwrap());
            cols.push(col);
        }
        self.push(out, Op::Conv2d { x, w, cols }, &[x, w])
    }

    /// Batch normalization over `N, H, W` per channel. Training mode uses and
    /// returns batch statistics; otherwise the given running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[F], &[F])>,
    ) -> (Var, Option<BatchStats>) {
        let xv = self.value(x);
        let (n, c, h, w) = xv.view().into_dimensionality::<Ix4>().expect("bn input is 4-D").dim();
        let hw = h * w;
        let m = n * hw;
        let xs = xv.as_standard_layout();
        let xs = xs.as_slice().unwrap();
        let g = self.value(gamma).as_slice().unwrap().to_vec();
        let bt = self.value(beta).as_slice().unwrap().to_vec();
        let eps = F::of(BN_EPS);
        let (means, vars, train) = match running {
            None => {
                let mut means = vec![F::zero(); c];
                let mut vars = vec![F::zero(); c];
                for ch in 0..c {
                    let mut sum = F::zero();
                    for b in 0..n {
                        let off = (b * c + ch) * hw;
                        sum += xs[off..off + hw].iter().copied().sum::<F>();
                    }
                    let mean = sum / F::of(m as f64);
                    let mut sq = F::zero();
                    for b in 0..n {
                        let off = (b * c + ch) * hw;
                        sq += xs[off..off + hw].iter().map(|&v| (v - mean) * (v - mean)).sum::<F>();
                    }
                    means[ch] = mean;
                    vars[ch] = sq / F::of(m as f64);
                }
                (means, vars, true)
            }
            Some((rm, rv)) => (rm.to_vec(), rv.to_vec(), false),
        };
        let inv_std: Vec<F> = vars.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![F::zero(); xs.len()];
        let mut out = vec![F::zero(); xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    let z = (xs[i] - means[ch]) * inv_std[ch];
                    xhat[i] = z;
                    out[i] = g[ch] * z + bt[ch];
                }
            }
        }
        let shape = IxDyn(&[n, c, h, w]);
        let stats = train.then(|| BatchStats {
            mean: means.iter().map(|v| v.f64()).collect(),
            var: vars.iter().map(|v| v.f64()).collect(),
            count: m,
        });
        let var = self.push(
            ArrayD::from_shape_vec(shape.clone(), out).unwrap(),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: ArrayD::from_shape_vec(shape, xhat).unwrap(),
                inv_std,
                train,
            },
            &[x, gamma, beta],
        );
        (var, stats)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|a| if a > F::zero() { a } else { F::zero() });
        self.push(v, Op::Relu(x), &[x])
    }

    /// Average pooling over `(kt, kf)` windows of the last two axes. Partial
    /// windows at the end are averaged over their valid elements.
    pub fn avg_pool(&mut self, x: Var, kt: usize, kf: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("pool input is 4-D");
        let (n, c, h, w) = xv.dim();
        let (ho, wo) = (h.div_ceil(kt), w.div_ceil(kf));
        let mut out = ArrayD::<F>::zeros(IxDyn(&[n, c, ho, wo]));
        for b in 0..n {
            for ch in 0..c {
                for i in 0..ho {
                    let (h0, h1) = (i * kt, ((i + 1) * kt).min(h));
                    for j in 0..wo {
                        let (w0, w1) = (j * kf, ((j + 1) * kf).min(w));
                        let win = xv.slice(s![b, ch, h0..h1, w0..w1]);
                        out[[b, ch, i, j]] = win.sum() / F::of(((h1 - h0) * (w1 - w0)) as f64);
                    }
                }
            }
        }
        self.push(out, Op::AvgPool { x, kt, kf }, &[x])
    }

    /// Mean over the frequency axis, reshaped to a time-major sequence:
    /// `[N, C, T, F]` -> `[T * N, C]`.
    pub fn freq_mean(&mut self, x: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("4-D");
        let (n, c, t, f) = xv.dim();
        let inv = F::one() / F::of(f as f64);
        let mean = xv.sum_axis(Axis(3)).mapv(|v| v * inv);
        let mut out = ArrayD::<F>::zeros(IxDyn(&[t * n, c]));
        for b in 0..n {
            for ch in 0..c {
                for ti in 0..t {
                    out[[ti * n + b, ch]] = mean[[b, ch, ti]];
                }
            }
        }
        self.push(out, Op::FreqMean(x), &[x])
    }

    /// Channels `start..start + len` of a `[N, C, ...]` tensor.
    pub fn channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice_axis(Axis(1), (start..start + len).into()).to_owned();
        self.push(v, Op::Channels { x, start }, &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = as2(self.value(a)).dot(&as2(self.value(b))).into_dyn();
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    /// `[M, N] + [N]` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let v = self.value(a) + self.value(bias);
        self.push(v, Op::AddBias(a, bias), &[a, bias])
    }

    /// Affine map `x W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_bias(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|a| F::one() / (F::one() + (-a).exp()));
        self.push(v, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|a| a.tanh());
        self.push(v, Op::Tanh(x), &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = as2(self.value(x)).slice(s![.., start..start + len]).to_owned().into_dyn();
        self.push(v, Op::SliceCols { x, start }, &[x])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = as2(self.value(x)).slice(s![start..start + len, ..]).to_owned().into_dyn();
        self.push(v, Op::SliceRows { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| as2(self.value(p))).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree").into_dyn();
        self.push(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| as2(self.value(p))).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("column counts agree").into_dyn();
        self.push(v, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Reverse sweep. `seeds` are gradients of the scalar objective with
    /// respect to chosen nodes; returns one entry per parameter slot (`None`
    /// for parameters the seeds do not depend on).
    pub fn backward(&self, seeds: Vec<(Var, ArrayD<F>)>) -> Vec<Option<ArrayD<F>>> {
        let mut grads: Vec<Option<ArrayD<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.value(v).shape(), "seed gradient shape");
            accumulate(&mut grads, v, g);
        }
        let mut params: Vec<Option<ArrayD<F>>> = (0..self.n_params).map(|_| None).collect();

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let wants = |v: &Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Input => {}
                Op::Param(p) => match &mut params[*p] {
                    Some(e) => *e += &g,
                    slot => *slot = Some(g),
                },
                Op::Conv2d { x, w, cols } => {
                    let wv = self.value(*w);
                    let (o, c) = (wv.shape()[0], wv.shape()[1]);
                    let w2 = wv.view().into_shape_with_order((o, c * 9)).unwrap();
                    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                    let (n, _, h, wd) = g4.dim();
                    let gs = g4.as_standard_layout();
                    let mut dw = Array2::<F>::zeros((o, c * 9));
                    let mut dx = wants(x).then(|| ArrayD::<F>::zeros(IxDyn(&[n, c, h, wd])));
                    for b in 0..n {
                        let dy = gs
                            .slice(s![b, .., .., ..])
                            .to_owned()
                            .into_shape_with_order((o, h * wd))
                            .unwrap();
                        ndarray::linalg::general_mat_mul(F::one(), &dy, &cols[b].t(), F::one(), &mut dw);
                        if let Some(dx) = dx.as_mut() {
                            let dcol = w2.t().dot(&dy);
                            let mut dxb = dx.slice_mut(s![b, .., .., ..]);
                            col2im_add(dcol.as_slice().unwrap(), dxb.as_slice_mut().unwrap(), c, h, wd);
                        }
                    }
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    if wants(w) {
                        accumulate(&mut grads, *w, dw.into_shape_with_order(IxDyn(&[o, c, 3, 3])).unwrap());
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    train,
                } => {
                    let shape = xhat.shape().to_vec();
                    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                    let m = F::of((n * hw) as f64);
                    let gs = g.as_standard_layout();
                    let gs = gs.as_slice().unwrap();
                    let xh = xhat.as_slice().unwrap();
                    let gam = self.value(*gamma).as_slice().unwrap();
                    let mut dgamma = vec![F::zero(); c];
                    let mut dbeta = vec![F::zero(); c];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            for k in off..off + hw {
                                dgamma[ch] += gs[k] * xh[k];
                                dbeta[ch] += gs[k];
                            }
                        }
                    }
                    if wants(x) {
                        let mut dx = vec![F::zero(); gs.len()];
                        for b in 0..n {
                            for ch in 0..c {
                                let off = (b * c + ch) * hw;
                                if *train {
                                    let k0 = gam[ch] * inv_std[ch] / m;
                                    for k in off..off + hw {
                                        dx[k] = k0 * (m * gs[k] - dbeta[ch] - xh[k] * dgamma[ch]);
                                    }
                                } else {
                                    let k0 = gam[ch] * inv_std[ch];
                                    for k in off..off + hw {
                                        dx[k] = k0 * gs[k];
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads, *x, ArrayD::from_shape_vec(IxDyn(&shape), dx).unwrap());
                    }
                    if wants(gamma) {
                        accumulate(&mut grads, *gamma, ArrayD::from_shape_vec(IxDyn(&[c]), dgamma).unwrap());
                    }
                    if wants(beta) {
                        accumulate(&mut grads, *beta, ArrayD::from_shape_vec(IxDyn(&[c]), dbeta).unwrap());
                    }
                }
                Op::Relu(x) => {
                    if wants(x) {
                        let mut dx = g;
                        Zip::from(&mut dx)
                            .and(self.value(*x))
                            .for_each(|d, &a| {
                                if a <= F::zero() {
                                    *d = F::zero()
                                }
                            });
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::AvgPool { x, kt, kf } => {
                    if wants(x) {
                        let xs = self.value(*x).shape().to_vec();
                        let (h, w) = (xs[2], xs[3]);
                        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                        let (n, c, ho, wo) = g4.dim();
                        let mut dx = ArrayD::<F>::zeros(IxDyn(&xs));
                        for b in 0..n {
                            for ch in 0..c {
                                for i in 0..ho {
                                    let (h0, h1) = (i * kt, ((i + 1) * kt).min(h));
                                    for j in 0..wo {
                                        let (w0, w1) = (j * kf, ((j + 1) * kf).min(w));
                                        let share = g4[[b, ch, i, j]] / F::of(((h1 - h0) * (w1 - w0)) as f64);
                                        dx.slice_mut(s![b, ch, h0..h1, w0..w1]).mapv_inplace(|v| v + share);
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::FreqMean(x) => {
                    if wants(x) {
                        let xs = self.value(*x).shape().to_vec();
                        let (n, f) = (xs[0], xs[3]);
                        let inv = F::one() / F::of(f as f64);
                        let g2 = as2(&g);
                        let dx = ArrayD::from_shape_fn(IxDyn(&xs), |ix| g2[[ix[2] * n + ix[0], ix[1]]] * inv);
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Channels { x, start } => {
                    if wants(x) {
                        let mut dx = ArrayD::<F>::zeros(self.value(*x).raw_dim());
                        let len = g.shape()[1];
                        dx.slice_axis_mut(Axis(1), (*start..*start + len).into()).assign(&g);
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::MatMul(a, b) => {
                    let g2 = as2(&g);
                    if wants(a) {
                        accumulate(&mut grads, *a, g2.dot(&as2(self.value(*b)).t()).into_dyn());
                    }
                    if wants(b) {
                        accumulate(&mut grads, *b, as2(self.value(*a)).t().dot(&g2).into_dyn());
                    }
                }
                Op::AddBias(a, bias) => {
                    if wants(bias) {
                        accumulate(&mut grads, *bias, g.sum_axis(Axis(0)));
                    }
                    if wants(a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Add(a, b) => {
                    if wants(b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if wants(a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if wants(b) {
                        accumulate(&mut grads, *b, g.mapv(|v| -v));
                    }
                    if wants(a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if wants(a) {
                        accumulate(&mut grads, *a, &g * self.value(*b));
                    }
                    if wants(b) {
                        accumulate(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::Sigmoid(x) => {
                    if wants(x) {
                        let mut dx = g;
                        Zip::from(&mut dx)
                            .and(&node.value)
                            .for_each(|d, &y| *d = *d * y * (F::one() - y));
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Tanh(x) => {
                    if wants(x) {
                        let mut dx = g;
                        Zip::from(&mut dx)
                            .and(&node.value)
                            .for_each(|d, &y| *d = *d * (F::one() - y * y));
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::SliceCols { x, start } => {
                    if wants(x) {
                        let mut dx = ArrayD::<F>::zeros(self.value(*x).raw_dim());
                        let len = g.shape()[1];
                        dx.slice_mut(s![.., *start..*start + len]).assign(&g);
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::SliceRows { x, start } => {
                    if wants(x) {
                        let mut dx = ArrayD::<F>::zeros(self.value(*x).raw_dim());
                        let len = g.shape()[0];
                        dx.slice_mut(s![*start..*start + len, ..]).assign(&g);
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).shape()[1];
                        if wants(p) {
                            accumulate(&mut grads, *p, g.slice(s![.., off..off + w]).to_owned().into_dyn());
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = self.value(*p).shape()[0];
                        if wants(p) {
                            accumulate(&mut grads, *p, g.slice(s![off..off + h, ..]).to_owned().into_dyn());
                        }
                        off += h;
                    }
                }
            }
        }
        params
    }
}

fn accumulate<F: Float>(grads: &mut [Option<ArrayD<F>>], v: Var, g: ArrayD<F>) {
    match &mut grads[v.0] {
        Some(e) => *e += &g,
        slot => *slot = Some(g),
    }
}

/// Rows `c * 9 + kh * 3 + kw`, columns `h * W + w`: the input pixel seen by
/// kernel tap `(kh, kw)` at output `(h, w)`, zero outside the image.
fn im2col<F: Float>(x: &[F], c: usize, h: usize, w: usize) -> Array2<F> {
    let hw = h * w;
    let mut cols = Array2::<F>::zeros((c * 9, hw));
    let cs = cols.as_slice_mut().unwrap();
    for ch in 0..c {
        for kh in 0..3 {
            for kw in 0..3 {
                let row = (ch * 9 + kh * 3 + kw) * hw;
                for y in 0..h {
                    let yy = y as isize + kh as isize - 1;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    let src = &x[ch * hw + yy as usize * w..ch * hw + (yy as usize + 1) * w];
                    let dst = &mut cs[row + y * w..row + (y + 1) * w];
                    match kw {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<F: Float>(cols: &[F], dx: &mut [F], c: usize, h: usize, w: usize) {
    let hw = h * w;
    for ch in 0..c {
        for kh in 0..3 {
            for kw in 0..3 {
                let row = (ch * 9 + kh * 3 + kw) * hw;
                for y in 0..h {
                    let yy = y as isize + kh as isize - 1;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    let dst = &mut dx[ch * hw + yy as usize * w..ch * hw + (yy as usize + 1) * w];
                    let src = &cols[row + y * w..row + (y + 1) * w];
                    match kw {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += *s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += *s),
                    }
                }
            }
        }
    }
}
