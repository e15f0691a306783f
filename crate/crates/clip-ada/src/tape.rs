//! Reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! Forward quantities are recorded on a [`Tape`]; [`Tape::backward`] replays
//! the recorded ops in reverse and accumulates vector-Jacobian products into
//! every node that transitively depends on a parameter. The op set is exactly
//! what the prompt-alignment pipeline needs: dense linear algebra, pointwise
//! nonlinearities, patch extraction, bilinear upsampling and a logit-space
//! binary cross-entropy.

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView2, Axis, Ix1, Ix2, Ix3, IxDyn};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    /// `(m,k) x (k,n) -> (m,n)`
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    /// `(m,n) + (n,) -> (m,n)`, bias broadcast over rows
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `(h,w)` map times `(h,w,3)` image, map broadcast over channels
    MulChan(Var, Var),
    Tanh(Var),
    QuickGelu(Var),
    /// sigmoid(clamp(x, -limit, limit))
    SigmoidClamp(Var, f64),
    /// row-wise softmax over a 2-d array
    SoftmaxRows(Var),
    /// layer norm over the last axis of a 2-d array
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    /// mean over axis 0 of a 2-d array -> 1-d
    MeanAxis0(Var),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    Reshape(Var),
    /// `(h,w,3)` image -> `(n_patches, patch*patch*3)` rows in raster order
    Patchify {
        x: Var,
        patch: usize,
    },
    /// `(h,w)` -> `(out_h,out_w)` bilinear, half-pixel centers
    BilinearUp {
        x: Var,
        out_h: usize,
        out_w: usize,
    },
    /// mean-reduced binary cross-entropy, computed in logit space with the
    /// logits clamped to +-limit
    BceWithLogitsMean {
        logits: Var,
        targets: ArrayD<f64>,
        limit: f64,
    },
}

struct Node {
    value: ArrayD<f64>,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `v`, if `v` was on the
    /// differentiable path.
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn view2(a: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("2-d value")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<f64>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record a trainable leaf.
    pub fn param<D: ndarray::Dimension>(&mut self, value: ndarray::Array<f64, D>) -> Var {
        self.push(value.into_dyn(), true, Op::Leaf)
    }

    /// Record a frozen leaf; no gradient flows into it.
    pub fn constant<D: ndarray::Dimension>(&mut self, value: ndarray::Array<f64, D>) -> Var {
        self.push(value.into_dyn(), false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn value2(&self, v: Var) -> Array2<f64> {
        view2(self.value(v)).to_owned()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        assert_eq!(value.len(), 1, "scalar() on non-scalar value");
        value.iter().copied().next().unwrap()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = view2(self.value(a)).dot(&view2(self.value(b)));
        let req = self.requires(a) || self.requires(b);
        self.push(out.into_dyn(), req, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = view2(self.value(a)).t().to_owned();
        let req = self.requires(a);
        self.push(out.into_dyn(), req, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes");
        let out = self.value(a) + self.value(b);
        let req = self.requires(a) || self.requires(b);
        self.push(out, req, Op::Add(a, b))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let m = view2(self.value(a)).to_owned();
        let b = self
            .value(bias)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("bias must be 1-d");
        assert_eq!(m.ncols(), b.len(), "add_bias width");
        let out = &m + &b;
        let req = self.requires(a) || self.requires(bias);
        self.push(out.into_dyn(), req, Op::AddBias(a, bias))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shapes");
        let out = self.value(a) * self.value(b);
        let req = self.requires(a) || self.requires(b);
        self.push(out, req, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        let req = self.requires(a);
        self.push(out, req, Op::Scale(a, c))
    }

    pub fn mul_chan(&mut self, map: Var, image: Var) -> Var {
        let m = self
            .value(map)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("map must be 2-d");
        let img = self
            .value(image)
            .view()
            .into_dimensionality::<Ix3>()
            .expect("image must be 3-d");
        assert_eq!(
            (m.nrows(), m.ncols()),
            (img.shape()[0], img.shape()[1]),
            "mul_chan spatial shapes"
        );
        let mut out = img.to_owned();
        for ((h, w, _), px) in out.indexed_iter_mut() {
            *px *= m[(h, w)];
        }
        let req = self.requires(map) || self.requires(image);
        self.push(out.into_dyn(), req, Op::MulChan(map, image))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        let req = self.requires(a);
        self.push(out, req, Op::Tanh(a))
    }

    pub fn quick_gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * sigmoid(1.702 * x));
        let req = self.requires(a);
        self.push(out, req, Op::QuickGelu(a))
    }

    pub fn sigmoid_clamp(&mut self, a: Var, limit: f64) -> Var {
        let out = self.value(a).mapv(|z| sigmoid(z.clamp(-limit, limit)));
        let req = self.requires(a);
        self.push(out, req, Op::SigmoidClamp(a, limit))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = view2(self.value(a));
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|z| (z - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|z| z / sum);
        }
        let req = self.requires(a);
        self.push(out.into_dyn(), req, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = view2(self.value(x)).to_owned();
        let g = self
            .value(gamma)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("gamma must be 1-d")
            .to_owned();
        let b = self
            .value(beta)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("beta must be 1-d")
            .to_owned();
        let n = xv.ncols() as f64;
        let mut out = xv.clone();
        for mut row in out.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * g[j] + b[j];
            }
        }
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        self.push(out.into_dyn(), req, Op::LayerNorm { x, gamma, beta, eps })
    }

    pub fn mean_axis0(&mut self, a: Var) -> Var {
        let out = view2(self.value(a))
            .mean_axis(Axis(0))
            .expect("mean over non-empty axis");
        let req = self.requires(a);
        self.push(out.into_dyn(), req, Op::MeanAxis0(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let views: Vec<_> = parts.iter().map(|&p| view2(self.value(p))).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows shapes");
        let req = parts.iter().any(|&p| self.requires(p));
        self.push(out.into_dyn(), req, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = view2(self.value(x));
        assert!(start + len <= v.nrows(), "slice_rows range");
        let out = v.slice(ndarray::s![start..start + len, ..]).to_owned();
        let req = self.requires(x);
        self.push(out.into_dyn(), req, Op::SliceRows { x, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let views: Vec<_> = parts.iter().map(|&p| view2(self.value(p))).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols shapes");
        let req = parts.iter().any(|&p| self.requires(p));
        self.push(out.into_dyn(), req, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = view2(self.value(x));
        assert!(start + len <= v.ncols(), "slice_cols range");
        let out = v.slice(ndarray::s![.., start..start + len]).to_owned();
        let req = self.requires(x);
        self.push(out.into_dyn(), req, Op::SliceCols { x, start, len })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self
            .value(x)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape element count");
        let req = self.requires(x);
        self.push(out, req, Op::Reshape(x))
    }

    pub fn patchify(&mut self, image: Var, patch: usize) -> Var {
        let img = self
            .value(image)
            .view()
            .into_dimensionality::<Ix3>()
            .expect("image must be 3-d");
        let out = patchify_forward(&img.to_owned(), patch);
        let req = self.requires(image);
        self.push(out.into_dyn(), req, Op::Patchify { x: image, patch })
    }

    pub fn bilinear_up(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let m = view2(self.value(x)).to_owned();
        let out = crate::imageops::bilinear_resize(&m, out_h, out_w);
        let req = self.requires(x);
        self.push(out.into_dyn(), req, Op::BilinearUp { x, out_h, out_w })
    }

    pub fn bce_with_logits_mean(&mut self, logits: Var, targets: &ArrayD<f64>, limit: f64) -> Var {
        let z = self.value(logits);
        assert_eq!(z.shape(), targets.shape(), "bce shapes");
        let n = z.len() as f64;
        let mut loss = 0.0;
        for (&z, &y) in z.iter().zip(targets.iter()) {
            let zc = z.clamp(-limit, limit);
            loss += y * softplus(-zc) + (1.0 - y) * softplus(zc);
        }
        loss /= n;
        let req = self.requires(logits);
        self.push(
            ndarray::arr0(loss).into_dyn(),
            req,
            Op::BceWithLogitsMean {
                logits,
                targets: targets.clone(),
                limit,
            },
        )
    }

    /// Reverse pass from a scalar root. Returns one gradient per reachable
    /// differentiable node.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        if !self.requires(root) {
            return Gradients { grads };
        }
        grads[root.0] = Some(ArrayD::ones(self.nodes[root.0].value.raw_dim()));

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<ArrayD<f64>>], v: Var, delta: ArrayD<f64>) {
        if !self.requires(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, id: usize, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let gv = view2(g);
                let av = view2(self.value(*a));
                let bv = view2(self.value(*b));
                if self.requires(*a) {
                    self.accumulate(grads, *a, gv.dot(&bv.t()).into_dyn());
                }
                if self.requires(*b) {
                    self.accumulate(grads, *b, av.t().dot(&gv).into_dyn());
                }
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, view2(g).t().to_owned().into_dyn());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddBias(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires(*bias) {
                    let gb = view2(g).sum_axis(Axis(0));
                    self.accumulate(grads, *bias, gb.into_dyn());
                }
            }
            Op::Mul(a, b) => {
                if self.requires(*a) {
                    self.accumulate(grads, *a, g * self.value(*b));
                }
                if self.requires(*b) {
                    self.accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, g * *c);
            }
            Op::MulChan(map, image) => {
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                if self.requires(*map) {
                    let img = self.value(*image).view().into_dimensionality::<Ix3>().unwrap();
                    let (h, w) = (gv.shape()[0], gv.shape()[1]);
                    let mut gm = Array2::<f64>::zeros((h, w));
                    for ((i, j, c), gx) in gv.indexed_iter() {
                        gm[(i, j)] += gx * img[(i, j, c)];
                    }
                    self.accumulate(grads, *map, gm.into_dyn());
                }
                if self.requires(*image) {
                    let m = self.value(*map).view().into_dimensionality::<Ix2>().unwrap();
                    let mut gi = gv.to_owned();
                    for ((i, j, _), gx) in gi.indexed_iter_mut() {
                        *gx *= m[(i, j)];
                    }
                    self.accumulate(grads, *image, gi.into_dyn());
                }
            }
            Op::Tanh(a) => {
                let y = &self.nodes[id].value;
                self.accumulate(grads, *a, g * &y.mapv(|t| 1.0 - t * t));
            }
            Op::QuickGelu(a) => {
                let x = self.value(*a);
                let d = x.mapv(|x| {
                    let s = sigmoid(1.702 * x);
                    s + x * 1.702 * s * (1.0 - s)
                });
                self.accumulate(grads, *a, g * &d);
            }
            Op::SigmoidClamp(a, limit) => {
                let x = self.value(*a);
                let y = &self.nodes[id].value;
                let mut d = y.mapv(|y| y * (1.0 - y));
                d.zip_mut_with(x, |d, &z| {
                    if z.abs() > *limit {
                        *d = 0.0;
                    }
                });
                self.accumulate(grads, *a, g * &d);
            }
            Op::SoftmaxRows(a) => {
                let y = view2(&self.nodes[id].value);
                let gv = view2(g);
                let mut gz = y.to_owned();
                for (mut gz_row, (y_row, g_row)) in
                    gz.rows_mut().into_iter().zip(y.rows().into_iter().zip(gv.rows()))
                {
                    let dot: f64 = y_row.iter().zip(g_row.iter()).map(|(y, g)| y * g).sum();
                    for (j, gz) in gz_row.iter_mut().enumerate() {
                        *gz = y_row[j] * (g_row[j] - dot);
                    }
                }
                self.accumulate(grads, *a, gz.into_dyn());
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = view2(self.value(*x));
                let gv = view2(g);
                let gm = self.value(*gamma).view().into_dimensionality::<Ix1>().unwrap();
                let n = xv.ncols();
                let nf = n as f64;
                let mut gx = Array2::<f64>::zeros(xv.raw_dim());
                let mut ggamma = Array1::<f64>::zeros(n);
                let mut gbeta = Array1::<f64>::zeros(n);
                for (i, (row, grow)) in xv.rows().into_iter().zip(gv.rows()).enumerate() {
                    let mean = row.sum() / nf;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nf;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let gy_g: Vec<f64> = (0..n).map(|j| grow[j] * gm[j]).collect();
                    let mean_g: f64 = gy_g.iter().sum::<f64>() / nf;
                    let mean_gx: f64 =
                        gy_g.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / nf;
                    for j in 0..n {
                        ggamma[j] += grow[j] * xhat[j];
                        gbeta[j] += grow[j];
                        gx[(i, j)] = (gy_g[j] - mean_g - xhat[j] * mean_gx) * inv;
                    }
                }
                self.accumulate(grads, *x, gx.into_dyn());
                if self.requires(*gamma) {
                    self.accumulate(grads, *gamma, ggamma.into_dyn());
                }
                if self.requires(*beta) {
                    self.accumulate(grads, *beta, gbeta.into_dyn());
                }
            }
            Op::MeanAxis0(a) => {
                let rows = view2(self.value(*a)).nrows();
                let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut ga = Array2::<f64>::zeros((rows, gv.len()));
                let scaled = gv.mapv(|v| v / rows as f64);
                for mut row in ga.rows_mut() {
                    row.assign(&scaled);
                }
                self.accumulate(grads, *a, ga.into_dyn());
            }
            Op::ConcatRows(parts) => {
                let gv = view2(g);
                let mut start = 0;
                for &p in parts {
                    let rows = view2(self.value(p)).nrows();
                    if self.requires(p) {
                        let slice = gv.slice(ndarray::s![start..start + rows, ..]).to_owned();
                        self.accumulate(grads, p, slice.into_dyn());
                    }
                    start += rows;
                }
            }
            Op::SliceRows { x, start, len } => {
                let full = view2(self.value(*x));
                let mut gx = Array2::<f64>::zeros(full.raw_dim());
                gx.slice_mut(ndarray::s![*start..*start + *len, ..])
                    .assign(&view2(g));
                self.accumulate(grads, *x, gx.into_dyn());
            }
            Op::ConcatCols(parts) => {
                let gv = view2(g);
                let mut start = 0;
                for &p in parts {
                    let cols = view2(self.value(p)).ncols();
                    if self.requires(p) {
                        let slice = gv.slice(ndarray::s![.., start..start + cols]).to_owned();
                        self.accumulate(grads, p, slice.into_dyn());
                    }
                    start += cols;
                }
            }
            Op::SliceCols { x, start, len } => {
                let full = view2(self.value(*x));
                let mut gx = Array2::<f64>::zeros(full.raw_dim());
                gx.slice_mut(ndarray::s![.., *start..*start + *len])
                    .assign(&view2(g));
                self.accumulate(grads, *x, gx.into_dyn());
            }
            Op::Reshape(x) => {
                let back = g
                    .clone()
                    .into_shape_with_order(self.value(*x).raw_dim())
                    .expect("reshape grad");
                self.accumulate(grads, *x, back);
            }
            Op::Patchify { x, patch } => {
                let img_shape = self.value(*x).shape().to_vec();
                let gv = view2(g);
                let gx = patchify_backward(&gv.to_owned(), img_shape[0], img_shape[1], *patch);
                self.accumulate(grads, *x, gx.into_dyn());
            }
            Op::BilinearUp { x, out_h, out_w } => {
                let src = view2(self.value(*x));
                let gv = view2(g);
                let gx = crate::imageops::bilinear_resize_vjp(
                    src.nrows(),
                    src.ncols(),
                    *out_h,
                    *out_w,
                    &gv.to_owned(),
                );
                self.accumulate(grads, *x, gx.into_dyn());
            }
            Op::BceWithLogitsMean { logits, targets, limit } => {
                let gs = g.iter().copied().next().unwrap();
                let z = self.value(*logits);
                let n = z.len() as f64;
                let mut gz = z.clone();
                gz.zip_mut_with(targets, |z, &y| {
                    *z = if z.abs() > *limit {
                        0.0
                    } else {
                        (sigmoid(*z) - y) / n
                    };
                });
                self.accumulate(grads, *logits, gz * gs);
            }
        }
    }
}

/// Split an `(h, w, 3)` image into non-overlapping `patch x patch` tiles,
/// flattened row-major as `(py, px, channel)`, tiles in raster order.
pub fn patchify_forward(image: &Array3<f64>, patch: usize) -> Array2<f64> {
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    assert_eq!(c, 3, "patchify expects 3 channels");
    assert!(h % patch == 0 && w % patch == 0, "patchify divisibility");
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Array2::<f64>::zeros((gh * gw, patch * patch * 3));
    for gy in 0..gh {
        for gx in 0..gw {
            let row = gy * gw + gx;
            for py in 0..patch {
                for px in 0..patch {
                    for ch in 0..3 {
                        out[(row, (py * patch + px) * 3 + ch)] =
                            image[(gy * patch + py, gx * patch + px, ch)];
                    }
                }
            }
        }
    }
    out
}

fn patchify_backward(g: &Array2<f64>, h: usize, w: usize, patch: usize) -> Array3<f64> {
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Array3::<f64>::zeros((h, w, 3));
    for gy in 0..gh {
        for gx in 0..gw {
            let row = gy * gw + gx;
            for py in 0..patch {
                for px in 0..patch {
                    for ch in 0..3 {
                        out[(gy * patch + py, gx * patch + px, ch)] +=
                            g[(row, (py * patch + px) * 3 + ch)];
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of a scalar-valued rebuild closure.
    fn fd_grad<F>(theta: &ArrayD<f64>, mut eval: F, h: f64) -> ArrayD<f64>
    where
        F: FnMut(&ArrayD<f64>) -> f64,
    {
        let mut g = ArrayD::zeros(theta.raw_dim());
        for idx in 0..theta.len() {
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            minus.as_slice_mut().unwrap()[idx] -= h;
            g.as_slice_mut().unwrap()[idx] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &ArrayD<f64>, b: &ArrayD<f64>, tol: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(1.0);
            assert!(rel < tol, "gradient mismatch: {x} vs {y} (rel {rel})");
        }
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        Array::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Generic gradient check: builds a scalar from `theta` through `graph`.
    fn check<G>(shape: &[usize], graph: G, tol: f64)
    where
        G: Fn(&mut Tape, Var) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let theta = random(shape, &mut rng);

        let mut tape = Tape::new();
        let p = tape.param(theta.clone());
        let loss = graph(&mut tape, p);
        assert_eq!(tape.value(loss).len(), 1, "graph must end in a scalar");
        let grads = tape.backward(loss);
        let analytic = grads.wrt(p).expect("gradient exists").clone();

        let fd = fd_grad(
            &theta,
            |t| {
                let mut tape = Tape::new();
                let p = tape.param(t.clone());
                let loss = graph(&mut tape, p);
                tape.scalar(loss)
            },
            1e-5,
        );
        assert_close(&analytic, &fd, tol);
    }

    /// Sum-of-squares readout so any op output reduces to a scalar.
    fn sq_sum(tape: &mut Tape, v: Var) -> Var {
        let two = tape.mul(v, v);
        let flat_len = tape.value(two).len();
        let flat = tape.reshape(two, &[1, flat_len]);
        let pooled = tape.mean_axis0(flat);
        let col = tape.reshape(pooled, &[flat_len, 1]);
        let m = tape.mean_axis0(col);
        tape.reshape(m, &[])
    }

    #[test]
    fn matmul_grad_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let other = random(&[4, 3], &mut rng);
        check(
            &[3, 4],
            move |tape, p| {
                let b = tape.constant(other.clone());
                let y = tape.matmul(p, b);
                sq_sum(tape, y)
            },
            1e-7,
        );
    }

    #[test]
    fn pointwise_grads_match_fd() {
        check(
            &[3, 5],
            |tape, p| {
                let t = tape.tanh(p);
                let q = tape.quick_gelu(t);
                let s = tape.sigmoid_clamp(q, 50.0);
                sq_sum(tape, s)
            },
            1e-6,
        );
    }

    #[test]
    fn softmax_layernorm_grads_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gamma = random(&[6], &mut rng);
        let beta = random(&[6], &mut rng);
        check(
            &[4, 6],
            move |tape, p| {
                let g = tape.constant(gamma.clone());
                let b = tape.constant(beta.clone());
                let ln = tape.layer_norm(p, g, b, 1e-5);
                let sm = tape.softmax_rows(ln);
                sq_sum(tape, sm)
            },
            1e-5,
        );
    }

    #[test]
    fn layernorm_param_grads_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[4, 6], &mut rng);
        check(
            &[6],
            move |tape, p| {
                let xv = tape.constant(x.clone());
                let beta_zeros = tape.constant(ArrayD::zeros(IxDyn(&[6])));
                let ln = tape.layer_norm(xv, p, beta_zeros, 1e-5);
                sq_sum(tape, ln)
            },
            1e-6,
        );
    }

    #[test]
    fn structural_op_grads_match_fd() {
        check(
            &[6, 4],
            |tape, p| {
                let top = tape.slice_rows(p, 0, 2);
                let rest = tape.slice_rows(p, 2, 4);
                let re = tape.concat_rows(&[rest, top]);
                let left = tape.slice_cols(re, 0, 2);
                let right = tape.slice_cols(re, 2, 2);
                let swapped = tape.concat_cols(&[right, left]);
                let t = tape.transpose(swapped);
                sq_sum(tape, t)
            },
            1e-7,
        );
    }

    #[test]
    fn image_op_grads_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let image = random(&[4, 4, 3], &mut rng).mapv(f64::abs);
        check(
            &[2, 2],
            move |tape, p| {
                let up = tape.bilinear_up(p, 4, 4);
                let img = tape.constant(image.clone());
                let attended = tape.mul_chan(up, img);
                let patches = tape.patchify(attended, 2);
                sq_sum(tape, patches)
            },
            1e-6,
        );
    }

    #[test]
    fn bce_grad_matches_fd() {
        let targets = arr2(&[[1.0, 0.0], [0.0, 1.0]]).into_dyn();
        check(
            &[2, 2],
            move |tape, p| tape.bce_with_logits_mean(p, &targets, 50.0),
            1e-7,
        );
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let mut tape = Tape::new();
        let z = tape.param(ArrayD::zeros(IxDyn(&[3, 3])));
        let y = arr2(&[[1.0, 0.0, 1.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0]]).into_dyn();
        let loss = tape.bce_with_logits_mean(z, &y, 50.0);
        assert!((tape.scalar(loss) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(arr2(&[[1.0, 2.0]]));
        let p = tape.param(arr2(&[[3.0], [4.0]]));
        let y = tape.matmul(c, p);
        let loss = tape.reshape(y, &[]);
        let grads = tape.backward(loss);
        assert!(grads.wrt(c).is_none());
        assert!(grads.wrt(p).is_some());
    }

    #[test]
    fn add_bias_accumulates_rows() {
        let mut tape = Tape::new();
        let a = tape.constant(Array2::<f64>::zeros((3, 2)));
        let b = tape.param(arr1(&[1.0, -1.0]));
        let y = tape.add_bias(a, b);
        let s = sq_sum(&mut tape, y);
        let grads = tape.backward(s);
        let gb = grads.wrt(b).unwrap();
        // d/db mean(b_j^2 over 6 cells) = 2 b_j * 3 / 6 = b_j
        assert!((gb[[0]] - 1.0).abs() < 1e-12);
        assert!((gb[[1]] + 1.0).abs() < 1e-12);
    }
}
