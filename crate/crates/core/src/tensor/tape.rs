use std::cell::Cell;

use super::kernels::{self, ConvGeom};
use super::{dims2, dims4, Scalar, Tensor};
use crate::error::{Error, Result};

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Smallest row norm accepted by [`Tape::l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

thread_local! {
    static RELU_SIGN_FLIP: Cell<bool> = const { Cell::new(false) };
}

/// Flips the sign of the relu backward rule on this thread. Exists only so
/// the gradient-check suite can prove it notices a broken rule.
#[doc(hidden)]
pub fn set_relu_backward_fault(on: bool) {
    RELU_SIGN_FLIP.with(|c| c.set(on));
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, T),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Max(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    GlobalAvgPool(Var),
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    RowCombine {
        x: Var,
        groups: Vec<Vec<(usize, T)>>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Batch statistics from a training-mode batch norm, for running averages.
#[derive(Clone, Debug)]
pub struct BnBatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance.
    pub var: Vec<T>,
    /// Elements reduced per channel.
    pub count: usize,
}

/// How a batch norm normalizes its input.
pub enum BnMode<'a, T> {
    Train,
    Infer { mean: &'a [T], var: &'a [T] },
}

/// Records operations in execution order; [`Tape::backward`] replays them in
/// reverse.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    param_keys: Vec<(Var, usize)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Product of extents before and after `axis`.
fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis + 1..].iter().product(),
    )
}

/// Channel count and per-channel stride for NCHW or N x D tensors.
fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape.len() {
        2 => Ok((shape[0], shape[1], 1)),
        4 => Ok((shape[0], shape[1], shape[2] * shape[3])),
        _ => Err(Error::shape("batch_norm", format!("expected rank 2 or 4, got {shape:?}"))),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_keys: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A trainable leaf whose gradient is reported under `key`.
    pub fn param(&mut self, value: Tensor<T>, key: usize) -> Var {
        let v = self.leaf(value, true);
        self.param_keys.push((v, key));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), g))
    }

    /// `a * b^T` for `a: m x k`, `b: n x k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul_nt")?;
        let (n, k2) = dims2(self.value(b), "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("inner dims {k} vs {k2}")));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulNt(a, b), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), g))
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.value(b).len();
        let xs = self.value(x);
        if xs.shape().last() != Some(&d) {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + bias of {d}", xs.shape()),
            ));
        }
        let bias = self.value(b).data();
        let mut out = xs.clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o = *o + bv;
            }
        }
        let g = self.any_grad(&[x, b]);
        Ok(self.push(out, Op::AddBias(x, b), g))
    }

    pub fn mul_scalar(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        let g = self.any_grad(&[x]);
        self.push(out, Op::MulScalar(x, s), g)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let g = self.any_grad(&[x]);
        self.push(out, Op::Relu(x), g)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.exp());
        let g = self.any_grad(&[x]);
        self.push(out, Op::Exp(x), g)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= T::zero()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let out = self.value(x).map(|v| v.ln());
        let g = self.any_grad(&[x]);
        Ok(self.push(out, Op::Log(x), g))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let g = self.any_grad(&[x]);
        self.push(out, Op::Sum(x), g)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / T::lit(t.len() as f64));
        let g = self.any_grad(&[x]);
        self.push(out, Op::Mean(x), g)
    }

    pub fn max_elementwise(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| if x >= y { x } else { y })?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Max(a, b), g))
    }

    /// Cross-correlation with zero padding; `x` is NCHW, `w` is OIHW with a
    /// square kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let [n, c, h, wd] = dims4(self.value(x), "conv2d")?;
        let [o, ci, kh, kw] = dims4(self.value(w), "conv2d")?;
        if ci != c || kh != kw || stride == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} with kernel {:?}, stride {stride}", self.shape(x), self.shape(w)),
            ));
        }
        let geom = ConvGeom { c, h, w: wd, k: kh, stride, pad };
        let (ho, wo) = geom.out_hw().ok_or_else(|| {
            Error::shape("conv2d", format!("non-positive output extent for {h}x{wd} with k={kh}"))
        })?;
        let mut out = vec![T::zero(); n * o * ho * wo];
        kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), &mut out, n, o, geom);
        let g = self.any_grad(&[x, w]);
        Ok(self.push(Tensor::new(&[n, o, ho, wo], out)?, Op::Conv2d { x, w, geom }, g))
    }

    /// Per-channel batch norm over NCHW or N x D input.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BnBatchStats<T>>)> {
        let xs = self.value(x);
        let (n, c, s) = channel_layout(xs.shape())?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("batch_norm", format!("{c} channels vs affine of {}", self.value(gamma).len())));
        }
        let eps = T::lit(BN_EPS);
        let data = xs.data();
        let (mean, var, train) = match mode {
            BnMode::Train => {
                let m = T::lit((n * s) as f64);
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut acc = T::zero();
                    for i in 0..n {
                        let base = (i * c + ch) * s;
                        acc = acc + data[base..base + s].iter().copied().sum::<T>();
                    }
                    mean[ch] = acc / m;
                    let mut acc = T::zero();
                    for i in 0..n {
                        let base = (i * c + ch) * s;
                        acc = acc
                            + data[base..base + s]
                                .iter()
                                .map(|&v| (v - mean[ch]) * (v - mean[ch]))
                                .sum::<T>();
                    }
                    var[ch] = acc / m;
                }
                (mean, var, true)
            }
            BnMode::Infer { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", "running stats length"));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gm = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); data.len()];
        let mut out = vec![T::zero(); data.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * s;
                for j in base..base + s {
                    let h = (data[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = h;
                    out[j] = gm[ch] * h + bt[ch];
                }
            }
        }
        let shape = xs.shape().to_vec();
        let g = self.any_grad(&[x, gamma, beta]);
        let stats = train.then(|| BnBatchStats { mean, var, count: n * s });
        let v = self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train },
            g,
        );
        Ok((v, stats))
    }

    /// NCHW -> N x C spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x), "global_avg_pool")?;
        let inv = T::lit(1.0 / (h * w) as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let g = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&[n, c], out)?, Op::GlobalAvgPool(x), g))
    }

    /// Scales each row (leading-axis slice) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x);
        let w = xs.row_len();
        let mut norms = Vec::with_capacity(xs.rows());
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.data().chunks(w) {
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(nrm.to_f64().unwrap_or(0.0) >= NORM_EPS) {
                return Err(Error::Degenerate {
                    norm: nrm.to_f64().unwrap_or(f64::NAN),
                    eps: NORM_EPS,
                });
            }
            norms.push(nrm);
            out.extend(row.iter().map(|&v| v / nrm));
        }
        let shape = xs.shape().to_vec();
        let g = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::L2Normalize { x, norms }, g))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (r, c) = dims2(self.value(logits), "softmax_cross_entropy")?;
        if labels.len() != r || labels.iter().any(|&l| l >= c) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{r}x{c} logits with {} labels", labels.len()),
            ));
        }
        let data = self.value(logits).data();
        let mut probs = vec![T::zero(); r * c];
        let mut total = T::zero();
        for (i, row) in data.chunks(c).enumerate() {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &v) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (v - mx).exp();
                z = z + *p;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p = *p / z;
            }
            total = total + (z.ln() + mx - row[labels[i]]);
        }
        let out = Tensor::scalar(total / T::lit(r as f64));
        let g = self.any_grad(&[logits]);
        Ok(self.push(
            out,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            g,
        ))
    }

    /// Output row `r` is `sum_(i, w) in groups[r]` of `w * x[i]`.
    pub fn row_combine(&mut self, x: Var, groups: Vec<Vec<(usize, T)>>) -> Result<Var> {
        let xs = self.value(x);
        let rows = xs.rows();
        let w = xs.row_len();
        if groups.is_empty() {
            return Err(Error::shape("row_combine", "no output rows"));
        }
        let mut out = vec![T::zero(); groups.len() * w];
        for (r, group) in groups.iter().enumerate() {
            if group.is_empty() {
                return Err(Error::shape("row_combine", format!("empty group {r}")));
            }
            let dst = &mut out[r * w..(r + 1) * w];
            for &(i, wt) in group {
                if i >= rows {
                    return Err(Error::shape("row_combine", format!("row {i} of {rows}")));
                }
                for (o, &v) in dst.iter_mut().zip(xs.row(i)) {
                    *o = *o + wt * v;
                }
            }
        }
        let mut shape = xs.shape().to_vec();
        shape[0] = groups.len();
        let g = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::RowCombine { x, groups }, g))
    }

    /// Rows `idx` of `x`, in order.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        self.row_combine(x, idx.iter().map(|&i| vec![(i, T::one())]).collect())
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*parts.first().ok_or_else(|| Error::shape("concat", "no parts"))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} of rank {}", first.len())));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let same = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let blk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * blk..(o + 1) * blk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let g = self.any_grad(parts);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat { parts: parts.to_vec(), axis },
            g,
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape("slice", format!("[{start}, {}) of axis {axis} in {shape:?}", start + len)));
        }
        let (outer, inner) = outer_inner(&shape, axis);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let g = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&oshape, out)?, Op::Slice { x, axis, start }, g))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(out, Op::Reshape(x), g))
    }

    /// Reverse pass from a scalar root. Consumes the tape.
    pub fn backward(mut self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed_shape = self.shape(loss).to_vec();
        grads[loss.0] = Some(Tensor::ones(&seed_shape));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            if matches!(op, Op::Leaf) {
                grads[i] = Some(dy);
                continue;
            }
            self.backward_node(i, op, &dy, &mut grads)?;
            // consumers are done; only inputs are read from here on
            self.nodes[i].value = Tensor::scalar(T::zero());
        }
        Ok(Gradients {
            grads,
            param_keys: self.param_keys,
        })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, i: usize, op: Op<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    let bt = val(b).transpose2()?;
                    self.acc(grads, a, dy.matmul(&bt)?);
                }
                if self.nodes[b.0].needs_grad {
                    let at = val(a).transpose2()?;
                    self.acc(grads, b, at.matmul(dy)?);
                }
            }
            Op::MatMulNt(a, b) => {
                if self.nodes[a.0].needs_grad {
                    self.acc(grads, a, dy.matmul(val(b))?);
                }
                if self.nodes[b.0].needs_grad {
                    self.acc(grads, b, dy.transpose2()?.matmul(val(a))?);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, a, dy.clone());
                self.acc(grads, b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, a, dy.clone());
                self.acc(grads, b, dy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    self.acc(grads, a, dy.zip_map(val(b), |g, y| g * y)?);
                }
                if self.nodes[b.0].needs_grad {
                    self.acc(grads, b, dy.zip_map(val(a), |g, x| g * x)?);
                }
            }
            Op::AddBias(x, b) => {
                self.acc(grads, x, dy.clone());
                if self.nodes[b.0].needs_grad {
                    let d = val(b).len();
                    let mut db = vec![T::zero(); d];
                    for row in dy.data().chunks(d) {
                        for (o, &g) in db.iter_mut().zip(row) {
                            *o = *o + g;
                        }
                    }
                    self.acc(grads, b, Tensor::new(val(b).shape(), db)?);
                }
            }
            Op::MulScalar(x, s) => self.acc(grads, x, dy.map(|g| g * s)),
            Op::Relu(x) => {
                let sign = if RELU_SIGN_FLIP.with(Cell::get) { -T::one() } else { T::one() };
                let dx = dy.zip_map(val(x), |g, v| if v > T::zero() { g * sign } else { T::zero() })?;
                self.acc(grads, x, dx);
            }
            Op::Exp(x) => {
                let dx = dy.zip_map(&self.nodes[i].value, |g, y| g * y)?;
                self.acc(grads, x, dx);
            }
            Op::Log(x) => self.acc(grads, x, dy.zip_map(val(x), |g, v| g / v)?),
            Op::Sum(x) => {
                let g = dy.item();
                self.acc(grads, x, Tensor::full(val(x).shape(), g));
            }
            Op::Mean(x) => {
                let g = dy.item() / T::lit(val(x).len() as f64);
                self.acc(grads, x, Tensor::full(val(x).shape(), g));
            }
            Op::Max(a, b) => {
                let (av, bv) = (val(a).data(), val(b).data());
                let mut da = vec![T::zero(); av.len()];
                let mut db = vec![T::zero(); av.len()];
                for j in 0..av.len() {
                    if av[j] >= bv[j] {
                        da[j] = dy.data()[j];
                    } else {
                        db[j] = dy.data()[j];
                    }
                }
                self.acc(grads, a, Tensor::new(val(a).shape(), da)?);
                self.acc(grads, b, Tensor::new(val(b).shape(), db)?);
            }
            Op::Conv2d { x, w, geom } => {
                let n = val(x).shape()[0];
                let o = val(w).shape()[0];
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![T::zero(); val(x).len()];
                    kernels::conv2d_backward_input(dy.data(), val(w).data(), &mut dx, o, geom);
                    self.acc(grads, x, Tensor::new(val(x).shape(), dx)?);
                }
                if self.nodes[w.0].needs_grad {
                    let mut dw = vec![T::zero(); val(w).len()];
                    kernels::conv2d_backward_weight(val(x).data(), dy.data(), &mut dw, n, o, geom);
                    self.acc(grads, w, Tensor::new(val(w).shape(), dw)?);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let (n, c, s) = channel_layout(val(x).shape())?;
                let gm = val(gamma).data();
                let g = dy.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * s;
                        for j in base..base + s {
                            dgamma[ch] = dgamma[ch] + g[j] * xhat[j];
                            dbeta[ch] = dbeta[ch] + g[j];
                        }
                    }
                }
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![T::zero(); g.len()];
                    let m = T::lit((n * s) as f64);
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * s;
                            for j in base..base + s {
                                dx[j] = if train {
                                    // dxhat = g * gamma; sums over the channel:
                                    // sum(dxhat) = gamma * dbeta, sum(dxhat * xhat) = gamma * dgamma
                                    gm[ch] * inv_std[ch] / m
                                        * (m * g[j] - dbeta[ch] - xhat[j] * dgamma[ch])
                                } else {
                                    g[j] * gm[ch] * inv_std[ch]
                                };
                            }
                        }
                    }
                    self.acc(grads, x, Tensor::new(val(x).shape(), dx)?);
                }
                self.acc(grads, gamma, Tensor::new(val(gamma).shape(), dgamma)?);
                self.acc(grads, beta, Tensor::new(val(beta).shape(), dbeta)?);
            }
            Op::GlobalAvgPool(x) => {
                let s = val(x).shape()[2] * val(x).shape()[3];
                let inv = T::lit(1.0 / s as f64);
                let mut dx = Vec::with_capacity(val(x).len());
                for &g in dy.data() {
                    dx.extend(std::iter::repeat_n(g * inv, s));
                }
                self.acc(grads, x, Tensor::new(val(x).shape(), dx)?);
            }
            Op::L2Normalize { x, norms } => {
                let y = &self.nodes[i].value;
                let w = y.row_len();
                let mut dx = Vec::with_capacity(y.len());
                for (r, &nrm) in norms.iter().enumerate() {
                    let (yr, gr) = (y.row(r), &dy.data()[r * w..(r + 1) * w]);
                    let proj: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| (gv - yv * proj) / nrm));
                }
                self.acc(grads, x, Tensor::new(y.shape(), dx)?);
            }
            Op::SoftmaxCe { logits, labels, mut probs } => {
                let c = val(logits).shape()[1];
                let scale = dy.item() / T::lit(labels.len() as f64);
                for (r, &l) in labels.iter().enumerate() {
                    probs[r * c + l] = probs[r * c + l] - T::one();
                }
                for p in &mut probs {
                    *p = *p * scale;
                }
                self.acc(grads, logits, Tensor::new(val(logits).shape(), probs)?);
            }
            Op::RowCombine { x, groups } => {
                let xs = val(x);
                let w = xs.row_len();
                let mut dx = vec![T::zero(); xs.len()];
                for (r, group) in groups.iter().enumerate() {
                    let gr = &dy.data()[r * w..(r + 1) * w];
                    for &(src, wt) in group {
                        for (d, &g) in dx[src * w..(src + 1) * w].iter_mut().zip(gr) {
                            *d = *d + wt * g;
                        }
                    }
                }
                self.acc(grads, x, Tensor::new(xs.shape(), dx)?);
            }
            Op::Concat { parts, axis } => {
                let (outer, inner) = outer_inner(dy.shape(), axis);
                let total = dy.shape()[axis];
                let mut offset = 0;
                for p in parts {
                    let len = val(p).shape()[axis];
                    if self.nodes[p.0].needs_grad {
                        let mut dp = Vec::with_capacity(val(p).len());
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dp.extend_from_slice(&dy.data()[base..base + len * inner]);
                        }
                        self.acc(grads, p, Tensor::new(val(p).shape(), dp)?);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = val(x).shape();
                let (outer, inner) = outer_inner(shape, axis);
                let len = dy.shape()[axis];
                let mut dx = vec![T::zero(); val(x).len()];
                for o in 0..outer {
                    let base = (o * shape[axis] + start) * inner;
                    dx[base..base + len * inner]
                        .copy_from_slice(&dy.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.acc(grads, x, Tensor::new(shape, dx)?);
            }
            Op::Reshape(x) => {
                self.acc(grads, x, dy.clone().reshape(val(x).shape())?);
            }
        }
        Ok(())
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    param_keys: Vec<(Var, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the root with respect to a leaf, if it received any.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// `(key, grad)` for every parameter leaf that received a gradient.
    pub fn params(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> + '_ {
        self.param_keys
            .iter()
            .filter_map(|&(v, key)| self.wrt(v).map(|g| (key, g)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn relu_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[-1.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn cross_entropy_uniform_and_two_class() {
        for b in [2usize, 5, 17] {
            let mut tape = Tape::<f64>::new();
            let l = tape.constant(Tensor::full(&[1, b], 0.3));
            let ce = tape.softmax_cross_entropy(l, &[b - 1]).unwrap();
            assert!((tape.value(ce).item() - (b as f64).ln()).abs() < 1e-12);
        }
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        let ce = tape.softmax_cross_entropy(l, &[0]).unwrap();
        let expect = (1.0 + (-1.0f64).exp()).ln();
        assert!((tape.value(ce).item() - expect).abs() < 1e-12);
        assert!((expect - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(tape.log(x), Err(Error::Domain { .. })));
    }

    #[test]
    fn l2_normalize_values_and_degenerate() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 2], &[3.0, 4.0]));
        let y = tape.l2_normalize(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.6, 0.8]);
        let u = tape.constant(t(&[1, 3], &[0.0, 1.0, 0.0]));
        let y = tape.l2_normalize(u).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 1.0, 0.0]);
        let z = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(tape.l2_normalize(z), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn conv_trivial_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let w = tape.constant(Tensor::full(&[1, 1, 1, 1], 2.0));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 2.0));

        // impulse response reproduces the kernel around the impulse
        let mut img = vec![0.0; 25];
        img[12] = 1.0;
        let x = tape.constant(t(&[1, 1, 5, 5], &img));
        let k: Vec<f64> = (1..=9).map(f64::from).collect();
        let w = tape.constant(t(&[1, 1, 3, 3], &k));
        let y = tape.conv2d(x, w, 1, 1).unwrap();
        let out = tape.value(y).data();
        // cross-correlation flips: out[2+dy][2+dx] = k[1-dy][1-dx]
        for dy in -1i32..=1 {
            for dx in -1i32..=1 {
                let o = out[((2 + dy) * 5 + 2 + dx) as usize];
                let kv = k[((1 - dy) * 3 + 1 - dx) as usize];
                assert_eq!(o, kv);
            }
        }
        let w = tape.constant(Tensor::ones(&[1, 1, 7, 7]));
        assert!(tape.conv2d(x, w, 1, 0).is_err());
    }

    #[test]
    fn backward_basic_rules() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[3], &[1.0, -2.0, 0.5]), 0);
        let s = tape.sum(w);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(w).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[3], &[1.0, -2.0, 0.5]), 0);
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq);
        let half = tape.mul_scalar(s, 0.5);
        let g = tape.backward(half).unwrap();
        assert_eq!(g.wrt(w).unwrap().data(), &[1.0, -2.0, 0.5]);
        assert_eq!(g.params().count(), 1);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]), 0);
        assert!(tape.backward(w).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        let w = tape.param(t(&[2], &[3.0, 4.0]), 7);
        let p = tape.mul(c, w).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert!(g.wrt(c).is_none());
        assert_eq!(g.wrt(w).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64));
        let b = tape.constant(Tensor::from_fn(&[2, 3, 2, 2], |i| 100.0 + i as f64));
        let c = tape.concat(&[a, b], 3).unwrap();
        assert_eq!(tape.shape(c), &[2, 3, 2, 4]);
        let back = tape.slice(c, 3, 2, 2).unwrap();
        assert_eq!(tape.value(back), tape.value(b));
        let front = tape.slice(c, 3, 0, 2).unwrap();
        assert_eq!(tape.value(front), tape.value(a));
    }
}
