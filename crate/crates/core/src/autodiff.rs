//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! Operations are coarse (a whole linear layer, a whole multi-head attention
//! over a batch of sequences, a whole loss) and each carries a hand-derived
//! vector-Jacobian product. Nodes are appended in evaluation order, so a
//! single reverse sweep over the node list is a valid topological order.
//!
//! `stop_grad` is an explicit node: identity in the forward pass, and it
//! propagates nothing in the backward pass.

use crate::error::{Error, Result};
use crate::tensor::{gemm, matmul, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index triple into the rows of a feature matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TripletIdx {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

const LAYER_NORM_EPS: f64 = 1e-6;
pub const BATCH_NORM_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    AddRow {
        x: Var,
        row: Var,
    },
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Option<(Var, Var)>,
        xhat: Vec<T>,
        rstd: Vec<T>,
        mean: Vec<T>,
        var: Vec<T>,
    },
    Attention {
        qkv: Var,
        heads: usize,
        segments: Vec<(usize, usize)>,
        probs: Vec<Vec<T>>,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    StopGrad,
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
    SoftMarginTriplet {
        x: Var,
        triplets: Vec<TripletIdx>,
        sigmoid: Vec<T>,
    },
    NegCosine {
        p: Var,
        z: Var,
    },
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Recording of one forward evaluation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` when no path connects `v` to the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn softplus<T: Real>(x: T) -> T {
    // log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::c((2.0 / std::f64::consts::PI).sqrt());
    let a = T::c(0.044715);
    let half = T::c(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::c(3.0) * a * x * x);
    (y, dy)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Parameters and constants both enter as leaves.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// `x · wᵀ + b`, with `w` stored `out × in`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(
            xv.cols, wv.cols,
            "linear: input width {} vs weight {}",
            xv.cols, wv.cols
        );
        let mut out = matmul(xv, false, wv, true);
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.len(), out.cols, "linear: bias length");
            for r in 0..out.rows {
                for (o, &bb) in out.row_mut(r).iter_mut().zip(&bv.data) {
                    *o = *o + bb;
                }
            }
        }
        self.push(out, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
        let mut out = av.clone();
        out.add_assign(bv);
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1 × cols` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let xv = self.value(x);
        let rv = self.value(row);
        assert_eq!(rv.len(), xv.cols, "add_row: width mismatch");
        let mut out = xv.clone();
        for r in 0..out.rows {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *o = *o + b;
            }
        }
        self.push(out, Op::AddRow { x, row })
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| gelu_parts(v).0);
        self.push(out, Op::Gelu(x))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        assert_eq!(g.len(), cols, "layer_norm: gamma width");
        assert_eq!(b.len(), cols, "layer_norm: beta width");
        let n = T::c(cols as f64);
        let eps = T::c(LAYER_NORM_EPS);
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out.data[r * cols + c] = h * g[c] + b[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Column-wise normalization with batch statistics (training mode).
    /// `affine` is `(gamma, beta)`; `None` normalizes only.
    pub fn batch_norm(&mut self, x: Var, affine: Option<(Var, Var)>) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        assert!(rows >= 1, "batch_norm: empty batch");
        let n = T::c(rows as f64);
        let eps = T::c(BATCH_NORM_EPS);
        let mut mean = vec![T::zero(); cols];
        let mut var = vec![T::zero(); cols];
        for r in 0..rows {
            for (m, &v) in mean.iter_mut().zip(xv.row(r)) {
                *m = *m + v;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / n);
        for r in 0..rows {
            for c in 0..cols {
                let d = xv.at(r, c) - mean[c];
                var[c] = var[c] + d * d;
            }
        }
        var.iter_mut().for_each(|v| *v = *v / n);
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); rows * cols];
        let mut out = Tensor::zeros(rows, cols);
        let (g, b) = match affine {
            Some((g, b)) => {
                let g = self.value(g).data.clone();
                let b = self.value(b).data.clone();
                assert_eq!(g.len(), cols, "batch_norm: gamma width");
                assert_eq!(b.len(), cols, "batch_norm: beta width");
                (Some(g), Some(b))
            }
            None => (None, None),
        };
        let xv = self.value(x);
        for r in 0..rows {
            for c in 0..cols {
                let h = (xv.at(r, c) - mean[c]) * rstd[c];
                xhat[r * cols + c] = h;
                out.data[r * cols + c] = match (&g, &b) {
                    (Some(g), Some(b)) => h * g[c] + b[c],
                    _ => h,
                };
            }
        }
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma: affine,
                xhat,
                rstd,
                mean,
                var,
            },
        )
    }

    /// Batch mean and biased variance recorded by a `batch_norm` node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[T], &[T])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    /// Multi-head self-attention over independent sequences.
    ///
    /// `qkv` rows hold `[q | k | v]`, each of width `D`. `segment_lens`
    /// partitions the rows into consecutive sequences; attention never
    /// crosses a segment boundary. Output is `rows × D`.
    pub fn attention(&mut self, qkv: Var, heads: usize, segment_lens: &[usize]) -> Var {
        let qv = self.value(qkv);
        let (rows, width) = qv.shape();
        assert_eq!(width % 3, 0, "attention: qkv width must be 3·D");
        let d = width / 3;
        assert!(heads > 0 && d % heads == 0, "attention: D not divisible by heads");
        assert_eq!(
            segment_lens.iter().sum::<usize>(),
            rows,
            "attention: segments must cover all rows"
        );
        let dh = d / heads;
        let scale = T::one() / T::c(dh as f64).sqrt();
        let mut out = Tensor::zeros(rows, d);
        let mut segments = Vec::with_capacity(segment_lens.len());
        let mut probs = Vec::with_capacity(segment_lens.len() * heads);
        let mut start = 0;
        for &len in segment_lens {
            segments.push((start, len));
            for h in 0..heads {
                let qo = h * dh;
                let ko = d + h * dh;
                let vo = 2 * d + h * dh;
                let mut p = vec![T::zero(); len * len];
                for i in 0..len {
                    let qi = &qv.row(start + i)[qo..qo + dh];
                    let mut mx = T::neg_infinity();
                    for j in 0..len {
                        let kj = &qv.row(start + j)[ko..ko + dh];
                        let s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                        p[i * len + j] = s;
                        mx = mx.max(s);
                    }
                    let mut z = T::zero();
                    for j in 0..len {
                        let e = (p[i * len + j] - mx).exp();
                        p[i * len + j] = e;
                        z = z + e;
                    }
                    for j in 0..len {
                        p[i * len + j] = p[i * len + j] / z;
                    }
                    let orow = &mut out.data[(start + i) * d + h * dh..(start + i) * d + (h + 1) * dh];
                    for j in 0..len {
                        let pij = p[i * len + j];
                        let vj = &qv.row(start + j)[vo..vo + dh];
                        for (o, &vv) in orow.iter_mut().zip(vj) {
                            *o = *o + pij * vv;
                        }
                    }
                }
                probs.push(p);
            }
            start += len;
        }
        self.push(
            out,
            Op::Attention {
                qkv,
                heads,
                segments,
                probs,
            },
        )
    }

    /// Row gather; `index` may repeat rows.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Var {
        let xv = self.value(x);
        let cols = xv.cols;
        let mut out = Tensor::zeros(index.len(), cols);
        for (r, &i) in index.iter().enumerate() {
            assert!(i < xv.rows, "gather_rows: index {i} out of {}", xv.rows);
            out.row_mut(r).copy_from_slice(xv.row(i));
        }
        self.push(out, Op::Gather { x, index })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols, cols, "concat_rows: width mismatch");
            data.extend_from_slice(&v.data);
            rows += v.rows;
        }
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn stop_grad(&mut self, x: Var) -> Var {
        let out = self.value(x).clone();
        self.push(out, Op::StopGrad)
    }

    /// Mean cross-entropy of `logits` rows against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, c) = lv.shape();
        if labels.len() != rows {
            return Err(Error::Shape(format!(
                "cross_entropy: {} labels for {rows} rows",
                labels.len()
            )));
        }
        if rows == 0 {
            return Err(Error::Degenerate("cross_entropy: empty batch".into()));
        }
        let mut probs = Tensor::zeros(rows, c);
        let mut total = T::zero();
        for (r, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::InvalidArgument(format!(
                    "label {y} out of range for {c} classes"
                )));
            }
            let row = lv.row(r);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            total = total + (lse - row[y]);
            for (p, &v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let out = Tensor::scalar(total / T::c(rows as f64));
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Mean soft-margin triplet loss `log(1 + exp(‖a−p‖² − ‖a−n‖²))` over
    /// the given row triplets of `x`.
    pub fn soft_margin_triplet(&mut self, x: Var, triplets: Vec<TripletIdx>) -> Result<Var> {
        if triplets.is_empty() {
            return Err(Error::Degenerate("no triplets".into()));
        }
        let xv = self.value(x);
        let mut total = T::zero();
        let mut sig = Vec::with_capacity(triplets.len());
        for t in &triplets {
            let arg = sq_dist(xv.row(t.anchor), xv.row(t.positive)) - sq_dist(xv.row(t.anchor), xv.row(t.negative));
            total = total + softplus(arg);
            sig.push(sigmoid(arg));
        }
        let out = Tensor::scalar(total / T::c(triplets.len() as f64));
        Ok(self.push(
            out,
            Op::SoftMarginTriplet {
                x,
                triplets,
                sigmoid: sig,
            },
        ))
    }

    /// Mean over rows of `−(p·z)/(‖p‖‖z‖)`. Zero-norm rows are rejected.
    pub fn neg_cosine(&mut self, p: Var, z: Var) -> Result<Var> {
        let pv = self.value(p);
        let zv = self.value(z);
        if pv.shape() != zv.shape() {
            return Err(Error::Shape(format!(
                "neg_cosine: {:?} vs {:?}",
                pv.shape(),
                zv.shape()
            )));
        }
        let mut total = T::zero();
        for r in 0..pv.rows {
            let (pr, zr) = (pv.row(r), zv.row(r));
            let np = pr.iter().map(|&v| v * v).sum::<T>().sqrt();
            let nz = zr.iter().map(|&v| v * v).sum::<T>().sqrt();
            if np == T::zero() || nz == T::zero() {
                return Err(Error::Degenerate(format!("zero-norm vector in row {r}")));
            }
            let dot: T = pr.iter().zip(zr).map(|(&a, &b)| a * b).sum();
            total = total - dot / (np * nz);
        }
        let out = Tensor::scalar(total / T::c(pv.rows as f64));
        Ok(self.push(out, Op::NegCosine { p, z }))
    }

    /// `Σ wᵢ·sᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let mut total = T::zero();
        for &(v, w) in terms {
            total = total + w * self.value(v).item();
        }
        self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()))
    }

    /// Reverse sweep from scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward from non-scalar node");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let mut dx = Tensor::zeros(xv.rows, xv.cols);
                gemm(g, false, wv, false, &mut dx, false);
                accumulate(grads, *x, dx);
                let mut dw = Tensor::zeros(wv.rows, wv.cols);
                gemm(g, true, xv, false, &mut dw, false);
                accumulate(grads, *w, dw);
                if let Some(b) = b {
                    accumulate(grads, *b, column_sums(g));
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::AddRow { x, row } => {
                accumulate(grads, *x, g.clone());
                accumulate(grads, *row, column_sums(g));
            }
            Op::Scale(x, s) => {
                let s = *s;
                accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let mut dx = g.clone();
                for (d, &v) in dx.data.iter_mut().zip(&xv.data) {
                    if v <= T::zero() {
                        *d = T::zero();
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let mut dx = g.clone();
                for (d, &v) in dx.data.iter_mut().zip(&xv.data) {
                    *d = *d * gelu_parts(v).1;
                }
                accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (rows, cols) = g.shape();
                let gam = &self.value(*gamma).data;
                let n = T::c(cols as f64);
                let mut dx = Tensor::zeros(rows, cols);
                let mut dg = Tensor::zeros(1, cols);
                let mut db = Tensor::zeros(1, cols);
                for r in 0..rows {
                    let gr = g.row(r);
                    let xh = &xhat[r * cols..(r + 1) * cols];
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for c in 0..cols {
                        let d = gr[c] * gam[c];
                        mean_d = mean_d + d;
                        mean_dx = mean_dx + d * xh[c];
                        dg.data[c] = dg.data[c] + gr[c] * xh[c];
                        db.data[c] = db.data[c] + gr[c];
                    }
                    mean_d = mean_d / n;
                    mean_dx = mean_dx / n;
                    let out = dx.row_mut(r);
                    for c in 0..cols {
                        let d = gr[c] * gam[c];
                        out[c] = rstd[r] * (d - mean_d - xh[c] * mean_dx);
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gamma, dg);
                accumulate(grads, *beta, db);
            }
            Op::BatchNorm {
                x, gamma, xhat, rstd, ..
            } => {
                let (rows, cols) = g.shape();
                let n = T::c(rows as f64);
                let gam: Option<&[T]> = gamma.map(|(gv, _)| self.value(gv).data.as_slice());
                let mut dhat = Tensor::zeros(rows, cols);
                let mut dg = Tensor::zeros(1, cols);
                let mut db = Tensor::zeros(1, cols);
                for r in 0..rows {
                    for c in 0..cols {
                        let gi = g.at(r, c);
                        let xh = xhat[r * cols + c];
                        dhat.data[r * cols + c] = match gam {
                            Some(gm) => gi * gm[c],
                            None => gi,
                        };
                        dg.data[c] = dg.data[c] + gi * xh;
                        db.data[c] = db.data[c] + gi;
                    }
                }
                let mut mean_d = vec![T::zero(); cols];
                let mut mean_dx = vec![T::zero(); cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let d = dhat.data[r * cols + c];
                        mean_d[c] = mean_d[c] + d;
                        mean_dx[c] = mean_dx[c] + d * xhat[r * cols + c];
                    }
                }
                let mut dx = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    for c in 0..cols {
                        let d = dhat.data[r * cols + c];
                        dx.data[r * cols + c] = rstd[c] * (d - mean_d[c] / n - xhat[r * cols + c] * mean_dx[c] / n);
                    }
                }
                accumulate(grads, *x, dx);
                if let Some((gv, bv)) = gamma {
                    accumulate(grads, *gv, dg);
                    accumulate(grads, *bv, db);
                }
            }
            Op::Attention {
                qkv,
                heads,
                segments,
                probs,
            } => {
                let qv = self.value(*qkv);
                let (rows, width) = qv.shape();
                let d = width / 3;
                let heads = *heads;
                let dh = d / heads;
                let scale = T::one() / T::c(dh as f64).sqrt();
                let mut dqkv = Tensor::zeros(rows, width);
                for (s, &(start, len)) in segments.iter().enumerate() {
                    for h in 0..heads {
                        let p = &probs[s * heads + h];
                        let qo = h * dh;
                        let ko = d + h * dh;
                        let vo = 2 * d + h * dh;
                        let mut ds = vec![T::zero(); len];
                        for i in 0..len {
                            let go = &g.row(start + i)[h * dh..(h + 1) * dh];
                            // dP_ij = dO_i · v_j; dV_j += P_ij dO_i
                            let mut dot = T::zero();
                            for j in 0..len {
                                let vj = &qv.row(start + j)[vo..vo + dh];
                                let dp = go.iter().zip(vj).map(|(&a, &b)| a * b).sum::<T>();
                                ds[j] = dp;
                                dot = dot + dp * p[i * len + j];
                                let pij = p[i * len + j];
                                let dvj = &mut dqkv.row_mut(start + j)[vo..vo + dh];
                                for (dv, &gg) in dvj.iter_mut().zip(go) {
                                    *dv = *dv + pij * gg;
                                }
                            }
                            for j in 0..len {
                                ds[j] = p[i * len + j] * (ds[j] - dot) * scale;
                            }
                            for j in 0..len {
                                let dsij = ds[j];
                                if dsij == T::zero() {
                                    continue;
                                }
                                for c in 0..dh {
                                    let kj = qv.at(start + j, ko + c);
                                    let qi = qv.at(start + i, qo + c);
                                    dqkv.data[(start + i) * width + qo + c] =
                                        dqkv.data[(start + i) * width + qo + c] + dsij * kj;
                                    dqkv.data[(start + j) * width + ko + c] =
                                        dqkv.data[(start + j) * width + ko + c] + dsij * qi;
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *qkv, dqkv);
            }
            Op::Gather { x, index } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.rows, xv.cols);
                for (r, &src) in index.iter().enumerate() {
                    for (d, &gg) in dx.row_mut(src).iter_mut().zip(g.row(r)) {
                        *d = *d + gg;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let v = self.value(p);
                    let n = v.len();
                    let part = Tensor::from_vec(v.rows, v.cols, g.data[offset..offset + n].to_vec());
                    offset += n;
                    accumulate(grads, p, part);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let scale = g.item() / T::c(labels.len() as f64);
                let mut dl = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    let row = dl.row_mut(r);
                    row[y] = row[y] - T::one();
                    row.iter_mut().for_each(|v| *v = *v * scale);
                }
                accumulate(grads, *logits, dl);
            }
            Op::SoftMarginTriplet { x, triplets, sigmoid } => {
                let xv = self.value(*x);
                let scale = g.item() / T::c(triplets.len() as f64);
                let two = T::c(2.0);
                let mut dx = Tensor::zeros(xv.rows, xv.cols);
                for (t, &s) in triplets.iter().zip(sigmoid) {
                    let w = s * scale * two;
                    for c in 0..xv.cols {
                        let a = xv.at(t.anchor, c);
                        let pp = xv.at(t.positive, c);
                        let nn = xv.at(t.negative, c);
                        // ∂/∂a: 2(a−p) − 2(a−n) = 2(n−p)
                        dx.data[t.anchor * xv.cols + c] = dx.data[t.anchor * xv.cols + c] + w * (nn - pp);
                        dx.data[t.positive * xv.cols + c] = dx.data[t.positive * xv.cols + c] - w * (a - pp);
                        dx.data[t.negative * xv.cols + c] = dx.data[t.negative * xv.cols + c] + w * (a - nn);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::NegCosine { p, z } => {
                let pv = self.value(*p);
                let zv = self.value(*z);
                let scale = g.item() / T::c(pv.rows as f64);
                let floor = T::c(1e-12);
                let mut dp = Tensor::zeros(pv.rows, pv.cols);
                let mut dz = Tensor::zeros(zv.rows, zv.cols);
                for r in 0..pv.rows {
                    let (pr, zr) = (pv.row(r), zv.row(r));
                    let np = pr.iter().map(|&v| v * v).sum::<T>().sqrt().max(floor);
                    let nz = zr.iter().map(|&v| v * v).sum::<T>().sqrt().max(floor);
                    let cos = pr.iter().zip(zr).map(|(&a, &b)| a * b).sum::<T>() / (np * nz);
                    for c in 0..pv.cols {
                        // d(−cos)/dp = −(z/(‖p‖‖z‖) − cos·p/‖p‖²)
                        dp.data[r * pv.cols + c] = -scale * (zr[c] / (np * nz) - cos * pr[c] / (np * np));
                        dz.data[r * pv.cols + c] = -scale * (pr[c] / (np * nz) - cos * zr[c] / (nz * nz));
                    }
                }
                accumulate(grads, *p, dp);
                accumulate(grads, *z, dz);
            }
            Op::WeightedSum(terms) => {
                let gi = g.item();
                for &(v, w) in terms {
                    accumulate(grads, v, Tensor::scalar(gi * w));
                }
            }
        }
    }
}

fn sq_dist<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

fn column_sums<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(1, g.cols);
    for r in 0..g.rows {
        for (o, &v) in out.data.iter_mut().zip(g.row(r)) {
            *o = *o + v;
        }
    }
    out
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
