//! Forward kernels and vector-Jacobian products for every taped operation.

use super::graph::{Node, Op, Var};
use super::{Element, Tensor};
use crate::error::{contract_err, shape_err, Error, Result};

/// Floor applied to the approximating distribution before taking logs in KL.
pub const KL_FLOOR: f64 = 1e-8;
/// Rows with a smaller Euclidean norm are rejected by `l2_normalize`.
pub const NORM_FLOOR: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn matmul_kernel<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// a[m×n] · b[k×n]ᵀ
fn matmul_nt<T: Element>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * k + p] = acc;
        }
    }
    out
}

/// a[m×k]ᵀ · b[m×n]
fn matmul_tn<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn softmax_kernel<T: Element>(x: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for r in 0..inner {
            let at = |i: usize| (o * n + i) * inner + r;
            let mut max = T::neg_infinity();
            for i in 0..n {
                max = max.max(x[at(i)]);
            }
            let mut sum = T::zero();
            for i in 0..n {
                let e = (x[at(i)] - max).exp();
                out[at(i)] = e;
                sum += e;
            }
            for i in 0..n {
                out[at(i)] = out[at(i)] / sum;
            }
        }
    }
    out
}

fn gelu_scalar<T: Element>(x: T) -> T {
    let half = T::lit(0.5);
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Element>(x: T) -> T {
    let half = T::lit(0.5);
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

struct AttnDims {
    groups: usize,
    heads: usize,
    lq: usize,
    lk: usize,
    dk: usize,
}

impl<'g, T: Element> Var<'g, T> {
    fn check_same_graph(&self, other: &Var<'g, T>) -> Result<()> {
        if std::ptr::eq(self.graph(), other.graph()) {
            Ok(())
        } else {
            Err(Error::Contract("operands belong to different graphs".into()))
        }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var<'g, T> {
        self.graph().push(value, op, inputs)
    }

    pub fn matmul(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.check_same_graph(&rhs)?;
        let (a, b) = (self.value(), rhs.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(shape_err!("matmul {:?} x {:?}", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let out = Tensor::new(vec![m, n], matmul_kernel(a.data(), b.data(), m, k, n))?;
        Ok(self.push(out, Op::MatMul(self.id(), rhs.id()), &[self.id(), rhs.id()]))
    }

    pub fn transpose(self) -> Result<Var<'g, T>> {
        let a = self.value();
        if a.rank() != 2 {
            return Err(shape_err!("transpose needs a matrix, got {:?}", a.shape()));
        }
        let (m, n) = (a.shape()[0], a.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a.data()[i * n + j];
            }
        }
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(self.id()), &[self.id()]))
    }

    /// `self · w (+ b)` with `w: [in×out]`, `b: [out]`.
    pub fn linear(self, w: Var<'g, T>, b: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        let y = self.matmul(w)?;
        match b {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }

    fn broadcast_kind(&self, rhs: &Var<'g, T>, what: &str) -> Result<bool> {
        let (a, b) = (self.value(), rhs.value());
        if a.shape() == b.shape() {
            Ok(false)
        } else if a.rank() >= 2 && b.rank() == 1 && b.shape()[0] == a.last_dim() {
            Ok(true)
        } else {
            Err(shape_err!("{what} {:?} with {:?}", a.shape(), b.shape()))
        }
    }

    /// Elementwise sum; `rhs` may also be a vector matching the trailing axis.
    pub fn add(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.check_same_graph(&rhs)?;
        let row = self.broadcast_kind(&rhs, "add")?;
        let (a, b) = (self.value(), rhs.value());
        let d = b.numel();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b.data()[if row { i % d } else { i }])
            .collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        let op = if row {
            Op::AddRow(self.id(), rhs.id())
        } else {
            Op::Add(self.id(), rhs.id())
        };
        Ok(self.push(out, op, &[self.id(), rhs.id()]))
    }

    pub fn sub(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.check_same_graph(&rhs)?;
        let (a, b) = (self.value(), rhs.value());
        if a.shape() != b.shape() {
            return Err(shape_err!("sub {:?} with {:?}", a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Sub(self.id(), rhs.id()), &[self.id(), rhs.id()]))
    }

    /// Elementwise product; `rhs` may also be a vector matching the trailing axis.
    pub fn mul(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.check_same_graph(&rhs)?;
        let row = self.broadcast_kind(&rhs, "mul")?;
        let (a, b) = (self.value(), rhs.value());
        let d = b.numel();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * b.data()[if row { i % d } else { i }])
            .collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        let op = if row {
            Op::MulRow(self.id(), rhs.id())
        } else {
            Op::Mul(self.id(), rhs.id())
        };
        Ok(self.push(out, op, &[self.id(), rhs.id()]))
    }

    pub fn scale(self, c: T) -> Var<'g, T> {
        let a = self.value();
        let data = a.data().iter().map(|&x| x * c).collect();
        let out = Tensor::new(a.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Scale(self.id(), c), &[self.id()])
    }

    /// Multiply by a single-element tensor on the tape.
    pub fn scale_by(self, s: Var<'g, T>) -> Result<Var<'g, T>> {
        self.check_same_graph(&s)?;
        let (a, sv) = (self.value(), s.value());
        if sv.numel() != 1 {
            return Err(shape_err!("scale_by needs a scalar, got {:?}", sv.shape()));
        }
        let c = sv.item();
        let data = a.data().iter().map(|&x| x * c).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.push(out, Op::ScaleBy(self.id(), s.id()), &[self.id(), s.id()]))
    }

    pub fn add_scalar(self, c: T) -> Var<'g, T> {
        let a = self.value();
        let data = a.data().iter().map(|&x| x + c).collect();
        let out = Tensor::new(a.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::AddScalar(self.id()), &[self.id()])
    }

    pub fn exp(self) -> Var<'g, T> {
        let a = self.value();
        let data = a.data().iter().map(|&x| x.exp()).collect();
        let out = Tensor::new(a.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Exp(self.id()), &[self.id()])
    }

    /// Natural log; every input entry must be strictly positive.
    pub fn log(self) -> Result<Var<'g, T>> {
        let a = self.value();
        if let Some(x) = a.data().iter().find(|&&x| !(x > T::zero())) {
            return Err(contract_err!("log of non-positive value {x}"));
        }
        let data = a.data().iter().map(|&x| x.ln()).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Log(self.id()), &[self.id()]))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Result<Var<'g, T>> {
        let a = self.value();
        let data = a.data().iter().map(|&x| gelu_scalar(x)).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Gelu(self.id()), &[self.id()]))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'g, T>> {
        let a = self.value();
        if axis >= a.rank() {
            return Err(shape_err!("softmax axis {axis} for shape {:?}", a.shape()));
        }
        let (outer, n, inner) = axis_split(a.shape(), axis);
        let out = Tensor::new(a.shape().to_vec(), softmax_kernel(a.data(), outer, n, inner))?;
        Ok(self.push(out, Op::Softmax { x: self.id(), axis }, &[self.id()]))
    }

    /// Softmax over the trailing axis.
    pub fn softmax_last(self) -> Result<Var<'g, T>> {
        let rank = self.value().rank();
        if rank == 0 {
            return Err(shape_err!("softmax of a scalar"));
        }
        self.softmax(rank - 1)
    }

    /// Per-row normalization over the trailing axis followed by `gain`/`bias`.
    pub fn layer_norm(self, gain: Var<'g, T>, bias: Var<'g, T>, eps: T) -> Result<Var<'g, T>> {
        self.check_same_graph(&gain)?;
        self.check_same_graph(&bias)?;
        let (x, gv, bv) = (self.value(), gain.value(), bias.value());
        let d = x.last_dim();
        if x.rank() == 0 || d < 2 {
            return Err(shape_err!("layer_norm needs a trailing axis of at least 2, got {:?}", x.shape()));
        }
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(shape_err!(
                "layer_norm gain {:?} / bias {:?} for width {d}",
                gv.shape(),
                bv.shape()
            ));
        }
        let rows = x.rows();
        let n = T::lit(d as f64);
        let mut xhat = vec![T::zero(); x.numel()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.numel()];
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        let op = Op::LayerNorm {
            x: self.id(),
            gain: gain.id(),
            bias: bias.id(),
            xhat,
            inv_std,
        };
        Ok(self.push(out, op, &[self.id(), gain.id(), bias.id()]))
    }

    /// Scale every trailing-axis row to unit Euclidean norm.
    pub fn l2_normalize(self) -> Result<Var<'g, T>> {
        let x = self.value();
        if x.rank() == 0 {
            return Err(shape_err!("l2_normalize of a scalar"));
        }
        let d = x.last_dim();
        let mut norms = Vec::with_capacity(x.rows());
        let mut out = vec![T::zero(); x.numel()];
        for r in 0..x.rows() {
            let row = x.row(r);
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(norm.as_f64() > NORM_FLOOR) {
                return Err(Error::Degenerate(format!(
                    "row {r} has norm {norm}, cannot normalize"
                )));
            }
            for c in 0..d {
                out[r * d + c] = row[c] / norm;
            }
            norms.push(norm);
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(out, Op::L2Normalize { x: self.id(), norms }, &[self.id()]))
    }

    /// Concatenate along the trailing axis; leading extents must agree.
    pub fn concat_cols(parts: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        let first = parts.first().ok_or_else(|| shape_err!("concat of nothing"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let lead = &values[0].shape()[..values[0].rank().saturating_sub(1)];
        for (p, v) in parts.iter().zip(&values) {
            first.check_same_graph(p)?;
            if v.rank() == 0 || &v.shape()[..v.rank() - 1] != lead {
                return Err(shape_err!("concat leading shapes differ: {:?}", v.shape()));
            }
        }
        let rows = values[0].rows();
        let total: usize = values.iter().map(|v| v.last_dim()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                out.extend_from_slice(v.row(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let ids: Vec<usize> = parts.iter().map(|p| p.id()).collect();
        Ok(first.push(Tensor::new(shape, out)?, Op::ConcatCols(ids.clone()), &ids))
    }

    /// Stack matrices along the leading axis.
    pub fn concat_rows(parts: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        let first = parts.first().ok_or_else(|| shape_err!("concat of nothing"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let d = values[0].last_dim();
        let mut out = Vec::new();
        let mut rows = 0;
        for (p, v) in parts.iter().zip(&values) {
            first.check_same_graph(p)?;
            if v.rank() != 2 || v.shape()[1] != d {
                return Err(shape_err!("concat_rows needs [*, {d}] matrices, got {:?}", v.shape()));
            }
            rows += v.shape()[0];
            out.extend_from_slice(v.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id()).collect();
        Ok(first.push(Tensor::new(vec![rows, d], out)?, Op::ConcatRows(ids.clone()), &ids))
    }

    /// Row gather (embedding lookup); repeated indices accumulate on backward.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        let out = x.select_rows(idx)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                x: self.id(),
                idx: idx.to_vec(),
            },
            &[self.id()],
        ))
    }

    pub fn sum(self) -> Result<Var<'g, T>> {
        let x = self.value();
        let s = x.data().iter().copied().sum::<T>();
        Ok(self.push(Tensor::scalar(s), Op::Sum(self.id()), &[self.id()]))
    }

    pub fn mean(self) -> Result<Var<'g, T>> {
        let x = self.value();
        let s = x.data().iter().copied().sum::<T>() / T::lit(x.numel() as f64);
        Ok(self.push(Tensor::scalar(s), Op::Mean(self.id()), &[self.id()]))
    }

    /// Batch mean of `-log softmax(logits)[target]`.
    pub fn cross_entropy(self, targets: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        if x.rank() != 2 || x.shape()[0] != targets.len() {
            return Err(shape_err!(
                "cross_entropy logits {:?} with {} targets",
                x.shape(),
                targets.len()
            ));
        }
        let (b, n) = (x.shape()[0], x.shape()[1]);
        if let Some(&t) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Index(format!("target {t} out of range for {n} classes")));
        }
        let mut probs = vec![T::zero(); b * n];
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = x.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            for c in 0..n {
                probs[r * n + c] = (row[c] - lse).exp();
            }
            total += lse - row[t];
        }
        let loss = total / T::lit(b as f64);
        let op = Op::CrossEntropy {
            logits: self.id(),
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[self.id()]))
    }

    /// Batch mean of `Σ p log(p / q)` over probability rows.
    ///
    /// Entries with `p = 0` contribute nothing; both arguments of the log are
    /// floored at [`KL_FLOOR`], so `kl(p, p)` is exactly zero.
    pub fn kl_divergence(p_target: Var<'g, T>, p_approx: Var<'g, T>) -> Result<Var<'g, T>> {
        p_target.check_same_graph(&p_approx)?;
        let (p, q) = (p_target.value(), p_approx.value());
        if p.rank() != 2 || p.shape() != q.shape() {
            return Err(shape_err!("kl_divergence {:?} vs {:?}", p.shape(), q.shape()));
        }
        check_probability_rows(&p, "target")?;
        check_probability_rows(&q, "approximation")?;
        let floor = T::lit(KL_FLOOR);
        let b = p.shape()[0];
        let mut total = T::zero();
        for (&pt, &qt) in p.data().iter().zip(q.data()) {
            if pt > T::zero() {
                total += pt * (pt.max(floor).ln() - qt.max(floor).ln());
            }
        }
        let value = total / T::lit(b as f64);
        let op = Op::KlDiv {
            p: p_target.id(),
            q: p_approx.id(),
        };
        Ok(p_target.push(Tensor::scalar(value), op, &[p_target.id(), p_approx.id()]))
    }

    /// Per-head scaled dot-product attention weights.
    ///
    /// `self` holds queries `[groups·Lq × D]`, `keys` holds `[groups·Lk × D]`
    /// with `D = heads·dk`. Each group attends only within itself. The result
    /// has shape `[groups, heads, Lq, Lk]` and sums to one along the last axis.
    pub fn attention_scores(self, keys: Var<'g, T>, heads: usize, groups: usize) -> Result<Var<'g, T>> {
        self.check_same_graph(&keys)?;
        let (q, k) = (self.value(), keys.value());
        if q.rank() != 2 || k.rank() != 2 || q.shape()[1] != k.shape()[1] {
            return Err(shape_err!("attention q {:?} vs k {:?}", q.shape(), k.shape()));
        }
        let dims = attn_dims(q.shape()[0], k.shape()[0], q.shape()[1], heads, groups)?;
        let AttnDims { groups, heads, lq, lk, dk } = dims;
        let width = heads * dk;
        let scale = T::one() / T::lit(dk as f64).sqrt();
        let mut logits = vec![T::zero(); groups * heads * lq * lk];
        for g in 0..groups {
            for h in 0..heads {
                for i in 0..lq {
                    let qrow = &q.data()[(g * lq + i) * width + h * dk..][..dk];
                    for j in 0..lk {
                        let krow = &k.data()[(g * lk + j) * width + h * dk..][..dk];
                        let mut acc = T::zero();
                        for (&a, &b) in qrow.iter().zip(krow) {
                            acc += a * b;
                        }
                        logits[((g * heads + h) * lq + i) * lk + j] = acc * scale;
                    }
                }
            }
        }
        let probs = softmax_kernel(&logits, groups * heads * lq, lk, 1);
        let out = Tensor::new(vec![groups, heads, lq, lk], probs)?;
        let op = Op::AttnScores {
            q: self.id(),
            k: keys.id(),
            heads,
            groups,
        };
        Ok(self.push(out, op, &[self.id(), keys.id()]))
    }

    /// Head-wise weighted sum of values, heads concatenated: `[groups·Lq × Dv]`.
    pub fn attention_mix(self, values: Var<'g, T>) -> Result<Var<'g, T>> {
        self.check_same_graph(&values)?;
        let (p, v) = (self.value(), values.value());
        if p.rank() != 4 || v.rank() != 2 {
            return Err(shape_err!("attention_mix p {:?} v {:?}", p.shape(), v.shape()));
        }
        let (groups, heads, lq, lk) = (p.shape()[0], p.shape()[1], p.shape()[2], p.shape()[3]);
        let width = v.shape()[1];
        if v.shape()[0] != groups * lk || width % heads != 0 {
            return Err(shape_err!("attention_mix p {:?} v {:?}", p.shape(), v.shape()));
        }
        let dv = width / heads;
        let mut out = vec![T::zero(); groups * lq * width];
        for g in 0..groups {
            for h in 0..heads {
                for i in 0..lq {
                    let orow = &mut out[(g * lq + i) * width + h * dv..][..dv];
                    for j in 0..lk {
                        let w = p.data()[((g * heads + h) * lq + i) * lk + j];
                        let vrow = &v.data()[(g * lk + j) * width + h * dv..][..dv];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += w * x;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![groups * lq, width], out)?;
        Ok(self.push(out, Op::AttnMix { p: self.id(), v: values.id() }, &[self.id(), values.id()]))
    }

    /// Average attention weights over heads: `[groups·Lq × Lk]`.
    pub fn head_mean(self) -> Result<Var<'g, T>> {
        let p = self.value();
        if p.rank() != 4 {
            return Err(shape_err!("head_mean needs [G, h, Lq, Lk], got {:?}", p.shape()));
        }
        let (groups, heads, lq, lk) = (p.shape()[0], p.shape()[1], p.shape()[2], p.shape()[3]);
        let inv = T::one() / T::lit(heads as f64);
        let mut out = vec![T::zero(); groups * lq * lk];
        for g in 0..groups {
            for h in 0..heads {
                for i in 0..lq {
                    for j in 0..lk {
                        out[(g * lq + i) * lk + j] += p.data()[((g * heads + h) * lq + i) * lk + j];
                    }
                }
            }
        }
        for o in &mut out {
            *o *= inv;
        }
        let out = Tensor::new(vec![groups * lq, lk], out)?;
        Ok(self.push(out, Op::HeadMean(self.id()), &[self.id()]))
    }
}

fn attn_dims(q_rows: usize, k_rows: usize, width: usize, heads: usize, groups: usize) -> Result<AttnDims> {
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(shape_err!("{heads} heads do not divide width {width}"));
    }
    if groups == 0 || !q_rows.is_multiple_of(groups) || !k_rows.is_multiple_of(groups) {
        return Err(shape_err!(
            "{groups} groups do not divide {q_rows} query rows / {k_rows} key rows"
        ));
    }
    Ok(AttnDims {
        groups,
        heads,
        lq: q_rows / groups,
        lk: k_rows / groups,
        dk: width / heads,
    })
}

pub(crate) fn check_probability_rows<T: Element>(p: &Tensor<T>, what: &str) -> Result<()> {
    for r in 0..p.rows() {
        let row = p.row(r);
        if row.iter().any(|&x| x < T::zero() || !x.is_finite()) {
            return Err(contract_err!("{what} row {r} has a negative or non-finite entry"));
        }
        let s: f64 = row.iter().map(|x| x.as_f64()).sum();
        if (s - 1.0).abs() > 1e-5 {
            return Err(contract_err!("{what} row {r} sums to {s}, not 1"));
        }
    }
    Ok(())
}

/// Gradient contributions of node `id` to its inputs.
pub(crate) fn vjp<T: Element>(nodes: &[Node<T>], id: usize, grad: &[T]) -> Vec<(usize, Vec<T>)> {
    let node = &nodes[id];
    let val = |i: usize| &*nodes[i].value;
    match &node.op {
        Op::Leaf | Op::Constant => Vec::new(),
        &Op::MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            vec![
                (a, matmul_nt(grad, bv.data(), m, n, k)),
                (b, matmul_tn(av.data(), grad, m, k, n)),
            ]
        }
        &Op::Transpose(a) => {
            let av = val(a);
            let (m, n) = (av.shape()[0], av.shape()[1]);
            let mut out = vec![T::zero(); m * n];
            for i in 0..m {
                for j in 0..n {
                    out[i * n + j] = grad[j * m + i];
                }
            }
            vec![(a, out)]
        }
        &Op::Add(a, b) => vec![(a, grad.to_vec()), (b, grad.to_vec())],
        &Op::AddRow(a, b) => {
            let d = val(b).numel();
            let mut gb = vec![T::zero(); d];
            for (i, &g) in grad.iter().enumerate() {
                gb[i % d] += g;
            }
            vec![(a, grad.to_vec()), (b, gb)]
        }
        &Op::Sub(a, b) => vec![(a, grad.to_vec()), (b, grad.iter().map(|&g| -g).collect())],
        &Op::Mul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let ga = grad.iter().zip(bv.data()).map(|(&g, &y)| g * y).collect();
            let gb = grad.iter().zip(av.data()).map(|(&g, &x)| g * x).collect();
            vec![(a, ga), (b, gb)]
        }
        &Op::MulRow(a, b) => {
            let (av, bv) = (val(a), val(b));
            let d = bv.numel();
            let mut ga = vec![T::zero(); grad.len()];
            let mut gb = vec![T::zero(); d];
            for (i, &g) in grad.iter().enumerate() {
                ga[i] = g * bv.data()[i % d];
                gb[i % d] += g * av.data()[i];
            }
            vec![(a, ga), (b, gb)]
        }
        &Op::Scale(a, c) => vec![(a, grad.iter().map(|&g| g * c).collect())],
        &Op::ScaleBy(a, s) => {
            let (av, c) = (val(a), val(s).item());
            let ga = grad.iter().map(|&g| g * c).collect();
            let gs = grad.iter().zip(av.data()).map(|(&g, &x)| g * x).sum::<T>();
            vec![(a, ga), (s, vec![gs])]
        }
        &Op::AddScalar(a) => vec![(a, grad.to_vec())],
        &Op::Exp(a) => {
            let y = node.value.data();
            vec![(a, grad.iter().zip(y).map(|(&g, &e)| g * e).collect())]
        }
        &Op::Log(a) => {
            let x = val(a).data();
            vec![(a, grad.iter().zip(x).map(|(&g, &v)| g / v).collect())]
        }
        &Op::Gelu(a) => {
            let x = val(a).data();
            vec![(a, grad.iter().zip(x).map(|(&g, &v)| g * gelu_grad(v)).collect())]
        }
        &Op::Softmax { x, axis } => {
            let y = &node.value;
            let (outer, n, inner) = axis_split(y.shape(), axis);
            let yd = y.data();
            let mut gx = vec![T::zero(); yd.len()];
            for o in 0..outer {
                for r in 0..inner {
                    let at = |i: usize| (o * n + i) * inner + r;
                    let dot = (0..n).map(|i| grad[at(i)] * yd[at(i)]).sum::<T>();
                    for i in 0..n {
                        gx[at(i)] = yd[at(i)] * (grad[at(i)] - dot);
                    }
                }
            }
            vec![(x, gx)]
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let gv = val(*gain).data();
            let d = gv.len();
            let n = T::lit(d as f64);
            let mut gx = vec![T::zero(); grad.len()];
            let mut gg = vec![T::zero(); d];
            let mut gb = vec![T::zero(); d];
            for (r, &is) in inv_std.iter().enumerate() {
                let off = r * d;
                let mut sum_dh = T::zero();
                let mut sum_dh_h = T::zero();
                for c in 0..d {
                    let g = grad[off + c];
                    let h = xhat[off + c];
                    gg[c] += g * h;
                    gb[c] += g;
                    let dh = g * gv[c];
                    sum_dh += dh;
                    sum_dh_h += dh * h;
                }
                for c in 0..d {
                    let dh = grad[off + c] * gv[c];
                    gx[off + c] = is / n * (n * dh - sum_dh - xhat[off + c] * sum_dh_h);
                }
            }
            vec![(*x, gx), (*gain, gg), (*bias, gb)]
        }
        Op::L2Normalize { x, norms } => {
            let y = node.value.data();
            let d = node.value.last_dim();
            let mut gx = vec![T::zero(); y.len()];
            for (r, &norm) in norms.iter().enumerate() {
                let off = r * d;
                let dot = (0..d).map(|c| y[off + c] * grad[off + c]).sum::<T>();
                for c in 0..d {
                    gx[off + c] = (grad[off + c] - y[off + c] * dot) / norm;
                }
            }
            vec![(*x, gx)]
        }
        Op::ConcatCols(ids) => {
            let rows = node.value.rows();
            let total = node.value.last_dim();
            let mut out = Vec::with_capacity(ids.len());
            let mut start = 0;
            for &i in ids {
                let w = val(i).last_dim();
                let mut gi = Vec::with_capacity(rows * w);
                for r in 0..rows {
                    gi.extend_from_slice(&grad[r * total + start..r * total + start + w]);
                }
                start += w;
                out.push((i, gi));
            }
            out
        }
        Op::ConcatRows(ids) => {
            let mut start = 0;
            ids.iter()
                .map(|&i| {
                    let len = val(i).numel();
                    let gi = grad[start..start + len].to_vec();
                    start += len;
                    (i, gi)
                })
                .collect()
        }
        Op::GatherRows { x, idx } => {
            let xv = val(*x);
            let d = xv.last_dim();
            let mut gx = vec![T::zero(); xv.numel()];
            for (r, &src) in idx.iter().enumerate() {
                for c in 0..d {
                    gx[src * d + c] += grad[r * d + c];
                }
            }
            vec![(*x, gx)]
        }
        &Op::Sum(a) => vec![(a, vec![grad[0]; val(a).numel()])],
        &Op::Mean(a) => {
            let n = val(a).numel();
            vec![(a, vec![grad[0] / T::lit(n as f64); n])]
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let n = val(*logits).last_dim();
            let scale = grad[0] / T::lit(targets.len() as f64);
            let mut gx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
            for (r, &t) in targets.iter().enumerate() {
                gx[r * n + t] -= scale;
            }
            vec![(*logits, gx)]
        }
        &Op::KlDiv { p, q } => {
            let (pv, qv) = (val(p), val(q));
            let floor = T::lit(KL_FLOOR);
            let scale = grad[0] / T::lit(pv.shape()[0] as f64);
            let mut gp = vec![T::zero(); pv.numel()];
            let mut gq = vec![T::zero(); pv.numel()];
            for (i, (&pt, &qt)) in pv.data().iter().zip(qv.data()).enumerate() {
                if pt > T::zero() {
                    let log_ratio = pt.max(floor).ln() - qt.max(floor).ln();
                    gp[i] = scale * if pt >= floor { log_ratio + T::one() } else { log_ratio };
                    if qt >= floor {
                        gq[i] = -scale * pt / qt;
                    }
                }
            }
            vec![(p, gp), (q, gq)]
        }
        &Op::AttnScores { q, k, heads, groups } => {
            let (qv, kv) = (val(q), val(k));
            let dims = attn_dims(qv.shape()[0], kv.shape()[0], qv.shape()[1], heads, groups)
                .expect("validated on forward");
            let AttnDims { groups, heads, lq, lk, dk } = dims;
            let width = heads * dk;
            let scale = T::one() / T::lit(dk as f64).sqrt();
            let pd = node.value.data();
            let mut gq = vec![T::zero(); qv.numel()];
            let mut gk = vec![T::zero(); kv.numel()];
            for g in 0..groups {
                for h in 0..heads {
                    for i in 0..lq {
                        let base = ((g * heads + h) * lq + i) * lk;
                        let dot = (0..lk).map(|j| grad[base + j] * pd[base + j]).sum::<T>();
                        let qoff = (g * lq + i) * width + h * dk;
                        for j in 0..lk {
                            let ds = pd[base + j] * (grad[base + j] - dot) * scale;
                            let koff = (g * lk + j) * width + h * dk;
                            for c in 0..dk {
                                gq[qoff + c] += ds * kv.data()[koff + c];
                                gk[koff + c] += ds * qv.data()[qoff + c];
                            }
                        }
                    }
                }
            }
            vec![(q, gq), (k, gk)]
        }
        &Op::AttnMix { p, v } => {
            let (pv, vv) = (val(p), val(v));
            let (groups, heads, lq, lk) = (pv.shape()[0], pv.shape()[1], pv.shape()[2], pv.shape()[3]);
            let width = vv.shape()[1];
            let dv = width / heads;
            let mut gp = vec![T::zero(); pv.numel()];
            let mut gv = vec![T::zero(); vv.numel()];
            for g in 0..groups {
                for h in 0..heads {
                    for i in 0..lq {
                        let goff = (g * lq + i) * width + h * dv;
                        for j in 0..lk {
                            let pi = ((g * heads + h) * lq + i) * lk + j;
                            let voff = (g * lk + j) * width + h * dv;
                            let w = pv.data()[pi];
                            let mut acc = T::zero();
                            for c in 0..dv {
                                acc += grad[goff + c] * vv.data()[voff + c];
                                gv[voff + c] += w * grad[goff + c];
                            }
                            gp[pi] = acc;
                        }
                    }
                }
            }
            vec![(p, gp), (v, gv)]
        }
        &Op::HeadMean(p) => {
            let pv = val(p);
            let (groups, heads, lq, lk) = (pv.shape()[0], pv.shape()[1], pv.shape()[2], pv.shape()[3]);
            let inv = T::one() / T::lit(heads as f64);
            let mut gp = vec![T::zero(); pv.numel()];
            for g in 0..groups {
                for h in 0..heads {
                    for i in 0..lq {
                        for j in 0..lk {
                            gp[((g * heads + h) * lq + i) * lk + j] = grad[(g * lq + i) * lk + j] * inv;
                        }
                    }
                }
            }
            vec![(p, gp)]
        }
    }
}
