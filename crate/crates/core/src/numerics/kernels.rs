//! Pure forward kernels. The tape in `tape.rs` reuses these and adds the
//! matching vector-Jacobian products.

use std::cmp::Ordering;

use crate::error::{Error, Result};

use super::{Real, Tensor};

/// Epsilon inside the RMS normalisation square root.
pub const RMS_EPS: f64 = 1e-5;

fn dims2<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::dim(op, format!("expected a 2-D tensor, got shape {s:?}"))),
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = dims2("matmul", a)?;
    let (k2, n) = dims2("matmul", b)?;
    if k != k2 {
        return Err(Error::dim(
            "matmul",
            format!("inner dimensions differ: {m}x{k} · {k2}x{n}"),
        ));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = dims2("matmul_nt", a)?;
    let (n, k2) = dims2("matmul_nt", b)?;
    if k != k2 {
        return Err(Error::dim(
            "matmul_nt",
            format!("inner dimensions differ: {m}x{k} · ({n}x{k2})ᵀ"),
        ));
    }
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            let brow = b.row(j);
            out.push(arow.iter().zip(brow).map(|(&x, &y)| x * y).sum());
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = dims2("matmul_tn", a)?;
    let (k2, n) = dims2("matmul_tn", b)?;
    if k != k2 {
        return Err(Error::dim(
            "matmul_tn",
            format!("inner dimensions differ: ({k}x{m})ᵀ · {k2}x{n}"),
        ));
    }
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let arow = a.row(p);
        let brow = b.row(p);
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::dim(
            op,
            format!("shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
        ))
    }
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn scale<T: Real>(a: &Tensor<T>, factor: T) -> Tensor<T> {
    a.map(|v| v * factor)
}

pub(crate) fn softmax_slice<T: Real>(x: &[T], out: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Softmax along `axis`, computed with max subtraction.
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::dim(
            "softmax",
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    let mut lane = vec![T::zero(); n];
    let mut res = vec![T::zero(); n];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            for (j, l) in lane.iter_mut().enumerate() {
                *l = src[base + j * inner];
            }
            softmax_slice(&lane, &mut res);
            for (j, &r) in res.iter().enumerate() {
                out[base + j * inner] = r;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Per-row negative log-likelihood `−log softmax(logits_t)[target_t]`.
pub fn cross_entropy_nll<T: Real>(logits: &Tensor<T>, targets: &[u32]) -> Result<Vec<T>> {
    let (rows, vocab) = dims2("cross_entropy_nll", logits)?;
    if rows != targets.len() {
        return Err(Error::dim(
            "cross_entropy_nll",
            format!("{rows} rows of logits but {} targets", targets.len()),
        ));
    }
    targets
        .iter()
        .enumerate()
        .map(|(t, &target)| {
            let target = target as usize;
            if target >= vocab {
                return Err(Error::Index(format!(
                    "target {target} out of range for vocabulary of {vocab}"
                )));
            }
            Ok(row_nll(logits.row(t), target))
        })
        .collect()
}

pub(crate) fn row_nll<T: Real>(row: &[T], target: usize) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + total.ln() - row[target]
}

/// RMS normalisation of every row with a learned per-column gain.
/// Returns the output and the per-row reciprocal RMS.
pub fn rms_norm<T: Real>(x: &Tensor<T>, gain: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
    let d = x.cols();
    if gain.len() != d {
        return Err(Error::dim(
            "rms_norm",
            format!("gain has {} values for rows of width {d}", gain.len()),
        ));
    }
    let eps = T::lit(RMS_EPS);
    let dn = T::lit(d as f64);
    let mut out = Vec::with_capacity(x.len());
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let ms = row.iter().map(|&v| v * v).sum::<T>() / dn;
        let s = T::one() / (ms + eps).sqrt();
        inv.push(s);
        out.extend(row.iter().zip(gain.data()).map(|(&v, &g)| v * s * g));
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, inv))
}

/// Row lookup into `table[V×d]`.
pub fn embedding<T: Real>(table: &Tensor<T>, ids: &[u32]) -> Result<Tensor<T>> {
    let (vocab, d) = dims2("embedding", table)?;
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        let id = id as usize;
        if id >= vocab {
            return Err(Error::Index(format!(
                "token id {id} out of range for vocabulary of {vocab}"
            )));
        }
        out.extend_from_slice(table.row(id));
    }
    Tensor::new(vec![ids.len(), d], out)
}

#[inline]
pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub fn silu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * sigmoid(v))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

#[inline]
pub(crate) fn gelu_scalar<T: Real>(v: T) -> T {
    let c = T::lit(GELU_C);
    let u = c * (v + T::lit(0.044715) * v * v * v);
    T::lit(0.5) * v * (T::one() + u.tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Real>(v: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(0.044715);
    let u = c * (v + a * v * v * v);
    let th = u.tanh();
    let du = c * (T::one() + T::lit(3.0) * a * v * v);
    T::lit(0.5) * (T::one() + th) + T::lit(0.5) * v * (T::one() - th * th) * du
}

/// Indices of the `k` largest values, best first. Ties go to the lower index.
pub fn top_k_indices<T: PartialOrd + Copy>(values: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    // stable sort keeps equal values in index order
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(Ordering::Equal)
    });
    idx.truncate(k.min(values.len()));
    idx
}

/// Index of the first maximum.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
