//! Eager numeric kernels shared by the autodiff tape and the reference paths.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_matrix(op: &'static str, t: &Tensor) -> Result<()> {
    if t.ndim() != 2 {
        return Err(Error::dim(op, t.shape(), &[]));
    }
    Ok(())
}

/// `c = a · b` for `a: m×k`, `b: k×n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_matrix("matmul", a)?;
    check_matrix("matmul", b)?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for t in 0..k {
            let av = ad[r * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[t * n..(t + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Row-wise softmax over scores that may contain `-inf`.
///
/// Entries equal to `-inf` receive exactly zero weight. A row whose entries
/// are all `-inf` produces an all-zero row.
pub fn masked_row_softmax(scores: &Tensor) -> Result<Tensor> {
    check_matrix("masked_row_softmax", scores)?;
    if let Some(pos) = scores.data().iter().position(|v| v.is_nan()) {
        return Err(Error::Numeric(format!("NaN score at flat index {pos}")));
    }
    let (m, n) = (scores.shape()[0], scores.shape()[1]);
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let row = &scores.data()[r * n..(r + 1) * n];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        if max == f64::INFINITY {
            return Err(Error::Numeric(format!("+inf score in row {r}")));
        }
        let orow = &mut out[r * n..(r + 1) * n];
        let mut sum = 0.0;
        for (o, &s) in orow.iter_mut().zip(row) {
            // exp(-inf) is exactly 0
            *o = (s - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy_loss(logits: &Tensor, label: usize) -> Result<f64> {
    let k = logits.len();
    if label >= k {
        return Err(Error::Index {
            what: "class label",
            index: label,
            len: k,
        });
    }
    if !logits.all_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let z = logits.data();
    let top = argmax(z);
    let max = z[top];
    // ln_1p keeps precision when one logit dominates
    let rest: f64 = z
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != top)
        .map(|(_, &v)| (v - max).exp())
        .sum();
    Ok((max - z[label]) + rest.ln_1p())
}

/// Softmax probabilities of a logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest logit; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
