//! Softmax, cross entropy and KL divergence kernels.
//!
//! The tape operations in [`crate::autodiff`] call the same kernels, so the
//! free functions here and the differentiable versions agree bit-for-bit.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_FLOOR, 1]` inside every logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// How a per-row loss is reduced over the batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

/// Batch reduction applied to both the cross-entropy and KL terms.
pub const LOSS_REDUCTION: Reduction = Reduction::Mean;

/// Tolerance on `|sum(row) - 1|` for a row to count as a distribution.
const SIMPLEX_TOL: f64 = 1e-6;

pub(crate) fn softmax_rows(x: &[f64], n: usize) -> Result<Vec<f64>> {
    if let Some(v) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("softmax of non-finite logit {v}")));
    }
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut sum = 0.0;
        for &v in row {
            let e = (v - max).exp();
            sum += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= sum);
    }
    Ok(out)
}

/// Returns `(mean cross entropy, softmax probabilities)`.
pub(crate) fn cross_entropy_kernel(
    logits: &[f64],
    labels: &[f64],
    n: usize,
) -> Result<(f64, Vec<f64>)> {
    let probs = softmax_rows(logits, n)?;
    let rows = logits.len() / n;
    let mut total = 0.0;
    for (i, (zr, yr)) in logits
        .chunks_exact(n)
        .zip(labels.chunks_exact(n))
        .enumerate()
    {
        let k = one_hot_index(yr)
            .ok_or_else(|| Error::Validation(format!("label row {i} is not one-hot: {yr:?}")))?;
        let max = zr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + zr.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - zr[k];
    }
    Ok((reduce(total, rows), probs))
}

fn one_hot_index(row: &[f64]) -> Option<usize> {
    let mut hot = None;
    for (j, &v) in row.iter().enumerate() {
        if v == 1.0 {
            if hot.is_some() {
                return None;
            }
            hot = Some(j);
        } else if v != 0.0 {
            return None;
        }
    }
    hot
}

fn check_distribution(row: &[f64], what: &str, index: usize) -> Result<()> {
    if let Some(v) = row.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::Numeric(format!(
            "{what} row {index} has invalid probability {v}"
        )));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Numeric(format!(
            "{what} row {index} sums to {s}, not 1"
        )));
    }
    Ok(())
}

/// Per-row `sum_i t_i ln(t_i / s_i)` with both sides clamped.
pub(crate) fn kl_rows(teacher: &[f64], student: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(teacher.len() / n);
    for (i, (tr, sr)) in teacher
        .chunks_exact(n)
        .zip(student.chunks_exact(n))
        .enumerate()
    {
        check_distribution(tr, "teacher", i)?;
        check_distribution(sr, "student", i)?;
        let kl: f64 = tr
            .iter()
            .zip(sr)
            .map(|(&t, &s)| {
                if t == 0.0 {
                    0.0
                } else {
                    t * (t.max(PROB_FLOOR).ln() - s.max(PROB_FLOOR).ln())
                }
            })
            .sum();
        out.push(kl);
    }
    Ok(out)
}

pub(crate) fn kl_kernel(teacher: &[f64], student: &[f64], n: usize) -> Result<f64> {
    let rows = kl_rows(teacher, student, n)?;
    Ok(reduce(rows.iter().sum(), rows.len()))
}

fn reduce(total: f64, rows: usize) -> f64 {
    match LOSS_REDUCTION {
        Reduction::Mean => total / rows.max(1) as f64,
        Reduction::Sum => total,
    }
}

fn matrix(t: &Tensor) -> Result<(usize, usize)> {
    t.dims2()
}

/// Row-wise, max-stabilized softmax.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (m, n) = matrix(logits)?;
    Tensor::new(vec![m, n], softmax_rows(logits.values(), n)?)
}

/// Mean over rows of `-log p_true`.
pub fn cross_entropy(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let (_, n) = matrix(logits)?;
    if logits.shape() != labels.shape() {
        return Err(Error::Dimension(format!(
            "labels {:?} for logits {:?}",
            labels.shape(),
            logits.shape()
        )));
    }
    let (v, _) = cross_entropy_kernel(logits.values(), labels.values(), n)?;
    Ok(Tensor::scalar(v))
}

/// Per-row cross entropy of `logits` against integer labels.
pub fn cross_entropy_rows(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let (m, n) = matrix(logits)?;
    if labels.len() != m {
        return Err(Error::Dimension(format!(
            "{} labels for {m} rows",
            labels.len()
        )));
    }
    let mut out = Vec::with_capacity(m);
    for (i, &k) in labels.iter().enumerate() {
        if k >= n {
            return Err(Error::Validation(format!("label {k} at row {i} >= {n}")));
        }
        let zr = logits.row(i);
        let max = zr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + zr.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.push(lse - zr[k]);
    }
    Ok(out)
}

/// Row-wise `log softmax`, computed without forming probabilities.
pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    let (m, n) = matrix(logits)?;
    if let Some(v) = logits.values().iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "log softmax of non-finite logit {v}"
        )));
    }
    let mut out = Vec::with_capacity(m * n);
    for row in logits.values().chunks_exact(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    Tensor::new(vec![m, n], out)
}

/// Per-row `KL(softmax(teacher) || softmax(student))` from logits, exact in
/// log space (no clamping).
pub fn kl_divergence_logits_rows(teacher: &Tensor, student: &Tensor) -> Result<Vec<f64>> {
    if teacher.shape() != student.shape() {
        return Err(Error::Dimension(format!(
            "teacher {:?} vs student {:?}",
            teacher.shape(),
            student.shape()
        )));
    }
    let (_, n) = matrix(teacher)?;
    let lt = log_softmax(teacher)?;
    let ls = log_softmax(student)?;
    Ok(lt
        .values()
        .chunks_exact(n)
        .zip(ls.values().chunks_exact(n))
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(&la, &lb)| if la == lb { 0.0 } else { la.exp() * (la - lb) })
                .sum()
        })
        .collect())
}

/// Mean over rows of `KL(teacher || student)` for probability matrices.
pub fn kl_divergence(teacher: &Tensor, student: &Tensor) -> Result<Tensor> {
    let (_, n) = matrix(teacher)?;
    if teacher.shape() != student.shape() {
        return Err(Error::Dimension(format!(
            "teacher {:?} vs student {:?}",
            teacher.shape(),
            student.shape()
        )));
    }
    Ok(Tensor::scalar(kl_kernel(
        teacher.values(),
        student.values(),
        n,
    )?))
}

/// Per-row `KL(teacher || student)`.
pub fn kl_divergence_rows(teacher: &Tensor, student: &Tensor) -> Result<Vec<f64>> {
    let (_, n) = matrix(teacher)?;
    if teacher.shape() != student.shape() {
        return Err(Error::Dimension(format!(
            "teacher {:?} vs student {:?}",
            teacher.shape(),
            student.shape()
        )));
    }
    kl_rows(teacher.values(), student.values(), n)
}
