//! Probability-space losses. All of them reduce by summing over the class or
//! feature dimension and averaging over rows.

use super::Tensor;
use crate::error::{Error, Result};

/// Floor applied inside every logarithm so a zero probability never yields
/// an infinite loss.
pub const LOG_FLOOR: f64 = 1e-12;

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// `-Σ y log p`, batch-meaned. `y` is treated as a constant.
pub fn cross_entropy(p: &Tensor, y: &Tensor) -> Result<Tensor> {
    check_same("cross_entropy", p, y)?;
    Ok(p.log_floor(LOG_FLOOR).mul(&y.detach())?.batch_mean().neg())
}

/// [`cross_entropy`] against integer class labels.
pub fn cross_entropy_labels(p: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (rows, k) = p.rows_cols();
    if rows != labels.len() {
        return Err(Error::Shape {
            op: "cross_entropy",
            left: p.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let y = Tensor::one_hot(labels, k)?;
    let y = if p.shape().len() == 1 {
        Tensor::new(y.to_vec(), &[k])?
    } else {
        y
    };
    cross_entropy(p, &y)
}

/// Cross-entropy of a predicted distribution against a soft target,
/// `-Σ p_target log p_pred`, batch-meaned. No gradient reaches `p_target`.
pub fn kl_alignment(p_target: &Tensor, p_pred: &Tensor) -> Result<Tensor> {
    check_same("kl_alignment", p_target, p_pred)?;
    cross_entropy(p_pred, p_target)
}

/// Squared L2 difference summed over features, meaned over rows.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same("mse", a, b)?;
    let d = a.sub(b)?;
    Ok(d.mul(&d)?.batch_mean())
}

/// Batch-mean Shannon entropy `-Σ p log p` (a constant; no graph).
pub fn entropy(p: &Tensor) -> f64 {
    let (rows, k) = p.rows_cols();
    let total = p.data().chunks(k).fold(0.0, |acc, row| {
        acc - row.iter().fold(0.0, |s, &v| s + v * v.max(LOG_FLOOR).ln())
    });
    total / rows as f64
}
