//! Overlap metrics on binary masks.

use crate::error::{shape_err, Result};
use crate::ndtensor::Tensor;
use crate::scalar::Scalar;

/// Prediction threshold on the foreground probability.
pub const THRESHOLD: f64 = 0.5;

fn counts(a: &[bool], b: &[bool]) -> Result<(usize, usize, usize)> {
    if a.len() != b.len() {
        return Err(shape_err!("masks of {} and {} pixels", a.len(), b.len()));
    }
    let inter = a.iter().zip(b).filter(|(&x, &y)| x && y).count();
    let na = a.iter().filter(|&&x| x).count();
    let nb = b.iter().filter(|&&x| x).count();
    Ok((inter, na, nb))
}

/// `2|A∩B|/(|A|+|B|)`, 1 when both are empty.
pub fn dice_score(pred: &[bool], target: &[bool]) -> Result<f64> {
    let (i, a, b) = counts(pred, target)?;
    Ok(if a + b == 0 { 1.0 } else { 2.0 * i as f64 / (a + b) as f64 })
}

/// `|A∩B|/|A∪B|`, 1 when both are empty.
pub fn iou(pred: &[bool], target: &[bool]) -> Result<f64> {
    let (i, a, b) = counts(pred, target)?;
    let union = a + b - i;
    Ok(if union == 0 { 1.0 } else { i as f64 / union as f64 })
}

/// Foreground mask of `H×W×K` logits: softmax probability of class 1 above
/// [`THRESHOLD`].
pub fn predict_mask<T: Scalar>(logits: &Tensor<T>) -> Vec<bool> {
    let k = logits.channels();
    let p = super::loss::softmax_rows(&logits.values(), k);
    p.chunks_exact(k).map(|r| r[1].to_f64_lossy() > THRESHOLD).collect()
}

pub fn to_mask<T: Scalar>(t: &Tensor<T>) -> Vec<bool> {
    t.iter().map(|v| v.to_f64_lossy() > THRESHOLD).collect()
}
