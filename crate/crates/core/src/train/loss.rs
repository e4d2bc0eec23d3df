//! Soft Dice plus cross-entropy over per-pixel softmax.

use crate::autodiff::{Backward, Graph, Var};
use crate::error::{arg_err, shape_err, Result};
use crate::ndtensor::Tensor;
use crate::scalar::Scalar;

/// Smoothing term of the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;

/// Row-wise softmax of a `P×K` buffer.
pub fn softmax_rows<T: Scalar>(z: &[T], k: usize) -> Vec<T> {
    let mut p = vec![T::zero(); z.len()];
    for (zr, pr) in z.chunks_exact(k).zip(p.chunks_exact_mut(k)) {
        let m = zr.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for (pi, &zi) in pr.iter_mut().zip(zr) {
            *pi = (zi - m).exp();
            s = s + *pi;
        }
        for pi in pr.iter_mut() {
            *pi = *pi / s;
        }
    }
    p
}

fn check_one_hot<T: Scalar>(logits: &[usize], target: &Tensor<T>) -> Result<()> {
    if target.shape() != logits {
        return Err(shape_err!("target {:?} for logits {logits:?}", target.shape()));
    }
    let k = *logits.last().ok_or_else(|| shape_err!("logits need a class axis"))?;
    for row in target.values().chunks_exact(k) {
        let ones = row.iter().filter(|&&v| v == T::one()).count();
        if ones != 1 || row.iter().any(|&v| v != T::zero() && v != T::one()) {
            return Err(arg_err!("target is not one-hot per pixel"));
        }
    }
    Ok(())
}

struct Parts<T> {
    loss: T,
    probs: Vec<T>,
    /// per class: 2Σpt + ε and Σp + Σt + ε
    num: Vec<T>,
    den: Vec<T>,
}

fn evaluate<T: Scalar>(z: &[T], t: &[T], k: usize) -> Parts<T> {
    let p = softmax_rows(z, k);
    let pixels = z.len() / k;
    let eps = T::lit(DICE_SMOOTH);
    let (mut inter, mut sp, mut st) = (vec![T::zero(); k], vec![T::zero(); k], vec![T::zero(); k]);
    let mut ce = T::zero();
    for ((pr, tr), zr) in p.chunks_exact(k).zip(t.chunks_exact(k)).zip(z.chunks_exact(k)) {
        let m = zr.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + zr.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        for c in 0..k {
            inter[c] = inter[c] + pr[c] * tr[c];
            sp[c] = sp[c] + pr[c];
            st[c] = st[c] + tr[c];
            ce = ce + tr[c] * (lse - zr[c]);
        }
    }
    let num: Vec<T> = inter.iter().map(|&i| T::lit(2.0) * i + eps).collect();
    let den: Vec<T> = sp.iter().zip(&st).map(|(&a, &b)| a + b + eps).collect();
    let dice = num.iter().zip(&den).map(|(&n, &d)| n / d).sum::<T>() / T::from_usize_lossy(k);
    let loss = T::one() - dice + ce / T::from_usize_lossy(pixels);
    Parts { loss, probs: p, num, den }
}

/// `1 − mean_k (2Σp·t + ε)/(Σp + Σt + ε) + mean pixelwise cross-entropy`,
/// where `p` is the softmax of `logits` over the trailing class axis.
pub fn dice_ce_value<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    check_one_hot(logits.shape(), target)?;
    let k = logits.channels();
    Ok(evaluate(&logits.values(), &target.values(), k).loss)
}

struct DiceCe<T: Scalar> {
    target: Tensor<T>,
}

impl<T: Scalar> Backward<T> for DiceCe<T> {
    fn name(&self) -> &'static str {
        "dice_ce_loss"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        grad: &Tensor<T>,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let z = inputs[0].values();
        let t = self.target.values();
        let k = inputs[0].channels();
        let parts = evaluate(&z, &t, k);
        let pixels = z.len() / k;
        let up = grad.item()?;
        let kf = T::from_usize_lossy(k);
        let pf = T::from_usize_lossy(pixels);
        let mut gz = vec![T::zero(); z.len()];
        let mut gp = vec![T::zero(); k];
        for ((pr, tr), gr) in parts.probs.chunks_exact(k).zip(t.chunks_exact(k)).zip(gz.chunks_exact_mut(k)) {
            for c in 0..k {
                let (n, d) = (parts.num[c], parts.den[c]);
                gp[c] = -(T::lit(2.0) * tr[c] * d - n) / (d * d * kf);
            }
            let dot = (0..k).map(|c| pr[c] * gp[c]).sum::<T>();
            for c in 0..k {
                gr[c] = up * (pr[c] * (gp[c] - dot) + (pr[c] - tr[c]) / pf);
            }
        }
        Ok(vec![Some(Tensor::new(inputs[0].shape(), gz)?)])
    }
}

/// Taped [`dice_ce_value`]; `target` is one-hot with the same shape as the
/// logits.
pub fn dice_ce_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, target: &Tensor<T>) -> Result<Var> {
    let loss = dice_ce_value(g.value(logits), target)?;
    g.apply(DiceCe { target: target.contiguous() }, &[logits], Tensor::scalar(loss))
}

/// One-hot encoding of a class-index map `H×W` into `H×W×K`.
pub fn one_hot<T: Scalar>(labels: &Tensor<T>, classes: usize) -> Result<Tensor<T>> {
    let mut shape = labels.shape().to_vec();
    shape.push(classes);
    let lv = labels.values();
    let mut out = vec![T::zero(); lv.len() * classes];
    for (i, &l) in lv.iter().enumerate() {
        let c = l.to_f64_lossy();
        if c < 0.0 || c.fract() != 0.0 || c as usize >= classes {
            return Err(arg_err!("label {c} outside 0..{classes}"));
        }
        out[i * classes + c as usize] = T::one();
    }
    Tensor::new(&shape, out)
}
