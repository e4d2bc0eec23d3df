//! Central finite-difference check of taped gradients.

use rand::seq::index::sample;
use rand::Rng;

use super::{Graph, Var};
use crate::error::{arg_err, Error, Result};
use crate::ndtensor::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    /// `max |g_ad − g_fd| / max(|g_ad|, |g_fd|, 1e−8)` over checked coordinates.
    pub max_rel_err: f64,
    /// `(input index, flat element index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares reverse-mode gradients of the scalar function `f` against central
/// differences `(f(x+eps) − f(x−eps)) / 2eps` at every element of every input.
pub fn gradcheck<T, F>(f: F, inputs: &[Tensor<T>], eps: f64) -> Result<GradcheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |e| (i, e)))
        .collect();
    check_coords(&f, inputs, eps, &coords)
}

/// [`gradcheck`] on at most `max_coords` coordinates drawn uniformly without
/// replacement.
pub fn gradcheck_sampled<T, F, R>(
    f: F,
    inputs: &[Tensor<T>],
    eps: f64,
    max_coords: usize,
    rng: &mut R,
) -> Result<GradcheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let all: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |e| (i, e)))
        .collect();
    let coords: Vec<(usize, usize)> = if all.len() <= max_coords {
        all
    } else {
        let mut picked: Vec<usize> = sample(rng, all.len(), max_coords).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| all[i]).collect()
    };
    check_coords(&f, inputs, eps, &coords)
}

fn evaluate<T, F>(f: &F, inputs: &[Tensor<T>]) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::NotScalar(v.shape().to_vec()));
    }
    v.item()
}

fn check_coords<T, F>(
    f: &F,
    inputs: &[Tensor<T>],
    eps: f64,
    coords: &[(usize, usize)],
) -> Result<GradcheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(arg_err!("gradcheck eps must lie in [1e-7, 1e-4], got {eps}"));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Vec<T>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            grads
                .get(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![T::zero(); t.numel()])
        })
        .collect();

    let mut report = GradcheckReport { max_rel_err: 0.0, worst: (0, 0), checked: 0 };
    let mut work: Vec<Tensor<T>> = inputs.iter().map(Tensor::contiguous).collect();
    for &(i, e) in coords {
        let base = work[i].to_vec();
        let mut probe = |delta: f64| -> Result<f64> {
            let mut vals = base.clone();
            vals[e] = T::lit(base[e].to_f64_lossy() + delta);
            work[i] = Tensor::new(inputs[i].shape(), vals)?;
            Ok(evaluate(f, &work)?.to_f64_lossy())
        };
        let fd = (probe(eps)? - probe(-eps)?) / (2.0 * eps);
        work[i] = inputs[i].contiguous();
        let ad = analytic[i][e].to_f64_lossy();
        let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8);
        if rel > report.max_rel_err || rel.is_nan() {
            report.max_rel_err = if rel.is_nan() { f64::INFINITY } else { rel };
            report.worst = (i, e);
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::<f64>::scalar(3.0);
        let r = gradcheck(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                g.sum(sq)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err <= 1e-9, "{r:?}");
        assert_eq!(r.checked, 1);
    }

    #[test]
    fn eps_outside_range_is_rejected() {
        let x = Tensor::<f64>::scalar(1.0);
        assert!(gradcheck(|g, v| g.sum(v[0]), std::slice::from_ref(&x), 1e-3).is_err());
        assert!(gradcheck(|g, v| g.sum(v[0]), &[x], 1e-9).is_err());
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let x = Tensor::<f64>::ones(&[2]);
        assert!(gradcheck(|_, v| Ok(v[0]), &[x], 1e-5).is_err());
    }

    #[test]
    fn injected_fault_is_caught() {
        let x = Tensor::<f64>::from_f64(&[3], &[0.3, -1.0, 2.0]).unwrap();
        let faulty = |g: &mut Graph<f64>, v: &[Var]| {
            g.inject_fault("silu");
            let y = g.silu(v[0])?;
            g.sum(y)
        };
        let r = gradcheck(faulty, &[x], 1e-5).unwrap();
        assert!(r.max_rel_err > 0.1);
    }
}
