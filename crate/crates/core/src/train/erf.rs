//! Effective receptive field: input-gradient magnitude of one output pixel.

use std::io::Write;
use std::path::Path;

use crate::autodiff::Graph;
use crate::error::{arg_err, Result};
use crate::ndtensor::Tensor;
use crate::scalar::Scalar;
use crate::segmodel::{model_forward, ModelWeights};

/// `|∂(Σ_k logits[i,j,k]) / ∂image|` summed over input channels, scaled to a
/// maximum of 1 (an all-zero map stays zero).
pub fn erf_map<T: Scalar>(w: &ModelWeights<T>, image: &Tensor<T>, probe: (usize, usize)) -> Result<Tensor<T>> {
    let (h, wd) = (w.cfg.input_size[0], w.cfg.input_size[1]);
    if probe.0 >= h || probe.1 >= wd {
        return Err(arg_err!("probe {probe:?} outside {h}×{wd}"));
    }
    let mut g = Graph::frozen(&w.params);
    let x = g.leaf(image.clone());
    let logits = model_forward(&mut g, x, w)?;
    let k = w.cfg.classes;
    let rows = g.reshape(logits, &[h * wd, k])?;
    let pixel = g.gather_rows(rows, &[probe.0 * wd + probe.1])?;
    let s = g.sum(pixel)?;
    let grads = g.backward(s)?;
    let gx = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(image.shape()));
    let c = image.channels();
    let mag: Vec<T> = gx.values().chunks_exact(c).map(|r| r.iter().map(|v| v.abs()).sum()).collect();
    let max = mag.iter().copied().fold(T::zero(), T::max);
    let norm = if max > T::zero() { mag.iter().map(|&v| v / max).collect() } else { mag };
    Tensor::new(&[h, wd], norm)
}

/// Writes a map with values in `[0, 1]` as an 8-bit binary PGM.
pub fn write_pgm<T: Scalar>(map: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let [h, w] = *map.shape() else {
        return Err(arg_err!("PGM needs an H×W map, got {:?}", map.shape()));
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = map
        .iter()
        .map(|v| (v.to_f64_lossy().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}
