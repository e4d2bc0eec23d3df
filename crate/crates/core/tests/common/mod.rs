//! Oracles shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use logvm_core::autodiff::{Graph, ParamSet};
use logvm_core::blocks::{block_apply, BlockConfig, BlockWeights, Variant};
use logvm_core::extract::{self, ConcatStrategy, ScanDirection, DWC_KERNEL};
use logvm_core::ndtensor::kernels::{grouped_conv, silu};
use logvm_core::ndtensor::Tensor;
use logvm_core::{rng, TensorF64};
use rand::Rng;

pub fn random(shape: &[usize], r: &mut impl Rng) -> TensorF64 {
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

fn unravel(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for a in (0..shape.len()).rev() {
        idx[a] = flat % shape[a];
        flat /= shape[a];
    }
    idx
}

/// Random LTX instance of the given spatial rank: every unfolded channel block
/// must equal the squeezed grid at the window neighbour, or zero past the border.
pub fn ltx_locality(seed: u64, rank: usize) -> Result<(), String> {
    let mut r = rng::stream(seed, "ltx-locality");
    let max = if rank == 2 { 8 } else { 4 };
    let spatial: Vec<usize> = (0..rank).map(|_| r.random_range(1..=max)).collect();
    let squeeze = [1, 2, 4][r.random_range(0..3)];
    let channels = squeeze * r.random_range(1..=3);
    let window = [1, 3, 5][r.random_range(0..if rank == 2 { 3 } else { 2 })];
    let mut xshape = spatial.clone();
    xshape.push(channels);
    let x = random(&xshape, &mut r);
    let mut kshape = vec![DWC_KERNEL; rank];
    kshape.extend([squeeze, channels / squeeze]);
    let k = random(&kshape, &mut r);

    let mut g = Graph::<f64>::new();
    let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
    let seq = extract::ltx(&mut g, xv, kv, window, squeeze).map_err(|e| e.to_string())?;
    let tokens = g.value(seq.tokens).clone();

    let one = vec![1; rank];
    let squeezed = silu(&grouped_conv(&x, &k, &one, &one, &vec![1; rank]).map_err(|e| e.to_string())?);
    let cs = channels / squeeze;
    let l: usize = spatial.iter().product();
    let taps = window.pow(rank as u32);
    let want_shape = [l, taps * cs];
    if tokens.shape() != want_shape {
        return Err(format!("token shape {:?}, expected {want_shape:?}", tokens.shape()));
    }
    let half = (window / 2) as isize;
    for p in 0..l {
        let pos = unravel(p, &spatial);
        for o in 0..taps {
            let off = unravel(o, &vec![window; rank]);
            let nb: Vec<isize> = pos.iter().zip(&off).map(|(&a, &b)| a as isize + b as isize - half).collect();
            let inside = nb.iter().zip(&spatial).all(|(&v, &s)| v >= 0 && v < s as isize);
            for c in 0..cs {
                let want = if inside {
                    let mut idx: Vec<usize> = nb.iter().map(|&v| v as usize).collect();
                    idx.push(c);
                    squeezed.at(&idx)
                } else {
                    0.0
                };
                let got = tokens.at(&[p, o * cs + c]);
                if got.to_bits() != want.to_bits() {
                    return Err(format!("grid {spatial:?} R={window} S={squeeze}: token {p} offset {o} ch {c}: {got} != {want}"));
                }
            }
        }
    }
    Ok(())
}

/// Perturbing one channel of the extractor input changes exactly the
/// pre-projection token that owns it.
pub fn gtx_independence(seed: u64) -> Result<(), String> {
    let mut r = rng::stream(seed, "gtx-independence");
    let stride = r.random_range(1..=2);
    let spatial = [stride * r.random_range(1..=4), stride * r.random_range(1..=4)];
    let gamma = r.random_range(1..=3);
    let channels = gamma * r.random_range(1..=5);
    let x = random(&[spatial[0], spatial[1], channels], &mut r);
    let k = random(&[DWC_KERNEL, DWC_KERNEL, channels], &mut r);
    let c = r.random_range(0..channels);
    let bump = x.zip_map(&Tensor::from_fn(x.shape(), |i| if i[2] == c { 0.25 } else { 0.0 }), |a, b| a + b).unwrap();

    let grouped = |input: &TensorF64| {
        let mut g = Graph::<f64>::new();
        let (xv, kv) = (g.constant(input.clone()), g.constant(k.clone()));
        let y = extract::gtx_grouped(&mut g, xv, kv, &[stride, stride], gamma).map_err(|e| e.to_string())?;
        Ok::<_, String>(g.value(y).clone())
    };
    let (y0, y1) = (grouped(&x)?, grouped(&bump)?);
    let tokens = channels / gamma;
    if y0.shape()[0] != tokens {
        return Err(format!("{} tokens, expected {tokens}", y0.shape()[0]));
    }
    for t in 0..tokens {
        let changed = (0..y0.shape()[1]).any(|f| y0.at(&[t, f]) != y1.at(&[t, f]));
        if changed != (t == c / gamma) {
            return Err(format!("channel {c} (γ={gamma}) changed token {t}: {changed}"));
        }
    }
    Ok(())
}

/// Global positions obtained by building the merged sequence literally from
/// the placement rules.
pub fn constructed_positions(strategy: ConcatStrategy, l: usize, n: usize) -> Vec<usize> {
    // true marks a global slot
    let mut seq: Vec<bool> = Vec::with_capacity(l + n);
    match strategy {
        ConcatStrategy::Head => {
            seq.extend(std::iter::repeat_n(true, n));
            seq.extend(std::iter::repeat_n(false, l));
        }
        ConcatStrategy::Middle => {
            seq.extend(std::iter::repeat_n(false, l / 2));
            seq.extend(std::iter::repeat_n(true, n));
            seq.extend(std::iter::repeat_n(false, l - l / 2));
        }
        ConcatStrategy::Split => {
            let head = (n + 1) / 2;
            seq.extend(std::iter::repeat_n(true, head));
            seq.extend(std::iter::repeat_n(false, l));
            seq.extend(std::iter::repeat_n(true, n - head));
        }
        ConcatStrategy::Interleaved => {
            if n > 0 && l >= n {
                let q = l / n;
                for _ in 0..n {
                    seq.push(true);
                    seq.extend(std::iter::repeat_n(false, q));
                }
                seq.extend(std::iter::repeat_n(false, l - q * n));
            } else {
                seq.extend(std::iter::repeat_n(true, n.saturating_sub(l)));
                for _ in 0..l.min(n) {
                    seq.push(true);
                    seq.push(false);
                }
            }
        }
    }
    seq.iter().enumerate().filter(|(_, &g)| g).map(|(i, _)| i).collect()
}

/// Position lists match the construction, are strictly increasing and in
/// range, and stripping the globals returns the locals unchanged.
pub fn concat_case(l: usize, n: usize, seed: u64) -> Result<(), String> {
    let mut r = rng::stream(seed, "concat");
    let ch = 2;
    let local = random(&[l, ch], &mut r);
    let globals = random(&[n, ch], &mut r);
    for s in ConcatStrategy::ALL {
        let pos = s.positions(l, n);
        let want = constructed_positions(s, l, n);
        if pos != want {
            return Err(format!("{s} L={l} N={n}: {pos:?} != {want:?}"));
        }
        if pos.len() != n || pos.windows(2).any(|w| w[0] >= w[1]) || pos.last().is_some_and(|&p| p >= l + n) {
            return Err(format!("{s} L={l} N={n}: malformed {pos:?}"));
        }
        let mut g = Graph::<f64>::new();
        let (lv, gv) = (g.constant(local.clone()), g.constant(globals.clone()));
        let seq = extract::concat_tokens(&mut g, lv, gv, s, &[l], ScanDirection::HForward).map_err(|e| e.to_string())?;
        let merged = g.value(seq.tokens).clone();
        for (i, &p) in pos.iter().enumerate() {
            if merged.slice(0, p, p + 1).unwrap() != globals.slice(0, i, i + 1).unwrap() {
                return Err(format!("{s}: global {i} not at {p}"));
            }
        }
        let back = extract::strip_globals(&mut g, &seq).map_err(|e| e.to_string())?;
        if g.value(back) != &local {
            return Err(format!("{s} L={l} N={n}: stripping globals is not the identity"));
        }
    }
    Ok(())
}

/// Block configuration used by the residual-identity sweep (8×8×16, α = 2).
pub fn sweep_config(variant: Variant, directions: usize, strategy: ConcatStrategy) -> BlockConfig {
    BlockConfig { channels: 16, variant, directions, strategy, state_dim: 4, ..BlockConfig::default() }
}

/// Zeroed out-projection makes the block the identity, exactly, and every
/// block preserves its input shape.
pub fn residual_identity(cfg: &BlockConfig, seed: u64) -> Result<(), String> {
    let spatial = [8, 8];
    let mut ps = ParamSet::<f64>::new();
    let w = BlockWeights::init(cfg, &spatial, &mut ps, "block", seed).map_err(|e| e.to_string())?;
    let x = random(&[8, 8, cfg.channels], &mut rng::stream(seed, "residual-x"));
    let y = block_apply(&x, cfg, &ps, &w).map_err(|e| e.to_string())?;
    if y.shape() != x.shape() {
        return Err(format!("shape {:?} != {:?}", y.shape(), x.shape()));
    }
    if y == x {
        return Err("random block is already the identity".into());
    }
    w.zero_out_proj(&mut ps).map_err(|e| e.to_string())?;
    let y = block_apply(&x, cfg, &ps, &w).map_err(|e| e.to_string())?;
    if y != x {
        return Err(format!("max deviation {}", y.max_abs_diff(&x).unwrap()));
    }
    Ok(())
}
