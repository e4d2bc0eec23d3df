//! Token extractors, global-token placement and scan orderings.
//!
//! Feature maps are channel-last grids (`H×W×C` or `D×H×W×C`); sequences are
//! `L×C` token matrices.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::ndtensor::kernels::split_spatial;
use crate::scalar::Scalar;

/// Kernel size of the squeeze, vanilla and GTX depthwise convolutions.
pub const DWC_KERNEL: usize = 3;
/// Dilation of the GTX compression convolution.
pub const GTX_DILATION: usize = 2;

/// An ordered token matrix plus the bookkeeping needed to undo the ordering.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    /// `L_seq×C'`.
    pub tokens: Var,
    /// Strictly increasing rows of `tokens` holding global tokens.
    pub global_positions: Vec<usize>,
    /// Spatial extent of the local grid, `[H, W]` or `[D, H, W]`.
    pub spatial_shape: Vec<usize>,
    /// Ordering that produced the local rows.
    pub ordering: ScanDirection,
}

impl TokenSequence {
    pub fn local_len(&self) -> usize {
        self.spatial_shape.iter().product()
    }

    pub fn len(&self) -> usize {
        self.local_len() + self.global_positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows of `tokens` holding local tokens, in sequence order.
    pub fn local_positions(&self) -> Vec<usize> {
        let mut globals = self.global_positions.iter().peekable();
        (0..self.len())
            .filter(|p| {
                if globals.peek() == Some(&p) {
                    globals.next();
                    false
                } else {
                    true
                }
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// scan orderings

/// Axis-aligned scan order of a token grid.
///
/// `H*` walks the grid row-major; `V*` swaps the last two spatial axes first
/// (for 3D the depth axis stays outermost). `*Backward` reverses the walk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanDirection {
    HForward,
    HBackward,
    VForward,
    VBackward,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] = [
        ScanDirection::HForward,
        ScanDirection::VForward,
        ScanDirection::HBackward,
        ScanDirection::VBackward,
    ];

    /// The first `m` of [`Self::ALL`]: horizontal; horizontal and vertical; or
    /// both in both senses.
    pub fn for_count(m: usize) -> Result<&'static [ScanDirection]> {
        match m {
            1 | 2 | 4 => Ok(&Self::ALL[..m]),
            _ => Err(arg_err!("scan direction count must be 1, 2 or 4, got {m}")),
        }
    }

    fn is_vertical(self) -> bool {
        matches!(self, Self::VForward | Self::VBackward)
    }

    fn is_backward(self) -> bool {
        matches!(self, Self::HBackward | Self::VBackward)
    }

    /// `perm[k]` is the row-major grid index visited at step `k`.
    pub fn permutation(self, spatial: &[usize]) -> Result<Vec<usize>> {
        if !(2..=3).contains(&spatial.len()) {
            return Err(shape_err!("spatial shape must be 2D or 3D, got {spatial:?}"));
        }
        let r = spatial.len();
        let (h, w) = (spatial[r - 2], spatial[r - 1]);
        let depth: usize = spatial[..r - 2].iter().product();
        let mut perm = Vec::with_capacity(depth * h * w);
        for z in 0..depth {
            let base = z * h * w;
            if self.is_vertical() {
                for j in 0..w {
                    for i in 0..h {
                        perm.push(base + i * w + j);
                    }
                }
            } else {
                perm.extend(base..base + h * w);
            }
        }
        if self.is_backward() {
            perm.reverse();
        }
        Ok(perm)
    }

    pub fn inverse_permutation(self, spatial: &[usize]) -> Result<Vec<usize>> {
        let perm = self.permutation(spatial)?;
        let mut inv = vec![0; perm.len()];
        for (k, &p) in perm.iter().enumerate() {
            inv[p] = k;
        }
        Ok(inv)
    }
}

impl fmt::Display for ScanDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::HForward => "h_forward",
            Self::HBackward => "h_backward",
            Self::VForward => "v_forward",
            Self::VBackward => "v_backward",
        })
    }
}

fn grid_dims<T: Scalar>(g: &Graph<T>, x: Var) -> Result<(Vec<usize>, usize)> {
    let shape = g.shape(x);
    split_spatial(shape)?;
    let (c, spatial) = shape.split_last().unwrap();
    Ok((spatial.to_vec(), *c))
}

/// Flattens a grid into an `L×C` sequence in the given scan order.
pub fn order_tokens<T: Scalar>(g: &mut Graph<T>, x: Var, dir: ScanDirection) -> Result<Var> {
    let (spatial, c) = grid_dims(g, x)?;
    let l = spatial.iter().product();
    let flat = g.reshape(x, &[l, c])?;
    if dir == ScanDirection::HForward {
        return Ok(flat);
    }
    g.gather_rows(flat, &dir.permutation(&spatial)?)
}

/// Inverse of [`order_tokens`]: scatters an `L×C` sequence back onto a grid.
pub fn inverse_order<T: Scalar>(
    g: &mut Graph<T>,
    y: Var,
    dir: ScanDirection,
    spatial: &[usize],
) -> Result<Var> {
    let l: usize = spatial.iter().product();
    let c = match *g.shape(y) {
        [rows, c] if rows == l => c,
        ref s => return Err(shape_err!("sequence {s:?} does not fill grid {spatial:?}")),
    };
    let rows = if dir == ScanDirection::HForward {
        y
    } else {
        g.gather_rows(y, &dir.inverse_permutation(spatial)?)?
    };
    let mut shape = spatial.to_vec();
    shape.push(c);
    g.reshape(rows, &shape)
}

// ---------------------------------------------------------------------------
// global-token placement

/// Placement of global tokens among local ones. `Middle` is also accepted as
/// `center`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConcatStrategy {
    Head,
    #[serde(alias = "center")]
    Middle,
    Split,
    Interleaved,
}

impl ConcatStrategy {
    pub const ALL: [ConcatStrategy; 4] = [
        ConcatStrategy::Head,
        ConcatStrategy::Split,
        ConcatStrategy::Middle,
        ConcatStrategy::Interleaved,
    ];

    /// Sequence positions of `n_global` globals among `l_local` locals.
    pub fn positions(self, l_local: usize, n_global: usize) -> Vec<usize> {
        let n = n_global;
        if n == 0 {
            return Vec::new();
        }
        match self {
            Self::Head => (0..n).collect(),
            Self::Middle => (l_local / 2..l_local / 2 + n).collect(),
            Self::Split => {
                let head = n.div_ceil(2);
                (0..head).chain(l_local + head..l_local + n).collect()
            }
            Self::Interleaved => {
                let q = l_local / n;
                if q >= 1 {
                    (0..n).map(|i| i * (q + 1)).collect()
                } else {
                    let extra = n - l_local;
                    (0..extra).chain((0..l_local).map(|j| extra + 2 * j)).collect()
                }
            }
        }
    }
}

impl fmt::Display for ConcatStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Head => "head",
            Self::Middle => "center",
            Self::Split => "split",
            Self::Interleaved => "interleaved",
        })
    }
}

impl FromStr for ConcatStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "head" => Ok(Self::Head),
            "middle" | "center" => Ok(Self::Middle),
            "split" => Ok(Self::Split),
            "interleaved" => Ok(Self::Interleaved),
            _ => Err(arg_err!("unknown concat strategy {s:?}")),
        }
    }
}

/// Merges an ordered local sequence with global tokens. `local` must have been
/// produced by `ordering` over `spatial`.
pub fn concat_tokens<T: Scalar>(
    g: &mut Graph<T>,
    local: Var,
    globals: Var,
    strategy: ConcatStrategy,
    spatial: &[usize],
    ordering: ScanDirection,
) -> Result<TokenSequence> {
    let (l, c) = match *g.shape(local) {
        [l, c] => (l, c),
        ref s => return Err(shape_err!("local tokens must be L×C, got {s:?}")),
    };
    if l != spatial.iter().product::<usize>() {
        return Err(shape_err!("{l} local tokens for grid {spatial:?}"));
    }
    let n = match *g.shape(globals) {
        [n, gc] if gc == c => n,
        ref s => return Err(shape_err!("global tokens {s:?} do not match {c} channels")),
    };
    let positions = strategy.positions(l, n);
    // rows of [globals; locals]
    let mut source = vec![usize::MAX; l + n];
    for (i, &p) in positions.iter().enumerate() {
        source[p] = i;
    }
    let mut next_local = n;
    for s in source.iter_mut().filter(|s| **s == usize::MAX) {
        *s = next_local;
        next_local += 1;
    }
    let stacked = g.concat(&[globals, local], 0)?;
    let tokens = g.gather_rows(stacked, &source)?;
    Ok(TokenSequence {
        tokens,
        global_positions: positions,
        spatial_shape: spatial.to_vec(),
        ordering,
    })
}

/// A purely local sequence.
pub fn local_sequence<T: Scalar>(
    g: &Graph<T>,
    tokens: Var,
    spatial: &[usize],
    ordering: ScanDirection,
) -> Result<TokenSequence> {
    let l: usize = spatial.iter().product();
    if g.shape(tokens).len() != 2 || g.shape(tokens)[0] != l {
        return Err(shape_err!("tokens {:?} for grid {spatial:?}", g.shape(tokens)));
    }
    Ok(TokenSequence {
        tokens,
        global_positions: Vec::new(),
        spatial_shape: spatial.to_vec(),
        ordering,
    })
}

/// Removes the global rows, leaving the locals in sequence order.
pub fn strip_globals<T: Scalar>(g: &mut Graph<T>, seq: &TokenSequence) -> Result<Var> {
    if seq.global_positions.is_empty() {
        return Ok(seq.tokens);
    }
    g.gather_rows(seq.tokens, &seq.local_positions())
}

// ---------------------------------------------------------------------------
// extractors

fn same_conv_args(rank: usize, dilation: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let pad = (DWC_KERNEL - 1) * dilation / 2;
    (vec![1; rank], vec![dilation; rank], vec![pad; rank])
}

/// `C' = C·R^d/S`.
pub fn ltx_channels(channels: usize, window: usize, squeeze: usize, rank: usize) -> usize {
    channels * window.pow(rank as u32) / squeeze
}

/// Squeeze (grouped 3-tap conv, `C → C/S`), SiLU, then `R^d` unfold, kept as
/// a grid of `C'` channels.
///
/// The squeeze kernel is `[3, 3, S, C/S]` (or `[3, 3, 3, S, C/S]`); output
/// channel `o` reads input channels `o·S .. (o+1)·S`. Unfolded channel
/// `k·(C/S) + c` holds squeezed channel `c` of the neighbour at window offset
/// `k` (row-major over the window), zero beyond the border.
pub fn ltx_grid<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    squeeze_kernel: Var,
    window: usize,
    squeeze: usize,
) -> Result<Var> {
    let (spatial, c) = grid_dims(g, x)?;
    let rank = spatial.len();
    if squeeze == 0 || c % squeeze != 0 {
        return Err(arg_err!("squeeze factor {squeeze} does not divide {c} channels"));
    }
    if window % 2 == 0 {
        return Err(arg_err!("unfold window must be odd, got {window}"));
    }
    let mut want = vec![DWC_KERNEL; rank];
    want.extend([squeeze, c / squeeze]);
    if g.shape(squeeze_kernel) != want.as_slice() {
        return Err(shape_err!(
            "squeeze kernel {:?}, expected {want:?}",
            g.shape(squeeze_kernel)
        ));
    }
    let (stride, dilation, padding) = same_conv_args(rank, 1);
    let s = g.grouped_conv(x, squeeze_kernel, &stride, &dilation, &padding)?;
    let s = g.silu(s)?;
    g.unfold(s, window)
}

/// Local token extractor: [`ltx_grid`] flattened row-major.
pub fn ltx<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    squeeze_kernel: Var,
    window: usize,
    squeeze: usize,
) -> Result<TokenSequence> {
    let grid = ltx_grid(g, x, squeeze_kernel, window, squeeze)?;
    let spatial = grid_dims(g, grid)?.0;
    let tokens = order_tokens(g, grid, ScanDirection::HForward)?;
    local_sequence(g, tokens, &spatial, ScanDirection::HForward)
}

/// Depthwise 3-tap conv with same padding, then SiLU; grid in, grid out.
pub fn vanilla_grid<T: Scalar>(g: &mut Graph<T>, x: Var, dwc_kernel: Var) -> Result<Var> {
    let rank = grid_dims(g, x)?.0.len();
    let (stride, dilation, padding) = same_conv_args(rank, 1);
    let y = g.depthwise_conv(x, dwc_kernel, &stride, &dilation, &padding)?;
    g.silu(y)
}

/// Vanilla extractor: [`vanilla_grid`] flattened row-major.
pub fn vanilla_extract<T: Scalar>(g: &mut Graph<T>, x: Var, dwc_kernel: Var) -> Result<TokenSequence> {
    let grid = vanilla_grid(g, x, dwc_kernel)?;
    let spatial = grid_dims(g, grid)?.0;
    let tokens = order_tokens(g, grid, ScanDirection::HForward)?;
    local_sequence(g, tokens, &spatial, ScanDirection::HForward)
}

/// Shape arithmetic of the global extractor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GtxShape {
    /// Compressed spatial extent, `spatial / K`.
    pub pooled: Vec<usize>,
    /// Number of global tokens, `C'/γ`.
    pub tokens: usize,
    /// Pre-projection token width, `γ·Π(pooled)`.
    pub features: usize,
}

pub fn gtx_shape(spatial: &[usize], channels: usize, stride: &[usize], gamma: usize) -> Result<GtxShape> {
    if stride.len() != spatial.len() {
        return Err(arg_err!("stride {stride:?} for grid {spatial:?}"));
    }
    if let Some((s, k)) = spatial.iter().zip(stride).find(|(&s, &k)| k == 0 || s % k != 0) {
        return Err(arg_err!("compression stride {k} does not divide extent {s}"));
    }
    if gamma == 0 || channels % gamma != 0 {
        return Err(arg_err!("group size {gamma} does not divide {channels} channels"));
    }
    let pooled: Vec<usize> = spatial.iter().zip(stride).map(|(s, k)| s / k).collect();
    let p: usize = pooled.iter().product();
    Ok(GtxShape { tokens: channels / gamma, features: gamma * p, pooled })
}

/// Compression and channel grouping of the global extractor, before the
/// projection: `N×(γ·P)` with token `i` built only from channels
/// `iγ .. (i+1)γ`, channel-major within the token.
pub fn gtx_grouped<T: Scalar>(
    g: &mut Graph<T>,
    x_local: Var,
    dconv_kernel: Var,
    stride: &[usize],
    gamma: usize,
) -> Result<Var> {
    let (spatial, c) = grid_dims(g, x_local)?;
    let shape = gtx_shape(&spatial, c, stride, gamma)?;
    let rank = spatial.len();
    let (_, dilation, padding) = same_conv_args(rank, GTX_DILATION);
    let y = g.depthwise_conv(x_local, dconv_kernel, stride, &dilation, &padding)?;
    let p: usize = shape.pooled.iter().product();
    let flat = g.reshape(y, &[p, c])?;
    let cm = g.permute(flat, &[1, 0])?;
    g.reshape(cm, &[shape.tokens, shape.features])
}

/// Global token extractor: [`gtx_grouped`], a linear map to `C'` features
/// and SiLU. Returns `N_global×C'`.
pub fn gtx<T: Scalar>(
    g: &mut Graph<T>,
    x_local: Var,
    dconv_kernel: Var,
    proj_weight: Var,
    proj_bias: Var,
    stride: &[usize],
    gamma: usize,
) -> Result<Var> {
    let grouped = gtx_grouped(g, x_local, dconv_kernel, stride, gamma)?;
    let y = g.linear(grouped, proj_weight, Some(proj_bias))?;
    g.silu(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::Tensor;

    #[test]
    fn orderings_on_2x2() {
        let s = [2, 2];
        assert_eq!(ScanDirection::HForward.permutation(&s).unwrap(), [0, 1, 2, 3]);
        assert_eq!(ScanDirection::VForward.permutation(&s).unwrap(), [0, 2, 1, 3]);
        assert_eq!(ScanDirection::HBackward.permutation(&s).unwrap(), [3, 2, 1, 0]);
        assert_eq!(ScanDirection::VBackward.permutation(&s).unwrap(), [3, 1, 2, 0]);
    }

    #[test]
    fn order_round_trip() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4, 2], |i| (i[0] * 100 + i[1] * 10 + i[2]) as f64 + 0.5 * i[3] as f64));
        for dir in ScanDirection::ALL {
            let s = order_tokens(&mut g, x, dir).unwrap();
            let back = inverse_order(&mut g, s, dir, &[2, 3, 4]).unwrap();
            assert_eq!(g.value(back), g.value(x));
        }
    }

    #[test]
    fn strategy_examples() {
        assert_eq!(ConcatStrategy::Head.positions(4, 2), [0, 1]);
        assert_eq!(ConcatStrategy::Split.positions(4, 3), [0, 1, 6]);
        assert_eq!(ConcatStrategy::Interleaved.positions(8, 3), [0, 3, 6]);
        assert_eq!(ConcatStrategy::Middle.positions(5, 2), [2, 3]);
        assert_eq!(ConcatStrategy::Interleaved.positions(1, 3), [0, 1, 2]);
        assert_eq!(ConcatStrategy::Interleaved.positions(2, 5), [0, 1, 2, 3, 5]);
    }

    #[test]
    fn interleaved_sequence() {
        let mut g = Graph::<f64>::new();
        let local = g.constant(Tensor::from_fn(&[8, 1], |i| i[0] as f64));
        let globals = g.constant(Tensor::from_fn(&[3, 1], |i| -1.0 - i[0] as f64));
        let seq = concat_tokens(&mut g, local, globals, ConcatStrategy::Interleaved, &[2, 4], ScanDirection::HForward).unwrap();
        let want = [-1., 0., 1., -2., 2., 3., -3., 4., 5., 6., 7.];
        assert_eq!(g.value(seq.tokens).to_vec(), want);
        let back = strip_globals(&mut g, &seq).unwrap();
        assert_eq!(g.value(back), g.value(local));
    }

    #[test]
    fn strategy_names() {
        assert_eq!("center".parse::<ConcatStrategy>().unwrap(), ConcatStrategy::Middle);
        assert!("diagonal".parse::<ConcatStrategy>().is_err());
    }

    #[test]
    fn channel_arithmetic() {
        assert_eq!(ltx_channels(64, 3, 8, 2), 72);
        assert_eq!(ltx_channels(16, 3, 2, 3), 216);
    }

    #[test]
    fn gtx_shape_checks() {
        let s = gtx_shape(&[8, 8], 72, &[2, 2], 1).unwrap();
        assert_eq!((s.tokens, s.features), (72, 16));
        assert!(gtx_shape(&[8, 6], 72, &[4, 4], 1).is_err());
        assert!(gtx_shape(&[8, 8], 72, &[2, 2], 5).is_err());
    }

    #[test]
    fn ltx_rejects_bad_factors() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[4, 4, 6]));
        let k = g.constant(Tensor::zeros(&[3, 3, 4, 1]));
        assert!(ltx(&mut g, x, k, 3, 4).is_err());
        let k = g.constant(Tensor::zeros(&[3, 3, 2, 3]));
        assert!(ltx(&mut g, x, k, 2, 2).is_err());
    }
}
