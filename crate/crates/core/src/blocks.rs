//! The gated two-branch vision state-space block and its four extractor
//! variants.
//!
//! ```text
//! x ─ LN ─ linear C→2E ─┬─ u ─ extractor ─ [per direction: order, inject
//! │                     │      globals, scan, strip, un-order] ─ Σ ─ LN
//! │                     │      ─ (Local/LocalGlobal: linear C'→E) ─┐
//! │                     └─ g ─ SiLU ─────────────────────────────── ⊙ ─ linear E→C ─ + ─ out
//! └────────────────────────────────────────────────────────────────────────────────────┘
//! ```
//!
//! `E = αC`. The scan runs over `C'` channels for the Local variants and `E`
//! otherwise.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamSet, Var};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::extract::{self, ConcatStrategy, ScanDirection, DWC_KERNEL, GTX_DILATION};
use crate::ndtensor::Tensor;
use crate::rng;
use crate::s6::{s6_forward, S6Handles, S6Params};
use crate::scalar::Scalar;

/// Epsilon of every layer norm in the block.
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Depthwise conv + SiLU.
    Vanilla,
    /// Local token extractor.
    Local,
    /// Depthwise conv + SiLU, with global tokens.
    Global,
    /// Local token extractor, with global tokens drawn from its output.
    #[serde(alias = "log")]
    LocalGlobal,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Vanilla, Variant::Local, Variant::Global, Variant::LocalGlobal];

    pub fn has_local(self) -> bool {
        matches!(self, Self::Local | Self::LocalGlobal)
    }

    pub fn has_global(self) -> bool {
        matches!(self, Self::Global | Self::LocalGlobal)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Vanilla => "vanilla",
            Self::Local => "local",
            Self::Global => "global",
            Self::LocalGlobal => "log",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vanilla" => Ok(Self::Vanilla),
            "local" => Ok(Self::Local),
            "global" => Ok(Self::Global),
            "log" | "local_global" | "localglobal" => Ok(Self::LocalGlobal),
            _ => Err(arg_err!("unknown block variant {s:?}")),
        }
    }
}

/// Hyperparameters of one block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlockConfig {
    /// Input/output channels `C`.
    pub channels: usize,
    /// Expansion factor `α`.
    pub expansion: usize,
    pub variant: Variant,
    /// Number of scan directions `M ∈ {1, 2, 4}`.
    pub directions: usize,
    /// Unfold window `R` (odd).
    pub window: usize,
    /// Channel squeeze factor `S`.
    pub squeeze: usize,
    /// Per-axis compression stride `K` of the global extractor.
    pub stride: Vec<usize>,
    /// Channels per global token `γ`.
    pub gamma: usize,
    pub strategy: ConcatStrategy,
    /// SSM states per channel `N`.
    pub state_dim: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            expansion: 2,
            variant: Variant::LocalGlobal,
            directions: 1,
            window: 3,
            squeeze: 8,
            stride: vec![2, 2],
            gamma: 1,
            strategy: ConcatStrategy::Head,
            state_dim: 8,
        }
    }
}

impl BlockConfig {
    /// `E = αC`.
    pub fn inner(&self) -> usize {
        self.expansion * self.channels
    }

    pub fn rank(&self) -> usize {
        self.stride.len()
    }

    /// Channel width of the scanned tokens.
    pub fn token_channels(&self) -> usize {
        if self.variant.has_local() {
            extract::ltx_channels(self.inner(), self.window, self.squeeze, self.rank())
        } else {
            self.inner()
        }
    }

    pub fn n_global(&self) -> usize {
        if self.variant.has_global() {
            self.token_channels() / self.gamma
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.expansion == 0 || self.state_dim == 0 {
            return Err(arg_err!("channels, expansion and state_dim must be positive"));
        }
        ScanDirection::for_count(self.directions)?;
        if !(2..=3).contains(&self.rank()) {
            return Err(arg_err!("stride must have 2 or 3 entries, got {:?}", self.stride));
        }
        if self.variant.has_local() {
            if self.squeeze == 0 || self.inner() % self.squeeze != 0 {
                return Err(arg_err!(
                    "squeeze factor {} does not divide {} inner channels",
                    self.squeeze,
                    self.inner()
                ));
            }
            if self.window % 2 == 0 {
                return Err(arg_err!("unfold window must be odd, got {}", self.window));
            }
        }
        if self.variant.has_global() {
            if self.stride.contains(&0) {
                return Err(arg_err!("compression stride must be positive"));
            }
            if self.gamma == 0 || self.token_channels() % self.gamma != 0 {
                return Err(arg_err!(
                    "group size {} does not divide {} token channels",
                    self.gamma,
                    self.token_channels()
                ));
            }
        }
        Ok(())
    }

    /// Checks a spatial extent against the config.
    pub fn check_spatial(&self, spatial: &[usize]) -> Result<()> {
        if spatial.len() != self.rank() {
            return Err(shape_err!("{}D block given grid {spatial:?}", self.rank()));
        }
        if self.variant.has_global() {
            extract::gtx_shape(spatial, self.token_channels(), &self.stride, self.gamma)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearIds {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GtxIds {
    pub dconv: ParamId,
    pub proj: LinearIds,
}

/// Parameter handles of one block inside a [`ParamSet`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockWeights {
    pub spatial: Vec<usize>,
    pub ln_in: LayerNormIds,
    pub in_proj: LinearIds,
    /// Vanilla/Global depthwise kernel `[3,3,E]`.
    pub dwc: Option<ParamId>,
    /// Local/LocalGlobal squeeze kernel `[3,3,S,E/S]`.
    pub squeeze: Option<ParamId>,
    pub gtx: Option<GtxIds>,
    /// One parameter set per scan direction.
    pub scans: Vec<S6Handles>,
    pub ln_post: LayerNormIds,
    /// `C'→E`, Local/LocalGlobal only.
    pub post_proj: Option<LinearIds>,
    pub out_proj: LinearIds,
}

fn uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let b = 1.0 / (fan_in as f64).sqrt();
    let u = Uniform::new_inclusive(-b, b).unwrap();
    Tensor::from_fn(shape, |_| T::lit(u.sample(rng)))
}

fn add_ln<T: Scalar>(ps: &mut ParamSet<T>, name: &str, width: usize) -> LayerNormIds {
    LayerNormIds {
        gain: ps.add(format!("{name}.gain"), Tensor::ones(&[width])),
        bias: ps.add(format!("{name}.bias"), Tensor::zeros(&[width])),
    }
}

fn add_linear<T: Scalar, R: Rng + ?Sized>(
    ps: &mut ParamSet<T>,
    name: &str,
    fin: usize,
    fout: usize,
    bias: bool,
    rng: &mut R,
) -> LinearIds {
    LinearIds {
        weight: ps.add(format!("{name}.weight"), uniform(&[fin, fout], fin, rng)),
        bias: bias.then(|| ps.add(format!("{name}.bias"), Tensor::zeros(&[fout]))),
    }
}

impl BlockWeights {
    /// Registers freshly initialized weights for a block over `spatial`
    /// under `prefix.*`. Every sub-layer draws from its own named stream of
    /// `seed`, so blocks of different variants share the layers they have
    /// in common.
    pub fn init<T: Scalar>(
        cfg: &BlockConfig,
        spatial: &[usize],
        params: &mut ParamSet<T>,
        prefix: &str,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        cfg.check_spatial(spatial)?;
        let (c, e, d) = (cfg.channels, cfg.inner(), cfg.token_channels());
        let rank = cfg.rank();
        let taps = DWC_KERNEL.pow(rank as u32);
        let window = vec![DWC_KERNEL; rank];
        let r = |name: &str| rng::stream(seed, &format!("{prefix}.{name}"));
        let name = |s: &str| format!("{prefix}.{s}");

        let ln_in = add_ln(params, &name("ln_in"), c);
        let in_proj = add_linear(params, &name("in_proj"), c, 2 * e, false, &mut r("in_proj"));
        let dwc = (!cfg.variant.has_local()).then(|| {
            let mut shape = window.clone();
            shape.push(e);
            params.add(name("dwc"), uniform(&shape, taps, &mut r("dwc")))
        });
        let squeeze = cfg.variant.has_local().then(|| {
            let mut shape = window.clone();
            shape.extend([cfg.squeeze, e / cfg.squeeze]);
            params.add(name("squeeze"), uniform(&shape, taps * cfg.squeeze, &mut r("squeeze")))
        });
        let gtx = if cfg.variant.has_global() {
            let gs = extract::gtx_shape(spatial, d, &cfg.stride, cfg.gamma)?;
            let mut shape = window.clone();
            shape.push(d);
            let dconv = params.add(name("gtx.dconv"), uniform(&shape, taps, &mut r("gtx.dconv")));
            let proj = add_linear(params, &name("gtx.proj"), gs.features, d, true, &mut r("gtx.proj"));
            Some(GtxIds { dconv, proj })
        } else {
            None
        };
        let scans = (0..cfg.directions)
            .map(|m| {
                let p = S6Params::<T>::init(d, cfg.state_dim, &mut r(&format!("scan{m}")));
                p.register(params, &name(&format!("scan{m}")))
            })
            .collect();
        let ln_post = add_ln(params, &name("ln_post"), d);
        let post_proj = cfg
            .variant
            .has_local()
            .then(|| add_linear(params, &name("post_proj"), d, e, true, &mut r("post_proj")));
        let out_proj = add_linear(params, &name("out_proj"), e, c, false, &mut r("out_proj"));
        Ok(Self {
            spatial: spatial.to_vec(),
            ln_in,
            in_proj,
            dwc,
            squeeze,
            gtx,
            scans,
            ln_post,
            post_proj,
            out_proj,
        })
    }

    /// Sets the out-projection to zero, making the block an exact identity.
    pub fn zero_out_proj<T: Scalar>(&self, params: &mut ParamSet<T>) -> Result<()> {
        for id in std::iter::once(self.out_proj.weight).chain(self.out_proj.bias) {
            let shape = params.get(id).shape().to_vec();
            params.set(id, Tensor::zeros(&shape))?;
        }
        Ok(())
    }
}

fn layer_norm<T: Scalar>(g: &mut Graph<T>, x: Var, ids: &LayerNormIds) -> Result<Var> {
    let (gain, bias) = (g.param(ids.gain), g.param(ids.bias));
    g.layer_norm(x, gain, bias, T::lit(LN_EPS))
}

fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, ids: &LinearIds) -> Result<Var> {
    let w = g.param(ids.weight);
    let b = ids.bias.map(|b| g.param(b));
    g.linear(x, w, b)
}

fn missing(what: &str) -> Error {
    arg_err!("block weights lack {what} for this variant")
}

/// One block on a channel-last grid; the graph must have been built over
/// the [`ParamSet`] that `w` indexes.
pub fn block_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    cfg: &BlockConfig,
    w: &BlockWeights,
) -> Result<Var> {
    cfg.validate()?;
    let shape = g.shape(x).to_vec();
    let (c, spatial) = shape
        .split_last()
        .ok_or_else(|| shape_err!("block input must be a grid"))?;
    if *c != cfg.channels || spatial != w.spatial.as_slice() {
        return Err(shape_err!(
            "block built for {:?}×{} given {shape:?}",
            w.spatial,
            cfg.channels
        ));
    }
    let l: usize = spatial.iter().product();
    let (e, d) = (cfg.inner(), cfg.token_channels());

    let flat = g.reshape(x, &[l, *c])?;
    let xn = layer_norm(g, flat, &w.ln_in)?;
    let uv = linear(g, xn, &w.in_proj)?;
    let u = g.narrow(uv, 1, 0, e)?;
    let gate = g.narrow(uv, 1, e, e)?;
    let gate = g.silu(gate)?;
    let mut grid_shape = spatial.to_vec();
    grid_shape.push(e);
    let u = g.reshape(u, &grid_shape)?;

    let local = if cfg.variant.has_local() {
        let k = g.param(w.squeeze.ok_or_else(|| missing("a squeeze kernel"))?);
        extract::ltx_grid(g, u, k, cfg.window, cfg.squeeze)?
    } else {
        let k = g.param(w.dwc.ok_or_else(|| missing("a depthwise kernel"))?);
        extract::vanilla_grid(g, u, k)?
    };
    let globals = if cfg.variant.has_global() {
        let ids = w.gtx.as_ref().ok_or_else(|| missing("global extractor weights"))?;
        let dconv = g.param(ids.dconv);
        let pw = g.param(ids.proj.weight);
        let pb = g.param(ids.proj.bias.ok_or_else(|| missing("a projection bias"))?);
        Some(extract::gtx(g, local, dconv, pw, pb, &cfg.stride, cfg.gamma)?)
    } else {
        None
    };

    let dirs = ScanDirection::for_count(cfg.directions)?;
    if w.scans.len() != dirs.len() {
        return Err(missing("one scan per direction"));
    }
    let mut merged: Option<Var> = None;
    for (&dir, handles) in dirs.iter().zip(&w.scans) {
        let ordered = extract::order_tokens(g, local, dir)?;
        let seq = match globals {
            Some(gl) => extract::concat_tokens(g, ordered, gl, cfg.strategy, spatial, dir)?,
            None => extract::local_sequence(g, ordered, spatial, dir)?,
        };
        let vars = handles.bind(g);
        let out = s6_forward(g, &seq, &vars, false)?;
        let rows = extract::strip_globals(g, &out)?;
        let grid = extract::inverse_order(g, rows, dir, spatial)?;
        let y = g.reshape(grid, &[l, d])?;
        merged = Some(match merged {
            Some(acc) => g.add(acc, y)?,
            None => y,
        });
    }
    let z = layer_norm(g, merged.expect("at least one direction"), &w.ln_post)?;
    let z = match &w.post_proj {
        Some(ids) => linear(g, z, ids)?,
        None => z,
    };
    let z = g.mul(z, gate)?;
    let out = linear(g, z, &w.out_proj)?;
    let out = g.add(flat, out)?;
    g.reshape(out, &shape)
}

/// Untaped convenience wrapper around [`block_forward`].
pub fn block_apply<T: Scalar>(
    x: &Tensor<T>,
    cfg: &BlockConfig,
    params: &ParamSet<T>,
    w: &BlockWeights,
) -> Result<Tensor<T>> {
    let mut g = Graph::frozen(params);
    let xv = g.constant(x.clone());
    let y = block_forward(&mut g, xv, cfg, w)?;
    Ok(g.value(y).clone())
}

// ---------------------------------------------------------------------------
// cost model

/// Per-element cost of SiLU (negate, exp, add, divide, multiply).
const SILU: u64 = 5;
/// Per-element cost of softplus on the positive branch.
const SOFTPLUS: u64 = 5;
/// Per-element cost of layer norm (mean, centred square, normalize, affine).
const LAYER_NORM: u64 = 7;

fn linear_flops(rows: u64, fin: u64, fout: u64, bias: bool) -> u64 {
    2 * rows * fin * fout + if bias { rows * fout } else { 0 }
}

/// In-bounds (output, tap) pairs of a 3-tap window sweep, per spatial axis
/// multiplied out. Taps that land in the zero padding cost nothing.
fn conv_taps(spatial: &[usize], stride: usize, dilation: usize) -> u64 {
    let pad = (DWC_KERNEL - 1) * dilation / 2;
    spatial
        .iter()
        .map(|&n| {
            let out = (n + 2 * pad - dilation * (DWC_KERNEL - 1) - 1) / stride + 1;
            let mut pairs = 0;
            for o in 0..out {
                for k in 0..DWC_KERNEL {
                    let pos = (o * stride + k * dilation) as isize - pad as isize;
                    if pos >= 0 && (pos as usize) < n {
                        pairs += 1;
                    }
                }
            }
            pairs
        })
        .product()
}

/// Floating-point operations of one forward pass over `spatial`, with a
/// multiply-add counted as 2. Terms:
///
/// * layer norm: `7` per element; SiLU: `5` per element
/// * linear `Fin→Fout` over `L` rows: `2·L·Fin·Fout` (+ `L·Fout` bias)
/// * convolutions: `2` per in-bounds tap per output channel
/// * scan, per token and direction over `D` channels and `N` states:
///   step size `2D + 6D`, projections `4DN`, discretization `4DN`,
///   update `2DN`, readout `2DN + 2D`
/// * direction merge `(M−1)·L·D`, gate `L·E`, residual `L·C`
pub fn count_flops(cfg: &BlockConfig, spatial: &[usize]) -> u64 {
    let l: u64 = spatial.iter().product::<usize>() as u64;
    let (c, e, d, n) = (
        cfg.channels as u64,
        cfg.inner() as u64,
        cfg.token_channels() as u64,
        cfg.state_dim as u64,
    );
    let m = cfg.directions as u64;
    let taps = conv_taps(spatial, 1, 1);

    let mut f = LAYER_NORM * l * c + linear_flops(l, c, 2 * e, false) + SILU * l * e;
    if cfg.variant.has_local() {
        f += 2 * taps * e + SILU * l * e / cfg.squeeze as u64;
    } else {
        f += 2 * taps * e + SILU * l * e;
    }
    let mut seq = l;
    if cfg.variant.has_global() {
        let pooled: u64 = spatial
            .iter()
            .zip(&cfg.stride)
            .map(|(&s, &k)| (s / k.max(1)) as u64)
            .product();
        let ng = cfg.n_global() as u64;
        let feat = cfg.gamma as u64 * pooled;
        let dtaps: u64 = spatial
            .iter()
            .zip(&cfg.stride)
            .map(|(&n, &k)| conv_taps(&[n], k.max(1), GTX_DILATION))
            .product();
        f += 2 * dtaps * d + linear_flops(ng, feat, d, true) + SILU * ng * d;
        seq += ng;
    }
    let per_token = (2 + 1 + SOFTPLUS) * d + 4 * d * n + 4 * d * n + 2 * d * n + 2 * d * n + 2 * d;
    f += m * seq * per_token;
    f += (m - 1) * l * d;
    f += LAYER_NORM * l * d;
    if cfg.variant.has_local() {
        f += linear_flops(l, d, e, true);
    }
    f += l * e + linear_flops(l, e, c, false) + l * c;
    f
}
