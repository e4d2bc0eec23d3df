//! Toy U-shaped 2D segmentation network.
//!
//! Encoder stage `i`: 3×3 conv, SiLU (kept as skip `i`), max-pool.
//! Decoder stage `i` (deepest first): nearest upsample, concat skip `i`,
//! 1×1 fuse conv, optional state-space block. A 1×1 head emits logits.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamSet, Var};
use crate::blocks::{block_forward, BlockConfig, BlockWeights, LinearIds, Variant};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::ndtensor::{read_ndt1_file, write_ndt1_file, Tensor};
use crate::rng;
use crate::scalar::Scalar;

/// Encoder convolution window.
pub const ENC_KERNEL: usize = 3;
/// Checkpoint index file name.
pub const MANIFEST: &str = "manifest.tsv";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub channels: usize,
    /// Max-pool factor after this stage (and upsample factor before its
    /// decoder).
    pub pool: usize,
    /// Global-extractor stride at this stage's resolution.
    pub stride: Vec<usize>,
    /// LTX squeeze factor at this stage.
    pub squeeze: usize,
    /// Whether the decoder stage carries a state-space block.
    pub block: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_size: Vec<usize>,
    pub in_channels: usize,
    pub classes: usize,
    pub stages: Vec<StageConfig>,
    /// Template for every decoder block; `channels`, `stride` and `squeeze`
    /// are overridden per stage.
    pub block: BlockConfig,
}

impl Default for ModelConfig {
    /// 32×32 single-channel input, two classes, stages of 8/16/32 channels.
    fn default() -> Self {
        let stage = |channels, stride: usize, squeeze| StageConfig {
            channels,
            pool: 2,
            stride: vec![stride; 2],
            squeeze,
            block: true,
        };
        Self {
            input_size: vec![32, 32],
            in_channels: 1,
            classes: 2,
            stages: vec![stage(8, 4, 8), stage(16, 2, 8), stage(32, 2, 8)],
            block: BlockConfig { state_dim: 4, ..BlockConfig::default() },
        }
    }
}

impl ModelConfig {
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.block.variant = variant;
        self
    }

    /// Spatial extent at which stage `i` operates.
    pub fn stage_spatial(&self, i: usize) -> Vec<usize> {
        let div: usize = self.stages[..i].iter().map(|s| s.pool).product();
        self.input_size.iter().map(|&s| s / div).collect()
    }

    pub fn stage_block(&self, i: usize) -> BlockConfig {
        let s = &self.stages[i];
        BlockConfig {
            channels: s.channels,
            stride: s.stride.clone(),
            squeeze: s.squeeze,
            ..self.block.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size.len() != 2 {
            return Err(arg_err!("model input must be 2D, got {:?}", self.input_size));
        }
        if self.in_channels == 0 || self.classes < 2 || self.stages.is_empty() {
            return Err(arg_err!("need input channels, at least 2 classes and 1 stage"));
        }
        let total: usize = self.stages.iter().map(|s| s.pool.max(1)).product();
        if self.stages.iter().any(|s| s.pool == 0 || s.channels == 0) {
            return Err(arg_err!("stage channels and pool factors must be positive"));
        }
        if let Some(s) = self.input_size.iter().find(|&&s| s == 0 || s % total != 0) {
            return Err(arg_err!("input extent {s} not divisible by total pooling {total}"));
        }
        for i in 0..self.stages.len() {
            if self.stages[i].block {
                let b = self.stage_block(i);
                b.validate()?;
                b.check_spatial(&self.stage_spatial(i))?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderStage {
    pub fuse: LinearIds,
    pub block: Option<BlockWeights>,
}

/// All weights of a model plus the handles locating them.
#[derive(Clone, Debug)]
pub struct ModelWeights<T: Scalar> {
    pub cfg: ModelConfig,
    pub params: ParamSet<T>,
    /// Encoder convs as `[9·Cin, Cout]` matrices over unfolded patches.
    pub encoder: Vec<LinearIds>,
    pub decoder: Vec<DecoderStage>,
    pub head: LinearIds,
}

fn linear_param<T: Scalar>(
    ps: &mut ParamSet<T>,
    name: &str,
    fin: usize,
    fout: usize,
    seed: u64,
) -> LinearIds {
    let mut r = rng::stream(seed, name);
    let b = 1.0 / (fin as f64).sqrt();
    let u = Uniform::new_inclusive(-b, b).unwrap();
    let w = Tensor::from_fn(&[fin, fout], |_| T::lit(u.sample(&mut r)));
    LinearIds {
        weight: ps.add(format!("{name}.weight"), w),
        bias: Some(ps.add(format!("{name}.bias"), Tensor::zeros(&[fout]))),
    }
}

/// Deterministic seeded initialization. Layers are keyed by name, so two
/// configs differing only in block variant share every non-block weight.
pub fn build_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ModelWeights<T>> {
    cfg.validate()?;
    let mut ps = ParamSet::new();
    let taps = ENC_KERNEL * ENC_KERNEL;
    let mut cin = cfg.in_channels;
    let mut encoder = Vec::new();
    for (i, s) in cfg.stages.iter().enumerate() {
        encoder.push(linear_param(&mut ps, &format!("enc{i}"), taps * cin, s.channels, seed));
        cin = s.channels;
    }
    let mut decoder = Vec::new();
    for (i, s) in cfg.stages.iter().enumerate() {
        let incoming = cfg.stages.get(i + 1).map_or(s.channels, |next| next.channels);
        let fuse = linear_param(&mut ps, &format!("dec{i}.fuse"), incoming + s.channels, s.channels, seed);
        let block = if s.block {
            let prefix = format!("dec{i}.block");
            Some(BlockWeights::init(&cfg.stage_block(i), &cfg.stage_spatial(i), &mut ps, &prefix, seed)?)
        } else {
            None
        };
        decoder.push(DecoderStage { fuse, block });
    }
    let head = linear_param(&mut ps, "head", cfg.stages[0].channels, cfg.classes, seed);
    Ok(ModelWeights { cfg: cfg.clone(), params: ps, encoder, decoder, head })
}

fn apply_linear<T: Scalar>(g: &mut Graph<T>, x: Var, ids: &LinearIds) -> Result<Var> {
    let w = g.param(ids.weight);
    let b = ids.bias.map(|b| g.param(b));
    g.linear(x, w, b)
}

/// Logits `H×W×classes` for an `H×W×Cin` image; the graph must be built over
/// `w.params`.
pub fn model_forward<T: Scalar>(g: &mut Graph<T>, image: Var, w: &ModelWeights<T>) -> Result<Var> {
    let cfg = &w.cfg;
    let mut want = cfg.input_size.clone();
    want.push(cfg.in_channels);
    if g.shape(image) != want.as_slice() {
        return Err(shape_err!("model expects {want:?}, got {:?}", g.shape(image)));
    }
    let mut x = image;
    let mut skips = Vec::new();
    for (s, ids) in cfg.stages.iter().zip(&w.encoder) {
        let patches = g.unfold(x, ENC_KERNEL)?;
        let y = apply_linear(g, patches, ids)?;
        let y = g.silu(y)?;
        skips.push(y);
        x = g.max_pool(y, &[s.pool, s.pool])?;
    }
    for i in (0..cfg.stages.len()).rev() {
        let s = &cfg.stages[i];
        let up = g.upsample_nearest(x, &[s.pool, s.pool])?;
        let cat = g.concat(&[up, skips[i]], 2)?;
        let y = apply_linear(g, cat, &w.decoder[i].fuse)?;
        x = match &w.decoder[i].block {
            Some(bw) => block_forward(g, y, &cfg.stage_block(i), bw)?,
            None => y,
        };
    }
    apply_linear(g, x, &w.head)
}

impl<T: Scalar> ModelWeights<T> {
    /// Untaped forward pass.
    pub fn logits(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::frozen(&self.params);
        let x = g.constant(image.clone());
        let y = model_forward(&mut g, x, self)?;
        Ok(g.value(y).clone())
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Writes one NDT1 file per parameter plus a `name<TAB>path` manifest
    /// with paths relative to `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut manifest = fs::File::create(dir.join(MANIFEST))?;
        for (i, (name, t)) in self.params.iter().enumerate() {
            let file = format!("{i:04}.ndt1");
            write_ndt1_file(t, dir.join(&file))?;
            writeln!(manifest, "{name}\t{file}")?;
        }
        Ok(())
    }

    /// Loads weights saved by [`Self::save`] into a model built from `cfg`.
    /// Every parameter must be present with a matching shape.
    pub fn load(cfg: &ModelConfig, dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut model = build_model::<T>(cfg, 0)?;
        let mut seen = vec![false; model.params.len()];
        let reader = BufReader::new(fs::File::open(dir.join(MANIFEST))?);
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (name, path) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("manifest line {}: expected name<TAB>path", n + 1)))?;
            let id = model
                .params
                .find(name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {name:?}")))?;
            model.params.set(id, read_ndt1_file(dir.join(path))?)?;
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Format(format!(
                "checkpoint lacks parameter {:?}",
                model.params.name(crate::autodiff::ParamId(i))
            )));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_geometry() {
        let c = ModelConfig::default();
        assert_eq!(c.stage_spatial(0), [32, 32]);
        assert_eq!(c.stage_spatial(2), [8, 8]);
        assert_eq!(c.stage_block(1).token_channels(), 36);
    }

    #[test]
    fn rejects_bad_divisibility() {
        let mut c = ModelConfig { input_size: vec![30, 32], ..ModelConfig::default() };
        assert!(c.validate().is_err());
        c.input_size = vec![32, 32];
        c.stages[0].stride = vec![3, 3];
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_head_gives_uniform_logits() {
        let cfg = ModelConfig { input_size: vec![16, 16], ..ModelConfig::default() };
        let mut m = build_model::<f64>(&cfg, 3).unwrap();
        m.params.set(m.head.weight, Tensor::zeros(&[8, 2])).unwrap();
        let img = Tensor::from_fn(&[16, 16, 1], |i| ((i[0] * 7 + i[1] * 3) % 5) as f64 / 5.0);
        let y = m.logits(&img).unwrap();
        assert_eq!(y.shape(), [16, 16, 2]);
        assert!(y.values().iter().all(|&v| v == 0.0));
    }
}
