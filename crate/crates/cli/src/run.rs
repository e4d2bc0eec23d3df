//! Training, ablation sweeps and receptive-field maps.

use std::fs;
use std::path::Path;

use logvm_core::blocks::Variant;
use logvm_core::extract::ConcatStrategy;
use logvm_core::train::{erf_map, gen_synthetic, train, write_pgm, EpochRecord};
use logvm_core::ModelWeightsF64;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::Failure;

pub const METRICS: &str = "metrics.csv";
pub const CHECKPOINT: &str = "checkpoint";
pub const CONFIG: &str = "config.json";

fn io(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Runtime(format!("{}: {e}", path.display()))
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<(), Failure> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    w.flush().map_err(io(path))
}

/// Trains one model and writes `metrics.csv`, `config.json` and the
/// checkpoint (with its own copy of the config) under `cfg.out_dir`.
pub fn train_run(cfg: &RunConfig) -> Result<EpochRecord, Failure> {
    let out = train::<f64>(&cfg.model, &cfg.task, &cfg.train, cfg.seed).map_err(Failure::core)?;
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir).map_err(io(dir))?;
    write_csv(&dir.join(METRICS), &out.history)?;
    let json = cfg.to_json();
    fs::write(dir.join(CONFIG), &json).map_err(io(dir))?;
    let ckpt = dir.join(CHECKPOINT);
    out.model.save(&ckpt).map_err(Failure::core)?;
    fs::write(ckpt.join(CONFIG), &json).map_err(io(&ckpt))?;
    Ok(out.last("val").expect("history has a validation row").clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Axis {
    Variant,
    Strategy,
    Directions,
}

/// Cells of an ablation axis, each a name and the config it runs.
pub fn cells(axis: Axis, base: &RunConfig) -> Vec<(String, RunConfig)> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match axis {
        Axis::Variant => Variant::ALL
            .iter()
            .map(|&v| (v.to_string(), with(&|c| c.model.block.variant = v)))
            .collect(),
        Axis::Strategy => ConcatStrategy::ALL
            .iter()
            .map(|&s| {
                let cfg = with(&|c| {
                    c.model.block.variant = Variant::LocalGlobal;
                    c.model.block.strategy = s;
                });
                (s.to_string(), cfg)
            })
            .collect(),
        Axis::Directions => [1, 2, 4]
            .iter()
            .map(|&m| (m.to_string(), with(&|c| c.model.block.directions = m)))
            .collect(),
    }
}

/// Final validation metrics of one ablation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub cell: String,
    pub seed: u64,
    pub loss: f64,
    pub dice: f64,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub cell: String,
    pub runs: usize,
    pub dice_mean: f64,
    pub dice_se: f64,
    pub iou_mean: f64,
    pub iou_se: f64,
}

/// Mean and standard error (sample standard deviation over `√n`; zero for a
/// single run).
pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn summarize(runs: &[RunRow]) -> Vec<SummaryRow> {
    let mut order: Vec<&str> = Vec::new();
    for r in runs {
        if !order.contains(&r.cell.as_str()) {
            order.push(&r.cell);
        }
    }
    order
        .into_iter()
        .map(|cell| {
            let rows: Vec<&RunRow> = runs.iter().filter(|r| r.cell == cell).collect();
            let (dice_mean, dice_se) = mean_se(&rows.iter().map(|r| r.dice).collect::<Vec<_>>());
            let (iou_mean, iou_se) = mean_se(&rows.iter().map(|r| r.iou).collect::<Vec<_>>());
            SummaryRow { cell: cell.to_string(), runs: rows.len(), dice_mean, dice_se, iou_mean, iou_se }
        })
        .collect()
}

/// Runs every cell of `axis` for `cfg.seeds` seeds, writing each run under
/// `out_dir/<cell>/seed<k>` plus `runs.csv` and `summary.csv`.
pub fn ablate(axis: Axis, cfg: &RunConfig) -> Result<Vec<SummaryRow>, Failure> {
    let mut runs = Vec::new();
    for (cell, mut c) in cells(axis, cfg) {
        c.validate()?;
        for seed in cfg.seed..cfg.seed + cfg.seeds as u64 {
            c.seed = seed;
            c.out_dir = cfg.out_dir.join(&cell).join(format!("seed{seed}"));
            let last = train_run(&c)?;
            eprintln!("{cell} seed {seed}: val dice {:.4}", last.dice);
            runs.push(RunRow { cell: cell.clone(), seed, loss: last.loss, dice: last.dice, iou: last.iou });
        }
    }
    let summary = summarize(&runs);
    write_csv(&cfg.out_dir.join("runs.csv"), &runs)?;
    write_csv(&cfg.out_dir.join("summary.csv"), &summary)?;
    Ok(summary)
}

/// Receptive-field map of a trained checkpoint, probed on the first
/// validation image of its task.
pub fn erf(checkpoint: &Path, probe: (usize, usize), out: &Path) -> Result<(), Failure> {
    let cfg_path = checkpoint.join(CONFIG);
    let cfg = RunConfig::load(Some(&cfg_path))?;
    cfg.validate()?;
    let model = ModelWeightsF64::load(&cfg.model, checkpoint).map_err(Failure::core)?;
    let (image, _) = gen_synthetic::<f64>(&cfg.task, cfg.train.train_size as u64).map_err(Failure::core)?;
    let map = erf_map(&model, &image, probe).map_err(Failure::core)?;
    write_pgm(&map, out).map_err(Failure::core)
}
