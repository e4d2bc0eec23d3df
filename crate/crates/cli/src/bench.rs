//! Sequential versus parallel scan timing.

use std::time::Instant;

use logvm_core::s6::{selective_scan_parallel, selective_scan_seq, S6Params};
use logvm_core::{rng, TensorF64};
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::Failure;

/// Arithmetic per (token, channel, state): `exp(ΔA)`, `ΔA`, `Δ·B·x` (2),
/// the state update (2) and the readout (2).
const FLOPS_PER_STATE: f64 = 8.0;

/// Maximum relative deviation tolerated by the equivalence gate.
pub const GATE: f64 = 1e-10;

#[derive(Serialize)]
pub struct Row {
    #[serde(rename = "impl")]
    pub kind: &'static str,
    pub threads: usize,
    pub len: usize,
    pub channels: usize,
    pub secs: f64,
    pub gflops: f64,
}

pub struct Bench {
    pub len: usize,
    pub channels: usize,
    pub state: usize,
    pub threads: usize,
    pub chunk: usize,
    pub seed: u64,
}

fn timed<R>(f: impl FnOnce() -> R) -> (R, f64) {
    let t = Instant::now();
    let r = f();
    (r, t.elapsed().as_secs_f64())
}

pub fn run(b: &Bench) -> Result<Vec<Row>, Failure> {
    if b.len == 0 || b.channels == 0 || b.state == 0 || b.chunk == 0 || b.threads == 0 {
        return Err(Failure::Config("len, channels, state, chunk and threads must be positive".into()));
    }
    let mut r = rng::stream(b.seed, "scanbench");
    let p = S6Params::<f64>::init(b.channels, b.state, &mut r);
    let x = TensorF64::from_fn(&[b.len, b.channels], |_| StandardNormal.sample(&mut r));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(b.threads)
        .build()
        .map_err(|e| Failure::Runtime(e.to_string()))?;

    let (seq, ts) = timed(|| selective_scan_seq(&x, &p));
    let (par, tp) = timed(|| pool.install(|| selective_scan_parallel(&x, &p, b.chunk)));
    let (seq, par) = (seq.map_err(Failure::core)?, par.map_err(Failure::core)?);
    let scale = seq.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let err = par.max_abs_diff(&seq).map_err(Failure::core)? / scale;
    if !(err <= GATE) {
        return Err(Failure::Check(format!("parallel scan deviates from sequential: rel err {err:.3e}")));
    }

    let work = FLOPS_PER_STATE * (b.len * b.channels * b.state) as f64;
    let row = |kind, threads, secs: f64| Row {
        kind,
        threads,
        len: b.len,
        channels: b.channels,
        secs,
        gflops: work / secs.max(1e-12) / 1e9,
    };
    Ok(vec![row("sequential", 1, ts), row("parallel", b.threads, tp)])
}
