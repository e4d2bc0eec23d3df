//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria that depend on hardware the machine does not have (parallel
//! speed-up with fewer than four cores) still run and print their verdict, but
//! are reported as `FAIL (hardware)` and do not set the exit code.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use logvm_core::autodiff::Graph;
use logvm_core::blocks::{count_flops, BlockConfig, Variant};
use logvm_core::checks::{gradient_suite, Scope, SUITE_SEED};
use logvm_core::extract::{gtx, gtx_shape, ConcatStrategy};
use logvm_core::s6::{selective_scan_parallel, selective_scan_seq, S6Params, DEFAULT_CHUNK};
use logvm_core::segmodel::ModelConfig;
use logvm_core::train::{train, SynthTask, TaskKind, TrainConfig};
use logvm_core::{rng, S6ParamsF64, TensorF64};
use rand::Rng;

enum Verdict {
    Pass,
    Fail,
    /// Failed because the machine cannot meet the precondition.
    Hardware,
}

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, name: &str, verdict: Verdict, detail: String, elapsed: Duration) {
        let tag = match verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => {
                self.failed += 1;
                "FAIL"
            }
            Verdict::Hardware => "FAIL (hardware)",
        };
        println!("{tag:<15} {name:<28} {detail} [{:.1}s]", elapsed.as_secs_f64());
    }

    fn check(&mut self, name: &str, ok: bool, detail: String, elapsed: Duration) {
        self.line(name, if ok { Verdict::Pass } else { Verdict::Fail }, detail, elapsed);
    }
}

fn rel_err(a: &TensorF64, b: &TensorF64) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.max_abs_diff(b).unwrap() / scale
}

fn random_params(d: usize, n: usize, r: &mut impl Rng) -> S6ParamsF64 {
    let mut u = |shape: &[usize], lo: f64, hi: f64| TensorF64::from_fn(shape, |_| r.random_range(lo..hi));
    S6Params {
        a_log: u(&[d, n], -2.0, 1.5),
        delta_weight: u(&[d, 1], -1.0, 1.0),
        delta_bias: u(&[d], -3.0, 0.5),
        b_weight: u(&[d, n], -1.0, 1.0),
        c_weight: u(&[d, n], -1.0, 1.0),
        skip: u(&[d], -1.0, 1.0),
    }
}

fn scan_equivalence(rep: &mut Report) {
    let t = Instant::now();
    let mut r = rng::stream(0, "acceptance-scan");
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (l, d, n) = (r.random_range(1..=64), r.random_range(1..=8), r.random_range(1..=16));
        let chunk = r.random_range(1..=l);
        let p = random_params(d, n, &mut r);
        let x = common::random(&[l, d], &mut r);
        let seq = selective_scan_seq(&x, &p).unwrap();
        let par = selective_scan_parallel(&x, &p, chunk).unwrap();
        worst = worst.max(rel_err(&par, &seq));
    }
    let el = t.elapsed();
    rep.check(
        "scan equivalence",
        worst <= 1e-10 && el < Duration::from_secs(60),
        format!("1000 instances, max rel err {worst:.2e}"),
        el,
    );
}

fn gradients(rep: &mut Report) {
    let t = Instant::now();
    let mut lines = Vec::new();
    for scope in [Scope::Ops, Scope::Block, Scope::Model] {
        lines.extend(gradient_suite(scope, SUITE_SEED, None).unwrap());
    }
    let failing: Vec<&str> = lines.iter().filter(|l| !l.passed()).map(|l| l.name.as_str()).collect();
    let worst = lines.iter().map(|l| l.max_rel_err).fold(0.0, f64::max);
    let el = t.elapsed();
    rep.check(
        "gradient suite",
        failing.is_empty() && el < Duration::from_secs(300),
        format!("{} functions, max rel err {worst:.2e}, failing {failing:?}", lines.len()),
        el,
    );
}

fn ltx(rep: &mut Report) {
    let t = Instant::now();
    let mut errs: Vec<String> = (0..50).filter_map(|s| common::ltx_locality(1000 + s, 2).err()).collect();
    errs.extend((0..10).filter_map(|s| common::ltx_locality(2000 + s, 3).err()));
    rep.check("ltx locality", errs.is_empty(), format!("50 2D + 10 3D inputs, errors {errs:?}"), t.elapsed());
}

fn gtx_criterion(rep: &mut Report) {
    let t = Instant::now();
    let mut errs: Vec<String> = (0..100).filter_map(|s| common::gtx_independence(s).err()).collect();
    let mut r = rng::stream(0, "acceptance-gtx");
    for (spatial, stride, c) in
        [(vec![8, 8], vec![2, 2], 72), (vec![4, 6], vec![2, 3], 10), (vec![4, 4, 4], vec![2, 2, 2], 12)]
    {
        let f = gtx_shape(&spatial, c, &stride, 1).unwrap().features;
        let mut g = Graph::<f64>::new();
        let mut full = spatial.clone();
        full.push(c);
        let x = g.constant(common::random(&full, &mut r));
        let k = g.constant(common::random(&vec![3; spatial.len()].into_iter().chain([c]).collect::<Vec<_>>(), &mut r));
        let w = g.constant(common::random(&[f, c], &mut r));
        let b = g.constant(TensorF64::zeros(&[c]));
        let xg = gtx(&mut g, x, k, w, b, &stride, 1).unwrap();
        if g.shape(xg) != [c, c] {
            errs.push(format!("{spatial:?}: shape {:?}", g.shape(xg)));
        }
    }
    rep.check("gtx independence + shape", errs.is_empty(), format!("100 perturbations, 3 shapes, errors {errs:?}"), t.elapsed());
}

fn concat(rep: &mut Report) {
    let t = Instant::now();
    let mut r = rng::stream(0, "acceptance-concat");
    let mut wider = 0;
    let mut errs = Vec::new();
    for seed in 0..200 {
        let l = r.random_range(1..=64);
        // a third of the pairs have more global than local tokens
        let n = if seed % 3 == 0 { r.random_range(l + 1..=l + 40) } else { r.random_range(1..=l) };
        wider += usize::from(n > l);
        if let Err(e) = common::concat_case(l, n, seed) {
            errs.push(e);
        }
    }
    rep.check("concat strategies", errs.is_empty(), format!("200 pairs ({wider} with N > L), errors {errs:?}"), t.elapsed());
}

fn residual(rep: &mut Report) {
    let t = Instant::now();
    let mut errs = Vec::new();
    let mut cases = 0;
    for v in Variant::ALL {
        for m in [1, 2, 4] {
            for s in ConcatStrategy::ALL {
                cases += 1;
                if let Err(e) = common::residual_identity(&common::sweep_config(v, m, s), 11) {
                    errs.push(format!("{v} M={m} {s}: {e}"));
                }
            }
        }
    }
    rep.check("residual identity", errs.is_empty(), format!("{cases} configs, errors {errs:?}"), t.elapsed());
}

fn blobs_all(rep: &mut Report) {
    let t = Instant::now();
    let cfg = TrainConfig { epochs: 50, target_dice: Some(0.90), ..TrainConfig::default() };
    let out = train::<f64>(&ModelConfig::default(), &SynthTask::default(), &cfg, 0).unwrap();
    let best = out.history.iter().filter(|r| r.split == "val").map(|r| r.dice).fold(0.0, f64::max);
    let epochs = out.last("val").unwrap().epoch;
    let el = t.elapsed();
    rep.check(
        "toy blobs-all",
        best >= 0.90 && el < Duration::from_secs(600),
        format!("val Dice {best:.3} after {epochs} epochs"),
        el,
    );
}

/// Equal budget for both variants; the metric is the final-epoch val Dice.
const ABLATION_EPOCHS: usize = 30;

fn largest_blob(rep: &mut Report) {
    let t = Instant::now();
    let task = SynthTask { kind: TaskKind::LargestBlob, ..SynthTask::default() };
    let cfg = TrainConfig { epochs: ABLATION_EPOCHS, ..TrainConfig::default() };
    let mut means = Vec::new();
    let mut detail = String::new();
    for v in [Variant::Vanilla, Variant::LocalGlobal] {
        let dice: Vec<f64> = (0..3)
            .map(|seed| {
                let out = train::<f64>(&ModelConfig::default().with_variant(v), &task, &cfg, seed).unwrap();
                out.last("val").unwrap().dice
            })
            .collect();
        let per_seed: Vec<String> = dice.iter().map(|d| format!("{d:.3}")).collect();
        detail += &format!("{v} [{}] ", per_seed.join(" "));
        means.push(dice.iter().sum::<f64>() / 3.0);
    }
    let margin = means[1] - means[0];
    rep.check(
        "largest-blob ablation",
        margin >= 0.03,
        format!("{detail}margin {margin:+.3} over {ABLATION_EPOCHS} epochs"),
        t.elapsed(),
    );
}

fn time<R>(f: impl FnOnce() -> R) -> (R, f64) {
    let t = Instant::now();
    let r = f();
    (r, t.elapsed().as_secs_f64())
}

fn throughput(rep: &mut Report) {
    let t = Instant::now();
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let threads = cores.max(4);
    let mut r = rng::stream(0, "acceptance-throughput");
    let p = random_params(64, 16, &mut r);
    let x = common::random(&[65536, 64], &mut r);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    let (seq, ts) = time(|| selective_scan_seq(&x, &p).unwrap());
    let (par, tp) = time(|| pool.install(|| selective_scan_parallel(&x, &p, DEFAULT_CHUNK).unwrap()));
    let gate = rel_err(&par, &seq);
    let speedup = ts / tp;
    let ok = gate <= 1e-10 && speedup >= 2.0;
    let verdict = match (ok, gate <= 1e-10 && cores < 4) {
        (true, _) => Verdict::Pass,
        (false, true) => Verdict::Hardware,
        (false, false) => Verdict::Fail,
    };
    rep.line(
        "scan throughput",
        verdict,
        format!("{threads} threads on {cores} cores, speed-up {speedup:.2}x, gate rel err {gate:.1e}"),
        t.elapsed(),
    );
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn linear_complexity(rep: &mut Report) {
    let t = Instant::now();
    let mut r = rng::stream(0, "acceptance-linear");
    let (d, n) = (16, 16);
    let p = random_params(d, n, &mut r);
    let x = common::random(&[1 << 17, d], &mut r);
    let secs = |l: usize| {
        let xl = x.slice(0, 0, l).unwrap().contiguous();
        median((0..5).map(|_| time(|| selective_scan_seq(&xl, &p).unwrap()).1).collect())
    };
    let ratios: Vec<f64> = [1 << 12, 1 << 14, 1 << 16].iter().map(|&l| secs(2 * l) / secs(l)).collect();
    let ok = ratios.iter().all(|q| (1.6..=2.6).contains(q));
    let shown: Vec<String> = ratios.iter().map(|q| format!("{q:.2}")).collect();
    rep.check("linear complexity", ok, format!("t(2L)/t(L) at L=2^12,2^14,2^16: {}", shown.join(" ")), t.elapsed());
}

fn flops(rep: &mut Report) {
    let t = Instant::now();
    let at = |variant, directions| {
        let cfg = BlockConfig { variant, directions, ..BlockConfig::default() };
        count_flops(&cfg, &[16, 16])
    };
    let mut ok = true;
    let mut detail = String::new();
    for v in Variant::ALL {
        let (f1, f2, f4) = (at(v, 1), at(v, 2), at(v, 4));
        ok &= f4 > f2 && f2 > f1;
        detail += &format!("{v} {f1}/{f2}/{f4} ");
    }
    ok &= at(Variant::LocalGlobal, 1) > at(Variant::Vanilla, 1);
    rep.check("flops monotonicity", ok, format!("M=1/2/4: {detail}"), t.elapsed());
}

fn main() -> ExitCode {
    let mut rep = Report { failed: 0 };
    scan_equivalence(&mut rep);
    gradients(&mut rep);
    ltx(&mut rep);
    gtx_criterion(&mut rep);
    concat(&mut rep);
    residual(&mut rep);
    flops(&mut rep);
    linear_complexity(&mut rep);
    throughput(&mut rep);
    blobs_all(&mut rep);
    largest_blob(&mut rep);
    if rep.failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{} criteria failed", rep.failed);
        ExitCode::FAILURE
    }
}
