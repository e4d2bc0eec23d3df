//! Selective state-space scan.
//!
//! Per token `x_t ∈ R^D` the step size, input and readout projections are
//! computed from the token itself:
//!
//! ```text
//! Δ_t   = softplus(x_t·w_Δ + b_Δ)          (D)
//! B_t   = x_t·W_B,   C_t = x_t·W_C         (N each, shared over channels)
//! Ā_t   = exp(Δ_t ⊙ A),  B̄_t = Δ_t ⊙ B_t   (D×N, A = −exp(A_log))
//! h_t   = Ā_t ⊙ h_{t−1} + B̄_t ⊙ x_t
//! y_t   = Σ_n C_t[n]·h_t[·,n] + skip ⊙ x_t
//! ```
//!
//! The recurrence `h ← a⊙h + b` composes as an associative monoid
//! ([`ScanElement`]), which is what [`selective_scan_parallel`] exploits.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use rayon::prelude::*;

use crate::autodiff::{Backward, Graph, ParamId, ParamSet, Var};
use crate::error::{arg_err, shape_err, Result};
use crate::extract::TokenSequence;
use crate::ndtensor::Tensor;
use crate::scalar::{sigmoid, softplus, Scalar};

/// Continuous parameters of one selective SSM over `D` channels with `N`
/// states per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct S6Params<T: Scalar> {
    /// `D×N`; the decay matrix is `A = −exp(a_log)`.
    pub a_log: Tensor<T>,
    /// `D×1` projection of the token onto the (pre-softplus) step size.
    pub delta_weight: Tensor<T>,
    /// `D`, per-channel step-size bias.
    pub delta_bias: Tensor<T>,
    /// `D×N` input projection.
    pub b_weight: Tensor<T>,
    /// `D×N` readout projection.
    pub c_weight: Tensor<T>,
    /// `D` residual term `y += skip ⊙ x`; zero recovers the bare recurrence.
    pub skip: Tensor<T>,
}

/// Initial step size targeted by [`S6Params::init`].
pub const INIT_STEP: f64 = 1e-2;

impl<T: Scalar> S6Params<T> {
    /// `A = −(n+1)`, `softplus(b_Δ) = 1e−2`, projections `U(±1/√D)`, skip 1.
    pub fn init<R: Rng + ?Sized>(channels: usize, state_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (channels as f64).sqrt();
        let u = Uniform::new_inclusive(-bound, bound).unwrap();
        let mut uniform = |shape: &[usize]| Tensor::from_fn(shape, |_| T::lit(u.sample(rng)));
        let delta_weight = uniform(&[channels, 1]);
        let b_weight = uniform(&[channels, state_dim]);
        let c_weight = uniform(&[channels, state_dim]);
        let bias = INIT_STEP.exp_m1().ln();
        Self {
            a_log: Tensor::from_fn(&[channels, state_dim], |i| T::lit(((i[1] + 1) as f64).ln())),
            delta_weight,
            delta_bias: Tensor::full(&[channels], T::lit(bias)),
            b_weight,
            c_weight,
            skip: Tensor::ones(&[channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn state_dim(&self) -> usize {
        self.a_log.shape()[1]
    }

    /// `A = −exp(A_log)`, strictly negative.
    pub fn a(&self) -> Tensor<T> {
        self.a_log.map(|v| -v.exp())
    }

    pub fn validate(&self) -> Result<()> {
        let (d, n) = match *self.a_log.shape() {
            [d, n] if d > 0 && n > 0 => (d, n),
            ref s => return Err(shape_err!("a_log must be D×N, got {s:?}")),
        };
        let checks: [(&str, &Tensor<T>, &[usize]); 5] = [
            ("delta_weight", &self.delta_weight, &[d, 1]),
            ("delta_bias", &self.delta_bias, &[d]),
            ("b_weight", &self.b_weight, &[d, n]),
            ("c_weight", &self.c_weight, &[d, n]),
            ("skip", &self.skip, &[d]),
        ];
        for (name, t, want) in checks {
            if t.shape() != want {
                return Err(shape_err!("{name} is {:?}, expected {want:?}", t.shape()));
            }
        }
        Ok(())
    }

    /// Registers the six tensors under `prefix.*`.
    pub fn register(&self, params: &mut ParamSet<T>, prefix: &str) -> S6Handles {
        S6Handles {
            a_log: params.add(format!("{prefix}.a_log"), self.a_log.clone()),
            delta_weight: params.add(format!("{prefix}.delta_weight"), self.delta_weight.clone()),
            delta_bias: params.add(format!("{prefix}.delta_bias"), self.delta_bias.clone()),
            b_weight: params.add(format!("{prefix}.b_weight"), self.b_weight.clone()),
            c_weight: params.add(format!("{prefix}.c_weight"), self.c_weight.clone()),
            skip: params.add(format!("{prefix}.skip"), self.skip.clone()),
        }
    }
}

/// Parameter handles of one registered [`S6Params`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct S6Handles {
    pub a_log: ParamId,
    pub delta_weight: ParamId,
    pub delta_bias: ParamId,
    pub b_weight: ParamId,
    pub c_weight: ParamId,
    pub skip: ParamId,
}

impl S6Handles {
    pub fn bind<T: Scalar>(&self, g: &Graph<T>) -> S6Vars {
        S6Vars {
            a_log: g.param(self.a_log),
            delta_weight: g.param(self.delta_weight),
            delta_bias: g.param(self.delta_bias),
            b_weight: g.param(self.b_weight),
            c_weight: g.param(self.c_weight),
            skip: g.param(self.skip),
        }
    }

    pub fn load<T: Scalar>(&self, params: &ParamSet<T>) -> S6Params<T> {
        S6Params {
            a_log: params.get(self.a_log).clone(),
            delta_weight: params.get(self.delta_weight).clone(),
            delta_bias: params.get(self.delta_bias).clone(),
            b_weight: params.get(self.b_weight).clone(),
            c_weight: params.get(self.c_weight).clone(),
            skip: params.get(self.skip).clone(),
        }
    }
}

/// The S6 parameters as nodes on a tape.
#[derive(Clone, Copy, Debug)]
pub struct S6Vars {
    pub a_log: Var,
    pub delta_weight: Var,
    pub delta_bias: Var,
    pub b_weight: Var,
    pub c_weight: Var,
    pub skip: Var,
}

impl S6Vars {
    /// Puts `params` on `g` as trainable leaves.
    pub fn leaves<T: Scalar>(g: &mut Graph<T>, params: &S6Params<T>) -> Self {
        Self {
            a_log: g.leaf(params.a_log.clone()),
            delta_weight: g.leaf(params.delta_weight.clone()),
            delta_bias: g.leaf(params.delta_bias.clone()),
            b_weight: g.leaf(params.b_weight.clone()),
            c_weight: g.leaf(params.c_weight.clone()),
            skip: g.leaf(params.skip.clone()),
        }
    }

    fn as_array(&self) -> [Var; 6] {
        [self.a_log, self.delta_weight, self.delta_bias, self.b_weight, self.c_weight, self.skip]
    }

    fn load<T: Scalar>(&self, g: &Graph<T>) -> S6Params<T> {
        S6Params {
            a_log: g.value(self.a_log).clone(),
            delta_weight: g.value(self.delta_weight).clone(),
            delta_bias: g.value(self.delta_bias).clone(),
            b_weight: g.value(self.b_weight).clone(),
            c_weight: g.value(self.c_weight).clone(),
            skip: g.value(self.skip).clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// discretization and the scan monoid

/// Zero-order hold for `A`, Euler for `B`: `Ā = exp(Δ⊙A)`, `B̄ = Δ⊙B`, with
/// `Δ` broadcast over the state axis.
pub fn discretize<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    delta: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (d, n) = match *a.shape() {
        [d, n] => (d, n),
        ref s => return Err(shape_err!("A must be D×N, got {s:?}")),
    };
    if b.shape() != a.shape() || delta.shape() != [d] {
        return Err(shape_err!(
            "discretize: A {:?}, B {:?}, Δ {:?}",
            a.shape(),
            b.shape(),
            delta.shape()
        ));
    }
    let dv = delta.values();
    if let Some(bad) = dv.iter().find(|&&v| v <= T::zero()) {
        return Err(arg_err!("step size must be positive, got {bad}"));
    }
    let abar = Tensor::from_fn(&[d, n], |i| (dv[i[0]] * a.at(i)).exp());
    let bbar = Tensor::from_fn(&[d, n], |i| dv[i[0]] * b.at(i));
    Ok((abar, bbar))
}

/// One affine map `h ↦ a⊙h + b` of the recurrence.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanElement<T: Scalar> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> ScanElement<T> {
    pub fn identity(shape: &[usize]) -> Self {
        Self { a: Tensor::ones(shape), b: Tensor::zeros(shape) }
    }

    /// `self ∘ earlier`, applying `earlier` first: `(a₂a₁, a₂b₁ + b₂)`.
    pub fn after(&self, earlier: &Self) -> Result<Self> {
        Ok(Self {
            a: self.a.zip_map(&earlier.a, |x, y| x * y)?,
            b: self
                .a
                .zip_map(&earlier.b, |x, y| x * y)?
                .zip_map(&self.b, |x, y| x + y)?,
        })
    }

    pub fn apply(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        self.a.zip_map(h, |a, h| a * h)?.zip_map(&self.b, |x, b| x + b)
    }
}

// ---------------------------------------------------------------------------
// flat kernels

/// Parameters unpacked into flat row-major buffers.
struct Flat<T> {
    d: usize,
    n: usize,
    a: Vec<T>,
    dw: Vec<T>,
    db: Vec<T>,
    bw: Vec<T>,
    cw: Vec<T>,
    skip: Vec<T>,
}

impl<T: Scalar> Flat<T> {
    fn new(p: &S6Params<T>) -> Result<Self> {
        p.validate()?;
        Ok(Self {
            d: p.channels(),
            n: p.state_dim(),
            a: p.a().into_vec(),
            dw: p.delta_weight.to_vec(),
            db: p.delta_bias.to_vec(),
            bw: p.b_weight.to_vec(),
            cw: p.c_weight.to_vec(),
            skip: p.skip.to_vec(),
        })
    }

    /// Step sizes, pre-activations and the B/C projections for token `x`.
    #[inline]
    fn project(&self, x: &[T], delta: &mut [T], pre: &mut [T], b: &mut [T], c: &mut [T]) {
        let n = self.n;
        let z = x.iter().zip(&self.dw).map(|(&a, &w)| a * w).sum::<T>();
        for d in 0..self.d {
            pre[d] = z + self.db[d];
            delta[d] = softplus(pre[d]);
        }
        b.fill(T::zero());
        c.fill(T::zero());
        for (d, &xd) in x.iter().enumerate() {
            let (br, cr) = (&self.bw[d * n..(d + 1) * n], &self.cw[d * n..(d + 1) * n]);
            for k in 0..n {
                b[k] = b[k] + xd * br[k];
                c[k] = c[k] + xd * cr[k];
            }
        }
    }

    /// Writes the step's transition `(Ā, B̄⊙x)` into `a_out`, `b_out`.
    #[inline]
    fn element(&self, x: &[T], delta: &[T], b: &[T], a_out: &mut [T], b_out: &mut [T]) {
        let n = self.n;
        for d in 0..self.d {
            for k in 0..n {
                let i = d * n + k;
                a_out[i] = (delta[d] * self.a[i]).exp();
                b_out[i] = delta[d] * b[k] * x[d];
            }
        }
    }

    #[inline]
    fn readout(&self, x: &[T], c: &[T], h: &[T], y: &mut [T]) {
        let n = self.n;
        for d in 0..self.d {
            let mut acc = T::zero();
            for k in 0..n {
                acc = acc + c[k] * h[d * n + k];
            }
            y[d] = acc + self.skip[d] * x[d];
        }
    }
}

fn check_input<T: Scalar>(x: &Tensor<T>, p: &S6Params<T>) -> Result<usize> {
    match *x.shape() {
        [0, _] => Err(arg_err!("selective scan needs at least one token")),
        [l, d] if d == p.channels() => Ok(l),
        ref s => Err(shape_err!(
            "scan input {s:?} does not match {} channels",
            p.channels()
        )),
    }
}

/// Intermediate values kept for the adjoint.
struct ScanTrace<T> {
    delta: Vec<T>,
    pre: Vec<T>,
    b: Vec<T>,
    c: Vec<T>,
    abar: Vec<T>,
    h: Vec<T>,
}

fn scan_sequential<T: Scalar>(
    x: &Tensor<T>,
    p: &S6Params<T>,
    keep_trace: bool,
) -> Result<(Tensor<T>, Option<ScanTrace<T>>)> {
    let l = check_input(x, p)?;
    let f = Flat::new(p)?;
    let (d, n) = (f.d, f.n);
    let xv = x.values();
    let mut y = vec![T::zero(); l * d];
    let mut h = vec![T::zero(); d * n];
    let (mut delta, mut pre) = (vec![T::zero(); d], vec![T::zero(); d]);
    let (mut b, mut c) = (vec![T::zero(); n], vec![T::zero(); n]);
    let (mut abar, mut bx) = (vec![T::zero(); d * n], vec![T::zero(); d * n]);
    let mut trace = keep_trace.then(|| ScanTrace {
        delta: Vec::with_capacity(l * d),
        pre: Vec::with_capacity(l * d),
        b: Vec::with_capacity(l * n),
        c: Vec::with_capacity(l * n),
        abar: Vec::with_capacity(l * d * n),
        h: Vec::with_capacity(l * d * n),
    });
    for t in 0..l {
        let xt = &xv[t * d..(t + 1) * d];
        f.project(xt, &mut delta, &mut pre, &mut b, &mut c);
        f.element(xt, &delta, &b, &mut abar, &mut bx);
        for i in 0..d * n {
            h[i] = abar[i] * h[i] + bx[i];
        }
        f.readout(xt, &c, &h, &mut y[t * d..(t + 1) * d]);
        if let Some(tr) = trace.as_mut() {
            tr.delta.extend_from_slice(&delta);
            tr.pre.extend_from_slice(&pre);
            tr.b.extend_from_slice(&b);
            tr.c.extend_from_slice(&c);
            tr.abar.extend_from_slice(&abar);
            tr.h.extend_from_slice(&h);
        }
    }
    Ok((Tensor::new(&[l, d], y)?, trace))
}

/// Reference scan: one token at a time, `h_0 = 0`.
pub fn selective_scan_seq<T: Scalar>(x: &Tensor<T>, p: &S6Params<T>) -> Result<Tensor<T>> {
    scan_sequential(x, p, false).map(|(y, _)| y)
}

/// Chunk-local inclusive prefix of scan elements plus the readout vectors.
struct ChunkPrefix<T> {
    start: usize,
    a: Vec<T>,
    b: Vec<T>,
    c: Vec<T>,
}

/// Same result as [`selective_scan_seq`], computed as a chunked prefix scan
/// over [`ScanElement`]s:
///
/// 1. every chunk (in parallel) materializes its elements and their
///    inclusive prefix compositions relative to the chunk start;
/// 2. a sequential pass threads the carry state through the chunk totals;
/// 3. every chunk (in parallel) applies its carry-in and reads out `y`.
///
/// Runs on the current rayon pool. `chunk = 1` performs exactly the
/// sequential arithmetic.
pub fn selective_scan_parallel<T: Scalar>(
    x: &Tensor<T>,
    p: &S6Params<T>,
    chunk: usize,
) -> Result<Tensor<T>> {
    if chunk == 0 {
        return Err(arg_err!("chunk size must be at least 1"));
    }
    let l = check_input(x, p)?;
    let f = Flat::new(p)?;
    let (d, n) = (f.d, f.n);
    let dn = d * n;
    let xv = x.values();
    let xv: &[T] = &xv;

    let starts: Vec<usize> = (0..l).step_by(chunk).collect();
    let prefixes: Vec<ChunkPrefix<T>> = starts
        .par_iter()
        .map(|&start| {
            let len = chunk.min(l - start);
            let mut a = vec![T::zero(); len * dn];
            let mut b = vec![T::zero(); len * dn];
            let mut c = vec![T::zero(); len * n];
            let (mut delta, mut pre) = (vec![T::zero(); d], vec![T::zero(); d]);
            let mut bproj = vec![T::zero(); n];
            for s in 0..len {
                let xt = &xv[(start + s) * d..(start + s + 1) * d];
                f.project(xt, &mut delta, &mut pre, &mut bproj, &mut c[s * n..(s + 1) * n]);
                let (done, rest) = a.split_at_mut(s * dn);
                let (bdone, brest) = b.split_at_mut(s * dn);
                let (a_s, b_s) = (&mut rest[..dn], &mut brest[..dn]);
                f.element(xt, &delta, &bproj, a_s, b_s);
                if s > 0 {
                    let (a_prev, b_prev) = (&done[(s - 1) * dn..], &bdone[(s - 1) * dn..]);
                    for i in 0..dn {
                        let ai = a_s[i];
                        b_s[i] = ai * b_prev[i] + b_s[i];
                        a_s[i] = ai * a_prev[i];
                    }
                }
            }
            ChunkPrefix { start, a, b, c }
        })
        .collect();

    let mut carries = Vec::with_capacity(prefixes.len());
    let mut h = vec![T::zero(); dn];
    for pr in &prefixes {
        carries.push(h.clone());
        let last = pr.a.len() - dn;
        for i in 0..dn {
            h[i] = pr.a[last + i] * h[i] + pr.b[last + i];
        }
    }

    let mut y = vec![T::zero(); l * d];
    y.par_chunks_mut(chunk * d)
        .zip(prefixes.par_iter().zip(carries.par_iter()))
        .for_each(|(ychunk, (pr, carry))| {
            let mut h = vec![T::zero(); dn];
            for (s, yrow) in ychunk.chunks_exact_mut(d).enumerate() {
                let t = pr.start + s;
                for i in 0..dn {
                    h[i] = pr.a[s * dn + i] * carry[i] + pr.b[s * dn + i];
                }
                f.readout(&xv[t * d..(t + 1) * d], &pr.c[s * n..(s + 1) * n], &h, yrow);
            }
        });
    Tensor::new(&[l, d], y)
}

/// Gradients of a scan with respect to its input and each parameter.
#[derive(Clone, Debug)]
pub struct ScanGrads<T: Scalar> {
    pub x: Tensor<T>,
    pub params: S6Params<T>,
}

/// Adjoint of the scan by the reverse recurrence
/// `ḡ_t = C_t ȳ_t + Ā_{t+1} ⊙ ḡ_{t+1}`; memory is `O(L·D·N)` for the saved
/// states.
pub fn selective_scan_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &S6Params<T>,
    gy: &Tensor<T>,
) -> Result<ScanGrads<T>> {
    let (_, trace) = scan_sequential(x, p, true)?;
    backward_from_trace(x, p, &trace.unwrap(), gy)
}

fn backward_from_trace<T: Scalar>(
    x: &Tensor<T>,
    p: &S6Params<T>,
    tr: &ScanTrace<T>,
    gy: &Tensor<T>,
) -> Result<ScanGrads<T>> {
    if gy.shape() != x.shape() {
        return Err(shape_err!("scan gradient {:?} for output {:?}", gy.shape(), x.shape()));
    }
    let f = Flat::new(p)?;
    let (l, d, n) = (x.shape()[0], f.d, f.n);
    let dn = d * n;
    let (xv, gyv) = (x.values(), gy.values());
    let mut gx = vec![T::zero(); l * d];
    let mut ga = vec![T::zero(); dn];
    let mut gdw = vec![T::zero(); d];
    let mut gdb = vec![T::zero(); d];
    let mut gbw = vec![T::zero(); dn];
    let mut gcw = vec![T::zero(); dn];
    let mut gskip = vec![T::zero(); d];
    let mut carry = vec![T::zero(); dn];
    let (mut gb, mut gc, mut gdelta) = (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); d]);
    let zeros = vec![T::zero(); dn];

    for t in (0..l).rev() {
        let xt = &xv[t * d..(t + 1) * d];
        let gyt = &gyv[t * d..(t + 1) * d];
        let delta = &tr.delta[t * d..(t + 1) * d];
        let bt = &tr.b[t * n..(t + 1) * n];
        let ct = &tr.c[t * n..(t + 1) * n];
        let abar = &tr.abar[t * dn..(t + 1) * dn];
        let h = &tr.h[t * dn..(t + 1) * dn];
        let h_prev = if t > 0 { &tr.h[(t - 1) * dn..t * dn] } else { &zeros[..] };
        let gxt = &mut gx[t * d..(t + 1) * d];
        gb.fill(T::zero());
        gc.fill(T::zero());
        for dd in 0..d {
            gskip[dd] = gskip[dd] + gyt[dd] * xt[dd];
            gxt[dd] = gxt[dd] + gyt[dd] * f.skip[dd];
            let mut gdel = T::zero();
            let mut gxd = T::zero();
            for k in 0..n {
                let i = dd * n + k;
                let gh = gyt[dd] * ct[k] + carry[i];
                gc[k] = gc[k] + gyt[dd] * h[i];
                let g_abar = gh * h_prev[i] * abar[i];
                gdel = gdel + g_abar * f.a[i] + gh * bt[k] * xt[dd];
                ga[i] = ga[i] + g_abar * delta[dd];
                gb[k] = gb[k] + gh * delta[dd] * xt[dd];
                gxd = gxd + gh * delta[dd] * bt[k];
                carry[i] = abar[i] * gh;
            }
            gdelta[dd] = gdel;
            gxt[dd] = gxt[dd] + gxd;
        }
        let mut gz = T::zero();
        for dd in 0..d {
            let gpre = gdelta[dd] * sigmoid(tr.pre[t * d + dd]);
            gdb[dd] = gdb[dd] + gpre;
            gz = gz + gpre;
        }
        for dd in 0..d {
            gdw[dd] = gdw[dd] + gz * xt[dd];
            let mut acc = gz * f.dw[dd];
            for k in 0..n {
                let i = dd * n + k;
                gbw[i] = gbw[i] + xt[dd] * gb[k];
                gcw[i] = gcw[i] + xt[dd] * gc[k];
                acc = acc + f.bw[i] * gb[k] + f.cw[i] * gc[k];
            }
            gxt[dd] = gxt[dd] + acc;
        }
    }
    // dA/dA_log = −exp(A_log) = A
    let ga_log: Vec<T> = ga.iter().zip(&f.a).map(|(&g, &a)| g * a).collect();
    Ok(ScanGrads {
        x: Tensor::new(&[l, d], gx)?,
        params: S6Params {
            a_log: Tensor::new(&[d, n], ga_log)?,
            delta_weight: Tensor::new(&[d, 1], gdw)?,
            delta_bias: Tensor::new(&[d], gdb)?,
            b_weight: Tensor::new(&[d, n], gbw)?,
            c_weight: Tensor::new(&[d, n], gcw)?,
            skip: Tensor::new(&[d], gskip)?,
        },
    })
}

// ---------------------------------------------------------------------------
// taped scan

struct ScanOp<T: Scalar> {
    trace: Option<ScanTrace<T>>,
}

impl<T: Scalar> Backward<T> for ScanOp<T> {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        grad: &Tensor<T>,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let p = S6Params {
            a_log: inputs[1].clone(),
            delta_weight: inputs[2].clone(),
            delta_bias: inputs[3].clone(),
            b_weight: inputs[4].clone(),
            c_weight: inputs[5].clone(),
            skip: inputs[6].clone(),
        };
        let g = match &self.trace {
            Some(tr) => backward_from_trace(inputs[0], &p, tr, grad)?,
            None => selective_scan_backward(inputs[0], &p, grad)?,
        };
        let q = g.params;
        Ok(vec![
            Some(g.x),
            Some(q.a_log),
            Some(q.delta_weight),
            Some(q.delta_bias),
            Some(q.b_weight),
            Some(q.c_weight),
            Some(q.skip),
        ])
    }
}

/// Taped scan of an `L×D` token matrix. With `parallel_chunk = Some(c)` the
/// forward value comes from [`selective_scan_parallel`] and the adjoint
/// recomputes the states; otherwise the sequential pass keeps them.
pub fn scan<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &S6Vars,
    parallel_chunk: Option<usize>,
) -> Result<Var> {
    let params = p.load(g);
    let taped = g.requires_grad(x) || p.as_array().iter().any(|&v| g.requires_grad(v));
    let (y, trace) = match parallel_chunk {
        Some(chunk) => (selective_scan_parallel(g.value(x), &params, chunk)?, None),
        None => scan_sequential(g.value(x), &params, taped)?,
    };
    let mut inputs = vec![x];
    inputs.extend(p.as_array());
    g.apply(ScanOp { trace }, &inputs, y)
}

/// Default chunk length when a caller asks for the parallel path without
/// choosing one.
pub const DEFAULT_CHUNK: usize = 256;

/// Runs the scan over a whole token sequence, global tokens included at
/// their positions; position bookkeeping is carried over unchanged.
pub fn s6_forward<T: Scalar>(
    g: &mut Graph<T>,
    seq: &TokenSequence,
    p: &S6Vars,
    use_parallel: bool,
) -> Result<TokenSequence> {
    let d = g.shape(p.a_log)[0];
    if g.shape(seq.tokens).get(1) != Some(&d) {
        return Err(shape_err!(
            "sequence {:?} does not match {d} scan channels",
            g.shape(seq.tokens)
        ));
    }
    let y = scan(g, seq.tokens, p, use_parallel.then_some(DEFAULT_CHUNK))?;
    Ok(TokenSequence { tokens: y, ..seq.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_params(d: usize, n: usize, seed: u64) -> S6Params<f64> {
        let mut r = rng::stream(seed, "params");
        let mut p = S6Params::init(d, n, &mut r);
        let u = Uniform::new(-1.0, 1.0).unwrap();
        p.delta_bias = p.delta_bias.map(|_| u.sample(&mut r));
        p.a_log = p.a_log.map(|v| v + 0.3 * u.sample(&mut r));
        p.skip = p.skip.map(|_| u.sample(&mut r));
        p
    }

    fn random_x(l: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut r = rng::stream(seed, "x");
        let u = Uniform::new(-1.0, 1.0).unwrap();
        Tensor::from_fn(&[l, d], |_| u.sample(&mut r))
    }

    #[test]
    fn discretize_closed_form() {
        let a = Tensor::<f64>::from_f64(&[1, 1], &[-1.0]).unwrap();
        let b = Tensor::from_f64(&[1, 1], &[1.0]).unwrap();
        let (ab, bb) = discretize(&a, &b, &Tensor::from_f64(&[1], &[2f64.ln()]).unwrap()).unwrap();
        assert!((ab.item().unwrap() - 0.5).abs() < 1e-15);
        assert!((bb.item().unwrap() - 0.693147).abs() < 1e-6);
        let (ab, bb) = discretize(&a, &b, &Tensor::from_f64(&[1], &[1e-12]).unwrap()).unwrap();
        assert!((ab.item().unwrap() - 1.0).abs() < 1e-11);
        assert!(bb.item().unwrap().abs() < 1e-11);
        assert!(discretize(&a, &b, &Tensor::from_f64(&[1], &[0.0]).unwrap()).is_err());
    }

    #[test]
    fn discretized_decay_in_unit_interval() {
        let p = random_params(4, 4, 3);
        let delta = Tensor::from_f64(&[4], &[0.01, 0.3, 1.0, 5.0]).unwrap();
        let (ab, _) = discretize(&p.a(), &p.b_weight, &delta).unwrap();
        assert!(ab.values().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_readout_gives_zero_output() {
        let mut p = random_params(3, 2, 1);
        p.c_weight = Tensor::zeros(&[3, 2]);
        p.skip = Tensor::zeros(&[3]);
        let y = selective_scan_seq(&random_x(5, 3, 2), &p).unwrap();
        assert!(y.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn chunk_one_is_bitwise_sequential() {
        let p = random_params(3, 4, 5);
        let x = random_x(16, 3, 6);
        let s = selective_scan_seq(&x, &p).unwrap();
        let q = selective_scan_parallel(&x, &p, 1).unwrap();
        assert_eq!(s, q);
    }

    #[test]
    fn remainder_chunk() {
        let p = random_params(2, 3, 7);
        let x = random_x(7, 2, 8);
        let s = selective_scan_seq(&x, &p).unwrap();
        let q = selective_scan_parallel(&x, &p, 3).unwrap();
        assert!(s.max_abs_diff(&q).unwrap() < 1e-14);
    }

    #[test]
    fn errors() {
        let p = random_params(2, 2, 1);
        assert!(selective_scan_seq(&Tensor::<f64>::zeros(&[0, 2]), &p).is_err());
        assert!(selective_scan_seq(&Tensor::<f64>::zeros(&[3, 3]), &p).is_err());
        assert!(selective_scan_parallel(&Tensor::<f64>::zeros(&[3, 2]), &p, 0).is_err());
    }
}
