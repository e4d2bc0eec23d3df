//! Forward and adjoint kernels for the primitive operations.
//!
//! These operate on plain tensors; the autodiff layer pairs each forward
//! kernel with its adjoint. Spatial operators accept 2D (`H×W×C`) and 3D
//! (`D×H×W×C`) inputs; 2D is handled internally as depth 1.

use super::Tensor;
use crate::error::{arg_err, shape_err, Result};
use crate::scalar::{self, Scalar};

// ---------------------------------------------------------------------------
// dense products

/// `c[m×n] = a[m×k] · b[k×n]`, row-major.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in row.iter_mut().zip(brow) {
                *cj = *cj + aip * bj;
            }
        }
    }
    c
}

/// `c[k×n] = aᵀ · b` for `a[m×k]`, `b[m×n]`.
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let row = &mut c[p * n..(p + 1) * n];
            for (cj, &bj) in row.iter_mut().zip(brow) {
                *cj = *cj + aip * bj;
            }
        }
    }
    c
}

pub fn transpose2<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

fn linear_dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if w.ndim() != 2 || x.ndim() == 0 || x.channels() != w.shape()[0] {
        return Err(shape_err!(
            "linear: input {:?} against weight {:?}",
            x.shape(),
            w.shape()
        ));
    }
    let fin = w.shape()[0];
    Ok((x.numel() / fin, fin, w.shape()[1]))
}

/// `y[..., j] = Σ_i x[..., i]·w[i, j] + b[j]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (rows, fin, fout) = linear_dims(x, w)?;
    let mut y = matmul(&x.values(), &w.values(), rows, fin, fout);
    if let Some(b) = b {
        if b.shape() != [fout] {
            return Err(shape_err!("linear bias {:?}, expected [{fout}]", b.shape()));
        }
        let bv = b.values();
        for row in y.chunks_exact_mut(fout) {
            for (v, &bj) in row.iter_mut().zip(bv.iter()) {
                *v = *v + bj;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = fout;
    Tensor::new(&shape, y)
}

/// Adjoints of [`linear`]: `(gx, gw, gb)`.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (rows, fin, fout) = linear_dims(x, w)?;
    let g = gy.values();
    let wt = transpose2(&w.values(), fin, fout);
    let gx = matmul(&g, &wt, rows, fout, fin);
    let gw = matmul_tn(&x.values(), &g, rows, fin, fout);
    let mut gb = vec![T::zero(); fout];
    for row in g.chunks_exact(fout) {
        for (acc, &v) in gb.iter_mut().zip(row) {
            *acc = *acc + v;
        }
    }
    Ok((
        Tensor::new(x.shape(), gx)?,
        Tensor::new(w.shape(), gw)?,
        Tensor::new(&[fout], gb)?,
    ))
}

// ---------------------------------------------------------------------------
// elementwise and normalization

pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(scalar::silu)
}

pub fn softplus<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(scalar::softplus)
}

/// Normalizes over the trailing axis, then applies `gain`/`bias` per channel.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let c = x.channels();
    if eps <= T::zero() {
        return Err(arg_err!("layer_norm eps must be positive, got {eps}"));
    }
    if gain.shape() != [c] || bias.shape() != [c] {
        return Err(shape_err!(
            "layer_norm over {c} channels with gain {:?} bias {:?}",
            gain.shape(),
            bias.shape()
        ));
    }
    let (gv, bv) = (gain.values(), bias.values());
    let xv = x.values();
    let mut out = Vec::with_capacity(xv.len());
    for row in xv.chunks_exact(c) {
        let (mean, inv) = row_stats(row, eps);
        for ((&v, &g), &b) in row.iter().zip(gv.iter()).zip(bv.iter()) {
            out.push((v - mean) * inv * g + b);
        }
    }
    Tensor::new(x.shape(), out)
}

fn row_stats<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::from_usize_lossy(row.len());
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

/// Adjoints of [`layer_norm`]: `(gx, ggain, gbias)`.
pub fn layer_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    eps: T,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let c = x.channels();
    let n = T::from_usize_lossy(c);
    let gv = gain.values();
    let (xv, gyv) = (x.values(), gy.values());
    let mut gx = Vec::with_capacity(xv.len());
    let mut ggain = vec![T::zero(); c];
    let mut gbias = vec![T::zero(); c];
    let mut xhat = vec![T::zero(); c];
    let mut gxhat = vec![T::zero(); c];
    for (row, grow) in xv.chunks_exact(c).zip(gyv.chunks_exact(c)) {
        let (mean, inv) = row_stats(row, eps);
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for j in 0..c {
            xhat[j] = (row[j] - mean) * inv;
            gxhat[j] = grow[j] * gv[j];
            ggain[j] = ggain[j] + grow[j] * xhat[j];
            gbias[j] = gbias[j] + grow[j];
            sum_g = sum_g + gxhat[j];
            sum_gx = sum_gx + gxhat[j] * xhat[j];
        }
        let (mg, mgx) = (sum_g / n, sum_gx / n);
        for j in 0..c {
            gx.push(inv * (gxhat[j] - mg - xhat[j] * mgx));
        }
    }
    Ok((
        Tensor::new(x.shape(), gx)?,
        Tensor::new(&[c], ggain)?,
        Tensor::new(&[c], gbias)?,
    ))
}

// ---------------------------------------------------------------------------
// spatial geometry

/// Splits a channel-last feature map shape into a depth-padded spatial
/// extent and the channel count. Rank 3 is 2D, rank 4 is 3D.
pub fn split_spatial(shape: &[usize]) -> Result<([usize; 3], usize, usize)> {
    match *shape {
        [h, w, c] => Ok(([1, h, w], c, 2)),
        [d, h, w, c] => Ok(([d, h, w], c, 3)),
        _ => Err(shape_err!("expected H×W×C or D×H×W×C, got {shape:?}")),
    }
}

fn lift3(v: &[usize], fill: usize, rank: usize, what: &str) -> Result<[usize; 3]> {
    if v.len() != rank {
        return Err(arg_err!("{what} has {} entries for a {rank}D input", v.len()));
    }
    let mut out = [fill; 3];
    out[3 - rank..].copy_from_slice(v);
    Ok(out)
}

/// Resolved sliding-window geometry (depth-padded to three spatial axes).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub rank: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub dilation: [usize; 3],
    pub padding: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeometry {
    pub fn new(
        input_shape: &[usize],
        kernel: &[usize],
        stride: &[usize],
        dilation: &[usize],
        padding: &[usize],
    ) -> Result<Self> {
        let (input, _, rank) = split_spatial(input_shape)?;
        let kernel = lift3(kernel, 1, rank, "kernel")?;
        let stride = lift3(stride, 1, rank, "stride")?;
        let dilation = lift3(dilation, 1, rank, "dilation")?;
        let padding = lift3(padding, 0, rank, "padding")?;
        let mut output = [0; 3];
        for a in 0..3 {
            if stride[a] == 0 || dilation[a] == 0 || kernel[a] == 0 {
                return Err(arg_err!(
                    "kernel, stride and dilation must be positive (got {kernel:?}, {stride:?}, {dilation:?})"
                ));
            }
            let span = dilation[a] * (kernel[a] - 1) + 1;
            let padded = input[a] + 2 * padding[a];
            if padded < span {
                return Err(shape_err!(
                    "window span {span} exceeds padded extent {padded} on axis {a}"
                ));
            }
            output[a] = (padded - span) / stride[a] + 1;
        }
        Ok(Self { rank, input, kernel, stride, dilation, padding, output })
    }

    pub fn output_spatial(&self) -> Vec<usize> {
        self.output[3 - self.rank..].to_vec()
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Calls `f(out_pos, tap, in_pos)` for every in-bounds (output, tap) pair;
    /// positions are flat spatial indices.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [id, ih, iw] = self.input;
        let [od, oh, ow] = self.output;
        let [kd, kh, kw] = self.kernel;
        let mut opos = 0;
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let mut tap = 0;
                    for a in 0..kd {
                        let iz = (z * self.stride[0] + a * self.dilation[0]) as isize
                            - self.padding[0] as isize;
                        for b in 0..kh {
                            let iy = (y * self.stride[1] + b * self.dilation[1]) as isize
                                - self.padding[1] as isize;
                            for c in 0..kw {
                                let ix = (x * self.stride[2] + c * self.dilation[2]) as isize
                                    - self.padding[2] as isize;
                                if iz >= 0
                                    && iy >= 0
                                    && ix >= 0
                                    && (iz as usize) < id
                                    && (iy as usize) < ih
                                    && (ix as usize) < iw
                                {
                                    let ipos = (iz as usize * ih + iy as usize) * iw + ix as usize;
                                    f(opos, tap, ipos);
                                }
                                tap += 1;
                            }
                        }
                    }
                    opos += 1;
                }
            }
        }
    }
}

/// "Same" padding for an odd kernel at stride 1: `(k−1)·dilation/2` per side.
pub fn same_padding(kernel: &[usize], dilation: &[usize]) -> Vec<usize> {
    kernel
        .iter()
        .zip(dilation)
        .map(|(&k, &d)| (k - 1) * d / 2)
        .collect()
}

// ---------------------------------------------------------------------------
// grouped / depthwise convolution

fn grouped_dims<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    geom: &ConvGeometry,
) -> Result<(usize, usize, usize)> {
    let (_, cin, rank) = split_spatial(x.shape())?;
    let ks = kernel.shape();
    if ks.len() != rank + 2 || ks[..rank] != geom.kernel[3 - rank..] {
        return Err(shape_err!(
            "grouped conv kernel {ks:?} does not match window {:?}",
            &geom.kernel[3 - rank..]
        ));
    }
    let (group, cout) = (ks[rank], ks[rank + 1]);
    if group * cout != cin {
        return Err(shape_err!(
            "grouped conv: {cout} groups of {group} channels != {cin} input channels"
        ));
    }
    Ok((cin, group, cout))
}

/// Channel-reducing grouped convolution. `kernel` is `[*window, G, Cout]`;
/// output channel `o` reads input channels `o·G .. (o+1)·G`. `G = 1` is a
/// depthwise convolution.
pub fn grouped_conv<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: &[usize],
    dilation: &[usize],
    padding: &[usize],
) -> Result<Tensor<T>> {
    let rank = split_spatial(x.shape())?.2;
    let window = &kernel.shape()[..kernel.ndim().min(rank)];
    let geom = ConvGeometry::new(x.shape(), window, stride, dilation, padding)?;
    let (cin, group, cout) = grouped_dims(x, kernel, &geom)?;
    let (xv, kv) = (x.values(), kernel.values());
    let nout: usize = geom.output.iter().product();
    let mut out = vec![T::zero(); nout * cout];
    geom.for_each_tap(|opos, tap, ipos| {
        let orow = &mut out[opos * cout..(opos + 1) * cout];
        let irow = &xv[ipos * cin..(ipos + 1) * cin];
        let ktap = &kv[tap * cin..(tap + 1) * cin];
        if group == 1 {
            for ((o, &i), &k) in orow.iter_mut().zip(irow).zip(ktap) {
                *o = *o + i * k;
            }
        } else {
            for (o, ov) in orow.iter_mut().enumerate() {
                let mut acc = *ov;
                for g in 0..group {
                    acc = acc + irow[o * group + g] * ktap[g * cout + o];
                }
                *ov = acc;
            }
        }
    });
    let mut shape = geom.output_spatial();
    shape.push(cout);
    Tensor::new(&shape, out)
}

/// Adjoints of [`grouped_conv`]: `(gx, gkernel)`.
pub fn grouped_conv_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: &[usize],
    dilation: &[usize],
    padding: &[usize],
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let rank = split_spatial(x.shape())?.2;
    let geom = ConvGeometry::new(x.shape(), &kernel.shape()[..rank], stride, dilation, padding)?;
    let (cin, group, cout) = grouped_dims(x, kernel, &geom)?;
    let (xv, kv, gv) = (x.values(), kernel.values(), gy.values());
    let mut gx = vec![T::zero(); xv.len()];
    let mut gk = vec![T::zero(); kv.len()];
    geom.for_each_tap(|opos, tap, ipos| {
        let grow = &gv[opos * cout..(opos + 1) * cout];
        for o in 0..cout {
            let g = grow[o];
            for j in 0..group {
                let ci = o * group + j;
                let ki = tap * cin + j * cout + o;
                gx[ipos * cin + ci] = gx[ipos * cin + ci] + g * kv[ki];
                gk[ki] = gk[ki] + g * xv[ipos * cin + ci];
            }
        }
    });
    Ok((Tensor::new(x.shape(), gx)?, Tensor::new(kernel.shape(), gk)?))
}

/// Depthwise convolution: `kernel` is `[*window, C]`, one filter per channel.
pub fn depthwise_conv<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: &[usize],
    dilation: &[usize],
    padding: &[usize],
) -> Result<Tensor<T>> {
    let k = depthwise_as_grouped(x, kernel)?;
    grouped_conv(x, &k, stride, dilation, padding)
}

pub(crate) fn depthwise_as_grouped<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let c = x.channels();
    if kernel.channels() != c || kernel.ndim() != x.ndim() {
        return Err(shape_err!(
            "depthwise kernel {:?} for input {:?}: need one filter per channel",
            kernel.shape(),
            x.shape()
        ));
    }
    let mut ks = kernel.shape().to_vec();
    ks.insert(ks.len() - 1, 1);
    kernel.reshape(&ks)
}

// ---------------------------------------------------------------------------
// unfold, pooling, upsampling

/// Replicates each position's `R^d` neighbourhood (stride 1, zero border) onto
/// the channel axis, offset-major: channel `o·C + c` of position `p` holds
/// channel `c` of neighbour `p + offset(o)`, offsets in row-major window order.
pub fn unfold<T: Scalar>(x: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    let geom = unfold_geometry(x.shape(), window)?;
    let c = x.channels();
    let taps = geom.taps();
    let xv = x.values();
    let npos: usize = geom.output.iter().product();
    let mut out = vec![T::zero(); npos * taps * c];
    geom.for_each_tap(|opos, tap, ipos| {
        let dst = (opos * taps + tap) * c;
        out[dst..dst + c].copy_from_slice(&xv[ipos * c..(ipos + 1) * c]);
    });
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = taps * c;
    Tensor::new(&shape, out)
}

pub fn unfold_backward<T: Scalar>(x_shape: &[usize], window: usize, gy: &Tensor<T>) -> Result<Tensor<T>> {
    let geom = unfold_geometry(x_shape, window)?;
    let c = *x_shape.last().unwrap();
    let taps = geom.taps();
    let gv = gy.values();
    let mut gx = vec![T::zero(); x_shape.iter().product()];
    geom.for_each_tap(|opos, tap, ipos| {
        let src = (opos * taps + tap) * c;
        for j in 0..c {
            gx[ipos * c + j] = gx[ipos * c + j] + gv[src + j];
        }
    });
    Tensor::new(x_shape, gx)
}

fn unfold_geometry(shape: &[usize], window: usize) -> Result<ConvGeometry> {
    if window % 2 == 0 {
        return Err(arg_err!("unfold window must be odd, got {window}"));
    }
    let rank = split_spatial(shape)?.2;
    let w = vec![window; rank];
    let ones = vec![1; rank];
    ConvGeometry::new(shape, &w, &ones, &ones, &same_padding(&w, &ones))
}

/// Non-overlapping max pooling; returns the pooled map and, per output
/// element, the flat input index that won. Ties go to the first maximum in
/// row-major window order.
pub fn max_pool<T: Scalar>(x: &Tensor<T>, factor: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
    let (sp, c, rank) = split_spatial(x.shape())?;
    let f = lift3(factor, 1, rank, "pool factor")?;
    for a in 0..3 {
        if f[a] == 0 || sp[a] % f[a] != 0 {
            return Err(shape_err!("pool factor {factor:?} does not divide {:?}", x.shape()));
        }
    }
    let geom = ConvGeometry::new(x.shape(), factor, factor, &vec![1; rank], &vec![0; rank])?;
    let xv = x.values();
    let nout: usize = geom.output.iter().product();
    let mut best = vec![T::neg_infinity(); nout * c];
    let mut arg = vec![usize::MAX; nout * c];
    geom.for_each_tap(|opos, _, ipos| {
        for j in 0..c {
            let v = xv[ipos * c + j];
            let o = opos * c + j;
            if arg[o] == usize::MAX || v > best[o] {
                best[o] = v;
                arg[o] = ipos * c + j;
            }
        }
    });
    let mut shape = geom.output_spatial();
    shape.push(c);
    Ok((Tensor::new(&shape, best)?, arg))
}

/// Nearest-neighbour upsampling by an integer factor per spatial axis.
pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, factor: &[usize]) -> Result<Tensor<T>> {
    let (sp, c, rank) = split_spatial(x.shape())?;
    let f = lift3(factor, 1, rank, "upsample factor")?;
    let out_sp = [sp[0] * f[0], sp[1] * f[1], sp[2] * f[2]];
    let xv = x.values();
    let mut out = Vec::with_capacity(out_sp.iter().product::<usize>() * c);
    for z in 0..out_sp[0] {
        for y in 0..out_sp[1] {
            for w in 0..out_sp[2] {
                let src = ((z / f[0]) * sp[1] + y / f[1]) * sp[2] + w / f[2];
                out.extend_from_slice(&xv[src * c..(src + 1) * c]);
            }
        }
    }
    let mut shape: Vec<usize> = out_sp[3 - rank..].to_vec();
    shape.push(c);
    Tensor::new(&shape, out)
}

pub fn upsample_nearest_backward<T: Scalar>(
    x_shape: &[usize],
    factor: &[usize],
    gy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (sp, c, rank) = split_spatial(x_shape)?;
    let f = lift3(factor, 1, rank, "upsample factor")?;
    let gv = gy.values();
    let mut gx = vec![T::zero(); x_shape.iter().product()];
    let mut i = 0;
    for z in 0..sp[0] * f[0] {
        for y in 0..sp[1] * f[1] {
            for w in 0..sp[2] * f[2] {
                let dst = ((z / f[0]) * sp[1] + y / f[1]) * sp[2] + w / f[2];
                for j in 0..c {
                    gx[dst * c + j] = gx[dst * c + j] + gv[i];
                    i += 1;
                }
            }
        }
    }
    Tensor::new(x_shape, gx)
}

/// Selects rows of a `L×C` matrix (`rows` may repeat or omit indices).
pub fn gather_rows<T: Scalar>(x: &Tensor<T>, rows: &[usize]) -> Result<Tensor<T>> {
    if x.ndim() != 2 {
        return Err(shape_err!("gather_rows expects L×C, got {:?}", x.shape()));
    }
    let (l, c) = (x.shape()[0], x.shape()[1]);
    let xv = x.values();
    let mut out = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        if r >= l {
            return Err(shape_err!("row {r} out of range for {l} rows"));
        }
        out.extend_from_slice(&xv[r * c..(r + 1) * c]);
    }
    Tensor::new(&[rows.len(), c], out)
}

pub fn gather_rows_backward<T: Scalar>(x_shape: &[usize], rows: &[usize], gy: &Tensor<T>) -> Result<Tensor<T>> {
    let c = x_shape[1];
    let gv = gy.values();
    let mut gx = vec![T::zero(); x_shape.iter().product()];
    for (i, &r) in rows.iter().enumerate() {
        for j in 0..c {
            gx[r * c + j] = gx[r * c + j] + gv[i * c + j];
        }
    }
    Tensor::new(x_shape, gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(shape: &[usize]) -> Tensor<f64> {
        let mut k = 0.0;
        Tensor::from_fn(shape, |_| {
            k += 1.0;
            (k * 0.37f64).sin()
        })
    }

    #[test]
    fn identity_kernel_depthwise() {
        let x = Tensor::<f64>::new(&[1, 3, 1], vec![1., 2., 3.]).unwrap();
        let k = Tensor::<f64>::new(&[1, 1, 1], vec![1.]).unwrap();
        let y = depthwise_conv(&x, &k, &[1, 1], &[1, 1], &[0, 0]).unwrap();
        assert_eq!(y, x);
        let k3 = Tensor::<f64>::new(&[1, 3, 1], vec![0., 1., 0.]).unwrap();
        let y3 = depthwise_conv(&x, &k3, &[1, 1], &[1, 1], &[0, 1]).unwrap();
        assert_eq!(y3, x);
    }

    #[test]
    fn constant_field_strided() {
        let x = Tensor::<f64>::ones(&[4, 4, 1]);
        let k = Tensor::<f64>::ones(&[2, 2, 1]);
        let y = depthwise_conv(&x, &k, &[2, 2], &[1, 1], &[0, 0]).unwrap();
        assert_eq!(y.shape(), &[2, 2, 1]);
        assert!(y.values().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn output_extent_formula() {
        let g = ConvGeometry::new(&[9, 7, 2], &[3, 3], &[2, 3], &[2, 1], &[1, 0]).unwrap();
        // floor((9 + 2 - 4 - 1)/2) + 1 = 4, floor((7 - 2 - 1)/3) + 1 = 2
        assert_eq!(g.output_spatial(), vec![4, 2]);
        assert!(ConvGeometry::new(&[4, 4, 1], &[3, 3], &[0, 1], &[1, 1], &[0, 0]).is_err());
        assert!(ConvGeometry::new(&[4, 4, 1], &[3, 3], &[1, 1], &[0, 1], &[0, 0]).is_err());
    }

    #[test]
    fn same_padding_preserves_extent() {
        let x = seq(&[5, 6, 3]);
        for d in 1..3 {
            let k = seq(&[3, 3, 3]);
            let p = same_padding(&[3, 3], &[d, d]);
            let y = depthwise_conv(&x, &k, &[1, 1], &[d, d], &p).unwrap();
            assert_eq!(y.shape(), x.shape());
        }
    }

    #[test]
    fn channel_mismatch_is_error() {
        let x = seq(&[4, 4, 3]);
        let k = seq(&[3, 3, 2]);
        assert!(depthwise_conv(&x, &k, &[1, 1], &[1, 1], &[1, 1]).is_err());
    }

    #[test]
    fn linear_by_hand() {
        let x = Tensor::<f64>::new(&[2], vec![1., 1.]).unwrap();
        let w = Tensor::<f64>::new(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::<f64>::zeros(&[2]);
        assert_eq!(linear(&x, &w, Some(&b)).unwrap().to_vec(), vec![4., 6.]);
        let id = Tensor::<f64>::new(&[2, 2], vec![1., 0., 0., 1.]).unwrap();
        let x = Tensor::<f64>::new(&[2], vec![1., 2.]).unwrap();
        assert_eq!(linear(&x, &id, None).unwrap().to_vec(), vec![1., 2.]);
        assert!(linear(&x, &seq(&[3, 2]), None).is_err());
    }

    #[test]
    fn layer_norm_moments() {
        let x = Tensor::<f64>::new(&[3], vec![2., 4., 6.]).unwrap();
        let y = layer_norm(&x, &Tensor::ones(&[3]), &Tensor::zeros(&[3]), 1e-5).unwrap();
        let v = y.to_vec();
        let mean = v.iter().sum::<f64>() / 3.0;
        let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-6);
        // biased variance of [2,4,6] is 8/3; eps shrinks the normalized variance by 8/3/(8/3+eps)
        assert!((var - 1.0).abs() < 1e-5);
        assert!(layer_norm(&x, &Tensor::ones(&[3]), &Tensor::zeros(&[3]), 0.0).is_err());
    }

    #[test]
    fn unfold_center_block_is_input() {
        let x = seq(&[4, 5, 2]);
        let u = unfold(&x, 3).unwrap();
        assert_eq!(u.shape(), &[4, 5, 18]);
        for i in 0..4 {
            for j in 0..5 {
                for c in 0..2 {
                    assert_eq!(u.at(&[i, j, 4 * 2 + c]), x.at(&[i, j, c]));
                }
            }
        }
        // top-left neighbour of (0,0) lies outside the grid
        assert_eq!(u.at(&[0, 0, 0]), 0.0);
        assert!(unfold(&x, 2).is_err());
    }

    #[test]
    fn max_pool_first_max_wins() {
        let x = Tensor::<f64>::new(&[2, 2, 1], vec![1., 3., 3., 0.]).unwrap();
        let (y, arg) = max_pool(&x, &[2, 2]).unwrap();
        assert_eq!(y.to_vec(), vec![3.0]);
        assert_eq!(arg, vec![1]);
        assert!(max_pool(&seq(&[3, 4, 1]), &[2, 2]).is_err());
    }

    #[test]
    fn upsample_then_adjoint_sums_blocks() {
        let x = seq(&[2, 3, 2]);
        let y = upsample_nearest(&x, &[2, 2]).unwrap();
        assert_eq!(y.shape(), &[4, 6, 2]);
        assert_eq!(y.at(&[3, 5, 1]), x.at(&[1, 2, 1]));
        let g = upsample_nearest_backward(x.shape(), &[2, 2], &Tensor::<f64>::ones(y.shape())).unwrap();
        assert!(g.values().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn grouped_conv_sums_its_group() {
        // 1×1 kernel of ones over groups of 2 channels sums channel pairs
        let x = seq(&[3, 3, 4]);
        let k = Tensor::<f64>::ones(&[1, 1, 2, 2]);
        let y = grouped_conv(&x, &k, &[1, 1], &[1, 1], &[0, 0]).unwrap();
        assert_eq!(y.shape(), &[3, 3, 2]);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(y.at(&[i, j, 0]), x.at(&[i, j, 0]) + x.at(&[i, j, 1]));
                assert_eq!(y.at(&[i, j, 1]), x.at(&[i, j, 2]) + x.at(&[i, j, 3]));
            }
        }
    }
}
