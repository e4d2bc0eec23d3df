//! Taped primitive operations: forward via `ndtensor::kernels`, paired with
//! their adjoints.

use super::{Backward, Graph, Var};
use crate::error::{shape_err, Result};
use crate::ndtensor::kernels as k;
use crate::ndtensor::Tensor;
use crate::scalar::{self, Scalar};

type Grads<T> = Result<Vec<Option<Tensor<T>>>>;

macro_rules! op_name {
    ($name:literal) => {
        fn name(&self) -> &'static str {
            $name
        }
    };
}

struct Add;
impl<T: Scalar> Backward<T> for Add {
    op_name!("add");
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Grads<T> {
        Ok(vec![Some(g.clone()), Some(g.clone())])
    }
}

struct Sub;
impl<T: Scalar> Backward<T> for Sub {
    op_name!("sub");
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Grads<T> {
        Ok(vec![Some(g.clone()), Some(g.map(|v| -v))])
    }
}

struct Mul;
impl<T: Scalar> Backward<T> for Mul {
    op_name!("mul");
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, want: &[bool]) -> Grads<T> {
        let ga = if want[0] { Some(g.zip_map(x[1], |a, b| a * b)?) } else { None };
        let gb = if want[1] { Some(g.zip_map(x[0], |a, b| a * b)?) } else { None };
        Ok(vec![ga, gb])
    }
}

struct Scale<T>(T);
impl<T: Scalar> Backward<T> for Scale<T> {
    op_name!("scale");
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Grads<T> {
        let c = self.0;
        Ok(vec![Some(g.map(|v| v * c))])
    }
}

struct AddBias;
impl<T: Scalar> Backward<T> for AddBias {
    op_name!("add_bias");
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Grads<T> {
        let c = x[1].numel();
        let mut gb = vec![T::zero(); c];
        for row in g.values().chunks_exact(c) {
            for (a, &v) in gb.iter_mut().zip(row) {
                *a = *a + v;
            }
        }
        Ok(vec![Some(g.clone()), Some(Tensor::new(&[c], gb)?)])
    }
}

struct Sum;
impl<T: Scalar> Backward<T> for Sum {
    op_name!("sum");
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Grads<T> {
        Ok(vec![Some(Tensor::full(x[0].shape(), g.item()?))])
    }
}

struct Silu;
impl<T: Scalar> Backward<T> for Silu {
    op_name!("silu");
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Grads<T> {
        Ok(vec![Some(g.zip_map(x[0], |gv, xv| gv * scalar::silu_grad(xv))?)])
    }
}

struct Softplus;
impl<T: Scalar> Backward<T> for Softplus {
    op_name!("softplus");
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Grads<T> {
        Ok(vec![Some(g.zip_map(x[0], |gv, xv| gv * scalar::sigmoid(xv))?)])
    }
}

struct Linear;
impl<T: Scalar> Backward<T> for Linear {
    op_name!("linear");
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Grads<T> {
        let (gx, gw, gb) = k::linear_backward(x[0], x[1], g)?;
        let mut out = vec![Some(gx), Some(gw)];
        if x.len() == 3 {
            out.push(Some(gb));
        }
        Ok(out)
    }
}

struct LayerNorm<T>(T);
impl<T: Scalar> Backward<T> for LayerNorm<T> {
    op_name!("layer_norm");
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Grads<T> {
        let (gx, gg, gb) = k::layer_norm_backward(x[0], x[1], self.0, g)?;
        Ok(vec![Some(gx), Some(gg), Some(gb)])
    }
}

struct Conv {
    stride: Vec<usize>,
    dilation: Vec<usize>,
    padding: Vec<usize>,
    depthwise: bool,
}
impl<T: Scalar> Backward<T> for Conv {
    fn name(&self) -> &'static str {
        if self.depthwise {
            "depthwise_conv"
        } else {
            "grouped_conv"
        }
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Grads<T> {
        let kernel = if self.depthwise {
            k::depthwise_as_grouped(x[0], x[1])?
        } else {
            x[1].clone()
        };
        let (gx, gk) =
            k::grouped_conv_backward(x[0], &kernel, &self.stride, &self.dilation, &self.padding, g)?;
        Ok(vec![Some(gx), Some(gk.reshape(x[1].shape())?)])
    }
}

struct Unfold(usize);
impl<T: Scalar> Backward<T> for Unfold {
    op_name!("unfold");
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Grads<T> {
        Ok(vec![Some(k::unfold_backward(x[0].shape(), self.0, g)?)])
    }
}

struct MaxPool(Vec<usize>);
impl<T: Scalar> Backward<T> for MaxPool {
    op_name!("max_pool");
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Grads<T> {
        let mut gx = vec![T::zero(); x[0].numel()];
        for (&src, gv) in self.0.iter().zip(g.values().iter()) {
            gx[src] = gx[src] + *gv;
        }
        Ok(vec![Some(Tensor::new(x[0].shape(), gx)?)])
    }
}

struct Upsample(Vec<usize>);
impl<T: Scalar> Backward<T> for Upsample {
    op_name!("upsample_nearest");
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Grads<T> {
        Ok(vec![Some(k::upsample_nearest_backward(x[0].shape(), &self.0, g)?)])
    }
}

struct Concat(usize);
impl<T: Scalar> Backward<T> for Concat {
    op_name!("concat");
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Grads<T> {
        let mut start = 0;
        x.iter()
            .map(|p| {
                let n = p.shape()[self.0];
                let part = g.slice(self.0, start, start + n)?.contiguous();
                start += n;
                Ok(Some(part))
            })
            .collect()
    }
}

struct Narrow {
    axis: usize,
    start: usize,
}
impl<T: Scalar> Backward<T> for Narrow {
    op_name!("narrow");
    fn backward(&self, x: &[&Tensor<T>], out: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Grads<T> {
        let n = x[0].shape()[self.axis];
        let mut widths = vec![(0, 0); x[0].ndim()];
        widths[self.axis] = (self.start, n - self.start - out.shape()[self.axis]);
        Ok(vec![Some(g.pad(&widths, T::zero())?)])
    }
}

struct Reshape;
impl<T: Scalar> Backward<T> for Reshape {
    op_name!("reshape");
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Grads<T> {
        Ok(vec![Some(g.reshape(x[0].shape())?)])
    }
}

struct Permute(Vec<usize>);
impl<T: Scalar> Backward<T> for Permute {
    op_name!("permute");
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Grads<T> {
        let mut inv = vec![0; self.0.len()];
        for (i, &a) in self.0.iter().enumerate() {
            inv[a] = i;
        }
        Ok(vec![Some(g.permute(&inv)?.contiguous())])
    }
}

struct GatherRows(Vec<usize>);
impl<T: Scalar> Backward<T> for GatherRows {
    op_name!("gather_rows");
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Grads<T> {
        Ok(vec![Some(k::gather_rows_backward(x[0].shape(), &self.0, g)?)])
    }
}

impl<T: Scalar> Graph<T> {
    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.apply(Add, &[a, b], v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.apply(Sub, &[a, b], v)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.apply(Mul, &[a, b], v)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.apply(Scale(c), &[a], v)
    }

    /// Adds a `[C]` vector along the trailing axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.value(x).channels();
        if self.shape(b) != [c] {
            return Err(shape_err!("bias {:?} for {:?}", self.shape(b), self.shape(x)));
        }
        let bv = self.value(b).to_vec();
        let mut data = self.value(x).to_vec();
        for row in data.chunks_exact_mut(c) {
            for (v, &bj) in row.iter_mut().zip(&bv) {
                *v = *v + bj;
            }
        }
        let v = Tensor::new(self.shape(x), data)?;
        self.apply(AddBias, &[x, b], v)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        self.apply(Sum, &[x], v)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = T::from_usize_lossy(self.value(x).numel().max(1));
        let s = self.sum(x)?;
        self.scale(s, T::one() / n)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let v = k::silu(self.value(x));
        self.apply(Silu, &[x], v)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let v = k::softplus(self.value(x));
        self.apply(Softplus, &[x], v)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let v = k::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        match b {
            Some(b) => self.apply(Linear, &[x, w, b], v),
            None => self.apply(Linear, &[x, w], v),
        }
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let v = k::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        self.apply(LayerNorm(eps), &[x, gain, bias], v)
    }

    pub fn depthwise_conv(
        &mut self,
        x: Var,
        kernel: Var,
        stride: &[usize],
        dilation: &[usize],
        padding: &[usize],
    ) -> Result<Var> {
        let v = k::depthwise_conv(self.value(x), self.value(kernel), stride, dilation, padding)?;
        let op = Conv {
            stride: stride.to_vec(),
            dilation: dilation.to_vec(),
            padding: padding.to_vec(),
            depthwise: true,
        };
        self.apply(op, &[x, kernel], v)
    }

    pub fn grouped_conv(
        &mut self,
        x: Var,
        kernel: Var,
        stride: &[usize],
        dilation: &[usize],
        padding: &[usize],
    ) -> Result<Var> {
        let v = k::grouped_conv(self.value(x), self.value(kernel), stride, dilation, padding)?;
        let op = Conv {
            stride: stride.to_vec(),
            dilation: dilation.to_vec(),
            padding: padding.to_vec(),
            depthwise: false,
        };
        self.apply(op, &[x, kernel], v)
    }

    pub fn unfold(&mut self, x: Var, window: usize) -> Result<Var> {
        let v = k::unfold(self.value(x), window)?;
        self.apply(Unfold(window), &[x], v)
    }

    pub fn max_pool(&mut self, x: Var, factor: &[usize]) -> Result<Var> {
        let (v, arg) = k::max_pool(self.value(x), factor)?;
        self.apply(MaxPool(arg), &[x], v)
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: &[usize]) -> Result<Var> {
        let v = k::upsample_nearest(self.value(x), factor)?;
        self.apply(Upsample(factor.to_vec()), &[x], v)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&vals, axis)?;
        self.apply(Concat(axis), parts, v)
    }

    /// `start..start+len` along `axis`, materialized.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).slice(axis, start, start + len)?.contiguous();
        self.apply(Narrow { axis, start }, &[x], v)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        self.apply(Reshape, &[x], v)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(x).permute(axes)?.contiguous();
        self.apply(Permute(axes.to_vec()), &[x], v)
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let v = k::gather_rows(self.value(x), rows)?;
        self.apply(GatherRows(rows.to_vec()), &[x], v)
    }
}
