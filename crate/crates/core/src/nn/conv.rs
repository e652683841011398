//! 2-d convolution (cross-correlation, no kernel flip) and its adjoint.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Float, Tensor};

/// `kernel: [C_out × C_in × kH × kW]`, `bias: [C_out]`.
#[derive(Debug, Clone, Copy)]
pub struct Conv2dParams {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
}

/// `kernel: [C_in × C_out × kH × kW]`, `bias: [C_out]`.
#[derive(Debug, Clone, Copy)]
pub struct ConvTranspose2dParams {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
}

pub fn conv2d<T: Float>(g: &mut Graph<T>, x: Var, p: &Conv2dParams) -> Result<Var> {
    g.conv2d(x, p.weight, p.bias, p.stride, p.padding)
}

pub fn conv_transpose2d<T: Float>(g: &mut Graph<T>, x: Var, p: &ConvTranspose2dParams) -> Result<Var> {
    g.conv_transpose2d(x, p.weight, p.bias, p.stride, p.padding)
}

fn check_bias<T: Float>(g: &Graph<T>, op: &'static str, bias: Option<Var>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if g.shape(b) != [channels] {
            return Err(Error::shape(op, &[channels], g.shape(b)));
        }
    }
    Ok(())
}

fn add_bias<T: Float>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias.iter().cycle()) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad<T: Float>(g: &[T], channels: usize, plane: usize) -> Tensor<T> {
    let mut gb = vec![T::zero(); channels];
    for (i, chunk) in g.chunks(plane).enumerate() {
        gb[i % channels] += chunk.iter().copied().sum::<T>();
    }
    Tensor::from_parts(vec![channels], gb)
}

impl<T: Float> Graph<T> {
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        let (n, cin, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        check_bias(self, "conv2d", bias, cout)?;
        let geom = ConvGeom::new(cin, h, w, kh, kw, stride, pad).ok_or_else(|| {
            Error::invalid("conv2d", format!("empty output for input {sx:?}, kernel {sw:?}, stride {stride}, pad {pad}"))
        })?;
        let (krows, plane) = (geom.rows(), geom.cols());
        let in_plane = cin * h * w;
        let xv = self.value(x).data();
        let wv = self.value(weight).data();
        let mut cols = vec![T::zero(); krows * plane];
        let mut out = vec![T::zero(); n * cout * plane];
        for b in 0..n {
            kernels::im2col(&geom, &xv[b * in_plane..(b + 1) * in_plane], &mut cols);
            kernels::gemm_acc(cout, krows, plane, wv, &cols, &mut out[b * cout * plane..(b + 1) * cout * plane]);
        }
        if let Some(bv) = bias {
            add_bias(&mut out, self.value(bv).data(), plane);
        }
        let value = Tensor::from_parts(vec![n, cout, geom.out_h, geom.out_w], out);
        let parents: Vec<Var> = [x, weight].into_iter().chain(bias).collect();
        Ok(self.custom(value, &parents, move |ctx| {
            let (xv, wv, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
            let mut gx = ctx.needs(0).then(|| vec![T::zero(); xv.len()]);
            let mut gw = ctx.needs(1).then(|| vec![T::zero(); wv.len()]);
            let wt = gx.as_ref().map(|_| kernels::transpose(cout, krows, wv));
            let mut cols = vec![T::zero(); krows * plane];
            for b in 0..n {
                let gb = &g[b * cout * plane..(b + 1) * cout * plane];
                if let Some(gw) = gw.as_mut() {
                    kernels::im2col(&geom, &xv[b * in_plane..(b + 1) * in_plane], &mut cols);
                    let colst = kernels::transpose(krows, plane, &cols);
                    kernels::gemm_acc(cout, plane, krows, gb, &colst, gw);
                }
                if let (Some(gx), Some(wt)) = (gx.as_mut(), wt.as_ref()) {
                    let dcols = kernels::matmul(krows, cout, plane, wt, gb);
                    kernels::col2im(&geom, &dcols, &mut gx[b * in_plane..(b + 1) * in_plane]);
                }
            }
            let mut grads = vec![
                gx.map(|d| Tensor::from_parts(ctx.inputs[0].shape().to_vec(), d)),
                gw.map(|d| Tensor::from_parts(ctx.inputs[1].shape().to_vec(), d)),
            ];
            if ctx.inputs.len() == 3 {
                grads.push(ctx.needs(2).then(|| bias_grad(g, cout, plane)));
            }
            grads
        }))
    }

    /// Transposed convolution: the input-gradient map of [`Graph::conv2d`] with
    /// the same kernel. Output extent is `(in − 1)·stride − 2·pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] {
            return Err(Error::shape("conv_transpose2d", &sx, &sw));
        }
        if stride == 0 {
            return Err(Error::invalid("conv_transpose2d", "stride must be >= 1"));
        }
        let (n, cin, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[1], sw[2], sw[3]);
        check_bias(self, "conv_transpose2d", bias, cout)?;
        let oh = ((h - 1) * stride + kh).checked_sub(2 * pad).filter(|&v| v > 0);
        let ow = ((w - 1) * stride + kw).checked_sub(2 * pad).filter(|&v| v > 0);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::invalid("conv_transpose2d", format!("empty output for input {sx:?}, kernel {sw:?}")));
        };
        // Sweep geometry of the forward convolution this op is the adjoint of.
        let geom = ConvGeom::new(cout, oh, ow, kh, kw, stride, pad)
            .filter(|g| g.out_h == h && g.out_w == w)
            .ok_or_else(|| Error::invalid("conv_transpose2d", "inconsistent geometry"))?;
        let (krows, plane) = (geom.rows(), geom.cols());
        let out_plane = cout * oh * ow;
        let xv = self.value(x).data();
        let wv = self.value(weight).data();
        let mut out = vec![T::zero(); n * out_plane];
        for b in 0..n {
            let cols = kernels::matmul_tn(cin, krows, plane, wv, &xv[b * cin * plane..(b + 1) * cin * plane]);
            kernels::col2im(&geom, &cols, &mut out[b * out_plane..(b + 1) * out_plane]);
        }
        if let Some(bv) = bias {
            add_bias(&mut out, self.value(bv).data(), oh * ow);
        }
        let value = Tensor::from_parts(vec![n, cout, oh, ow], out);
        let parents: Vec<Var> = [x, weight].into_iter().chain(bias).collect();
        Ok(self.custom(value, &parents, move |ctx| {
            let (xv, wv, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
            let mut gx = ctx.needs(0).then(|| Vec::with_capacity(xv.len()));
            let mut gw = ctx.needs(1).then(|| vec![T::zero(); wv.len()]);
            let mut dcols = vec![T::zero(); krows * plane];
            for b in 0..n {
                kernels::im2col(&geom, &g[b * out_plane..(b + 1) * out_plane], &mut dcols);
                if let Some(gx) = gx.as_mut() {
                    gx.extend(kernels::matmul(cin, krows, plane, wv, &dcols));
                }
                if let Some(gw) = gw.as_mut() {
                    let dct = kernels::transpose(krows, plane, &dcols);
                    kernels::gemm_acc(cin, plane, krows, &xv[b * cin * plane..(b + 1) * cin * plane], &dct, gw);
                }
            }
            let mut grads = vec![
                gx.map(|d| Tensor::from_parts(ctx.inputs[0].shape().to_vec(), d)),
                gw.map(|d| Tensor::from_parts(ctx.inputs[1].shape().to_vec(), d)),
            ];
            if ctx.inputs.len() == 3 {
                grads.push(ctx.needs(2).then(|| bias_grad(g, cout, oh * ow)));
            }
            grads
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradcheck_many;
    use crate::rng::stream;

    /// Direct six-loop cross-correlation.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
        let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros([n, cout, oh, ow]);
        for bi in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += w.at(&[co, ci, ky, kx]) * x.at(&[bi, ci, iy as usize, ix as usize]);
                                    }
                                }
                            }
                        }
                        let o = out.offset(&[bi, co, oy, ox]);
                        out.data_mut()[o] = acc;
                    }
                }
            }
        }
        out
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut g = Graph::<f64>::new();
        let xt = Tensor::uniform([2, 1, 4, 5], -1.0, 1.0, &mut stream(0, "t", 0));
        let x = g.constant(xt.clone());
        let w = g.constant(Tensor::ones([1, 1, 1, 1]));
        let b = g.constant(Tensor::zeros([1]));
        let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(g.value(y), &xt);
    }

    #[test]
    fn box_sum_with_padding() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones([1, 1, 3, 3]));
        let w = g.constant(Tensor::ones([1, 1, 3, 3]));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let v = g.value(y);
        assert_eq!(v.at(&[0, 0, 1, 1]), 9.0);
        assert_eq!(v.at(&[0, 0, 0, 0]), 4.0);
        assert_eq!(v.at(&[0, 0, 0, 1]), 6.0);
    }

    #[test]
    fn matches_naive_loops() {
        for (seed, stride, pad) in [(1, 1, 1), (2, 2, 0), (3, 2, 1), (4, 1, 0)] {
            let mut r = stream(seed, "conv", 0);
            let xt = Tensor::<f64>::uniform([2, 3, 7, 6], -1.0, 1.0, &mut r);
            let wt = Tensor::<f64>::uniform([4, 3, 3, 3], -1.0, 1.0, &mut r);
            let bt = Tensor::<f64>::uniform([4], -1.0, 1.0, &mut r);
            let mut g = Graph::new();
            let (x, w, b) = (g.constant(xt.clone()), g.constant(wt.clone()), g.constant(bt.clone()));
            let y = g.conv2d(x, w, Some(b), stride, pad).unwrap();
            let expect = naive_conv(&xt, &wt, bt.data(), stride, pad);
            assert_eq!(g.shape(y), expect.shape());
            assert!(g.value(y).max_abs_diff(&expect) < 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_is_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones([1, 2, 3, 3]));
        let w = g.constant(Tensor::ones([1, 3, 3, 3]));
        assert!(g.conv2d(x, w, None, 1, 1).is_err());
    }

    #[test]
    fn transpose_is_adjoint() {
        for (seed, stride, pad, k, h) in [(1, 1, 1, 3, 6), (2, 2, 0, 2, 8), (3, 2, 1, 4, 8), (4, 3, 0, 3, 9)] {
            let mut r = stream(seed, "adj", 0);
            let kt = Tensor::<f64>::uniform([3, 2, k, k], -1.0, 1.0, &mut r);
            let xt = Tensor::<f64>::uniform([2, 2, h, h], -1.0, 1.0, &mut r);
            let mut g = Graph::new();
            let (x, kv) = (g.constant(xt.clone()), g.constant(kt.clone()));
            let cx = g.conv2d(x, kv, None, stride, pad).unwrap();
            let yt = Tensor::<f64>::uniform(g.shape(cx).to_vec(), -1.0, 1.0, &mut r);
            let y = g.constant(yt.clone());
            let ty = g.conv_transpose2d(y, kv, None, stride, pad).unwrap();
            assert_eq!(g.shape(ty), xt.shape());
            let lhs = dot(g.value(cx), &yt);
            let rhs = dot(&xt, g.value(ty));
            assert!((lhs - rhs).abs() <= 1e-4 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn stride_two_transpose_of_single_pixel() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones([1, 1, 1, 1]));
        let w = g.constant(Tensor::ones([1, 1, 2, 2]));
        let y = g.conv_transpose2d(x, w, None, 2, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
        assert!(g.value(y).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn gradients_pass_gradcheck() {
        let mut r = stream(9, "convgc", 0);
        let x = Tensor::<f64>::uniform([2, 2, 5, 5], -1.0, 1.0, &mut r);
        let w = Tensor::<f64>::uniform([3, 2, 3, 3], -1.0, 1.0, &mut r);
        let b = Tensor::<f64>::uniform([3], -1.0, 1.0, &mut r);
        let wts = Tensor::<f64>::uniform([2, 3, 3, 3], -1.0, 1.0, &mut r);
        let err = gradcheck_many(
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
                let c = g.constant(wts.clone());
                let z = g.mul(y, c)?;
                Ok(g.sum_all(z))
            },
            &[x.clone(), w, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "conv2d {err}");

        let wt = Tensor::<f64>::uniform([2, 3, 2, 2], -1.0, 1.0, &mut r);
        let bt = Tensor::<f64>::uniform([3], -1.0, 1.0, &mut r);
        let wts = Tensor::<f64>::uniform([2, 3, 10, 10], -1.0, 1.0, &mut r);
        let err = gradcheck_many(
            |g, v| {
                let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 0)?;
                let c = g.constant(wts.clone());
                let z = g.mul(y, c)?;
                Ok(g.sum_all(z))
            },
            &[x, wt, bt],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "conv_transpose2d {err}");
    }
}
