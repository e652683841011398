//! Bilinear resampling with half-pixel centres: output pixel `o` samples the
//! input at `(o + 0.5)·in/out − 0.5`, clamped to `[0, in − 1]`.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Float, Tensor};

/// For each output index: `(lower, upper, weight_of_upper)`.
pub fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

fn resize_planes<T: Float>(data: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let (ty, tx) = (bilinear_taps(h, oh), bilinear_taps(w, ow));
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in data.chunks(h * w).take(planes) {
        for &(y0, y1, fy) in &ty {
            let fy = T::of(fy);
            for &(x0, x1, fx) in &tx {
                let fx = T::of(fx);
                let top = p[y0 * w + x0] * (T::one() - fx) + p[y0 * w + x1] * fx;
                let bot = p[y1 * w + x0] * (T::one() - fx) + p[y1 * w + x1] * fx;
                out.push(top * (T::one() - fy) + bot * fy);
            }
        }
    }
    out
}

/// Non-differentiable resize of an `N×C×H×W` (or `C×H×W`) tensor.
pub fn resize_bilinear_tensor<T: Float>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() < 3 || oh == 0 || ow == 0 {
        return Err(Error::invalid("resize_bilinear", format!("cannot resize {s:?} to {oh}×{ow}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if (h, w) == (oh, ow) {
        return Ok(x.clone());
    }
    let planes = x.numel() / (h * w);
    let mut shape = s.to_vec();
    let r = shape.len();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Ok(Tensor::from_parts(shape, resize_planes(x.data(), planes, h, w, oh, ow)))
}

impl<T: Float> Graph<T> {
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let value = resize_bilinear_tensor(self.value(x), oh, ow)?;
        let s = self.shape(x).to_vec();
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        Ok(self.custom(value, &[x], move |ctx| {
            let g = ctx.grad.data();
            let (ty, tx) = (bilinear_taps(h, oh), bilinear_taps(w, ow));
            let mut d = vec![T::zero(); ctx.inputs[0].numel()];
            for (dp, gp) in d.chunks_mut(h * w).zip(g.chunks(oh * ow)) {
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    let fy = T::of(fy);
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let fx = T::of(fx);
                        let gv = gp[oy * ow + ox];
                        let (top, bot) = (gv * (T::one() - fy), gv * fy);
                        dp[y0 * w + x0] += top * (T::one() - fx);
                        dp[y0 * w + x1] += top * fx;
                        dp[y1 * w + x0] += bot * (T::one() - fx);
                        dp[y1 * w + x1] += bot * fx;
                    }
                }
            }
            vec![Some(Tensor::from_parts(ctx.inputs[0].shape().to_vec(), d))]
        }))
    }
}
