use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Float, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Where the stabilizing epsilon enters the instance-norm denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsPlacement {
    /// `√Var + ε`
    #[default]
    OutsideSqrt,
    /// `√(Var + ε)`
    InsideSqrt,
}

impl EpsPlacement {
    fn denom(self, var: f64, eps: f64) -> f64 {
        match self {
            EpsPlacement::OutsideSqrt => var.sqrt() + eps,
            EpsPlacement::InsideSqrt => (var + eps).sqrt(),
        }
    }

    /// d(denominator)/d(var); zero-variance planes contribute nothing because
    /// their centred values are all zero.
    fn ddenom(self, var: f64, eps: f64) -> f64 {
        match self {
            EpsPlacement::OutsideSqrt if var > 0.0 => 0.5 / var.sqrt(),
            EpsPlacement::OutsideSqrt => 0.0,
            EpsPlacement::InsideSqrt => 0.5 / (var + eps).sqrt(),
        }
    }
}

/// Per-(sample, channel) mean and population variance over the spatial axes
/// of an `N×C×H×W` tensor. Both results are `N×C`.
pub fn instance_stats<T: Float>(x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::invalid("instance_norm", format!("expected N×C×H×W, got {s:?}")));
    }
    let plane = s[2] * s[3];
    let inv = T::one() / T::of(plane as f64);
    let mut mean = Vec::with_capacity(s[0] * s[1]);
    let mut var = Vec::with_capacity(s[0] * s[1]);
    for chunk in x.data().chunks(plane) {
        // Shifted by the first element so a constant plane has mean equal to
        // that constant and variance exactly zero.
        let x0 = chunk[0];
        let m = x0 + chunk.iter().map(|&a| a - x0).sum::<T>() * inv;
        let v = chunk.iter().map(|&a| (a - m) * (a - m)).sum::<T>() * inv;
        mean.push(m);
        var.push(v);
    }
    Ok((
        Tensor::from_parts(vec![s[0], s[1]], mean),
        Tensor::from_parts(vec![s[0], s[1]], var),
    ))
}

impl<T: Float> Graph<T> {
    /// `(x − E[x]) / denom(Var[x])` per (sample, channel), statistics over H×W.
    /// Also returns the mean and variance used.
    pub fn instance_norm(&mut self, x: Var, eps: f64, placement: EpsPlacement) -> Result<(Var, Tensor<T>, Tensor<T>)> {
        if !(eps > 0.0) {
            return Err(Error::invalid("instance_norm", format!("eps must be > 0, got {eps}")));
        }
        let (mean, var) = instance_stats(self.value(x))?;
        let s = self.shape(x).to_vec();
        let plane = s[2] * s[3];
        let denom: Vec<T> = var.data().iter().map(|v| T::of(placement.denom(v.f64(), eps))).collect();
        let xv = self.value(x).data();
        let out: Vec<T> = xv
            .chunks(plane)
            .enumerate()
            .flat_map(|(i, c)| {
                let (m, d) = (mean.data()[i], denom[i]);
                c.iter().map(move |&a| (a - m) / d)
            })
            .collect();
        let value = Tensor::from_parts(s, out);
        let (saved_mean, saved_var) = (mean.clone(), var.clone());
        let y = self.custom(value, &[x], move |ctx| {
            // With u = x − μ and d = f(var):
            //   dx_j = (g_j − mean(g))/d − f'(var)·(2/n)·u_j/d² · Σ_i g_i u_i
            let (xv, g) = (ctx.inputs[0].data(), ctx.grad.data());
            let n = T::of(plane as f64);
            let two = T::of(2.0);
            let mut dx = Vec::with_capacity(xv.len());
            for (i, (xc, gc)) in xv.chunks(plane).zip(g.chunks(plane)).enumerate() {
                let m = saved_mean.data()[i];
                let v = saved_var.data()[i].f64();
                let d = T::of(placement.denom(v, eps));
                let fp = T::of(placement.ddenom(v, eps));
                let gmean = gc.iter().copied().sum::<T>() / n;
                let gu: T = xc.iter().zip(gc).map(|(&a, &b)| b * (a - m)).sum();
                let coef = fp * two / n * gu / (d * d);
                dx.extend(xc.iter().zip(gc).map(|(&a, &b)| (b - gmean) / d - coef * (a - m)));
            }
            vec![Some(Tensor::from_parts(ctx.inputs[0].shape().to_vec(), dx))]
        });
        Ok((y, mean, var))
    }
}

/// Layer normalization over the last axis with affine `scale`/`shift`
/// (`√(Var + ε)` convention).
pub fn layer_norm<T: Float>(g: &mut Graph<T>, x: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
    let last = g.shape(x).len() - 1;
    let mean = g.mean(x, &[last], true)?;
    let centred = g.sub(x, mean)?;
    let var = g.var_population(x, &[last], true)?;
    let var = g.add_scalar(var, eps);
    let sd = g.sqrt(var);
    let normed = g.div(centred, sd)?;
    let scaled = g.mul(normed, scale)?;
    g.add(scaled, shift)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradcheck_many;
    use crate::rng::stream;

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full([1, 2, 3, 3], 4.5));
        let (y, _, var) = g.instance_norm(x, DEFAULT_EPS, EpsPlacement::OutsideSqrt).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        assert!(var.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_computed_channel() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let eps = 1e-5;
        let (y, mean, var) = g.instance_norm(x, eps, EpsPlacement::OutsideSqrt).unwrap();
        assert_eq!(mean.data(), &[2.5]);
        assert_eq!(var.data(), &[1.25]);
        let d = 1.25f64.sqrt() + eps;
        for (got, x) in g.value(y).data().iter().zip([1.0, 2.0, 3.0, 4.0]) {
            assert!((got - (x - 2.5) / d).abs() < 1e-15);
        }
    }

    #[test]
    fn output_statistics() {
        let xt = Tensor::<f64>::uniform([3, 4, 5, 5], -2.0, 3.0, &mut stream(3, "in", 0));
        let mut g = Graph::new();
        let x = g.constant(xt);
        let eps = DEFAULT_EPS;
        let (y, _, var) = g.instance_norm(x, eps, EpsPlacement::OutsideSqrt).unwrap();
        let (m2, v2) = instance_stats(g.value(y)).unwrap();
        for i in 0..12 {
            assert!(m2.data()[i].abs() < 1e-5);
            let sd = var.data()[i].sqrt();
            assert!((v2.data()[i].sqrt() - sd / (sd + eps)).abs() < 1e-4);
        }
    }

    #[test]
    fn rejects_non_positive_eps() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones([1, 1, 2, 2]));
        assert!(g.instance_norm(x, 0.0, EpsPlacement::OutsideSqrt).is_err());
    }

    #[test]
    fn gradcheck_both_placements() {
        let mut r = stream(4, "ingc", 0);
        let x = Tensor::<f64>::uniform([2, 3, 3, 4], -1.0, 1.0, &mut r);
        let w = Tensor::<f64>::uniform([2, 3, 3, 4], -1.0, 1.0, &mut r);
        for placement in [EpsPlacement::OutsideSqrt, EpsPlacement::InsideSqrt] {
            let err = gradcheck_many(
                |g, v| {
                    let (y, _, _) = g.instance_norm(v[0], 1e-3, placement)?;
                    let c = g.constant(w.clone());
                    let z = g.mul(y, c)?;
                    Ok(g.sum_all(z))
                },
                std::slice::from_ref(&x),
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-6, "{placement:?}: {err}");
        }
    }

    #[test]
    fn layer_norm_gradcheck() {
        let mut r = stream(5, "ln", 0);
        let x = Tensor::<f64>::uniform([2, 3, 4], -1.0, 1.0, &mut r);
        let s = Tensor::<f64>::uniform([4], 0.5, 1.5, &mut r);
        let b = Tensor::<f64>::uniform([4], -0.5, 0.5, &mut r);
        let w = Tensor::<f64>::uniform([2, 3, 4], -1.0, 1.0, &mut r);
        let err = gradcheck_many(
            |g, v| {
                let y = layer_norm(g, v[0], v[1], v[2], 1e-5)?;
                let c = g.constant(w.clone());
                let z = g.mul(y, c)?;
                Ok(g.sum_all(z))
            },
            &[x, s, b],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
