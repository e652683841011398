//! Central-difference gradient oracle.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::{Float, Tensor};

/// Relative error floor in the denominator `max(|analytic|, |numeric|, FLOOR)`.
pub const REL_FLOOR: f64 = 1e-8;

/// Compares the backward pass of a scalar function of one tensor with central
/// differences `(f(x+eps·e_i) − f(x−eps·e_i)) / 2eps`. Returns the largest
/// relative error over all elements; a non-finite comparison yields `+inf`.
pub fn gradcheck<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Float,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    gradcheck_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), eps)
}

/// Multi-input form of [`gradcheck`]: every input is differentiated and perturbed.
pub fn gradcheck_many<T, F>(f: F, inputs: &[Tensor<T>], eps: f64) -> Result<f64>
where
    T: Float,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(&f, inputs)?;
    let eval = |vals: &[Tensor<T>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item().f64())
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = T::of(orig.f64() + eps);
            let plus = eval(&work)?;
            work[k].data_mut()[i] = T::of(orig.f64() - eps);
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i].f64();
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if !err.is_finite() {
                return Ok(f64::INFINITY);
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Gradients from one backward pass; inputs that are not reached get zeros.
pub fn analytic_grads<T, F>(f: &F, inputs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>>
where
    T: Float,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn exact_for_linear_function() {
        let x = Tensor::<f64>::uniform([3, 4], -1.0, 1.0, &mut stream(1, "gc", 0));
        let err = gradcheck(|g, x| Ok(g.sum_all(x)), &x, 1e-6).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn quadratic_matches() {
        let x = Tensor::<f64>::from_f64([2], &[1.0, 2.0]).unwrap();
        let err = gradcheck(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum_all(sq))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn detects_corrupted_backward() {
        let x = Tensor::<f64>::uniform([5], 0.5, 1.5, &mut stream(2, "gc", 0));
        let err = gradcheck(
            |g, x| {
                let v = g.value(x).map(|a| a * a);
                // deliberately wrong: derivative of a² reported as a
                let y = g.custom(v, &[x], |ctx| vec![Some(ctx.inputs[0].map(|a| a))]);
                Ok(g.sum_all(y))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err > 0.1, "{err}");
    }
}
