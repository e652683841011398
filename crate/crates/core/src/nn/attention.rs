//! Pre-norm transformer block: `x + Wo·MHA(LN(x))`, then `x + MLP(LN(x))`.

use super::{layer_norm, LinearParams};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Float;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct AttentionBlockParams {
    pub heads: usize,
    pub norm1_scale: Var,
    pub norm1_shift: Var,
    pub query: LinearParams,
    /// A key bias shifts every score of a query equally and cancels in the
    /// softmax, so blocks are built without one.
    pub key: LinearParams,
    pub value: LinearParams,
    pub out: LinearParams,
    pub norm2_scale: Var,
    pub norm2_shift: Var,
    pub mlp_in: LinearParams,
    pub mlp_out: LinearParams,
}

/// Splits `[N×T×D]` into `[N·H × T × D/H]`.
fn split_heads<T: Float>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (n, t, d) = (s[0], s[1], s[2]);
    let r = g.reshape(x, &[n, t, heads, d / heads])?;
    let p = g.permute(r, &[0, 2, 1, 3])?;
    g.reshape(p, &[n * heads, t, d / heads])
}

fn merge_heads<T: Float>(g: &mut Graph<T>, x: Var, n: usize, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (t, dh) = (s[1], s[2]);
    let r = g.reshape(x, &[n, heads, t, dh])?;
    let p = g.permute(r, &[0, 2, 1, 3])?;
    g.reshape(p, &[n, t, heads * dh])
}

/// Scaled dot-product attention of `[N×T×D]` queries, keys and values over
/// `heads` heads. Each query's weights over the `T` keys sum to 1.
pub fn attend<T: Float>(g: &mut Graph<T>, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let s = g.shape(q).to_vec();
    if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
        return Err(Error::invalid(
            "attention",
            format!("embedding dim of {s:?} not divisible by {heads} heads"),
        ));
    }
    let n = s[0];
    let dh = s[2] / heads;
    let (qh, kh, vh) = (split_heads(g, q, heads)?, split_heads(g, k, heads)?, split_heads(g, v, heads)?);
    let scores = g.bmm(qh, kh, true)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let weights = g.softmax_last(scores);
    let mixed = g.bmm(weights, vh, false)?;
    merge_heads(g, mixed, n, heads)
}

pub fn attention_block<T: Float>(g: &mut Graph<T>, x: Var, p: &AttentionBlockParams) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || p.heads == 0 || s[2] % p.heads != 0 {
        return Err(Error::invalid(
            "attention_block",
            format!("input {s:?} incompatible with {} heads", p.heads),
        ));
    }
    let h = layer_norm(g, x, p.norm1_scale, p.norm1_shift, LN_EPS)?;
    let q = super::linear(g, h, &p.query)?;
    let k = super::linear(g, h, &p.key)?;
    let v = super::linear(g, h, &p.value)?;
    let a = attend(g, q, k, v, p.heads)?;
    let a = super::linear(g, a, &p.out)?;
    let x = g.add(x, a)?;
    let h = layer_norm(g, x, p.norm2_scale, p.norm2_shift, LN_EPS)?;
    let m = super::linear(g, h, &p.mlp_in)?;
    let m = g.relu(m);
    let m = super::linear(g, m, &p.mlp_out)?;
    g.add(x, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradcheck_many;
    use crate::rng::stream;
    use crate::tensor::Tensor;

    #[test]
    fn single_token_returns_values() {
        let mut r = stream(0, "att", 0);
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::uniform([2, 1, 4], -1.0, 1.0, &mut r));
        let k = g.constant(Tensor::uniform([2, 1, 4], -1.0, 1.0, &mut r));
        let vt = Tensor::uniform([2, 1, 4], -1.0, 1.0, &mut r);
        let v = g.constant(vt.clone());
        let out = g_attend(&mut g, q, k, v, 2);
        assert!(g.value(out).max_abs_diff(&vt) < 1e-15);
    }

    fn g_attend(g: &mut Graph<f64>, q: Var, k: Var, v: Var, heads: usize) -> Var {
        attend(g, q, k, v, heads).unwrap()
    }

    #[test]
    fn uniform_scores_average_values() {
        let mut r = stream(1, "att", 0);
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::zeros([1, 3, 4]));
        let k = g.constant(Tensor::uniform([1, 3, 4], -1.0, 1.0, &mut r));
        let vt = Tensor::uniform([1, 3, 4], -1.0, 1.0, &mut r);
        let v = g.constant(vt.clone());
        let out = g_attend(&mut g, q, k, v, 1);
        for d in 0..4 {
            let mean = (0..3).map(|t| vt.at(&[0, t, d])).sum::<f64>() / 3.0;
            for t in 0..3 {
                assert!((g.value(out).at(&[0, t, d]) - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn head_divisibility_checked() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::zeros([1, 3, 4]));
        assert!(attend(&mut g, q, q, q, 3).is_err());
    }

    #[test]
    fn block_gradcheck_tiny() {
        let mut r = stream(2, "attgc", 0);
        let (t, d, hidden) = (3, 4, 8);
        let mut inputs = vec![Tensor::<f64>::uniform([1, t, d], -1.0, 1.0, &mut r)];
        let shapes: [&[usize]; 15] = [
            &[d], &[d], // norm1
            &[d, d], &[d], &[d, d], &[d, d], &[d], &[d, d], &[d], // q k v o
            &[d], &[d], // norm2
            &[hidden, d], &[hidden], &[d, hidden], &[d], // mlp
        ];
        for s in shapes {
            inputs.push(Tensor::uniform(s.to_vec(), -1.0, 1.0, &mut r));
        }
        let wts = Tensor::<f64>::uniform([1, t, d], -1.0, 1.0, &mut r);
        let err = gradcheck_many(
            |g, v| {
                let lin = |w: usize| LinearParams { weight: v[w], bias: Some(v[w + 1]) };
                let p = AttentionBlockParams {
                    heads: 2,
                    norm1_scale: v[1],
                    norm1_shift: v[2],
                    query: lin(3),
                    key: LinearParams { weight: v[5], bias: None },
                    value: lin(6),
                    out: lin(8),
                    norm2_scale: v[10],
                    norm2_shift: v[11],
                    mlp_in: lin(12),
                    mlp_out: lin(14),
                };
                let y = attention_block(g, v[0], &p)?;
                let c = g.constant(wts.clone());
                let z = g.mul(y, c)?;
                Ok(g.sum_all(z))
            },
            &inputs,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
