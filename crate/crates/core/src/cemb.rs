//! Condition Embedding block.
//!
//! A sub-group index is one-hot encoded and mapped to per-channel scale and
//! shift vectors
//!
//! ```text
//! γ = W2 · relu(W1 · Wγ · onehot(a))
//! β = W2 · relu(W1 · Wβ · onehot(a))
//! ```
//!
//! which modulate instance-normalized features:
//! `CIN(x | γ, β) = γ · (x − E[x]) / (√Var[x] + ε) + β`.
//! The block applies `relu(CIN(conv3x3(·) | γ_l, β_l))` twice.
//!
//! Conditions are handled per sample, so a batch may mix sub-groups freely.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{conv2d, Conv2dParams, EpsPlacement, DEFAULT_EPS};
use crate::params::{Bindings, ParamStore};
use crate::tensor::{Float, Tensor};

/// Sub-group membership `index ∈ {0, …, count − 1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SubGroupCondition {
    index: usize,
    count: usize,
}

impl SubGroupCondition {
    pub fn new(index: usize, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::invalid("condition", "sub-group count must be >= 1"));
        }
        if index >= count {
            return Err(Error::invalid(
                "condition",
                format!("sub-group index {index} out of range for {count} sub-groups"),
            ));
        }
        Ok(Self { index, count })
    }

    pub fn index(self) -> usize {
        self.index
    }

    pub fn count(self) -> usize {
        self.count
    }
}

pub fn one_hot<T: Float>(cond: SubGroupCondition) -> Tensor<T> {
    Tensor::from_fn([cond.count], |i| if i == cond.index { T::one() } else { T::zero() })
}

/// Whether the two CIN layers draw (γ, β) from separate embedding encoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionSharing {
    #[default]
    Independent,
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CembConfig {
    pub eps: f64,
    pub eps_placement: EpsPlacement,
    pub sharing: ConditionSharing,
}

impl Default for CembConfig {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            eps_placement: EpsPlacement::OutsideSqrt,
            sharing: ConditionSharing::Independent,
        }
    }
}

impl CembConfig {
    pub fn encoder_count(&self) -> usize {
        match self.sharing {
            ConditionSharing::Independent => 2,
            ConditionSharing::Shared => 1,
        }
    }
}

/// Embedding encoder weights: `Wγ, Wβ ∈ R^{C×m}`, `W1, W2 ∈ R^{C×C}`.
#[derive(Debug, Clone, Copy)]
pub struct ConditionEncoderParams {
    pub w_gamma: Var,
    pub w_beta: Var,
    pub w1: Var,
    pub w2: Var,
}

#[derive(Debug, Clone)]
pub struct CembParams {
    pub encoders: Vec<ConditionEncoderParams>,
    pub conv1: Conv2dParams,
    pub conv2: Conv2dParams,
    pub eps: f64,
    pub placement: EpsPlacement,
}

impl CembParams {
    /// Encoder feeding CIN layer `layer` (0 or 1).
    pub fn encoder(&self, layer: usize) -> &ConditionEncoderParams {
        &self.encoders[layer.min(self.encoders.len() - 1)]
    }

    /// Looks up the block's parameters under `prefix` (e.g. `"cemb"`).
    pub fn from_bindings(b: &Bindings, prefix: &str, cfg: &CembConfig) -> Result<Self> {
        let encoders = (0..cfg.encoder_count())
            .map(|l| {
                Ok(ConditionEncoderParams {
                    w_gamma: b.var(&format!("{prefix}.embed{l}.w_gamma"))?,
                    w_beta: b.var(&format!("{prefix}.embed{l}.w_beta"))?,
                    w1: b.var(&format!("{prefix}.embed{l}.w1"))?,
                    w2: b.var(&format!("{prefix}.embed{l}.w2"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let conv = |l: usize| -> Result<Conv2dParams> {
            Ok(Conv2dParams {
                weight: b.var(&format!("{prefix}.conv{l}.weight"))?,
                bias: None,
                stride: 1,
                padding: 1,
            })
        };
        Ok(Self {
            encoders,
            conv1: conv(0)?,
            conv2: conv(1)?,
            eps: cfg.eps,
            placement: cfg.eps_placement,
        })
    }
}

/// Adds freshly initialized block parameters to `store`. Every tensor is
/// drawn from `U(−1/√fan_in, 1/√fan_in)`. The convolutions carry no bias: a
/// per-channel constant ahead of instance normalization cancels exactly.
pub fn init_params<T: Float, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    channels: usize,
    subgroups: usize,
    cfg: &CembConfig,
    rng: &mut R,
) -> Result<()> {
    let u = |shape: Vec<usize>, fan_in: usize, rng: &mut R| {
        let a = 1.0 / (fan_in as f64).sqrt();
        Tensor::uniform(shape, -a, a, rng)
    };
    for l in 0..cfg.encoder_count() {
        store.insert(format!("{prefix}.embed{l}.w_gamma"), u(vec![channels, subgroups], subgroups, rng))?;
        store.insert(format!("{prefix}.embed{l}.w_beta"), u(vec![channels, subgroups], subgroups, rng))?;
        store.insert(format!("{prefix}.embed{l}.w1"), u(vec![channels, channels], channels, rng))?;
        store.insert(format!("{prefix}.embed{l}.w2"), u(vec![channels, channels], channels, rng))?;
    }
    for l in 0..2 {
        store.insert(format!("{prefix}.conv{l}.weight"), u(vec![channels, channels, 3, 3], channels * 9, rng))?;
    }
    Ok(())
}

/// `m × N` matrix whose column `i` is the one-hot code of sample `i`.
pub fn one_hot_columns<T: Float>(conds: &[SubGroupCondition]) -> Result<Tensor<T>> {
    let m = conds
        .first()
        .ok_or_else(|| Error::invalid("condition_encode", "empty condition batch"))?
        .count;
    if conds.iter().any(|c| c.count != m) {
        return Err(Error::invalid("condition_encode", "conditions disagree on sub-group count"));
    }
    let n = conds.len();
    Ok(Tensor::from_fn([m, n], |i| {
        let (row, col) = (i / n, i % n);
        if conds[col].index == row {
            T::one()
        } else {
            T::zero()
        }
    }))
}

/// Per-sample `(γ, β)`, each `N × C`.
pub fn condition_encode<T: Float>(
    g: &mut Graph<T>,
    conds: &[SubGroupCondition],
    p: &ConditionEncoderParams,
) -> Result<(Var, Var)> {
    let codes = one_hot_columns::<T>(conds)?;
    let (c, m) = (g.shape(p.w_gamma)[0], g.shape(p.w_gamma)[1]);
    if codes.shape()[0] != m || g.shape(p.w_beta) != [c, m] {
        return Err(Error::shape("condition_encode", g.shape(p.w_gamma), codes.shape()));
    }
    let codes = g.constant(codes);
    let mut path = |table: Var| -> Result<Var> {
        let e = g.matmul(table, codes)?;
        let h = g.matmul(p.w1, e)?;
        let h = g.relu(h);
        let out = g.matmul(p.w2, h)?;
        g.permute(out, &[1, 0])
    };
    let gamma = path(p.w_gamma)?;
    let beta = path(p.w_beta)?;
    Ok((gamma, beta))
}

/// Conditional instance normalization. `gamma`/`beta` are `N×C` (per sample)
/// or `C` (shared across the batch).
pub fn cin<T: Float>(
    g: &mut Graph<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
    placement: EpsPlacement,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::invalid("cin", format!("expected N×C×H×W, got {s:?}")));
    }
    let affine_shape = |g: &Graph<T>, v: Var| -> Result<Vec<usize>> {
        match g.shape(v) {
            [c] if *c == s[1] => Ok(vec![1, s[1], 1, 1]),
            [n, c] if *n == s[0] && *c == s[1] => Ok(vec![s[0], s[1], 1, 1]),
            other => Err(Error::shape("cin", &s, other)),
        }
    };
    let gs = affine_shape(g, gamma)?;
    let bs = affine_shape(g, beta)?;
    let (normed, _, _) = g.instance_norm(x, eps, placement)?;
    let gamma = g.reshape(gamma, &gs)?;
    let beta = g.reshape(beta, &bs)?;
    let scaled = g.mul(normed, gamma)?;
    g.add(scaled, beta)
}

/// `relu(CIN(conv(relu(CIN(conv(x) | γ1, β1))) | γ2, β2))`; shape-preserving.
pub fn cemb_forward<T: Float>(
    g: &mut Graph<T>,
    x: Var,
    conds: &[SubGroupCondition],
    p: &CembParams,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[0] != conds.len() {
        return Err(Error::invalid(
            "cemb_forward",
            format!("input {s:?} with {} conditions", conds.len()),
        ));
    }
    let mut h = x;
    for (layer, conv) in [p.conv1, p.conv2].iter().enumerate() {
        let (gamma, beta) = condition_encode(g, conds, p.encoder(layer))?;
        h = conv2d(g, h, conv)?;
        h = cin(g, h, gamma, beta, p.eps, p.placement)?;
        h = g.relu(h);
    }
    Ok(h)
}

/// `max |cemb(x | a) − cemb(x | b)|` with the block's weights taken from `store`.
pub fn cemb_sensitivity<T: Float>(
    x: &Tensor<T>,
    store: &ParamStore<T>,
    prefix: &str,
    cfg: &CembConfig,
    cond_a: SubGroupCondition,
    cond_b: SubGroupCondition,
) -> Result<f64> {
    if cond_a.count != cond_b.count {
        return Err(Error::invalid("cemb_sensitivity", "conditions disagree on sub-group count"));
    }
    let n = x.shape()[0];
    let run = |cond: SubGroupCondition| -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = store.bind(&mut g, false);
        let p = CembParams::from_bindings(&b, prefix, cfg)?;
        let xv = g.constant(x.clone());
        let out = cemb_forward(&mut g, xv, &vec![cond; n], &p)?;
        Ok(g.value(out).clone())
    };
    Ok(run(cond_a)?.max_abs_diff(&run(cond_b)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradcheck_many;
    use crate::rng::stream;

    fn cond(i: usize, m: usize) -> SubGroupCondition {
        SubGroupCondition::new(i, m).unwrap()
    }

    #[test]
    fn one_hot_examples() {
        assert_eq!(one_hot::<f32>(cond(0, 3)).data(), &[1.0, 0.0, 0.0]);
        assert_eq!(one_hot::<f32>(cond(2, 3)).data(), &[0.0, 0.0, 1.0]);
        let e6 = one_hot::<f64>(cond(6, 7));
        assert_eq!(e6.data()[6], 1.0);
        assert_eq!(e6.sum(), 1.0);
        assert!(SubGroupCondition::new(3, 3).is_err());
        assert!(SubGroupCondition::new(0, 0).is_err());
    }

    fn store_with_block(seed: u64, c: usize, m: usize, cfg: &CembConfig) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        init_params(&mut s, "cemb", c, m, cfg, &mut stream(seed, "init", 0)).unwrap();
        s
    }

    #[test]
    fn identity_fcn_passes_nonnegative_column() {
        let (c, m) = (3, 2);
        let mut g = Graph::<f64>::new();
        let v = [0.5, 0.0, 2.0];
        let table = Tensor::from_fn([c, m], |i| if i % m == 1 { v[i / m] } else { -7.0 });
        let p = ConditionEncoderParams {
            w_gamma: g.constant(table.clone()),
            w_beta: g.constant(table),
            w1: g.constant(Tensor::identity(c)),
            w2: g.constant(Tensor::identity(c)),
        };
        let (gamma, beta) = condition_encode(&mut g, &[cond(1, m)], &p).unwrap();
        assert_eq!(g.value(gamma).data(), &v);
        assert_eq!(g.value(beta).data(), &v);
    }

    #[test]
    fn encode_matches_explicit_chain() {
        let (c, m) = (4, 3);
        let cfg = CembConfig::default();
        let s = store_with_block(3, c, m, &cfg);
        let mut g = Graph::<f64>::new();
        let b = s.bind(&mut g, false);
        let p = CembParams::from_bindings(&b, "cemb", &cfg).unwrap();
        let conds = [cond(2, m), cond(0, m)];
        let (gamma, _) = condition_encode(&mut g, &conds, p.encoder(0)).unwrap();
        let wg = s.value("cemb.embed0.w_gamma").unwrap();
        let w1 = s.value("cemb.embed0.w1").unwrap();
        let w2 = s.value("cemb.embed0.w2").unwrap();
        for (n, cd) in conds.iter().enumerate() {
            let col: Vec<f64> = (0..c).map(|r| wg.at(&[r, cd.index()])).collect();
            let h: Vec<f64> = (0..c)
                .map(|r| (0..c).map(|k| w1.at(&[r, k]) * col[k]).sum::<f64>().max(0.0))
                .collect();
            for r in 0..c {
                let want: f64 = (0..c).map(|k| w2.at(&[r, k]) * h[k]).sum();
                assert!((g.value(gamma).at(&[n, r]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cin_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full([2, 3, 4, 4], 1.7));
        let gamma = g.constant(Tensor::from_f64([3], &[2.0, -1.0, 0.3]).unwrap());
        let beta = g.constant(Tensor::from_f64([3], &[0.5, -0.25, 4.0]).unwrap());
        let y = cin(&mut g, x, gamma, beta, 1e-5, EpsPlacement::OutsideSqrt).unwrap();
        let v = g.value(y);
        for n in 0..2 {
            for (ch, b) in [0.5, -0.25, 4.0].iter().enumerate() {
                for i in 0..16 {
                    assert_eq!(v.at(&[n, ch, i / 4, i % 4]), *b);
                }
            }
        }

        let x = g.constant(Tensor::from_f64([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let one = g.constant(Tensor::ones([1]));
        let zero = g.constant(Tensor::zeros([1]));
        let plain = cin(&mut g, x, one, zero, 1e-5, EpsPlacement::OutsideSqrt).unwrap();
        let (direct, _, _) = g.instance_norm(x, 1e-5, EpsPlacement::OutsideSqrt).unwrap();
        assert_eq!(g.value(plain), g.value(direct));

        let two = g.constant(Tensor::full([1], 2.0));
        let y = cin(&mut g, x, two, one, 1e-5, EpsPlacement::OutsideSqrt).unwrap();
        let d = 1.25f64.sqrt() + 1e-5;
        for (got, xv) in g.value(y).data().iter().zip([1.0, 2.0, 3.0, 4.0]) {
            assert!((got - (2.0 * (xv - 2.5) / d + 1.0)).abs() < 1e-14);
        }
    }

    /// Composes conv → CIN → relu twice using separately computed pieces.
    #[test]
    fn forward_matches_composition() {
        let (c, m) = (2, 3);
        let cfg = CembConfig::default();
        let s = store_with_block(5, c, m, &cfg);
        let xt = Tensor::<f64>::uniform([1, c, 3, 3], -1.0, 1.0, &mut stream(5, "x", 0));
        let cd = cond(1, m);

        let mut g = Graph::new();
        let b = s.bind(&mut g, false);
        let p = CembParams::from_bindings(&b, "cemb", &cfg).unwrap();
        let x = g.constant(xt.clone());
        let out = cemb_forward(&mut g, x, &[cd], &p).unwrap();

        let mut h = xt;
        for layer in 0..2 {
            let wg = s.value(&format!("cemb.embed{layer}.w_gamma")).unwrap();
            let wb = s.value(&format!("cemb.embed{layer}.w_beta")).unwrap();
            let w1 = s.value(&format!("cemb.embed{layer}.w1")).unwrap();
            let w2 = s.value(&format!("cemb.embed{layer}.w2")).unwrap();
            let k = s.value(&format!("cemb.conv{layer}.weight")).unwrap();
            let chain = |tab: &Tensor<f64>| -> Vec<f64> {
                let a: Vec<f64> = (0..c).map(|r| tab.at(&[r, cd.index()])).collect();
                let hdn: Vec<f64> = (0..c).map(|r| (0..c).map(|q| w1.at(&[r, q]) * a[q]).sum::<f64>().max(0.0)).collect();
                (0..c).map(|r| (0..c).map(|q| w2.at(&[r, q]) * hdn[q]).sum()).collect()
            };
            let (gm, bt) = (chain(wg), chain(wb));
            let mut conv = Tensor::zeros([1, c, 3, 3]);
            for co in 0..c {
                for y in 0..3 {
                    for xx in 0..3 {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (iy, ix) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                    if (0..3).contains(&iy) && (0..3).contains(&ix) {
                                        acc += k.at(&[co, ci, ky, kx]) * h.at(&[0, ci, iy as usize, ix as usize]);
                                    }
                                }
                            }
                        }
                        let o = conv.offset(&[0, co, y, xx]);
                        conv.data_mut()[o] = acc;
                    }
                }
            }
            let mut next = conv.clone();
            for co in 0..c {
                let plane = &conv.data()[co * 9..(co + 1) * 9];
                let mean = plane.iter().sum::<f64>() / 9.0;
                let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
                for i in 0..9 {
                    let v = gm[co] * (plane[i] - mean) / (var.sqrt() + cfg.eps) + bt[co];
                    next.data_mut()[co * 9 + i] = v.max(0.0);
                }
            }
            h = next;
        }
        assert!(g.value(out).max_abs_diff(&h) < 1e-12);
    }

    #[test]
    fn shape_preserved_and_nonnegative() {
        let (c, m) = (4, 3);
        let cfg = CembConfig::default();
        let s = store_with_block(6, c, m, &cfg);
        let mut r = stream(6, "x", 0);
        for (n, h, w) in [(1, 3, 3), (3, 5, 4), (2, 8, 8)] {
            let mut g = Graph::<f64>::new();
            let b = s.bind(&mut g, false);
            let p = CembParams::from_bindings(&b, "cemb", &cfg).unwrap();
            let x = g.constant(Tensor::uniform([n, c, h, w], -2.0, 2.0, &mut r));
            let conds: Vec<_> = (0..n).map(|i| cond(i % m, m)).collect();
            let out = cemb_forward(&mut g, x, &conds, &p).unwrap();
            assert_eq!(g.shape(out), &[n, c, h, w]);
            assert!(g.value(out).data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn batch_mixing_matches_single_runs() {
        let (c, m) = (3, 3);
        let cfg = CembConfig::default();
        let s = store_with_block(7, c, m, &cfg);
        let xt = Tensor::<f64>::uniform([3, c, 4, 4], -1.0, 1.0, &mut stream(7, "x", 0));
        let conds = [cond(2, m), cond(0, m), cond(1, m)];
        let mut g = Graph::new();
        let b = s.bind(&mut g, false);
        let p = CembParams::from_bindings(&b, "cemb", &cfg).unwrap();
        let x = g.constant(xt.clone());
        let batch = cemb_forward(&mut g, x, &conds, &p).unwrap();
        for (i, cd) in conds.iter().enumerate() {
            let xi = g.constant(xt.index0(i).reshape([1, c, 4, 4]).unwrap());
            let single = cemb_forward(&mut g, xi, &[*cd], &p).unwrap();
            assert_eq!(g.value(single).data(), g.value(batch).index0(i).data());
        }
    }

    #[test]
    fn gradient_only_reaches_used_column() {
        let (c, m) = (3, 4);
        let cfg = CembConfig::default();
        let s = store_with_block(8, c, m, &cfg);
        let mut g = Graph::<f64>::new();
        let b = s.bind(&mut g, true);
        let p = CembParams::from_bindings(&b, "cemb", &cfg).unwrap();
        let x = g.constant(Tensor::uniform([2, c, 4, 4], -1.0, 1.0, &mut stream(8, "x", 0)));
        let out = cemb_forward(&mut g, x, &[cond(2, m), cond(2, m)], &p).unwrap();
        let loss = g.sum_all(out);
        g.backward(loss).unwrap();
        for enc in &p.encoders {
            for tab in [enc.w_gamma, enc.w_beta] {
                let grad = g.grad(tab).unwrap();
                for r in 0..c {
                    for j in 0..m {
                        if j != 2 {
                            assert_eq!(grad.at(&[r, j]), 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn sensitivity_cases() {
        let (c, m) = (8, 3);
        let cfg = CembConfig::default();
        let x = Tensor::<f64>::uniform([1, c, 4, 4], -1.0, 1.0, &mut stream(9, "x", 0));
        let s = store_with_block(9, c, m, &cfg);
        assert_eq!(cemb_sensitivity(&x, &s, "cemb", &cfg, cond(1, m), cond(1, m)).unwrap(), 0.0);

        let mut zeroed = s.clone();
        for p in zeroed.iter_mut().filter(|p| p.name.contains("w_gamma") || p.name.contains("w_beta")) {
            p.value = Tensor::zeros(p.value.shape().to_vec());
        }
        assert_eq!(cemb_sensitivity(&x, &zeroed, "cemb", &cfg, cond(0, m), cond(2, m)).unwrap(), 0.0);

        let live = (0..20u64)
            .filter(|&seed| {
                let s = store_with_block(100 + seed, c, m, &cfg);
                cemb_sensitivity(&x, &s, "cemb", &cfg, cond(0, m), cond(1, m)).unwrap() > 0.0
            })
            .count();
        assert_eq!(live, 20);
    }

    #[test]
    fn shared_encoder_uses_one_set() {
        let cfg = CembConfig { sharing: ConditionSharing::Shared, ..CembConfig::default() };
        let s = store_with_block(10, 2, 2, &cfg);
        assert!(s.get("cemb.embed1.w_gamma").is_none());
        let mut g = Graph::<f64>::new();
        let b = s.bind(&mut g, false);
        let p = CembParams::from_bindings(&b, "cemb", &cfg).unwrap();
        assert_eq!(p.encoder(0).w_gamma, p.encoder(1).w_gamma);
    }

    #[test]
    fn block_gradcheck() {
        let (c, m) = (3, 3);
        let cfg = CembConfig::default();
        let s = store_with_block(11, c, m, &cfg);
        let names: Vec<String> = s.iter().map(|p| p.name.clone()).collect();
        let mut inputs: Vec<Tensor<f64>> = s.iter().map(|p| p.value.clone()).collect();
        let mut r = stream(11, "x", 0);
        inputs.push(Tensor::uniform([2, c, 4, 4], -1.0, 1.0, &mut r));
        let wts = Tensor::<f64>::uniform([2, c, 4, 4], -1.0, 1.0, &mut r);
        let err = gradcheck_many(
            |g, v| {
                let lookup = |name: &str| v[names.iter().position(|n| n == name).unwrap()];
                let enc = |l: usize| ConditionEncoderParams {
                    w_gamma: lookup(&format!("cemb.embed{l}.w_gamma")),
                    w_beta: lookup(&format!("cemb.embed{l}.w_beta")),
                    w1: lookup(&format!("cemb.embed{l}.w1")),
                    w2: lookup(&format!("cemb.embed{l}.w2")),
                };
                let conv = |l: usize| Conv2dParams {
                    weight: lookup(&format!("cemb.conv{l}.weight")),
                    bias: None,
                    stride: 1,
                    padding: 1,
                };
                let p = CembParams {
                    encoders: vec![enc(0), enc(1)],
                    conv1: conv(0),
                    conv2: conv(1),
                    eps: cfg.eps,
                    placement: cfg.eps_placement,
                };
                let out = cemb_forward(g, v[names.len()], &[cond(0, m), cond(2, m)], &p)?;
                let w = g.constant(wts.clone());
                let z = g.mul(out, w)?;
                Ok(g.sum_all(z))
            },
            &inputs,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
