//! The full gradient-check battery: every differentiable layer, the condition
//! block, the loss and a tiny end-to-end model.
//!
//! Analytic gradients come from a backward pass in the checked precision.
//! The central differences are always taken in 64-bit at the same point, so
//! a 32-bit check measures the 32-bit backward pass rather than the noise of
//! 32-bit differencing.

use std::sync::OnceLock;
use std::time::Instant;

use crate::cemb::{cemb_forward, cin, condition_encode, CembConfig, CembParams, ConditionEncoderParams, ConditionSharing, SubGroupCondition};
use crate::error::Result;
use crate::gradcheck::{analytic_grads, REL_FLOOR};
use crate::graph::{Graph, Var};
use crate::model::{BBoxPrompt, ModelBundle, ModelConfig, Net};
use crate::nn::{attention_block, conv2d, conv_transpose2d, layer_norm, AttentionBlockParams, Conv2dParams, ConvTranspose2dParams, EpsPlacement, LinearParams};
use crate::params::Bindings;
use crate::rng::stream;
use crate::tensor::{DType, Float, Tensor};
use crate::train::{dice_ce_loss, LossConfig};

/// Step of the central difference.
pub const FD_STEP: f64 = 1e-6;

pub fn threshold(dtype: DType) -> f64 {
    match dtype {
        DType::F64 => 1e-5,
        DType::F32 => 1e-3,
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub dtype: DType,
    pub max_rel_err: f64,
    pub threshold: f64,
    pub passed: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Check {
    Linear,
    Matmul,
    BatchedMatmul,
    Elementwise,
    Softmax,
    Reductions,
    Conv2d,
    Conv2dStrided,
    ConvTranspose2d,
    InstanceNorm,
    InstanceNormInsideSqrt,
    LayerNorm,
    Attention,
    Patchify,
    Resize,
    BceWithLogits,
    DiceCeLoss,
    ConditionEncoder,
    Cin,
    Cemb,
    CembShared,
    EndToEnd,
    /// Deliberately wrong backward rule; must fail. Not part of [`Check::ALL`].
    CorruptedFixture,
}

impl Check {
    pub const ALL: [Check; 22] = [
        Check::Linear,
        Check::Matmul,
        Check::BatchedMatmul,
        Check::Elementwise,
        Check::Softmax,
        Check::Reductions,
        Check::Conv2d,
        Check::Conv2dStrided,
        Check::ConvTranspose2d,
        Check::InstanceNorm,
        Check::InstanceNormInsideSqrt,
        Check::LayerNorm,
        Check::Attention,
        Check::Patchify,
        Check::Resize,
        Check::BceWithLogits,
        Check::DiceCeLoss,
        Check::ConditionEncoder,
        Check::Cin,
        Check::Cemb,
        Check::CembShared,
        Check::EndToEnd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Check::Linear => "linear",
            Check::Matmul => "matmul",
            Check::BatchedMatmul => "bmm",
            Check::Elementwise => "elementwise",
            Check::Softmax => "softmax",
            Check::Reductions => "reductions",
            Check::Conv2d => "conv2d",
            Check::Conv2dStrided => "conv2d_stride2",
            Check::ConvTranspose2d => "conv_transpose2d",
            Check::InstanceNorm => "instance_norm",
            Check::InstanceNormInsideSqrt => "instance_norm_inside_sqrt",
            Check::LayerNorm => "layer_norm",
            Check::Attention => "attention_block",
            Check::Patchify => "patchify",
            Check::Resize => "resize_bilinear",
            Check::BceWithLogits => "bce_with_logits",
            Check::DiceCeLoss => "dice_ce_loss",
            Check::ConditionEncoder => "condition_encoder",
            Check::Cin => "cin",
            Check::Cemb => "cemb_block",
            Check::CembShared => "cemb_block_shared",
            Check::EndToEnd => "end_to_end_tiny",
            Check::CorruptedFixture => "corrupted_fixture",
        }
    }

    fn seed(self) -> u64 {
        Check::ALL.iter().position(|&c| c == self).unwrap_or(99) as u64
    }

    /// Input tensors, in the order `build` expects them.
    pub fn inputs(self) -> Vec<Tensor<f64>> {
        let mut r = stream(self.seed(), "gradcheck.inputs", 0);
        let mut u = |shape: &[usize], lo: f64, hi: f64| Tensor::<f64>::uniform(shape.to_vec(), lo, hi, &mut r);
        match self {
            Check::Linear => vec![u(&[3, 4], -1.0, 1.0), u(&[5, 4], -1.0, 1.0), u(&[5], -1.0, 1.0)],
            Check::Matmul => vec![u(&[3, 4], -1.0, 1.0), u(&[4, 2], -1.0, 1.0)],
            Check::BatchedMatmul => vec![u(&[2, 3, 4], -1.0, 1.0), u(&[2, 5, 4], -1.0, 1.0), u(&[2, 3, 2], -1.0, 1.0)],
            Check::Elementwise => vec![away_from_zero(u(&[6], -1.0, 1.0)), u(&[6], 0.5, 2.0), u(&[6], -1.0, 1.0)],
            Check::Softmax => vec![u(&[3, 5], -2.0, 2.0)],
            Check::Reductions => vec![u(&[2, 3, 4], -1.0, 1.0)],
            Check::Conv2d => vec![u(&[2, 2, 5, 5], -1.0, 1.0), u(&[3, 2, 3, 3], -1.0, 1.0), u(&[3], -1.0, 1.0)],
            Check::Conv2dStrided => vec![u(&[1, 2, 6, 6], -1.0, 1.0), u(&[2, 2, 3, 3], -1.0, 1.0), u(&[2], -1.0, 1.0)],
            Check::ConvTranspose2d => vec![u(&[2, 3, 3, 3], -1.0, 1.0), u(&[3, 2, 2, 2], -1.0, 1.0), u(&[2], -1.0, 1.0)],
            Check::InstanceNorm | Check::InstanceNormInsideSqrt => vec![u(&[2, 3, 4, 4], -1.0, 1.0)],
            Check::LayerNorm => vec![u(&[3, 6], -1.0, 1.0), u(&[6], 0.5, 1.5), u(&[6], -0.5, 0.5)],
            Check::Attention => {
                let d = 4;
                let mut v = vec![u(&[2, 3, d], -1.0, 1.0), u(&[d], 0.5, 1.5), u(&[d], -0.5, 0.5)];
                for k in 0..4 {
                    v.push(u(&[d, d], -0.7, 0.7));
                    if k != 1 {
                        v.push(u(&[d], -0.3, 0.3));
                    }
                }
                v.push(u(&[d], 0.5, 1.5));
                v.push(u(&[d], -0.5, 0.5));
                v.push(u(&[2 * d, d], -0.7, 0.7));
                v.push(u(&[2 * d], -0.3, 0.3));
                v.push(u(&[d, 2 * d], -0.7, 0.7));
                v.push(u(&[d], -0.3, 0.3));
                v
            }
            Check::Patchify => vec![u(&[2, 2, 4, 4], -1.0, 1.0)],
            Check::Resize => vec![u(&[1, 2, 3, 5], -1.0, 1.0)],
            Check::BceWithLogits | Check::DiceCeLoss => vec![u(&[2, 1, 4, 4], -3.0, 3.0)],
            Check::ConditionEncoder => condition_inputs(&mut u, 1),
            Check::Cin => vec![u(&[2, 3, 4, 4], -1.0, 1.0), u(&[2, 3], 0.5, 1.5), u(&[2, 3], -0.5, 0.5)],
            Check::Cemb => {
                let mut v = vec![u(&[2, 3, 4, 4], -1.0, 1.0)];
                v.extend(condition_inputs(&mut u, 2));
                v.push(u(&[3, 3, 3, 3], -0.5, 0.5));
                v.push(u(&[3, 3, 3, 3], -0.5, 0.5));
                v
            }
            Check::CembShared => {
                let mut v = vec![u(&[2, 3, 4, 4], -1.0, 1.0)];
                v.extend(condition_inputs(&mut u, 1));
                v.push(u(&[3, 3, 3, 3], -0.5, 0.5));
                v.push(u(&[3, 3, 3, 3], -0.5, 0.5));
                v
            }
            Check::EndToEnd => {
                let m = tiny_bundle();
                let mut v: Vec<Tensor<f64>> = m.params.iter().map(|p| p.value.clone()).collect();
                v.push(u(&[2, 1, 16, 16], 0.0, 1.0));
                v
            }
            Check::CorruptedFixture => vec![u(&[5], 0.5, 1.5)],
        }
    }

    /// Scalar function of the inputs whose gradient is checked.
    pub fn build<T: Float>(self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        let y = match self {
            Check::Linear => g.linear(v[0], v[1], Some(v[2]))?,
            Check::Matmul => g.matmul(v[0], v[1])?,
            Check::BatchedMatmul => {
                let s = g.bmm(v[0], v[1], true)?;
                let t = g.permute(v[2], &[0, 2, 1])?;
                let t = g.bmm(t, s, false)?;
                g.mul(t, t)?
            }
            Check::Elementwise => {
                let (a, b, c) = (v[0], v[1], v[2]);
                let r = g.relu(a);
                let s = g.sigmoid(c);
                let e = g.exp(c);
                let l = g.log(b);
                let q = g.sqrt(b);
                let d = g.div(a, b)?;
                let n = g.neg(s);
                let parts = [r, s, e, l, q, d, n];
                let mut acc = g.sub(parts[0], parts[1])?;
                for p in &parts[2..] {
                    let m = g.mul(acc, *p)?;
                    acc = g.add(m, *p)?;
                }
                acc
            }
            Check::Softmax => g.softmax_last(v[0]),
            Check::Reductions => {
                let s = g.sum(v[0], &[1], true)?;
                let m = g.mean(v[0], &[2], true)?;
                let var = g.var_population(v[0], &[0, 2], false)?;
                let a = g.mul(v[0], s)?;
                let b = g.mul(a, m)?;
                let t = g.sum(b, &[0], false)?;
                let t = g.sum(t, &[1], false)?;
                g.add(t, var)?
            }
            Check::Conv2d => conv2d(g, v[0], &Conv2dParams { weight: v[1], bias: Some(v[2]), stride: 1, padding: 1 })?,
            Check::Conv2dStrided => conv2d(g, v[0], &Conv2dParams { weight: v[1], bias: Some(v[2]), stride: 2, padding: 1 })?,
            Check::ConvTranspose2d => conv_transpose2d(g, v[0], &ConvTranspose2dParams { weight: v[1], bias: Some(v[2]), stride: 2, padding: 0 })?,
            Check::InstanceNorm => g.instance_norm(v[0], 1e-5, EpsPlacement::OutsideSqrt)?.0,
            Check::InstanceNormInsideSqrt => g.instance_norm(v[0], 1e-5, EpsPlacement::InsideSqrt)?.0,
            Check::LayerNorm => layer_norm(g, v[0], v[1], v[2], 1e-5)?,
            Check::Attention => {
                let lin = |w: usize, b: Option<usize>| LinearParams { weight: v[w], bias: b.map(|i| v[i]) };
                let p = AttentionBlockParams {
                    heads: 2,
                    norm1_scale: v[1],
                    norm1_shift: v[2],
                    query: lin(3, Some(4)),
                    key: lin(5, None),
                    value: lin(6, Some(7)),
                    out: lin(8, Some(9)),
                    norm2_scale: v[10],
                    norm2_shift: v[11],
                    mlp_in: lin(12, Some(13)),
                    mlp_out: lin(14, Some(15)),
                };
                attention_block(g, v[0], &p)?
            }
            Check::Patchify => g.patchify(v[0], 2)?,
            Check::Resize => g.resize_bilinear(v[0], 5, 4)?,
            Check::BceWithLogits => {
                let t = g.constant(binary_target::<T>(&[2, 1, 4, 4]));
                return g.bce_with_logits(v[0], t);
            }
            Check::DiceCeLoss => {
                let t = g.constant(binary_target::<T>(&[2, 1, 4, 4]));
                return dice_ce_loss(g, v[0], t, &LossConfig::default());
            }
            Check::ConditionEncoder => {
                let p = encoder_at(v, 0);
                let (gamma, beta) = condition_encode(g, &conditions(), &p)?;
                let gg = project(g, gamma, 1)?;
                let bb = project(g, beta, 2)?;
                return g.add(gg, bb);
            }
            Check::Cin => cin(g, v[0], v[1], v[2], 1e-5, EpsPlacement::OutsideSqrt)?,
            Check::Cemb | Check::CembShared => {
                let k = if self == Check::Cemb { 2 } else { 1 };
                let conv = |i: usize| Conv2dParams { weight: v[i], bias: None, stride: 1, padding: 1 };
                let p = CembParams {
                    encoders: (0..k).map(|l| encoder_at(&v[1..], l)).collect(),
                    conv1: conv(1 + 4 * k),
                    conv2: conv(2 + 4 * k),
                    eps: 1e-5,
                    placement: EpsPlacement::OutsideSqrt,
                };
                cemb_forward(g, v[0], &conditions(), &p)?
            }
            Check::EndToEnd => {
                let names = tiny_names();
                let b = Bindings::from_pairs(names.iter().cloned().zip(v.iter().copied()));
                let cfg = tiny_config();
                let net = Net::new(&cfg, &b);
                let boxes = [BBoxPrompt::new(2, 3, 11, 13), BBoxPrompt::new(5, 1, 16, 9)];
                let logits = net.forward(g, v[names.len()], &boxes, Some(&conditions()), true)?;
                let t = g.constant(binary_target::<T>(&[2, 1, 16, 16]));
                return dice_ce_loss(g, logits, t, &LossConfig::default());
            }
            Check::CorruptedFixture => {
                let val = g.value(v[0]).map(|a| a * a);
                g.custom(val, &[v[0]], |ctx| vec![Some(ctx.inputs[0].map(|a| a))])
            }
        };
        project(g, y, 0)
    }
}

fn away_from_zero(t: Tensor<f64>) -> Tensor<f64> {
    t.map(|a| if a >= 0.0 { 0.2 + a } else { a - 0.2 })
}

fn condition_inputs(u: &mut impl FnMut(&[usize], f64, f64) -> Tensor<f64>, encoders: usize) -> Vec<Tensor<f64>> {
    let (c, m) = (3, 3);
    let mut v = Vec::new();
    for _ in 0..encoders {
        v.push(u(&[c, m], -1.0, 1.0));
        v.push(u(&[c, m], -1.0, 1.0));
        v.push(u(&[c, c], -1.0, 1.0));
        v.push(u(&[c, c], -1.0, 1.0));
    }
    v
}

fn encoder_at(v: &[Var], l: usize) -> ConditionEncoderParams {
    ConditionEncoderParams {
        w_gamma: v[4 * l],
        w_beta: v[4 * l + 1],
        w1: v[4 * l + 2],
        w2: v[4 * l + 3],
    }
}

fn conditions() -> Vec<SubGroupCondition> {
    [0, 2].iter().map(|&i| SubGroupCondition::new(i, 3).expect("index < count")).collect()
}

fn binary_target<T: Float>(shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |i| if (i * 7 + i / 5) % 3 == 0 { T::one() } else { T::zero() })
}

/// `Σ y ⊙ r` with a fixed random `r` shaped like `y`.
fn project<T: Float>(g: &mut Graph<T>, y: Var, k: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let r = Tensor::<f64>::uniform(shape, -1.0, 1.0, &mut stream(k, "gradcheck.projection", 0));
    let r = g.constant(r.cast());
    let p = g.mul(y, r)?;
    Ok(g.sum_all(p))
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        in_channels: 1,
        channels: 4,
        patch: 4,
        heads: 2,
        blocks: 1,
        mlp_ratio: 2,
        subgroups: 3,
        cemb: CembConfig {
            sharing: ConditionSharing::Independent,
            ..CembConfig::default()
        },
        ..ModelConfig::default()
    }
}

fn tiny_bundle() -> ModelBundle<f64> {
    ModelBundle::init(tiny_config(), 11, true).expect("tiny config is valid")
}

fn tiny_names() -> &'static [String] {
    static NAMES: OnceLock<Vec<String>> = OnceLock::new();
    NAMES.get_or_init(|| tiny_bundle().params.iter().map(|p| p.name.clone()).collect())
}

/// Runs one check with the backward pass in `T`.
pub fn run_check<T: Float>(check: Check) -> Result<CheckOutcome> {
    let start = Instant::now();
    let dtype = T::DTYPE;
    // Round the point to the checked precision so both sides see the same inputs.
    let point: Vec<Tensor<f64>> = check.inputs().iter().map(|t| t.cast::<T>().cast::<f64>()).collect();
    let low: Vec<Tensor<T>> = point.iter().map(|t| t.cast()).collect();
    let analytic = analytic_grads(&|g: &mut Graph<T>, v: &[Var]| check.build(g, v), &low)?;

    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = check.build(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut worst = 0.0f64;
    let mut work = point.clone();
    'outer: for (k, grad) in analytic.iter().enumerate() {
        for i in 0..point[k].numel() {
            let orig = point[k].data()[i];
            work[k].data_mut()[i] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = grad.data()[i].f64();
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if !err.is_finite() {
                worst = f64::INFINITY;
                break 'outer;
            }
            worst = worst.max(err);
        }
    }
    let threshold = threshold(dtype);
    Ok(CheckOutcome {
        name: check.name(),
        dtype,
        max_rel_err: worst,
        threshold,
        passed: worst < threshold,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run_battery(dtype: DType) -> Result<Vec<CheckOutcome>> {
    Check::ALL
        .iter()
        .map(|&c| match dtype {
            DType::F64 => run_check::<f64>(c),
            DType::F32 => run_check::<f32>(c),
        })
        .collect()
}
