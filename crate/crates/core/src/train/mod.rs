//! Loss, optimizer, metrics, checkpoints, the two-stage training loop and
//! the conditioned-versus-unconditioned comparison.

mod ablation;
pub mod checkpoint;
mod loss;
mod metrics;
mod optim;

pub use ablation::{run_ablation, AblationConfig, AblationReport, AblationRow, Arm, ArmRun};
pub use checkpoint::Checkpoint;
pub use loss::{dice_ce_loss, soft_dice, LossConfig};
pub use metrics::{binarize, dsc, pixel_accuracy, GroupMetrics, MetricsRecord, SampleScore, OVERALL_LABEL};
pub use optim::{adam_step, AdamConfig, AdamState, Moments};

use std::collections::BTreeMap;

use rand::Rng;

use crate::cemb::SubGroupCondition;
use crate::data::{prompt_for, SegSample};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{BBoxPrompt, ModelBundle, Net, Stage};
use crate::rng::stream;
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    /// Largest outward box perturbation per side during training.
    pub perturb_max: usize,
    pub loss: LossConfig,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            pretrain_epochs: 50,
            finetune_epochs: 50,
            perturb_max: 10,
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        self.loss.validate()?;
        self.adam.validate()
    }

    pub fn epochs(&self, stage: Stage) -> usize {
        match stage {
            Stage::Pretrain => self.pretrain_epochs,
            Stage::Finetune => self.finetune_epochs,
        }
    }
}

/// Number of evaluation threads from `CEMB_THREADS` (default 1).
pub fn threads_from_env() -> usize {
    std::env::var("CEMB_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Network input of a batch: raw images, or cached encoder features when
/// the encoder is frozen.
#[derive(Debug, Clone, PartialEq)]
pub enum BatchInput<T> {
    Images(Tensor<T>),
    Features(Tensor<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub input: BatchInput<T>,
    pub boxes: Vec<BBoxPrompt>,
    pub conds: Vec<SubGroupCondition>,
    /// `N×1×H×W` binary targets.
    pub targets: Tensor<T>,
}

impl<T: Float> Batch<T> {
    /// Stacks `samples` with the given prompt boxes.
    pub fn from_samples(samples: &[&SegSample], boxes: Vec<BBoxPrompt>) -> Result<Self> {
        let images: Vec<Tensor<T>> = samples.iter().map(|s| s.image.cast()).collect();
        let targets: Vec<Tensor<T>> = samples.iter().map(|s| s.mask.cast()).collect();
        Ok(Self {
            input: BatchInput::Images(Tensor::stack(&images)?),
            boxes,
            conds: samples.iter().map(|s| s.subgroup).collect(),
            targets: Tensor::stack(&targets)?,
        })
    }
}

/// Owns one optimizer and applies steps to a bundle in a fixed stage.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub stage: Stage,
    pub use_cemb: bool,
    pub loss: LossConfig,
    pub adam: AdamState<T>,
}

impl<T: Float> Trainer<T> {
    /// Sets the bundle's freeze flags for `stage`. The condition block is
    /// used during fine-tuning when the bundle has one.
    pub fn new(bundle: &mut ModelBundle<T>, stage: Stage, cfg: &TrainConfig) -> Self {
        bundle.set_stage(stage);
        Self {
            stage,
            use_cemb: stage == Stage::Finetune && bundle.has_cemb(),
            loss: cfg.loss,
            adam: AdamState::new(cfg.adam),
        }
    }

    /// Loss of `batch` and gradients of every unfrozen parameter.
    pub fn loss_and_grads(&self, bundle: &ModelBundle<T>, batch: &Batch<T>) -> Result<(f64, BTreeMap<String, Tensor<T>>)> {
        let mut g = Graph::new();
        let b = bundle.params.bind(&mut g, true);
        let net = Net::new(&bundle.config, &b);
        let conds = Some(batch.conds.as_slice());
        let logits = match &batch.input {
            BatchInput::Images(x) => {
                let x = g.constant(x.clone());
                net.forward(&mut g, x, &batch.boxes, conds, self.use_cemb)?
            }
            BatchInput::Features(f) => {
                let f = g.constant(f.clone());
                net.forward_from_features(&mut g, f, &batch.boxes, conds, self.use_cemb)?
            }
        };
        let target = g.constant(batch.targets.clone());
        let loss = dice_ce_loss(&mut g, logits, target, &self.loss)?;
        let value = g.value(loss).item().f64();
        g.backward(loss)?;
        let mut grads = BTreeMap::new();
        for p in bundle.params.iter().filter(|p| !p.frozen) {
            let v = b.var(&p.name)?;
            if let Some(t) = g.take_grad(v) {
                grads.insert(p.name.clone(), t);
            }
        }
        Ok((value, grads))
    }

    /// One Adam step on `batch`; returns the loss before the update.
    pub fn step(&mut self, bundle: &mut ModelBundle<T>, batch: &Batch<T>) -> Result<f64> {
        let (loss, grads) = self.loss_and_grads(bundle, batch)?;
        if !loss.is_finite() {
            return Err(Error::Invariant(format!("non-finite training loss {loss}")));
        }
        adam_step(&mut bundle.params, &grads, &mut self.adam)?;
        Ok(loss)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dsc: f64,
    pub val_pa: f64,
}

#[derive(Debug, Clone)]
pub struct StageReport<T> {
    pub stage: Stage,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_dsc: f64,
    pub adam: AdamState<T>,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_dsc,val_pa\n");
    for r in history {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_dsc, r.val_pa));
    }
    out
}

fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Pretrain => "pretrain",
        Stage::Finetune => "finetune",
    }
}

/// Per-sample network inputs: images, or encoder features for a frozen encoder.
fn prepare_inputs<T: Float>(bundle: &ModelBundle<T>, samples: &[SegSample], features: bool, batch: usize) -> Result<Vec<Tensor<T>>> {
    let images: Vec<Tensor<T>> = samples.iter().map(|s| s.image.cast()).collect();
    if !features {
        return Ok(images);
    }
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch) {
        let f = bundle.encode_features(&Tensor::stack(chunk)?)?;
        out.extend((0..chunk.len()).map(|i| f.index0(i)));
    }
    Ok(out)
}

/// Trains one stage with minibatch Adam. Boxes are re-perturbed every epoch;
/// validation uses tight boxes. The parameters of the epoch with the best
/// validation mean DSC are restored at the end.
pub fn train_stage<T: Float>(
    stage: Stage,
    bundle: &mut ModelBundle<T>,
    train: &[SegSample],
    val: &[SegSample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<StageReport<T>> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(format!(
            "{} stage needs non-empty train and validation splits (got {} and {})",
            stage_name(stage),
            train.len(),
            val.len()
        )));
    }
    let mut trainer = Trainer::new(bundle, stage, cfg);
    let cached = stage == Stage::Finetune;
    let train_inputs = prepare_inputs(bundle, train, cached, cfg.batch_size)?;
    let val_inputs = prepare_inputs(bundle, val, cached, cfg.batch_size)?;
    let name = stage_name(stage);

    let mut history = Vec::new();
    let mut best: Option<(usize, f64, Vec<Tensor<T>>)> = None;
    for epoch in 1..=cfg.epochs(stage) {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle = stream(seed, &format!("{name}.shuffle"), epoch as u64);
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle.random_range(0..=i));
        }
        let mut jitter = stream(seed, &format!("{name}.perturb"), epoch as u64);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let inputs: Vec<Tensor<T>> = chunk.iter().map(|&i| train_inputs[i].clone()).collect();
            let targets: Vec<Tensor<T>> = chunk.iter().map(|&i| train[i].mask.cast()).collect();
            let stacked = Tensor::stack(&inputs)?;
            let batch = Batch {
                input: if cached {
                    BatchInput::Features(stacked)
                } else {
                    BatchInput::Images(stacked)
                },
                boxes: chunk.iter().map(|&i| prompt_for(&train[i], cfg.perturb_max, &mut jitter)).collect(),
                conds: chunk.iter().map(|&i| train[i].subgroup).collect(),
                targets: Tensor::stack(&targets)?,
            };
            total += trainer.step(bundle, &batch)?;
            batches += 1;
        }
        let scores = score_inputs(bundle, &val_inputs, cached, val, trainer.use_cemb, cfg.batch_size, 1)?;
        let record = MetricsRecord::from_scores(&scores, &[]).overall;
        history.push(EpochRecord {
            epoch,
            train_loss: total / batches as f64,
            val_dsc: record.dsc,
            val_pa: record.pa,
        });
        if best.as_ref().is_none_or(|b| record.dsc > b.1) {
            best = Some((epoch, record.dsc, bundle.params.iter().map(|p| p.value.clone()).collect()));
        }
    }
    let (best_epoch, best_val_dsc) = match best {
        Some((e, d, values)) => {
            for (p, v) in bundle.params.iter_mut().zip(values) {
                p.value = v;
            }
            (e, d)
        }
        None => (0, f64::NAN),
    };
    Ok(StageReport {
        stage,
        history,
        best_epoch,
        best_val_dsc,
        adam: trainer.adam,
    })
}

/// Logits for each input (in order), using tight or given boxes. Work is
/// split into `threads` contiguous ranges; results do not depend on it.
#[allow(clippy::too_many_arguments)]
fn logits_for<T: Float>(
    bundle: &ModelBundle<T>,
    inputs: &[Tensor<T>],
    features: bool,
    boxes: &[BBoxPrompt],
    conds: &[SubGroupCondition],
    use_cemb: bool,
    batch: usize,
    threads: usize,
) -> Result<Vec<Tensor<T>>> {
    let run = |lo: usize, hi: usize| -> Result<Vec<Tensor<T>>> {
        let mut out = Vec::with_capacity(hi - lo);
        let mut start = lo;
        while start < hi {
            let end = (start + batch).min(hi);
            let x = Tensor::stack(&inputs[start..end])?;
            let c = Some(&conds[start..end]);
            let y = if features {
                bundle.predict_from_features(&x, &boxes[start..end], c, use_cemb)?
            } else {
                bundle.predict(&x, &boxes[start..end], c, use_cemb)?
            };
            out.extend((0..end - start).map(|i| y.index0(i)));
            start = end;
        }
        Ok(out)
    };
    let n = inputs.len();
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return run(0, n);
    }
    let per = n.div_ceil(threads);
    let parts: Vec<Result<Vec<Tensor<T>>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let (lo, hi) = ((t * per).min(n), ((t + 1) * per).min(n));
                s.spawn(move || run(lo, hi))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn score_inputs<T: Float>(
    bundle: &ModelBundle<T>,
    inputs: &[Tensor<T>],
    features: bool,
    samples: &[SegSample],
    use_cemb: bool,
    batch: usize,
    threads: usize,
) -> Result<Vec<SampleScore>> {
    let boxes: Vec<BBoxPrompt> = samples.iter().map(|s| s.bbox).collect();
    let conds: Vec<SubGroupCondition> = samples.iter().map(|s| s.subgroup).collect();
    let logits = logits_for(bundle, inputs, features, &boxes, &conds, use_cemb, batch, threads)?;
    Ok(samples
        .iter()
        .zip(&logits)
        .map(|(s, z)| {
            let pred = binarize(z.data());
            let gt: Vec<bool> = s.mask.data().iter().map(|&v| v == 1.0).collect();
            SampleScore {
                subgroup: s.subgroup.index(),
                dsc: dsc(&pred, &gt),
                pa: pixel_accuracy(&pred, &gt),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub use_cemb: bool,
    pub batch_size: usize,
    pub threads: usize,
}

impl EvalOptions {
    pub fn new(use_cemb: bool) -> Self {
        Self {
            use_cemb,
            batch_size: 8,
            threads: threads_from_env(),
        }
    }
}

/// Binary predictions (tight boxes) for each sample.
pub fn predict_masks<T: Float>(bundle: &ModelBundle<T>, samples: &[SegSample], opts: EvalOptions) -> Result<Vec<Vec<bool>>> {
    let inputs: Vec<Tensor<T>> = samples.iter().map(|s| s.image.cast()).collect();
    let boxes: Vec<BBoxPrompt> = samples.iter().map(|s| s.bbox).collect();
    let conds: Vec<SubGroupCondition> = samples.iter().map(|s| s.subgroup).collect();
    let logits = logits_for(bundle, &inputs, false, &boxes, &conds, opts.use_cemb, opts.batch_size.max(1), opts.threads)?;
    Ok(logits.iter().map(|z| binarize(z.data())).collect())
}

/// Per-sample scores and their per-sub-group summary.
pub fn evaluate<T: Float>(
    bundle: &ModelBundle<T>,
    samples: &[SegSample],
    labels: &[String],
    opts: EvalOptions,
) -> Result<(MetricsRecord, Vec<SampleScore>)> {
    let inputs: Vec<Tensor<T>> = samples.iter().map(|s| s.image.cast()).collect();
    let scores = score_inputs(bundle, &inputs, false, samples, opts.use_cemb, opts.batch_size.max(1), opts.threads)?;
    Ok((MetricsRecord::from_scores(&scores, labels), scores))
}
