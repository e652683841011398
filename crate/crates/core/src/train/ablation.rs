use crate::data::{split_indices, DatasetManifest, SegSample};
use crate::error::{Error, Result};
use crate::model::{ModelBundle, ModelConfig, Stage};
use crate::tensor::Float;

use super::{evaluate, train_stage, EpochRecord, EvalOptions, MetricsRecord, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Conditioned,
    Unconditioned,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Conditioned => "conditioned",
            Arm::Unconditioned => "unconditioned",
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    /// Train fraction of each split step (0.8 gives 64/16/20).
    pub split_ratio: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            seeds: vec![0, 1, 2],
            split_ratio: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AblationRow {
    pub arm: Arm,
    pub seed: u64,
    pub subgroup: String,
    pub dsc: f64,
    pub pa: f64,
    pub n: usize,
}

/// One trained arm for one seed.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ArmRun {
    pub arm: Arm,
    pub seed: u64,
    /// Hash of the test manifest the arm was scored on.
    pub test_hash: String,
    pub pretrain_history: Vec<EpochRecord>,
    pub finetune_history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub metrics: MetricsRecord,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AblationReport {
    pub config: AblationConfig,
    pub runs: Vec<ArmRun>,
}

impl AblationReport {
    pub fn rows(&self) -> Vec<AblationRow> {
        let mut out = Vec::new();
        for r in &self.runs {
            for g in r.metrics.per_subgroup.iter().chain(std::iter::once(&r.metrics.overall)) {
                out.push(AblationRow {
                    arm: r.arm,
                    seed: r.seed,
                    subgroup: g.subgroup.clone(),
                    dsc: g.dsc,
                    pa: g.pa,
                    n: g.n,
                });
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("arm,seed,subgroup,dsc,pa,n\n");
        for r in self.rows() {
            out.push_str(&format!("{},{},{},{},{},{}\n", r.arm.name(), r.seed, r.subgroup, r.dsc, r.pa, r.n));
        }
        out
    }

    pub fn run(&self, arm: Arm, seed: u64) -> Option<&ArmRun> {
        self.runs.iter().find(|r| r.arm == arm && r.seed == seed)
    }

    /// Conditioned minus unconditioned overall test DSC, per seed.
    pub fn deltas(&self) -> Vec<(u64, f64)> {
        self.config
            .seeds
            .iter()
            .filter_map(|&s| {
                let c = self.run(Arm::Conditioned, s)?;
                let u = self.run(Arm::Unconditioned, s)?;
                Some((s, c.metrics.overall.dsc - u.metrics.overall.dsc))
            })
            .collect()
    }

    pub fn mean_delta(&self) -> f64 {
        let d = self.deltas();
        d.iter().map(|x| x.1).sum::<f64>() / d.len().max(1) as f64
    }

    /// Seeds where the conditioned arm scored at least as well.
    pub fn wins(&self) -> usize {
        self.deltas().iter().filter(|d| d.1 >= 0.0).count()
    }

    /// Fixed-width table of mean-over-seeds DSC / PA per arm and sub-group.
    pub fn summary_table(&self) -> String {
        let rows = self.rows();
        let mut groups: Vec<String> = Vec::new();
        for r in &rows {
            if !groups.contains(&r.subgroup) {
                groups.push(r.subgroup.clone());
            }
        }
        let mut out = format!("{:<14} {:<10} {:>8} {:>8}\n", "arm", "subgroup", "dsc", "pa");
        for arm in [Arm::Conditioned, Arm::Unconditioned] {
            for g in &groups {
                let sel: Vec<&AblationRow> = rows.iter().filter(|r| r.arm == arm && &r.subgroup == g).collect();
                let k = sel.len().max(1) as f64;
                let dsc = sel.iter().map(|r| r.dsc).sum::<f64>() / k;
                let pa = sel.iter().map(|r| r.pa).sum::<f64>() / k;
                out.push_str(&format!("{:<14} {:<10} {:>8.4} {:>8.4}\n", arm.name(), g, dsc, pa));
            }
        }
        for (s, d) in self.deltas() {
            out.push_str(&format!("seed {s}: delta dsc {d:+.4}\n"));
        }
        out.push_str(&format!("mean delta dsc {:+.4} ({} of {} seeds >= 0)\n", self.mean_delta(), self.wins(), self.deltas().len()));
        out
    }
}

/// Pretrains once per seed without the condition block, then fine-tunes two
/// copies: one with a fresh condition block and one without. Both copies use
/// the same split, boxes and decoder starting point, and are scored on the
/// same test samples.
pub fn run_ablation<T: Float>(
    samples: &[SegSample],
    manifest: &DatasetManifest,
    cfg: &AblationConfig,
    opts: EvalOptions,
) -> Result<AblationReport> {
    if cfg.seeds.len() < 3 {
        return Err(Error::Config(format!("ablation needs at least 3 seeds, got {}", cfg.seeds.len())));
    }
    if manifest.rows.len() != samples.len() {
        return Err(Error::Config(format!(
            "manifest has {} rows but {} samples were given",
            manifest.rows.len(),
            samples.len()
        )));
    }
    let groups: Vec<usize> = samples.iter().map(|s| s.subgroup.index()).collect();
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let split = split_indices(&groups, cfg.split_ratio, seed)?;
        let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
        let (train, val, test) = (pick(&split.train), pick(&split.val), pick(&split.test));
        let test_hash = manifest.subset(&split.test).hash();

        let mut base = ModelBundle::<T>::init(cfg.model, seed, false)?;
        let pre = train_stage(Stage::Pretrain, &mut base, &train, &val, &cfg.train, seed)?;

        for arm in [Arm::Conditioned, Arm::Unconditioned] {
            let mut m = base.clone();
            if arm == Arm::Conditioned {
                m.attach_cemb(seed)?;
            }
            let ft = train_stage(Stage::Finetune, &mut m, &train, &val, &cfg.train, seed)?;
            let eval = EvalOptions {
                use_cemb: arm == Arm::Conditioned,
                ..opts
            };
            let (metrics, _) = evaluate(&m, &test, &manifest.labels, eval)?;
            runs.push(ArmRun {
                arm,
                seed,
                test_hash: test_hash.clone(),
                pretrain_history: pre.history.clone(),
                finetune_history: ft.history,
                best_epoch: ft.best_epoch,
                metrics,
            });
        }
    }
    Ok(AblationReport { config: cfg.clone(), runs })
}
