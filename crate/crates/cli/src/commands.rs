use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use anyhow::{bail, Context, Result};
use cemb_core::battery::{run_battery, run_check, Check, CheckOutcome};
use cemb_core::data::{
    generate as generate_samples, load_disk_dataset, pgm, prepare_samples, split_indices, write_dataset, LoadOptions, LoadedDataset,
    SegSample, SyntheticSpec, MANIFEST_FILE,
};
use cemb_core::model::{ModelBundle, Stage};
use cemb_core::train::{
    evaluate, history_csv, predict_masks, run_ablation, train_stage, AblationConfig, Checkpoint, EvalOptions, StageReport,
};
use cemb_core::{DType, Error, Tensor};
use serde_json::json;

use crate::config::{read_json, write_json, DataSource, RunConfig, StageSel};
use crate::{AblateArgs, DTypeSel, EvalArgs, GenerateArgs, GradcheckArgs, Overrides, SplitSel, TrainArgs};

pub const CONFIG_ECHO: &str = "config.json";

/// `git describe` of the working directory, or `unknown` outside a checkout.
fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Config file (or defaults) with flag overrides applied, validated.
fn resolve(o: &Overrides) -> Result<RunConfig> {
    let mut cfg: RunConfig = match &o.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &o.data {
        cfg.data = DataSource::Path(d.clone());
    }
    if let DataSource::Path(p) = &cfg.data {
        cfg.data = DataSource::Path(absolute(p));
    }
    if let Some(p) = &o.out {
        cfg.out_dir = Some(p.clone());
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(e) = o.pretrain_epochs {
        cfg.train.pretrain_epochs = e;
    }
    if let Some(e) = o.finetune_epochs {
        cfg.train.finetune_epochs = e;
    }
    if let Some(b) = o.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = o.lr {
        cfg.train.adam.lr = lr;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg
        .out_dir
        .clone()
        .ok_or_else(|| Error::Config("no output directory: pass --out or set out_dir".into()))?;
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    Ok(dir)
}

fn load_data(cfg: &RunConfig) -> Result<LoadedDataset> {
    let opts = LoadOptions {
        image_size: cfg.model.image_size,
        in_channels: cfg.model.in_channels,
        empty_mask: cfg.empty_mask,
    };
    let data = match &cfg.data {
        DataSource::Path(p) => {
            let manifest = if p.is_dir() { p.join(MANIFEST_FILE) } else { p.clone() };
            if !manifest.is_file() {
                bail!(Error::Config(format!("dataset not found: {}", manifest.display())));
            }
            load_disk_dataset(&manifest, opts)?
        }
        DataSource::Synthetic(spec) => {
            let (samples, manifest) = generate_samples(spec)?;
            prepare_samples(samples, manifest, opts)?
        }
    };
    if data.manifest.m != cfg.model.subgroups {
        bail!(Error::Config(format!(
            "model.subgroups is {} but the dataset has {} sub-groups",
            cfg.model.subgroups, data.manifest.m
        )));
    }
    if !data.excluded.is_empty() {
        eprintln!("note: {} samples with empty masks excluded", data.excluded.len());
    }
    Ok(data)
}

struct Parts {
    train: Vec<SegSample>,
    val: Vec<SegSample>,
    test: Vec<SegSample>,
    test_rows: Vec<usize>,
    all_rows: [Vec<usize>; 3],
}

fn split_data(data: &LoadedDataset, ratio: f64, seed: u64) -> Result<Parts> {
    let groups: Vec<usize> = data.samples.iter().map(|s| s.subgroup.index()).collect();
    let s = split_indices(&groups, ratio, seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| data.samples[i].clone()).collect::<Vec<_>>();
    Ok(Parts {
        train: pick(&s.train),
        val: pick(&s.val),
        test: pick(&s.test),
        test_rows: s.test.clone(),
        all_rows: [s.train, s.val, s.test],
    })
}

pub fn generate(a: GenerateArgs) -> Result<()> {
    let mut spec: SyntheticSpec = match &a.config {
        Some(p) => read_json(p)?,
        None => SyntheticSpec::heterogeneous(0),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let (samples, manifest) = generate_samples(&spec)?;
    write_dataset(&a.out, &samples, &manifest)?;
    write_json(&a.out.join(CONFIG_ECHO), &spec)?;
    println!("wrote {} samples to {}", samples.len(), a.out.display());
    println!("manifest hash {}", manifest.hash());
    println!("content hash {}", manifest.content_hash(&a.out)?);
    Ok(())
}

fn stage_rows(stage: &str, offset: usize, r: &StageReport<f32>) -> String {
    history_csv(&r.history)
        .lines()
        .skip(1)
        .map(|l| {
            let (epoch, rest) = l.split_once(',').unwrap_or((l, ""));
            let e: usize = epoch.parse().unwrap_or(0);
            format!("{stage},{},{rest}\n", e + offset)
        })
        .collect()
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = resolve(&a.common)?;
    if let Some(s) = a.stage {
        cfg.stage = s;
    }
    if a.unconditioned {
        cfg.conditioned = false;
    }
    if cfg.stage == StageSel::Finetune && a.init.is_none() {
        bail!(Error::Config("--stage finetune needs --init <checkpoint>".into()));
    }
    let dir = out_dir(&cfg)?;
    write_json(&dir.join(CONFIG_ECHO), &cfg)?;
    let data = load_data(&cfg)?;
    let parts = split_data(&data, cfg.split_ratio, cfg.seed)?;

    let mut bundle = match &a.init {
        Some(p) => Checkpoint::<f32>::load(p)?.to_bundle(Some(&cfg.model))?,
        None => ModelBundle::<f32>::init(cfg.model, cfg.seed, false)?,
    };
    let mut history = String::from("stage,epoch,train_loss,val_dsc,val_pa\n");
    let mut stages = Vec::new();
    let mut adam = None;
    let mut offset = 0;
    let runs: &[Stage] = match cfg.stage {
        StageSel::Pretrain => &[Stage::Pretrain],
        StageSel::Finetune => &[Stage::Finetune],
        StageSel::Both => &[Stage::Pretrain, Stage::Finetune],
    };
    for &stage in runs {
        let name = if stage == Stage::Pretrain { "pretrain" } else { "finetune" };
        if stage == Stage::Finetune {
            if cfg.conditioned {
                bundle.attach_cemb(cfg.seed)?;
            } else if bundle.has_cemb() {
                bundle = bundle.without_cemb();
            }
        }
        let r = train_stage(stage, &mut bundle, &parts.train, &parts.val, &cfg.train, cfg.seed)?;
        history.push_str(&stage_rows(name, offset, &r));
        offset += r.history.len();
        println!("{name}: {} epochs, best epoch {} (val dsc {:.4})", r.history.len(), r.best_epoch, r.best_val_dsc);
        stages.push(json!({"stage": name, "epochs": r.history.len(), "best_epoch": r.best_epoch, "best_val_dsc": r.best_val_dsc}));
        adam = Some(r.adam);
    }
    fs::write(dir.join("history.csv"), history).context("cannot write history.csv")?;

    let mut ckpt = Checkpoint::from_bundle(&bundle, serde_json::to_value(&cfg)?);
    ckpt.adam = adam;
    ckpt.save(&dir.join("best.ckpt"))?;

    let opts = EvalOptions::new(bundle.has_cemb());
    let (test, _) = evaluate(&bundle, &parts.test, &data.manifest.labels, opts)?;
    println!("test dsc {:.4} pa {:.4} (n = {})", test.overall.dsc, test.overall.pa, test.overall.n);
    let summary = json!({
        "config": cfg,
        "seed": cfg.seed,
        "git": git_describe(),
        "data_hash": data.manifest.hash(),
        "test_hash": data.manifest.subset(&parts.test_rows).hash(),
        "stages": stages,
        "test": test,
    });
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(())
}

fn gray(t: &Tensor<f32>, threshold: bool) -> pgm::GrayImage {
    let (h, w) = (t.shape()[t.ndim() - 2], t.shape()[t.ndim() - 1]);
    let pixels = t.data()[..h * w]
        .iter()
        .map(|&v| if threshold { if v >= 0.5 { 255 } else { 0 } } else { (v.clamp(0.0, 1.0) * 255.0).round() as u8 })
        .collect();
    pgm::GrayImage { width: w, height: h, pixels }
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::<f32>::load(&a.checkpoint)?;
    let mut cfg: RunConfig = serde_json::from_value(ckpt.config.clone()).unwrap_or_else(|_| RunConfig::default());
    cfg.model = ckpt.model_config()?;
    let requested = match &a.config {
        Some(p) => Some(read_json::<RunConfig>(p)?.model),
        None => None,
    };
    let bundle = ckpt.to_bundle(requested.as_ref())?;
    if let Some(d) = &a.data {
        cfg.data = DataSource::Path(absolute(d));
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let dir = match &a.out {
        Some(d) => d.clone(),
        None => {
            let base = a.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default();
            base.join(format!("eval-{}", split_name(a.split)))
        }
    };
    cfg.out_dir = Some(dir.clone());
    cfg.validate()?;
    let dir = out_dir(&cfg)?;
    write_json(&dir.join(CONFIG_ECHO), &json!({"run": cfg, "checkpoint": absolute(&a.checkpoint), "split": split_name(a.split), "overlays": a.overlays}))?;

    let data = load_data(&cfg)?;
    let parts = split_data(&data, cfg.split_ratio, cfg.seed)?;
    let (samples, rows): (Vec<SegSample>, Vec<usize>) = match a.split {
        SplitSel::Train => (parts.train, parts.all_rows[0].clone()),
        SplitSel::Val => (parts.val, parts.all_rows[1].clone()),
        SplitSel::Test => (parts.test, parts.all_rows[2].clone()),
        SplitSel::All => (data.samples.clone(), (0..data.samples.len()).collect()),
    };
    let use_cemb = bundle.has_cemb() && !a.unconditioned;
    let opts = EvalOptions::new(use_cemb);
    let (record, scores) = evaluate(&bundle, &samples, &data.manifest.labels, opts)?;
    fs::write(dir.join("metrics.csv"), record.to_csv()).context("cannot write metrics.csv")?;
    let report = json!({
        "config": cfg,
        "seed": cfg.seed,
        "git": git_describe(),
        "checkpoint": absolute(&a.checkpoint),
        "split": split_name(a.split),
        "split_hash": data.manifest.subset(&rows).hash(),
        "use_cemb": use_cemb,
        "metrics": record,
        "samples": scores,
    });
    write_json(&dir.join("metrics.json"), &report)?;
    if a.overlays {
        let ov = dir.join("overlays");
        fs::create_dir_all(&ov).with_context(|| format!("cannot create {}", ov.display()))?;
        let preds = predict_masks(&bundle, &samples, opts)?;
        for ((s, p), row) in samples.iter().zip(&preds).zip(&rows) {
            let pred = Tensor::from_fn(s.mask.shape().to_vec(), |i| if p[i] { 1.0f32 } else { 0.0 });
            pgm::write(&ov.join(format!("{row:05}_image.pgm")), &gray(&s.image, false))?;
            pgm::write(&ov.join(format!("{row:05}_gt.pgm")), &gray(&s.mask, true))?;
            pgm::write(&ov.join(format!("{row:05}_pred.pgm")), &gray(&pred, true))?;
        }
    }
    print!("{}", record.to_csv());
    Ok(())
}

fn split_name(s: SplitSel) -> &'static str {
    match s {
        SplitSel::Train => "train",
        SplitSel::Val => "val",
        SplitSel::Test => "test",
        SplitSel::All => "all",
    }
}

fn print_table(rows: &[CheckOutcome]) {
    println!("{:<28} {:<5} {:>12} {:>10}  status", "check", "dtype", "max_rel_err", "threshold");
    for r in rows {
        println!(
            "{:<28} {:<5} {:>12.3e} {:>10.0e}  {}",
            r.name,
            r.dtype.to_string(),
            r.max_rel_err,
            r.threshold,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let dtypes: &[DType] = match a.dtype {
        DTypeSel::F64 => &[DType::F64],
        DTypeSel::F32 => &[DType::F32],
        DTypeSel::Both => &[DType::F64, DType::F32],
    };
    let start = std::time::Instant::now();
    let mut rows = Vec::new();
    for &d in dtypes {
        rows.extend(run_battery(d)?);
        if a.fixture {
            rows.push(match d {
                DType::F64 => run_check::<f64>(Check::CorruptedFixture)?,
                DType::F32 => run_check::<f32>(Check::CorruptedFixture)?,
            });
        }
    }
    print_table(&rows);
    let failed = rows.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed, {:.1}s", rows.len(), start.elapsed().as_secs_f64());
    if failed > 0 {
        bail!(Error::Invariant(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let mut cfg = resolve(&a.common)?;
    if let Some(s) = &a.seeds {
        cfg.seeds = s.clone();
    }
    cfg.validate()?;
    let dir = out_dir(&cfg)?;
    write_json(&dir.join(CONFIG_ECHO), &cfg)?;
    let data = load_data(&cfg)?;
    let acfg = AblationConfig {
        model: cfg.model,
        train: cfg.train,
        seeds: cfg.seeds.clone(),
        split_ratio: cfg.split_ratio,
    };
    let report = run_ablation::<f32>(&data.samples, &data.manifest, &acfg, EvalOptions::new(false))?;
    fs::write(dir.join("ablation.csv"), report.to_csv()).context("cannot write ablation.csv")?;
    let table = report.summary_table();
    fs::write(dir.join("summary.txt"), &table).context("cannot write summary.txt")?;
    let out = json!({
        "config": cfg,
        "git": git_describe(),
        "data_hash": data.manifest.hash(),
        "deltas": report.deltas(),
        "mean_delta": report.mean_delta(),
        "wins": report.wins(),
        "report": report,
    });
    write_json(&dir.join("ablation.json"), &out)?;
    print!("{table}");
    Ok(())
}
