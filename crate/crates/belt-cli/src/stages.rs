//! Pipeline stage drivers. Each stage consumes the experiment config (plus
//! CLI overrides), produces its artifacts under the output directory, and
//! records what it did in a `run.json` RunRecord.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use belt_core::defense::{nc_anomaly_index, nc_reverse_trigger, strip_scan, ReversedTrigger};
use belt_core::excl::{measure_exclusivity, ObjectiveMode};
use belt_core::model::{
    load_checkpoint, save_checkpoint, CheckpointMeta, FeatureSplitClassifier, ModelConfig,
};
use belt_core::poison::build_poisoned_dataset;
use belt_core::seed::substream_indexed;
use belt_core::train::{evaluate_asr, evaluate_cda, train_backdoored_model, EvalContext};
use belt_core::trigger::{apply_trigger, TriggerSpec};
use belt_core::Image;
use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{hex_string, ExperimentConfig};

pub const RECORD_VERSION: u32 = 1;

/// Ledger entry for one stage invocation. Every metric column is present in
/// every record: populated when the stage computes it, `null` (n/a) when it
/// does not.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: u32,
    pub stage: String,
    pub config_hash: String,
    /// Short content hash over the artifacts this stage produced.
    pub artifact_version: String,
    pub started_at: String,
    pub finished_at: String,
    pub seed: u64,
    /// Stage parameters worth reporting on (mask_rate, objective mode, ...).
    pub params: BTreeMap<String, serde_json::Value>,
    /// Artifact name -> path, relative to the record's own directory when
    /// possible.
    pub artifacts: BTreeMap<String, PathBuf>,
    pub metrics: MetricSummary,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct MetricSummary {
    pub cda: Option<f64>,
    pub asr: Option<f64>,
    pub excl: Option<f64>,
    pub nc_index: Option<f64>,
    pub strip_overlap: Option<f64>,
}

impl RunRecord {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read run record {}", path.display()))?;
        let record: RunRecord =
            serde_json::from_str(&text).with_context(|| format!("parse {}", path.display()))?;
        if record.version != RECORD_VERSION {
            bail!(
                "{}: unsupported run record version {}",
                path.display(),
                record.version
            );
        }
        Ok(record)
    }
}

/// Everything a stage needs besides the config document itself.
pub struct StageCtx {
    pub config: ExperimentConfig,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl StageCtx {
    /// Applies the override precedence: `--out` flag, then the
    /// BELT_OUTPUT_DIR environment variable, then the config value. Seeds
    /// likewise prefer the flag over the config.
    pub fn new(config: ExperimentConfig, out_flag: Option<PathBuf>, seed_flag: Option<u64>) -> Self {
        let out_dir = out_flag
            .or_else(|| std::env::var_os("BELT_OUTPUT_DIR").map(PathBuf::from))
            .unwrap_or_else(|| config.output_dir.clone());
        let seed = seed_flag.unwrap_or(config.seed);
        Self {
            config,
            out_dir,
            seed,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn prepare(&self) -> Result<()> {
        fs::create_dir_all(&self.out_dir)
            .with_context(|| format!("cannot create output dir {}", self.out_dir.display()))
    }

    fn finish(
        &self,
        stage: &str,
        started_at: String,
        params: BTreeMap<String, serde_json::Value>,
        artifacts: BTreeMap<String, PathBuf>,
        metrics: MetricSummary,
    ) -> Result<RunRecord> {
        let record = RunRecord {
            version: RECORD_VERSION,
            stage: stage.to_string(),
            config_hash: self.config.hash(),
            artifact_version: artifact_version(&self.out_dir, &artifacts)?,
            started_at,
            finished_at: now(),
            seed: self.seed,
            params,
            artifacts,
            metrics,
        };
        let path = self.path("run.json");
        fs::write(&path, serde_json::to_string_pretty(&record)?)
            .with_context(|| format!("write {}", path.display()))?;
        Ok(record)
    }
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Git-style short content version: sha256 over the produced files, folded
/// in deterministic artifact-name order.
fn artifact_version(base: &Path, artifacts: &BTreeMap<String, PathBuf>) -> Result<String> {
    let mut hasher = Sha256::new();
    for (name, rel) in artifacts {
        hasher.update(name.as_bytes());
        let path = if rel.is_absolute() {
            rel.clone()
        } else {
            base.join(rel)
        };
        let bytes =
            fs::read(&path).with_context(|| format!("hash artifact {}", path.display()))?;
        hasher.update(&bytes);
    }
    Ok(hex_string(&hasher.finalize())[..12].to_string())
}

fn load_model(ctx: &StageCtx, checkpoint: &Path) -> Result<FeatureSplitClassifier> {
    let (model, _meta) = load_checkpoint(checkpoint)
        .map_err(|e| anyhow!("checkpoint {}: {e}", checkpoint.display()))?;
    let dataset_shape = match &ctx.config.dataset {
        crate::config::DatasetSection::Synthetic { shape, .. } => Some(*shape),
        _ => None,
    };
    if let Some(shape) = dataset_shape {
        if model.config.input_shape != shape {
            bail!(
                "checkpoint input shape {:?} does not match dataset.shape {:?}",
                model.config.input_shape,
                shape
            );
        }
    }
    Ok(model)
}

fn spec_for(ctx: &StageCtx, sample: &Image) -> Result<TriggerSpec> {
    Ok(ctx.config.trigger_spec(sample.dim())?)
}

fn json_num(v: f64) -> serde_json::Value {
    serde_json::Number::from_f64(v)
        .map(serde_json::Value::Number)
        .unwrap_or(serde_json::Value::Null)
}

pub fn stage_train(ctx: &StageCtx) -> Result<RunRecord> {
    ctx.prepare()?;
    let started = now();
    let (train_set, test_set) = ctx.config.load_datasets()?;
    let spec = spec_for(ctx, &train_set.images[0])?;
    let mut poison_cfg = ctx.config.poison.clone();
    poison_cfg.seed = ctx.seed;
    let poisoned = build_poisoned_dataset(&train_set, &spec, &poison_cfg)?;

    let mut train_cfg = ctx.config.train.clone();
    train_cfg.seed = ctx.seed;
    let model_cfg = ModelConfig::desk(
        train_set.images[0].dim(),
        train_set.num_classes,
        ctx.seed,
    );
    let (model, mut report) = train_backdoored_model(
        &poisoned,
        &model_cfg,
        &train_cfg,
        Some(EvalContext {
            test_set: &test_set,
            trigger: Some(&spec),
        }),
    )?;

    let ckpt_path = ctx.path("checkpoint.bin");
    save_checkpoint(
        &model,
        &CheckpointMeta {
            seed: ctx.seed,
            scenario: Some(format!("{:?}", train_cfg.scenario)),
            epochs: Some(train_cfg.epochs),
            note: Some(format!("config {}", ctx.config.hash())),
        },
        &ckpt_path,
    )?;
    report.checkpoint_path = Some(ckpt_path.clone());
    let report_path = ctx.path("train_report.json");
    fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;

    let mut artifacts = BTreeMap::new();
    artifacts.insert("checkpoint".to_string(), ckpt_path);
    artifacts.insert("train_report".to_string(), report_path);
    let mut params = BTreeMap::new();
    params.insert("poison_rate".into(), json_num(poison_cfg.poison_rate));
    params.insert("mask_rate".into(), json_num(poison_cfg.mask_rate));
    params.insert(
        "scenario".into(),
        serde_json::to_value(train_cfg.scenario)?,
    );
    ctx.finish(
        "train",
        started,
        params,
        artifacts,
        MetricSummary {
            cda: report.cda,
            asr: report.asr,
            ..MetricSummary::default()
        },
    )
}

pub fn stage_excl(
    ctx: &StageCtx,
    checkpoint: &Path,
    mode: Option<ObjectiveMode>,
) -> Result<RunRecord> {
    ctx.prepare()?;
    let started = now();
    let model = load_model(ctx, checkpoint)?;
    let (_, test_set) = ctx.config.load_datasets()?;
    let spec = spec_for(ctx, &test_set.images[0])?;
    let mut excl_cfg = ctx.config.excl.clone();
    excl_cfg.seed = ctx.seed;
    if let Some(mode) = mode {
        excl_cfg.objective_mode = mode;
    }
    let report = measure_exclusivity(&model, &test_set, &spec, &excl_cfg)?;
    let report_path = ctx.path("excl_report.json");
    fs::write(&report_path, report.to_json()?)?;

    let mut artifacts = BTreeMap::new();
    artifacts.insert("excl_report".to_string(), report_path);
    let mut params = BTreeMap::new();
    params.insert("mode".into(), serde_json::to_value(excl_cfg.objective_mode)?);
    params.insert("mask_rate".into(), json_num(ctx.config.poison.mask_rate));
    params.insert(
        "n_succeeded".into(),
        serde_json::Value::from(report.n_succeeded),
    );
    ctx.finish(
        "excl",
        started,
        params,
        artifacts,
        MetricSummary {
            excl: Some(report.aggregate_excl),
            ..MetricSummary::default()
        },
    )
}

pub fn stage_nc(ctx: &StageCtx, checkpoint: &Path) -> Result<RunRecord> {
    ctx.prepare()?;
    let started = now();
    let model = load_model(ctx, checkpoint)?;
    let (_, test_set) = ctx.config.load_datasets()?;
    let mut cfg = ctx.config.defense.nc.clone();
    cfg.seed = ctx.seed;

    // Same repeat/class substream layout as the library's scan, but keeping
    // the reversed triggers of the first repeat for image export.
    let k = test_set.num_classes;
    let mut per_repeat_indices = Vec::with_capacity(cfg.repeats);
    let mut l1_sums = vec![0.0; k];
    let mut kept: Vec<ReversedTrigger> = Vec::new();
    for repeat in 0..cfg.repeats {
        let repeat_seed = substream_indexed(cfg.seed, "nc-repeat", repeat as u64);
        let mut norms = Vec::with_capacity(k);
        for class in 0..k {
            let class_seed = substream_indexed(repeat_seed, "nc-class", class as u64);
            let reversed = nc_reverse_trigger(&model, &test_set, class, &cfg, class_seed)?;
            norms.push(reversed.l1_norm);
            if repeat == 0 {
                kept.push(reversed);
            }
        }
        for (sum, n) in l1_sums.iter_mut().zip(&norms) {
            *sum += n;
        }
        per_repeat_indices.push(nc_anomaly_index(&norms)?.anomaly_index);
    }
    let mean_l1: Vec<f64> = l1_sums.iter().map(|s| s / cfg.repeats as f64).collect();
    let mut verdict = nc_anomaly_index(&mean_l1)?;
    verdict.repeats = cfg.repeats;
    verdict.anomaly_index =
        per_repeat_indices.iter().sum::<f64>() / per_repeat_indices.len() as f64;
    verdict.flagged = verdict.anomaly_index > 2.0;
    verdict.per_repeat_indices = per_repeat_indices;

    let verdict_path = ctx.path("nc_verdict.json");
    fs::write(&verdict_path, serde_json::to_string_pretty(&verdict)?)?;
    let mut artifacts = BTreeMap::new();
    artifacts.insert("nc_verdict".to_string(), verdict_path);
    for reversed in &kept {
        let name = format!("nc_trigger_class{}.png", reversed.class);
        let path = ctx.path(&name);
        crate::plot::write_reversed_trigger_png(reversed, &path)?;
        artifacts.insert(format!("nc_trigger_class{}", reversed.class), path);
    }

    let mut params = BTreeMap::new();
    params.insert("repeats".into(), serde_json::Value::from(cfg.repeats));
    params.insert("flagged".into(), serde_json::Value::from(verdict.flagged));
    ctx.finish(
        "nc",
        started,
        params,
        artifacts,
        MetricSummary {
            nc_index: Some(verdict.anomaly_index),
            ..MetricSummary::default()
        },
    )
}

pub fn stage_strip(ctx: &StageCtx, checkpoint: &Path) -> Result<RunRecord> {
    ctx.prepare()?;
    let started = now();
    let model = load_model(ctx, checkpoint)?;
    let (train_set, test_set) = ctx.config.load_datasets()?;
    let spec = spec_for(ctx, &test_set.images[0])?;
    let mut cfg = ctx.config.defense.strip.clone();
    cfg.seed = ctx.seed;

    let clean: Vec<Image> = test_set
        .images
        .iter()
        .take(cfg.n_inputs)
        .cloned()
        .collect();
    let triggered: Vec<Image> = test_set
        .samples()
        .filter(|(_, label)| *label != spec.target_label)
        .take(cfg.n_inputs)
        .map(|(img, _)| apply_trigger(img, &spec))
        .collect::<belt_core::Result<_>>()?;
    let overlays: Vec<Image> = train_set
        .images
        .iter()
        .take(cfg.n_overlays)
        .cloned()
        .collect();
    let verdict = strip_scan(&model, &clean, &triggered, &overlays, &cfg)?;

    let verdict_path = ctx.path("strip_verdict.json");
    fs::write(&verdict_path, serde_json::to_string_pretty(&verdict)?)?;
    let mut artifacts = BTreeMap::new();
    artifacts.insert("strip_verdict".to_string(), verdict_path);
    let mut params = BTreeMap::new();
    params.insert("n_inputs".into(), serde_json::Value::from(clean.len()));
    params.insert("n_overlays".into(), serde_json::Value::from(overlays.len()));
    ctx.finish(
        "strip",
        started,
        params,
        artifacts,
        MetricSummary {
            strip_overlap: Some(verdict.overlap),
            ..MetricSummary::default()
        },
    )
}

pub fn stage_eval(ctx: &StageCtx, checkpoint: &Path) -> Result<RunRecord> {
    ctx.prepare()?;
    let started = now();
    let model = load_model(ctx, checkpoint)?;
    let (_, test_set) = ctx.config.load_datasets()?;
    let spec = spec_for(ctx, &test_set.images[0])?;
    let cda = evaluate_cda(&model, &test_set)?;
    let asr = evaluate_asr(&model, &test_set, &spec)?;

    let summary = serde_json::json!({ "cda": cda, "asr": asr });
    let path = ctx.path("eval_report.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)?)?;
    let mut artifacts = BTreeMap::new();
    artifacts.insert("eval_report".to_string(), path);
    ctx.finish(
        "eval",
        started,
        BTreeMap::new(),
        artifacts,
        MetricSummary {
            cda: Some(cda),
            asr: Some(asr),
            ..MetricSummary::default()
        },
    )
}
