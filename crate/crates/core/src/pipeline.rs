//! Dataset-level orchestration shared by the command line and the tests:
//! split-aware loading, training runs with their output files, and the
//! ablation table.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{class_count, load_examples, read_manifest, Example, SampleRecord, Split, SplitAssignment};
use crate::error::{Error, Result};
use crate::features::Modality;
use crate::train::{evaluate, run_training, write_epoch_log, Ablation, Checkpoint, MetricsReport, TrainConfig, TrainOutcome};

/// A manifest, the directory its paths are relative to, and a split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub records: Vec<SampleRecord>,
    pub base: PathBuf,
    pub splits: SplitAssignment,
    pub classes: usize,
}

impl Dataset {
    pub fn open(manifest: &Path, splits: &Path) -> Result<Self> {
        let records = read_manifest(manifest)?;
        let text = std::fs::read_to_string(splits)
            .map_err(|e| Error::data(format!("cannot read split file {}: {e}", splits.display())))?;
        let splits: SplitAssignment =
            serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", splits.display())))?;
        let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        let classes = class_count(&records);
        Ok(Self { records, base, splits, classes })
    }

    pub fn records(&self, split: Split) -> Result<Vec<SampleRecord>> {
        Ok(self.splits.select(&self.records, |r| r.cluster, split)?.into_iter().cloned().collect())
    }

    /// Examples of one split, featurized as `cfg` asks.
    pub fn examples(&self, cfg: &TrainConfig, split: Split) -> Result<Vec<Example>> {
        let records = self.records(split)?;
        if records.is_empty() {
            return Err(Error::data(format!("split {split} is empty")));
        }
        load_examples(&records, &self.base, &cfg.feature_options())
    }
}

/// What `train` records next to the checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub epochs: usize,
    pub stopped_early: bool,
    /// Modalities the model saw, in slot order.
    pub modalities: Vec<Modality>,
    /// The graph view was built on one-hot nodes for lack of the
    /// language-model view.
    pub gcn_fallback: bool,
    pub parameters: usize,
    pub raw_val: MetricsReport,
    pub swa_val: Option<MetricsReport>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.camc";
pub const EPOCH_LOG_FILE: &str = "epochs.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Trains on the train split, monitors the val split and writes the
/// checkpoint, the epoch log and a summary under `out`.
pub fn train_to_dir(data: &Dataset, cfg: &TrainConfig, out: &Path) -> Result<(TrainOutcome, RunSummary)> {
    cfg.validate()?;
    let train = data.examples(cfg, Split::Train)?;
    let val = data.examples(cfg, Split::Val)?;
    let outcome = run_training(&train, &val, data.classes, cfg)?;
    std::fs::create_dir_all(out)?;
    outcome.checkpoint.save(&out.join(CHECKPOINT_FILE))?;
    write_epoch_log(&outcome.log, &out.join(EPOCH_LOG_FILE))?;
    let enabled = cfg.enabled_modalities();
    let summary = RunSummary {
        epochs: outcome.log.len(),
        stopped_early: outcome.stopped_early,
        modalities: Modality::ALL.into_iter().filter(|m| enabled[m.index()]).collect(),
        gcn_fallback: train.iter().any(|e| e.bundle.gcn_input.as_ref().is_some_and(|g| g.used_fallback)),
        parameters: outcome.checkpoint.params.tensors.iter().map(|t| t.len()).sum(),
        raw_val: outcome.raw_val.clone(),
        swa_val: outcome.swa_val.clone(),
    };
    std::fs::write(out.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    Ok((outcome, summary))
}

/// Metrics of a checkpoint on one split: raw weights, and averaged weights
/// when the checkpoint carries them.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub raw: MetricsReport,
    pub swa: Option<MetricsReport>,
}

pub fn evaluate_checkpoint(ckpt: &Checkpoint, data: &Dataset, split: Split) -> Result<EvalReport> {
    let examples = data.examples(&ckpt.config, split)?;
    let refs: Vec<&Example> = examples.iter().collect();
    let raw = evaluate(&ckpt.model()?, &refs)?.report;
    let swa = match ckpt.swa_model()? {
        Some(m) => Some(evaluate(&m, &refs)?.report),
        None => None,
    };
    Ok(EvalReport { split, raw, swa })
}

/// One row of the ablation table: metrics averaged over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `None` for the full model.
    pub removed: Option<Ablation>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
    pub mcc: f64,
    /// Per-seed test F1, in seed order.
    pub f1_by_seed: Vec<f64>,
}

impl AblationRow {
    pub fn label(&self) -> String {
        match self.removed {
            None => "full".into(),
            Some(a) => format!("w/o {a}"),
        }
    }
}

/// Test-split metrics of the full model and of each single-component
/// ablation, each averaged over `seeds`. The weights evaluated are the
/// averaged ones when SWA is active, otherwise the final ones.
pub fn ablation_table(
    data: &Dataset,
    base: &TrainConfig,
    removed: &[Option<Ablation>],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::invalid("at least one seed is required"));
    }
    let mut rows = Vec::with_capacity(removed.len());
    for &r in removed {
        let mut cfg = base.clone();
        if let Some(a) = r {
            if !cfg.ablate.contains(&a) {
                cfg.ablate.push(a);
            }
        }
        cfg.validate()?;
        let train = data.examples(&cfg, Split::Train)?;
        let val = data.examples(&cfg, Split::Val)?;
        let test = data.examples(&cfg, Split::Test)?;
        let test_refs: Vec<&Example> = test.iter().collect();
        let mut sums = [0.0; 5];
        let mut f1_by_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            cfg.seed = seed;
            let outcome = run_training(&train, &val, data.classes, &cfg)?;
            let model = match outcome.checkpoint.swa_model()? {
                Some(m) => m,
                None => outcome.checkpoint.model()?,
            };
            let rep = evaluate(&model, &test_refs)?.report;
            log::info!("{}: seed {seed} test f1 {:.4}", r.map_or("full".into(), |a| format!("w/o {a}")), rep.f1);
            let auc = rep.auc.unwrap_or(f64::NAN);
            for (s, v) in sums.iter_mut().zip([rep.precision, rep.recall, rep.f1, auc, rep.mcc]) {
                *s += v;
            }
            f1_by_seed.push(rep.f1);
        }
        let n = seeds.len() as f64;
        let [precision, recall, f1, auc, mcc] = sums.map(|s| s / n);
        rows.push(AblationRow { removed: r, precision, recall, f1, auc, mcc, f1_by_seed });
    }
    Ok(rows)
}

pub const ABLATION_HEADER: &str = "removed,precision,recall,f1,auc,mcc";

pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{ABLATION_HEADER}")?;
    for r in rows {
        writeln!(out, "{},{:.4},{:.4},{:.4},{:.4},{:.4}", r.label(), r.precision, r.recall, r.f1, r.auc, r.mcc)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// The full model followed by every single-component ablation.
pub fn all_ablations() -> Vec<Option<Ablation>> {
    std::iter::once(None).chain(Ablation::ALL.into_iter().map(Some)).collect()
}

/// Pooled classifier inputs as CSV: `id,label,predicted,h0,h1,...`.
pub fn write_embeddings_csv(ckpt: &Checkpoint, data: &Dataset, split: Split, path: &Path) -> Result<usize> {
    let examples = data.examples(&ckpt.config, split)?;
    let refs: Vec<&Example> = examples.iter().collect();
    let eval = evaluate(&ckpt.model()?, &refs)?;
    let width = eval.predictions.first().map_or(0, |p| p.embedding.len());
    let mut out = Vec::new();
    write!(out, "id,label,predicted")?;
    for i in 0..width {
        write!(out, ",h{i}")?;
    }
    writeln!(out)?;
    for (e, p) in examples.iter().zip(&eval.predictions) {
        write!(out, "{},{},{}", e.bundle.id, e.label, p.class)?;
        for v in &p.embedding {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    std::fs::write(path, out)?;
    Ok(examples.len())
}
