use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::{lr_at_epoch, TrainConfig};
use super::metrics::MetricsReport;
use super::swa::{swa_average, SwaState};
use crate::data::{balance_classes, feature_widths, Example};
use crate::error::{Error, Result};
use crate::features::ModalityBundle;
use crate::model::{Model, Prediction};
use crate::numeric::{AdamState, RngStream, Tape, Tensor};
use crate::objectives::inverse_frequency_alpha;

/// One row of the per-epoch log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_f1_macro: f64,
    pub val_mcc: f64,
    pub swa_active: bool,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,lr,train_loss,val_loss,val_f1_macro,val_mcc,swa_active";

pub fn write_epoch_log(records: &[EpochRecord], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{EPOCH_LOG_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch, r.lr, r.train_loss, r.val_loss, r.val_f1_macro, r.val_mcc, r.swa_active
        )?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
    pub stopped_early: bool,
    /// Validation metrics of the final raw weights.
    pub raw_val: MetricsReport,
    /// Validation metrics of the averaged weights, when SWA absorbed any.
    pub swa_val: Option<MetricsReport>,
}

/// Predictions of one model over a set of examples.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub predictions: Vec<Prediction>,
    pub labels: Vec<usize>,
}

impl Evaluation {
    pub fn scores(&self) -> Vec<Vec<f64>> {
        self.predictions.iter().map(|p| p.probs.clone()).collect()
    }
}

fn check_labels(examples: &[&Example], classes: usize) -> Result<()> {
    match examples.iter().find(|e| e.label >= classes) {
        Some(e) => Err(Error::data(format!(
            "{}: label {} but the model has {classes} classes",
            e.bundle.id, e.label
        ))),
        None => Ok(()),
    }
}

pub fn evaluate(model: &Model, examples: &[&Example]) -> Result<Evaluation> {
    if examples.is_empty() {
        return Err(Error::data("nothing to evaluate"));
    }
    let classes = model.spec.classes;
    check_labels(examples, classes)?;
    let bundles: Vec<&ModalityBundle> = examples.iter().map(|e| &e.bundle).collect();
    let predictions = model.predict(&bundles)?;
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let scores: Vec<Vec<f64>> = predictions.iter().map(|p| p.probs.clone()).collect();
    let report = MetricsReport::from_scores(&scores, &labels, classes)?;
    Ok(Evaluation { report, predictions, labels })
}

/// Mean training objective over `examples` in inference mode.
fn validation_loss(
    model: &Model,
    examples: &[&Example],
    alpha: &[f64],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let weights = cfg.loss_weights();
    let opts = cfg.loss_options();
    let mut rng = RngStream::new(cfg.seed).fork(0x7A1);
    let mut total = 0.0;
    for chunk in examples.chunks(cfg.batch_size) {
        let batch: Vec<(&ModalityBundle, usize)> = chunk.iter().map(|e| (&e.bundle, e.label)).collect();
        let mut tape = Tape::new();
        model.bind(&mut tape)?;
        let loss = model.batch_loss(&mut tape, &batch, alpha, &weights, &opts, &mut rng, false, epoch)?;
        total += tape.value(loss.total).item() * chunk.len() as f64;
    }
    Ok(total / examples.len() as f64)
}

/// Trains a fresh model on `train`, monitoring `val`.
pub fn run_training(train: &[Example], val: &[Example], classes: usize, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::data("training and validation splits must be non-empty"));
    }
    let val: Vec<&Example> = val.iter().collect();
    check_labels(&train.iter().collect::<Vec<_>>(), classes)?;
    check_labels(&val, classes)?;

    let mut rng = RngStream::new(cfg.seed).fork(0x7EA1);
    let train = balance_classes(train, classes, cfg.balance, cfg.balance_jitter, &mut rng)?;
    let (widths, node_width) = feature_widths(&train)?;
    let spec = cfg.model_spec(widths, node_width, classes);
    let mut model = Model::init(spec, cfg.seed)?;
    log::info!("model has {} parameters", model.param_count());

    let alpha = match &cfg.focal_alpha {
        Some(a) if a.len() == classes => a.clone(),
        Some(a) => return Err(Error::invalid(format!("{} focal weights for {classes} classes", a.len()))),
        None => {
            let mut counts = vec![0usize; classes];
            train.iter().for_each(|e| counts[e.label] += 1);
            inverse_frequency_alpha(&counts)
        }
    };
    let weights = cfg.loss_weights();
    let opts = cfg.loss_options();
    let mut adam = AdamState::new(&model.params.tensors, cfg.adam());
    let mut swa = cfg.swa_enabled().then(|| SwaState::new(cfg.swa_start()));

    let mut log = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = 0;
    for epoch in 0..cfg.max_epochs {
        let lr = lr_at_epoch(epoch, cfg);
        adam.set_lr(lr);
        rng.shuffle(&mut order);
        let mut train_total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<(&ModalityBundle, usize)> =
                idx.iter().map(|&i| (&train[i].bundle, train[i].label)).collect();
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape)?;
            let loss = model.batch_loss(&mut tape, &batch, &alpha, &weights, &opts, &mut rng, true, epoch)?;
            train_total += tape.value(loss.total).item() * batch.len() as f64;
            let mut grads = tape.backward(loss.total)?;
            let grads: Vec<Tensor> = vars
                .iter()
                .zip(&model.params.tensors)
                .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            adam.step(&mut model.params.tensors, &grads)?;
        }
        epochs = epoch + 1;

        let val_loss = validation_loss(&model, &val, &alpha, cfg, epoch)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite { component: "validation".into(), epoch });
        }
        let metrics = evaluate(&model, &val)?.report;
        let swa_active = match swa.as_mut() {
            Some(s) if epoch >= s.start => {
                swa_average(s, &model.params.tensors)?;
                true
            }
            _ => false,
        };
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: train_total / train.len() as f64,
            val_loss,
            val_f1_macro: metrics.f1,
            val_mcc: metrics.mcc,
            swa_active,
        };
        log::info!(
            "epoch {epoch}: train {:.4} val {:.4} f1 {:.4} mcc {:.4}{}",
            record.train_loss,
            val_loss,
            metrics.f1,
            metrics.mcc,
            if swa_active { " swa" } else { "" }
        );
        log.push(record);

        if val_loss < best - cfg.early_stop_min_delta {
            best = val_loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                log::info!("early stop after epoch {epoch}");
                stopped_early = true;
                break;
            }
        }
    }

    let checkpoint = Checkpoint {
        config: cfg.clone(),
        spec: model.spec.clone(),
        epoch: epochs,
        rng: rng.state(),
        params: model.params.clone(),
        adam,
        swa,
    };
    let raw_val = evaluate(&model, &val)?.report;
    let swa_val = match checkpoint.swa_model()? {
        Some(m) => Some(evaluate(&m, &val)?.report),
        None => None,
    };
    Ok(TrainOutcome { checkpoint, log, stopped_early, raw_val, swa_val })
}
