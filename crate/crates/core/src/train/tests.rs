use super::*;
use crate::data::{generate_synthetic, load_examples, Example, SyntheticSpec};
use crate::numeric::{RngStream, Tape};
use crate::objectives::inverse_frequency_alpha;

fn tiny_config() -> TrainConfig {
    TrainConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        n_experts: 2,
        expert_hidden: 16,
        classifier_hidden: 8,
        proj_dim: 8,
        gcn_width: 8,
        dropout: 0.0,
        lr0: 1e-3,
        batch_size: 8,
        max_epochs: 3,
        synthetic_width: 8,
        ..Default::default()
    }
}

fn dataset(seed: u64) -> (Vec<Example>, Vec<Example>) {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec { classes: 2, per_class: 8, min_len: 5, max_len: 9, width: 8, seed, ..Default::default() };
    let recs = generate_synthetic(&spec, dir.path()).unwrap();
    let ex = load_examples(&recs, dir.path(), &tiny_config().feature_options()).unwrap();
    let (val, train): (Vec<_>, Vec<_>) = ex.into_iter().enumerate().partition(|(i, _)| i % 4 == 0);
    (train.into_iter().map(|p| p.1).collect(), val.into_iter().map(|p| p.1).collect())
}

#[test]
fn same_seed_same_run_and_checkpoint_bytes() {
    let (train, val) = dataset(1);
    let a = run_training(&train, &val, 2, &tiny_config()).unwrap();
    let b = run_training(&train, &val, 2, &tiny_config()).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    assert_eq!(a.log.len(), 3);
}

#[test]
fn checkpoint_save_load_save_is_identical() {
    let (train, val) = dataset(2);
    let cfg = TrainConfig { swa_start_epoch: Some(1), ..tiny_config() };
    let out = run_training(&train, &val, 2, &cfg).unwrap();
    let swa = out.checkpoint.swa.as_ref().unwrap();
    assert_eq!((swa.count, swa.start), (2, 1));
    assert!(out.swa_val.is_some());
    assert_eq!(out.log.iter().map(|r| r.swa_active).collect::<Vec<_>>(), [false, true, true]);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.camc");
    out.checkpoint.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, out.checkpoint);
    assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());

    let model = back.model().unwrap();
    let refs: Vec<&Example> = val.iter().collect();
    assert_eq!(evaluate(&model, &refs).unwrap().report, out.raw_val);
}

#[test]
fn corrupted_checkpoints_rejected() {
    let (train, val) = dataset(3);
    let cfg = TrainConfig { max_epochs: 1, ..tiny_config() };
    let bytes = run_training(&train, &val, 2, &cfg).unwrap().checkpoint.to_bytes().unwrap();
    let mut flipped = bytes.clone();
    *flipped.last_mut().unwrap() ^= 1;
    assert!(matches!(Checkpoint::from_bytes(&flipped), Err(crate::Error::Checkpoint(_))));
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());
    assert!(Checkpoint::from_bytes(b"CAMT\x01").is_err());
}

#[test]
fn zero_lambdas_give_the_plain_focal_trajectory() {
    let (train, val) = dataset(4);
    let cfg = TrainConfig {
        lambda_aux: 0.0,
        lambda_contrast: 0.0,
        lambda_div: 0.0,
        batch_size: 64,
        max_epochs: 1,
        ..tiny_config()
    };
    let out = run_training(&train, &val, 2, &cfg).unwrap();

    // one full batch: the epoch loss is the focal loss of the initial weights
    let (widths, node) = crate::data::feature_widths(&train).unwrap();
    let model = crate::model::Model::init(cfg.model_spec(widths, node, 2), cfg.seed).unwrap();
    let mut counts = [0; 2];
    train.iter().for_each(|e| counts[e.label] += 1);
    let alpha = inverse_frequency_alpha(&counts);
    let mut tape = Tape::new();
    model.bind(&mut tape).unwrap();
    let mut focal = 0.0;
    for e in &train {
        let o = model
            .forward_sample(&mut tape, &e.bundle, crate::backbone::ClassCondition::Label(e.label), &mut RngStream::new(0), true)
            .unwrap();
        let p = tape.softmax(o.logits);
        let pt = tape.value(p).data()[e.label];
        focal += -alpha[e.label] * (1.0 - pt).powf(cfg.focal_gamma) * pt.ln();
    }
    focal /= train.len() as f64;
    assert!((out.log[0].train_loss - focal).abs() < 1e-10, "{} vs {focal}", out.log[0].train_loss);
}

#[test]
fn early_stopping_honours_patience() {
    let (train, val) = dataset(5);
    let cfg = TrainConfig { lr0: 0.5, max_epochs: 12, patience: 1, swa_start_epoch: Some(11), ..tiny_config() };
    let out = run_training(&train, &val, 2, &cfg).unwrap();
    if out.stopped_early {
        let n = out.log.len();
        assert!((2..12).contains(&n));
        assert!(out.log[n - 1].val_loss >= out.log[..n - 1].iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min));
    } else {
        assert_eq!(out.log.len(), 12);
    }
    assert_eq!(out.checkpoint.epoch, out.log.len());
}

#[test]
fn label_outside_model_classes_is_data_error() {
    let (train, val) = dataset(6);
    let cfg = TrainConfig { max_epochs: 1, ..tiny_config() };
    let model = run_training(&train, &val, 2, &cfg).unwrap().checkpoint.model().unwrap();
    let mut bad = val[0].clone();
    bad.label = 2;
    assert!(matches!(evaluate(&model, &[&bad]), Err(crate::Error::Data(_))));
    assert!(matches!(run_training(&train, &[], 2, &cfg), Err(crate::Error::Data(_))));
}

#[test]
fn epoch_log_csv_columns() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.csv");
    let rec = EpochRecord { epoch: 0, lr: 1e-4, train_loss: 0.5, val_loss: 0.25, val_f1_macro: 1.0, val_mcc: 0.0, swa_active: false };
    write_epoch_log(&[rec], &path).unwrap();
    assert_eq!(
        std::fs::read_to_string(&path).unwrap(),
        "epoch,lr,train_loss,val_loss,val_f1_macro,val_mcc,swa_active\n0,0.0001,0.5,0.25,1,0,false\n"
    );
}
