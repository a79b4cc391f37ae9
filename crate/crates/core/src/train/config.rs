use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::DiversityMode;
use crate::error::{Error, Result};
use crate::features::{FeatureOptions, Modality, M};
use crate::model::{LossOptions, ModelSpec};
use crate::numeric::AdamConfig;
use crate::objectives::{LossWeights, SupConOptions};

/// A component removed for an ablation run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    #[serde(rename = "onehot")]
    OneHot,
    Blosum,
    Esm,
    Struct,
    Gcn,
    Amf,
    Moe,
    Contrastive,
    Swa,
}

impl Ablation {
    pub const ALL: [Ablation; 9] = [
        Ablation::OneHot,
        Ablation::Blosum,
        Ablation::Esm,
        Ablation::Struct,
        Ablation::Gcn,
        Ablation::Amf,
        Ablation::Moe,
        Ablation::Contrastive,
        Ablation::Swa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::OneHot => "onehot",
            Ablation::Blosum => "blosum",
            Ablation::Esm => "esm",
            Ablation::Struct => "struct",
            Ablation::Gcn => "gcn",
            Ablation::Amf => "amf",
            Ablation::Moe => "moe",
            Ablation::Contrastive => "contrastive",
            Ablation::Swa => "swa",
        }
    }

    pub fn modality(self) -> Option<Modality> {
        match self {
            Ablation::OneHot => Some(Modality::OneHot),
            Ablation::Blosum => Some(Modality::Blosum),
            Ablation::Esm => Some(Modality::Esm),
            Ablation::Struct => Some(Modality::Struct),
            Ablation::Gcn => Some(Modality::Gcn),
            _ => None,
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown ablation {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// `lr0 · decay^⌊e / every⌋`.
    #[default]
    Step,
    /// Cosine cycles of length `lr_cycle` between `lr_min` and the step
    /// schedule's value.
    CosineCyclic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceStrategy {
    #[default]
    None,
    Oversample,
    Downsample,
}

/// Training configuration. Reads from flat JSON; missing keys take their
/// defaults and unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_experts: usize,
    pub expert_hidden: usize,
    pub classifier_hidden: usize,
    pub proj_dim: usize,
    pub gcn_width: usize,
    pub dropout: f64,
    pub positional: bool,
    pub max_len: usize,
    pub amf_normalize: bool,
    pub amf_two_pass: bool,

    pub lr0: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub lr_schedule: LrSchedule,
    pub lr_cycle: usize,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Validation-loss decrease needed to count as an improvement.
    pub early_stop_min_delta: f64,
    /// Defaults to `⌈0.75 · max_epochs⌉`, kept below `max_epochs`.
    pub swa_start_epoch: Option<usize>,

    pub lambda_aux: f64,
    pub lambda_contrast: f64,
    pub lambda_div: f64,
    pub temperature: f64,
    pub focal_gamma: f64,
    pub focal_alpha: Option<Vec<f64>>,
    pub hard_negatives: bool,
    pub feature_augment: bool,
    pub diversity_mode: DiversityMode,

    pub graph_threshold: f64,
    pub synthetic_width: usize,
    pub balance: BalanceStrategy,
    pub balance_jitter: bool,
    pub seed: u64,
    pub ablate: Vec<Ablation>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let loss = LossWeights::default();
        Self {
            d_model: 256,
            n_layers: 2,
            n_heads: 8,
            n_experts: 4,
            expert_hidden: 512,
            classifier_hidden: 128,
            proj_dim: 128,
            gcn_width: 64,
            dropout: 0.1,
            positional: false,
            max_len: 512,
            amf_normalize: false,
            amf_two_pass: false,
            lr0: 1e-4,
            lr_decay: 0.95,
            lr_decay_every: 10,
            lr_schedule: LrSchedule::Step,
            lr_cycle: 10,
            lr_min: 1e-6,
            weight_decay: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 64,
            max_epochs: 50,
            patience: 10,
            early_stop_min_delta: 0.0,
            swa_start_epoch: None,
            lambda_aux: loss.lambda_aux,
            lambda_contrast: loss.lambda_contrast,
            lambda_div: loss.lambda_div,
            temperature: loss.temperature,
            focal_gamma: loss.focal_gamma,
            focal_alpha: None,
            hard_negatives: false,
            feature_augment: false,
            diversity_mode: DiversityMode::BatchMean,
            graph_threshold: crate::features::graph::DEFAULT_THRESHOLD,
            synthetic_width: 64,
            balance: BalanceStrategy::None,
            balance_jitter: false,
            seed: 0,
            ablate: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr0", self.lr0),
            ("lr_decay", self.lr_decay),
            ("lr_min", self.lr_min),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("lr_decay_every", self.lr_decay_every),
            ("lr_cycle", self.lr_cycle),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if !(self.early_stop_min_delta >= 0.0) {
            return Err(Error::invalid("early_stop_min_delta must be nonnegative"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid("weight_decay must be nonnegative"));
        }
        if self.swa_start() >= self.max_epochs {
            return Err(Error::invalid(format!(
                "swa_start_epoch {} must be below max_epochs {}",
                self.swa_start(),
                self.max_epochs
            )));
        }
        if self.ablate.iter().filter_map(|a| a.modality()).count() == M {
            return Err(Error::invalid("cannot ablate every modality"));
        }
        self.loss_weights().validate()
    }

    /// First averaged epoch: explicit, or three quarters of the way in but
    /// never past the last epoch.
    pub fn swa_start(&self) -> usize {
        self.swa_start_epoch
            .unwrap_or_else(|| (3 * self.max_epochs).div_ceil(4).min(self.max_epochs.saturating_sub(1)))
    }

    pub fn ablated(&self, a: Ablation) -> bool {
        self.ablate.contains(&a)
    }

    pub fn swa_enabled(&self) -> bool {
        !self.ablated(Ablation::Swa)
    }

    pub fn enabled_modalities(&self) -> [bool; M] {
        let mut on = [true; M];
        for a in &self.ablate {
            if let Some(m) = a.modality() {
                on[m.index()] = false;
            }
        }
        on
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_aux: self.lambda_aux,
            lambda_contrast: if self.ablated(Ablation::Contrastive) { 0.0 } else { self.lambda_contrast },
            lambda_div: if self.ablated(Ablation::Moe) { 0.0 } else { self.lambda_div },
            temperature: self.temperature,
            focal_gamma: self.focal_gamma,
            focal_alpha: self.focal_alpha.clone(),
        }
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            supcon: SupConOptions { hard_negatives: self.hard_negatives },
            feature_augment: self.feature_augment,
            diversity: Some(self.diversity_mode),
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr0,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn feature_options(&self) -> FeatureOptions {
        FeatureOptions {
            enabled: self.enabled_modalities(),
            graph_threshold: self.graph_threshold,
            synthetic_width: self.synthetic_width,
            ..Default::default()
        }
    }

    /// Architecture for the given data widths and class count.
    pub fn model_spec(&self, input_widths: [usize; M], gcn_node_width: usize, classes: usize) -> ModelSpec {
        ModelSpec {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            n_experts: self.n_experts,
            expert_hidden: self.expert_hidden,
            classifier_hidden: self.classifier_hidden,
            proj_dim: self.proj_dim,
            gcn_width: self.gcn_width,
            classes,
            input_widths,
            gcn_node_width,
            dropout: self.dropout,
            positional: self.positional.then_some(self.max_len),
            enabled: self.enabled_modalities(),
            amf: !self.ablated(Ablation::Amf),
            amf_normalize: self.amf_normalize,
            amf_two_pass: self.amf_two_pass,
            moe: !self.ablated(Ablation::Moe),
            contrastive: !self.ablated(Ablation::Contrastive),
        }
    }
}

/// Learning rate for epoch `e` (0-based).
pub fn lr_at_epoch(e: usize, cfg: &TrainConfig) -> f64 {
    let step = cfg.lr0 * cfg.lr_decay.powi((e / cfg.lr_decay_every) as i32);
    match cfg.lr_schedule {
        LrSchedule::Step => step,
        LrSchedule::CosineCyclic => {
            let phase = (e % cfg.lr_cycle) as f64 / cfg.lr_cycle as f64;
            let low = cfg.lr_min.min(step);
            low + 0.5 * (step - low) * (1.0 + (std::f64::consts::PI * phase).cos())
        }
    }
}
