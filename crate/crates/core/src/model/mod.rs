//! The full network: parameter layout, initialization, per-sample forward
//! pass and the batch objective.

mod layout;

use serde::{Deserialize, Serialize};

use crate::backbone::{
    amf_fuse, amf_weights, expert_diversity_loss, mean_pool, moe_forward, transformer_encode, AmfOptions,
    AmfWeights, ClassCondition, DiversityMode, EncoderOptions, EncoderTrace,
};
use crate::error::{Error, Result};
use crate::features::{gcn_forward, project_modality, GcnActivation, Modality, ModalityBundle, M};
use crate::numeric::{RngStream, Tape, Tensor, Var};
use crate::objectives::{
    argmax, aux_modality_loss, classify_logits, contrastive_project, focal_loss, supcon_loss, total_loss,
    HeadActivation, LossComponents, LossWeights, SupConOptions,
};

pub use layout::Layout;

/// Architecture hyperparameters and input widths. Fully determines the
/// parameter list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_experts: usize,
    pub expert_hidden: usize,
    pub classifier_hidden: usize,
    pub proj_dim: usize,
    pub gcn_width: usize,
    pub classes: usize,
    /// Column widths of the one-hot, BLOSUM, language-model and structure
    /// views. The graph slot is ignored here; see `gcn_node_width`.
    pub input_widths: [usize; M],
    /// Width of the graph's node features.
    pub gcn_node_width: usize,
    pub dropout: f64,
    /// Maximum sequence length for a learned positional table; `None` adds no
    /// position information.
    pub positional: Option<usize>,
    pub enabled: [bool; M],
    pub amf: bool,
    pub amf_normalize: bool,
    pub amf_two_pass: bool,
    pub moe: bool,
    pub contrastive: bool,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.classes < 2 {
            return Err(Error::invalid("at least two classes are required"));
        }
        if self.moe && self.n_experts == 0 {
            return Err(Error::invalid("n_experts must be positive"));
        }
        if !self.enabled.iter().any(|&e| e) {
            return Err(Error::invalid("every modality is disabled"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Projection input width for modality `m`.
    pub fn projection_width(&self, m: Modality) -> usize {
        match m {
            Modality::Gcn => self.gcn_width,
            _ => self.input_widths[m.index()],
        }
    }
}

/// Named parameter tensors in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ModelParams,
    layout: Layout,
}

/// Everything one sample's forward pass records.
#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub logits: Var,
    pub pooled: Var,
    /// Representation fed to the classifier (expert mixture or pooled).
    pub h: Var,
    pub expert_outputs: Option<Var>,
    pub projected: [Option<Var>; M],
    pub amf: Option<AmfWeights>,
    pub trace: EncoderTrace,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossOptions {
    pub supcon: SupConOptions,
    /// Add a noisy second view of each representation to the contrastive
    /// batch.
    pub feature_augment: bool,
    pub diversity: Option<DiversityMode>,
}

pub struct BatchLoss {
    pub total: Var,
    pub parts: LossComponents,
    pub outputs: Vec<SampleOutput>,
}

/// Inference result for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub class: usize,
    pub embedding: Vec<f64>,
}

const AUGMENT_SIGMA: f64 = 0.01;

impl Model {
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = RngStream::new(seed).fork(0x1417);
        let (layout, params) = Layout::build(&spec, &mut rng);
        Ok(Self { spec, params, layout })
    }

    /// Replaces every parameter tensor, checking names and shapes.
    pub fn with_params(spec: ModelSpec, params: ModelParams) -> Result<Self> {
        let mut model = Self::init(spec, 0)?;
        if model.params.names != params.names {
            return Err(Error::Checkpoint("parameter names do not match the architecture".into()));
        }
        for (i, (have, got)) in model.params.tensors.iter().zip(&params.tensors).enumerate() {
            if have.shape() != got.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    params.names[i],
                    got.shape(),
                    have.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.params.tensors.iter().map(Tensor::len).sum()
    }

    /// Records the parameters as the first nodes of an empty tape, which is
    /// what the layout's handles refer to.
    pub fn bind(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        bind_tensors(tape, &self.params.tensors)
    }

    /// Forward pass for one sample on a tape where the parameters are bound.
    pub fn forward_sample(
        &self,
        tape: &mut Tape,
        bundle: &ModalityBundle,
        condition: ClassCondition,
        rng: &mut RngStream,
        training: bool,
    ) -> Result<SampleOutput> {
        let spec = &self.spec;
        let lay = &self.layout;
        let len = bundle.len();
        let mut projected: [Option<Var>; M] = [None; M];
        for m in Modality::ALL {
            let i = m.index();
            let Some(vars) = lay.projections[i] else { continue };
            if !bundle.present(m) {
                continue;
            }
            let raw = match (m, bundle.feature(m)) {
                (_, Some(t)) => tape.constant(t.clone()),
                (Modality::Gcn, None) => {
                    let input = bundle.gcn_input.as_ref().expect("present graph view");
                    let [w1, w2] = lay.gcn.expect("graph weights exist when the view is enabled");
                    if input.node_features.cols() != spec.gcn_node_width {
                        return Err(Error::data(format!(
                            "{}: graph node width {} but the model expects {}",
                            bundle.id,
                            input.node_features.cols(),
                            spec.gcn_node_width
                        )));
                    }
                    let adj = tape.constant(input.norm_adj.clone());
                    let x = tape.constant(input.node_features.clone());
                    gcn_forward(tape, adj, x, &[w1, w2], GcnActivation::Gelu)?
                }
                (_, None) => continue,
            };
            let width = tape.value(raw).cols();
            if width != spec.projection_width(m) {
                return Err(Error::data(format!(
                    "{}: {m} width {width} but the model expects {}",
                    bundle.id,
                    spec.projection_width(m)
                )));
            }
            projected[i] = Some(project_modality(tape, raw, &vars, spec.dropout, rng, training)?);
        }
        if projected.iter().all(Option::is_none) {
            return Err(Error::data(format!("{}: no enabled modality is present", bundle.id)));
        }

        let (fused, amf) = match &lay.amf {
            Some(vars) => {
                let w = amf_weights(tape, &projected, None, condition, vars, AmfOptions { normalize: spec.amf_normalize })?;
                (amf_fuse(tape, &projected, &w.weights)?, Some(w))
            }
            None => {
                let present = projected.iter().flatten().count() as f64;
                let uniform = tape.constant(Tensor::scalar(1.0 / present));
                let weights = projected.map(|p| p.map(|_| uniform));
                (amf_fuse(tape, &projected, &weights)?, None)
            }
        };

        let mut x = fused;
        if let Some(table) = lay.positional {
            let max_len = tape.value(table).rows();
            if len > max_len {
                return Err(Error::data(format!("{}: length {len} exceeds positional table {max_len}", bundle.id)));
            }
            let mut select = Tensor::zeros(&[len, max_len]);
            for r in 0..len {
                select.data_mut()[r * max_len + r] = 1.0;
            }
            let select = tape.constant(select);
            let pos = tape.matmul(select, table)?;
            x = tape.add(x, pos)?;
        }

        let opts = EncoderOptions { heads: spec.n_heads, dropout: spec.dropout };
        let (encoded, trace) = transformer_encode(tape, x, None, &lay.encoder, opts, rng, training)?;
        let pooled = mean_pool(tape, encoded, None)?;
        let (h, expert_outputs) = match &lay.moe {
            Some(vars) => {
                let out = moe_forward(tape, pooled, vars)?;
                (out.h, Some(out.expert_outputs))
            }
            None => (pooled, None),
        };
        let logits = classify_logits(tape, h, &lay.classifier)?;
        Ok(SampleOutput { logits, pooled, h, expert_outputs, projected, amf, trace })
    }

    /// The weighted training objective over one batch. During training the
    /// fusion is conditioned on each sample's label; otherwise on the mean
    /// class row, as at inference.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        batch: &[(&ModalityBundle, usize)],
        alpha: &[f64],
        weights: &LossWeights,
        opts: &LossOptions,
        rng: &mut RngStream,
        training: bool,
        epoch: usize,
    ) -> Result<BatchLoss> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        if alpha.len() != self.spec.classes {
            return Err(Error::invalid(format!("{} focal weights for {} classes", alpha.len(), self.spec.classes)));
        }
        let n = batch.len() as f64;
        let mut outputs = Vec::with_capacity(batch.len());
        let mut focal_terms = Vec::with_capacity(batch.len());
        let mut modal_terms = Vec::new();
        for &(bundle, y) in batch {
            if y >= self.spec.classes {
                return Err(Error::data(format!("{}: label {y} outside {} classes", bundle.id, self.spec.classes)));
            }
            let condition = if training { ClassCondition::Label(y) } else { ClassCondition::Mean };
            let out = self.forward_sample(tape, bundle, condition, rng, training)?;
            focal_terms.push(focal_loss(tape, out.logits, y, alpha[y], weights.focal_gamma)?);
            if weights.lambda_aux > 0.0 {
                modal_terms.push(aux_modality_loss(tape, &out.projected, y, &self.layout.aux)?);
            }
            outputs.push(out);
        }
        let mean_of = |tape: &mut Tape, terms: &[Var]| -> Result<Var> {
            if terms.is_empty() {
                return Ok(tape.constant(Tensor::scalar(0.0)));
            }
            let total = tape.add_all(terms)?;
            Ok(tape.scale(total, 1.0 / terms.len() as f64))
        };
        let focal_total = tape.add_all(&focal_terms)?;
        let focal = tape.scale(focal_total, 1.0 / n);
        let modal = mean_of(tape, &modal_terms)?;

        let contrast = match self.layout.projection_head {
            Some(head) if weights.lambda_contrast > 0.0 && batch.len() >= 2 => {
                let mut embeddings = Vec::with_capacity(2 * batch.len());
                let mut labels: Vec<usize> = batch.iter().map(|&(_, y)| y).collect();
                for out in &outputs {
                    embeddings.push(contrastive_project(tape, out.h, &head, HeadActivation::Gelu)?);
                }
                if opts.feature_augment {
                    for (out, &(_, y)) in outputs.iter().zip(batch) {
                        let width = tape.value(out.h).len();
                        let noise = Tensor::new(vec![width], (0..width).map(|_| AUGMENT_SIGMA * rng.normal()).collect())?;
                        let view = tape.add_const(out.h, &noise)?;
                        embeddings.push(contrastive_project(tape, view, &head, HeadActivation::Gelu)?);
                        labels.push(y);
                    }
                }
                let z = tape.stack(&embeddings)?;
                supcon_loss(tape, z, &labels, weights.temperature, opts.supcon)?
            }
            _ => tape.constant(Tensor::scalar(0.0)),
        };

        let expert_outputs: Vec<Var> = outputs.iter().filter_map(|o| o.expert_outputs).collect();
        let diversity = match opts.diversity {
            Some(mode) if weights.lambda_div > 0.0 && !expert_outputs.is_empty() => {
                expert_diversity_loss(tape, &expert_outputs, mode)?
            }
            _ => tape.constant(Tensor::scalar(0.0)),
        };

        let parts = LossComponents { focal, modal, contrast, diversity };
        let total = total_loss(tape, &parts, weights, epoch)?;
        Ok(BatchLoss { total, parts, outputs })
    }

    /// Class probabilities and classifier-input embeddings, evaluated in
    /// chunks without dropout.
    pub fn predict(&self, bundles: &[&ModalityBundle]) -> Result<Vec<Prediction>> {
        const CHUNK: usize = 32;
        let mut rng = RngStream::new(0);
        let mut out = Vec::with_capacity(bundles.len());
        for chunk in bundles.chunks(CHUNK) {
            let mut tape = Tape::new();
            self.bind(&mut tape)?;
            for bundle in chunk {
                let mut sample = self.forward_sample(&mut tape, bundle, ClassCondition::Mean, &mut rng, false)?;
                if self.spec.amf_two_pass && self.layout.amf.is_some() {
                    let first = argmax(tape.value(sample.logits).data());
                    sample = self.forward_sample(&mut tape, bundle, ClassCondition::Label(first), &mut rng, false)?;
                }
                let probs = tape.softmax(sample.logits);
                let probs = tape.value(probs).data().to_vec();
                out.push(Prediction {
                    class: argmax(&probs),
                    probs,
                    embedding: tape.value(sample.h).data().to_vec(),
                });
            }
        }
        Ok(out)
    }
}

/// Records `tensors` as the first parameter nodes of an empty tape.
pub fn bind_tensors(tape: &mut Tape, tensors: &[Tensor]) -> Result<Vec<Var>> {
    if !tape.is_empty() {
        return Err(Error::invalid("parameters must be bound to an empty tape"));
    }
    Ok(tensors.iter().map(|t| tape.param(t.clone())).collect())
}
