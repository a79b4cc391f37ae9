use super::{ModelParams, ModelSpec};
use crate::backbone::{AmfVars, EncoderLayerVars, ExpertVars, MoeVars};
use crate::features::{Modality, ProjectionVars, M};
use crate::numeric::{RngStream, Tensor, Var};
use crate::objectives::{AuxHead, ClassifierHead, ProjectionHead};

/// Tape handles for every parameter group. Valid on a tape whose first
/// nodes are the model parameters in order (see `Model::bind`).
#[derive(Clone, Debug)]
pub struct Layout {
    pub projections: [Option<ProjectionVars>; M],
    pub gcn: Option<[Var; 2]>,
    pub positional: Option<Var>,
    pub amf: Option<AmfVars>,
    pub encoder: Vec<EncoderLayerVars>,
    pub moe: Option<MoeVars>,
    pub classifier: ClassifierHead,
    pub projection_head: Option<ProjectionHead>,
    pub aux: [Option<AuxHead>; M],
}

struct Builder<'a> {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    rng: &'a mut RngStream,
}

impl Builder<'_> {
    fn push(&mut self, name: String, t: Tensor) -> Var {
        let v = Var::from_index(self.tensors.len());
        self.names.push(name);
        self.tensors.push(t);
        v
    }

    /// Glorot-uniform `rows × cols` matrix.
    fn weight(&mut self, name: String, rows: usize, cols: usize) -> Var {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| limit * (2.0 * self.rng.uniform() - 1.0)).collect();
        self.push(name, Tensor::from_parts(vec![rows, cols], data))
    }

    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> Var {
        let n = shape.iter().product();
        let data = (0..n).map(|_| std * self.rng.normal()).collect();
        self.push(name, Tensor::from_parts(shape.to_vec(), data))
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> Var {
        self.push(name, Tensor::zeros(shape))
    }

    fn ones(&mut self, name: String, shape: &[usize]) -> Var {
        self.push(name, Tensor::ones(shape))
    }
}

impl Layout {
    pub(super) fn build(spec: &ModelSpec, rng: &mut RngStream) -> (Layout, ModelParams) {
        let mut b = Builder { names: Vec::new(), tensors: Vec::new(), rng };
        let d = spec.d_model;

        let mut projections = [None; M];
        let mut gcn = None;
        for m in Modality::ALL {
            if !spec.enabled[m.index()] {
                continue;
            }
            if m == Modality::Gcn {
                gcn = Some([
                    b.weight("gcn.w1".into(), spec.gcn_node_width, spec.gcn_width),
                    b.weight("gcn.w2".into(), spec.gcn_width, spec.gcn_width),
                ]);
            }
            let p = format!("proj.{m}");
            projections[m.index()] = Some(ProjectionVars {
                weight: b.weight(format!("{p}.weight"), spec.projection_width(m), d),
                bias: b.zeros(format!("{p}.bias"), &[d]),
                norm_gain: b.ones(format!("{p}.norm_gain"), &[d]),
                norm_bias: b.zeros(format!("{p}.norm_bias"), &[d]),
            });
        }

        let positional = spec.positional.map(|max_len| b.normal("positional".into(), &[max_len, d], 0.02));

        let amf = spec.amf.then(|| AmfVars {
            alpha_raw: b.zeros("amf.alpha_raw".into(), &[M]),
            gate_weight: b.weight("amf.gate_weight".into(), d, 1),
            gate_bias: b.zeros("amf.gate_bias".into(), &[1]),
            class_table: b.ones("amf.class_table".into(), &[spec.classes, M]),
        });

        let ffn = 4 * d;
        let encoder = (0..spec.n_layers)
            .map(|l| {
                let p = format!("encoder.{l}");
                EncoderLayerVars {
                    attn_norm_gain: b.ones(format!("{p}.attn_norm_gain"), &[d]),
                    attn_norm_bias: b.zeros(format!("{p}.attn_norm_bias"), &[d]),
                    wq: b.weight(format!("{p}.wq"), d, d),
                    bq: b.zeros(format!("{p}.bq"), &[d]),
                    wk: b.weight(format!("{p}.wk"), d, d),
                    bk: b.zeros(format!("{p}.bk"), &[d]),
                    wv: b.weight(format!("{p}.wv"), d, d),
                    bv: b.zeros(format!("{p}.bv"), &[d]),
                    wo: b.weight(format!("{p}.wo"), d, d),
                    bo: b.zeros(format!("{p}.bo"), &[d]),
                    ffn_norm_gain: b.ones(format!("{p}.ffn_norm_gain"), &[d]),
                    ffn_norm_bias: b.zeros(format!("{p}.ffn_norm_bias"), &[d]),
                    w1: b.weight(format!("{p}.w1"), d, ffn),
                    b1: b.zeros(format!("{p}.b1"), &[ffn]),
                    w2: b.weight(format!("{p}.w2"), ffn, d),
                    b2: b.zeros(format!("{p}.b2"), &[d]),
                }
            })
            .collect();

        let moe = spec.moe.then(|| {
            let experts = (0..spec.n_experts)
                .map(|k| {
                    let p = format!("moe.expert.{k}");
                    ExpertVars {
                        w1: b.weight(format!("{p}.w1"), d, spec.expert_hidden),
                        b1: b.zeros(format!("{p}.b1"), &[spec.expert_hidden]),
                        w2: b.weight(format!("{p}.w2"), spec.expert_hidden, d),
                        b2: b.zeros(format!("{p}.b2"), &[d]),
                    }
                })
                .collect();
            MoeVars {
                experts,
                gate_weight: b.weight("moe.gate_weight".into(), d, spec.n_experts),
                gate_bias: b.zeros("moe.gate_bias".into(), &[spec.n_experts]),
            }
        });

        let hidden = spec.classifier_hidden;
        let classifier = ClassifierHead {
            w3: b.weight("classifier.w3".into(), d, hidden),
            b3: b.zeros("classifier.b3".into(), &[hidden]),
            norm_gain: b.ones("classifier.norm_gain".into(), &[hidden]),
            norm_bias: b.zeros("classifier.norm_bias".into(), &[hidden]),
            w4: b.weight("classifier.w4".into(), hidden, spec.classes),
            b4: b.zeros("classifier.b4".into(), &[spec.classes]),
        };

        let projection_head = spec.contrastive.then(|| ProjectionHead {
            w1: b.weight("contrastive.w1".into(), d, spec.proj_dim),
            b1: b.zeros("contrastive.b1".into(), &[spec.proj_dim]),
            w2: b.weight("contrastive.w2".into(), spec.proj_dim, spec.proj_dim),
            b2: b.zeros("contrastive.b2".into(), &[spec.proj_dim]),
        });

        let mut aux = [None; M];
        for m in Modality::ALL {
            if spec.enabled[m.index()] {
                aux[m.index()] = Some(AuxHead {
                    weight: b.weight(format!("aux.{m}.weight"), d, spec.classes),
                    bias: b.zeros(format!("aux.{m}.bias"), &[spec.classes]),
                });
            }
        }

        let layout = Layout { projections, gcn, positional, amf, encoder, moe, classifier, projection_head, aux };
        (layout, ModelParams { names: b.names, tensors: b.tensors })
    }
}
