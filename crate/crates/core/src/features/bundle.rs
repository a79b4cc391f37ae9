use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::encode::{encode_blosum, encode_one_hot};
use super::graph::{build_residue_graph, ResidueGraph};
use super::residues::{residue_index, DescriptorTable};
use crate::error::{Error, Result};
use crate::numeric::{RngStream, Tensor};

/// The five per-residue feature views.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    #[serde(rename = "onehot")]
    OneHot,
    Blosum,
    Esm,
    Struct,
    Gcn,
}

/// Number of modalities.
pub const M: usize = 5;

impl Modality {
    pub const ALL: [Modality; M] = [
        Modality::OneHot,
        Modality::Blosum,
        Modality::Esm,
        Modality::Struct,
        Modality::Gcn,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::OneHot => "onehot",
            Modality::Blosum => "blosum",
            Modality::Esm => "esm",
            Modality::Struct => "struct",
            Modality::Gcn => "gcn",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown modality {s:?}")))
    }
}

/// Inputs for computing the graph modality inside the model.
#[derive(Clone, Debug, PartialEq)]
pub struct GcnInput {
    pub norm_adj: Tensor,
    pub node_features: Tensor,
    /// One-hot features were substituted because the language-model view
    /// was unavailable.
    pub used_fallback: bool,
}

/// All feature views for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityBundle {
    pub id: String,
    pub sequence: String,
    /// Raw `L×d_m` matrices. `assemble_bundle` leaves the graph slot empty
    /// and fills `gcn_input` instead.
    pub features: [Option<Tensor>; M],
    pub gcn_input: Option<GcnInput>,
}

impl ModalityBundle {
    pub fn len(&self) -> usize {
        self.sequence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequence.is_empty()
    }

    pub fn present(&self, m: Modality) -> bool {
        match m {
            Modality::Gcn => self.features[m.index()].is_some() || self.gcn_input.is_some(),
            _ => self.features[m.index()].is_some(),
        }
    }

    pub fn mask(&self) -> [bool; M] {
        Modality::ALL.map(|m| self.present(m))
    }

    pub fn feature(&self, m: Modality) -> Option<&Tensor> {
        self.features[m.index()].as_ref()
    }

    pub fn feature_mut(&mut self, m: Modality) -> Option<&mut Tensor> {
        self.features[m.index()].as_mut()
    }
}

#[derive(Clone, Debug)]
pub struct FeatureOptions {
    pub enabled: [bool; M],
    pub graph_threshold: f64,
    pub descriptors: DescriptorTable,
    /// Width of stand-in language-model and structure embeddings.
    pub synthetic_width: usize,
    pub synthetic_seed: u64,
}

impl Default for FeatureOptions {
    fn default() -> Self {
        Self {
            enabled: [true; M],
            graph_threshold: super::graph::DEFAULT_THRESHOLD,
            descriptors: DescriptorTable::default(),
            synthetic_width: 64,
            synthetic_seed: 0x5EED,
        }
    }
}

/// Deterministic stand-in for a per-residue embedding: each canonical
/// residue maps to a fixed Gaussian vector drawn from `seed`, unknown residues
/// to zeros.
pub fn synthetic_embedding(seq: &str, width: usize, seed: u64) -> Result<Tensor> {
    if seq.is_empty() {
        return Err(Error::invalid("empty sequence"));
    }
    let mut rng = RngStream::new(seed);
    let table: Vec<f64> = (0..20 * width).map(|_| rng.normal()).collect();
    let mut data = Vec::with_capacity(seq.len() * width);
    for r in seq.bytes() {
        match residue_index(r) {
            Some(i) => data.extend_from_slice(&table[i * width..(i + 1) * width]),
            None => data.extend(std::iter::repeat_n(0.0, width)),
        }
    }
    Tensor::new(vec![seq.len(), width], data)
}

/// Completes a bundle: supplied matrices are used as-is, one-hot and BLOSUM
/// views are computed, missing embeddings are synthesized, and the residue
/// graph is built for the graph view. A supplied graph-slot matrix becomes
/// the graph's node features. Disabled modalities stay empty.
pub fn assemble_bundle(
    id: &str,
    sequence: &str,
    mut supplied: [Option<Tensor>; M],
    opts: &FeatureOptions,
) -> Result<ModalityBundle> {
    if sequence.is_empty() {
        return Err(Error::data(format!("{id}: empty sequence")));
    }
    let len = sequence.len();
    for m in Modality::ALL {
        if let Some(t) = &supplied[m.index()] {
            if t.rank() != 2 || t.shape()[0] != len {
                return Err(Error::data(format!(
                    "{id}: {m} features {:?} do not match sequence length {len}",
                    t.shape()
                )));
            }
        }
    }
    let on = |m: Modality| opts.enabled[m.index()];
    let mut take = |m: Modality| supplied[m.index()].take();

    let one_hot = match take(Modality::OneHot) {
        Some(t) => t,
        None => encode_one_hot(sequence)?,
    };
    let blosum = match take(Modality::Blosum) {
        Some(t) => t,
        None => encode_blosum(sequence)?,
    };
    let esm = match take(Modality::Esm) {
        Some(t) => t,
        None => synthetic_embedding(sequence, opts.synthetic_width, opts.synthetic_seed)?,
    };
    let structure = match take(Modality::Struct) {
        Some(t) => t,
        None => synthetic_embedding(sequence, opts.synthetic_width, opts.synthetic_seed ^ 0xA5A5)?,
    };
    let gcn_given = take(Modality::Gcn);

    let gcn_input = if on(Modality::Gcn) {
        let used_fallback = gcn_given.is_none() && !on(Modality::Esm);
        if used_fallback {
            log::debug!("{id}: graph nodes initialized from one-hot (no language-model view)");
        }
        let nodes = match gcn_given {
            Some(t) => t,
            None if used_fallback => one_hot.clone(),
            None => esm.clone(),
        };
        let graph: ResidueGraph =
            build_residue_graph(sequence, nodes, opts.graph_threshold, &opts.descriptors)?;
        Some(GcnInput {
            norm_adj: graph.normalized_adjacency(),
            node_features: graph.features,
            used_fallback,
        })
    } else {
        None
    };

    let keep = |m: Modality, t: Option<Tensor>| if on(m) { t } else { None };
    Ok(ModalityBundle {
        id: id.to_string(),
        sequence: sequence.to_string(),
        features: [
            keep(Modality::OneHot, Some(one_hot)),
            keep(Modality::Blosum, Some(blosum)),
            keep(Modality::Esm, Some(esm)),
            keep(Modality::Struct, Some(structure)),
            None,
        ],
        gcn_input,
    })
}
