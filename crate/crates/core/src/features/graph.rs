//! Residue similarity graphs and graph convolution.

use super::residues::{residue_index, DescriptorTable};
use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor, Var};

/// Default cosine-similarity threshold for residue edges.
pub const DEFAULT_THRESHOLD: f64 = 0.85;

/// Residue-level graph: node features plus a symmetric, loop-free adjacency.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidueGraph {
    pub features: Tensor,
    adjacency: Vec<bool>,
    len: usize,
}

impl ResidueGraph {
    /// Builds a graph from an explicit adjacency (row-major `L×L`). The
    /// adjacency is symmetrized and its diagonal cleared.
    pub fn from_adjacency(features: Tensor, adjacency: Vec<bool>) -> Result<Self> {
        let len = features.shape()[0];
        if adjacency.len() != len * len {
            return Err(Error::shape("adjacency must be L×L"));
        }
        let mut adj = adjacency;
        for i in 0..len {
            adj[i * len + i] = false;
            for j in 0..i {
                let e = adj[i * len + j] || adj[j * len + i];
                adj[i * len + j] = e;
                adj[j * len + i] = e;
            }
        }
        Ok(Self {
            features,
            adjacency: adj,
            len,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.len + j]
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().filter(|&&e| e).count() / 2
    }

    pub fn adjacency(&self) -> Tensor {
        let data = self.adjacency.iter().map(|&e| f64::from(u8::from(e))).collect();
        Tensor::from_parts(vec![self.len, self.len], data)
    }

    /// `D̂^{-1/2} (A + I) D̂^{-1/2}`.
    pub fn normalized_adjacency(&self) -> Tensor {
        let n = self.len;
        let inv_sqrt_deg: Vec<f64> = (0..n)
            .map(|i| {
                let deg = 1 + (0..n).filter(|&j| self.has_edge(i, j)).count();
                1.0 / (deg as f64).sqrt()
            })
            .collect();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i == j || self.has_edge(i, j) {
                    out[i * n + j] = inv_sqrt_deg[i] * inv_sqrt_deg[j];
                }
            }
        }
        Tensor::from_parts(vec![n, n], out)
    }
}

/// Connects residues `i ≠ j` whose z-scored descriptor vectors have cosine
/// similarity strictly above `threshold`. Unknown residues have no edges.
pub fn build_residue_graph(
    seq: &str,
    node_features: Tensor,
    threshold: f64,
    descriptors: &DescriptorTable,
) -> Result<ResidueGraph> {
    let len = seq.len();
    if len == 0 {
        return Err(Error::invalid("empty sequence"));
    }
    if node_features.rank() != 2 || node_features.shape()[0] != len {
        return Err(Error::shape(format!(
            "node features {:?} for sequence of length {len}",
            node_features.shape()
        )));
    }
    let idx: Vec<Option<usize>> = seq.bytes().map(residue_index).collect();
    let mut adjacency = vec![false; len * len];
    for i in 0..len {
        for j in (i + 1)..len {
            if let (Some(a), Some(b)) = (idx[i], idx[j]) {
                if descriptors.similarity(a, b) > threshold {
                    adjacency[i * len + j] = true;
                    adjacency[j * len + i] = true;
                }
            }
        }
    }
    Ok(ResidueGraph {
        features: node_features,
        adjacency,
        len,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GcnActivation {
    Gelu,
    Identity,
}

/// One propagation step `act(Â_norm · H · W)`.
pub fn gcn_layer(
    tape: &mut Tape,
    norm_adj: Var,
    h: Var,
    weight: Var,
    activation: GcnActivation,
) -> Result<Var> {
    let hw = tape.matmul(h, weight)?;
    let agg = tape.matmul(norm_adj, hw)?;
    Ok(match activation {
        GcnActivation::Gelu => tape.gelu(agg),
        GcnActivation::Identity => agg,
    })
}

/// Stacked graph convolution, one layer per weight matrix.
pub fn gcn_forward(
    tape: &mut Tape,
    norm_adj: Var,
    x: Var,
    weights: &[Var],
    activation: GcnActivation,
) -> Result<Var> {
    weights
        .iter()
        .try_fold(x, |h, &w| gcn_layer(tape, norm_adj, h, w, activation))
}
