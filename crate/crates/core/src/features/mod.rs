//! Per-residue feature views: computed encodings, ingested embeddings,
//! residue graphs, and projection into the shared latent space.

pub mod bundle;
pub mod camt;
pub mod encode;
pub mod graph;
pub mod projection;
pub mod residues;

pub use bundle::{assemble_bundle, synthetic_embedding, FeatureOptions, GcnInput, Modality, ModalityBundle, M};
pub use camt::{read_tensor_file, write_tensor_file, CamtError, Dtype};
pub use encode::{encode_blosum, encode_one_hot};
pub use graph::{build_residue_graph, gcn_forward, gcn_layer, GcnActivation, ResidueGraph};
pub use projection::{project_modality, ProjectionVars};
pub use residues::{residue_index, DescriptorTable, SubstitutionMatrix, ALPHABET};
