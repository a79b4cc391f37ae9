//! Datasets: manifests, cluster-level splits, class balancing and the
//! synthetic generator.

pub mod balance;
pub mod manifest;
pub mod split;
pub mod synthetic;

pub use balance::{balance_classes, Labeled};
pub use manifest::{class_count, feature_widths, load_examples, read_manifest, write_manifest, Example, SampleRecord};
pub use split::{split_by_cluster, Split, SplitAssignment};
pub use synthetic::{generate_synthetic, SyntheticSpec};
