use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{assemble_bundle, read_tensor_file, FeatureOptions, Modality, ModalityBundle, M};
use crate::numeric::{RngStream, Tensor};

use super::balance::Labeled;

/// One line of a dataset manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub sequence: String,
    pub label: usize,
    pub cluster: u64,
    /// Precomputed feature files by modality, relative to the manifest.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub features: BTreeMap<Modality, PathBuf>,
}

impl Labeled for SampleRecord {
    fn label(&self) -> usize {
        self.label
    }
}

/// Reads a JSON Lines manifest. Blank lines are skipped; records repeating
/// an earlier `(sequence, label)` pair are dropped.
pub fn read_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open manifest {}: {e}", path.display())))?;
    let mut seen = HashSet::new();
    let mut ids = HashSet::new();
    let mut records = Vec::new();
    let mut dropped = 0;
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line)
            .map_err(|e| Error::data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if rec.sequence.is_empty() {
            return Err(Error::data(format!("{}:{}: empty sequence", path.display(), n + 1)));
        }
        if !seen.insert((rec.sequence.clone(), rec.label)) {
            dropped += 1;
            continue;
        }
        if !ids.insert(rec.id.clone()) {
            return Err(Error::data(format!("{}:{}: duplicate id {}", path.display(), n + 1, rec.id)));
        }
        records.push(rec);
    }
    if dropped > 0 {
        log::info!("dropped {dropped} duplicate (sequence, label) records");
    }
    if records.is_empty() {
        return Err(Error::data(format!("{}: no records", path.display())));
    }
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Number of classes implied by the labels.
pub fn class_count(records: &[SampleRecord]) -> usize {
    records.iter().map(|r| r.label + 1).max().unwrap_or(0)
}

/// A record with its assembled features.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub bundle: ModalityBundle,
    pub label: usize,
    pub cluster: u64,
}

impl Labeled for Example {
    fn label(&self) -> usize {
        self.label
    }

    /// Perturbs the dense embedding views; the discrete encodings are left
    /// alone.
    fn jitter(&mut self, sigma: f64, rng: &mut RngStream) {
        for m in [Modality::Esm, Modality::Struct] {
            if let Some(t) = self.bundle.feature_mut(m) {
                t.data_mut().iter_mut().for_each(|v| *v += sigma * rng.normal());
            }
        }
    }
}

/// Reads the feature files of enabled modalities and completes each bundle.
/// Relative paths resolve against `base`.
pub fn load_examples(records: &[SampleRecord], base: &Path, opts: &FeatureOptions) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|r| {
            let mut supplied: [Option<Tensor>; M] = Default::default();
            for (&m, rel) in &r.features {
                if !opts.enabled[m.index()] {
                    continue;
                }
                let path = base.join(rel);
                let t = read_tensor_file(&path).map_err(|e| Error::data(format!("{}: {}: {e}", r.id, path.display())))?;
                supplied[m.index()] = Some(t);
            }
            Ok(Example {
                bundle: assemble_bundle(&r.id, &r.sequence, supplied, opts)?,
                label: r.label,
                cluster: r.cluster,
            })
        })
        .collect()
}

/// Per-modality input widths and the graph node width shared by every
/// example. The graph view's input is described by the node width alone.
pub fn feature_widths(examples: &[Example]) -> Result<([usize; M], usize)> {
    let first = examples.first().ok_or_else(|| Error::data("no examples"))?;
    let widths_of = |e: &Example| -> ([usize; M], usize) {
        let mut w = [0; M];
        for m in Modality::ALL {
            if let Some(t) = e.bundle.feature(m) {
                w[m.index()] = t.cols();
            }
        }
        let node = e.bundle.gcn_input.as_ref().map_or(0, |g| g.node_features.cols());
        (w, node)
    };
    let expect = widths_of(first);
    for e in &examples[1..] {
        let got = widths_of(e);
        if got != expect {
            return Err(Error::data(format!(
                "{}: feature widths {:?} differ from {:?} in {}",
                e.bundle.id, got, expect, first.bundle.id
            )));
        }
    }
    Ok(expect)
}
