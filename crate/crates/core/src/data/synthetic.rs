use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::manifest::{write_manifest, SampleRecord};
use crate::error::{Error, Result};
use crate::features::residues::ALPHABET;
use crate::features::{write_tensor_file, Dtype, Modality};
use crate::numeric::{RngStream, Tensor};

/// Parameters of a planted-structure dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Norm of each class-mean vector.
    pub sigma_sep: f64,
    /// Standard deviation of the per-row noise.
    pub noise: f64,
    /// Width of the embedding and graph-node matrices.
    pub width: usize,
    /// Modalities that receive a class signal. Language-model and structure
    /// matrices are always written; the others only when planted.
    pub planted: Vec<Modality>,
    /// Samples per cluster of related sequences.
    pub cluster_size: usize,
    /// Fraction of positions mutated from the cluster's seed sequence.
    pub mutation_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 3,
            per_class: 100,
            min_len: 20,
            max_len: 40,
            sigma_sep: 5.0,
            noise: 1.0,
            width: 64,
            planted: Modality::ALL.to_vec(),
            cluster_size: 5,
            mutation_rate: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("at least two classes are required"));
        }
        if !(self.sigma_sep >= 0.0) || !(self.noise >= 0.0) {
            return Err(Error::invalid("sigma_sep and noise must be non-negative"));
        }
        if self.per_class == 0 || self.width == 0 || self.cluster_size == 0 {
            return Err(Error::invalid("per_class, width and cluster_size must be positive"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::invalid(format!("bad length range {}..={}", self.min_len, self.max_len)));
        }
        let distinct = (ALPHABET.len() as u64).checked_pow(self.min_len as u32).unwrap_or(u64::MAX);
        if distinct < self.per_class as u64 {
            return Err(Error::invalid(format!(
                "sequences of length {} cannot give {} distinct samples per class",
                self.min_len, self.per_class
            )));
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return Err(Error::invalid("mutation_rate outside [0, 1]"));
        }
        Ok(())
    }

    fn slot_width(&self, m: Modality) -> usize {
        match m {
            Modality::OneHot | Modality::Blosum => ALPHABET.len(),
            _ => self.width,
        }
    }

    fn written(&self, m: Modality) -> bool {
        matches!(m, Modality::Esm | Modality::Struct) || self.planted.contains(&m)
    }
}

fn random_sequence(len: usize, rng: &mut RngStream) -> Vec<u8> {
    (0..len).map(|_| ALPHABET[rng.below(ALPHABET.len())]).collect()
}

/// Writes `manifest.jsonl` and `features/*.camt` under `out` and returns
/// the records. Output is a pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec, out: &Path) -> Result<Vec<SampleRecord>> {
    spec.validate()?;
    let feat_dir = out.join("features");
    std::fs::create_dir_all(&feat_dir)?;
    let root = RngStream::new(spec.seed);

    let mut mean_rng = root.fork(1);
    let means: Vec<Vec<Vec<f64>>> = (0..spec.classes)
        .map(|_| {
            Modality::ALL
                .iter()
                .map(|&m| {
                    let w = spec.slot_width(m);
                    let v: Vec<f64> = (0..w).map(|_| mean_rng.normal()).collect();
                    if !spec.planted.contains(&m) || spec.sigma_sep == 0.0 {
                        return vec![0.0; w];
                    }
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    v.into_iter().map(|x| x * spec.sigma_sep / norm).collect()
                })
                .collect()
        })
        .collect();

    let mut seq_rng = root.fork(2);
    let mut noise_rng = root.fork(3);
    let mut records = Vec::with_capacity(spec.classes * spec.per_class);
    let mut cluster = 0u64;
    let mut seen = std::collections::HashSet::new();
    for class in 0..spec.classes {
        let mut seed_seq = Vec::new();
        for i in 0..spec.per_class {
            if i % spec.cluster_size == 0 {
                cluster += 1;
                let len = seq_rng.range_inclusive(spec.min_len, spec.max_len);
                seed_seq = random_sequence(len, &mut seq_rng);
            }
            let mut seq = seed_seq.clone();
            for r in seq.iter_mut() {
                if seq_rng.uniform() < spec.mutation_rate {
                    *r = ALPHABET[seq_rng.below(ALPHABET.len())];
                }
            }
            // manifests drop repeated (sequence, label) pairs
            while !seen.insert((seq.clone(), class)) {
                let at = seq_rng.below(seq.len());
                seq[at] = ALPHABET[seq_rng.below(ALPHABET.len())];
            }
            let id = format!("syn{class}_{i:04}");
            let mut features = BTreeMap::new();
            for m in Modality::ALL.into_iter().filter(|&m| spec.written(m)) {
                let mean = &means[class][m.index()];
                let w = mean.len();
                let mut data = Vec::with_capacity(seq.len() * w);
                for _ in 0..seq.len() {
                    data.extend(mean.iter().map(|&mu| mu + spec.noise * noise_rng.normal()));
                }
                let rel = PathBuf::from("features").join(format!("{id}.{m}.camt"));
                write_tensor_file(out.join(&rel), &Tensor::new(vec![seq.len(), w], data)?, Dtype::F64)
                    .map_err(|e| Error::data(format!("{}: {e}", rel.display())))?;
                features.insert(m, rel);
            }
            records.push(SampleRecord {
                id,
                sequence: String::from_utf8(seq).expect("ASCII residues"),
                label: class,
                cluster,
                features,
            });
        }
    }
    write_manifest(&out.join("manifest.jsonl"), &records)?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::{load_examples, read_manifest};
    use crate::features::{read_tensor_file, FeatureOptions};

    fn small() -> SyntheticSpec {
        SyntheticSpec { classes: 2, per_class: 6, min_len: 4, max_len: 8, width: 6, cluster_size: 3, ..Default::default() }
    }

    fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut files: Vec<_> = walk(dir);
        files.sort();
        files.into_iter().map(|p| (p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap())).collect()
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn byte_deterministic() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_synthetic(&small(), a.path()).unwrap();
        generate_synthetic(&small(), b.path()).unwrap();
        assert_eq!(snapshot(a.path()), snapshot(b.path()));
        let c = tempfile::tempdir().unwrap();
        generate_synthetic(&SyntheticSpec { seed: 9, ..small() }, c.path()).unwrap();
        assert_ne!(snapshot(a.path()), snapshot(c.path()));
    }

    #[test]
    fn layout_and_clusters() {
        let dir = tempfile::tempdir().unwrap();
        let recs = generate_synthetic(&small(), dir.path()).unwrap();
        assert_eq!(recs.len(), 12);
        assert_eq!(read_manifest(&dir.path().join("manifest.jsonl")).unwrap(), recs);
        let clusters: Vec<u64> = recs.iter().map(|r| r.cluster).collect();
        assert_eq!(clusters, [1, 1, 1, 2, 2, 2, 3, 3, 3, 4, 4, 4]);
        for r in &recs {
            assert!((4..=8).contains(&r.sequence.len()));
            assert_eq!(r.features.len(), 5);
            let t = read_tensor_file(dir.path().join(&r.features[&Modality::OneHot])).unwrap();
            assert_eq!(t.shape(), &[r.sequence.len(), 20]);
        }
        let ex = load_examples(&recs, dir.path(), &FeatureOptions::default()).unwrap();
        assert_eq!(ex[0].bundle.gcn_input.as_ref().unwrap().node_features.cols(), 6);
    }

    #[test]
    fn unplanted_views_are_noise_or_computed() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec { planted: vec![Modality::Esm], noise: 0.0, ..small() };
        let recs = generate_synthetic(&spec, dir.path()).unwrap();
        let keys: Vec<_> = recs[0].features.keys().copied().collect();
        assert_eq!(keys, [Modality::Esm, Modality::Struct]);
        let s = read_tensor_file(dir.path().join(&recs[0].features[&Modality::Struct])).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
        let e = read_tensor_file(dir.path().join(&recs[0].features[&Modality::Esm])).unwrap();
        let norm = e.row(0).iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 5.0).abs() < 1e-9);
    }

    #[test]
    fn zero_separation_means_no_signal() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec { sigma_sep: 0.0, noise: 0.0, ..small() };
        let recs = generate_synthetic(&spec, dir.path()).unwrap();
        let t = read_tensor_file(dir.path().join(&recs[7].features[&Modality::Esm])).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_specs_rejected() {
        let dir = tempfile::tempdir().unwrap();
        for bad in [
            SyntheticSpec { classes: 1, ..small() },
            SyntheticSpec { sigma_sep: -1.0, ..small() },
            SyntheticSpec { min_len: 9, ..small() },
            SyntheticSpec { min_len: 1, max_len: 1, per_class: 21, ..small() },
        ] {
            assert!(generate_synthetic(&bad, dir.path()).is_err());
        }
    }
}
