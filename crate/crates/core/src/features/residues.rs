//! Residue alphabet and the fixed per-residue tables.

/// Canonical amino-acid alphabet; column order for every per-residue matrix.
pub const ALPHABET: &[u8; 20] = b"ACDEFGHIKLMNPQRSTVWY";

/// Index of a residue letter in [`ALPHABET`], case-insensitive. Anything
/// outside the 20 canonical letters (including `X`) is unknown.
pub fn residue_index(residue: u8) -> Option<usize> {
    let r = residue.to_ascii_uppercase();
    ALPHABET.iter().position(|&a| a == r)
}

// BLOSUM62 in the conventional ARNDCQEGHILKMFPSTWYV order (NCBI).
const BLOSUM62_ORDER: &[u8; 20] = b"ARNDCQEGHILKMFPSTWYV";
#[rustfmt::skip]
const BLOSUM62_ARND: [[i8; 20]; 20] = [
    // A   R   N   D   C   Q   E   G   H   I   L   K   M   F   P   S   T   W   Y   V
    [ 4, -1, -2, -2,  0, -1, -1,  0, -2, -1, -1, -1, -1, -2, -1,  1,  0, -3, -2,  0], // A
    [-1,  5,  0, -2, -3,  1,  0, -2,  0, -3, -2,  2, -1, -3, -2, -1, -1, -3, -2, -3], // R
    [-2,  0,  6,  1, -3,  0,  0,  0,  1, -3, -3,  0, -2, -3, -2,  1,  0, -4, -2, -3], // N
    [-2, -2,  1,  6, -3,  0,  2, -1, -1, -3, -4, -1, -3, -3, -1,  0, -1, -4, -3, -3], // D
    [ 0, -3, -3, -3,  9, -3, -4, -3, -3, -1, -1, -3, -1, -2, -3, -1, -1, -2, -2, -1], // C
    [-1,  1,  0,  0, -3,  5,  2, -2,  0, -3, -2,  1,  0, -3, -1,  0, -1, -2, -1, -2], // Q
    [-1,  0,  0,  2, -4,  2,  5, -2,  0, -3, -3,  1, -2, -3, -1,  0, -1, -3, -2, -2], // E
    [ 0, -2,  0, -1, -3, -2, -2,  6, -2, -4, -4, -2, -3, -3, -2,  0, -2, -2, -3, -3], // G
    [-2,  0,  1, -1, -3,  0,  0, -2,  8, -3, -3, -1, -2, -1, -2, -1, -2, -2,  2, -3], // H
    [-1, -3, -3, -3, -1, -3, -3, -4, -3,  4,  2, -3,  1,  0, -3, -2, -1, -3, -1,  3], // I
    [-1, -2, -3, -4, -1, -2, -3, -4, -3,  2,  4, -2,  2,  0, -3, -2, -1, -2, -1,  1], // L
    [-1,  2,  0, -1, -3,  1,  1, -2, -1, -3, -2,  5, -1, -3, -1,  0, -1, -3, -2, -2], // K
    [-1, -1, -2, -3, -1,  0, -2, -3, -2,  1,  2, -1,  5,  0, -2, -1, -1, -1, -1,  1], // M
    [-2, -3, -3, -3, -2, -3, -3, -3, -1,  0,  0, -3,  0,  6, -4, -2, -2,  1,  3, -1], // F
    [-1, -2, -2, -1, -3, -1, -1, -2, -2, -3, -3, -1, -2, -4,  7, -1, -1, -4, -3, -2], // P
    [ 1, -1,  1,  0, -1,  0,  0,  0, -1, -2, -2,  0, -1, -2, -1,  4,  1, -3, -2, -2], // S
    [ 0, -1,  0, -1, -1, -1, -1, -2, -2, -1, -1, -1, -1, -2, -1,  1,  5, -2, -2,  0], // T
    [-3, -3, -4, -4, -2, -2, -3, -2, -2, -3, -2, -3, -1,  1, -4, -3, -2, 11,  2, -3], // W
    [-2, -2, -2, -3, -2, -1, -2, -3,  2, -1, -1, -2, -1,  3, -3, -2, -2,  2,  7, -1], // Y
    [ 0, -3, -3, -3, -1, -2, -2, -3, -3,  3,  1, -2,  1, -1, -2, -2,  0, -3, -1,  4], // V
];

/// BLOSUM62 scores reindexed to [`ALPHABET`] order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubstitutionMatrix {
    scores: [[i8; 20]; 20],
}

impl SubstitutionMatrix {
    pub fn blosum62() -> Self {
        let pos = |r: u8| BLOSUM62_ORDER.iter().position(|&a| a == r).expect("canonical");
        let mut scores = [[0i8; 20]; 20];
        for (i, &ri) in ALPHABET.iter().enumerate() {
            for (j, &rj) in ALPHABET.iter().enumerate() {
                scores[i][j] = BLOSUM62_ARND[pos(ri)][pos(rj)];
            }
        }
        Self { scores }
    }

    pub fn score(&self, i: usize, j: usize) -> i8 {
        self.scores[i][j]
    }

    pub fn row(&self, i: usize) -> &[i8; 20] {
        &self.scores[i]
    }
}

/// Names of the embedded physicochemical descriptors, in column order.
pub const DESCRIPTOR_NAMES: [&str; 5] = [
    "hydropathy",
    "charge",
    "polarity",
    "molecular_weight",
    "isoelectric_point",
];

// Kyte–Doolittle hydropathy, net side-chain charge at pH 7, polar side chain
// flag, free amino-acid molecular weight (Da), isoelectric point.
#[rustfmt::skip]
const DESCRIPTORS: [[f64; 5]; 20] = [
    [ 1.8,  0.0, 0.0,  89.09,  6.00], // A
    [ 2.5,  0.0, 0.0, 121.16,  5.07], // C
    [-3.5, -1.0, 1.0, 133.10,  2.77], // D
    [-3.5, -1.0, 1.0, 147.13,  3.22], // E
    [ 2.8,  0.0, 0.0, 165.19,  5.48], // F
    [-0.4,  0.0, 0.0,  75.07,  5.97], // G
    [-3.2,  0.0, 1.0, 155.16,  7.59], // H
    [ 4.5,  0.0, 0.0, 131.17,  6.02], // I
    [-3.9,  1.0, 1.0, 146.19,  9.74], // K
    [ 3.8,  0.0, 0.0, 131.17,  5.98], // L
    [ 1.9,  0.0, 0.0, 149.21,  5.74], // M
    [-3.5,  0.0, 1.0, 132.12,  5.41], // N
    [-1.6,  0.0, 0.0, 115.13,  6.30], // P
    [-3.5,  0.0, 1.0, 146.15,  5.65], // Q
    [-4.5,  1.0, 1.0, 174.20, 10.76], // R
    [-0.8,  0.0, 1.0, 105.09,  5.68], // S
    [-0.7,  0.0, 1.0, 119.12,  5.60], // T
    [ 4.2,  0.0, 0.0, 117.15,  5.96], // V
    [-0.9,  0.0, 0.0, 204.23,  5.89], // W
    [-1.3,  0.0, 1.0, 181.19,  5.66], // Y
];

/// Per-residue physicochemical descriptors and their z-scored copy.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorTable {
    raw: Vec<[f64; 5]>,
    columns: Vec<usize>,
    zscored: Vec<Vec<f64>>,
}

impl Default for DescriptorTable {
    fn default() -> Self {
        Self::with_columns(&[0, 1, 2, 3, 4])
    }
}

impl DescriptorTable {
    /// Table restricted to a subset of descriptor columns (indices into
    /// [`DESCRIPTOR_NAMES`]). Each column is z-scored over the 20 residues
    /// with population variance.
    pub fn with_columns(columns: &[usize]) -> Self {
        let raw = DESCRIPTORS.to_vec();
        let mut zscored = vec![Vec::new(); 20];
        for &c in columns {
            let mean = raw.iter().map(|r| r[c]).sum::<f64>() / 20.0;
            let var = raw.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / 20.0;
            let sd = var.sqrt();
            for (z, r) in zscored.iter_mut().zip(&raw) {
                z.push((r[c] - mean) / sd);
            }
        }
        Self {
            raw,
            columns: columns.to_vec(),
            zscored,
        }
    }

    pub fn raw(&self, residue: usize) -> &[f64; 5] {
        &self.raw[residue]
    }

    pub fn zscored(&self, residue: usize) -> &[f64] {
        &self.zscored[residue]
    }

    pub fn columns(&self) -> &[usize] {
        &self.columns
    }

    /// Cosine similarity of two residues' z-scored descriptor vectors.
    pub fn similarity(&self, a: usize, b: usize) -> f64 {
        let (x, y) = (&self.zscored[a], &self.zscored[b]);
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        let nx = x.iter().map(|p| p * p).sum::<f64>().sqrt();
        let ny = y.iter().map(|q| q * q).sum::<f64>().sqrt();
        if nx == 0.0 || ny == 0.0 {
            0.0
        } else {
            dot / (nx * ny)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alphabet_indices() {
        assert_eq!(residue_index(b'A'), Some(0));
        assert_eq!(residue_index(b'y'), Some(19));
        assert_eq!(residue_index(b'X'), None);
        for (i, &r) in ALPHABET.iter().enumerate() {
            assert_eq!(residue_index(r), Some(i));
        }
    }

    #[test]
    fn blosum_symmetric_positive_diagonal() {
        let m = SubstitutionMatrix::blosum62();
        for i in 0..20 {
            assert!(m.score(i, i) > 0);
            for j in 0..20 {
                assert_eq!(m.score(i, j), m.score(j, i));
            }
        }
        let a = residue_index(b'A').unwrap();
        let w = residue_index(b'W').unwrap();
        assert_eq!(m.score(a, a), 4);
        assert_eq!(m.score(a, w), -3);
        assert_eq!(m.score(w, w), 11);
    }

    #[test]
    fn zscored_columns_are_standardized() {
        let t = DescriptorTable::default();
        for c in 0..5 {
            let col: Vec<f64> = (0..20).map(|r| t.zscored(r)[c]).collect();
            let mean = col.iter().sum::<f64>() / 20.0;
            let var = col.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / 20.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-10);
        }
    }
}
