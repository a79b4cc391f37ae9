use super::residues::{residue_index, SubstitutionMatrix};
use crate::error::{Error, Result};
use crate::numeric::Tensor;

fn check_nonempty(seq: &str) -> Result<()> {
    if seq.is_empty() {
        return Err(Error::invalid("empty sequence"));
    }
    Ok(())
}

/// `L×20` indicator matrix. Unknown residues produce an all-zero row.
pub fn encode_one_hot(seq: &str) -> Result<Tensor> {
    check_nonempty(seq)?;
    let mut data = vec![0.0; seq.len() * 20];
    for (i, r) in seq.bytes().enumerate() {
        if let Some(j) = residue_index(r) {
            data[i * 20 + j] = 1.0;
        }
    }
    Tensor::new(vec![seq.len(), 20], data)
}

/// `L×20` matrix whose row `i` is the BLOSUM62 score row of residue `i`.
/// Unknown residues produce an all-zero row.
pub fn encode_blosum(seq: &str) -> Result<Tensor> {
    check_nonempty(seq)?;
    let table = SubstitutionMatrix::blosum62();
    let mut data = vec![0.0; seq.len() * 20];
    for (i, r) in seq.bytes().enumerate() {
        if let Some(j) = residue_index(r) {
            for (k, &s) in table.row(j).iter().enumerate() {
                data[i * 20 + k] = f64::from(s);
            }
        }
    }
    Tensor::new(vec![seq.len(), 20], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_hot_alphabet_positions() {
        let t = encode_one_hot("ACD").unwrap();
        for (i, col) in [0, 1, 2].into_iter().enumerate() {
            assert_eq!(t.at(i, col), 1.0);
            assert_eq!(t.row(i).iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn unknown_residue_is_zero_row() {
        let t = encode_one_hot("AXA").unwrap();
        assert_eq!(t.row(0), t.row(2));
        assert!(t.row(1).iter().all(|&v| v == 0.0));
        let b = encode_blosum("AXA").unwrap();
        assert!(b.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_rejected() {
        assert!(encode_one_hot("").is_err());
        assert!(encode_blosum("").is_err());
    }

    #[test]
    fn blosum_rows() {
        let b = encode_blosum("AA").unwrap();
        assert_eq!(b.at(0, 0), 4.0);
        assert_eq!(b.at(0, 18), -3.0); // W
        assert_eq!(b.row(0), b.row(1));
    }

    fn canonical_seq() -> impl Strategy<Value = String> {
        proptest::collection::vec(0usize..20, 1..30)
            .prop_map(|ix| ix.into_iter().map(|i| super::super::residues::ALPHABET[i] as char).collect())
    }

    proptest! {
        #[test]
        fn blosum_equals_one_hot_times_table(seq in canonical_seq()) {
            let table = SubstitutionMatrix::blosum62();
            let t = Tensor::new(vec![20, 20], (0..400).map(|k| f64::from(table.score(k / 20, k % 20))).collect()).unwrap();
            let product = encode_one_hot(&seq).unwrap().matmul(&t).unwrap();
            prop_assert_eq!(product, encode_blosum(&seq).unwrap());
        }

        #[test]
        fn one_hot_row_sums_are_zero_or_one(seq in "[A-Z]{1,40}") {
            let t = encode_one_hot(&seq).unwrap();
            for i in 0..seq.len() {
                let s: f64 = t.row(i).iter().sum();
                prop_assert!(s == 0.0 || s == 1.0);
            }
        }
    }
}
