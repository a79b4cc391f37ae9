//! Adaptive modality fusion.
//!
//! Each present modality `m` gets a scalar weight `w_m = α_m · β_m · γ_m`:
//! `α = sigmoid(alpha_raw)` is a learned global importance, `β` is a
//! per-sample softmax over a shared linear gate applied to each modality's
//! pooled features, and `γ` is a class-conditioned row of a learned table.

use crate::backbone::pool::mean_pool;
use crate::error::{Error, Result};
use crate::features::M;
use crate::numeric::{Tape, Var};

/// Tape handles for the fusion parameters.
#[derive(Clone, Copy, Debug)]
pub struct AmfVars {
    /// `M` unconstrained reals.
    pub alpha_raw: Var,
    /// `d×1` gate shared by all modalities.
    pub gate_weight: Var,
    /// `1`
    pub gate_bias: Var,
    /// `C×M` class table.
    pub class_table: Var,
}

/// How `γ` is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassCondition {
    /// Row of the class table for this label.
    Label(usize),
    /// Column-wise mean of the class table (label unknown).
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AmfOptions {
    /// Divide the weights by their sum after the triple product.
    pub normalize: bool,
}

/// Fusion weights for one sample. `beta` and `weights` are indexed by
/// modality and empty where the modality is masked.
#[derive(Clone, Debug)]
pub struct AmfWeights {
    pub alpha: Var,
    pub beta: [Option<Var>; M],
    pub gamma: Var,
    pub weights: [Option<Var>; M],
}

/// Computes the fusion weights for the modalities present in `projected`.
pub fn amf_weights(
    tape: &mut Tape,
    projected: &[Option<Var>; M],
    seq_mask: Option<&[bool]>,
    condition: ClassCondition,
    params: &AmfVars,
    opts: AmfOptions,
) -> Result<AmfWeights> {
    let present: Vec<usize> = (0..M).filter(|&m| projected[m].is_some()).collect();
    if present.is_empty() {
        return Err(Error::invalid("every modality is masked"));
    }
    let table_shape = tape.value(params.class_table).shape().to_vec();
    let classes = table_shape[0];

    let alpha = tape.sigmoid(params.alpha_raw);

    let mut logits = Vec::with_capacity(present.len());
    for &m in &present {
        let f = projected[m].expect("present");
        let pooled = mean_pool(tape, f, seq_mask)?;
        let d = tape.value(pooled).len();
        let row = tape.reshape(pooled, &[1, d])?;
        let logit = tape.matmul(row, params.gate_weight)?;
        let logit = tape.reshape(logit, &[1])?;
        logits.push(tape.add(logit, params.gate_bias)?);
    }
    let stacked = tape.stack(&logits)?;
    let stacked = tape.reshape(stacked, &[present.len()])?;
    let beta_present = tape.softmax(stacked);

    let gamma = match condition {
        ClassCondition::Label(y) => {
            if y >= classes {
                return Err(Error::invalid(format!("label {y} outside {classes} classes")));
            }
            tape.row(params.class_table, y)?
        }
        ClassCondition::Mean => tape.weighted_row_sum(params.class_table, vec![1.0 / classes as f64; classes])?,
    };

    let mut beta = [None; M];
    let mut weights = [None; M];
    for (j, &m) in present.iter().enumerate() {
        let b = tape.pick(beta_present, j)?;
        let a = tape.pick(alpha, m)?;
        let g = tape.pick(gamma, m)?;
        let ab = tape.mul(a, b)?;
        weights[m] = Some(tape.mul(ab, g)?);
        beta[m] = Some(b);
    }
    if opts.normalize {
        let ws: Vec<Var> = weights.iter().flatten().copied().collect();
        let total = tape.add_all(&ws)?;
        let inv = tape.map(total, |t| 1.0 / t, |_, y| -y * y);
        for w in weights.iter_mut().flatten() {
            *w = tape.mul(*w, inv)?;
        }
    }
    Ok(AmfWeights {
        alpha,
        beta,
        gamma,
        weights,
    })
}

/// `Σ_m w_m · F̃^(m)` over present modalities.
pub fn amf_fuse(tape: &mut Tape, projected: &[Option<Var>; M], weights: &[Option<Var>; M]) -> Result<Var> {
    let mut terms = Vec::new();
    for m in 0..M {
        match (projected[m], weights[m]) {
            (Some(f), Some(w)) => terms.push(tape.scale_by(f, w)?),
            (None, _) => {}
            (Some(_), None) => return Err(Error::invalid(format!("modality {m} has no weight"))),
        }
    }
    if terms.is_empty() {
        return Err(Error::invalid("every modality is masked"));
    }
    tape.add_all(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{RngStream, Tensor};
    use proptest::prelude::*;

    struct Fixture {
        tape: Tape,
        params: AmfVars,
    }

    fn fixture(d: usize, classes: usize, alpha_raw: f64, gate: Option<Tensor>) -> Fixture {
        let mut tape = Tape::new();
        let params = AmfVars {
            alpha_raw: tape.param(Tensor::full(&[M], alpha_raw)),
            gate_weight: tape.param(gate.unwrap_or_else(|| Tensor::full(&[d, 1], 0.3))),
            gate_bias: tape.param(Tensor::scalar(0.0)),
            class_table: tape.param(Tensor::ones(&[classes, M])),
        };
        Fixture { tape, params }
    }

    const NO_NORM: AmfOptions = AmfOptions { normalize: false };

    #[test]
    fn identical_pooled_features_give_uniform_beta() {
        let mut fx = fixture(4, 2, 0.0, None);
        let f = fx.tape.constant(Tensor::full(&[3, 4], 0.7));
        let projected = [Some(f); M];
        let w = amf_weights(&mut fx.tape, &projected, None, ClassCondition::Label(1), &fx.params, NO_NORM).unwrap();
        for b in w.beta.iter().flatten() {
            assert_eq!(fx.tape.value(*b).item(), 1.0 / M as f64);
        }
        // alpha_raw = 0 gives alpha = 0.5 everywhere
        assert!(fx.tape.value(w.alpha).data().iter().all(|&a| a == 0.5));
    }

    #[test]
    fn two_modalities_closed_form_beta() {
        // gate is the first coordinate; pooled first coordinates ln 2 and 0
        let mut gate = Tensor::zeros(&[2, 1]);
        gate.data_mut()[0] = 1.0;
        let mut fx = fixture(2, 1, 0.0, Some(gate));
        let a = fx.tape.constant(Tensor::from_rows(&[vec![2f64.ln(), 0.0]]).unwrap());
        let b = fx.tape.constant(Tensor::from_rows(&[vec![0.0, 5.0]]).unwrap());
        let mut projected = [None; M];
        projected[0] = Some(a);
        projected[3] = Some(b);
        let w = amf_weights(&mut fx.tape, &projected, None, ClassCondition::Mean, &fx.params, NO_NORM).unwrap();
        let b0 = fx.tape.value(w.beta[0].unwrap()).item();
        let b3 = fx.tape.value(w.beta[3].unwrap()).item();
        assert!((b0 - 2.0 / 3.0).abs() < 1e-15 && (b3 - 1.0 / 3.0).abs() < 1e-15);
        assert!(w.beta[1].is_none() && w.weights[1].is_none());
    }

    #[test]
    fn label_out_of_range_rejected() {
        let mut fx = fixture(2, 3, 0.0, None);
        let f = fx.tape.constant(Tensor::ones(&[1, 2]));
        let projected = [Some(f); M];
        assert!(amf_weights(&mut fx.tape, &projected, None, ClassCondition::Label(3), &fx.params, NO_NORM).is_err());
    }

    #[test]
    fn symmetric_pair_fuses_to_mean() {
        let mut tape = Tape::new();
        let f1 = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let f2 = tape.constant(Tensor::from_rows(&[vec![-1.0, 0.0], vec![5.0, 2.0]]).unwrap());
        let half = tape.constant(Tensor::scalar(0.5));
        let mut projected = [None; M];
        let mut weights = [None; M];
        projected[1] = Some(f1);
        projected[2] = Some(f2);
        weights[1] = Some(half);
        weights[2] = Some(half);
        let fused = amf_fuse(&mut tape, &projected, &weights).unwrap();
        assert_eq!(tape.value(fused).data(), &[0.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn single_modality_with_unit_alpha_gamma_passes_through() {
        // alpha_raw large enough that sigmoid rounds to exactly 1
        let mut fx = fixture(2, 1, 40.0, None);
        let f = fx.tape.constant(Tensor::from_rows(&[vec![0.25, -3.0]]).unwrap());
        let mut projected = [None; M];
        projected[4] = Some(f);
        let w = amf_weights(&mut fx.tape, &projected, None, ClassCondition::Label(0), &fx.params, NO_NORM).unwrap();
        let fused = amf_fuse(&mut fx.tape, &projected, &w.weights).unwrap();
        assert_eq!(fx.tape.value(fused), fx.tape.value(f));
    }

    #[test]
    fn all_masked_is_an_error() {
        let mut tape = Tape::new();
        assert!(amf_fuse(&mut tape, &[None; M], &[None; M]).is_err());
    }

    proptest! {
        #[test]
        fn beta_is_a_distribution(seed in 0u64..500, mask in proptest::collection::vec(any::<bool>(), M)) {
            prop_assume!(mask.iter().any(|&b| b));
            let mut rng = RngStream::new(seed);
            let gate = Tensor::new(vec![3, 1], (0..3).map(|_| rng.normal()).collect()).unwrap();
            let mut fx = fixture(3, 2, 0.0, Some(gate));
            let mut projected = [None; M];
            for m in 0..M {
                if mask[m] {
                    let t = Tensor::new(vec![4, 3], (0..12).map(|_| 3.0 * rng.normal()).collect()).unwrap();
                    projected[m] = Some(fx.tape.constant(t));
                }
            }
            let w = amf_weights(&mut fx.tape, &projected, None, ClassCondition::Label(0), &fx.params, NO_NORM).unwrap();
            let betas: Vec<f64> = w.beta.iter().flatten().map(|&b| fx.tape.value(b).item()).collect();
            prop_assert!(betas.iter().all(|&b| b >= 0.0));
            prop_assert!((betas.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn fuse_is_linear_per_modality(seed in 0u64..500, a in -3.0f64..3.0) {
            let mut rng = RngStream::new(seed);
            let mut tape = Tape::new();
            let mut rand = || Tensor::new(vec![2, 3], (0..6).map(|_| rng.normal()).collect()).unwrap();
            let (x, other) = (rand(), rand());
            let mut projected = [None; M];
            let mut weights = [None; M];
            for m in 0..M {
                weights[m] = Some(tape.constant(Tensor::scalar(0.1 * (m + 1) as f64)));
            }
            projected[0] = Some(tape.constant(x.clone()));
            projected[2] = Some(tape.constant(other.clone()));
            let base = amf_fuse(&mut tape, &projected, &weights).unwrap();
            projected[0] = Some(tape.constant(x.map(|v| a * v)));
            let scaled = amf_fuse(&mut tape, &projected, &weights).unwrap();
            // contribution of modality 0 scales by a, the rest is unchanged
            for k in 0..6 {
                let rest = 0.3 * other.data()[k];
                let c0 = tape.value(base).data()[k] - rest;
                let c0_scaled = tape.value(scaled).data()[k] - rest;
                prop_assert!((c0_scaled - a * c0).abs() < 1e-12);
            }
        }
    }
}
