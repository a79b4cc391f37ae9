use serde::{Deserialize, Serialize};

use crate::backbone::pool::mean_pool;
use crate::error::{Error, Result};
use crate::features::M;
use crate::numeric::{Tape, Tensor, Var};

/// Stands in for `-inf` on excluded similarity entries. Finite so that a zero
/// weight on the same entry still gives an exact zero.
const EXCLUDED: f64 = -1e300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_aux: f64,
    pub lambda_contrast: f64,
    pub lambda_div: f64,
    pub temperature: f64,
    pub focal_gamma: f64,
    /// Per-class focal weights. `None` means inverse class frequency,
    /// normalized to mean 1, computed from the training split.
    pub focal_alpha: Option<Vec<f64>>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_aux: 0.3,
            lambda_contrast: 0.3,
            lambda_div: 0.1,
            temperature: 0.07,
            focal_gamma: 2.0,
            focal_alpha: None,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::invalid(format!("temperature must be positive, got {}", self.temperature)));
        }
        for (name, v) in [
            ("lambda_aux", self.lambda_aux),
            ("lambda_contrast", self.lambda_contrast),
            ("lambda_div", self.lambda_div),
            ("focal_gamma", self.focal_gamma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be a finite nonnegative number, got {v}")));
            }
        }
        if let Some(alpha) = &self.focal_alpha {
            if alpha.iter().any(|&a| !(a >= 0.0) || !a.is_finite()) {
                return Err(Error::invalid("focal_alpha entries must be finite and nonnegative"));
            }
        }
        Ok(())
    }
}

/// `1 / n_c` rescaled to mean 1 over the classes that occur. Classes with no
/// samples get weight 1.
pub fn inverse_frequency_alpha(counts: &[usize]) -> Vec<f64> {
    let present: Vec<f64> = counts.iter().filter(|&&n| n > 0).map(|&n| 1.0 / n as f64).collect();
    if present.is_empty() {
        return vec![1.0; counts.len()];
    }
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    counts.iter().map(|&n| if n > 0 { 1.0 / (n as f64 * mean) } else { 1.0 }).collect()
}

/// `−α (1 − p_y)^γ log p_y` for one sample, from its logits.
pub fn focal_loss(tape: &mut Tape, logits: Var, y: usize, alpha: f64, gamma: f64) -> Result<Var> {
    if gamma < 0.0 {
        return Err(Error::invalid("focal gamma must be nonnegative"));
    }
    let c = tape.value(logits).len();
    if y >= c {
        return Err(Error::invalid(format!("label {y} outside {c} classes")));
    }
    let logp = tape.log_softmax(logits);
    let logp_y = tape.pick(logp, y)?;
    tape.focal_from_log_prob(logp_y, alpha, gamma)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SupConOptions {
    /// Keep only the harder half of each anchor's negatives in its
    /// denominator.
    pub hard_negatives: bool,
}

/// Supervised contrastive loss over the rows of `z` (`N×d′`, unit rows).
/// Anchors without a same-label partner are skipped; the result averages
/// over the remaining anchors and is 0 when there are none.
pub fn supcon_loss(tape: &mut Tape, z: Var, labels: &[usize], tau: f64, opts: SupConOptions) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let n = tape.value(z).rows();
    if n != labels.len() {
        return Err(Error::shape(format!("{n} embeddings for {} labels", labels.len())));
    }
    if n < 2 {
        return Err(Error::invalid("contrastive loss needs at least two samples"));
    }
    let sims = tape.matmul_nt(z, z)?;
    let scaled = tape.scale(sims, 1.0 / tau);

    let mut exclude = Tensor::zeros(&[n, n]);
    let mut weight = Tensor::zeros(&[n, n]);
    let mut anchors = 0usize;
    for i in 0..n {
        exclude.data_mut()[i * n + i] = EXCLUDED;
        let positives: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        anchors += 1;
        for &p in &positives {
            weight.data_mut()[i * n + p] = 1.0 / positives.len() as f64;
        }
        if opts.hard_negatives {
            let row = tape.value(scaled).row(i).to_vec();
            let mut negatives: Vec<usize> = (0..n).filter(|&a| labels[a] != labels[i]).collect();
            negatives.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            let keep = negatives.len().div_ceil(2);
            for &a in &negatives[keep..] {
                exclude.data_mut()[i * n + a] = EXCLUDED;
            }
        }
    }
    if anchors == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let masked = tape.add_const(scaled, &exclude)?;
    let logp = tape.log_softmax(masked);
    let picked = tape.mul_const(logp, &weight)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / anchors as f64))
}

/// One linear `d → C` head per modality.
#[derive(Clone, Copy, Debug)]
pub struct AuxHead {
    pub weight: Var,
    pub bias: Var,
}

/// Mean over present modalities of the cross-entropy of a pooled linear
/// classifier on that modality's projected features.
pub fn aux_modality_loss(
    tape: &mut Tape,
    projected: &[Option<Var>; M],
    label: usize,
    heads: &[Option<AuxHead>; M],
) -> Result<Var> {
    let mut terms = Vec::new();
    for m in 0..M {
        let Some(f) = projected[m] else { continue };
        let head = heads[m].ok_or_else(|| Error::invalid(format!("no auxiliary head for modality {m}")))?;
        let pooled = mean_pool(tape, f, None)?;
        let d = tape.value(pooled).len();
        let row = tape.reshape(pooled, &[1, d])?;
        let logits = tape.linear(row, head.weight, head.bias)?;
        let c = tape.value(logits).len();
        if label >= c {
            return Err(Error::invalid(format!("label {label} outside {c} classes")));
        }
        let logp = tape.log_softmax(logits);
        let lp = tape.pick(logp, label)?;
        terms.push(tape.scale(lp, -1.0));
    }
    if terms.is_empty() {
        return Err(Error::invalid("every modality is masked"));
    }
    let count = terms.len() as f64;
    let total = tape.add_all(&terms)?;
    Ok(tape.scale(total, 1.0 / count))
}

/// Scalar loss terms for one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossComponents {
    pub focal: Var,
    pub modal: Var,
    pub contrast: Var,
    pub diversity: Var,
}

impl LossComponents {
    pub fn named(&self) -> [(&'static str, Var); 4] {
        [
            ("focal", self.focal),
            ("modal", self.modal),
            ("contrast", self.contrast),
            ("diversity", self.diversity),
        ]
    }
}

/// `focal + λ_aux·modal + λ_contrast·contrast + λ_div·diversity`.
/// A non-finite component is reported by name.
pub fn total_loss(tape: &mut Tape, parts: &LossComponents, weights: &LossWeights, epoch: usize) -> Result<Var> {
    for (name, v) in parts.named() {
        if !tape.value(v).all_finite() {
            return Err(Error::NonFinite {
                component: name.to_string(),
                epoch,
            });
        }
    }
    let modal = tape.scale(parts.modal, weights.lambda_aux);
    let contrast = tape.scale(parts.contrast, weights.lambda_contrast);
    let diversity = tape.scale(parts.diversity, weights.lambda_div);
    tape.add_all(&[parts.focal, modal, contrast, diversity])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{grad_check, GradCheckOptions, RngStream};
    use proptest::prelude::*;

    fn scalar_of(f: impl FnOnce(&mut Tape) -> Result<Var>) -> f64 {
        let mut tape = Tape::new();
        let v = f(&mut tape).unwrap();
        tape.value(v).item()
    }

    fn cross_entropy(logits: &[f64], y: usize) -> f64 {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        lse - logits[y]
    }

    fn focal_of(logits: &[f64], y: usize, alpha: f64, gamma: f64) -> f64 {
        scalar_of(|t| {
            let l = t.constant(Tensor::vector(logits.to_vec()));
            focal_loss(t, l, y, alpha, gamma)
        })
    }

    #[test]
    fn focal_reduces_to_cross_entropy() {
        assert!((focal_of(&[0.0, 0.0], 0, 1.0, 0.0) - 2f64.ln()).abs() < 1e-15);
        let mut rng = RngStream::new(11);
        for _ in 0..1000 {
            let logits: Vec<f64> = (0..4).map(|_| 3.0 * rng.normal()).collect();
            let y = rng.below(4);
            assert!((focal_of(&logits, y, 1.0, 0.0) - cross_entropy(&logits, y)).abs() < 1e-12);
        }
    }

    #[test]
    fn focal_easy_example() {
        let v = focal_of(&[9f64.ln(), 0.0], 0, 0.25, 2.0);
        assert!((v - 2.6340128914456573e-4).abs() < 1e-15);
    }

    #[test]
    fn focal_vanishes_as_confidence_grows() {
        let vals: Vec<f64> = (0..8).map(|k| focal_of(&[2.0 * k as f64, 0.0], 0, 1.0, 2.0)).collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]));
        assert!(vals[7] < 1e-12);
    }

    fn supcon_of(rows: &[Vec<f64>], labels: &[usize], tau: f64, opts: SupConOptions) -> Result<f64> {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::from_rows(rows)?);
        let l = supcon_loss(&mut tape, z, labels, tau, opts)?;
        Ok(tape.value(l).item())
    }

    #[test]
    fn supcon_examples() {
        let plain = SupConOptions::default();
        let e = [1.0, 0.0];
        assert_eq!(supcon_of(&[e.to_vec(), e.to_vec()], &[0, 0], 0.5, plain).unwrap(), 0.0);
        let v = supcon_of(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 0, 1], 1.0, plain).unwrap();
        assert!((v - 0.3132616875182228).abs() < 1e-15);
        assert_eq!(supcon_of(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]], &[0, 1, 2], 0.1, plain).unwrap(), 0.0);
    }

    #[test]
    fn supcon_rejects_bad_input() {
        let rows = [vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(supcon_of(&rows, &[0, 0], 0.0, SupConOptions::default()).is_err());
        assert!(supcon_of(&rows[..1], &[0], 0.1, SupConOptions::default()).is_err());
    }

    #[test]
    fn hard_negatives_drop_the_easiest() {
        // anchor 0's negatives: rows 2 (close) and 3 (far); mining keeps row 2 only
        let rows = [vec![1.0, 0.0], vec![0.8, 0.6], vec![0.6, 0.8], vec![-1.0, 0.0]];
        let labels = [0, 0, 1, 1];
        let mined = supcon_of(&rows, &labels, 1.0, SupConOptions { hard_negatives: true }).unwrap();
        let plain = supcon_of(&rows, &labels, 1.0, SupConOptions::default()).unwrap();
        assert!(mined < plain);
        // anchor 0 by hand: positives {1}, denominator over {1, 2}
        let a0 = -(0.8f64.exp() / (0.8f64.exp() + 0.6f64.exp())).ln();
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::from_rows(&rows[..3]).unwrap());
        let l = supcon_loss(&mut tape, z, &[0, 0, 1], 1.0, SupConOptions { hard_negatives: true }).unwrap();
        let a1 = -(0.8f64.exp() / (0.8f64.exp() + 0.96f64.exp())).ln();
        assert!((tape.value(l).item() - (a0 + a1) / 2.0).abs() < 1e-14);
    }

    fn unit_rows(rng: &mut RngStream, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
                let norm = v.iter().map(|e| e * e).sum::<f64>().sqrt();
                v.into_iter().map(|e| e / norm).collect()
            })
            .collect()
    }

    /// Orthogonal matrix from Gram-Schmidt on a random square matrix.
    fn random_rotation(rng: &mut RngStream, d: usize) -> Vec<Vec<f64>> {
        let mut basis: Vec<Vec<f64>> = Vec::new();
        while basis.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
            let norm = v.iter().map(|e| e * e).sum::<f64>().sqrt();
            if norm > 1e-6 {
                basis.push(v.into_iter().map(|e| e / norm).collect());
            }
        }
        basis
    }

    proptest! {
        #[test]
        fn focal_never_exceeds_cross_entropy(seed in 0u64..1000, gamma in 0.01f64..5.0) {
            let mut rng = RngStream::new(seed);
            let logits: Vec<f64> = (0..3).map(|_| 2.0 * rng.normal()).collect();
            let y = rng.below(3);
            prop_assert!(focal_of(&logits, y, 1.0, gamma) <= cross_entropy(&logits, y) + 1e-15);
        }

        #[test]
        fn supcon_is_nonnegative(seed in 0u64..1000, n in 2usize..10, tau in 0.05f64..2.0) {
            let mut rng = RngStream::new(seed);
            let rows = unit_rows(&mut rng, n, 4);
            let labels: Vec<usize> = (0..n).map(|_| rng.below(3)).collect();
            let opts = SupConOptions { hard_negatives: rng.below(2) == 1 };
            let loss = supcon_of(&rows, &labels, tau, opts).unwrap();
            prop_assert!(loss >= 0.0);
        }

        #[test]
        fn supcon_ignores_rotation(seed in 0u64..1000) {
            let mut rng = RngStream::new(seed);
            let rows = unit_rows(&mut rng, 6, 4);
            let labels: Vec<usize> = (0..6).map(|_| rng.below(2)).collect();
            let q = random_rotation(&mut rng, 4);
            let rotated: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| q.iter().map(|qrow| qrow.iter().zip(r).map(|(a, b)| a * b).sum()).collect())
                .collect();
            let a = supcon_of(&rows, &labels, 0.2, SupConOptions::default()).unwrap();
            let b = supcon_of(&rotated, &labels, 0.2, SupConOptions::default()).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
        }

        #[test]
        fn total_is_linear_in_each_weight(l in 0.0f64..5.0, which in 0usize..3) {
            let parts = [1.25, 2.0, 3.0, 0.5];
            let value = |w: &LossWeights| scalar_of(|t| {
                let v: Vec<Var> = parts.iter().map(|&p| t.constant(Tensor::scalar(p))).collect();
                let c = LossComponents { focal: v[0], modal: v[1], contrast: v[2], diversity: v[3] };
                total_loss(t, &c, w, 0)
            });
            let mut w = LossWeights::default();
            let base = value(&w);
            let slot = match which { 0 => &mut w.lambda_aux, 1 => &mut w.lambda_contrast, _ => &mut w.lambda_div };
            let before = *slot;
            *slot = l;
            prop_assert!((value(&w) - base - (l - before) * parts[which + 1]).abs() < 1e-12);
        }
    }

    #[test]
    fn total_loss_examples() {
        let build = |t: &mut Tape, parts: [f64; 4], w: &LossWeights| {
            let v: Vec<Var> = parts.iter().map(|&p| t.constant(Tensor::scalar(p))).collect();
            let c = LossComponents { focal: v[0], modal: v[1], contrast: v[2], diversity: v[3] };
            total_loss(t, &c, w, 3)
        };
        let zero = LossWeights { lambda_aux: 0.0, lambda_contrast: 0.0, lambda_div: 0.0, ..Default::default() };
        assert_eq!(scalar_of(|t| build(t, [0.7, 2.0, 3.0, 0.5], &zero)), 0.7);
        let ones = LossWeights { lambda_aux: 1.0, lambda_contrast: 1.0, lambda_div: 1.0, ..Default::default() };
        assert_eq!(scalar_of(|t| build(t, [1.0, 2.0, 3.0, 0.5], &ones)), 6.5);

        let mut tape = Tape::new();
        let err = build(&mut tape, [1.0, 2.0, f64::NAN, 0.5], &ones).unwrap_err();
        assert!(matches!(err, Error::NonFinite { ref component, epoch: 3 } if component == "contrast"));
    }

    #[test]
    fn total_gradient_on_contrast_is_its_weight() {
        let mut tape = Tape::new();
        let v: Vec<Var> = [1.0, 2.0, 3.0, 0.5].iter().map(|&p| tape.param(Tensor::scalar(p))).collect();
        let c = LossComponents { focal: v[0], modal: v[1], contrast: v[2], diversity: v[3] };
        let l = total_loss(&mut tape, &c, &LossWeights::default(), 0).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(v[2]).item(), 0.3);
    }

    #[test]
    fn aux_examples() {
        let aux = |features: &[Option<Tensor>; M], biases: [f64; 4], label: usize| {
            scalar_of(|t| {
                let projected = features.clone().map(|f| f.map(|f| t.constant(f)));
                let heads = [(); M].map(|_| {
                    Some(AuxHead {
                        weight: t.param(Tensor::zeros(&[2, 4])),
                        bias: t.param(Tensor::vector(biases.to_vec())),
                    })
                });
                aux_modality_loss(t, &projected, label, &heads)
            })
        };
        let f = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, -1.0]]).unwrap();
        let mut one = [const { None }; M];
        one[2] = Some(f.clone());
        let b = [0.1, 2.0, -0.5, 0.3];
        assert!((aux(&one, b, 1) - cross_entropy(&b, 1)).abs() < 1e-15);
        let mut two = one.clone();
        two[4] = Some(f);
        assert!((aux(&two, b, 1) - cross_entropy(&b, 1)).abs() < 1e-15);
        assert!((aux(&two, [0.0; 4], 3) - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn inverse_frequency_has_unit_mean() {
        let a = inverse_frequency_alpha(&[10, 30, 60]);
        assert!((a.iter().sum::<f64>() / 3.0 - 1.0).abs() < 1e-15);
        assert!((a[0] / a[1] - 3.0).abs() < 1e-12);
        assert_eq!(inverse_frequency_alpha(&[5, 0])[1], 1.0);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { temperature: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights { lambda_div: -0.1, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = RngStream::new(12);
        let z0 = Tensor::new(vec![5, 3], (0..15).map(|_| rng.normal()).collect()).unwrap();
        let logits0 = Tensor::new(vec![4], (0..4).map(|_| rng.normal()).collect()).unwrap();
        let labels = [0, 1, 0, 1, 1];
        for hard in [false, true] {
            let report = grad_check(
                |t, v| {
                    let unit = t.normalize_rows(v[0]);
                    supcon_loss(t, unit, &labels, 0.3, SupConOptions { hard_negatives: hard })
                },
                std::slice::from_ref(&z0),
                GradCheckOptions::default(),
            )
            .unwrap();
            assert!(report.passed, "supcon hard={hard}: {report}");
        }
        let report = grad_check(|t, v| focal_loss(t, v[0], 2, 0.7, 2.0), &[logits0], GradCheckOptions::default()).unwrap();
        assert!(report.passed, "focal: {report}");

        let f0 = Tensor::new(vec![3, 2], (0..6).map(|_| rng.normal()).collect()).unwrap();
        let w0 = Tensor::new(vec![2, 3], (0..6).map(|_| rng.normal()).collect()).unwrap();
        let report = grad_check(
            |t, v| {
                let mut projected = [None; M];
                projected[0] = Some(v[0]);
                projected[3] = Some(v[0]);
                let heads = [(); M].map(|_| Some(AuxHead { weight: v[1], bias: v[2] }));
                aux_modality_loss(t, &projected, 2, &heads)
            },
            &[f0, w0, Tensor::vector(vec![0.1, -0.2, 0.3])],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed, "aux: {report}");
    }
}
