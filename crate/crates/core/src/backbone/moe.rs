//! Dense mixture of experts with softmax gating, and the expert diversity
//! penalty.

use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor, Var};

/// One expert: `W2 · GELU(W1 · z + b1) + b2`.
#[derive(Clone, Copy, Debug)]
pub struct ExpertVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Debug)]
pub struct MoeVars {
    pub experts: Vec<ExpertVars>,
    /// `d×K`
    pub gate_weight: Var,
    /// `K`
    pub gate_bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct MoeOutput {
    /// Gated combination, `d`.
    pub h: Var,
    /// Gate distribution, `K`.
    pub gate: Var,
    /// Every expert's output, `K×d`.
    pub expert_outputs: Var,
}

pub fn expert_forward(tape: &mut Tape, z_row: Var, e: &ExpertVars) -> Result<Var> {
    let hidden = tape.linear(z_row, e.w1, e.b1)?;
    let hidden = tape.gelu(hidden);
    tape.linear(hidden, e.w2, e.b2)
}

/// Evaluates every expert on `z` and mixes them with
/// `g = softmax(z·W_g + b_g)`.
pub fn moe_forward(tape: &mut Tape, z: Var, params: &MoeVars) -> Result<MoeOutput> {
    if params.experts.is_empty() {
        return Err(Error::invalid("mixture needs at least one expert"));
    }
    let d = tape.value(z).len();
    let z_row = tape.reshape(z, &[1, d])?;
    let gate_logits = tape.linear(z_row, params.gate_weight, params.gate_bias)?;
    let gate_row = tape.softmax(gate_logits);
    let outputs: Vec<Var> = params
        .experts
        .iter()
        .map(|e| expert_forward(tape, z_row, e))
        .collect::<Result<_>>()?;
    let expert_outputs = tape.stack(&outputs)?;
    let mixed = tape.matmul(gate_row, expert_outputs)?;
    let width = tape.value(mixed).len();
    Ok(MoeOutput {
        h: tape.reshape(mixed, &[width])?,
        gate: tape.reshape(gate_row, &[params.experts.len()])?,
        expert_outputs,
    })
}

/// Where expert outputs are compared for the diversity penalty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiversityMode {
    /// Cosine similarity between batch-averaged expert outputs.
    BatchMean,
    /// Per-sample penalty, averaged over the batch.
    PerSample,
}

fn pairwise_cosine_mean(tape: &mut Tape, outputs: Var) -> Result<Var> {
    let k = tape.value(outputs).rows();
    let unit = tape.normalize_rows(outputs);
    let sims = tape.matmul_nt(unit, unit)?;
    let mut off_diag = Tensor::ones(&[k, k]);
    for i in 0..k {
        off_diag.data_mut()[i * k + i] = 0.0;
    }
    let masked = tape.mul_const(sims, &off_diag)?;
    let total = tape.sum(masked);
    Ok(tape.scale(total, 1.0 / (k * (k - 1)) as f64))
}

/// Mean pairwise cosine similarity between experts over ordered pairs
/// `i ≠ j`. Takes one `K×d` expert-output matrix per sample. Returns a
/// constant zero (with a warning) when `K < 2`.
pub fn expert_diversity_loss(tape: &mut Tape, per_sample: &[Var], mode: DiversityMode) -> Result<Var> {
    let first = *per_sample
        .first()
        .ok_or_else(|| Error::invalid("diversity loss over an empty batch"))?;
    let k = tape.value(first).rows();
    if k < 2 {
        log::warn!("diversity loss needs at least two experts; using 0");
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let n = per_sample.len() as f64;
    match mode {
        DiversityMode::BatchMean => {
            let total = tape.add_all(per_sample)?;
            let mean = tape.scale(total, 1.0 / n);
            pairwise_cosine_mean(tape, mean)
        }
        DiversityMode::PerSample => {
            let terms: Vec<Var> = per_sample
                .iter()
                .map(|&o| pairwise_cosine_mean(tape, o))
                .collect::<Result<_>>()?;
            let total = tape.add_all(&terms)?;
            Ok(tape.scale(total, 1.0 / n))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::RngStream;
    use proptest::prelude::*;

    fn rand(rng: &mut RngStream, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    fn experts(tape: &mut Tape, rng: &mut RngStream, k: usize, d: usize, hidden: usize, shared: bool) -> Vec<ExpertVars> {
        let template = [rand(rng, &[d, hidden]), rand(rng, &[hidden]), rand(rng, &[hidden, d]), rand(rng, &[d])];
        (0..k)
            .map(|_| {
                let ts = if shared {
                    template.clone()
                } else {
                    [rand(rng, &[d, hidden]), rand(rng, &[hidden]), rand(rng, &[hidden, d]), rand(rng, &[d])]
                };
                let [w1, b1, w2, b2] = ts.map(|t| tape.param(t));
                ExpertVars { w1, b1, w2, b2 }
            })
            .collect()
    }

    #[test]
    fn identical_experts_ignore_the_gate() {
        let mut rng = RngStream::new(1);
        let mut tape = Tape::new();
        let es = experts(&mut tape, &mut rng, 4, 6, 5, true);
        let params = MoeVars {
            experts: es.clone(),
            gate_weight: tape.param(rand(&mut rng, &[6, 4])),
            gate_bias: tape.param(rand(&mut rng, &[4])),
        };
        let z = tape.constant(rand(&mut rng, &[6]));
        let out = moe_forward(&mut tape, z, &params).unwrap();
        let z_row = tape.reshape(z, &[1, 6]).unwrap();
        let e1 = expert_forward(&mut tape, z_row, &es[0]).unwrap();
        assert!(tape.value(out.h).data().iter().zip(tape.value(e1).data()).all(|(a, b)| (a - b).abs() <= 1e-12));
    }

    #[test]
    fn zero_gate_is_uniform() {
        let mut rng = RngStream::new(2);
        let mut tape = Tape::new();
        let params = MoeVars {
            experts: experts(&mut tape, &mut rng, 4, 3, 2, false),
            gate_weight: tape.param(Tensor::zeros(&[3, 4])),
            gate_bias: tape.param(Tensor::zeros(&[4])),
        };
        let z = tape.constant(rand(&mut rng, &[3]));
        let out = moe_forward(&mut tape, z, &params).unwrap();
        assert_eq!(tape.value(out.gate).data(), &[0.25; 4]);
    }

    #[test]
    fn gate_bias_closed_form() {
        let mut rng = RngStream::new(3);
        let mut tape = Tape::new();
        let params = MoeVars {
            experts: experts(&mut tape, &mut rng, 2, 3, 2, false),
            gate_weight: tape.param(Tensor::zeros(&[3, 2])),
            gate_bias: tape.param(Tensor::vector(vec![3f64.ln(), 0.0])),
        };
        let z = tape.constant(rand(&mut rng, &[3]));
        let out = moe_forward(&mut tape, z, &params).unwrap();
        let g = tape.value(out.gate).data();
        assert!((g[0] - 0.75).abs() < 1e-15 && (g[1] - 0.25).abs() < 1e-15);
    }

    fn diversity_of(rows: &[Vec<f64>]) -> f64 {
        let mut tape = Tape::new();
        let o = tape.constant(Tensor::from_rows(rows).unwrap());
        let l = expert_diversity_loss(&mut tape, &[o], DiversityMode::BatchMean).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn diversity_extremes() {
        assert!((diversity_of(&vec![vec![1.0, 2.0, 3.0]; 3]) - 1.0).abs() < 1e-12);
        assert_eq!(diversity_of(&[vec![1.0, 0.0], vec![0.0, 2.0]]), 0.0);
        assert!((diversity_of(&[vec![1.0, -2.0], vec![-1.0, 2.0]]) + 1.0).abs() < 1e-12);
        assert_eq!(diversity_of(&[vec![1.0, -2.0]]), 0.0);
    }

    #[test]
    fn batch_mean_compares_averaged_outputs() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![2.0, -1.0]]).unwrap());
        // means: [1, 0] and [1, 0] → identical
        let l = expert_diversity_loss(&mut tape, &[a, b], DiversityMode::BatchMean).unwrap();
        assert!((tape.value(l).item() - 1.0).abs() < 1e-12);
        let l = expert_diversity_loss(&mut tape, &[a, b], DiversityMode::PerSample).unwrap();
        let second = 2.0 / 5f64.sqrt();
        assert!((tape.value(l).item() - (0.0 + second) / 2.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn output_in_convex_hull(seed in 0u64..300) {
            let mut rng = RngStream::new(seed);
            let mut tape = Tape::new();
            let params = MoeVars {
                experts: experts(&mut tape, &mut rng, 3, 4, 3, false),
                gate_weight: tape.param(rand(&mut rng, &[4, 3])),
                gate_bias: tape.param(rand(&mut rng, &[3])),
            };
            let z = tape.constant(rand(&mut rng, &[4]));
            let out = moe_forward(&mut tape, z, &params).unwrap();
            let e = tape.value(out.expert_outputs).clone();
            for (j, &h) in tape.value(out.h).data().iter().enumerate() {
                let col: Vec<f64> = (0..3).map(|k| e.at(k, j)).collect();
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(h >= lo - 1e-12 && h <= hi + 1e-12);
            }
        }

        #[test]
        fn diversity_ignores_positive_rescaling(seed in 0u64..300, s in 0.01f64..100.0) {
            let mut rng = RngStream::new(seed);
            let rows: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
            let mut scaled = rows.clone();
            scaled[1].iter_mut().for_each(|v| *v *= s);
            prop_assert!((diversity_of(&rows) - diversity_of(&scaled)).abs() < 1e-12);
        }
    }
}
