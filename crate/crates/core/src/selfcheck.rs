//! Finite-difference checks over every differentiable building block, run
//! by the `gradcheck` command.

use crate::backbone::DiversityMode;
use crate::error::Result;
use crate::features::{assemble_bundle, gcn_forward, FeatureOptions, GcnActivation, ModalityBundle, M};
use crate::model::{LossOptions, Model, ModelSpec};
use crate::numeric::{grad_check, GradCheckOptions, GradCheckReport, RngStream, Tape, Tensor, Var};
use crate::objectives::{focal_loss, supcon_loss, LossWeights, SupConOptions};

fn random(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).expect("shape matches data")
}

/// Reduces `x` to a scalar through fixed random weights.
fn probe(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let w = random(&mut RngStream::new(seed), tape.value(x).shape());
    let y = tape.mul_const(x, &w)?;
    Ok(tape.sum(y))
}

fn check(f: impl Fn(&mut Tape, &[Var]) -> Result<Var>, params: &[Tensor]) -> Result<GradCheckReport> {
    grad_check(f, params, GradCheckOptions::default())
}

fn model_spec() -> ModelSpec {
    ModelSpec {
        d_model: 16,
        n_layers: 2,
        n_heads: 4,
        n_experts: 2,
        expert_hidden: 12,
        classifier_hidden: 8,
        proj_dim: 6,
        gcn_width: 6,
        classes: 3,
        input_widths: [20, 20, 8, 8, 0],
        gcn_node_width: 8,
        dropout: 0.0,
        positional: None,
        enabled: [true; M],
        amf: true,
        amf_normalize: false,
        amf_two_pass: false,
        moe: true,
        contrastive: true,
    }
}

/// Runs every check and returns `(name, report)` pairs in a fixed order.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = RngStream::new(seed);
    let mut out = Vec::new();

    let (a, b) = (random(&mut rng, &[3, 4]), random(&mut rng, &[4, 5]));
    out.push(("matmul", check(|t, v| { let y = t.matmul(v[0], v[1])?; probe(t, y, 1) }, &[a, b])?));

    let (x, w, bias) = (random(&mut rng, &[3, 4]), random(&mut rng, &[4, 2]), random(&mut rng, &[2]));
    out.push(("linear", check(|t, v| { let y = t.linear(v[0], v[1], v[2])?; probe(t, y, 2) }, &[x, w, bias])?));

    let x = random(&mut rng, &[2, 5]);
    out.push(("gelu", check(|t, v| { let y = t.gelu(v[0]); probe(t, y, 3) }, std::slice::from_ref(&x))?));
    out.push(("softmax", check(|t, v| { let y = t.softmax(v[0]); probe(t, y, 4) }, std::slice::from_ref(&x))?));
    out.push(("log_softmax", check(|t, v| { let y = t.log_softmax(v[0]); probe(t, y, 5) }, std::slice::from_ref(&x))?));
    out.push(("normalize_rows", check(|t, v| { let y = t.normalize_rows(v[0]); probe(t, y, 6) }, std::slice::from_ref(&x))?));

    let (g, b) = (random(&mut rng, &[5]), random(&mut rng, &[5]));
    out.push((
        "layer_norm",
        check(|t, v| { let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?; probe(t, y, 7) }, &[x, g, b])?,
    ));

    let (p, q) = (random(&mut rng, &[3, 4]), random(&mut rng, &[3, 4]));
    out.push((
        "elementwise",
        check(
            |t, v| {
                let a = t.add(v[0], v[1])?;
                let b = t.sub(v[0], v[1])?;
                let c = t.mul(a, b)?;
                let s = t.sigmoid(c);
                let e = t.exp(s);
                let l = t.log(e);
                let k = t.pick(v[1], 0)?;
                let y = t.scale_by(l, k)?;
                let y = t.add_scalar(y, 0.5);
                probe(t, y, 10)
            },
            &[p.clone(), q.clone()],
        )?,
    ));
    out.push((
        "structural",
        check(
            |t, v| {
                let tr = t.transpose(v[0])?;
                let back = t.transpose(tr)?;
                let left = t.slice_cols(back, 0, 2)?;
                let right = t.slice_cols(v[1], 1, 3)?;
                let cat = t.concat_cols(&[left, right])?;
                let r0 = t.row(cat, 0)?;
                let r2 = t.row(cat, 2)?;
                let st = t.stack(&[r0, r2])?;
                let flat = t.reshape(st, &[10])?;
                let m = t.mean(flat);
                let w = t.weighted_row_sum(cat, vec![0.2, -0.7, 1.1])?;
                let ws = t.sum(w);
                let pm = probe(t, flat, 11)?;
                t.add_all(&[m, ws, pm])
            },
            &[p.clone(), q.clone()],
        )?,
    ));
    out.push(("matmul_nt", check(|t, v| { let y = t.matmul_nt(v[0], v[1])?; probe(t, y, 12) }, &[p, q])?));

    let adj = Tensor::from_rows(&[
        vec![0.5, 0.5, 0.0],
        vec![0.4, 0.3, 0.3],
        vec![0.0, 0.5, 0.5],
    ])?;
    let (nodes, w1, w2) = (random(&mut rng, &[3, 4]), random(&mut rng, &[4, 3]), random(&mut rng, &[3, 3]));
    out.push((
        "gcn",
        check(
            |t, v| {
                let a = t.constant(adj.clone());
                let y = gcn_forward(t, a, v[0], &[v[1], v[2]], GcnActivation::Gelu)?;
                probe(t, y, 8)
            },
            &[nodes, w1, w2],
        )?,
    ));

    let logits = random(&mut rng, &[4]);
    out.push(("focal", check(|t, v| focal_loss(t, v[0], 1, 0.8, 2.0), &[logits])?));

    let z = random(&mut rng, &[6, 4]);
    let labels = [0, 1, 0, 2, 1, 0];
    for (name, hard) in [("supcon", false), ("supcon_hard_negatives", true)] {
        out.push((
            name,
            check(
                |t, v| {
                    let u = t.normalize_rows(v[0]);
                    supcon_loss(t, u, &labels, 0.5, SupConOptions { hard_negatives: hard })
                },
                std::slice::from_ref(&z),
            )?,
        ));
    }

    let model = Model::init(model_spec(), seed)?;
    let opts = FeatureOptions { synthetic_width: 8, ..Default::default() };
    let data: Vec<ModalityBundle> = ["ACDEFG", "KLMNPQ", "RSTVWY", "AKDRGW"]
        .iter()
        .enumerate()
        .map(|(i, s)| assemble_bundle(&format!("s{i}"), s, Default::default(), &opts))
        .collect::<Result<_>>()?;
    let batch: Vec<(&ModalityBundle, usize)> = data.iter().zip([0, 1, 0, 2]).collect();
    let weights = LossWeights { lambda_aux: 0.5, lambda_contrast: 0.4, lambda_div: 0.3, temperature: 0.5, ..Default::default() };
    let loss_opts = LossOptions { diversity: Some(DiversityMode::BatchMean), ..Default::default() };
    out.push((
        "full_objective",
        check(
            |t, _| {
                let mut r = RngStream::new(1);
                Ok(model.batch_loss(t, &batch, &[1.0, 0.8, 1.3], &weights, &loss_opts, &mut r, true, 0)?.total)
            },
            &model.params.tensors,
        )?,
    ));
    Ok(out)
}
