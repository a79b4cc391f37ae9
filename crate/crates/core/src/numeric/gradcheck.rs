//! Central finite-difference gradient checking.

use std::fmt;

use super::rng::RngStream;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    pub rtol: f64,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// true gradient is ~0 are judged on absolute error `rtol · floor`.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rtol: 1e-4,
            floor: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Offender {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub passed: bool,
    pub checked: usize,
    /// Coordinate with the largest relative error.
    pub worst: Option<Offender>,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "pass" } else { "FAIL" };
        write!(f, "{verdict} ({} coords)", self.checked)?;
        if let Some(w) = self.worst {
            write!(
                f,
                ", worst param {} index {}: analytic {:.6e} numeric {:.6e} rel {:.2e}",
                w.param, w.index, w.analytic, w.numeric, w.rel_error
            )?;
        }
        Ok(())
    }
}

/// Compares tape gradients of a scalar function against central differences
/// at every coordinate of every parameter.
///
/// `f` receives a fresh tape and one leaf per entry of `params`, and must be
/// deterministic.
pub fn grad_check<F>(f: F, params: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let root = f(&mut tape, &vars)?;
        Ok(tape.value(root).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let mut probe = params.to_vec();
    let mut worst: Option<Offender> = None;
    let mut checked = 0;
    for (pi, &var) in vars.iter().enumerate() {
        let analytic = grads.wrt(var).data().to_vec();
        for (idx, &a) in analytic.iter().enumerate() {
            let orig = probe[pi].data()[idx];
            probe[pi].data_mut()[idx] = orig + opts.step;
            let plus = eval(&probe)?;
            probe[pi].data_mut()[idx] = orig - opts.step;
            let minus = eval(&probe)?;
            probe[pi].data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let rel_error = (a - numeric).abs() / denom;
            checked += 1;
            if worst.is_none_or(|w| rel_error > w.rel_error) || rel_error.is_nan() {
                worst = Some(Offender {
                    param: pi,
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_error,
                });
            }
        }
    }
    let passed = worst.is_none_or(|w| w.rel_error <= opts.rtol);
    Ok(GradCheckReport {
        passed,
        checked,
        worst,
    })
}

fn random_tensor(rng: &mut RngStream, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| scale * rng.normal()).collect())
}

type PrimitiveCase = (&'static str, Vec<Vec<usize>>, fn(&mut Tape, &[Var]) -> Result<Var>);

/// Every differentiable primitive wrapped into a scalar function of its
/// inputs, each with the input shapes it is checked at.
fn primitive_cases() -> Vec<PrimitiveCase> {
    // Each closure reduces through a fixed, non-symmetric weighting so that
    // gradients are not trivially uniform.
    fn weigh(t: &mut Tape, v: Var) -> Result<Var> {
        let n = t.value(v).len();
        let shape = t.value(v).shape().to_vec();
        let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.17 * i as f64).collect();
        let y = t.mul_const(v, &Tensor::from_parts(shape, w))?;
        Ok(t.sum(y))
    }
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weigh(t, y)
        }),
        ("matmul_nt", vec![vec![3, 4], vec![2, 4]], |t, v| {
            let y = t.matmul_nt(v[0], v[1])?;
            weigh(t, y)
        }),
        ("matmul_tn", vec![vec![4, 3], vec![4, 2]], |t, v| {
            let y = t.matmul_t(v[0], v[1], true, false)?;
            weigh(t, y)
        }),
        ("add", vec![vec![2, 3], vec![2, 3]], |t, v| {
            let y = t.add(v[0], v[1])?;
            weigh(t, y)
        }),
        ("sub", vec![vec![2, 3], vec![2, 3]], |t, v| {
            let y = t.sub(v[0], v[1])?;
            weigh(t, y)
        }),
        ("mul", vec![vec![2, 3], vec![2, 3]], |t, v| {
            let y = t.mul(v[0], v[1])?;
            weigh(t, y)
        }),
        ("add_bias", vec![vec![3, 4], vec![4]], |t, v| {
            let y = t.add_bias(v[0], v[1])?;
            weigh(t, y)
        }),
        ("scale_by", vec![vec![2, 3], vec![1]], |t, v| {
            let y = t.scale_by(v[0], v[1])?;
            weigh(t, y)
        }),
        ("gelu", vec![vec![3, 3]], |t, v| {
            let y = t.gelu(v[0]);
            weigh(t, y)
        }),
        ("sigmoid", vec![vec![3, 3]], |t, v| {
            let y = t.sigmoid(v[0]);
            weigh(t, y)
        }),
        ("exp", vec![vec![3, 3]], |t, v| {
            let y = t.exp(v[0]);
            weigh(t, y)
        }),
        ("log", vec![vec![3, 3]], |t, v| {
            let e = t.exp(v[0]);
            let s = t.add_scalar(e, 0.5);
            let y = t.log(s);
            weigh(t, y)
        }),
        ("softmax", vec![vec![3, 4]], |t, v| {
            let y = t.softmax(v[0]);
            weigh(t, y)
        }),
        ("log_softmax", vec![vec![3, 4]], |t, v| {
            let y = t.log_softmax(v[0]);
            weigh(t, y)
        }),
        ("layer_norm", vec![vec![3, 5], vec![5], vec![5]], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weigh(t, y)
        }),
        ("normalize_rows", vec![vec![3, 4]], |t, v| {
            let y = t.normalize_rows(v[0]);
            weigh(t, y)
        }),
        ("transpose", vec![vec![2, 5]], |t, v| {
            let y = t.transpose(v[0])?;
            weigh(t, y)
        }),
        ("mean", vec![vec![2, 5]], |t, v| {
            let s = t.exp(v[0]);
            Ok(t.mean(s))
        }),
        ("weighted_row_sum", vec![vec![4, 3]], |t, v| {
            let y = t.weighted_row_sum(v[0], vec![0.25, 0.0, 0.5, 0.25])?;
            weigh(t, y)
        }),
        ("slice_concat", vec![vec![3, 6], vec![3, 2]], |t, v| {
            let a = t.slice_cols(v[0], 1, 3)?;
            let y = t.concat_cols(&[a, v[1]])?;
            weigh(t, y)
        }),
        ("stack_row_pick", vec![vec![4], vec![4]], |t, v| {
            let m = t.stack(&[v[0], v[1]])?;
            let r = t.row(m, 1)?;
            let g = t.gelu(r);
            let p = t.pick(m, 2)?;
            let a = weigh(t, g)?;
            let p2 = t.mul(p, p)?;
            t.add(a, p2)
        }),
        ("focal", vec![vec![3]], |t, v| {
            let lp = t.log_softmax(v[0]);
            let l = t.pick(lp, 1)?;
            t.focal_from_log_prob(l, 0.7, 2.0)
        }),
    ]
}

/// Runs every primitive case `trials` times on random inputs.
pub fn primitive_suite(
    rng: &mut RngStream,
    trials: usize,
    opts: GradCheckOptions,
) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut out = Vec::new();
    for (name, shapes, f) in primitive_cases() {
        let mut merged = GradCheckReport {
            passed: true,
            checked: 0,
            worst: None,
        };
        for _ in 0..trials {
            let params: Vec<Tensor> = shapes.iter().map(|s| random_tensor(rng, s, 1.0)).collect();
            let r = grad_check(f, &params, opts)?;
            merged.passed &= r.passed;
            merged.checked += r.checked;
            if let Some(w) = r.worst {
                if merged.worst.is_none_or(|m| w.rel_error > m.rel_error) {
                    merged.worst = Some(w);
                }
            }
        }
        out.push((name, merged));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_passes() {
        let report = grad_check(
            |t, v| t.mul(v[0], v[0]),
            &[Tensor::scalar(3.0)],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed);
        let w = report.worst.unwrap();
        assert!((w.analytic - 6.0).abs() < 1e-12);
        assert!((w.numeric - 6.0).abs() < 1e-8);
    }

    #[test]
    fn focal_of_three_logits_passes() {
        let report = grad_check(
            |t, v| {
                let lp = t.log_softmax(v[0]);
                let l = t.pick(lp, 2)?;
                t.focal_from_log_prob(l, 0.25, 2.0)
            },
            &[Tensor::vector(vec![0.4, -1.1, 0.9])],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed, "{report}");
    }

    #[test]
    fn wrong_local_gradient_is_caught() {
        // sin whose derivative is wrong only below 0.5
        let report = grad_check(
            |t, v| {
                let y = t.map(v[0], f64::sin, |x, _| {
                    x.cos() + if x < 0.5 { 0.3 } else { 0.0 }
                });
                Ok(t.sum(y))
            },
            &[Tensor::vector(vec![1.5, 1.2, 0.1])],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!report.passed);
        let w = report.worst.unwrap();
        assert_eq!(w.param, 0);
        assert_eq!(w.index, 2);
    }

    #[test]
    fn every_primitive_passes_on_random_inputs() {
        let mut rng = RngStream::new(2024);
        for (name, report) in primitive_suite(&mut rng, 5, GradCheckOptions::default()).unwrap() {
            assert!(report.passed, "{name}: {report}");
        }
    }
}
