use crate::error::{Error, Result};
use crate::numeric::{dropout, RngStream, Tape, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Tape handles for one modality's projection into the shared latent space.
#[derive(Clone, Copy, Debug)]
pub struct ProjectionVars {
    /// `d_m × d`
    pub weight: Var,
    /// `d`
    pub bias: Var,
    pub norm_gain: Var,
    pub norm_bias: Var,
}

/// `Dropout(GELU(LayerNorm(F·W + b)))`, normalizing over the feature axis.
pub fn project_modality(
    tape: &mut Tape,
    features: Var,
    params: &ProjectionVars,
    dropout_rate: f64,
    rng: &mut RngStream,
    training: bool,
) -> Result<Var> {
    let in_width = tape.value(features).cols();
    let w_rows = tape.value(params.weight).shape()[0];
    if in_width != w_rows {
        return Err(Error::shape(format!(
            "modality width {in_width} does not match projection input {w_rows}"
        )));
    }
    let xw = tape.matmul(features, params.weight)?;
    let lin = tape.add_bias(xw, params.bias)?;
    let normed = tape.layer_norm(lin, params.norm_gain, params.norm_bias, LAYER_NORM_EPS)?;
    let act = tape.gelu(normed);
    dropout(tape, act, dropout_rate, rng, training)
}
