use crate::error::Result;
use crate::features::projection::LAYER_NORM_EPS;
use crate::numeric::{Tape, Var};

/// Tape handles for the classifier `W4 · GELU(LN(W3 · h + b3)) + b4`.
#[derive(Clone, Copy, Debug)]
pub struct ClassifierHead {
    /// `d × d_hidden`
    pub w3: Var,
    pub b3: Var,
    pub norm_gain: Var,
    pub norm_bias: Var,
    /// `d_hidden × C`
    pub w4: Var,
    pub b4: Var,
}

/// Tape handles for the contrastive head `W2 · act(W1 · h + b1) + b2`.
#[derive(Clone, Copy, Debug)]
pub struct ProjectionHead {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum HeadActivation {
    #[default]
    Gelu,
    Identity,
}

fn as_row(tape: &mut Tape, h: Var) -> Result<Var> {
    let d = tape.value(h).len();
    tape.reshape(h, &[1, d])
}

/// Class logits for one representation, shape `C`.
pub fn classify_logits(tape: &mut Tape, h: Var, head: &ClassifierHead) -> Result<Var> {
    let row = as_row(tape, h)?;
    let hidden = tape.linear(row, head.w3, head.b3)?;
    let hidden = tape.layer_norm(hidden, head.norm_gain, head.norm_bias, LAYER_NORM_EPS)?;
    let hidden = tape.gelu(hidden);
    let logits = tape.linear(hidden, head.w4, head.b4)?;
    let c = tape.value(logits).len();
    tape.reshape(logits, &[c])
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Projects one representation and scales it to unit length. A zero
/// projection stays zero.
pub fn contrastive_project(tape: &mut Tape, h: Var, head: &ProjectionHead, act: HeadActivation) -> Result<Var> {
    let row = as_row(tape, h)?;
    let hidden = tape.linear(row, head.w1, head.b1)?;
    let hidden = match act {
        HeadActivation::Gelu => tape.gelu(hidden),
        HeadActivation::Identity => hidden,
    };
    let out = tape.linear(hidden, head.w2, head.b2)?;
    let unit = tape.normalize_rows(out);
    let width = tape.value(unit).len();
    tape.reshape(unit, &[width])
}
