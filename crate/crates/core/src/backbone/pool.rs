use crate::error::{Error, Result};
use crate::numeric::{Tape, Var};

/// Mean over the rows of an `L×d` value, skipping rows where `mask` is false.
pub fn mean_pool(tape: &mut Tape, h: Var, mask: Option<&[bool]>) -> Result<Var> {
    let rows = tape.value(h).rows();
    let keep: Vec<bool> = match mask {
        Some(m) if m.len() != rows => {
            return Err(Error::shape(format!("mask of {} for {rows} rows", m.len())))
        }
        Some(m) => m.to_vec(),
        None => vec![true; rows],
    };
    let count = keep.iter().filter(|&&k| k).count();
    if count == 0 {
        return Err(Error::invalid("mean_pool over a fully masked sequence"));
    }
    let w = 1.0 / count as f64;
    let weights = keep.iter().map(|&k| if k { w } else { 0.0 }).collect();
    tape.weighted_row_sum(h, weights)
}
