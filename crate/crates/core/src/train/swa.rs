use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Running arithmetic mean of parameter snapshots.
#[derive(Clone, Debug, PartialEq)]
pub struct SwaState {
    pub mean: Vec<Tensor>,
    pub count: u64,
    /// First epoch at which snapshots are absorbed.
    pub start: usize,
}

impl SwaState {
    pub fn new(start: usize) -> Self {
        Self { mean: Vec::new(), count: 0, start }
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

/// Absorbs one snapshot: `mean ← mean + (θ − mean) / n`.
pub fn swa_average(state: &mut SwaState, params: &[Tensor]) -> Result<()> {
    if state.count == 0 {
        state.mean = params.to_vec();
        state.count = 1;
        return Ok(());
    }
    if params.len() != state.mean.len() {
        return Err(Error::shape(format!("{} tensors for an average over {}", params.len(), state.mean.len())));
    }
    state.count += 1;
    let inv = 1.0 / state.count as f64;
    for (mean, p) in state.mean.iter_mut().zip(params) {
        if mean.shape() != p.shape() {
            return Err(Error::shape(format!("snapshot shape {:?} vs {:?}", p.shape(), mean.shape())));
        }
        for (m, &x) in mean.data_mut().iter_mut().zip(p.data()) {
            *m += (x - *m) * inv;
        }
    }
    Ok(())
}
