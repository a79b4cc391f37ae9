use crate::error::{Error, Result};
use crate::numeric::RngStream;
use crate::train::BalanceStrategy;

/// Items that carry a class label, optionally perturbable.
pub trait Labeled {
    fn label(&self) -> usize;

    /// Adds Gaussian noise of scale `sigma` to the item's features.
    fn jitter(&mut self, _sigma: f64, _rng: &mut RngStream) {}
}

pub const JITTER_SIGMA: f64 = 0.01;

fn by_class<T: Labeled>(items: &[T], classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut groups = vec![Vec::new(); classes];
    for (i, it) in items.iter().enumerate() {
        let y = it.label();
        if y >= classes {
            return Err(Error::data(format!("label {y} outside {classes} classes")));
        }
        groups[y].push(i);
    }
    if let Some(k) = groups.iter().position(Vec::is_empty) {
        return Err(Error::data(format!("class {k} has no training samples")));
    }
    Ok(groups)
}

/// Equalizes class counts. Oversampling keeps every original in order and
/// appends randomly chosen duplicates (jittered if asked) until each class
/// matches the largest; downsampling keeps a random subset of each class,
/// in original order, the size of the smallest.
pub fn balance_classes<T: Labeled + Clone>(
    items: &[T],
    classes: usize,
    strategy: BalanceStrategy,
    jitter: bool,
    rng: &mut RngStream,
) -> Result<Vec<T>> {
    if strategy == BalanceStrategy::None {
        return Ok(items.to_vec());
    }
    let groups = by_class(items, classes)?;
    match strategy {
        BalanceStrategy::None => unreachable!(),
        BalanceStrategy::Oversample => {
            let target = groups.iter().map(Vec::len).max().unwrap_or(0);
            let mut out = items.to_vec();
            for g in &groups {
                for _ in g.len()..target {
                    let mut copy = items[g[rng.below(g.len())]].clone();
                    if jitter {
                        copy.jitter(JITTER_SIGMA, rng);
                    }
                    out.push(copy);
                }
            }
            Ok(out)
        }
        BalanceStrategy::Downsample => {
            let target = groups.iter().map(Vec::len).min().unwrap_or(0);
            let mut keep = vec![false; items.len()];
            for g in &groups {
                let mut g = g.clone();
                rng.shuffle(&mut g);
                g[..target].iter().for_each(|&i| keep[i] = true);
            }
            Ok(items.iter().zip(keep).filter(|(_, k)| *k).map(|(it, _)| it.clone()).collect())
        }
    }
}
