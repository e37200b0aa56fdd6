use super::{CorpusIndex, Split};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];

/// Smallest subset a style may have.
const MIN_SUBSET: usize = 3;

/// Largest-remainder apportionment of `n` items to `ratios`. Ties in the
/// fractional parts go to the earlier share.
pub fn largest_remainder(n: usize, ratios: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Assigns train/validation/test independently within each style subset.
pub fn split_corpus(mut index: CorpusIndex, ratios: [f64; 3], seed: u64) -> Result<CorpusIndex> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for style in index.style_vocab.clone() {
        let mut members: Vec<usize> = index
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.style == style)
            .map(|(i, _)| i)
            .collect();
        if members.len() < MIN_SUBSET {
            return Err(Error::SubsetTooSmall {
                style,
                len: members.len(),
                min: MIN_SUBSET,
            });
        }
        members.shuffle(&mut rng);
        let counts = largest_remainder(members.len(), &ratios);
        let mut cursor = members.into_iter();
        for (split, count) in Split::ALL.into_iter().zip(counts) {
            for i in cursor.by_ref().take(count) {
                index.entries[i].split = Some(split);
            }
        }
    }
    index.split_seed = Some(seed);
    index.ratios = Some(ratios);
    Ok(index)
}
