//! Top-k selection shared by the approximate and exact selectors.

use std::cmp::Ordering;
use std::collections::HashSet;

use crate::error::{Error, Result};

/// Descending score, then ascending id.
#[inline]
fn rank(a: &(usize, f32), b: &(usize, f32)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// The `k` non-excluded ids with the largest scores in descending score
/// order; ties go to the lower id.
pub fn top_k(scores: &[f32], k: usize, excluded: &HashSet<usize>) -> Result<Vec<usize>> {
    let mut candidates: Vec<(usize, f32)> = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| !excluded.contains(i))
        .map(|(i, &s)| (i, s))
        .collect();
    if k > candidates.len() {
        return Err(Error::KTooLarge {
            k,
            available: candidates.len(),
        });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k - 1, rank);
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(rank);
    Ok(candidates.into_iter().map(|(i, _)| i).collect())
}
