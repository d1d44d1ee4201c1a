//! Exact attention, oracle top-k, and selective attention over retrieved tokens.
//!
//! Scores are `dot(q, k) / sqrt(d_h)`. Softmax and weighted sums accumulate
//! in `f64` and round to `f32` once.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::kv_store::{HeadStore, KvEntry};
use crate::select;

fn check_rows(data: &[f32], head_dim: usize, what: &str) -> Result<usize> {
    if head_dim == 0 || !data.len().is_multiple_of(head_dim) {
        return Err(Error::DimensionMismatch(format!(
            "{what}: {} values do not form rows of {head_dim}",
            data.len()
        )));
    }
    Ok(data.len() / head_dim)
}

pub fn exact_scores(query: &[f32], keys: &[f32]) -> Result<Vec<f32>> {
    let d = query.len();
    let t = check_rows(keys, d, "keys")?;
    if t == 0 {
        return Err(Error::EmptyInput("attention keys"));
    }
    let scale = 1.0 / (d as f64).sqrt();
    Ok(keys
        .chunks_exact(d)
        .map(|k| {
            let dot: f64 = query
                .iter()
                .zip(k)
                .map(|(a, b)| *a as f64 * *b as f64)
                .sum();
            (dot * scale) as f32
        })
        .collect())
}

/// Oracle selector: exact top-k by true scores, ties toward the lower id.
pub fn exact_topk(
    query: &[f32],
    keys: &[f32],
    k: usize,
    excluded: &HashSet<usize>,
) -> Result<Vec<usize>> {
    select::top_k(&exact_scores(query, keys)?, k, excluded)
}

/// Max-subtracted softmax in `f64`.
pub fn softmax(scores: &[f32]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = scores.iter().map(|&s| (s as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn weighted_sum<'a>(
    weights: &[f64],
    values: impl Iterator<Item = &'a [f32]>,
    d: usize,
) -> Vec<f32> {
    let mut acc = vec![0.0f64; d];
    for (w, v) in weights.iter().zip(values) {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += w * *x as f64;
        }
    }
    acc.into_iter().map(|a| a as f32).collect()
}

pub fn softmax_attention(query: &[f32], keys: &[f32], values: &[f32]) -> Result<Vec<f32>> {
    let d = query.len();
    let tv = check_rows(values, d, "values")?;
    let weights = softmax(&exact_scores(query, keys)?);
    if tv != weights.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} keys but {tv} values",
            weights.len()
        )));
    }
    Ok(weighted_sum(&weights, values.chunks_exact(d), d))
}

/// Attention over an explicit list of entries.
pub fn attend_entries(query: &[f32], entries: &[&KvEntry]) -> Result<Vec<f32>> {
    let d = query.len();
    if entries.is_empty() {
        return Err(Error::EmptyInput("attention entries"));
    }
    if let Some(e) = entries
        .iter()
        .find(|e| e.key.len() != d || e.value.len() != d)
    {
        return Err(Error::DimensionMismatch(format!(
            "entry widths ({}, {}) != query width {d}",
            e.key.len(),
            e.value.len()
        )));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let scores: Vec<f32> = entries
        .iter()
        .map(|e| {
            let dot: f64 = query
                .iter()
                .zip(&e.key)
                .map(|(a, b)| *a as f64 * *b as f64)
                .sum();
            (dot * scale) as f32
        })
        .collect();
    let weights = softmax(&scores);
    Ok(weighted_sum(
        &weights,
        entries.iter().map(|e| e.value.as_slice()),
        d,
    ))
}

/// The token set used by selective attention: initial tokens, the selected
/// middle tokens in ascending id order, then local tokens.
pub fn selective_entries<'a>(
    head: &'a HeadStore,
    selected_middle_ids: &[usize],
) -> Result<Vec<&'a KvEntry>> {
    let mut ids = selected_middle_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut entries: Vec<&KvEntry> = head.init_entries().iter().collect();
    for id in ids {
        entries.push(head.middle_entry(id)?);
    }
    entries.extend(head.local_entries());
    Ok(entries)
}

pub fn selective_attention(
    query: &[f32],
    head: &HeadStore,
    selected_middle_ids: &[usize],
) -> Result<Vec<f32>> {
    attend_entries(query, &selective_entries(head, selected_middle_ids)?)
}

/// Full attention over every token of the head.
pub fn full_attention(query: &[f32], head: &HeadStore) -> Result<Vec<f32>> {
    attend_entries(query, &head.all_entries())
}

/// Attention for each query head of a GQA group over one shared token set.
pub fn gqa_group_attention(
    queries: &[f32],
    keys: &[f32],
    values: &[f32],
    head_dim: usize,
) -> Result<Vec<f32>> {
    let g = check_rows(queries, head_dim, "queries")?;
    if g == 0 {
        return Err(Error::EmptyInput("query group"));
    }
    let mut out = Vec::with_capacity(queries.len());
    for q in queries.chunks_exact(head_dim) {
        out.extend(softmax_attention(q, keys, values)?);
    }
    Ok(out)
}

/// `||a - b|| / ||b||`, or `||a||` when `b` is zero.
pub fn relative_error(approx: &[f32], reference: &[f32]) -> f64 {
    let diff: f64 = approx
        .iter()
        .zip(reference)
        .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = reference
        .iter()
        .map(|b| (*b as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kv_store::{CacheConfig, KvStore};
    use crate::shape::{ModelShape, SegmentConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| rng.sample::<f32, _>(StandardNormal))
            .collect()
    }

    /// Naive double loop in f64, including the softmax.
    fn reference_attention(q: &[f32], keys: &[f32], values: &[f32]) -> Vec<f64> {
        let d = q.len();
        let t = keys.len() / d;
        let mut scores = vec![0.0f64; t];
        for i in 0..t {
            for j in 0..d {
                scores[i] += q[j] as f64 * keys[i * d + j] as f64;
            }
            scores[i] /= (d as f64).sqrt();
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
        let mut out = vec![0.0f64; d];
        for i in 0..t {
            let w = (scores[i] - max).exp() / z;
            for j in 0..d {
                out[j] += w * values[i * d + j] as f64;
            }
        }
        out
    }

    #[test]
    fn orthogonal_query_scores_zero() {
        let keys = [0.0f32, 1.0, 0.0, 2.0, 0.0, -3.0];
        assert_eq!(exact_scores(&[5.0, 0.0], &keys).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn identity_keys_hand_arithmetic() {
        let mut keys = vec![0.0f32; 16];
        for i in 0..4 {
            keys[i * 4 + i] = 1.0;
        }
        assert_eq!(
            exact_scores(&[1.0, 2.0, 3.0, 4.0], &keys).unwrap(),
            vec![0.5, 1.0, 1.5, 2.0]
        );
    }

    #[test]
    fn scores_match_double_loop() {
        let q = gaussian(16, 1);
        let keys = gaussian(16 * 50, 2);
        let got = exact_scores(&q, &keys).unwrap();
        for i in 0..50 {
            let mut s = 0.0f64;
            for j in 0..16 {
                s += q[j] as f64 * keys[i * 16 + j] as f64;
            }
            assert!((got[i] as f64 - s / 4.0).abs() <= 1e-6 * (1.0 + s.abs()));
        }
        assert!(exact_scores(&q, &keys[..15]).is_err());
    }

    #[test]
    fn exact_topk_examples() {
        let none = HashSet::new();
        let keys = gaussian(4 * 10, 3);
        assert_eq!(exact_topk(&keys[..4], &keys, 10, &none).unwrap().len(), 10);
        let mut basis = vec![0.0f32; 16];
        for i in 0..4 {
            basis[i * 4 + i] = 1.0;
        }
        assert_eq!(
            exact_topk(&basis[12..16], &basis, 1, &none).unwrap(),
            vec![3]
        );
        assert!(exact_topk(&basis[..4], &basis, 5, &none).is_err());
    }

    #[test]
    fn softmax_singleton_and_uniform() {
        let v = [1.0f32, -2.0, 3.5];
        assert_eq!(
            softmax_attention(&[0.3, 0.1, 2.0], &[4.0, 4.0, 4.0], &v).unwrap(),
            v
        );
        let keys = [1.0f32, 2.0].repeat(4);
        let values = gaussian(8, 4);
        let out = softmax_attention(&[0.7, -0.2], &keys, &values).unwrap();
        for j in 0..2 {
            let mean = (0..4).map(|i| values[i * 2 + j] as f64).sum::<f64>() / 4.0;
            assert!((out[j] as f64 - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_matches_f64_reference() {
        for seed in 0..20 {
            let q = gaussian(32, seed);
            let keys = gaussian(32 * 200, seed + 100);
            let values = gaussian(32 * 200, seed + 200);
            let got = softmax_attention(&q, &keys, &values).unwrap();
            let want = reference_attention(&q, &keys, &values);
            let got: Vec<f32> = got.to_vec();
            let want32: Vec<f32> = want.iter().map(|&w| w as f32).collect();
            assert!(relative_error(&got, &want32) < 1e-5);
        }
    }

    #[test]
    fn softmax_weights_normalized_and_shift_invariant() {
        let scores: Vec<f32> = gaussian(100, 9).iter().map(|s| s * 5.0).collect();
        let w = softmax(&scores);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let shifted: Vec<f32> = scores.iter().map(|s| s + 3.0).collect();
        for (a, b) in w.iter().zip(softmax(&shifted)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn exact_topk_scale_invariant() {
        let none = HashSet::new();
        let q = gaussian(8, 5);
        let keys = gaussian(8 * 64, 6);
        let scaled: Vec<f32> = q.iter().map(|v| v * 3.5).collect();
        assert_eq!(
            exact_topk(&q, &keys, 10, &none).unwrap(),
            exact_topk(&scaled, &keys, 10, &none).unwrap()
        );
    }

    fn filled_store(n_init: usize, s: usize, seed: u64) -> (KvStore, Vec<f32>, Vec<f32>) {
        let seg = SegmentConfig {
            n_init,
            n_local: 8,
            k: 0,
        };
        let mut kv =
            KvStore::new(&ModelShape::new(1, 1, 1, 8), seg, CacheConfig::default()).unwrap();
        let keys = gaussian(s * 8, seed);
        let values = gaussian(s * 8, seed + 1);
        kv.offload_prefill(0, 0, &keys, &values).unwrap();
        (kv, keys, values)
    }

    #[test]
    fn selective_with_all_middle_equals_full() {
        let (kv, keys, values) = filled_store(4, 100, 7);
        let head = kv.head(0, 0).unwrap();
        let q = gaussian(8, 8);
        let mut all: Vec<usize> = head.middle_ids().collect();
        all.reverse();
        let sel = selective_attention(&q, head, &all).unwrap();
        let full = softmax_attention(&q, &keys, &values).unwrap();
        assert!(relative_error(&sel, &full) < 1e-5);
        assert_eq!(full_attention(&q, head).unwrap(), sel);
    }

    #[test]
    fn selective_with_nothing_is_local_window() {
        let (kv, keys, values) = filled_store(0, 50, 9);
        let head = kv.head(0, 0).unwrap();
        let q = gaussian(8, 10);
        let sel = selective_attention(&q, head, &[]).unwrap();
        let local = softmax_attention(&q, &keys[42 * 8..], &values[42 * 8..]).unwrap();
        assert_eq!(sel, local);
        assert!(matches!(
            selective_attention(&q, head, &[45]),
            Err(Error::UnknownToken(45))
        ));
    }

    #[test]
    fn gqa_rows_match_single_head() {
        let keys = gaussian(8 * 30, 11);
        let values = gaussian(8 * 30, 12);
        let q = gaussian(8, 13);
        assert_eq!(
            gqa_group_attention(&q, &keys, &values, 8).unwrap(),
            softmax_attention(&q, &keys, &values).unwrap()
        );
        let dup = q.repeat(2);
        let out = gqa_group_attention(&dup, &keys, &values, 8).unwrap();
        assert_eq!(out[..8], out[8..]);
        let group = gaussian(32, 14);
        let out = gqa_group_attention(&group, &keys, &values, 8).unwrap();
        for h in 0..4 {
            let row = softmax_attention(&group[h * 8..(h + 1) * 8], &keys, &values).unwrap();
            assert_eq!(&out[h * 8..(h + 1) * 8], &row[..]);
        }
        assert!(gqa_group_attention(&group[..7], &keys, &values, 8).is_err());
    }
}
