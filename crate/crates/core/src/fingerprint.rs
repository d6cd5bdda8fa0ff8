//! Dataset fingerprints and balanced cohort mixing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PsatError, Result};
use crate::volumes::{Case, Spacing};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFingerprint {
    pub n_cases: usize,
    pub median_shape: [usize; 3],
    pub spacing_median: Spacing,
    pub spacing_p10: Spacing,
    pub fg_mean: f64,
    pub fg_std: f64,
    pub fg_p005: f64,
    pub fg_p995: f64,
}

/// Nearest-rank percentile with lower interpolation: the element at index
/// `floor(q * (n - 1))` of the sorted values.
pub fn lower_percentile<T: Copy>(sorted: &[T], q: f64) -> T {
    assert!(!sorted.is_empty(), "percentile of empty slice");
    let idx = (q * (sorted.len() - 1) as f64).floor() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

fn sorted_f64(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

pub fn compute_fingerprint(cases: &[Case]) -> Result<DatasetFingerprint> {
    if cases.is_empty() {
        return Err(PsatError::Fingerprint("cannot fingerprint an empty cohort".into()));
    }
    let mut median_shape = [0usize; 3];
    let mut spacing_median = [0.0; 3];
    let mut spacing_p10 = [0.0; 3];
    for a in 0..3 {
        let mut shapes: Vec<usize> = cases.iter().map(|c| c.shape()[a]).collect();
        shapes.sort_unstable();
        median_shape[a] = lower_percentile(&shapes, 0.5);
        let sp = sorted_f64(cases.iter().map(|c| c.spacing().as_array()[a]).collect());
        spacing_median[a] = lower_percentile(&sp, 0.5);
        spacing_p10[a] = lower_percentile(&sp, 0.1);
    }

    let mut fg: Vec<f32> = Vec::new();
    for case in cases {
        fg.extend(
            case.volume
                .data()
                .iter()
                .zip(case.labels.data())
                .filter(|(_, &l)| l > 0)
                .map(|(&v, _)| v),
        );
    }
    if fg.is_empty() {
        return Err(PsatError::Fingerprint("cohort has no foreground voxels".into()));
    }
    // moments over the sorted pool so case order cannot change the rounding
    fg.sort_by(f32::total_cmp);
    let n = fg.len() as f64;
    let mean = fg.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = fg.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;

    Ok(DatasetFingerprint {
        n_cases: cases.len(),
        median_shape,
        spacing_median: Spacing::from_array(spacing_median)?,
        spacing_p10: Spacing::from_array(spacing_p10)?,
        fg_mean: mean,
        fg_std: var.sqrt(),
        fg_p005: lower_percentile(&fg, 0.005) as f64,
        fg_p995: lower_percentile(&fg, 0.995) as f64,
    })
}

impl DatasetFingerprint {
    /// Canonical JSON; identical inputs give identical bytes.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    First,
    Second,
}

/// Equal-count mixture of two case pools.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedCohort {
    pub cases: Vec<Case>,
    pub provenance: Vec<Provenance>,
}

/// Seeded subsample (without replacement) of `k` indices out of `n`, returned
/// in ascending order.
pub fn subsample_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, k.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

/// Subsample the larger pool down to the smaller pool's size and concatenate
/// (first pool's cases, then second's).
pub fn merge_balanced(a: &[Case], b: &[Case], seed: u64) -> Result<MergedCohort> {
    if a.is_empty() || b.is_empty() {
        return Err(PsatError::invalid("merge_balanced needs two non-empty cohorts"));
    }
    let k = a.len().min(b.len());
    let pick = |pool: &[Case], salt: u64| -> Vec<Case> {
        if pool.len() == k {
            pool.to_vec()
        } else {
            subsample_indices(pool.len(), k, seed ^ salt)
                .into_iter()
                .map(|i| pool[i].clone())
                .collect()
        }
    };
    let mut cases = pick(a, 0xA);
    cases.extend(pick(b, 0xB));
    let mut provenance = vec![Provenance::First; k];
    provenance.extend(std::iter::repeat(Provenance::Second).take(k));
    Ok(MergedCohort { cases, provenance })
}
