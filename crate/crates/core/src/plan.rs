//! Training plans derived from fingerprints, and the preprocessing they imply.
//!
//! Plan rules:
//! 1. target spacing = the fingerprint's median spacing;
//! 2. provisional patch = median shape resampled to the target spacing;
//! 3. shrink the largest axis (lowest index on ties) one voxel at a time
//!    until the patch holds at most `voxel_budget` voxels;
//! 4. `num_levels` = largest d <= 5 with `min(patch) / 2^d >= 4`; fewer than
//!    two levels is an error;
//! 5. round every axis down to a multiple of `2^num_levels`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PsatError, Result};
use crate::fingerprint::DatasetFingerprint;
use crate::volumes::{normalize_ct, resample, resampled_len, Case, Interpolation, Spacing};

pub const DEFAULT_VOXEL_BUDGET: usize = 32_768;
pub const DEFAULT_BASE_CHANNELS: usize = 8;
pub const BATCH_SIZE: usize = 2;
pub const MAX_LEVELS: usize = 5;
pub const MIN_BOTTLENECK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PlanSource {
    #[serde(rename = "P_a")]
    Adult,
    #[serde(rename = "P_p")]
    Pediatric,
    #[serde(rename = "P_m")]
    Mixed,
}

impl PlanSource {
    pub fn tag(&self) -> &'static str {
        match self {
            PlanSource::Adult => "P_a",
            PlanSource::Pediatric => "P_p",
            PlanSource::Mixed => "P_m",
        }
    }
}

impl fmt::Display for PlanSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for PlanSource {
    type Err = PsatError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "P_a" | "a" | "adult" => Ok(PlanSource::Adult),
            "P_p" | "p" | "pediatric" => Ok(PlanSource::Pediatric),
            "P_m" | "m" | "mixed" => Ok(PlanSource::Mixed),
            _ => Err(PsatError::invalid(format!("unknown plan source `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPlan {
    pub plan_source: PlanSource,
    pub target_spacing: Spacing,
    pub patch_size: [usize; 3],
    pub num_levels: usize,
    pub base_channels: usize,
    pub batch_size: usize,
    pub norm_clip_lo: f64,
    pub norm_clip_hi: f64,
    pub norm_mean: f64,
    pub norm_std: f64,
    /// Content hash of the source fingerprint and plan source tag.
    pub plan_hash: String,
}

/// `sha256(fingerprint JSON || source tag)`, hex encoded.
pub fn plan_hash(fp: &DatasetFingerprint, source: PlanSource) -> Result<String> {
    let mut h = Sha256::new();
    h.update(fp.to_json()?.as_bytes());
    h.update(source.tag().as_bytes());
    Ok(hex::encode(h.finalize()))
}

pub fn derive_plan(fp: &DatasetFingerprint, source: PlanSource, voxel_budget: usize) -> Result<TrainingPlan> {
    derive_plan_with_channels(fp, source, voxel_budget, DEFAULT_BASE_CHANNELS)
}

pub fn derive_plan_with_channels(
    fp: &DatasetFingerprint,
    source: PlanSource,
    voxel_budget: usize,
    base_channels: usize,
) -> Result<TrainingPlan> {
    if voxel_budget < 4096 {
        return Err(PsatError::invalid(format!("voxel_budget must be >= 4096, got {voxel_budget}")));
    }
    if base_channels == 0 {
        return Err(PsatError::invalid("base_channels must be positive"));
    }
    let target = fp.spacing_median;
    let from = fp.spacing_median.as_array();
    let to = target.as_array();
    let mut patch = [0usize; 3];
    for a in 0..3 {
        patch[a] = resampled_len(fp.median_shape[a], from[a], to[a]);
    }
    while patch.iter().product::<usize>() > voxel_budget {
        let (axis, _) = patch
            .iter()
            .enumerate()
            .fold((0, 0), |best, (i, &n)| if n > best.1 { (i, n) } else { best });
        patch[axis] -= 1;
    }
    let min_axis = *patch.iter().min().unwrap();
    let num_levels = (0..=MAX_LEVELS)
        .rev()
        .find(|&d| min_axis / (1 << d) >= MIN_BOTTLENECK)
        .unwrap_or(0);
    if num_levels < 2 {
        return Err(PsatError::Plan(format!(
            "patch {patch:?} collapses below {} voxels per axis",
            MIN_BOTTLENECK << 2
        )));
    }
    let unit = 1 << num_levels;
    for p in &mut patch {
        *p = *p / unit * unit;
    }
    if !(fp.fg_p005 < fp.fg_p995) {
        return Err(PsatError::Plan(format!(
            "degenerate foreground intensity range [{}, {}]",
            fp.fg_p005, fp.fg_p995
        )));
    }
    if !(fp.fg_std > 0.0) {
        return Err(PsatError::Plan("foreground intensity std is zero".into()));
    }
    Ok(TrainingPlan {
        plan_source: source,
        target_spacing: target,
        patch_size: patch,
        num_levels,
        base_channels,
        batch_size: BATCH_SIZE,
        norm_clip_lo: fp.fg_p005,
        norm_clip_hi: fp.fg_p995,
        norm_mean: fp.fg_mean,
        norm_std: fp.fg_std,
        plan_hash: plan_hash(fp, source)?,
    })
}

impl TrainingPlan {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// File name under which the plan is stored, addressed by its hash.
    pub fn file_name(&self) -> String {
        format!("plan-{}.json", &self.plan_hash[..16])
    }

    /// Value an out-of-body voxel takes after normalization.
    pub fn normalized_floor(&self) -> f32 {
        ((self.norm_clip_lo - self.norm_mean) / self.norm_std) as f32
    }
}

/// Resample to the plan's spacing (trilinear image, nearest labels) and
/// normalize intensities with the plan's constants.
pub fn preprocess(case: &Case, plan: &TrainingPlan) -> Result<Case> {
    let vol = resample(&case.volume, plan.target_spacing, Interpolation::Trilinear)?;
    let vol = normalize_ct(&vol, plan.norm_clip_lo, plan.norm_clip_hi, plan.norm_mean, plan.norm_std)?;
    let labels = resample(&case.labels, plan.target_spacing, Interpolation::Nearest)?;
    Case::new(case.id.clone(), vol, labels, case.cohort)
}
