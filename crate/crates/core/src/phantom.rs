//! Deterministic synthetic cohorts.
//!
//! A subject is an ellipsoidal body filled with ellipsoidal organs, each with
//! its own mean intensity, on a CT-like air background. Pediatric cohorts
//! contract every organ's volume by its `pediatric_volume_ratio`, which is the
//! adult-to-child size gap the study is about. Every subject is a pure
//! function of `(spec, subject_seed)`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{PsatError, Result};
use crate::psv;
use crate::volumes::{Case, CohortTag, LabelMap, Spacing, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganSpec {
    pub organ_id: u16,
    /// Short column name used in reports.
    pub name: String,
    /// Center in body-relative coordinates, (z, y, x) in [0, 1]^3 where 0 and 1
    /// are the extremes of the body ellipsoid.
    pub center: [f64; 3],
    /// Ellipsoid semi-axes in mm (z, y, x), adult scale.
    pub radii: [f64; 3],
    pub intensity_mean: f64,
    /// Per-subject spread of the organ's mean intensity.
    pub intensity_std: f64,
    pub pediatric_volume_ratio: f64,
}

impl OrganSpec {
    pub fn adult_volume(&self) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI * self.radii.iter().product::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SpacingSampler {
    Fixed { spacing: [f64; 3] },
    /// Independent uniform draw per axis.
    Uniform { lo: [f64; 3], hi: [f64; 3] },
}

impl SpacingSampler {
    fn sample(&self, rng: &mut ChaCha8Rng) -> Result<Spacing> {
        let raw = match self {
            SpacingSampler::Fixed { spacing } => *spacing,
            SpacingSampler::Uniform { lo, hi } => {
                let mut s = [0.0; 3];
                for a in 0..3 {
                    s[a] = if hi[a] > lo[a] { rng.gen_range(lo[a]..hi[a]) } else { lo[a] };
                }
                s
            }
        };
        // keep spacings exactly representable in the f32 `.psv` header
        Spacing::new(raw[0] as f32 as f64, raw[1] as f32 as f64, raw[2] as f32 as f64)
    }

    fn max_spacing(&self) -> [f64; 3] {
        match self {
            SpacingSampler::Fixed { spacing } => *spacing,
            SpacingSampler::Uniform { hi, lo } => [hi[0].max(lo[0]), hi[1].max(lo[1]), hi[2].max(lo[2])],
        }
    }

    fn min_spacing(&self) -> [f64; 3] {
        match self {
            SpacingSampler::Fixed { spacing } => *spacing,
            SpacingSampler::Uniform { hi, lo } => [hi[0].min(lo[0]), hi[1].min(lo[1]), hi[2].min(lo[2])],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub cohort_tag: CohortTag,
    pub organs: Vec<OrganSpec>,
    /// Body ellipsoid semi-axes in mm (z, y, x).
    pub body_radii: [f64; 3],
    pub body_intensity: f64,
    pub air_intensity: f64,
    pub grid_shape: [usize; 3],
    pub spacing_sampler: SpacingSampler,
    /// Interval for the global linear subject scale g.
    pub subject_scale_range: [f64; 2],
    /// Apply the per-organ pediatric volume contraction.
    pub pediatric_scaling: bool,
    pub intensity_shift: f64,
    pub noise_std: f64,
}

/// Laboratory organ table: (name, center, radii mm, adult mean HU, per-subject std,
/// pediatric volume ratio). Organs do not touch at any subject scale because
/// centers and radii scale together.
///
/// Blad and Pros share nearly the same intensity, so adults tell them apart
/// by size and position. A contracted pediatric bladder is about the size of
/// an adult prostate.
const ORGANS: [(&str, [f64; 3], [f64; 3], f64, f64, f64); 6] = [
    ("Live", [0.30, 0.5, 0.30], [16.0, 14.0, 18.0], 110.0, 5.0, 0.26),
    ("Sple", [0.30, 0.5, 0.78], [11.0, 10.0, 11.0], 70.0, 5.0, 0.26),
    ("Kidn", [0.55, 0.5, 0.80], [10.0, 8.0, 7.0], 150.0, 5.0, 0.26),
    ("Tube", [0.50, 0.5, 0.57], [22.0, 4.0, 4.0], 270.0, 5.0, 0.26),
    ("Blad", [0.78, 0.5, 0.33], [12.0, 12.0, 14.0], 195.0, 5.0, 0.18),
    ("Pros", [0.78, 0.5, 0.72], [8.0, 8.0, 8.0], 215.0, 5.0, 0.10),
];

/// Organ names whose contraction is strongest; the "small-organ subset" of
/// trend assertions.
pub const SMALL_ORGANS: [&str; 2] = ["Blad", "Pros"];

impl CohortSpec {
    pub fn adult_default() -> Self {
        CohortSpec {
            cohort_tag: CohortTag::Adult,
            organs: default_organs(&[0.0; 6]),
            body_radii: [42.0, 34.0, 42.0],
            body_intensity: 0.0,
            air_intensity: -1000.0,
            grid_shape: [64, 64, 64],
            spacing_sampler: SpacingSampler::Uniform {
                lo: [1.45, 1.45, 1.45],
                hi: [1.55, 1.55, 1.55],
            },
            subject_scale_range: [0.9, 1.1],
            pediatric_scaling: false,
            intensity_shift: 0.0,
            noise_std: 15.0,
        }
    }

    pub fn pediatric_default() -> Self {
        CohortSpec {
            cohort_tag: CohortTag::Pediatric,
            organs: default_organs(&[-10.0, -10.0, -20.0, 0.0, 0.0, 0.0]),
            body_radii: [27.0, 22.0, 27.0],
            body_intensity: 0.0,
            air_intensity: -1000.0,
            grid_shape: [64, 64, 64],
            spacing_sampler: SpacingSampler::Uniform {
                lo: [0.95, 0.95, 0.95],
                hi: [1.05, 1.05, 1.05],
            },
            subject_scale_range: [0.85, 1.1],
            pediatric_scaling: true,
            intensity_shift: 0.0,
            noise_std: 15.0,
        }
    }

    /// Pediatric anatomy acquired under a different protocol: shifted
    /// intensities, more noise and a wider spacing distribution.
    pub fn internal_default() -> Self {
        CohortSpec {
            cohort_tag: CohortTag::Internal,
            spacing_sampler: SpacingSampler::Uniform {
                lo: [0.95, 0.95, 0.95],
                hi: [1.2, 1.2, 1.2],
            },
            intensity_shift: 40.0,
            noise_std: 20.0,
            ..Self::pediatric_default()
        }
    }

    pub fn default_for(tag: CohortTag) -> Self {
        match tag {
            CohortTag::Adult => Self::adult_default(),
            CohortTag::Pediatric => Self::pediatric_default(),
            CohortTag::Internal => Self::internal_default(),
        }
    }

    pub fn num_organs(&self) -> usize {
        self.organs.len()
    }

    pub fn organ_names(&self) -> Vec<String> {
        self.organs.iter().map(|o| o.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.subject_scale_range;
        if !(lo > 0.0 && lo <= hi && hi < 2.0) {
            return Err(PsatError::invalid(format!("subject_scale_range {lo}..{hi} must lie in (0, 2)")));
        }
        if self.grid_shape.iter().any(|&n| n == 0) {
            return Err(PsatError::invalid("grid_shape must be positive"));
        }
        if self.noise_std < 0.0 || !self.noise_std.is_finite() {
            return Err(PsatError::invalid("noise_std must be non-negative"));
        }
        for s in [self.spacing_sampler.min_spacing(), self.spacing_sampler.max_spacing()] {
            Spacing::from_array(s)?;
        }
        let min_sp = self.spacing_sampler.min_spacing();
        for a in 0..3 {
            let half_fov = self.grid_shape[a] as f64 * min_sp[a] / 2.0;
            if self.body_radii[a] * hi > half_fov {
                return Err(PsatError::invalid(format!(
                    "grid too small: body radius {:.1} mm x scale {hi} exceeds half field of view {half_fov:.1} mm on axis {a}",
                    self.body_radii[a]
                )));
            }
        }
        for (i, o) in self.organs.iter().enumerate() {
            if o.organ_id as usize != i + 1 {
                return Err(PsatError::invalid(format!("organ ids must be 1..=K in order, got {} at {i}", o.organ_id)));
            }
            if o.radii.iter().any(|&r| !(r > 0.0)) {
                return Err(PsatError::invalid(format!("organ {} radii must be positive", o.name)));
            }
            if !(o.pediatric_volume_ratio > 0.0 && o.pediatric_volume_ratio <= 1.0) {
                return Err(PsatError::invalid(format!("organ {} pediatric_volume_ratio must be in (0, 1]", o.name)));
            }
        }
        Ok(())
    }
}

fn default_organs(pediatric_offsets: &[f64; 6]) -> Vec<OrganSpec> {
    ORGANS
        .iter()
        .zip(pediatric_offsets)
        .enumerate()
        .map(|(i, (&(name, center, radii, mean, std, ratio), off))| OrganSpec {
            organ_id: i as u16 + 1,
            name: name.to_string(),
            center,
            radii,
            intensity_mean: mean + off,
            intensity_std: std,
            pediatric_volume_ratio: ratio,
        })
        .collect()
}

/// splitmix64 step: advances `state` and returns the next output.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeds for subjects `0..n` of a cohort: the first `n` outputs of splitmix64
/// started at `seed`.
pub fn subject_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut state = seed;
    (0..n).map(|_| splitmix64(&mut state)).collect()
}

struct PlacedOrgan {
    id: u16,
    center: [f64; 3],
    inv_r2: [f64; 3],
    bbox: [(usize, usize); 3],
    mean: f64,
}

pub fn generate_subject(spec: &CohortSpec, subject_seed: u64) -> Result<Case> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(subject_seed);
    let spacing = spec.spacing_sampler.sample(&mut rng)?;
    let sp = spacing.as_array();
    let [g_lo, g_hi] = spec.subject_scale_range;
    let g = if g_hi > g_lo { rng.gen_range(g_lo..g_hi) } else { g_lo };
    let shape = spec.grid_shape;
    let mid: Vec<f64> = (0..3).map(|a| shape[a] as f64 * sp[a] / 2.0).collect();
    let body_r: Vec<f64> = spec.body_radii.iter().map(|r| r * g).collect();

    let mut placed = Vec::with_capacity(spec.organs.len());
    for organ in &spec.organs {
        let lin = if spec.pediatric_scaling {
            g * organ.pediatric_volume_ratio.cbrt()
        } else {
            g
        };
        let mut center = [0.0; 3];
        let mut inv_r2 = [0.0; 3];
        let mut bbox = [(0, 0); 3];
        for a in 0..3 {
            center[a] = mid[a] + (organ.center[a] - 0.5) * 2.0 * body_r[a];
            let r = organ.radii[a] * lin;
            inv_r2[a] = 1.0 / (r * r);
            let lo = ((center[a] - r) / sp[a] - 0.5).floor().max(0.0) as usize;
            let hi = (((center[a] + r) / sp[a] - 0.5).ceil() + 1.0).clamp(0.0, shape[a] as f64) as usize;
            bbox[a] = (lo.min(shape[a]), hi);
        }
        let subject_mean = if organ.intensity_std > 0.0 {
            Normal::new(organ.intensity_mean, organ.intensity_std)
                .map_err(|e| PsatError::invalid(e.to_string()))?
                .sample(&mut rng)
        } else {
            organ.intensity_mean
        };
        placed.push(PlacedOrgan {
            id: organ.organ_id,
            center,
            inv_r2,
            bbox,
            mean: subject_mean,
        });
    }

    let n: usize = shape.iter().product();
    let mut labels = vec![0u16; n];
    let mut region_mean = vec![spec.air_intensity; n];
    let body_inv: Vec<f64> = body_r.iter().map(|r| 1.0 / (r * r)).collect();
    for z in 0..shape[0] {
        let pz = (z as f64 + 0.5) * sp[0] - mid[0];
        for y in 0..shape[1] {
            let py = (y as f64 + 0.5) * sp[1] - mid[1];
            let row = (z * shape[1] + y) * shape[2];
            for x in 0..shape[2] {
                let px = (x as f64 + 0.5) * sp[2] - mid[2];
                if pz * pz * body_inv[0] + py * py * body_inv[1] + px * px * body_inv[2] <= 1.0 {
                    region_mean[row + x] = spec.body_intensity;
                }
            }
        }
    }
    for o in &placed {
        for z in o.bbox[0].0..o.bbox[0].1 {
            let dz = (z as f64 + 0.5) * sp[0] - o.center[0];
            for y in o.bbox[1].0..o.bbox[1].1 {
                let dy = (y as f64 + 0.5) * sp[1] - o.center[1];
                let row = (z * shape[1] + y) * shape[2];
                for x in o.bbox[2].0..o.bbox[2].1 {
                    let dx = (x as f64 + 0.5) * sp[2] - o.center[2];
                    if dz * dz * o.inv_r2[0] + dy * dy * o.inv_r2[1] + dx * dx * o.inv_r2[2] <= 1.0 {
                        labels[row + x] = o.id;
                        region_mean[row + x] = o.mean;
                    }
                }
            }
        }
    }

    for organ in &spec.organs {
        if !labels.contains(&organ.organ_id) {
            return Err(PsatError::Generation {
                organ: organ.name.clone(),
                organ_id: organ.organ_id,
                reason: format!("organ scaled below one voxel at spacing {spacing:?}; coarsen or refine the grid"),
            });
        }
    }

    let noise = if spec.noise_std > 0.0 {
        Some(Normal::new(0.0, spec.noise_std).map_err(|e| PsatError::invalid(e.to_string()))?)
    } else {
        None
    };
    let intensities: Vec<f32> = region_mean
        .iter()
        .map(|&m| {
            let eps = noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));
            (m + eps + spec.intensity_shift) as f32
        })
        .collect();

    let id = format!("{}-{subject_seed:016x}", spec.cohort_tag);
    Case::new(
        id,
        Volume::new(shape, spacing, intensities)?,
        LabelMap::new(shape, spacing, labels)?,
        spec.cohort_tag,
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Contiguous index splits: `floor(n * train_pct / 100)` train,
    /// `floor(n * val_pct / 100)` validation, the rest test.
    pub fn by_percent(n: usize, train_pct: usize, val_pct: usize) -> Self {
        let n_train = n * train_pct / 100;
        let n_val = (n * val_pct / 100).min(n - n_train);
        Splits {
            train: (0..n_train).collect(),
            val: (n_train..n_train + n_val).collect(),
            test: (n_train + n_val..n).collect(),
        }
    }

    pub fn all_test(n: usize) -> Self {
        Splits {
            train: Vec::new(),
            val: Vec::new(),
            test: (0..n).collect(),
        }
    }

    pub fn assignment(&self, index: usize) -> &'static str {
        if self.train.contains(&index) {
            "train"
        } else if self.val.contains(&index) {
            "val"
        } else {
            "test"
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub spec: CohortSpec,
    pub cases: Vec<Case>,
    pub seed: u64,
    pub splits: Splits,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Vec<Case> {
        indices.iter().map(|&i| self.cases[i].clone()).collect()
    }

    pub fn train(&self) -> Vec<Case> {
        self.subset(&self.splits.train)
    }

    pub fn val(&self) -> Vec<Case> {
        self.subset(&self.splits.val)
    }

    pub fn test(&self) -> Vec<Case> {
        self.subset(&self.splits.test)
    }

    /// A cohort holding only `indices`, all assigned to train.
    pub fn restrict(&self, indices: &[usize]) -> Cohort {
        Cohort {
            spec: self.spec.clone(),
            cases: self.subset(indices),
            seed: self.seed,
            splits: Splits {
                train: (0..indices.len()).collect(),
                val: Vec::new(),
                test: Vec::new(),
            },
        }
    }
}

pub fn generate_cohort(spec: &CohortSpec, n: usize, seed: u64) -> Result<Cohort> {
    if n == 0 {
        return Err(PsatError::invalid("cohort size must be at least 1"));
    }
    spec.validate()?;
    let cases = subject_seeds(seed, n)
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut case = generate_subject(spec, s).map_err(|e| PsatError::Subject {
                index: i,
                source: Box::new(e),
            })?;
            case.id = format!("{}-{i:04}", spec.cohort_tag);
            Ok(case)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Cohort {
        spec: spec.clone(),
        cases,
        seed,
        splits: Splits::by_percent(n, 70, 15),
    })
}

/// Labeled volume of one organ in mm^3.
pub fn organ_volume(labels: &LabelMap, organ_id: u16) -> f64 {
    let count = labels.data().iter().filter(|&&l| l == organ_id).count();
    count as f64 * labels.spacing().voxel_volume()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestCase {
    pub id: String,
    pub image: PathBuf,
    pub labels: PathBuf,
    pub split: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortManifest {
    pub spec: CohortSpec,
    pub seed: u64,
    pub cases: Vec<ManifestCase>,
    pub splits: Splits,
}

pub const MANIFEST_NAME: &str = "cohort.json";

/// Write `cohort.json` plus paired `.psv` files under `dir`.
pub fn write_cohort(dir: &Path, cohort: &Cohort) -> Result<()> {
    fs::create_dir_all(dir.join("cases"))?;
    let mut cases = Vec::with_capacity(cohort.len());
    for (i, case) in cohort.cases.iter().enumerate() {
        let image = PathBuf::from("cases").join(format!("{}_img.psv", case.id));
        let labels = PathBuf::from("cases").join(format!("{}_seg.psv", case.id));
        psv::write(&dir.join(&image), &case.volume)?;
        psv::write(&dir.join(&labels), &case.labels)?;
        cases.push(ManifestCase {
            id: case.id.clone(),
            image,
            labels,
            split: cohort.splits.assignment(i).to_string(),
        });
    }
    let manifest = CohortManifest {
        spec: cohort.spec.clone(),
        seed: cohort.seed,
        cases,
        splits: cohort.splits.clone(),
    };
    fs::write(dir.join(MANIFEST_NAME), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_cohort(dir: &Path) -> Result<Cohort> {
    let manifest: CohortManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_NAME))?)?;
    let cases = manifest
        .cases
        .iter()
        .map(|c| {
            Case::new(
                c.id.clone(),
                psv::read(&dir.join(&c.image))?,
                psv::read(&dir.join(&c.labels))?,
                manifest.spec.cohort_tag,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Cohort {
        spec: manifest.spec,
        cases,
        seed: manifest.seed,
        splits: manifest.splits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Single prostate-analog organ sized to a 30 cm^3 adult target.
    fn prostate_spec(pediatric: bool) -> CohortSpec {
        let r = (30_000.0 * 3.0 / (4.0 * std::f64::consts::PI)).cbrt();
        CohortSpec {
            cohort_tag: if pediatric { CohortTag::Pediatric } else { CohortTag::Adult },
            organs: vec![OrganSpec {
                organ_id: 1,
                name: "Pros".into(),
                center: [0.5, 0.5, 0.5],
                radii: [r, r, r],
                intensity_mean: 90.0,
                intensity_std: 0.0,
                pediatric_volume_ratio: 0.1,
            }],
            body_radii: [40.0, 40.0, 40.0],
            body_intensity: 0.0,
            air_intensity: -1000.0,
            grid_shape: [64, 64, 64],
            spacing_sampler: SpacingSampler::Fixed { spacing: [1.5, 1.5, 1.5] },
            subject_scale_range: [1.0, 1.0],
            pediatric_scaling: pediatric,
            intensity_shift: 0.0,
            noise_std: 10.0,
        }
    }

    #[test]
    fn prostate_volume_adult_and_pediatric() {
        let adult = generate_subject(&prostate_spec(false), 1).unwrap();
        let v = organ_volume(&adult.labels, 1) / 1000.0;
        assert!((27.0..=33.0).contains(&v), "adult prostate {v} cm3");
        let ped = generate_subject(&prostate_spec(true), 1).unwrap();
        let v = organ_volume(&ped.labels, 1) / 1000.0;
        assert!((2.7..=3.3).contains(&v), "pediatric prostate {v} cm3");
    }

    #[test]
    fn subject_is_deterministic() {
        let spec = CohortSpec::adult_default();
        assert_eq!(generate_subject(&spec, 42).unwrap(), generate_subject(&spec, 42).unwrap());
        assert_ne!(
            generate_subject(&spec, 42).unwrap().volume,
            generate_subject(&spec, 43).unwrap().volume
        );
    }

    #[test]
    fn default_subjects_contain_every_organ_without_overlap() {
        for spec in [CohortSpec::adult_default(), CohortSpec::pediatric_default(), CohortSpec::internal_default()] {
            for g in [spec.subject_scale_range[0], spec.subject_scale_range[1]] {
                let mut s = spec.clone();
                s.subject_scale_range = [g, g];
                s.spacing_sampler = SpacingSampler::Fixed {
                    spacing: s.spacing_sampler.min_spacing(),
                };
                let case = generate_subject(&s, 7).unwrap();
                let sp = case.spacing().as_array();
                for o in &s.organs {
                    let lin = if s.pediatric_scaling { g * o.pediatric_volume_ratio.cbrt() } else { g };
                    let analytic = o.adult_volume() * lin.powi(3);
                    let measured = organ_volume(&case.labels, o.organ_id);
                    // an overwritten organ would lose far more than voxelization error
                    let tol = 0.12 * analytic + 40.0 * sp.iter().product::<f64>();
                    assert!(
                        (measured - analytic).abs() < tol,
                        "{:?} {} g={g}: measured {measured:.0} analytic {analytic:.0}",
                        s.cohort_tag,
                        o.name
                    );
                }
            }
        }
    }

    #[test]
    fn organ_contrast_exceeds_three_noise_sigmas() {
        for tag in [CohortTag::Adult, CohortTag::Pediatric, CohortTag::Internal] {
            let spec = CohortSpec::default_for(tag);
            for o in &spec.organs {
                let gap = (o.intensity_mean - spec.body_intensity).abs();
                assert!(gap >= 3.0 * spec.noise_std, "{tag}: {} gap {gap}", o.name);
            }
        }
    }

    #[test]
    fn tiny_organ_errors_with_name() {
        let mut spec = prostate_spec(true);
        spec.organs[0].radii = [0.2, 0.2, 0.2];
        spec.organs[0].center = [0.5013, 0.5013, 0.5013];
        match generate_subject(&spec, 3) {
            Err(PsatError::Generation { organ, .. }) => assert_eq!(organ, "Pros"),
            other => panic!("expected generation error, got {other:?}"),
        }
    }

    #[test]
    fn cohort_splits_and_ids() {
        let mut spec = CohortSpec::adult_default();
        spec.grid_shape = [40, 40, 40];
        spec.body_radii = [25.0, 20.0, 25.0];
        let c = generate_cohort(&spec, 10, 9).unwrap();
        let ids: std::collections::BTreeSet<_> = c.cases.iter().map(|c| c.id.clone()).collect();
        assert_eq!(ids.len(), 10);
        assert_eq!((c.splits.train.len(), c.splits.val.len(), c.splits.test.len()), (7, 1, 2));
    }

    #[test]
    fn cohort_prefix_is_stable_across_sizes() {
        let mut spec = CohortSpec::pediatric_default();
        spec.grid_shape = [48, 48, 48];
        spec.body_radii = [20.0, 16.0, 20.0];
        let a = generate_cohort(&spec, 3, 77).unwrap();
        let b = generate_cohort(&spec, 5, 77).unwrap();
        assert_eq!(&a.cases[..], &b.cases[..3]);
    }

    #[test]
    fn intensity_shift_moves_foreground_mean() {
        let mut base = CohortSpec::pediatric_default();
        base.grid_shape = [48, 48, 48];
        base.body_radii = [20.0, 16.0, 20.0];
        let mut shifted = base.clone();
        shifted.intensity_shift = 40.0;
        let fg_mean = |c: &Cohort| {
            let (mut s, mut n) = (0.0, 0usize);
            for case in &c.cases {
                for (v, l) in case.volume.data().iter().zip(case.labels.data()) {
                    if *l > 0 {
                        s += *v as f64;
                        n += 1;
                    }
                }
            }
            s / n as f64
        };
        let a = generate_cohort(&base, 4, 5).unwrap();
        let b = generate_cohort(&shifted, 4, 5).unwrap();
        let d = fg_mean(&b) - fg_mean(&a);
        assert!((d - 40.0).abs() <= 2.0, "shift {d}");
    }

    #[test]
    fn organ_volume_basics() {
        let sp = Spacing::isotropic(1.0).unwrap();
        let mut l = LabelMap::filled([12, 12, 12], sp, 0).unwrap();
        assert_eq!(organ_volume(&l, 2), 0.0);
        for z in 1..11 {
            for y in 1..11 {
                for x in 1..11 {
                    l.set(z, y, x, 2);
                }
            }
        }
        assert_eq!(organ_volume(&l, 2), 1000.0);
    }

    #[test]
    fn rasterized_sphere_volume() {
        let sp = Spacing::isotropic(0.5).unwrap();
        let n = 40;
        let mut l = LabelMap::filled([n, n, n], sp, 0).unwrap();
        let c = n as f64 * 0.5 / 2.0;
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let p = [z, y, x].map(|i| (i as f64 + 0.5) * 0.5 - c);
                    if p.iter().map(|v| v * v).sum::<f64>() <= 64.0 {
                        l.set(z, y, x, 1);
                    }
                }
            }
        }
        let analytic = 4.0 / 3.0 * std::f64::consts::PI * 512.0;
        assert!((organ_volume(&l, 1) - analytic).abs() / analytic < 0.03);
    }

    #[test]
    fn pediatric_to_adult_volume_ratio_over_many_subjects() {
        // Expected ratio ped/adult = ratio * E_ped[g^3] / E_adult[g^3] for
        // otherwise identical specs.
        let mut adult = prostate_spec(false);
        adult.grid_shape = [40, 40, 40];
        adult.spacing_sampler = SpacingSampler::Fixed { spacing: [1.5, 1.5, 1.5] };
        adult.organs[0].radii = [10.0, 10.0, 10.0];
        adult.body_radii = [25.0, 25.0, 25.0];
        adult.organs[0].pediatric_volume_ratio = 0.3;
        adult.subject_scale_range = [0.8, 1.1];
        let mut ped = adult.clone();
        ped.pediatric_scaling = true;
        let n = 100;
        let mean_vol = |s: &CohortSpec| {
            subject_seeds(1234, n)
                .into_iter()
                .map(|seed| organ_volume(&generate_subject(s, seed).unwrap().labels, 1))
                .sum::<f64>()
                / n as f64
        };
        let ratio = mean_vol(&ped) / mean_vol(&adult);
        assert!((ratio - 0.3).abs() < 0.03, "ratio {ratio}");
    }

    #[test]
    fn cohort_roundtrips_through_manifest() {
        let mut spec = CohortSpec::adult_default();
        spec.grid_shape = [40, 40, 40];
        spec.body_radii = [25.0, 20.0, 25.0];
        let c = generate_cohort(&spec, 3, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_cohort(dir.path(), &c).unwrap();
        let back = read_cohort(dir.path()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = CohortSpec::adult_default();
        s.subject_scale_range = [0.5, 2.5];
        assert!(s.validate().is_err());
        let mut s = CohortSpec::adult_default();
        s.grid_shape = [20, 20, 20];
        assert!(s.validate().is_err());
        let mut s = CohortSpec::adult_default();
        s.organs[5].pediatric_volume_ratio = 0.0;
        assert!(s.validate().is_err());
    }
}
