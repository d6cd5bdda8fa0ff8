//! Augmentation policies: the default policy and the contraction policy, which
//! differ only in how far isotropic scaling may shrink structures.
//!
//! | constant              | A_d           | A_c           |
//! |-----------------------|---------------|---------------|
//! | max volume contraction| 0.29          | 0.50          |
//! | scale_lo              | 0.71^(1/3)    | 0.50^(1/3)    |
//! | scale_hi              | 1 / scale_lo  | 1 / scale_lo  |
//! | rotation bound        | 30 deg / axis | 30 deg / axis |
//! | intensity multiplier  | [0.75, 1.25]  | [0.75, 1.25]  |
//! | additive noise std    | 0.1           | 0.1           |
//! | p_spatial, p_intensity| 0.2, 0.2      | 0.2, 0.2      |
//! | mirroring             | never         | never         |

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{PsatError, Result};
use crate::volumes::{Case, Grid, Voxel, VoxelKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AugKind {
    #[serde(rename = "A_d")]
    Default,
    #[serde(rename = "A_c")]
    Contraction,
}

impl AugKind {
    pub fn tag(&self) -> &'static str {
        match self {
            AugKind::Default => "A_d",
            AugKind::Contraction => "A_c",
        }
    }
}

impl fmt::Display for AugKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for AugKind {
    type Err = PsatError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A_d" | "d" | "default" => Ok(AugKind::Default),
            "A_c" | "c" | "contraction" => Ok(AugKind::Contraction),
            _ => Err(PsatError::invalid(format!("unknown augmentation kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub kind: AugKind,
    pub max_volume_contraction: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub rot_max_deg: f64,
    pub intensity_mult_range: [f64; 2],
    pub noise_std_aug: f64,
    pub mirroring: bool,
    pub p_spatial: f64,
    pub p_intensity: f64,
}

pub fn policy(kind: AugKind) -> AugmentationPolicy {
    let max_volume_contraction = match kind {
        AugKind::Default => 0.29,
        AugKind::Contraction => 0.50,
    };
    let scale_lo = (1.0f64 - max_volume_contraction).cbrt();
    AugmentationPolicy {
        kind,
        max_volume_contraction,
        scale_lo,
        scale_hi: 1.0 / scale_lo,
        rot_max_deg: 30.0,
        intensity_mult_range: [0.75, 1.25],
        noise_std_aug: 0.1,
        mirroring: false,
        p_spatial: 0.2,
        p_intensity: 0.2,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    /// Linear isotropic scale; below 1 shrinks structures.
    pub scale: f64,
    /// Rotation angles in radians about the z, y and x axes.
    pub rotations: [f64; 3],
    pub intensity_mult: f64,
    pub noise_std: f64,
    pub noise_seed: u64,
    pub spatial: bool,
    pub intensity: bool,
}

impl TransformParams {
    pub fn identity() -> Self {
        TransformParams {
            scale: 1.0,
            rotations: [0.0; 3],
            intensity_mult: 1.0,
            noise_std: 0.0,
            noise_seed: 0,
            spatial: false,
            intensity: false,
        }
    }

    pub fn pure_scale(scale: f64) -> Self {
        TransformParams {
            scale,
            spatial: true,
            ..Self::identity()
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.spatial && !self.intensity
    }

    /// Rotation matrix acting on (z, y, x) offsets: Rz * Ry * Rx.
    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let [az, ay, ax] = self.rotations;
        // rotation about z mixes (y, x); about y mixes (z, x); about x mixes (z, y)
        let rz = [[1.0, 0.0, 0.0], [0.0, az.cos(), -az.sin()], [0.0, az.sin(), az.cos()]];
        let ry = [[ay.cos(), 0.0, ay.sin()], [0.0, 1.0, 0.0], [-ay.sin(), 0.0, ay.cos()]];
        let rx = [[ax.cos(), -ax.sin(), 0.0], [ax.sin(), ax.cos(), 0.0], [0.0, 0.0, 1.0]];
        matmul(&matmul(&rz, &ry), &rx)
    }

    /// Forward map of an offset from the transform center: `s * R * d`.
    pub fn map_offset(&self, d: [f64; 3]) -> [f64; 3] {
        if !self.spatial {
            return d;
        }
        let r = self.rotation();
        let mut out = [0.0; 3];
        for i in 0..3 {
            out[i] = self.scale * (r[i][0] * d[0] + r[i][1] * d[1] + r[i][2] * d[2]);
        }
        out
    }

    /// Inverse map as a matrix: `R^T / s`.
    fn inverse_matrix(&self) -> [[f64; 3]; 3] {
        let r = self.rotation();
        let mut inv = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                inv[i][j] = r[j][i] / self.scale;
            }
        }
        inv
    }
}

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

pub fn sample_transform(policy: &AugmentationPolicy, rng_seed: u64) -> TransformParams {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut t = TransformParams::identity();
    // draw every variate unconditionally so components stay independent of
    // each other's firing
    let fire_spatial = rng.gen::<f64>() < policy.p_spatial;
    let fire_intensity = rng.gen::<f64>() < policy.p_intensity;
    let scale = rng.gen_range(policy.scale_lo..=policy.scale_hi);
    let max_rad = policy.rot_max_deg.to_radians();
    let rotations = [
        rng.gen_range(-max_rad..=max_rad),
        rng.gen_range(-max_rad..=max_rad),
        rng.gen_range(-max_rad..=max_rad),
    ];
    let [m_lo, m_hi] = policy.intensity_mult_range;
    let mult = rng.gen_range(m_lo..=m_hi);
    let noise_seed = rng.gen::<u64>();
    if fire_spatial {
        t.spatial = true;
        t.scale = scale;
        t.rotations = rotations;
    }
    if fire_intensity {
        t.intensity = true;
        t.intensity_mult = mult;
        t.noise_std = policy.noise_std_aug;
        t.noise_seed = noise_seed;
    }
    t
}

/// Sample `src` on an output grid of `out_shape` whose center `out_center`
/// corresponds to `src_center`; output offsets are pulled back through the
/// inverse transform. Out-of-range samples clamp to the edge.
pub(crate) fn warp<T: Voxel>(
    src: &Grid<T>,
    src_center: [f64; 3],
    out_shape: [usize; 3],
    t: &TransformParams,
) -> Vec<T> {
    let sh = src.shape();
    let inv = t.inverse_matrix();
    let out_center = [
        (out_shape[0] as f64 - 1.0) / 2.0,
        (out_shape[1] as f64 - 1.0) / 2.0,
        (out_shape[2] as f64 - 1.0) / 2.0,
    ];
    let max = [(sh[0] - 1) as f64, (sh[1] - 1) as f64, (sh[2] - 1) as f64];
    let data = src.data();
    let mut out = Vec::with_capacity(out_shape.iter().product());
    for z in 0..out_shape[0] {
        let dz = z as f64 - out_center[0];
        for y in 0..out_shape[1] {
            let dy = y as f64 - out_center[1];
            for x in 0..out_shape[2] {
                let dx = x as f64 - out_center[2];
                let mut c = [0.0; 3];
                for i in 0..3 {
                    c[i] = (src_center[i] + inv[i][0] * dz + inv[i][1] * dy + inv[i][2] * dx).clamp(0.0, max[i]);
                }
                let v = match T::KIND {
                    VoxelKind::Label => {
                        let iz = (c[0] + 0.5).floor() as usize;
                        let iy = (c[1] + 0.5).floor() as usize;
                        let ix = (c[2] + 0.5).floor() as usize;
                        data[(iz.min(sh[0] - 1) * sh[1] + iy.min(sh[1] - 1)) * sh[2] + ix.min(sh[2] - 1)]
                    }
                    VoxelKind::Intensity => T::from_f64(trilinear(data, sh, c)),
                };
                out.push(v);
            }
        }
    }
    out
}

#[inline]
fn trilinear<T: Voxel>(data: &[T], sh: [usize; 3], c: [f64; 3]) -> f64 {
    let z0 = c[0].floor() as usize;
    let y0 = c[1].floor() as usize;
    let x0 = c[2].floor() as usize;
    let z1 = (z0 + 1).min(sh[0] - 1);
    let y1 = (y0 + 1).min(sh[1] - 1);
    let x1 = (x0 + 1).min(sh[2] - 1);
    let (fz, fy, fx) = (c[0] - z0 as f64, c[1] - y0 as f64, c[2] - x0 as f64);
    let at = |z: usize, y: usize, x: usize| data[(z * sh[1] + y) * sh[2] + x].to_f64();
    let c00 = at(z0, y0, x0) + (at(z0, y0, x1) - at(z0, y0, x0)) * fx;
    let c01 = at(z0, y1, x0) + (at(z0, y1, x1) - at(z0, y1, x0)) * fx;
    let c10 = at(z1, y0, x0) + (at(z1, y0, x1) - at(z1, y0, x0)) * fx;
    let c11 = at(z1, y1, x0) + (at(z1, y1, x1) - at(z1, y1, x0)) * fx;
    let c0 = c00 + (c01 - c00) * fy;
    let c1 = c10 + (c11 - c10) * fy;
    c0 + (c1 - c0) * fz
}

/// Multiply, then add seeded Gaussian noise.
pub(crate) fn apply_intensity(values: &mut [f32], t: &TransformParams) {
    if !t.intensity {
        return;
    }
    let mult = t.intensity_mult as f32;
    for v in values.iter_mut() {
        *v *= mult;
    }
    if t.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(t.noise_seed);
        let normal = Normal::new(0.0, t.noise_std).expect("noise std validated by policy");
        for v in values.iter_mut() {
            *v += normal.sample(&mut rng) as f32;
        }
    }
}

/// Apply a sampled transform to a whole (preprocessed, uniformly spaced)
/// case: rotate-then-scale about the grid center, trilinear for intensities,
/// nearest for labels, shape unchanged; then intensity scaling and noise.
pub fn apply_transform(case: &Case, t: &TransformParams) -> Result<Case> {
    if t.is_identity() {
        return Ok(case.clone());
    }
    let sh = case.shape();
    let (mut vol, labels) = if t.spatial {
        let center = [
            (sh[0] as f64 - 1.0) / 2.0,
            (sh[1] as f64 - 1.0) / 2.0,
            (sh[2] as f64 - 1.0) / 2.0,
        ];
        (warp(&case.volume, center, sh, t), warp(&case.labels, center, sh, t))
    } else {
        (case.volume.data().to_vec(), case.labels.data().to_vec())
    };
    apply_intensity(&mut vol, t);
    Case::new(
        case.id.clone(),
        case.volume.with_data(vol)?,
        case.labels.with_data(labels)?,
        case.cohort,
    )
}
