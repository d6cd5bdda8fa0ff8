//! Dense 3D grids with physical spacing, plus the resampling, crop/pad and
//! CT normalization primitives every other module builds on.
//!
//! All shapes, indices and spacings use (z, y, x) order with x fastest in
//! memory. Voxel `i` along an axis covers `[i, i + 1) * spacing` mm, so its
//! center sits at `(i + 0.5) * spacing`.

use serde::{Deserialize, Serialize};

use crate::error::{PsatError, Result};

/// Millimeters per voxel along (z, y, x).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub dz: f64,
    pub dy: f64,
    pub dx: f64,
}

impl Spacing {
    pub fn new(dz: f64, dy: f64, dx: f64) -> Result<Self> {
        let s = Spacing { dz, dy, dx };
        s.validate()?;
        Ok(s)
    }

    pub fn isotropic(s: f64) -> Result<Self> {
        Self::new(s, s, s)
    }

    pub fn from_array(a: [f64; 3]) -> Result<Self> {
        Self::new(a[0], a[1], a[2])
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.dz, self.dy, self.dx]
    }

    pub fn voxel_volume(&self) -> f64 {
        self.dz * self.dy * self.dx
    }

    pub fn validate(&self) -> Result<()> {
        for (axis, v) in ["dz", "dy", "dx"].iter().zip(self.as_array()) {
            if !(v.is_finite() && v > 0.0) {
                return Err(PsatError::invalid(format!(
                    "spacing {axis} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoxelKind {
    Intensity,
    Label,
}

/// Element types a [`Grid`] can hold.
pub trait Voxel: Copy + PartialEq + Default + Send + Sync + std::fmt::Debug + 'static {
    const KIND: VoxelKind;
    /// Tag written into `.psv` headers.
    const DTYPE: u16;
    const BYTES: usize;

    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Voxel for f32 {
    const KIND: VoxelKind = VoxelKind::Intensity;
    const DTYPE: u16 = 0;
    const BYTES: usize = 4;

    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Voxel for u16 {
    const KIND: VoxelKind = VoxelKind::Label;
    const DTYPE: u16 = 1;
    const BYTES: usize = 2;

    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v.round().clamp(0.0, u16::MAX as f64) as u16
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        u16::from_le_bytes([bytes[0], bytes[1]])
    }
}

/// A dense 3D grid in row-major (z, y, x) order.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    shape: [usize; 3],
    spacing: Spacing,
    data: Vec<T>,
}

/// CT-like intensities (Hounsfield-style units before normalization).
pub type Volume = Grid<f32>;
/// Organ indices, 0 = background.
pub type LabelMap = Grid<u16>;

impl<T: Voxel> Grid<T> {
    pub fn new(shape: [usize; 3], spacing: Spacing, data: Vec<T>) -> Result<Self> {
        spacing.validate()?;
        if shape.iter().any(|&n| n == 0) {
            return Err(PsatError::invalid(format!("grid shape must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(PsatError::ShapeMismatch(format!(
                "shape {shape:?} needs {n} voxels, got {}",
                data.len()
            )));
        }
        if T::KIND == VoxelKind::Intensity && data.iter().any(|v| !v.to_f64().is_finite()) {
            return Err(PsatError::NonFinite("volume contains non-finite voxels".into()));
        }
        Ok(Grid { shape, spacing, data })
    }

    pub fn filled(shape: [usize; 3], spacing: Spacing, value: T) -> Result<Self> {
        let n: usize = shape.iter().product();
        Self::new(shape, spacing, vec![value; n])
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> T {
        self.data[self.index(z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, v: T) {
        let i = self.index(z, y, x);
        self.data[i] = v;
    }

    /// Same geometry, different contents.
    pub fn with_data<U: Voxel>(&self, data: Vec<U>) -> Result<Grid<U>> {
        Grid::new(self.shape, self.spacing, data)
    }

    pub fn same_geometry<U>(&self, other: &Grid<U>) -> bool {
        self.shape == other.shape && self.spacing == other.spacing
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

/// Output length along one axis: `round_half_up(n * from / to)`, at least 1.
pub fn resampled_len(n: usize, from: f64, to: f64) -> usize {
    ((n as f64 * from / to) + 0.5).floor().max(1.0) as usize
}

/// Resample onto `target` spacing. Labels only accept nearest-neighbor.
pub fn resample<T: Voxel>(grid: &Grid<T>, target: Spacing, mode: Interpolation) -> Result<Grid<T>> {
    target.validate()?;
    check_mode::<T>(mode)?;
    if target == grid.spacing {
        return Ok(grid.clone());
    }
    let from = grid.spacing.as_array();
    let to = target.as_array();
    let shape = [
        resampled_len(grid.shape[0], from[0], to[0]),
        resampled_len(grid.shape[1], from[1], to[1]),
        resampled_len(grid.shape[2], from[2], to[2]),
    ];
    resample_to_shape(grid, shape, target, mode)
}

fn check_mode<T: Voxel>(mode: Interpolation) -> Result<()> {
    if T::KIND == VoxelKind::Label && mode == Interpolation::Trilinear {
        return Err(PsatError::invalid("label maps must be resampled with nearest-neighbor"));
    }
    Ok(())
}

/// Resample onto an explicit output grid. Output voxel centers are mapped
/// into the input through physical position; samples outside the input
/// clamp to the nearest edge voxel.
pub fn resample_to_shape<T: Voxel>(
    grid: &Grid<T>,
    shape: [usize; 3],
    spacing: Spacing,
    mode: Interpolation,
) -> Result<Grid<T>> {
    spacing.validate()?;
    check_mode::<T>(mode)?;
    if shape.iter().any(|&n| n == 0) {
        return Err(PsatError::invalid(format!("resample shape must be positive, got {shape:?}")));
    }
    if shape == grid.shape && spacing == grid.spacing {
        return Ok(grid.clone());
    }
    let from = grid.spacing.as_array();
    let to = spacing.as_array();
    let taps: Vec<Vec<(usize, usize, f64)>> = (0..3)
        .map(|a| axis_taps(shape[a], grid.shape[a], to[a] / from[a], mode))
        .collect();
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let src = &grid.data;
    let (sh, sw) = (grid.shape[1], grid.shape[2]);
    match mode {
        Interpolation::Nearest => {
            for &(z, _, _) in &taps[0] {
                for &(y, _, _) in &taps[1] {
                    let row = (z * sh + y) * sw;
                    for &(x, _, _) in &taps[2] {
                        out.push(src[row + x]);
                    }
                }
            }
        }
        Interpolation::Trilinear => {
            for &(z0, z1, wz) in &taps[0] {
                for &(y0, y1, wy) in &taps[1] {
                    let r00 = (z0 * sh + y0) * sw;
                    let r01 = (z0 * sh + y1) * sw;
                    let r10 = (z1 * sh + y0) * sw;
                    let r11 = (z1 * sh + y1) * sw;
                    for &(x0, x1, wx) in &taps[2] {
                        let lerp = |r: usize| {
                            let a = src[r + x0].to_f64();
                            let b = src[r + x1].to_f64();
                            a + (b - a) * wx
                        };
                        let c00 = lerp(r00);
                        let c01 = lerp(r01);
                        let c10 = lerp(r10);
                        let c11 = lerp(r11);
                        let c0 = c00 + (c01 - c00) * wy;
                        let c1 = c10 + (c11 - c10) * wy;
                        out.push(T::from_f64(c0 + (c1 - c0) * wz));
                    }
                }
            }
        }
    }
    Grid::new(shape, spacing, out)
}

/// Per output index: (lower input index, upper input index, upper weight).
/// For nearest mode only the first entry matters.
fn axis_taps(out_len: usize, in_len: usize, ratio: f64, mode: Interpolation) -> Vec<(usize, usize, f64)> {
    let max = (in_len - 1) as f64;
    (0..out_len)
        .map(|o| {
            let c = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, max);
            match mode {
                Interpolation::Nearest => {
                    let i = ((c + 0.5).floor() as usize).min(in_len - 1);
                    (i, i, 0.0)
                }
                Interpolation::Trilinear => {
                    let i0 = c.floor() as usize;
                    let i1 = (i0 + 1).min(in_len - 1);
                    (i0, i1, c - i0 as f64)
                }
            }
        })
        .collect()
}

/// Center `grid` inside a grid of `shape`, cropping or padding with `fill`
/// independently along each axis.
pub fn crop_or_pad<T: Voxel>(grid: &Grid<T>, shape: [usize; 3], fill: T) -> Result<Grid<T>> {
    if shape.iter().any(|&n| n == 0) {
        return Err(PsatError::invalid(format!("crop/pad shape must be positive, got {shape:?}")));
    }
    if shape == grid.shape {
        return Ok(grid.clone());
    }
    // (src start, dst start, run length) per axis
    let plan: Vec<(usize, usize, usize)> = (0..3)
        .map(|a| {
            let (old, new) = (grid.shape[a], shape[a]);
            if new >= old {
                (0, (new - old) / 2, old)
            } else {
                ((old - new) / 2, 0, new)
            }
        })
        .collect();
    let n: usize = shape.iter().product();
    let mut out = vec![fill; n];
    let (zs, zd, zl) = plan[0];
    let (ys, yd, yl) = plan[1];
    let (xs, xd, xl) = plan[2];
    for z in 0..zl {
        for y in 0..yl {
            let s = grid.index(zs + z, ys + y, xs);
            let d = ((zd + z) * shape[1] + yd + y) * shape[2] + xd;
            out[d..d + xl].copy_from_slice(&grid.data[s..s + xl]);
        }
    }
    Grid::new(shape, grid.spacing, out)
}

/// `x -> (clamp(x, clip_lo, clip_hi) - mean) / std`, evaluated in f64.
pub fn normalize_ct(v: &Volume, clip_lo: f64, clip_hi: f64, mean: f64, std: f64) -> Result<Volume> {
    if !(std > 0.0) || !std.is_finite() {
        return Err(PsatError::invalid(format!("normalization std must be positive, got {std}")));
    }
    if !(clip_lo < clip_hi) {
        return Err(PsatError::invalid(format!(
            "clip_lo ({clip_lo}) must be below clip_hi ({clip_hi})"
        )));
    }
    if !mean.is_finite() {
        return Err(PsatError::invalid("normalization mean must be finite"));
    }
    let data = v
        .data
        .iter()
        .map(|&x| ((x as f64).clamp(clip_lo, clip_hi) - mean) / std)
        .map(|y| y as f32)
        .collect();
    v.with_data(data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CohortTag {
    Adult,
    Pediatric,
    Internal,
}

impl CohortTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            CohortTag::Adult => "adult",
            CohortTag::Pediatric => "pediatric",
            CohortTag::Internal => "internal",
        }
    }
}

impl std::fmt::Display for CohortTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A paired intensity volume and organ label map.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub id: String,
    pub volume: Volume,
    pub labels: LabelMap,
    pub cohort: CohortTag,
}

impl Case {
    pub fn new(id: impl Into<String>, volume: Volume, labels: LabelMap, cohort: CohortTag) -> Result<Self> {
        if !volume.same_geometry(&labels) {
            return Err(PsatError::ShapeMismatch(format!(
                "volume {:?}@{:?} vs labels {:?}@{:?}",
                volume.shape(),
                volume.spacing(),
                labels.shape(),
                labels.spacing()
            )));
        }
        Ok(Case {
            id: id.into(),
            volume,
            labels,
            cohort,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.volume.shape()
    }

    pub fn spacing(&self) -> Spacing {
        self.volume.spacing()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn iso(s: f64) -> Spacing {
        Spacing::isotropic(s).unwrap()
    }

    fn ramp_x(shape: [usize; 3], s: f64) -> Volume {
        let mut data = Vec::new();
        for _z in 0..shape[0] {
            for _y in 0..shape[1] {
                for x in 0..shape[2] {
                    data.push(x as f32);
                }
            }
        }
        Grid::new(shape, iso(s), data).unwrap()
    }

    // Scalar trilinear sample of a grid at fractional index coordinates, with
    // edge clamping; written independently of the tap tables above.
    fn trilinear_at(v: &Volume, c: [f64; 3]) -> f64 {
        let sh = v.shape();
        let mut acc = 0.0;
        let cl: Vec<f64> = (0..3).map(|a| c[a].clamp(0.0, (sh[a] - 1) as f64)).collect();
        let base: Vec<usize> = cl.iter().map(|c| c.floor() as usize).collect();
        for corner in 0..8 {
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            for a in 0..3 {
                let hi = (corner >> (2 - a)) & 1 == 1;
                let f = cl[a] - base[a] as f64;
                idx[a] = if hi { (base[a] + 1).min(sh[a] - 1) } else { base[a] };
                w *= if hi { f } else { 1.0 - f };
            }
            acc += w * v.get(idx[0], idx[1], idx[2]) as f64;
        }
        acc
    }

    #[test]
    fn identity_spacing_is_bit_identical() {
        let v = ramp_x([5, 6, 7], 1.3);
        let r = resample(&v, iso(1.3), Interpolation::Trilinear).unwrap();
        assert_eq!(r, v);
    }

    #[test]
    fn halving_resolution_halves_shape() {
        let v = Volume::filled([40, 40, 40], iso(1.0), 3.0).unwrap();
        let r = resample(&v, iso(2.0), Interpolation::Trilinear).unwrap();
        assert_eq!(r.shape(), [20, 20, 20]);
        assert_eq!(r.spacing(), iso(2.0));
    }

    #[test]
    fn constant_volume_stays_constant() {
        let v = Volume::filled([9, 7, 11], Spacing::new(1.0, 1.5, 0.7).unwrap(), -250.0).unwrap();
        let r = resample(&v, Spacing::new(0.6, 2.2, 1.0).unwrap(), Interpolation::Trilinear).unwrap();
        assert!(r.data().iter().all(|&x| x == -250.0));
    }

    #[test]
    fn ramp_upsampling_matches_scalar_trilinear() {
        let v = ramp_x([6, 6, 12], 1.0);
        let r = resample(&v, iso(0.5), Interpolation::Trilinear).unwrap();
        assert_eq!(r.shape(), [12, 12, 24]);
        for z in 0..12 {
            for y in 0..12 {
                for x in 0..24 {
                    let c = [(z as f64 + 0.5) * 0.5 - 0.5, (y as f64 + 0.5) * 0.5 - 0.5, (x as f64 + 0.5) * 0.5 - 0.5];
                    let expect = trilinear_at(&v, c);
                    assert!((r.get(z, y, x) as f64 - expect).abs() < 1e-6);
                    // interior voxels reproduce the analytic ramp itself
                    if c[2] >= 0.0 && c[2] <= 11.0 {
                        assert!((r.get(z, y, x) as f64 - c[2]).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn labels_reject_trilinear() {
        let l = LabelMap::filled([4, 4, 4], iso(1.0), 1).unwrap();
        assert!(resample(&l, iso(2.0), Interpolation::Trilinear).is_err());
        assert!(resample(&l, iso(2.0), Interpolation::Nearest).is_ok());
    }

    #[test]
    fn non_positive_target_is_rejected() {
        let v = Volume::filled([4, 4, 4], iso(1.0), 0.0).unwrap();
        let bad = Spacing { dz: 1.0, dy: 0.0, dx: 1.0 };
        assert!(matches!(
            resample(&v, bad, Interpolation::Trilinear),
            Err(PsatError::InvalidArgument(_))
        ));
    }

    #[test]
    fn pad_fills_border() {
        let v = Volume::filled([10, 10, 10], iso(1.0), 7.0).unwrap();
        let p = crop_or_pad(&v, [16, 16, 16], -1000.0).unwrap();
        for z in 0..16 {
            for y in 0..16 {
                for x in 0..16 {
                    let inside = (3..13).contains(&z) && (3..13).contains(&y) && (3..13).contains(&x);
                    assert_eq!(p.get(z, y, x), if inside { 7.0 } else { -1000.0 });
                }
            }
        }
    }

    #[test]
    fn normalize_identity_and_clamp() {
        let v = Grid::new([1, 1, 3], iso(1.0), vec![-5.0f32, 0.25, 900.0]).unwrap();
        let n = normalize_ct(&v, f64::NEG_INFINITY, f64::INFINITY, 0.0, 1.0).unwrap();
        assert_eq!(n, v);
        let c = normalize_ct(&v, -100.0, 200.0, 50.0, 10.0).unwrap();
        assert_eq!(c.data()[2], 15.0);
        assert!(normalize_ct(&v, 0.0, 1.0, 0.0, 0.0).is_err());
        assert!(normalize_ct(&v, 1.0, 1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn normalize_moments_match_two_pass_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f32> = (0..4096).map(|_| rng.gen_range(-300.0f32..400.0)).collect();
        let v = Grid::new([16, 16, 16], iso(1.0), data.clone()).unwrap();
        let (lo, hi, mean, std) = (-150.0, 250.0, 37.5, 80.0);
        let n = normalize_ct(&v, lo, hi, mean, std).unwrap();

        let mapped: Vec<f64> = data.iter().map(|&x| ((x as f64).max(lo).min(hi) - mean) / std).collect();
        let m0 = mapped.iter().sum::<f64>() / mapped.len() as f64;
        let s0 = (mapped.iter().map(|y| (y - m0).powi(2)).sum::<f64>() / mapped.len() as f64).sqrt();

        let out: Vec<f64> = n.data().iter().map(|&y| y as f64).collect();
        let m1 = out.iter().sum::<f64>() / out.len() as f64;
        let s1 = (out.iter().map(|y| (y - m1).powi(2)).sum::<f64>() / out.len() as f64).sqrt();
        // output is stored as f32, so compare against the oracle rounded the same way
        let mr: Vec<f64> = mapped.iter().map(|&y| y as f32 as f64).collect();
        let m2 = mr.iter().sum::<f64>() / mr.len() as f64;
        let s2 = (mr.iter().map(|y| (y - m2).powi(2)).sum::<f64>() / mr.len() as f64).sqrt();
        assert!((m1 - m2).abs() < 1e-9 && (s1 - s2).abs() < 1e-9);
        assert!((m1 - m0).abs() < 1e-6 && (s1 - s0).abs() < 1e-6);
    }

    #[test]
    fn case_requires_matching_geometry() {
        let v = Volume::filled([4, 4, 4], iso(1.0), 0.0).unwrap();
        let l = LabelMap::filled([4, 4, 5], iso(1.0), 0).unwrap();
        assert!(Case::new("c", v, l, CohortTag::Adult).is_err());
    }

    proptest! {
        #[test]
        fn nearest_resampling_never_invents_labels(
            labels in proptest::collection::vec(0u16..4, 125),
            t in 0.3f64..3.0,
        ) {
            let l = LabelMap::new([5, 5, 5], iso(1.0), labels.clone()).unwrap();
            let r = resample(&l, iso(t), Interpolation::Nearest).unwrap();
            for v in r.data() {
                prop_assert!(labels.contains(v));
            }
        }

        #[test]
        fn constant_survives_double_resampling(c in -1000f32..1000.0, s1 in 0.4f64..3.0, s2 in 0.4f64..3.0) {
            let v = Volume::filled([7, 5, 6], iso(1.0), c).unwrap();
            let a = resample(&v, iso(s1), Interpolation::Trilinear).unwrap();
            let b = resample(&a, iso(s2), Interpolation::Trilinear).unwrap();
            prop_assert!(b.data().iter().all(|&x| x == c));
        }

        #[test]
        fn normalize_is_monotone(a in -2000f32..2000.0, b in -2000f32..2000.0) {
            let v = Grid::new([1, 1, 2], iso(1.0), vec![a.min(b), a.max(b)]).unwrap();
            let n = normalize_ct(&v, -500.0, 500.0, 12.0, 33.0).unwrap();
            prop_assert!(n.data()[0] <= n.data()[1]);
        }

        #[test]
        fn crop_pad_roundtrip_restores_center(data in proptest::collection::vec(-100f32..100.0, 16 * 16 * 16)) {
            let v = Grid::new([16, 16, 16], iso(1.0), data).unwrap();
            let small = crop_or_pad(&v, [10, 10, 10], 0.0).unwrap();
            let back = crop_or_pad(&small, [16, 16, 16], 0.0).unwrap();
            for z in 3..13 {
                for y in 3..13 {
                    for x in 3..13 {
                        prop_assert_eq!(back.get(z, y, x), v.get(z, y, x));
                    }
                }
            }
        }
    }
}
