//! Training procedures: direct training, fine-tuning, rehearsal and the
//! pass-through transfer, plus sliding-window inference.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_intensity, policy, sample_transform, warp, AugKind, AugmentationPolicy};
use crate::error::{PsatError, Result};
use crate::eval::mask_dsc;
use crate::nnet::{
    adam_step, forward, init, loss_and_grad, save_checkpoint, AdamHyper, Batch, Checkpoint, CheckpointHeader,
    LossValue, ParamStore, UNetConfig,
};
use crate::plan::{preprocess, TrainingPlan};
use crate::volumes::{crop_or_pad, resample_to_shape, Case, Interpolation, LabelMap, Volume};

/// Every configuration trains on pairs of patches.
pub const BATCH_SIZE: usize = 2;
/// Batch items whose patch is centred on a foreground voxel.
pub const FORCED_ITEMS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub lr0: f64,
    pub lr_end: f64,
    pub epochs: usize,
    pub poly_exp: f64,
    pub steps_per_epoch: usize,
    /// Validate after every `val_every`-th epoch and always after the last.
    #[serde(default = "one")]
    pub val_every: usize,
}

fn one() -> usize {
    1
}

impl TrainSchedule {
    pub fn new(lr0: f64, lr_end: f64, epochs: usize, steps_per_epoch: usize) -> Result<Self> {
        let s = TrainSchedule { lr0, lr_end, epochs, poly_exp: 0.9, steps_per_epoch, val_every: 1 };
        s.validate()?;
        Ok(s)
    }

    /// Desk-scale pretraining defaults.
    pub fn pretrain_default() -> Self {
        TrainSchedule { lr0: 1e-2, lr_end: 1e-5, epochs: 60, poly_exp: 0.9, steps_per_epoch: 40, val_every: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > self.lr_end && self.lr_end > 0.0 && self.lr0.is_finite()) {
            return Err(PsatError::invalid(format!(
                "schedule needs lr0 > lr_end > 0, got {} and {}",
                self.lr0, self.lr_end
            )));
        }
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.val_every == 0 {
            return Err(PsatError::invalid("epochs, steps_per_epoch and val_every must be at least 1"));
        }
        Ok(())
    }
}

/// Offset poly decay: `lr_end + (lr0 - lr_end) * (1 - epoch / epochs)^exp`.
pub fn poly_lr(s: &TrainSchedule, epoch: usize) -> Result<f64> {
    if epoch > s.epochs {
        return Err(PsatError::invalid(format!("epoch {epoch} beyond schedule length {}", s.epochs)));
    }
    // pin both endpoints so they are exact rather than rounded
    if epoch == 0 {
        return Ok(s.lr0);
    }
    if epoch == s.epochs {
        return Ok(s.lr_end);
    }
    let frac = 1.0 - epoch as f64 / s.epochs as f64;
    Ok(s.lr_end + (s.lr0 - s.lr_end) * frac.powf(s.poly_exp))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TransferMode {
    #[serde(rename = "T_o")]
    Off,
    #[serde(rename = "T_p")]
    Finetune,
    #[serde(rename = "T_m")]
    Rehearsal,
}

impl TransferMode {
    pub fn tag(&self) -> &'static str {
        match self {
            TransferMode::Off => "T_o",
            TransferMode::Finetune => "T_p",
            TransferMode::Rehearsal => "T_m",
        }
    }
}

impl fmt::Display for TransferMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for TransferMode {
    type Err = PsatError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "T_o" | "o" => Ok(TransferMode::Off),
            "T_p" | "p" => Ok(TransferMode::Finetune),
            "T_m" | "m" => Ok(TransferMode::Rehearsal),
            _ => Err(PsatError::invalid(format!("unknown transfer mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferSpec {
    pub mode: TransferMode,
    pub lr0_grid: Vec<f64>,
    pub epochs_grid: Vec<usize>,
    pub replay_ratio_grid: Vec<f64>,
    pub steps_per_epoch: usize,
    pub lr_end: f64,
    #[serde(default = "one")]
    pub val_every: usize,
}

pub const PAPER_LR0_GRID: [f64; 3] = [1e-3, 3.16e-4, 1e-4];
pub const PAPER_EPOCHS_GRID: [usize; 2] = [200, 500];
pub const PAPER_REPLAY_GRID: [f64; 3] = [0.25, 0.5, 1.0];
/// Pretraining length the paper's transfer epoch counts are relative to.
pub const PAPER_PRETRAIN_EPOCHS: usize = 1000;

impl TransferSpec {
    /// Full grids with epoch counts rescaled so the pretrain:transfer
    /// proportion matches a pretraining run of `pretrain_epochs`.
    pub fn scaled(mode: TransferMode, pretrain_epochs: usize, steps_per_epoch: usize) -> Self {
        if mode == TransferMode::Off {
            return TransferSpec {
                mode,
                lr0_grid: vec![],
                epochs_grid: vec![],
                replay_ratio_grid: vec![],
                steps_per_epoch,
                lr_end: 1e-5,
                val_every: 1,
            };
        }
        let epochs_grid = PAPER_EPOCHS_GRID
            .iter()
            .map(|&e| ((e * pretrain_epochs) as f64 / PAPER_PRETRAIN_EPOCHS as f64).round().max(1.0) as usize)
            .collect();
        TransferSpec {
            mode,
            lr0_grid: PAPER_LR0_GRID.to_vec(),
            epochs_grid,
            replay_ratio_grid: if mode == TransferMode::Rehearsal { PAPER_REPLAY_GRID.to_vec() } else { vec![] },
            steps_per_epoch,
            lr_end: 1e-5,
            val_every: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == TransferMode::Off {
            if !(self.lr0_grid.is_empty() && self.epochs_grid.is_empty() && self.replay_ratio_grid.is_empty()) {
                return Err(PsatError::invalid("T_o takes no hyperparameter grid"));
            }
            return Ok(());
        }
        if self.lr0_grid.is_empty() || self.epochs_grid.is_empty() {
            return Err(PsatError::invalid("transfer grids must be non-empty"));
        }
        if let Some(lr) = self.lr0_grid.iter().find(|&&lr| !(1e-4 - 1e-12..=1e-3 + 1e-12).contains(&lr)) {
            return Err(PsatError::invalid(format!("transfer lr0 {lr} outside [1e-4, 1e-3]")));
        }
        if self.epochs_grid.contains(&0) || self.steps_per_epoch == 0 {
            return Err(PsatError::invalid("transfer epochs and steps must be positive"));
        }
        match self.mode {
            TransferMode::Rehearsal => {
                if self.replay_ratio_grid.is_empty() {
                    return Err(PsatError::invalid("T_m needs a replay ratio grid"));
                }
                if let Some(r) = self.replay_ratio_grid.iter().find(|&&r| !(0.25..=1.0).contains(&r)) {
                    return Err(PsatError::invalid(format!("replay ratio {r} outside [0.25, 1]")));
                }
            }
            _ => {
                if !self.replay_ratio_grid.is_empty() {
                    return Err(PsatError::invalid("only T_m takes replay ratios"));
                }
            }
        }
        if !(self.lr_end > 0.0 && self.lr_grid_min() > self.lr_end) {
            return Err(PsatError::invalid("transfer lr_end must be positive and below every lr0"));
        }
        Ok(())
    }

    fn lr_grid_min(&self) -> f64 {
        self.lr0_grid.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Grid points in deterministic order: lr0, then epochs, then ratio.
    pub fn grid(&self) -> Vec<GridPoint> {
        let ratios: Vec<Option<f64>> = if self.mode == TransferMode::Rehearsal {
            self.replay_ratio_grid.iter().map(|&r| Some(r)).collect()
        } else {
            vec![None]
        };
        let mut out = Vec::new();
        for &lr0 in &self.lr0_grid {
            for &epochs in &self.epochs_grid {
                for &replay_ratio in &ratios {
                    out.push(GridPoint { lr0, epochs, replay_ratio });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lr0: f64,
    pub epochs: usize,
    pub replay_ratio: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DrawSource {
    Adult,
    Pediatric,
}

/// Rehearsal draw: adult with probability `r / (1 + r)`.
pub fn rehearsal_draw<R: Rng>(rng: &mut R, replay_ratio: f64) -> DrawSource {
    if rng.gen::<f64>() < replay_ratio / (1.0 + replay_ratio) {
        DrawSource::Adult
    } else {
        DrawSource::Pediatric
    }
}

/// A preprocessed case with per-class voxel indices for foreground-forced
/// patch sampling.
#[derive(Debug, Clone)]
pub struct PreparedCase {
    pub case: Case,
    class_voxels: Vec<Vec<u32>>,
}

impl PreparedCase {
    pub fn new(case: Case, num_classes: usize) -> Result<Self> {
        let mut class_voxels = vec![Vec::new(); num_classes];
        for (i, &l) in case.labels.data().iter().enumerate() {
            let l = l as usize;
            if l >= num_classes {
                return Err(PsatError::invalid(format!("case {} has label {l} >= {num_classes}", case.id)));
            }
            if l > 0 {
                class_voxels[l].push(i as u32);
            }
        }
        Ok(PreparedCase { case, class_voxels })
    }

    fn present_classes(&self) -> Vec<usize> {
        (1..self.class_voxels.len()).filter(|&c| !self.class_voxels[c].is_empty()).collect()
    }
}

/// Cases already preprocessed under one plan.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub train: Vec<PreparedCase>,
    pub val: Vec<Case>,
}

impl TrainSet {
    /// Preprocess native cases under `plan`.
    pub fn prepare(plan: &TrainingPlan, train: &[Case], val: &[Case], num_classes: usize) -> Result<Self> {
        let train = train
            .iter()
            .map(|c| PreparedCase::new(preprocess(c, plan)?, num_classes))
            .collect::<Result<Vec<_>>>()?;
        let val = val.iter().map(|c| preprocess(c, plan)).collect::<Result<Vec<_>>>()?;
        Ok(TrainSet { train, val })
    }

    pub fn train_ids(&self) -> Vec<String> {
        self.train.iter().map(|c| c.case.id.clone()).collect()
    }

    fn check_plan(&self, plan: &TrainingPlan) -> Result<()> {
        if self.train.is_empty() {
            return Err(PsatError::Training("no training cases".into()));
        }
        let target = plan.target_spacing.as_array();
        let all = self.train.iter().map(|c| &c.case).chain(self.val.iter());
        for c in all {
            let sp = c.spacing().as_array();
            if (0..3).any(|a| (sp[a] - target[a]).abs() > 1e-4 * target[a]) {
                return Err(PsatError::Training(format!(
                    "case {} has spacing {:?} but the plan expects {:?}; preprocess it first",
                    c.id, sp, target
                )));
            }
        }
        Ok(())
    }
}

/// Extract one augmented training patch centred on a (possibly forced
/// foreground) voxel.
pub fn sample_patch<R: Rng>(
    case: &PreparedCase,
    patch: [usize; 3],
    force_fg: bool,
    aug: &AugmentationPolicy,
    rng: &mut R,
) -> (Vec<f32>, Vec<u16>) {
    let sh = case.case.shape();
    let n = sh[0] * sh[1] * sh[2];
    let present = case.present_classes();
    let flat = if force_fg && !present.is_empty() {
        let cls = present[rng.gen_range(0..present.len())];
        let vox = &case.class_voxels[cls];
        vox[rng.gen_range(0..vox.len())] as usize
    } else {
        rng.gen_range(0..n)
    };
    let center = [
        (flat / (sh[1] * sh[2])) as f64,
        ((flat / sh[2]) % sh[1]) as f64,
        (flat % sh[2]) as f64,
    ];
    let t = sample_transform(aug, rng.gen());
    let mut img = warp(&case.case.volume, center, patch, &t);
    let lab = warp(&case.case.labels, center, patch, &t);
    apply_intensity(&mut img, &t);
    (img, lab)
}

/// Sliding-window prediction on an already preprocessed volume: windows of
/// the patch size at 50% overlap, uniform logit averaging, argmax.
pub fn predict_preprocessed(params: &ParamStore<f32>, volume: &Volume, pad_value: f32) -> Result<LabelMap> {
    let patch = params.config.patch_size;
    let native = volume.shape();
    let padded_shape = [0, 1, 2].map(|a| native[a].max(patch[a]));
    let padded = if padded_shape == native { volume.clone() } else { crop_or_pad(volume, padded_shape, pad_value)? };
    let ps = padded.shape();
    let starts: Vec<Vec<usize>> = (0..3).map(|a| window_starts(ps[a], patch[a])).collect();
    let classes = params.config.num_classes;
    let total = ps[0] * ps[1] * ps[2];
    let pn = patch[0] * patch[1] * patch[2];
    let mut acc = vec![0.0f32; classes * total];
    let mut count = vec![0u16; total];
    let data = padded.data();
    let mut window = vec![0.0f32; pn];
    for &z0 in &starts[0] {
        for &y0 in &starts[1] {
            for &x0 in &starts[2] {
                for z in 0..patch[0] {
                    for y in 0..patch[1] {
                        let src = ((z0 + z) * ps[1] + y0 + y) * ps[2] + x0;
                        let dst = (z * patch[1] + y) * patch[2];
                        window[dst..dst + patch[2]].copy_from_slice(&data[src..src + patch[2]]);
                    }
                }
                let logits = forward(params, &Batch::new(1, patch, window.clone())?)?;
                for z in 0..patch[0] {
                    for y in 0..patch[1] {
                        for x in 0..patch[2] {
                            let g = ((z0 + z) * ps[1] + y0 + y) * ps[2] + x0 + x;
                            let l = (z * patch[1] + y) * patch[2] + x;
                            for c in 0..classes {
                                acc[c * total + g] += logits.data[c * pn + l];
                            }
                            count[g] += 1;
                        }
                    }
                }
            }
        }
    }
    let mut labels = vec![0u16; total];
    for g in 0..total {
        let inv = 1.0 / count[g] as f32;
        let mut best = 0;
        let mut best_v = acc[g] * inv;
        for c in 1..classes {
            let v = acc[c * total + g] * inv;
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        labels[g] = best as u16;
    }
    let pred = padded.with_data(labels)?;
    if padded_shape == native {
        Ok(pred)
    } else {
        crop_or_pad(&pred, native, 0)
    }
}

/// Window origins along one axis: stride half a patch, last window flush
/// with the end.
pub fn window_starts(len: usize, patch: usize) -> Vec<usize> {
    if len <= patch {
        return vec![0];
    }
    let stride = (patch / 2).max(1);
    let mut s: Vec<usize> = (0..).map(|i| i * stride).take_while(|&p| p + patch < len).collect();
    s.push(len - patch);
    s
}

/// Predict a native-resolution case: preprocess under the plan, run the
/// sliding window, resample (nearest) back onto the native grid.
pub fn infer(params: &ParamStore<f32>, plan: &TrainingPlan, case: &Case) -> Result<LabelMap> {
    let pre = preprocess(case, plan)?;
    let pred = predict_preprocessed(params, &pre.volume, plan.normalized_floor())?;
    resample_to_shape(&pred, case.shape(), case.spacing(), Interpolation::Nearest)
}

pub fn infer_checkpoint(ckpt: &Checkpoint, case: &Case) -> Result<LabelMap> {
    infer(&ckpt.params, &ckpt.header.plan, case)
}

/// Validation score: per organ, mean over cases where it is defined; then
/// the mean over organs with at least one defined case.
pub fn validation_dsc(params: &ParamStore<f32>, plan: &TrainingPlan, val: &[Case]) -> Result<(Vec<Option<f64>>, f64)> {
    let organs = params.config.num_classes - 1;
    let mut sums = vec![(0.0, 0usize); organs];
    for case in val {
        let pred = predict_preprocessed(params, &case.volume, plan.normalized_floor())?;
        for o in 0..organs {
            if let Some(d) = mask_dsc(pred.data(), case.labels.data(), o as u16 + 1) {
                sums[o].0 += d;
                sums[o].1 += 1;
            }
        }
    }
    let per: Vec<Option<f64>> = sums.iter().map(|&(s, n)| (n > 0).then(|| s / n as f64)).collect();
    let defined: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = if defined.is_empty() { 0.0 } else { defined.iter().sum::<f64>() / defined.len() as f64 };
    Ok((per, mean))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub dice_term: f64,
    pub ce_term: f64,
    pub val_dsc: Vec<Option<f64>>,
    /// `None` on epochs without validation.
    pub val_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_index: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridOutcome {
    pub point: GridPoint,
    pub best_val: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub checkpoint: PathBuf,
    pub chosen: Option<GridPoint>,
    pub grid: Vec<GridOutcome>,
    pub train_loss: Vec<f64>,
    pub val_dsc: Vec<Option<f64>>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub final_loss: Option<LossValue>,
    pub patches_consumed: usize,
    pub optimizer_steps: usize,
    pub wall_time_s: f64,
    pub seed: u64,
}

/// Identity of a run for checkpoint headers and metric logs.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub dir: PathBuf,
    pub strategy: String,
    pub organ_names: Vec<String>,
}

impl RunContext {
    pub fn new(dir: impl Into<PathBuf>, strategy: impl Into<String>, organ_names: Vec<String>) -> Self {
        RunContext { dir: dir.into(), strategy: strategy.into(), organ_names }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.dir.join("model.psc")
    }

    fn metrics_path(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }
}

enum Pools<'a> {
    Single(&'a [PreparedCase]),
    Rehearsal { adult: &'a [PreparedCase], pediatric: &'a [PreparedCase], ratio: f64 },
}

impl Pools<'_> {
    fn draw<'b, R: Rng>(&'b self, rng: &mut R) -> &'b PreparedCase {
        let pool = match self {
            Pools::Single(p) => p,
            Pools::Rehearsal { adult, pediatric, ratio } => match rehearsal_draw(rng, *ratio) {
                DrawSource::Adult => adult,
                DrawSource::Pediatric => pediatric,
            },
        };
        &pool[rng.gen_range(0..pool.len())]
    }
}

struct LoopOutcome {
    best: ParamStore<f32>,
    best_epoch: usize,
    best_val: f64,
    records: Vec<EpochRecord>,
    final_loss: Option<LossValue>,
    patches: usize,
    steps: usize,
}

#[allow(clippy::too_many_arguments)]
fn train_loop(
    mut params: ParamStore<f32>,
    plan: &TrainingPlan,
    pools: &Pools,
    val: &[Case],
    aug: &AugmentationPolicy,
    schedule: &TrainSchedule,
    seed: u64,
    grid_index: Option<usize>,
) -> Result<LoopOutcome> {
    schedule.validate()?;
    if plan.batch_size != BATCH_SIZE {
        return Err(PsatError::Training(format!("batch size must be {BATCH_SIZE}, plan says {}", plan.batch_size)));
    }
    let patch = params.config.patch_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(schedule.epochs);
    let mut best = params.clone();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut final_loss = None;
    let (mut patches, mut steps) = (0, 0);
    for epoch in 0..schedule.epochs {
        let lr = poly_lr(schedule, epoch)?;
        let mut sums = (0.0, 0.0, 0.0);
        for _ in 0..schedule.steps_per_epoch {
            let mut data = Vec::with_capacity(BATCH_SIZE * patch.iter().product::<usize>());
            let mut labels = Vec::with_capacity(data.capacity());
            for item in 0..BATCH_SIZE {
                let case = pools.draw(&mut rng);
                let (img, lab) = sample_patch(case, patch, item < FORCED_ITEMS, aug, &mut rng);
                data.extend(img);
                labels.extend(lab);
            }
            patches += BATCH_SIZE;
            let batch = Batch::new(BATCH_SIZE, patch, data)?;
            let (loss, grads) = loss_and_grad(&params, &batch, &labels)?;
            adam_step(&mut params, &grads, lr, AdamHyper::default())?;
            steps += 1;
            sums.0 += loss.total;
            sums.1 += loss.dice_term;
            sums.2 += loss.ce_term;
            final_loss = Some(loss);
        }
        let k = schedule.steps_per_epoch as f64;
        let last = epoch + 1 == schedule.epochs;
        let (val_dsc, val_mean) = if val.is_empty() {
            // nothing to select on: the final weights are kept
            if last {
                best_epoch = epoch;
                best = params.clone();
            }
            (vec![], None)
        } else if last || (epoch + 1) % schedule.val_every == 0 {
            let (per, mean) = validation_dsc(&params, plan, val)?;
            // strict improvement keeps the earliest epoch on ties
            if mean > best_val {
                best_val = mean;
                best_epoch = epoch;
                best = params.clone();
            }
            (per, Some(mean))
        } else {
            (vec![], None)
        };
        log::info!("epoch {epoch}: lr {lr:.3e} loss {:.4} val {val_mean:?}", sums.0 / k);
        records.push(EpochRecord {
            epoch,
            lr,
            loss: sums.0 / k,
            dice_term: sums.1 / k,
            ce_term: sums.2 / k,
            val_dsc,
            val_mean,
            grid_index,
        });
    }
    Ok(LoopOutcome { best, best_epoch, best_val, records, final_loss, patches, steps })
}

fn write_metrics(path: &Path, records: &[EpochRecord], append: bool) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::OpenOptions::new().create(true).write(true).append(append).truncate(!append).open(path)?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

fn header(
    ctx: &RunContext,
    plan: &TrainingPlan,
    config: &UNetConfig,
    epoch: usize,
    seed: u64,
    train_ids: Vec<String>,
) -> CheckpointHeader {
    CheckpointHeader {
        config: config.clone(),
        plan: plan.clone(),
        plan_hash: plan.plan_hash.clone(),
        strategy: ctx.strategy.clone(),
        epoch,
        rng_state: seed,
        train_ids,
        organ_names: ctx.organ_names.clone(),
    }
}

/// Train from scratch on one learning set; keeps the best-validation weights.
pub fn train_direct(
    plan: &TrainingPlan,
    data: &TrainSet,
    aug: &AugmentationPolicy,
    schedule: &TrainSchedule,
    seed: u64,
    ctx: &RunContext,
) -> Result<(RunResult, Checkpoint)> {
    let start = Instant::now();
    data.check_plan(plan)?;
    let config = UNetConfig::from_plan(plan, ctx.organ_names.len() + 1)?;
    let params = init::<f32>(&config, seed)?;
    let out = train_loop(params, plan, &Pools::Single(&data.train), &data.val, aug, schedule, seed, None)?;
    let ckpt = Checkpoint {
        header: header(ctx, plan, &config, out.best_epoch, seed, data.train_ids()),
        params: out.best,
    };
    save_checkpoint(&ctx.checkpoint_path(), &ckpt)?;
    write_metrics(&ctx.metrics_path(), &out.records, false)?;
    let result = RunResult {
        checkpoint: ctx.checkpoint_path(),
        chosen: None,
        grid: vec![],
        train_loss: out.records.iter().map(|r| r.loss).collect(),
        val_dsc: out.records.iter().map(|r| r.val_mean).collect(),
        best_epoch: out.best_epoch,
        best_val: out.best_val,
        final_loss: out.final_loss,
        patches_consumed: out.patches,
        optimizer_steps: out.steps,
        wall_time_s: start.elapsed().as_secs_f64(),
        seed,
    };
    Ok((result, ckpt))
}

/// Adapt a pretrained checkpoint toward pediatric data. `pediatric` and
/// `adult` must be preprocessed under the base checkpoint's plan.
pub fn transfer(
    base: &Checkpoint,
    spec: &TransferSpec,
    pediatric: &TrainSet,
    adult: Option<&TrainSet>,
    seed: u64,
    ctx: &RunContext,
) -> Result<(RunResult, Checkpoint)> {
    let start = Instant::now();
    spec.validate()?;
    let plan = &base.header.plan;
    if spec.mode == TransferMode::Off {
        let mut ckpt = base.clone();
        ckpt.header.strategy = ctx.strategy.clone();
        save_checkpoint(&ctx.checkpoint_path(), &ckpt)?;
        let result = RunResult {
            checkpoint: ctx.checkpoint_path(),
            chosen: None,
            grid: vec![],
            train_loss: vec![],
            val_dsc: vec![],
            best_epoch: base.header.epoch,
            best_val: f64::NAN,
            final_loss: None,
            patches_consumed: 0,
            optimizer_steps: 0,
            wall_time_s: start.elapsed().as_secs_f64(),
            seed,
        };
        return Ok((result, ckpt));
    }
    pediatric.check_plan(plan)?;
    let adult = match (spec.mode, adult) {
        (TransferMode::Rehearsal, None) => {
            return Err(PsatError::Training("rehearsal requires the adult pretraining cohort".into()))
        }
        (TransferMode::Rehearsal, Some(a)) => {
            a.check_plan(plan)?;
            Some(a)
        }
        _ => None,
    };
    // transfer always uses the default augmentation
    let aug = policy(AugKind::Default);

    let mut best: Option<(usize, LoopOutcome)> = None;
    let mut grid = Vec::new();
    let mut all_records = Vec::new();
    let (mut patches, mut steps) = (0, 0);
    for (gi, point) in spec.grid().into_iter().enumerate() {
        let schedule = TrainSchedule {
            val_every: spec.val_every,
            ..TrainSchedule::new(point.lr0, spec.lr_end, point.epochs, spec.steps_per_epoch)?
        };
        let mut params = base.params.clone();
        params.reset_optimizer();
        let pools = match (point.replay_ratio, adult) {
            (Some(ratio), Some(a)) => Pools::Rehearsal { adult: &a.train, pediatric: &pediatric.train, ratio },
            _ => Pools::Single(&pediatric.train),
        };
        let out = train_loop(params, plan, &pools, &pediatric.val, &aug, &schedule, seed, Some(gi))?;
        grid.push(GridOutcome { point, best_val: out.best_val });
        all_records.extend(out.records.iter().cloned());
        patches += out.patches;
        steps += out.steps;
        // ties keep the earlier grid point
        if best.as_ref().map_or(true, |(_, b)| out.best_val > b.best_val) {
            best = Some((gi, out));
        }
    }
    let (gi, out) = best.expect("grid validated non-empty");
    let mut train_ids = base.header.train_ids.clone();
    train_ids.extend(pediatric.train_ids());
    if let Some(a) = adult {
        train_ids.extend(a.train_ids());
    }
    train_ids.sort();
    train_ids.dedup();
    let ckpt = Checkpoint {
        header: header(ctx, plan, &base.params.config, out.best_epoch, seed, train_ids),
        params: out.best,
    };
    save_checkpoint(&ctx.checkpoint_path(), &ckpt)?;
    write_metrics(&ctx.metrics_path(), &all_records, false)?;
    let result = RunResult {
        checkpoint: ctx.checkpoint_path(),
        chosen: Some(grid[gi].point),
        train_loss: out.records.iter().map(|r| r.loss).collect(),
        val_dsc: out.records.iter().map(|r| r.val_mean).collect(),
        grid,
        best_epoch: out.best_epoch,
        best_val: out.best_val,
        final_loss: out.final_loss,
        patches_consumed: patches,
        optimizer_steps: steps,
        wall_time_s: start.elapsed().as_secs_f64(),
        seed,
    };
    Ok((result, ckpt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fingerprint::compute_fingerprint;
    use crate::nnet::{load_checkpoint, Logits};
    use crate::phantom::{generate_cohort, CohortSpec};
    use crate::plan::{derive_plan_with_channels, PlanSource};
    use crate::volumes::{CohortTag, Spacing};

    fn sched(epochs: usize) -> TrainSchedule {
        TrainSchedule::new(1e-2, 1e-5, epochs, 1).unwrap()
    }

    #[test]
    fn poly_endpoints_and_midpoint() {
        let s = sched(1000);
        assert_eq!(poly_lr(&s, 0).unwrap(), 1e-2);
        assert_eq!(poly_lr(&s, 1000).unwrap(), 1e-5);
        let mid = 1e-5 + (1e-2 - 1e-5) * 0.5f64.powf(0.9);
        assert!((poly_lr(&s, 500).unwrap() - mid).abs() < 1e-15);
        // the quoted approximation 5.358e-3 drops the offset term; the formula gives 5.3635e-3
        assert!((mid - 5.358e-3).abs() < 1e-5);
        assert!(poly_lr(&s, 1001).is_err());
        let lrs: Vec<f64> = (0..=1000).map(|e| poly_lr(&s, e).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn schedule_validation() {
        assert!(TrainSchedule::new(1e-5, 1e-5, 10, 1).is_err());
        assert!(TrainSchedule::new(1e-2, 0.0, 10, 1).is_err());
        assert!(TrainSchedule::new(1e-2, 1e-5, 0, 1).is_err());
    }

    #[test]
    fn rehearsal_fractions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for r in PAPER_REPLAY_GRID {
            let adult = (0..10_000).filter(|_| rehearsal_draw(&mut rng, r) == DrawSource::Adult).count();
            let frac = adult as f64 / 1e4;
            assert!((frac - r / (1.0 + r)).abs() < 0.02, "r={r}: {frac}");
        }
    }

    #[test]
    fn transfer_grids_follow_the_intervals() {
        let t = TransferSpec::scaled(TransferMode::Rehearsal, 60, 40);
        t.validate().unwrap();
        assert_eq!(t.epochs_grid, vec![12, 30]);
        assert_eq!(t.grid().len(), 3 * 2 * 3);
        let p = TransferSpec::scaled(TransferMode::Finetune, 1000, 40);
        assert_eq!(p.epochs_grid, PAPER_EPOCHS_GRID.to_vec());
        assert_eq!(p.grid().len(), 6);
        assert!(p.grid().iter().all(|g| g.replay_ratio.is_none()));
        let o = TransferSpec::scaled(TransferMode::Off, 60, 40);
        o.validate().unwrap();
        assert!(o.grid().is_empty() || o.lr0_grid.is_empty());
        let mut bad = t.clone();
        bad.lr0_grid.push(1e-2);
        assert!(bad.validate().is_err());
        let mut bad = t;
        bad.replay_ratio_grid = vec![2.0];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn window_starts_cover_the_axis() {
        assert_eq!(window_starts(20, 32), vec![0]);
        assert_eq!(window_starts(32, 32), vec![0]);
        assert_eq!(window_starts(64, 32), vec![0, 16, 32]);
        assert_eq!(window_starts(43, 32), vec![0, 11]);
        assert_eq!(window_starts(50, 16), vec![0, 8, 16, 24, 32, 34]);
    }

    fn tiny_plan() -> TrainingPlan {
        let fp = crate::fingerprint::DatasetFingerprint {
            n_cases: 2,
            median_shape: [16, 16, 16],
            spacing_median: Spacing::isotropic(1.0).unwrap(),
            spacing_p10: Spacing::isotropic(1.0).unwrap(),
            fg_mean: 0.0,
            fg_std: 1.0,
            fg_p005: -3.0,
            fg_p995: 3.0,
        };
        derive_plan_with_channels(&fp, PlanSource::Adult, 4096, 2).unwrap()
    }

    #[test]
    fn whole_image_equals_single_window() {
        let plan = tiny_plan();
        assert_eq!(plan.patch_size, [16, 16, 16]);
        let cfg = UNetConfig::from_plan(&plan, 3).unwrap();
        let p: ParamStore<f32> = init(&cfg, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vals: Vec<f32> = (0..4096).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let vol = Volume::new([16, 16, 16], plan.target_spacing, vals.clone()).unwrap();
        let pred = predict_preprocessed(&p, &vol, plan.normalized_floor()).unwrap();
        let Logits { data, .. } = forward(&p, &Batch::new(1, [16, 16, 16], vals).unwrap()).unwrap();
        for v in 0..4096 {
            let best = (0..3).max_by(|&a, &b| data[a * 4096 + v].total_cmp(&data[b * 4096 + v]).then(b.cmp(&a))).unwrap();
            assert_eq!(pred.data()[v] as usize, best);
        }
    }

    #[test]
    fn small_case_pads_and_crops_and_constant_model_is_constant() {
        let plan = tiny_plan();
        let cfg = UNetConfig::from_plan(&plan, 3).unwrap();
        let mut p: ParamStore<f32> = ParamStore::zeros(&cfg).unwrap();
        // only the head bias is non-zero: class 2 everywhere
        let head_bias = p.tensors.len() - 1;
        p.tensors[head_bias].data = vec![0.0, 0.5, 1.0];
        let vol = Volume::filled([9, 20, 5], plan.target_spacing, 0.3).unwrap();
        let pred = predict_preprocessed(&p, &vol, plan.normalized_floor()).unwrap();
        assert_eq!(pred.shape(), [9, 20, 5]);
        assert!(pred.data().iter().all(|&l| l == 2));
    }

    fn small_sets(n: usize, seed: u64) -> (TrainingPlan, TrainSet, Vec<String>) {
        let cohort = generate_cohort(&CohortSpec::default_for(CohortTag::Adult), n, seed).unwrap();
        let fp = compute_fingerprint(&cohort.train()).unwrap();
        let plan = derive_plan_with_channels(&fp, PlanSource::Adult, 16 * 16 * 16, 2).unwrap();
        let organs = cohort.spec.organ_names();
        let set = TrainSet::prepare(&plan, &cohort.train(), &cohort.val(), organs.len() + 1).unwrap();
        (plan, set, organs)
    }

    #[test]
    fn bookkeeping_determinism_and_transfer_identity() {
        let (plan, set, organs) = small_sets(4, 3);
        let dir = tempfile::tempdir().unwrap();
        let aug = policy(AugKind::Default);
        let s = TrainSchedule::new(1e-2, 1e-5, 1, 2).unwrap();
        let ctx = RunContext::new(dir.path().join("a"), "PaSaAdTo", organs.clone());
        let (r1, c1) = train_direct(&plan, &set, &aug, &s, 7, &ctx).unwrap();
        assert_eq!((r1.patches_consumed, r1.optimizer_steps), (4, 2));
        assert_eq!(r1.train_loss.len(), 1);
        let ctx2 = RunContext::new(dir.path().join("b"), "PaSaAdTo", organs.clone());
        let (r2, _) = train_direct(&plan, &set, &aug, &s, 7, &ctx2).unwrap();
        assert_eq!(r1.final_loss.unwrap().total.to_bits(), r2.final_loss.unwrap().total.to_bits());
        assert_eq!(fs::read(&r1.checkpoint).unwrap(), fs::read(&r2.checkpoint).unwrap());
        let lines = fs::read_to_string(dir.path().join("a/metrics.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 1);

        let spec = TransferSpec::scaled(TransferMode::Off, 60, 40);
        let ctx3 = RunContext::new(dir.path().join("o"), "PaSaAdTo", organs);
        let (_, c3) = transfer(&c1, &spec, &set, None, 1, &ctx3).unwrap();
        assert_eq!(c3.params, c1.params);
        let reloaded = load_checkpoint(&ctx3.checkpoint_path()).unwrap();
        assert_eq!(reloaded.params.tensors, c1.params.tensors);
    }

    #[test]
    fn rehearsal_without_adult_and_spacing_mismatch_error() {
        let (plan, set, organs) = small_sets(4, 5);
        let dir = tempfile::tempdir().unwrap();
        let ctx = RunContext::new(dir.path(), "PaSaAdTm", organs.clone());
        let cfg = UNetConfig::from_plan(&plan, organs.len() + 1).unwrap();
        let base = Checkpoint {
            header: header(&ctx, &plan, &cfg, 0, 0, vec![]),
            params: init(&cfg, 0).unwrap(),
        };
        let spec = TransferSpec::scaled(TransferMode::Rehearsal, 5, 1);
        assert!(matches!(transfer(&base, &spec, &set, None, 0, &ctx), Err(PsatError::Training(_))));

        let mut other = plan.clone();
        other.target_spacing = Spacing::isotropic(0.5).unwrap();
        let s = TrainSchedule::new(1e-2, 1e-5, 1, 1).unwrap();
        assert!(train_direct(&other, &set, &policy(AugKind::Default), &s, 0, &ctx).is_err());
    }
}
