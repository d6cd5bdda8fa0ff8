//! Strategy codes, experiment configuration and the study runner that wires
//! plan source, learning set, augmentation and transfer mode into runs.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{policy, AugKind, AugmentationPolicy};
use crate::error::{PsatError, Result};
use crate::eval::{evaluate, render_table, EvalReport, Table};
use crate::fingerprint::{compute_fingerprint, merge_balanced, DatasetFingerprint};
use crate::nnet::{load_checkpoint, Checkpoint};
use crate::phantom::{generate_cohort, Cohort, CohortSpec, Splits};
use crate::plan::{derive_plan_with_channels, PlanSource, TrainingPlan, DEFAULT_BASE_CHANNELS, DEFAULT_VOXEL_BUDGET};
use crate::psv;
use crate::train::{
    train_direct, transfer, GridPoint, RunContext, TrainSchedule, TrainSet, TransferMode, TransferSpec,
    PAPER_LR0_GRID, PAPER_REPLAY_GRID,
};
use crate::volumes::{Case, CohortTag};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
/// Environment variable overriding the configured output root.
pub const OUT_ENV: &str = "PSAT_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SetSource {
    #[serde(rename = "S_a")]
    Adult,
    #[serde(rename = "S_p")]
    Pediatric,
    #[serde(rename = "S_m")]
    Mixed,
}

fn plan_letter(p: PlanSource) -> char {
    match p {
        PlanSource::Adult => 'a',
        PlanSource::Pediatric => 'p',
        PlanSource::Mixed => 'm',
    }
}

fn set_letter(s: SetSource) -> char {
    match s {
        SetSource::Adult => 'a',
        SetSource::Pediatric => 'p',
        SetSource::Mixed => 'm',
    }
}

fn aug_letter(a: AugKind) -> char {
    match a {
        AugKind::Default => 'd',
        AugKind::Contraction => 'c',
    }
}

fn transfer_letter(t: TransferMode) -> char {
    match t {
        TransferMode::Off => 'o',
        TransferMode::Finetune => 'p',
        TransferMode::Rehearsal => 'm',
    }
}

/// One PSAT variant: plan source, learning set, augmentation, transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StrategyCode {
    pub plan: PlanSource,
    pub set: SetSource,
    pub aug: AugKind,
    pub transfer: TransferMode,
}

/// Pretraining identity shared by every transfer mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PretrainKey {
    pub plan: PlanSource,
    pub set: SetSource,
    pub aug: AugKind,
}

impl fmt::Display for PretrainKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}S{}A{}", plan_letter(self.plan), set_letter(self.set), aug_letter(self.aug))
    }
}

impl StrategyCode {
    pub fn all() -> Vec<StrategyCode> {
        let mut out = Vec::with_capacity(54);
        for plan in [PlanSource::Adult, PlanSource::Pediatric, PlanSource::Mixed] {
            for set in [SetSource::Adult, SetSource::Pediatric, SetSource::Mixed] {
                for aug in [AugKind::Default, AugKind::Contraction] {
                    for transfer in [TransferMode::Off, TransferMode::Finetune, TransferMode::Rehearsal] {
                        out.push(StrategyCode { plan, set, aug, transfer });
                    }
                }
            }
        }
        out
    }

    pub fn pretrain_key(&self) -> PretrainKey {
        PretrainKey { plan: self.plan, set: self.set, aug: self.aug }
    }

    /// Advisory notes for combinations that are runnable but known to be
    /// redundant or pathological.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.transfer == TransferMode::Off {
            return w;
        }
        if self.plan == PlanSource::Pediatric {
            w.push(format!(
                "{self}: pediatric-derived plans combined with transfer from a pretrained model are known to \
                 converge poorly; inspect this run's manifest before trusting the result"
            ));
        }
        if self.set == SetSource::Pediatric {
            w.push(format!("{self}: pretraining already used pediatric data, so the transfer step is redundant"));
        }
        w
    }
}

impl fmt::Display for StrategyCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}T{}", self.pretrain_key(), transfer_letter(self.transfer))
    }
}

impl FromStr for StrategyCode {
    type Err = PsatError;

    fn from_str(s: &str) -> Result<Self> {
        parse_strategy(s)
    }
}

impl Serialize for StrategyCode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for StrategyCode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        parse_strategy(&s).map_err(serde::de::Error::custom)
    }
}

/// Parses `P(a|p|m)S(a|p|m)A(d|c)T(o|p|m)`, case-sensitively. Errors carry
/// the byte offset of the first offending character.
pub fn parse_strategy(s: &str) -> Result<StrategyCode> {
    let bytes = s.as_bytes();
    let err = |offset: usize, message: String| PsatError::Parse { offset, message };
    let expect = |offset: usize, want: u8| -> Result<()> {
        match bytes.get(offset) {
            Some(&b) if b == want => Ok(()),
            Some(_) => Err(err(offset, format!("expected `{}`", want as char))),
            None => Err(err(offset, format!("unexpected end of input, expected `{}`", want as char))),
        }
    };
    let pick = |offset: usize, options: &str| -> Result<u8> {
        match bytes.get(offset) {
            Some(&b) if options.as_bytes().contains(&b) => Ok(b),
            Some(_) => Err(err(offset, format!("expected one of `{options}`"))),
            None => Err(err(offset, format!("unexpected end of input, expected one of `{options}`"))),
        }
    };
    expect(0, b'P')?;
    let plan = match pick(1, "apm")? {
        b'a' => PlanSource::Adult,
        b'p' => PlanSource::Pediatric,
        _ => PlanSource::Mixed,
    };
    expect(2, b'S')?;
    let set = match pick(3, "apm")? {
        b'a' => SetSource::Adult,
        b'p' => SetSource::Pediatric,
        _ => SetSource::Mixed,
    };
    expect(4, b'A')?;
    let aug = match pick(5, "dc")? {
        b'd' => AugKind::Default,
        _ => AugKind::Contraction,
    };
    expect(6, b'T')?;
    let transfer = match pick(7, "opm")? {
        b'o' => TransferMode::Off,
        b'p' => TransferMode::Finetune,
        _ => TransferMode::Rehearsal,
    };
    if bytes.len() > 8 {
        return Err(err(8, "trailing characters after strategy code".into()));
    }
    Ok(StrategyCode { plan, set, aug, transfer })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortConfig {
    pub n: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortsConfig {
    pub adult: CohortConfig,
    pub pediatric: CohortConfig,
    /// Held out entirely as an external test cohort.
    pub internal: CohortConfig,
    #[serde(default = "default_train_pct")]
    pub train_pct: usize,
    #[serde(default = "default_val_pct")]
    pub val_pct: usize,
}

fn default_train_pct() -> usize {
    70
}

fn default_val_pct() -> usize {
    15
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    #[serde(default = "default_budget")]
    pub voxel_budget: usize,
    #[serde(default = "default_channels")]
    pub base_channels: usize,
}

fn default_budget() -> usize {
    DEFAULT_VOXEL_BUDGET
}

fn default_channels() -> usize {
    DEFAULT_BASE_CHANNELS
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig { voxel_budget: DEFAULT_VOXEL_BUDGET, base_channels: DEFAULT_BASE_CHANNELS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    #[serde(default = "default_lr_end")]
    pub lr_end: f64,
    #[serde(default = "default_one")]
    pub val_every: usize,
}

fn default_lr0() -> f64 {
    1e-2
}

fn default_lr_end() -> f64 {
    1e-5
}

fn default_one() -> usize {
    1
}

impl Default for PretrainConfig {
    fn default() -> Self {
        let s = TrainSchedule::pretrain_default();
        PretrainConfig { epochs: s.epochs, steps_per_epoch: s.steps_per_epoch, lr0: s.lr0, lr_end: s.lr_end, val_every: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    /// Defaults to the reference epoch grid rescaled to the pretraining length.
    #[serde(default)]
    pub epochs_grid: Option<Vec<usize>>,
    #[serde(default = "default_lr_grid")]
    pub lr0_grid: Vec<f64>,
    #[serde(default = "default_replay_grid")]
    pub replay_ratio_grid: Vec<f64>,
    pub steps_per_epoch: usize,
    #[serde(default = "default_one")]
    pub val_every: usize,
}

fn default_lr_grid() -> Vec<f64> {
    PAPER_LR0_GRID.to_vec()
}

fn default_replay_grid() -> Vec<f64> {
    PAPER_REPLAY_GRID.to_vec()
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            epochs_grid: None,
            lr0_grid: default_lr_grid(),
            replay_ratio_grid: default_replay_grid(),
            steps_per_epoch: TrainSchedule::pretrain_default().steps_per_epoch,
            val_every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub strategies: Vec<String>,
    pub baseline: String,
    /// Seed for model initialisation and patch sampling.
    pub seed: u64,
    #[serde(default = "default_scale")]
    pub epochs_scale: f64,
    /// Upper bound on concurrently running pretraining jobs.
    #[serde(default = "default_one")]
    pub workers: usize,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_scale() -> f64 {
    1.0
}

/// Experiment configuration, read from TOML:
///
/// ```toml
/// [study]
/// strategies = ["PaSaAdTo", "PaSaAdTp"]
/// baseline = "PaSaAdTo"
/// seed = 1
/// epochs_scale = 1.0   # optional
/// workers = 1          # optional
/// out = "runs"         # optional; PSAT_OUT and --out take precedence
///
/// [cohorts]
/// adult = { n = 20, seed = 11 }
/// pediatric = { n = 20, seed = 12 }
/// internal = { n = 10, seed = 13 }
///
/// [plan]               # optional
/// voxel_budget = 32768
/// base_channels = 8
///
/// [pretrain]           # optional
/// epochs = 60
/// steps_per_epoch = 40
///
/// [transfer]           # optional
/// steps_per_epoch = 40
/// lr0_grid = [1e-3, 3.16e-4, 1e-4]
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub study: StudyConfig,
    pub cohorts: CohortsConfig,
    #[serde(default)]
    pub plan: PlanConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub transfer: TransferConfig,
}

fn scaled_epochs(epochs: usize, scale: f64) -> usize {
    ((epochs as f64 * scale).round() as usize).max(1)
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| PsatError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PsatError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| PsatError::Config(e.to_string()))
    }

    pub fn strategies(&self) -> Result<Vec<StrategyCode>> {
        let mut out: Vec<StrategyCode> = Vec::new();
        for s in &self.study.strategies {
            let code = parse_strategy(s).map_err(|e| PsatError::Config(format!("strategy `{s}`: {e}")))?;
            if !out.contains(&code) {
                out.push(code);
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let codes = self.strategies()?;
        if codes.is_empty() {
            return Err(PsatError::Config("no strategies requested".into()));
        }
        let baseline = parse_strategy(&self.study.baseline)
            .map_err(|e| PsatError::Config(format!("baseline `{}`: {e}", self.study.baseline)))?;
        if !codes.contains(&baseline) {
            return Err(PsatError::Config(format!("baseline {baseline} is not among the requested strategies")));
        }
        if !(self.study.epochs_scale > 0.0 && self.study.epochs_scale.is_finite()) {
            return Err(PsatError::Config("epochs_scale must be positive".into()));
        }
        if self.study.workers == 0 {
            return Err(PsatError::Config("workers must be at least 1".into()));
        }
        let c = &self.cohorts;
        if c.train_pct + c.val_pct >= 100 {
            return Err(PsatError::Config("train_pct + val_pct must leave a test split".into()));
        }
        for (name, cc) in [("adult", &c.adult), ("pediatric", &c.pediatric)] {
            let split = Splits::by_percent(cc.n, c.train_pct, c.val_pct);
            if split.train.is_empty() || split.val.is_empty() || split.test.is_empty() {
                return Err(PsatError::Config(format!(
                    "{name} cohort of {} cases leaves an empty train, validation or test split",
                    cc.n
                )));
            }
        }
        if c.internal.n == 0 {
            return Err(PsatError::Config("internal cohort must have at least one case".into()));
        }
        self.pretrain_schedule()?;
        for mode in [TransferMode::Finetune, TransferMode::Rehearsal] {
            self.transfer_spec(mode).validate().map_err(|e| PsatError::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn pretrain_schedule(&self) -> Result<TrainSchedule> {
        let p = &self.pretrain;
        let s = TrainSchedule {
            val_every: p.val_every,
            ..TrainSchedule::new(
                p.lr0,
                p.lr_end,
                scaled_epochs(p.epochs, self.study.epochs_scale),
                p.steps_per_epoch,
            )
            .map_err(|e| PsatError::Config(e.to_string()))?
        };
        s.validate().map_err(|e| PsatError::Config(e.to_string()))?;
        Ok(s)
    }

    pub fn transfer_spec(&self, mode: TransferMode) -> TransferSpec {
        let t = &self.transfer;
        let mut spec = TransferSpec::scaled(mode, self.pretrain.epochs, t.steps_per_epoch);
        spec.val_every = t.val_every;
        if mode == TransferMode::Off {
            return spec;
        }
        if let Some(grid) = &t.epochs_grid {
            spec.epochs_grid = grid.clone();
        }
        spec.epochs_grid = spec.epochs_grid.iter().map(|&e| scaled_epochs(e, self.study.epochs_scale)).collect();
        spec.lr0_grid = t.lr0_grid.clone();
        if mode == TransferMode::Rehearsal {
            spec.replay_ratio_grid = t.replay_ratio_grid.clone();
        }
        spec
    }

    /// Output root: explicit override, then `PSAT_OUT`, then the config
    /// value, then `psat-out`.
    pub fn output_root(&self, override_root: Option<&Path>) -> PathBuf {
        if let Some(p) = override_root {
            return p.to_path_buf();
        }
        if let Some(p) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
            return PathBuf::from(p);
        }
        self.study.out.clone().unwrap_or_else(|| PathBuf::from("psat-out"))
    }
}

/// The three phantom cohorts of one experiment.
#[derive(Debug, Clone)]
pub struct Cohorts {
    pub adult: Cohort,
    pub pediatric: Cohort,
    pub internal: Cohort,
}

pub fn generate_cohorts(cfg: &CohortsConfig) -> Result<Cohorts> {
    let make = |tag: CohortTag, cc: &CohortConfig| -> Result<Cohort> {
        let mut c = generate_cohort(&CohortSpec::default_for(tag), cc.n, cc.seed)?;
        c.splits = if tag == CohortTag::Internal {
            Splits::all_test(cc.n)
        } else {
            Splits::by_percent(cc.n, cfg.train_pct, cfg.val_pct)
        };
        Ok(c)
    };
    Ok(Cohorts {
        adult: make(CohortTag::Adult, &cfg.adult)?,
        pediatric: make(CohortTag::Pediatric, &cfg.pediatric)?,
        internal: make(CohortTag::Internal, &cfg.internal)?,
    })
}

/// Content hash over case ids and encoded images and labels.
pub fn cohort_hash(cases: &[Case]) -> String {
    let mut h = Sha256::new();
    for c in cases {
        h.update(c.id.as_bytes());
        h.update(psv::encode(&c.volume));
        h.update(psv::encode(&c.labels));
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub strategy: String,
    pub pretrain: String,
    pub plan_hash: String,
    pub plan_file: String,
    pub augmentation: AugmentationPolicy,
    pub schedule: TrainSchedule,
    pub transfer: Option<TransferSpec>,
    pub chosen: Option<GridPoint>,
    pub seed: u64,
    pub transfer_seed: u64,
    /// sha256 of each input cohort split the run touched.
    pub cohort_hashes: BTreeMap<String, String>,
    pub pretrain_reused: bool,
    pub tool_version: String,
    pub wall_time_s: f64,
    pub warnings: Vec<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyEntry {
    pub strategy: String,
    pub ok: bool,
    pub run_dir: PathBuf,
}

/// Index of a finished study, written as `study.json` under the output root.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyIndex {
    pub baseline: String,
    pub entries: Vec<StudyEntry>,
    pub pretrain_runs: usize,
    pub transfer_runs: usize,
}

#[derive(Debug, Clone)]
pub struct StudyOutcome {
    pub root: PathBuf,
    pub manifests: Vec<RunManifest>,
    pub reports: Vec<EvalReport>,
    pub pretrain_runs: usize,
    pub transfer_runs: usize,
    pub table: Option<Table>,
}

impl StudyOutcome {
    pub fn failures(&self) -> Vec<&RunManifest> {
        self.manifests.iter().filter(|m| m.error.is_some()).collect()
    }

    pub fn report(&self, strategy: &str, cohort: CohortTag) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.strategy == strategy && r.cohort == cohort)
    }
}

pub const STUDY_INDEX: &str = "study.json";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_TXT: &str = "report.txt";

fn eval_file(cohort: CohortTag) -> String {
    format!("eval-{cohort}.json")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Everything derived from the cohorts once per study.
struct Shared {
    cohorts: Cohorts,
    plans: BTreeMap<PlanSource, TrainingPlan>,
    hashes: BTreeMap<String, String>,
    organ_names: Vec<String>,
}

impl Shared {
    fn build(cfg: &ExperimentConfig, root: &Path) -> Result<Self> {
        let cohorts = generate_cohorts(&cfg.cohorts)?;
        let adult_train = cohorts.adult.train();
        let ped_train = cohorts.pediatric.train();
        let mixed = merge_balanced(&adult_train, &ped_train, cfg.study.seed)?;
        let mut fingerprints: BTreeMap<PlanSource, DatasetFingerprint> = BTreeMap::new();
        fingerprints.insert(PlanSource::Adult, compute_fingerprint(&adult_train)?);
        fingerprints.insert(PlanSource::Pediatric, compute_fingerprint(&ped_train)?);
        fingerprints.insert(PlanSource::Mixed, compute_fingerprint(&mixed.cases)?);
        let mut plans = BTreeMap::new();
        fs::create_dir_all(root.join("plans"))?;
        fs::create_dir_all(root.join("fingerprints"))?;
        for (&src, fp) in &fingerprints {
            let plan = derive_plan_with_channels(fp, src, cfg.plan.voxel_budget, cfg.plan.base_channels)?;
            fs::write(root.join("plans").join(plan.file_name()), plan.to_json()?)?;
            fs::write(root.join("fingerprints").join(format!("{}.json", src.tag())), fp.to_json()?)?;
            plans.insert(src, plan);
        }
        let mut hashes = BTreeMap::new();
        for (name, cohort) in [("adult", &cohorts.adult), ("pediatric", &cohorts.pediatric), ("internal", &cohorts.internal)] {
            for (split, cases) in [("train", cohort.train()), ("val", cohort.val()), ("test", cohort.test())] {
                if !cases.is_empty() {
                    hashes.insert(format!("{name}/{split}"), cohort_hash(&cases));
                }
            }
        }
        let organ_names = cohorts.adult.spec.organ_names();
        Ok(Shared { cohorts, plans, hashes, organ_names })
    }

    fn learning_set(&self, set: SetSource, seed: u64) -> Result<(Vec<Case>, Vec<Case>)> {
        let (a, p) = (&self.cohorts.adult, &self.cohorts.pediatric);
        Ok(match set {
            SetSource::Adult => (a.train(), a.val()),
            SetSource::Pediatric => (p.train(), p.val()),
            SetSource::Mixed => (
                merge_balanced(&a.train(), &p.train(), seed)?.cases,
                merge_balanced(&a.val(), &p.val(), seed)?.cases,
            ),
        })
    }

    fn hashes_for(&self, keys: &[&str]) -> BTreeMap<String, String> {
        keys.iter().filter_map(|k| self.hashes.get(*k).map(|h| (k.to_string(), h.clone()))).collect()
    }
}

struct Pretrained {
    checkpoint: Checkpoint,
    schedule: TrainSchedule,
    wall_time_s: f64,
}

fn pretrain(cfg: &ExperimentConfig, shared: &Shared, key: PretrainKey, root: &Path) -> Result<Pretrained> {
    let start = Instant::now();
    let plan = &shared.plans[&key.plan];
    let schedule = cfg.pretrain_schedule()?;
    let (train, val) = shared.learning_set(key.set, cfg.study.seed)?;
    let data = TrainSet::prepare(plan, &train, &val, shared.organ_names.len() + 1)?;
    let ctx = RunContext::new(root.join("pretrain").join(key.to_string()), key.to_string(), shared.organ_names.clone());
    let (_, checkpoint) = train_direct(plan, &data, &policy(key.aug), &schedule, cfg.study.seed, &ctx)?;
    Ok(Pretrained { checkpoint, schedule, wall_time_s: start.elapsed().as_secs_f64() })
}

/// Pretrain every distinct key, at most `workers` at a time. Results come
/// back in key order regardless of scheduling.
fn pretrain_all(
    cfg: &ExperimentConfig,
    shared: &Shared,
    keys: &[PretrainKey],
    root: &Path,
) -> Vec<(PretrainKey, Result<Pretrained>)> {
    let mut out = Vec::with_capacity(keys.len());
    for chunk in keys.chunks(cfg.study.workers) {
        let results: Vec<Result<Pretrained>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|&k| s.spawn(move || pretrain(cfg, shared, k, root))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(PsatError::Training("pretraining worker panicked".into()))))
                .collect()
        });
        out.extend(chunk.iter().copied().zip(results));
    }
    out
}

fn evaluate_all(ckpt: &Checkpoint, shared: &Shared, dir: &Path) -> Result<Vec<EvalReport>> {
    let sets = [
        (CohortTag::Adult, shared.cohorts.adult.test()),
        (CohortTag::Pediatric, shared.cohorts.pediatric.test()),
        (CohortTag::Internal, shared.cohorts.internal.test()),
    ];
    let mut reports = Vec::new();
    for (tag, cases) in sets {
        let r = evaluate(ckpt, &cases, tag)?;
        write_json(&dir.join(eval_file(tag)), &r)?;
        reports.push(r);
    }
    Ok(reports)
}

struct StrategyRun {
    manifest: RunManifest,
    reports: Vec<EvalReport>,
    transferred: bool,
}

fn run_strategy(
    cfg: &ExperimentConfig,
    shared: &Shared,
    code: StrategyCode,
    base: std::result::Result<&Pretrained, String>,
    reused: bool,
    run_dir: &Path,
) -> StrategyRun {
    let start = Instant::now();
    let key = code.pretrain_key();
    let plan = &shared.plans[&key.plan];
    let transfer_seed = cfg.study.seed.wrapping_add(1);
    let mut touched = vec!["adult/test", "pediatric/test", "internal/test"];
    touched.extend(match key.set {
        SetSource::Adult => vec!["adult/train", "adult/val"],
        SetSource::Pediatric => vec!["pediatric/train", "pediatric/val"],
        SetSource::Mixed => vec!["adult/train", "adult/val", "pediatric/train", "pediatric/val"],
    });
    if code.transfer != TransferMode::Off {
        touched.extend(["pediatric/train", "pediatric/val"]);
        if code.transfer == TransferMode::Rehearsal {
            touched.push("adult/train");
        }
    }
    touched.sort_unstable();
    touched.dedup();
    let spec = (code.transfer != TransferMode::Off).then(|| cfg.transfer_spec(code.transfer));
    let mut manifest = RunManifest {
        strategy: code.to_string(),
        pretrain: key.to_string(),
        plan_hash: plan.plan_hash.clone(),
        plan_file: format!("plans/{}", plan.file_name()),
        augmentation: policy(key.aug),
        schedule: base.as_ref().map(|b| b.schedule.clone()).unwrap_or_else(|_| TrainSchedule::pretrain_default()),
        transfer: spec.clone(),
        chosen: None,
        seed: cfg.study.seed,
        transfer_seed,
        cohort_hashes: shared.hashes_for(&touched),
        pretrain_reused: reused,
        tool_version: TOOL_VERSION.to_string(),
        wall_time_s: 0.0,
        warnings: code.warnings(),
        error: None,
    };
    for w in &manifest.warnings {
        log::warn!("{w} (manifest: {})", run_dir.join("manifest.json").display());
    }
    let result = (|| -> Result<Vec<EvalReport>> {
        let base = base.clone().map_err(|e| PsatError::Training(format!("pretraining {key} failed: {e}")))?;
        let ctx = RunContext::new(run_dir, code.to_string(), shared.organ_names.clone());
        let spec = spec.unwrap_or_else(|| TransferSpec::scaled(TransferMode::Off, 1, 1));
        let classes = shared.organ_names.len() + 1;
        let ped = shared.cohorts.pediatric.clone();
        let pediatric = if code.transfer == TransferMode::Off {
            TrainSet { train: vec![], val: vec![] }
        } else {
            TrainSet::prepare(plan, &ped.train(), &ped.val(), classes)?
        };
        let adult = if code.transfer == TransferMode::Rehearsal {
            Some(TrainSet::prepare(plan, &shared.cohorts.adult.train(), &[], classes)?)
        } else {
            None
        };
        let (result, ckpt) = transfer(&base.checkpoint, &spec, &pediatric, adult.as_ref(), transfer_seed, &ctx)?;
        manifest.chosen = result.chosen;
        evaluate_all(&ckpt, shared, run_dir)
    })();
    let reports = match result {
        Ok(r) => r,
        Err(e) => {
            log::error!("{code}: {e}");
            manifest.error = Some(e.to_string());
            vec![]
        }
    };
    manifest.wall_time_s = start.elapsed().as_secs_f64()
        + base.as_ref().map(|b| if reused { 0.0 } else { b.wall_time_s }).unwrap_or(0.0);
    StrategyRun { manifest, reports, transferred: code.transfer != TransferMode::Off }
}

/// Run every requested strategy: pretrain each distinct (P, S, A) once,
/// adapt toward pediatric data per transfer mode, evaluate on the adult
/// test, pediatric test and internal cohorts, then render the report.
pub fn run_experiment(cfg: &ExperimentConfig, out_override: Option<&Path>) -> Result<StudyOutcome> {
    cfg.validate()?;
    let root = cfg.output_root(out_override);
    fs::create_dir_all(&root)?;
    fs::write(root.join("config.toml"), cfg.to_toml()?)?;
    let shared = Shared::build(cfg, &root)?;
    let codes = cfg.strategies()?;

    let mut keys: Vec<PretrainKey> = codes.iter().map(|c| c.pretrain_key()).collect();
    keys.sort();
    keys.dedup();
    let pretrained: BTreeMap<PretrainKey, Result<Pretrained>> = pretrain_all(cfg, &shared, &keys, &root).into_iter().collect();

    let mut used: BTreeMap<PretrainKey, bool> = BTreeMap::new();
    let mut manifests = Vec::new();
    let mut reports = Vec::new();
    let mut entries = Vec::new();
    let mut transfer_runs = 0;
    for code in codes {
        let key = code.pretrain_key();
        let reused = used.insert(key, true).is_some();
        let base = pretrained[&key].as_ref().map_err(|e| e.to_string());
        let run_dir = root.join("runs").join(code.to_string());
        let run = run_strategy(cfg, &shared, code, base, reused, &run_dir);
        write_json(&run.manifest.path_in(&run_dir), &run.manifest)?;
        if run.transferred && run.manifest.error.is_none() {
            transfer_runs += 1;
        }
        entries.push(StudyEntry { strategy: code.to_string(), ok: run.manifest.error.is_none(), run_dir });
        manifests.push(run.manifest);
        reports.extend(run.reports);
    }
    let index = StudyIndex {
        baseline: cfg.study.baseline.clone(),
        entries,
        pretrain_runs: pretrained.values().filter(|r| r.is_ok()).count(),
        transfer_runs,
    };
    write_json(&root.join(STUDY_INDEX), &index)?;
    let table = if reports.iter().any(|r| r.strategy == cfg.study.baseline) {
        let t = render_table(&reports, &cfg.study.baseline)?;
        fs::write(root.join(REPORT_CSV), &t.csv)?;
        fs::write(root.join(REPORT_TXT), &t.text)?;
        Some(t)
    } else {
        log::error!("baseline {} produced no reports; no table rendered", cfg.study.baseline);
        None
    };
    Ok(StudyOutcome {
        root,
        manifests,
        reports,
        pretrain_runs: index.pretrain_runs,
        transfer_runs: index.transfer_runs,
        table,
    })
}

impl RunManifest {
    fn path_in(&self, dir: &Path) -> PathBuf {
        dir.join("manifest.json")
    }
}

/// Load the evaluation reports of every completed strategy under `root`,
/// in study order.
pub fn load_reports(root: &Path) -> Result<(StudyIndex, Vec<EvalReport>)> {
    let index_path = root.join(STUDY_INDEX);
    let index: StudyIndex = serde_json::from_slice(
        &fs::read(&index_path).map_err(|e| PsatError::Report(format!("{}: {e}", index_path.display())))?,
    )?;
    let mut reports = Vec::new();
    for e in index.entries.iter().filter(|e| e.ok) {
        for tag in [CohortTag::Adult, CohortTag::Pediatric, CohortTag::Internal] {
            let p = e.run_dir.join(eval_file(tag));
            if p.exists() {
                reports.push(serde_json::from_slice(&fs::read(&p)?)?);
            }
        }
    }
    Ok((index, reports))
}

/// Re-render the comparison table of a finished study against `baseline`.
pub fn report(root: &Path, baseline: &str) -> Result<Table> {
    parse_strategy(baseline)?;
    let (_, reports) = load_reports(root)?;
    if reports.is_empty() {
        return Err(PsatError::Report(format!("no completed strategies under {}", root.display())));
    }
    render_table(&reports, baseline)
}

/// Verify a run directory's recorded cohort hashes against freshly
/// generated cohorts and confirm its checkpoint loads.
pub fn verify_run(run_dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let manifest: RunManifest = serde_json::from_slice(&fs::read(run_dir.join("manifest.json"))?)?;
    let cohorts = generate_cohorts(&cfg.cohorts)?;
    for (key, recorded) in &manifest.cohort_hashes {
        let (name, split) = key.split_once('/').ok_or_else(|| PsatError::Report(format!("bad hash key {key}")))?;
        let cohort = match name {
            "adult" => &cohorts.adult,
            "pediatric" => &cohorts.pediatric,
            "internal" => &cohorts.internal,
            _ => return Err(PsatError::Report(format!("unknown cohort {name}"))),
        };
        let cases = match split {
            "train" => cohort.train(),
            "val" => cohort.val(),
            _ => cohort.test(),
        };
        if &cohort_hash(&cases) != recorded {
            return Err(PsatError::Report(format!("cohort split {key} does not match its recorded hash")));
        }
    }
    if manifest.error.is_none() {
        let ckpt = load_checkpoint(&run_dir.join("model.psc"))?;
        if ckpt.header.plan_hash != manifest.plan_hash {
            return Err(PsatError::Report("checkpoint plan hash differs from the manifest".into()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_variants_parse() {
        let c = parse_strategy("PaSaAdTo").unwrap();
        assert_eq!((c.plan, c.set, c.aug, c.transfer), (PlanSource::Adult, SetSource::Adult, AugKind::Default, TransferMode::Off));
        let c = parse_strategy("PmSaAdTm").unwrap();
        assert_eq!(
            (c.plan, c.set, c.aug, c.transfer),
            (PlanSource::Mixed, SetSource::Adult, AugKind::Default, TransferMode::Rehearsal)
        );
    }

    #[test]
    fn all_codes_round_trip() {
        let all = StrategyCode::all();
        assert_eq!(all.len(), 54);
        let mut seen = std::collections::HashSet::new();
        for c in all {
            let s = c.to_string();
            assert_eq!(parse_strategy(&s).unwrap(), c);
            assert_eq!(parse_strategy(&s).unwrap().to_string(), s);
            assert!(seen.insert(s));
        }
    }

    #[test]
    fn rejections_report_offsets() {
        let offset = |s: &str| match parse_strategy(s) {
            Err(PsatError::Parse { offset, .. }) => offset,
            other => panic!("{s}: {other:?}"),
        };
        assert_eq!(offset("PxSaAdTo"), 1);
        assert_eq!(offset("pasaadto"), 0);
        assert_eq!(offset("PaSaAdTx"), 7);
        assert_eq!(offset("PaSaAd"), 6);
        assert_eq!(offset("PaSaAdToo"), 8);
        assert_eq!(offset("PaXaAdTo"), 2);
        assert_eq!(offset(""), 0);
        assert_eq!(offset("PaSaAeTo"), 5);
    }

    #[test]
    fn warnings_flag_pathological_and_redundant_codes() {
        assert!(parse_strategy("PaSaAdTp").unwrap().warnings().is_empty());
        assert_eq!(parse_strategy("PpSaAdTp").unwrap().warnings().len(), 1);
        assert_eq!(parse_strategy("PpSpAdTm").unwrap().warnings().len(), 2);
        assert!(parse_strategy("PpSpAdTo").unwrap().warnings().is_empty());
    }

    fn minimal_toml() -> &'static str {
        r#"
[study]
strategies = ["PaSaAdTo", "PaSaAdTp"]
baseline = "PaSaAdTo"
seed = 3

[cohorts]
adult = { n = 8, seed = 1 }
pediatric = { n = 8, seed = 2 }
internal = { n = 2, seed = 3 }
"#
    }

    #[test]
    fn config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml(minimal_toml()).unwrap();
        assert_eq!(cfg.plan, PlanConfig::default());
        assert_eq!(cfg.pretrain_schedule().unwrap().epochs, 60);
        let spec = cfg.transfer_spec(TransferMode::Rehearsal);
        assert_eq!(spec.epochs_grid, vec![12, 30]);
        assert_eq!(spec.replay_ratio_grid, PAPER_REPLAY_GRID.to_vec());
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_errors() {
        let bad_code = minimal_toml().replace("PaSaAdTp", "PaSaAdTq");
        assert!(matches!(ExperimentConfig::from_toml(&bad_code), Err(PsatError::Config(_))));
        let bad_base = minimal_toml().replace("baseline = \"PaSaAdTo\"", "baseline = \"PmSmAdTo\"");
        assert!(matches!(ExperimentConfig::from_toml(&bad_base), Err(PsatError::Config(_))));
        let unknown = format!("{}\n[extra]\nx = 1\n", minimal_toml());
        assert!(matches!(ExperimentConfig::from_toml(&unknown), Err(PsatError::Config(_))));
        let tiny = minimal_toml().replace("n = 8, seed = 1", "n = 2, seed = 1");
        assert!(matches!(ExperimentConfig::from_toml(&tiny), Err(PsatError::Config(_))));
    }

    #[test]
    fn epochs_scale_applies_to_both_stages() {
        let text = minimal_toml().replace("seed = 3\n\n", "seed = 3\nepochs_scale = 0.1\n\n");
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(cfg.pretrain_schedule().unwrap().epochs, 6);
        assert_eq!(cfg.transfer_spec(TransferMode::Finetune).epochs_grid, vec![1, 3]);
    }

    #[test]
    fn output_root_precedence() {
        let mut cfg = ExperimentConfig::from_toml(minimal_toml()).unwrap();
        cfg.study.out = Some("from-config".into());
        assert_eq!(cfg.output_root(Some(Path::new("explicit"))), PathBuf::from("explicit"));
        if std::env::var_os(OUT_ENV).is_none() {
            assert_eq!(cfg.output_root(None), PathBuf::from("from-config"));
        }
    }
}
