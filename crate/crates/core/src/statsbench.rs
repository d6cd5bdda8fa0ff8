//! Seeded multi-run study presets and the directional trend assertions
//! checked against them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{PsatError, Result};
use crate::eval::EvalReport;
use crate::orchestrator::{
    load_reports, parse_strategy, run_experiment, CohortConfig, CohortsConfig, ExperimentConfig, PlanConfig,
    PretrainConfig, StudyConfig, TransferConfig,
};
use crate::phantom::SMALL_ORGANS;
use crate::volumes::CohortTag;

/// How the per-seed difference `DSC(better) - DSC(worse)` is judged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    /// `diff >= margin` with `margin > 0`.
    Exceeds { margin: f64 },
    /// `diff >= -tolerance` with `tolerance >= 0`: `better` is no more than
    /// `tolerance` points below `worse`.
    NotBelow { tolerance: f64 },
}

impl Comparison {
    fn holds(&self, diff: f64) -> bool {
        match *self {
            Comparison::Exceeds { margin } => diff >= margin,
            Comparison::NotBelow { tolerance } => diff >= -tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendAssertion {
    pub name: String,
    pub better: String,
    pub worse: String,
    pub cohort: CohortTag,
    /// Organs averaged per seed; empty means every organ.
    pub organs: Vec<String>,
    pub comparison: Comparison,
    pub seeds: Vec<u64>,
    pub required_fraction: f64,
}

impl TrendAssertion {
    pub fn validate(&self) -> Result<()> {
        parse_strategy(&self.better)?;
        parse_strategy(&self.worse)?;
        match self.comparison {
            Comparison::Exceeds { margin } if !(margin > 0.0) => {
                return Err(PsatError::invalid(format!("{}: margin must be positive", self.name)))
            }
            Comparison::NotBelow { tolerance } if !(tolerance >= 0.0) => {
                return Err(PsatError::invalid(format!("{}: tolerance must be non-negative", self.name)))
            }
            _ => {}
        }
        if self.seeds.len() < 3 {
            return Err(PsatError::invalid(format!("{}: trend assertions need at least 3 seeds", self.name)));
        }
        if !(self.required_fraction > 0.0 && self.required_fraction <= 1.0) {
            return Err(PsatError::invalid(format!("{}: required fraction must lie in (0, 1]", self.name)));
        }
        Ok(())
    }
}

/// A study configuration replicated over seeds plus its assertions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub name: String,
    pub base: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub assertions: Vec<TrendAssertion>,
}

/// Strategies the trend assertions compare; three distinct pretrainings.
pub const TREND_CODES: [&str; 5] = ["PaSaAdTo", "PaSaAcTo", "PmSmAdTo", "PaSaAdTp", "PaSaAdTm"];

impl Preset {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        let codes: Vec<String> = self.base.strategies()?.iter().map(|c| c.to_string()).collect();
        for a in &self.assertions {
            a.validate()?;
            for code in [&a.better, &a.worse] {
                if !codes.contains(code) {
                    return Err(PsatError::Config(format!("{} names {code}, which is not in the study matrix", a.name)));
                }
            }
            if let Some(s) = a.seeds.iter().find(|s| !self.seeds.contains(s)) {
                return Err(PsatError::Config(format!("{} uses seed {s}, which the preset does not run", a.name)));
            }
        }
        Ok(())
    }

    /// The configuration run for one seed. Cohorts are regenerated per
    /// seed so replicates differ in data as well as initialisation.
    pub fn config_for_seed(&self, seed: u64) -> ExperimentConfig {
        let mut cfg = self.base.clone();
        cfg.study.seed = seed;
        let c = &mut cfg.cohorts;
        for cc in [&mut c.adult, &mut c.pediatric, &mut c.internal] {
            cc.seed = cc.seed.wrapping_add(seed.wrapping_mul(1000));
        }
        cfg
    }

    pub fn by_name(name: &str) -> Result<Preset> {
        match name {
            "trends" => Ok(trends_preset()),
            _ => Err(PsatError::Config(format!("unknown preset `{name}` (available: trends)"))),
        }
    }
}

/// Default trend preset: five strategies, three seeds, desk-scale budgets
/// sized for a two-hour single-core run at 32^3 patches.
pub fn trends_preset() -> Preset {
    let seeds = vec![1, 2, 3];
    let small: Vec<String> = SMALL_ORGANS.iter().map(|s| s.to_string()).collect();
    let assertion = |name: &str, better: &str, worse: &str, cohort, organs: &[String], comparison| TrendAssertion {
        name: name.into(),
        better: better.into(),
        worse: worse.into(),
        cohort,
        organs: organs.to_vec(),
        comparison,
        seeds: seeds.clone(),
        required_fraction: 2.0 / 3.0,
    };
    let base = ExperimentConfig {
        study: StudyConfig {
            strategies: TREND_CODES.iter().map(|s| s.to_string()).collect(),
            baseline: "PaSaAdTo".into(),
            seed: 0,
            epochs_scale: 1.0,
            workers: 1,
            out: None,
        },
        cohorts: CohortsConfig {
            adult: CohortConfig { n: 20, seed: 101 },
            pediatric: CohortConfig { n: 30, seed: 102 },
            internal: CohortConfig { n: 8, seed: 103 },
            train_pct: 60,
            val_pct: 10,
        },
        plan: PlanConfig { voxel_budget: 32_768, base_channels: 4 },
        pretrain: PretrainConfig { epochs: 36, steps_per_epoch: 30, lr0: 3e-3, lr_end: 1e-5, val_every: 6 },
        transfer: TransferConfig {
            epochs_grid: Some(vec![15]),
            lr0_grid: vec![1e-3],
            replay_ratio_grid: vec![1.0],
            steps_per_epoch: 30,
            val_every: 5,
        },
    };
    Preset {
        name: "trends".into(),
        base,
        seeds: seeds.clone(),
        assertions: vec![
            assertion(
                "contraction_gain",
                "PaSaAcTo",
                "PaSaAdTo",
                CohortTag::Pediatric,
                &small,
                Comparison::Exceeds { margin: 5.0 },
            ),
            assertion(
                "finetune_forgetting",
                "PaSaAdTo",
                "PaSaAdTp",
                CohortTag::Adult,
                &small,
                Comparison::Exceeds { margin: 20.0 },
            ),
            assertion(
                "rehearsal_retention",
                "PaSaAdTm",
                "PaSaAdTo",
                CohortTag::Adult,
                &small,
                Comparison::NotBelow { tolerance: 10.0 },
            ),
            assertion(
                "shift_robustness",
                "PmSmAdTo",
                "PaSaAdTo",
                CohortTag::Internal,
                &[],
                Comparison::NotBelow { tolerance: 0.0 },
            ),
        ],
    }
}

/// Mean DSC in points over `organs` (all organs when empty), skipping
/// organs absent from every case.
pub fn subset_mean(report: &EvalReport, organs: &[String]) -> Result<Option<f64>> {
    let idx: Vec<usize> = if organs.is_empty() {
        (0..report.organ_names.len()).collect()
    } else {
        organs
            .iter()
            .map(|o| report.organ_index(o).ok_or_else(|| PsatError::Report(format!("report has no organ {o}"))))
            .collect::<Result<_>>()?
    };
    let present: Vec<f64> = idx.iter().filter_map(|&i| report.means[i]).collect();
    Ok((!present.is_empty()).then(|| 100.0 * present.iter().sum::<f64>() / present.len() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub better: Option<f64>,
    pub worse: Option<f64>,
    pub diff: Option<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssertionOutcome {
    pub assertion: TrendAssertion,
    pub seeds: Vec<SeedOutcome>,
    pub mean_diff: Option<f64>,
    pub pass_fraction: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendVerdict {
    pub preset: String,
    pub outcomes: Vec<AssertionOutcome>,
    pub all_passed: bool,
}

impl TrendVerdict {
    pub fn outcome(&self, name: &str) -> Option<&AssertionOutcome> {
        self.outcomes.iter().find(|o| o.assertion.name == name)
    }

    pub fn render(&self) -> String {
        let mut s = format!("trend preset `{}`\n", self.preset);
        for o in &self.outcomes {
            let diffs: Vec<String> =
                o.seeds.iter().map(|r| r.diff.map_or("n/a".into(), |d| format!("{d:+.1}"))).collect();
            writeln!(
                s,
                "{} {:<22} {} vs {} on {}: diffs [{}], {:.0}% of seeds (need {:.0}%)",
                if o.passed { "PASS" } else { "FAIL" },
                o.assertion.name,
                o.assertion.better,
                o.assertion.worse,
                o.assertion.cohort,
                diffs.join(", "),
                100.0 * o.pass_fraction,
                100.0 * o.assertion.required_fraction
            )
            .expect("write to string");
        }
        writeln!(s, "overall: {}", if self.all_passed { "PASS" } else { "FAIL" }).expect("write to string");
        s
    }
}

/// Completed evaluation reports per seed.
pub type SeedReports = BTreeMap<u64, Vec<EvalReport>>;

fn find<'a>(reports: &'a [EvalReport], strategy: &str, cohort: CohortTag) -> Option<&'a EvalReport> {
    reports.iter().find(|r| r.strategy == strategy && r.cohort == cohort)
}

/// Judge every assertion against completed runs. Missing runs are an error
/// listing each absent strategy/seed pair.
pub fn run_trends(preset: &Preset, results: &SeedReports) -> Result<TrendVerdict> {
    let mut missing = Vec::new();
    for a in &preset.assertions {
        for &seed in &a.seeds {
            for code in [&a.better, &a.worse] {
                let present = results.get(&seed).is_some_and(|r| find(r, code, a.cohort).is_some());
                let label = format!("{code}/seed {seed}/{}", a.cohort);
                if !present && !missing.contains(&label) {
                    missing.push(label);
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(PsatError::Report(format!("missing runs: {}", missing.join(", "))));
    }
    let mut outcomes = Vec::new();
    for a in &preset.assertions {
        let mut seeds = Vec::new();
        for &seed in &a.seeds {
            let reports = &results[&seed];
            let better = subset_mean(find(reports, &a.better, a.cohort).expect("checked"), &a.organs)?;
            let worse = subset_mean(find(reports, &a.worse, a.cohort).expect("checked"), &a.organs)?;
            let diff = better.zip(worse).map(|(b, w)| b - w);
            let pass = diff.is_some_and(|d| a.comparison.holds(d));
            seeds.push(SeedOutcome { seed, better, worse, diff, pass });
        }
        let diffs: Vec<f64> = seeds.iter().filter_map(|s| s.diff).collect();
        let mean_diff = (!diffs.is_empty()).then(|| diffs.iter().sum::<f64>() / diffs.len() as f64);
        let pass_fraction = seeds.iter().filter(|s| s.pass).count() as f64 / seeds.len() as f64;
        let passed = pass_fraction >= a.required_fraction - 1e-12;
        outcomes.push(AssertionOutcome { assertion: a.clone(), seeds, mean_diff, pass_fraction, passed });
    }
    let all_passed = outcomes.iter().all(|o| o.passed);
    Ok(TrendVerdict { preset: preset.name.clone(), outcomes, all_passed })
}

pub fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed-{seed}"))
}

pub const VERDICT_JSON: &str = "trends.json";
pub const VERDICT_TXT: &str = "trends.txt";

#[derive(Debug, Clone)]
pub struct MatrixOutcome {
    pub results: SeedReports,
    pub wall_time_s: f64,
    pub failed_runs: Vec<String>,
}

/// Run the preset's study once per seed under `root/seed-<n>`.
pub fn run_matrix(preset: &Preset, root: &Path) -> Result<MatrixOutcome> {
    preset.validate()?;
    let start = Instant::now();
    let mut results = SeedReports::new();
    let mut failed_runs = Vec::new();
    for &seed in &preset.seeds {
        let t = Instant::now();
        let cfg = preset.config_for_seed(seed);
        let out = run_experiment(&cfg, Some(&seed_dir(root, seed)))?;
        failed_runs.extend(out.failures().iter().map(|m| format!("{}/seed {seed}", m.strategy)));
        log::info!("seed {seed} finished in {:.0}s", t.elapsed().as_secs_f64());
        results.insert(seed, out.reports);
    }
    Ok(MatrixOutcome { results, wall_time_s: start.elapsed().as_secs_f64(), failed_runs })
}

/// Reload the per-seed reports of a previously run preset.
pub fn load_matrix(preset: &Preset, root: &Path) -> Result<SeedReports> {
    let mut results = SeedReports::new();
    for &seed in &preset.seeds {
        let dir = seed_dir(root, seed);
        if dir.join(crate::orchestrator::STUDY_INDEX).exists() {
            results.insert(seed, load_reports(&dir)?.1);
        }
    }
    Ok(results)
}

/// Run the matrix, judge the trends and write `trends.json` / `trends.txt`.
pub fn run_preset(preset: &Preset, root: &Path) -> Result<(TrendVerdict, MatrixOutcome)> {
    let matrix = run_matrix(preset, root)?;
    let verdict = run_trends(preset, &matrix.results)?;
    fs::create_dir_all(root)?;
    fs::write(root.join(VERDICT_JSON), serde_json::to_string_pretty(&verdict)?)?;
    fs::write(root.join(VERDICT_TXT), verdict.render())?;
    Ok((verdict, matrix))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::CaseScore;

    fn report(strategy: &str, cohort: CohortTag, score: f64) -> EvalReport {
        let names: Vec<String> = ["Live", "Sple", "Kidn", "Tube", "Blad", "Pros"].iter().map(|s| s.to_string()).collect();
        let cases = (0..3)
            .map(|i| CaseScore { case_id: format!("c{i}"), dsc: vec![Some(score); names.len()] })
            .collect();
        EvalReport::new(strategy, cohort, names, cases).unwrap()
    }

    fn results(scores: &[(&str, CohortTag, [f64; 3])]) -> SeedReports {
        let mut out = SeedReports::new();
        for (i, seed) in [1u64, 2, 3].into_iter().enumerate() {
            out.insert(seed, scores.iter().map(|(s, c, v)| report(s, *c, v[i])).collect());
        }
        out
    }

    fn full(adjust: impl Fn(&str, CohortTag) -> [f64; 3]) -> SeedReports {
        let mut rows = Vec::new();
        for code in TREND_CODES {
            for c in [CohortTag::Adult, CohortTag::Pediatric, CohortTag::Internal] {
                rows.push((code, c, adjust(code, c)));
            }
        }
        results(&rows)
    }

    #[test]
    fn preset_is_consistent() {
        let p = trends_preset();
        p.validate().unwrap();
        assert_eq!(p.base.strategies().unwrap().len(), TREND_CODES.len());
        assert!(p.seeds.len() >= 3);
        let c1 = p.config_for_seed(1);
        let c2 = p.config_for_seed(2);
        assert_ne!(c1.cohorts.adult.seed, c2.cohorts.adult.seed);
    }

    #[test]
    fn all_trends_pass_on_synthetic_scores() {
        let r = full(|code, c| match (code, c) {
            ("PaSaAcTo", CohortTag::Pediatric) => [0.7, 0.7, 0.5],
            ("PaSaAdTp", CohortTag::Adult) => [0.2, 0.2, 0.2],
            ("PaSaAdTm", CohortTag::Adult) => [0.55, 0.55, 0.55],
            ("PmSmAdTo", CohortTag::Internal) => [0.6, 0.6, 0.6],
            _ => [0.6, 0.6, 0.6],
        });
        let v = run_trends(&trends_preset(), &r).unwrap();
        assert!(v.all_passed, "{}", v.render());
        let gain = v.outcome("contraction_gain").unwrap();
        assert!((gain.pass_fraction - 2.0 / 3.0).abs() < 1e-12);
        assert!((gain.seeds[0].diff.unwrap() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn failures_are_reported() {
        let r = full(|code, c| match (code, c) {
            ("PaSaAdTm", CohortTag::Adult) => [0.3, 0.3, 0.3],
            _ => [0.6, 0.6, 0.6],
        });
        let v = run_trends(&trends_preset(), &r).unwrap();
        assert!(!v.all_passed);
        assert!(!v.outcome("contraction_gain").unwrap().passed);
        assert!(!v.outcome("rehearsal_retention").unwrap().passed);
        assert!(v.outcome("shift_robustness").unwrap().passed);
        assert!(v.render().contains("FAIL contraction_gain"));
    }

    #[test]
    fn self_comparison_with_positive_margin_fails() {
        let mut p = trends_preset();
        p.assertions = vec![TrendAssertion {
            name: "self".into(),
            better: "PaSaAdTo".into(),
            worse: "PaSaAdTo".into(),
            cohort: CohortTag::Adult,
            organs: vec![],
            comparison: Comparison::Exceeds { margin: 1.0 },
            seeds: vec![1, 2, 3],
            required_fraction: 2.0 / 3.0,
        }];
        let v = run_trends(&p, &full(|_, _| [0.5, 0.6, 0.7])).unwrap();
        let o = v.outcome("self").unwrap();
        assert!(o.seeds.iter().all(|s| s.diff == Some(0.0)));
        assert!(!o.passed);
    }

    #[test]
    fn missing_runs_are_listed() {
        let mut r = full(|_, _| [0.5; 3]);
        r.get_mut(&2).unwrap().retain(|x| x.strategy != "PaSaAdTp");
        match run_trends(&trends_preset(), &r) {
            Err(PsatError::Report(msg)) => assert!(msg.contains("PaSaAdTp/seed 2/adult"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_assertions_rejected() {
        let mut p = trends_preset();
        p.assertions[0].seeds = vec![1, 2];
        assert!(p.validate().is_err());
        let mut p = trends_preset();
        p.assertions[0].comparison = Comparison::Exceeds { margin: 0.0 };
        assert!(p.validate().is_err());
        let mut p = trends_preset();
        p.assertions[0].better = "PpSaAdTo".into();
        assert!(p.validate().is_err());
    }

    #[test]
    fn subset_mean_skips_absent_organs() {
        let mut r = report("PaSaAdTo", CohortTag::Adult, 0.5);
        r.means[5] = None;
        let m = subset_mean(&r, &["Blad".into(), "Pros".into()]).unwrap().unwrap();
        assert!((m - 50.0).abs() < 1e-12);
        assert!(subset_mean(&r, &["Nope".into()]).is_err());
    }
}
