//! Dice scoring, the Mann-Whitney U test and comparison tables.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{PsatError, Result};
use crate::nnet::Checkpoint;
use crate::train::infer_checkpoint;
use crate::volumes::{Case, CohortTag, LabelMap};

/// Dice of one label value over two equally long label slices; `None` when
/// neither slice contains it.
pub fn mask_dsc(pred: &[u16], truth: &[u16], organ: u16) -> Option<f64> {
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        let (ip, it) = (p == organ, t == organ);
        a += ip as usize;
        b += it as usize;
        both += (ip && it) as usize;
    }
    if a + b == 0 {
        None
    } else {
        Some(2.0 * both as f64 / (a + b) as f64)
    }
}

/// `2|A ∩ B| / (|A| + |B|)` for the masks of `organ_id`. Absent (`None`)
/// when both masks are empty.
pub fn dsc(pred: &LabelMap, truth: &LabelMap, organ_id: u16) -> Result<Option<f64>> {
    if pred.shape() != truth.shape() {
        return Err(PsatError::ShapeMismatch(format!(
            "prediction {:?} vs truth {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    Ok(mask_dsc(pred.data(), truth.data(), organ_id))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// `U = #{x > y} + #{x = y} / 2` over all pairs.
    pub u: f64,
    /// Two-sided p-value.
    pub p: f64,
    pub exact: bool,
}

/// Largest `|xs| * |ys|` handled by the exact null distribution.
pub const EXACT_LIMIT: usize = 400;

fn check_sample(v: &[f64], what: &str) -> Result<()> {
    if v.is_empty() {
        return Err(PsatError::invalid(format!("Mann-Whitney sample `{what}` is empty")));
    }
    if v.iter().any(|x| x.is_nan()) {
        return Err(PsatError::invalid(format!("Mann-Whitney sample `{what}` contains NaN")));
    }
    Ok(())
}

/// Twice the U statistic, an exact integer.
fn doubled_u(xs: &[f64], ys: &[f64]) -> u64 {
    let mut u2 = 0;
    for &x in xs {
        for &y in ys {
            u2 += if x > y {
                2
            } else if x == y {
                1
            } else {
                0
            };
        }
    }
    u2
}

/// Distinct pooled values in ascending order with their multiplicities.
fn tie_groups(xs: &[f64], ys: &[f64]) -> Vec<usize> {
    let mut pooled: Vec<f64> = xs.iter().chain(ys).copied().collect();
    pooled.sort_by(f64::total_cmp);
    let mut groups = Vec::new();
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i + 1;
        while j < pooled.len() && pooled[j] == pooled[i] {
            j += 1;
        }
        groups.push(j - i);
        i = j;
    }
    groups
}

fn binomial_row(n: usize) -> Vec<f64> {
    let mut row = vec![1.0; n + 1];
    for k in 1..n {
        row[k] = row[k - 1] * (n - k + 1) as f64 / k as f64;
        row[k] = row[k].round();
    }
    row
}

/// Null distribution of `2U` over every way of assigning `m` of the pooled
/// values to the first sample, as counts indexed by `2U`. Tied values are
/// handled by assigning a whole group at once, weighted by the binomial
/// number of ways to pick which members go to the first sample.
fn exact_distribution(m: usize, n: usize, groups: &[usize]) -> Vec<f64> {
    let max_u2 = 2 * m * n;
    // table[k][u2]: ways to place k first-sample values so far with that 2U
    let mut table = vec![vec![0.0f64; max_u2 + 1]; m + 1];
    table[0][0] = 1.0;
    let mut seen = 0;
    for &g in groups {
        let binom = binomial_row(g);
        let mut next = vec![vec![0.0f64; max_u2 + 1]; m + 1];
        for k in 0..=m.min(seen) {
            let ys_before = seen - k;
            if ys_before > n {
                continue;
            }
            for (u2, &w) in table[k].iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for j in 0..=g.min(m - k) {
                    let ys_in_group = g - j;
                    if ys_before + ys_in_group > n {
                        continue;
                    }
                    let add = j * (2 * ys_before + ys_in_group);
                    next[k + j][u2 + add] += w * binom[j];
                }
            }
        }
        table = next;
        seen += g;
    }
    table.swap_remove(m)
}

fn exact_p(u2: u64, m: usize, n: usize, groups: &[usize]) -> f64 {
    let dist = exact_distribution(m, n, groups);
    let total: f64 = dist.iter().sum();
    let u2 = u2 as usize;
    let lower: f64 = dist[..=u2].iter().sum();
    let upper: f64 = dist[u2..].iter().sum();
    (2.0 * lower.min(upper) / total).min(1.0)
}

fn normal_p(u2: u64, m: usize, n: usize, groups: &[usize]) -> f64 {
    let (mf, nf) = (m as f64, n as f64);
    let big_n = mf + nf;
    let ties: f64 = groups.iter().map(|&t| (t as f64).powi(3) - t as f64).sum();
    let var = mf * nf / 12.0 * ((big_n + 1.0) - ties / (big_n * (big_n - 1.0)));
    if !(var > 0.0) {
        return 1.0;
    }
    let dev = (u2 as f64 / 2.0 - mf * nf / 2.0).abs();
    let z = ((dev - 0.5).max(0.0)) / var.sqrt();
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    (2.0 * (1.0 - std_normal.cdf(z))).min(1.0)
}

/// Two-sided Mann-Whitney U test of `xs` against `ys`.
///
/// For `|xs| * |ys| <= EXACT_LIMIT` the p-value comes from the exact
/// permutation distribution of U over the pooled values (ties included);
/// larger samples use the normal approximation with tie-corrected variance
/// and a continuity correction.
pub fn mann_whitney(xs: &[f64], ys: &[f64]) -> Result<MannWhitney> {
    check_sample(xs, "xs")?;
    check_sample(ys, "ys")?;
    let (m, n) = (xs.len(), ys.len());
    let u2 = doubled_u(xs, ys);
    let groups = tie_groups(xs, ys);
    let exact = m * n <= EXACT_LIMIT;
    let p = if exact { exact_p(u2, m, n, &groups) } else { normal_p(u2, m, n, &groups) };
    Ok(MannWhitney { u: u2 as f64 / 2.0, p, exact })
}

/// Normal-approximation variant, exposed for comparison against the exact
/// path.
pub fn mann_whitney_normal(xs: &[f64], ys: &[f64]) -> Result<MannWhitney> {
    check_sample(xs, "xs")?;
    check_sample(ys, "ys")?;
    let u2 = doubled_u(xs, ys);
    let p = normal_p(u2, xs.len(), ys.len(), &tie_groups(xs, ys));
    Ok(MannWhitney { u: u2 as f64 / 2.0, p, exact: false })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseScore {
    pub case_id: String,
    /// Per organ, in organ order; `None` when the organ is absent from both
    /// prediction and ground truth.
    pub dsc: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategy: String,
    pub cohort: CohortTag,
    pub organ_names: Vec<String>,
    pub cases: Vec<CaseScore>,
    pub means: Vec<Option<f64>>,
}

impl EvalReport {
    /// Builds a report, computing per-organ means over present scores.
    pub fn new(strategy: impl Into<String>, cohort: CohortTag, organ_names: Vec<String>, cases: Vec<CaseScore>) -> Result<Self> {
        let k = organ_names.len();
        for c in &cases {
            if c.dsc.len() != k {
                return Err(PsatError::Report(format!("case {} has {} scores for {k} organs", c.case_id, c.dsc.len())));
            }
            if let Some(bad) = c.dsc.iter().flatten().find(|d| !(0.0..=1.0).contains(*d)) {
                return Err(PsatError::Report(format!("case {} has DSC {bad} outside [0, 1]", c.case_id)));
            }
        }
        let means = (0..k)
            .map(|o| {
                let present = organ_scores(&cases, o);
                (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
            })
            .collect();
        Ok(EvalReport { strategy: strategy.into(), cohort, organ_names, cases, means })
    }

    /// Present scores of organ index `o` in case order.
    pub fn scores(&self, o: usize) -> Vec<f64> {
        organ_scores(&self.cases, o)
    }

    pub fn organ_index(&self, name: &str) -> Option<usize> {
        self.organ_names.iter().position(|n| n == name)
    }
}

fn organ_scores(cases: &[CaseScore], o: usize) -> Vec<f64> {
    cases.iter().filter_map(|c| c.dsc[o]).collect()
}

/// Score one case's prediction on every organ `1..=organs`.
pub fn score_case(case: &Case, pred: &LabelMap, organs: usize) -> Result<CaseScore> {
    let dsc = (1..=organs).map(|o| dsc(pred, &case.labels, o as u16)).collect::<Result<Vec<_>>>()?;
    Ok(CaseScore { case_id: case.id.clone(), dsc })
}

/// Rejects any case the checkpoint was trained on.
pub fn check_split(train_ids: &[String], cases: &[Case]) -> Result<()> {
    let trained: HashSet<&str> = train_ids.iter().map(String::as_str).collect();
    match cases.iter().find(|c| trained.contains(c.id.as_str())) {
        Some(c) => Err(PsatError::SplitLeak(c.id.clone())),
        None => Ok(()),
    }
}

/// Score an arbitrary predictor; `evaluate` wraps this with checkpoint
/// inference.
pub fn evaluate_with(
    strategy: &str,
    cohort: CohortTag,
    organ_names: &[String],
    cases: &[Case],
    mut predict: impl FnMut(&Case) -> Result<LabelMap>,
) -> Result<EvalReport> {
    let scores = cases
        .iter()
        .map(|case| score_case(case, &predict(case)?, organ_names.len()))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::new(strategy, cohort, organ_names.to_vec(), scores)
}

/// Run inference with `ckpt` on every test case and score it.
pub fn evaluate(ckpt: &Checkpoint, cases: &[Case], cohort: CohortTag) -> Result<EvalReport> {
    check_split(&ckpt.header.train_ids, cases)?;
    evaluate_with(&ckpt.header.strategy, cohort, &ckpt.header.organ_names, cases, |c| infer_checkpoint(ckpt, c))
}

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;
pub const DAGGER: &str = "†";

/// Percent rounded half-up. The small bias absorbs representation error
/// such as `0.665 * 100 = 66.49999...`.
pub fn percent_half_up(v: f64) -> i64 {
    (v * 100.0 + 0.5 + 1e-9).floor() as i64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub text: String,
    pub csv: String,
}

#[derive(Debug, Clone, Copy)]
struct CellStats {
    mean: Option<f64>,
    n: usize,
    p: Option<f64>,
    improved: bool,
}

impl CellStats {
    fn significant(&self) -> bool {
        self.improved && self.p.is_some_and(|p| p < SIGNIFICANCE_LEVEL)
    }
}

fn cell_stats(report: &EvalReport, baseline: Option<&EvalReport>, o: usize) -> Result<CellStats> {
    let mean = report.means[o];
    let scores = report.scores(o);
    let mut stats = CellStats { mean, n: scores.len(), p: None, improved: false };
    let Some(base) = baseline else { return Ok(stats) };
    if base.strategy == report.strategy {
        return Ok(stats);
    }
    let base_scores = base.scores(o);
    if scores.is_empty() || base_scores.is_empty() {
        return Ok(stats);
    }
    stats.p = Some(mann_whitney(&scores, &base_scores)?.p);
    stats.improved = matches!((mean, base.means[o]), (Some(a), Some(b)) if a > b);
    Ok(stats)
}

/// Table with one row per strategy and one column per organ. Each cell
/// joins the per-cohort mean DSC percentages with "/" in cohort order
/// (adult, pediatric, internal), marks significant improvements over the
/// baseline strategy with a dagger and shows absent organs as "-".
pub fn render_table(reports: &[EvalReport], baseline: &str) -> Result<Table> {
    let first = reports.first().ok_or_else(|| PsatError::Report("no reports to render".into()))?;
    let organs = &first.organ_names;
    if let Some(r) = reports.iter().find(|r| &r.organ_names != organs) {
        return Err(PsatError::Report(format!(
            "report {} ({}) has organs {:?}, expected {:?}",
            r.strategy, r.cohort, r.organ_names, organs
        )));
    }
    if !reports.iter().any(|r| r.strategy == baseline) {
        return Err(PsatError::Report(format!("baseline strategy {baseline} has no report")));
    }
    let mut strategies: Vec<&str> = Vec::new();
    let mut by_key: BTreeMap<(&str, CohortTag), &EvalReport> = BTreeMap::new();
    for r in reports {
        if !strategies.contains(&r.strategy.as_str()) {
            strategies.push(&r.strategy);
        }
        if by_key.insert((r.strategy.as_str(), r.cohort), r).is_some() {
            return Err(PsatError::Report(format!("duplicate report for {} on {}", r.strategy, r.cohort)));
        }
    }
    let mut cohorts: Vec<CohortTag> = reports.iter().map(|r| r.cohort).collect();
    cohorts.sort();
    cohorts.dedup();

    let mut csv = String::from("strategy,cohort,organ,mean_dsc,n_cases,p_value,significant\n");
    let mut rows: Vec<Vec<String>> = Vec::new();
    for &s in &strategies {
        let mut row = vec![s.to_string()];
        for (o, organ) in organs.iter().enumerate() {
            let mut parts = Vec::new();
            for &c in &cohorts {
                let Some(report) = by_key.get(&(s, c)) else {
                    parts.push("-".to_string());
                    continue;
                };
                let stats = cell_stats(report, by_key.get(&(baseline, c)).copied(), o)?;
                let mut cell = stats.mean.map_or("-".to_string(), |m| percent_half_up(m).to_string());
                if stats.significant() {
                    cell.push_str(DAGGER);
                }
                parts.push(cell);
                writeln!(
                    csv,
                    "{s},{c},{organ},{},{},{},{}",
                    stats.mean.map_or(String::new(), |m| format!("{m:.6}")),
                    stats.n,
                    stats.p.map_or(String::new(), |p| format!("{p:.6e}")),
                    stats.significant()
                )
                .expect("write to string");
            }
            row.push(parts.join("/"));
        }
        rows.push(row);
    }

    let mut header = vec!["Strategy".to_string()];
    header.extend(organs.iter().cloned());
    let widths: Vec<usize> = (0..header.len())
        .map(|i| rows.iter().map(|r| r[i].chars().count()).chain([header[i].chars().count()]).max().unwrap_or(0))
        .collect();
    let fmt_row = |cells: &[String]| -> String {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        padded.join(" | ").trim_end().to_string()
    };
    let cohort_names: Vec<&str> = cohorts.iter().map(|c| c.as_str()).collect();
    let mut text = format!(
        "DSC (%) per organ, cells {}; {DAGGER} = p < {SIGNIFICANCE_LEVEL} improvement over {baseline}\n",
        cohort_names.join("/")
    );
    text.push_str(&fmt_row(&header));
    text.push('\n');
    text.push_str(&widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("-+-"));
    text.push('\n');
    for r in &rows {
        text.push_str(&fmt_row(r));
        text.push('\n');
    }
    Ok(Table { text, csv })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volumes::Spacing;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cube(shape: [usize; 3], origin: [usize; 3], side: usize, label: u16) -> LabelMap {
        let mut m = LabelMap::filled(shape, Spacing::isotropic(1.0).unwrap(), 0).unwrap();
        for z in origin[0]..origin[0] + side {
            for y in origin[1]..origin[1] + side {
                for x in origin[2]..origin[2] + side {
                    m.set(z, y, x, label);
                }
            }
        }
        m
    }

    #[test]
    fn dsc_identity_disjoint_and_shifted_cube() {
        let a = cube([6, 6, 6], [1, 1, 1], 2, 1);
        assert_eq!(dsc(&a, &a, 1).unwrap(), Some(1.0));
        let far = cube([6, 6, 6], [4, 4, 4], 2, 1);
        assert_eq!(dsc(&a, &far, 1).unwrap(), Some(0.0));
        let shifted = cube([6, 6, 6], [1, 1, 2], 2, 1);
        assert_eq!(dsc(&a, &shifted, 1).unwrap(), Some(0.5));
        assert_eq!(dsc(&a, &a, 2).unwrap(), None);
        let empty = LabelMap::filled([6, 6, 6], Spacing::isotropic(1.0).unwrap(), 0).unwrap();
        assert_eq!(dsc(&a, &empty, 1).unwrap(), Some(0.0));
        let other = LabelMap::filled([6, 6, 5], Spacing::isotropic(1.0).unwrap(), 0).unwrap();
        assert!(dsc(&a, &other, 1).is_err());
    }

    #[test]
    fn dsc_symmetric_and_matches_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sp = Spacing::isotropic(1.0).unwrap();
        for _ in 0..100 {
            let a: Vec<u16> = (0..512).map(|_| rng.gen_range(0..3)).collect();
            let b: Vec<u16> = (0..512).map(|_| rng.gen_range(0..3)).collect();
            let (ma, mb) = (LabelMap::new([8, 8, 8], sp, a.clone()).unwrap(), LabelMap::new([8, 8, 8], sp, b.clone()).unwrap());
            let inter = a.iter().zip(&b).filter(|(x, y)| **x == 1 && **y == 1).count();
            let na = a.iter().filter(|&&x| x == 1).count();
            let nb = b.iter().filter(|&&x| x == 1).count();
            let expect = 2.0 * inter as f64 / (na + nb) as f64;
            assert_eq!(dsc(&ma, &mb, 1).unwrap(), Some(expect));
            assert_eq!(dsc(&mb, &ma, 1).unwrap(), Some(expect));
        }
    }

    #[test]
    fn mw_small_exact_case() {
        let r = mann_whitney(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(r.u, 0.0);
        assert!(r.exact);
        assert!((r.p - 1.0 / 3.0).abs() < 1e-15);
        let r = mann_whitney(&[3.0, 4.0], &[1.0, 2.0]).unwrap();
        assert_eq!(r.u, 4.0);
        assert!((r.p - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn mw_identical_samples_have_no_evidence() {
        let xs = [0.1, 0.5, 0.5, 0.9, 0.3];
        assert!(mann_whitney(&xs, &xs).unwrap().p >= 0.99);
        let big: Vec<f64> = (0..30).map(|i| i as f64 / 7.0).collect();
        assert!(mann_whitney(&big, &big).unwrap().p >= 0.99);
    }

    #[test]
    fn mw_full_separation_twenty_each() {
        let xs: Vec<f64> = (0..20).map(|i| 10.0 + i as f64).collect();
        let ys: Vec<f64> = (0..20).map(|i| i as f64 / 4.0).collect();
        let r = mann_whitney(&xs, &ys).unwrap();
        assert_eq!(r.u, 400.0);
        assert!(r.exact && r.p < 1e-9);
        let approx = mann_whitney_normal(&xs, &ys).unwrap();
        assert!(approx.p < 0.05);
        // above the switchover the approximation is used
        let xs21: Vec<f64> = (0..21).map(|i| 10.0 + i as f64).collect();
        let r = mann_whitney(&xs21, &ys).unwrap();
        assert!(!r.exact && r.p < 0.05);
    }

    #[test]
    fn mw_all_tied_is_uninformative() {
        let r = mann_whitney(&[0.0; 3], &[0.0; 4]).unwrap();
        assert_eq!(r.u, 6.0);
        assert_eq!(r.p, 1.0);
        assert_eq!(mann_whitney_normal(&[0.0; 30], &[0.0; 30]).unwrap().p, 1.0);
    }

    #[test]
    fn mw_rejects_empty_and_nan() {
        assert!(mann_whitney(&[], &[1.0]).is_err());
        assert!(mann_whitney(&[1.0], &[]).is_err());
        assert!(mann_whitney(&[f64::NAN], &[1.0]).is_err());
    }

    #[test]
    fn exact_distribution_sums_to_binomial() {
        let d = exact_distribution(3, 4, &[1; 7]);
        assert_eq!(d.iter().sum::<f64>(), 35.0);
        let d = exact_distribution(2, 3, &[2, 1, 2]);
        assert_eq!(d.iter().sum::<f64>(), 10.0);
    }

    fn report(strategy: &str, cohort: CohortTag, rows: &[[Option<f64>; 2]]) -> EvalReport {
        let cases = rows
            .iter()
            .enumerate()
            .map(|(i, r)| CaseScore { case_id: format!("c{i}"), dsc: r.to_vec() })
            .collect();
        EvalReport::new(strategy, cohort, vec!["A".into(), "B".into()], cases).unwrap()
    }

    #[test]
    fn report_means_skip_absent_scores() {
        let r = report("X", CohortTag::Adult, &[[Some(0.5), None], [Some(1.0), None]]);
        assert_eq!(r.means, vec![Some(0.75), None]);
        assert!(EvalReport::new("X", CohortTag::Adult, vec!["A".into()], vec![CaseScore { case_id: "c".into(), dsc: vec![Some(1.5)] }]).is_err());
    }

    /// Table rows below the legend, header and rule lines.
    fn body(t: &Table) -> Vec<&str> {
        t.text.lines().skip(3).collect()
    }

    #[test]
    fn table_daggers_only_for_significant_improvement() {
        let ones: Vec<[Option<f64>; 2]> = vec![[Some(1.0), Some(1.0)]; 20];
        let zeros: Vec<[Option<f64>; 2]> = vec![[Some(0.0), None]; 20];
        let reports = vec![report("Base", CohortTag::Adult, &zeros), report("Good", CohortTag::Adult, &ones)];
        let t = render_table(&reports, "Base").unwrap();
        let rows = body(&t);
        assert!(rows[1].starts_with("Good"));
        assert!(rows[1].contains(&format!("100{DAGGER}")));
        assert!(rows[0].contains(" 0") && rows[0].contains('-') && !rows[0].contains(DAGGER));
        // reversed baseline: worse reports never get a dagger
        let t = render_table(&reports, "Good").unwrap();
        assert!(!body(&t).concat().contains(DAGGER));
        assert_eq!(t.csv.lines().count(), 1 + 2 * 2);
    }

    #[test]
    fn table_self_baseline_and_identical_reports_have_no_daggers() {
        let rows: Vec<[Option<f64>; 2]> = (0..10).map(|i| [Some(i as f64 / 10.0), Some(0.5)]).collect();
        let a = report("A", CohortTag::Adult, &rows);
        assert!(!body(&render_table(std::slice::from_ref(&a), "A").unwrap()).concat().contains(DAGGER));
        let b = report("B", CohortTag::Adult, &rows);
        assert!(!body(&render_table(&[a, b], "A").unwrap()).concat().contains(DAGGER));
    }

    #[test]
    fn table_cells_join_cohorts_half_up() {
        let r = vec![
            report("S", CohortTag::Adult, &[[Some(0.915), Some(0.5)]]),
            report("S", CohortTag::Pediatric, &[[Some(0.655), Some(0.5)]]),
            report("S", CohortTag::Internal, &[[Some(0.664), Some(0.5)]]),
        ];
        let t = render_table(&r, "S").unwrap();
        assert!(body(&t)[0].contains("92/66/66"), "{}", t.text);
    }

    #[test]
    fn table_errors() {
        let a = report("A", CohortTag::Adult, &[[Some(1.0), None]]);
        assert!(render_table(std::slice::from_ref(&a), "Z").is_err());
        let mut b = report("B", CohortTag::Adult, &[[Some(1.0), None]]);
        b.organ_names[1] = "C".into();
        assert!(render_table(&[a, b], "A").is_err());
        assert!(render_table(&[], "A").is_err());
    }

    #[test]
    fn percent_rounding() {
        assert_eq!(percent_half_up(0.665), 67);
        assert_eq!(percent_half_up(0.6649), 66);
        assert_eq!(percent_half_up(0.005), 1);
        assert_eq!(percent_half_up(1.0), 100);
    }
}
