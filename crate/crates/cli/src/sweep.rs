//! Sweeps over erased-area levels and erasure schemes, with summary tables.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use relab_core::metrics::{percent, Delta, MetricsReport};
use relab_core::{ErasePolicy, Error as CoreError, Scheme};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, SweepMode};
use crate::pipeline::{run_pipeline, RunOutcome, Stage};
use crate::store::{write_atomic, Store};

/// One line of `summary.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub policy: String,
    /// Swept area fraction or concealment level; 0 is the undefended model.
    pub value: f64,
    pub a_lo: f64,
    pub a_hi: f64,
    pub ee_fraction: f64,
    pub seed: u64,
    pub acc: f64,
    pub att_acc: f64,
    pub att_acc_ci: f64,
    pub knn_dist: f64,
    pub delta: Option<f64>,
    pub delta_flag: Option<String>,
    pub ffd: f64,
    pub hull_iou_recon_priv: Option<f64>,
    pub hull_iou_recon_re: Option<f64>,
    pub hull_iou_re_priv: Option<f64>,
    pub run_dir: PathBuf,
}

impl SummaryRow {
    fn new(label: &str, value: f64, policy: &ErasePolicy, outcome: &RunOutcome) -> Result<Self> {
        let m: &MetricsReport = outcome.metrics.as_ref().context("run finished without metrics")?;
        Ok(SummaryRow {
            policy: label.to_string(),
            value,
            a_lo: policy.a_lo,
            a_hi: policy.a_hi,
            ee_fraction: policy.ee_fraction,
            seed: outcome.seed,
            acc: m.acc,
            att_acc: m.att_acc,
            att_acc_ci: m.att_acc_ci,
            knn_dist: m.knn_dist,
            delta: m.delta,
            delta_flag: m.delta_flag.clone(),
            ffd: m.ffd,
            hull_iou_recon_priv: m.hull_iou_recon_priv,
            hull_iou_recon_re: m.hull_iou_recon_re,
            hull_iou_re_priv: m.hull_iou_re_priv,
            run_dir: outcome.run_dir.clone(),
        })
    }
}

pub fn write_summary(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    write_atomic(path, &w.into_inner().context("flushing summary")?)
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    r.deserialize().map(|row| Ok(row?)).collect()
}

/// Median; the mean of the middle pair for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Policy for a sweep value: 0 is no defense, otherwise the base scheme with
/// its area fixed at `value` (point) or drawn from `[base.a_lo, value]` (range).
pub fn sweep_policy(base: &ErasePolicy, mode: SweepMode, value: f64) -> Result<ErasePolicy> {
    if value == 0.0 {
        return Ok(ErasePolicy::no_defense().with_fill(base.fill.clone()));
    }
    let scheme = match base.scheme {
        Scheme::RandomErase | Scheme::FixedErase | Scheme::MultiPatch => base.scheme,
        _ => Scheme::RandomErase,
    };
    let lo = match mode {
        SweepMode::Point => value,
        SweepMode::Range => base.a_lo,
    };
    if lo > value {
        return Err(CoreError::Config(format!("sweep value {value} is below the range floor {lo}")).into());
    }
    let p = ErasePolicy {
        scheme,
        a_lo: lo,
        a_hi: value,
        ..base.clone()
    };
    p.validate()?;
    Ok(p)
}

/// Policy of `scheme` at concealment `level`; 0 is no defense.
pub fn scheme_policy(base: &ErasePolicy, scheme: Scheme, level: f64) -> Result<ErasePolicy> {
    let p = match (level == 0.0, scheme) {
        (true, _) => ErasePolicy::no_defense(),
        (_, Scheme::RandomErase) => ErasePolicy::random_erase(level, level),
        (_, Scheme::FixedErase) => ErasePolicy::fixed_erase(level, level),
        (_, Scheme::EntireErase) => ErasePolicy::entire_erase(level),
        (_, other) => return Err(CoreError::Config(format!("{other:?} is not a compared scheme")).into()),
    };
    let p = ErasePolicy { aspect: base.aspect, ..p }.with_fill(base.fill.clone());
    p.validate()?;
    Ok(p)
}

fn scheme_name(s: Scheme) -> &'static str {
    match s {
        Scheme::NoDefense => "NoDefense",
        Scheme::RandomErase => "RE",
        Scheme::FixedErase => "FE",
        Scheme::EntireErase => "EE",
        Scheme::RandomPixels => "RandomPixels",
        Scheme::MultiPatch => "MultiPatch",
    }
}

struct Cell {
    label: String,
    value: f64,
    policy: ErasePolicy,
    seed: u64,
}

fn run_cells(cfg: &ExperimentConfig, cells: Vec<Cell>, store: &Store, jobs: usize) -> Result<Vec<SummaryRow>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .context("building worker pool")?;
    pool.install(|| {
        cells
            .par_iter()
            .map(|c| {
                let cell_cfg = ExperimentConfig {
                    policy: c.policy.clone(),
                    ..cfg.clone()
                };
                let dir = cfg.out.join("cells").join(format!("{}-{}-seed{}", c.label, c.value, c.seed));
                let outcome = run_pipeline(&cell_cfg, c.seed, &dir, store, Stage::Analyze)
                    .with_context(|| format!("{} at {} with seed {}", c.label, c.value, c.seed))?;
                SummaryRow::new(&c.label, c.value, &c.policy, &outcome)
            })
            .collect()
    })
}

/// Median trend of a sweep and whether it meets the configured thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendVerdict {
    pub values: Vec<f64>,
    pub median_acc: Vec<f64>,
    pub median_att_acc: Vec<f64>,
    pub strictly_decreasing: bool,
    /// Percentage points from the first to the last value.
    pub attack_drop: f64,
    pub acc_drop: f64,
    pub passes: bool,
}

pub fn trend_verdict(rows: &[SummaryRow], values: &[f64], min_attack_drop: f64, max_acc_drop: f64) -> TrendVerdict {
    let med = |v: f64, f: fn(&SummaryRow) -> f64| {
        median(&rows.iter().filter(|r| r.value == v).map(f).collect::<Vec<_>>())
    };
    let median_acc: Vec<f64> = values.iter().map(|&v| med(v, |r| r.acc)).collect();
    let median_att_acc: Vec<f64> = values.iter().map(|&v| med(v, |r| r.att_acc)).collect();
    let strictly_decreasing = median_att_acc.windows(2).all(|w| w[1] < w[0]);
    let drop = |m: &[f64]| match (m.first(), m.last()) {
        (Some(a), Some(b)) => percent(*a) - percent(*b),
        _ => 0.0,
    };
    let attack_drop = drop(&median_att_acc);
    let acc_drop = drop(&median_acc);
    TrendVerdict {
        values: values.to_vec(),
        strictly_decreasing,
        attack_drop,
        acc_drop,
        passes: strictly_decreasing && attack_drop >= min_attack_drop && acc_drop <= max_acc_drop,
        median_acc,
        median_att_acc,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SummaryRow>,
    pub verdict: TrendVerdict,
}

/// Trains and attacks one target per (value, repeat), writing `summary.csv`
/// and `verdict.json` under the configured output directory.
pub fn sweep_ae(cfg: &ExperimentConfig, jobs: usize) -> Result<SweepReport> {
    cfg.validate()?;
    let s = &cfg.sweep;
    let mut cells = Vec::new();
    for &v in &s.values {
        let policy = sweep_policy(&cfg.policy, s.mode, v)?;
        for r in 0..cfg.repeats {
            cells.push(Cell {
                label: scheme_name(policy.scheme).to_string(),
                value: v,
                policy: policy.clone(),
                seed: cfg.repeat_seed(r),
            });
        }
    }
    let store = Store::new(cfg.out.join("cache"));
    let rows = run_cells(cfg, cells, &store, jobs)?;
    let verdict = trend_verdict(&rows, &s.values, s.min_attack_drop, s.max_acc_drop);
    write_summary(&rows, &cfg.out.join("summary.csv"))?;
    write_atomic(&cfg.out.join("verdict.json"), &serde_json::to_vec_pretty(&verdict)?)?;
    Ok(SweepReport { rows, verdict })
}

pub const COMPARED_SCHEMES: [Scheme; 3] = [Scheme::RandomErase, Scheme::FixedErase, Scheme::EntireErase];

/// Every compared scheme at every concealment level, once per repeat.
/// Writes `summary.csv` with `|schemes| x |levels| x repeats` rows.
pub fn compare_schemes(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<SummaryRow>> {
    cfg.validate()?;
    let mut cells = Vec::new();
    for scheme in COMPARED_SCHEMES {
        for &level in &cfg.compare.levels {
            let policy = scheme_policy(&cfg.policy, scheme, level)?;
            for r in 0..cfg.repeats {
                cells.push(Cell {
                    label: scheme_name(scheme).to_string(),
                    value: level,
                    policy: policy.clone(),
                    seed: cfg.repeat_seed(r),
                });
            }
        }
    }
    let store = Store::new(cfg.out.join("cache"));
    let rows = run_cells(cfg, cells, &store, jobs)?;
    write_summary(&rows, &cfg.out.join("summary.csv"))?;
    Ok(rows)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.3}"))
}

/// Medians of one (policy, value) group; one line of `report.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub policy: String,
    pub value: Option<f64>,
    pub runs: usize,
    /// Percentages with two decimals.
    pub acc: f64,
    pub att_acc: f64,
    pub knn_dist: Option<f64>,
    pub ffd: Option<f64>,
    pub delta: String,
    pub hull_iou_recon_priv: Option<f64>,
    pub hull_iou_recon_re: Option<f64>,
    pub hull_iou_re_priv: Option<f64>,
}

fn group_row(policy: &str, value: f64, group: &[&SummaryRow]) -> ReportRow {
    let med = |f: &dyn Fn(&SummaryRow) -> Option<f64>| {
        let xs: Vec<f64> = group.iter().filter_map(|r| f(r)).collect();
        (!xs.is_empty()).then(|| median(&xs))
    };
    let delta = med(&|r| r.delta).map_or_else(
        || group.iter().find_map(|r| r.delta_flag.clone()).unwrap_or_else(|| "-".into()),
        |d| Delta::Ratio(d).render(),
    );
    ReportRow {
        policy: policy.to_string(),
        value: Some(value),
        runs: group.len(),
        acc: percent(med(&|r| Some(r.acc)).unwrap_or(f64::NAN)),
        att_acc: percent(med(&|r| Some(r.att_acc)).unwrap_or(f64::NAN)),
        knn_dist: med(&|r| Some(r.knn_dist)),
        ffd: med(&|r| Some(r.ffd)),
        delta,
        hull_iou_recon_priv: med(&|r| r.hull_iou_recon_priv),
        hull_iou_recon_re: med(&|r| r.hull_iou_recon_re),
        hull_iou_re_priv: med(&|r| r.hull_iou_re_priv),
    }
}

fn metrics_row(m: &MetricsReport) -> ReportRow {
    ReportRow {
        policy: "run".into(),
        value: None,
        runs: 1,
        acc: percent(m.acc),
        att_acc: percent(m.att_acc),
        knn_dist: Some(m.knn_dist),
        ffd: Some(m.ffd),
        delta: m
            .delta
            .map(|d| Delta::Ratio(d).render())
            .or(m.delta_flag.clone())
            .unwrap_or_else(|| "-".into()),
        hull_iou_recon_priv: m.hull_iou_recon_priv,
        hull_iou_recon_re: m.hull_iou_recon_re,
        hull_iou_re_priv: m.hull_iou_re_priv,
    }
}

/// Median rows of a sweep directory (`summary.csv`), or the single row of a
/// run directory (`metrics.json`), plus the sweep verdict when present.
pub fn report_rows(dir: &Path) -> Result<(Vec<ReportRow>, Option<TrendVerdict>)> {
    let summary = dir.join("summary.csv");
    if summary.exists() {
        let rows = read_summary(&summary)?;
        let mut keys: Vec<(String, f64)> = Vec::new();
        for r in &rows {
            if !keys.iter().any(|(p, v)| *p == r.policy && *v == r.value) {
                keys.push((r.policy.clone(), r.value));
            }
        }
        let out = keys
            .iter()
            .map(|(p, v)| {
                let group: Vec<&SummaryRow> = rows.iter().filter(|r| r.policy == *p && r.value == *v).collect();
                group_row(p, *v, &group)
            })
            .collect();
        let path = dir.join("verdict.json");
        let verdict = if path.exists() {
            Some(
                serde_json::from_slice(&std::fs::read(&path)?)
                    .with_context(|| format!("parsing {}", path.display()))?,
            )
        } else {
            None
        };
        return Ok((out, verdict));
    }
    let path = dir.join("metrics.json");
    let m: MetricsReport = serde_json::from_slice(
        &std::fs::read(&path).with_context(|| format!("no summary.csv or metrics.json in {}", dir.display()))?,
    )
    .with_context(|| format!("parsing {}", path.display()))?;
    Ok((vec![metrics_row(&m)], None))
}

/// Markdown table of [`report_rows`]; also writes them to `report.csv` in `dir`.
pub fn render_report(dir: &Path) -> Result<String> {
    let (rows, verdict) = report_rows(dir)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    write_atomic(&dir.join("report.csv"), &w.into_inner().context("flushing report")?)?;

    let mut out = String::from(
        "| policy | value | runs | Acc (%) | AttAcc (%) | KNN | FFD | Delta | IoU recon/priv | IoU recon/re |\n\
         |---|---|---|---|---|---|---|---|---|---|\n",
    );
    for r in &rows {
        out.push_str(&format!(
            "| {} | {} | {} | {:.2} | {:.2} | {} | {} | {} | {} | {} |\n",
            r.policy,
            r.value.map_or_else(|| "-".into(), |v| v.to_string()),
            r.runs,
            r.acc,
            r.att_acc,
            fmt_opt(r.knn_dist),
            fmt_opt(r.ffd),
            r.delta,
            fmt_opt(r.hull_iou_recon_priv),
            fmt_opt(r.hull_iou_recon_re),
        ));
    }
    if let Some(v) = verdict {
        out.push_str(&format!(
            "\nTrend: strictly decreasing = {}, attack drop = {:.2} points, accuracy drop = {:.2} points, passes = {}\n",
            v.strictly_decreasing, v.attack_drop, v.acc_drop, v.passes
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(value: f64, seed: u64, acc: f64, att: f64) -> SummaryRow {
        SummaryRow {
            policy: "RE".into(),
            value,
            a_lo: value,
            a_hi: value,
            ee_fraction: 0.0,
            seed,
            acc,
            att_acc: att,
            att_acc_ci: 0.0,
            knn_dist: 0.0,
            delta: None,
            delta_flag: None,
            ffd: 0.0,
            hull_iou_recon_priv: None,
            hull_iou_recon_re: None,
            hull_iou_re_priv: None,
            run_dir: PathBuf::new(),
        }
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn zero_is_no_defense() {
        let p = sweep_policy(&ErasePolicy::random_erase(0.1, 0.5), SweepMode::Point, 0.0).unwrap();
        assert!(p.is_identity());
        let p = sweep_policy(&ErasePolicy::random_erase(0.1, 0.5), SweepMode::Point, 0.2).unwrap();
        assert_eq!((p.a_lo, p.a_hi), (0.2, 0.2));
        let p = sweep_policy(&ErasePolicy::random_erase(0.1, 0.5), SweepMode::Range, 0.3).unwrap();
        assert_eq!((p.a_lo, p.a_hi), (0.1, 0.3));
        assert!(sweep_policy(&ErasePolicy::random_erase(0.1, 0.5), SweepMode::Range, 0.05).is_err());
    }

    #[test]
    fn entire_erase_uses_the_level_as_fraction() {
        let p = scheme_policy(&ErasePolicy::random_erase(0.1, 0.5), Scheme::EntireErase, 0.4).unwrap();
        assert_eq!((p.scheme, p.ee_fraction), (Scheme::EntireErase, 0.4));
    }

    #[test]
    fn verdict_uses_medians() {
        let rows = vec![
            row(0.0, 1, 0.9, 0.8),
            row(0.0, 2, 0.9, 0.1),
            row(0.0, 3, 0.9, 0.7),
            row(0.5, 1, 0.8, 0.3),
            row(0.5, 2, 0.8, 0.9),
            row(0.5, 3, 0.8, 0.2),
        ];
        let v = trend_verdict(&rows, &[0.0, 0.5], 30.0, 15.0);
        assert_eq!(v.median_att_acc, vec![0.7, 0.3]);
        assert!(v.strictly_decreasing);
        assert!((v.attack_drop - 40.0).abs() < 1e-9);
        assert!((v.acc_drop - 10.0).abs() < 1e-9);
        assert!(v.passes);
    }
}
