//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and a
//! pass count. A failed criterion is reported, not hidden; set
//! `RELAB_ACCEPTANCE_STRICT=1` to also exit non-zero when any criterion fails.
//!
//! Set `RELAB_ACCEPTANCE_DIR` to keep the run artifacts in a fixed directory.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use rand::Rng;
use relab_cli::config::ExperimentConfig;
use relab_cli::pipeline::{run_pipeline, RunOutcome, Stage};
use relab_cli::store::Store;
use relab_cli::sweep::{compare_schemes, median, sweep_ae, SummaryRow};
use relab_core::attacks::{candidate_len, objective_and_gradient, AttackConfig, Strategy};
use relab_core::erasing::sample_erase_region;
use relab_core::featspace::{convex_hull, hull_iou, pca_rows};
use relab_core::metrics::{frechet_distance_rows, tradeoff_delta, Delta, Shrinkage};
use relab_core::nn::{build_model, ArchSpec};
use relab_core::rng::stream;
use relab_core::{ErasePolicy, Geometry};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome { pass, detail: detail.into() })
}

// 1. Mask geometry at 64x64 over [0.1, 0.8].

fn mask_geometry() -> Result<Outcome> {
    let start = Instant::now();
    let (w, h) = (64usize, 64usize);
    let total = (w * h) as f64;
    let mut rng = stream(2024, &[]);
    let policy = ErasePolicy::random_erase(0.1, 0.8);
    let (mut outside, mut off_range, mut undercovered, mut off_law) = (0, 0, 0, 0);
    for _ in 0..10_000 {
        let r = sample_erase_region(w, h, &policy, &mut rng)?;
        let slack = (r.width + r.height + 1) as f64 / total;
        let frac = (r.width * r.height) as f64 / total;
        outside += usize::from(r.x + r.width > w || r.y + r.height > h);
        off_range += usize::from(frac > 0.8 + slack);
        undercovered += usize::from(frac < 0.1 - slack);
        // the same law with a known target fraction
        let a: f64 = rng.random_range(0.1..=0.8);
        let p = sample_erase_region(w, h, &ErasePolicy::random_erase(a, a), &mut rng)?;
        let pfrac = (p.width * p.height) as f64 / total;
        outside += usize::from(p.x + p.width > w || p.y + p.height > h);
        off_law += usize::from((pfrac - a).abs() > (p.width + p.height + 1) as f64 / total);
    }
    let elapsed = start.elapsed();
    outcome(
        outside == 0 && off_range == 0 && undercovered == 0 && off_law == 0 && elapsed < Duration::from_secs(10),
        format!(
            "outside {outside}, above range {off_range}, under 0.1 {undercovered}, area-law misses {off_law}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

// 2. Trade-off ratio against reference values.

const ACC_NODEF: f64 = 86.90;
/// (AttAcc_nodef, [(Acc_def, AttAcc_def, reference ratio)]) per attack.
const TABLE: [(f64, [(f64, f64, f64); 3]); 6] = [
    (74.53, [(79.16, 54.53, 2.58), (79.85, 53.73, 2.95), (79.85, 31.93, 6.04)]),
    (81.80, [(79.16, 67.20, 1.89), (79.85, 63.00, 2.67), (79.85, 43.07, 5.49)]),
    (97.47, [(79.16, 93.00, 0.58), (79.85, 92.40, 0.72), (79.85, 66.60, 4.38)]),
    (20.07, [(79.16, 20.93, -0.11), (79.85, 6.13, 1.98), (79.85, 3.20, 2.39)]),
    (78.47, [(79.16, 53.33, 3.25), (79.85, 43.53, 4.96), (79.85, 34.73, 6.20)]),
    (57.40, [(79.16, 39.20, 2.35), (79.85, 37.40, 2.84), (79.85, 21.73, 5.06)]),
];

fn delta_oracle() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (att_n, rows) in TABLE {
        for (acc_d, att_d, reference) in rows {
            let Delta::Ratio(d) = tradeoff_delta(ACC_NODEF, att_n, acc_d, att_d)? else {
                return outcome(false, format!("({att_n}, {acc_d}, {att_d}) gave no ratio"));
            };
            worst = worst.max((d - reference).abs());
            checked += 1;
        }
    }
    outcome(worst <= 0.01, format!("{checked} entries, worst deviation {worst:.4}"))
}

// 3. Hull IoU, Fréchet and PCA closed forms.

fn square(x0: f64) -> relab_core::featspace::HullPolygon {
    convex_hull(&[[x0, 0.0], [x0 + 1.0, 0.0], [x0 + 1.0, 1.0], [x0, 1.0]])
}

fn closed_forms() -> Result<Outcome> {
    let (a, disjoint, half) = (square(0.0), square(2.0), square(0.5));
    let iou_err = [
        (hull_iou(&a, &a) - 1.0).abs(),
        hull_iou(&a, &disjoint).abs(),
        (hull_iou(&a, &half) - 1.0 / 3.0).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);

    let rows: Vec<f64> = (0..90).map(|i| ((i * 31) % 23) as f64 / 4.0 + (i % 7) as f64).collect();
    let shift = [1.0, -0.5, 2.0];
    let shifted: Vec<f64> = rows.iter().enumerate().map(|(i, v)| v + shift[i % 3]).collect();
    let same = frechet_distance_rows(&rows, &rows, 3, Shrinkage::Off)?;
    let moved = frechet_distance_rows(&rows, &shifted, 3, Shrinkage::Off)? - 5.25;
    // two-point samples with unbiased variances 1 and 4
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let one_d = frechet_distance_rows(&[-s, s], &[-2.0 * s, 2.0 * s], 1, Shrinkage::Off)? - 1.0;
    let ffd_err = same.abs().max(moved.abs()).max(one_d.abs());

    let mut rng = stream(5, &[]);
    let data: Vec<f64> = (0..200 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (_, basis, _) = pca_rows(&data, 6)?;
    let dot = |i: usize, j: usize| basis.iter().map(|r| r[i] * r[j]).sum::<f64>();
    let pca_err = (dot(0, 0) - 1.0).abs().max((dot(1, 1) - 1.0).abs()).max(dot(0, 1).abs());

    outcome(
        iou_err <= 1e-9 && ffd_err <= 1e-6 && pca_err <= 1e-6,
        format!("IoU error {iou_err:.1e}, FFD error {ffd_err:.1e}, PCA orthonormality error {pca_err:.1e}"),
    )
}

// 4. Attack objective gradients against central differences.

fn gradient_check() -> Result<Outcome> {
    let g = Geometry::new(32, 32, 3);
    let target = build_model(&ArchSpec::classifier_small(g, 32), 1)?;
    let decoder = build_model(&ArchSpec::decoder(g, 64)?, 2)?;
    let mut rng = stream(11, &[]);
    // Small enough that a step rarely crosses a ReLU or max-pool kink; f64 keeps roundoff near 1e-10.
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for (strategy, dec) in [(Strategy::PixelSpace, None), (Strategy::LatentSpace, Some(&decoder))] {
        let cfg = AttackConfig { strategy, lambda_tv: 0.01, lambda_l2: 0.01, ..AttackConfig::default() };
        let n = candidate_len(&target, dec, &cfg)?;
        for k in 0..100 {
            let x: Vec<f64> = match strategy {
                Strategy::PixelSpace => (0..n).map(|_| rng.random_range(0.05..0.95)).collect(),
                Strategy::LatentSpace => (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
            };
            let dir: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let label = k % 32;
            let (_, grad) = objective_and_gradient(&target, dec, &cfg, label, &x, None)?;
            let analytic: f64 = grad.iter().zip(&dir).map(|(a, b)| a * b).sum();
            let at = |t: f64| -> Result<f64> {
                let y: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + t * b).collect();
                Ok(objective_and_gradient(&target, dec, &cfg, label, &y, None)?.0)
            };
            let numeric = (at(eps)? - at(-eps)?) / (2.0 * eps);
            worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7));
        }
    }
    outcome(worst <= 1e-3, format!("200 points (pixel and latent), worst relative error {worst:.2e}"))
}

// Shared desk-scale lab: one output directory and one stage cache.

struct Lab {
    cfg: ExperimentConfig,
    store: Store,
    sweep: Option<Vec<SummaryRow>>,
    midre: Vec<RunOutcome>,
}

impl Lab {
    fn new(root: &Path) -> Self {
        let cfg = ExperimentConfig { out: root.join("lab"), ..ExperimentConfig::default() };
        let store = Store::new(cfg.out.join("cache"));
        Lab { cfg, store, sweep: None, midre: Vec::new() }
    }

    fn seeds(&self) -> Vec<u64> {
        (0..self.cfg.repeats).map(|r| self.cfg.repeat_seed(r)).collect()
    }

    /// Targets trained with the default policy, a range of areas up to 0.5.
    fn midre_runs(&mut self) -> Result<&[RunOutcome]> {
        if self.midre.is_empty() {
            for seed in self.seeds() {
                let dir = self.cfg.out.join(format!("midre-seed{seed}"));
                self.midre.push(run_pipeline(&self.cfg, seed, &dir, &self.store, Stage::Analyze)?);
            }
        }
        Ok(&self.midre)
    }
}

fn medians<'a>(rows: impl Iterator<Item = &'a SummaryRow> + Clone) -> (f64, f64) {
    let acc: Vec<f64> = rows.clone().map(|r| r.acc).collect();
    let att: Vec<f64> = rows.map(|r| r.att_acc).collect();
    (median(&acc), median(&att))
}

// 5. Area sweep trend.

fn area_sweep(lab: &mut Lab) -> Result<Outcome> {
    let start = Instant::now();
    let report = sweep_ae(&lab.cfg, 1)?;
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let v = &report.verdict;
    let trend: Vec<String> = v
        .values
        .iter()
        .zip(v.median_acc.iter().zip(&v.median_att_acc))
        .map(|(a, (acc, att))| format!("a_e {a}: Acc {:.1} AttAcc {:.1}", 100.0 * acc, 100.0 * att))
        .collect();
    let nodef_att = v.median_att_acc.first().copied().unwrap_or(0.0);
    lab.sweep = Some(report.rows);
    outcome(
        v.passes && minutes <= 45.0,
        format!(
            "{}; AttAcc drop {:.1} (need >= 30), Acc drop {:.1} (need <= 15), strictly decreasing {}, undefended AttAcc {:.1} {}, {minutes:.1} min",
            trend.join(", "),
            v.attack_drop,
            v.acc_drop,
            v.strictly_decreasing,
            100.0 * nodef_att,
            if nodef_att >= 0.5 { "(>= 50)" } else { "(below 50)" },
        ),
    )
}

// 6. Erasure schemes at matched concealment 0.4.

fn scheme_comparison(lab: &Lab) -> Result<Outcome> {
    let mut cfg = lab.cfg.clone();
    cfg.compare.levels = vec![0.4];
    let rows = compare_schemes(&cfg, 1)?;
    let of = |label: &str| medians(rows.iter().filter(move |r| r.policy == label));
    let (re, fe, ee) = (of("RE"), of("FE"), of("EE"));
    outcome(
        re.1 < ee.1 && re.0 >= fe.0,
        format!(
            "AttAcc RE {:.1} vs EE {:.1}; Acc RE {:.1} vs FE {:.1} (FE AttAcc {:.1}, EE Acc {:.1})",
            100.0 * re.1,
            100.0 * ee.1,
            100.0 * re.0,
            100.0 * fe.0,
            100.0 * fe.1,
            100.0 * ee.0
        ),
    )
}

// 7. Feature-space overlap, defended against undefended.

fn feature_overlap(lab: &mut Lab) -> Result<Outcome> {
    let nodef: Vec<SummaryRow> = lab
        .sweep
        .as_ref()
        .context("the area sweep must run first")?
        .iter()
        .filter(|r| r.value == 0.0)
        .cloned()
        .collect();
    let midre = lab.midre_runs()?;
    let metric = |o: &RunOutcome, f: fn(&relab_core::metrics::MetricsReport) -> Option<f64>| {
        o.metrics.as_ref().and_then(f).unwrap_or(f64::NAN)
    };
    let nodef_priv = median(&nodef.iter().map(|r| r.hull_iou_recon_priv.unwrap_or(f64::NAN)).collect::<Vec<_>>());
    let midre_priv = median(&midre.iter().map(|o| metric(o, |m| m.hull_iou_recon_priv)).collect::<Vec<_>>());
    let midre_re = median(&midre.iter().map(|o| metric(o, |m| m.hull_iou_recon_re)).collect::<Vec<_>>());
    let knn_nodef = median(&nodef.iter().map(|r| r.knn_dist).collect::<Vec<_>>());
    let knn_midre = median(&midre.iter().map(|o| metric(o, |m| Some(m.knn_dist))).collect::<Vec<_>>());
    outcome(
        midre_priv < nodef_priv && midre_re >= midre_priv,
        format!(
            "IoU(recon, priv) defended {midre_priv:.3} vs undefended {nodef_priv:.3}; defended IoU(recon, RE) {midre_re:.3}; KNN distance {knn_midre:.2} vs {knn_nodef:.2}"
        ),
    )
}

// 8. Adaptive attacker on the defended target.

fn adaptive_attack(lab: &mut Lab) -> Result<Outcome> {
    let standard = median(&lab.midre_runs()?.iter().map(|o| o.metrics.as_ref().map_or(f64::NAN, |m| m.att_acc)).collect::<Vec<_>>());
    let mut cfg = lab.cfg.clone();
    cfg.attack.attack.adaptive = true;
    cfg.attack.attack.adaptive_policy = cfg.policy.clone();
    cfg.metrics.delta = false;
    let mut att = Vec::new();
    for seed in lab.seeds() {
        let dir = cfg.out.join(format!("adaptive-seed{seed}"));
        let o = run_pipeline(&cfg, seed, &dir, &lab.store, Stage::Eval)?;
        att.push(o.metrics.context("adaptive run without metrics")?.att_acc);
    }
    let adaptive = median(&att);
    outcome(
        100.0 * adaptive <= 100.0 * standard + 5.0,
        format!("adaptive AttAcc {:.1} vs standard {:.1} (allowed up to +5)", 100.0 * adaptive, 100.0 * standard),
    )
}

// 9. Two independent full runs agree byte for byte.

fn determinism(root: &Path) -> Result<Outcome> {
    let cfg = ExperimentConfig { repeats: 1, ..ExperimentConfig::default() };
    let run = |name: &str| -> Result<PathBuf> {
        let base = root.join(name);
        let dir = base.join("run");
        run_pipeline(&cfg, cfg.seed, &dir, &Store::new(base.join("cache")), Stage::Analyze)?;
        Ok(dir)
    };
    let (a, b) = (run("det-a")?, run("det-b")?);
    let mut mismatched = Vec::new();
    for file in ["metrics.json", "featspace.json", "reconstructions/images.bin", "reconstructions/labels.bin"] {
        let read = |d: &Path| std::fs::read(d.join(file)).with_context(|| format!("reading {file}"));
        if read(&a)? != read(&b)? {
            mismatched.push(file);
        }
    }
    outcome(
        mismatched.is_empty(),
        if mismatched.is_empty() {
            "metrics.json, featspace.json and reconstruction tensors identical across two fresh runs".to_string()
        } else {
            format!("differing: {}", mismatched.join(", "))
        },
    )
}

fn main() {
    // Every criterion runs on each invocation; libtest flags are ignored.
    let kept = std::env::var_os("RELAB_ACCEPTANCE_DIR").map(PathBuf::from);
    let tmp = tempfile::tempdir().expect("temporary directory");
    let root = kept.unwrap_or_else(|| tmp.path().to_path_buf());
    let mut lab = Lab::new(&root);

    let mut results: Vec<(&str, Result<Outcome>)> = Vec::new();
    let mut report = |name: &'static str, r: Result<Outcome>| {
        let line = match &r {
            Ok(o) => format!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail),
            Err(e) => format!("FAIL {name}: error: {e:#}"),
        };
        println!("{line}");
        results.push((name, r));
    };
    report("1 mask geometry", mask_geometry());
    report("2 trade-off ratio table", delta_oracle());
    report("3 closed-form oracles", closed_forms());
    report("4 attack gradient check", gradient_check());
    report("5 area sweep trend", area_sweep(&mut lab));
    report("6 scheme comparison", scheme_comparison(&lab));
    report("7 feature-space overlap", feature_overlap(&mut lab));
    report("8 adaptive attack", adaptive_attack(&mut lab));
    report("9 determinism", determinism(&root));

    let failed = results.iter().filter(|(_, r)| !matches!(r, Ok(o) if o.pass)).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 && std::env::var_os("RELAB_ACCEPTANCE_STRICT").is_some_and(|v| v == "1") {
        std::process::exit(1);
    }
}
