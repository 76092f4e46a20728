//! Staged experiment runner: data, models, attack, metrics, feature space.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use relab_core::attacks::{attack_all, load_reconstructions, save_reconstructions, AttackConfig};
use relab_core::featspace::{overlap_report, IouTriple, OverlapReport};
use relab_core::metrics::{
    attack_accuracy_from_features, frechet_feature_distance, knn_distance_features, MetricsReport,
    ReportProvenance,
};
use relab_core::nn::{build_model, extract_features, train_classifier, train_decoder};
use relab_core::rng::{derive_seed, tag};
use relab_core::synthdata::{generate_synthfaces, load_dataset, save_dataset};
use relab_core::{DatasetBundle, ErasePolicy, ImageBatch, TrainedModel};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::store::{stage_key, write_atomic, Manifest, Store};

/// Last stage a pipeline invocation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Data,
    Train,
    Attack,
    Eval,
    Analyze,
}

/// Private train/test split plus the public split used by the decoder.
pub struct Data {
    pub key: String,
    pub bundle: DatasetBundle,
    pub train: ImageBatch,
    pub test: ImageBatch,
}

pub struct Models {
    pub eval: TrainedModel,
    pub decoder: TrainedModel,
    pub target: TrainedModel,
}

/// Everything a finished pipeline produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub seed: u64,
    pub metrics: Option<MetricsReport>,
    pub overlap: Option<OverlapReport>,
    pub manifest: Manifest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentitySummary {
    pub identity: u32,
    pub iou: IouTriple,
    pub explained: [f64; 2],
    pub hull_areas: [f64; 3],
}

/// Contents of `featspace.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatspaceSummary {
    pub pooled: IouTriple,
    /// Mean explained-variance fractions of the two components.
    pub explained: [f64; 2],
    pub per_identity: Vec<IdentitySummary>,
}

fn seed_for(seed: u64, what: &str) -> u64 {
    derive_seed(seed, &[tag(what)])
}

/// Attack settings actually used for a run with base seed `seed`.
pub fn effective_attack(cfg: &ExperimentConfig, seed: u64) -> AttackConfig {
    AttackConfig {
        seed: derive_seed(seed, &[tag("attack"), cfg.attack.attack.seed]),
        ..cfg.attack.attack.clone()
    }
}

fn load_model(path: &Path) -> Result<TrainedModel> {
    Ok(TrainedModel::load(path)?)
}

/// Cached stage builders bound to one configuration, base seed and store.
pub struct Lab<'a> {
    pub cfg: &'a ExperimentConfig,
    pub seed: u64,
    pub store: &'a Store,
}

impl Lab<'_> {
    pub fn data(&self) -> Result<(Data, bool)> {
        let d = &self.cfg.dataset;
        let key = stage_key("data", &(d, self.seed));
        let (bundle, cached) = self.store.get_or_make(
            &key,
            |p| Ok(load_dataset(p)?),
            |p| {
                let b = generate_synthfaces(d.identities, d.samples_per_identity, d.geometry(), self.seed)?;
                Ok(save_dataset(&b, p)?)
            },
        )?;
        let (train, test) = bundle.private.train_test(d.test_per_identity)?;
        Ok((Data { key, bundle, train, test }, cached))
    }

    pub fn eval_model(&self, data: &Data) -> Result<(TrainedModel, String, bool)> {
        let arch = self.cfg.eval_arch()?;
        let key = stage_key("eval", &(&data.key, &arch, &self.cfg.eval.train, self.seed));
        let (m, cached) = self.store.get_or_make(&key, load_model, |p| {
            let s = seed_for(self.seed, "eval");
            let init = build_model(&arch, s)?;
            let m = train_classifier(&init, &data.train, &data.test, &ErasePolicy::no_defense(), &self.cfg.eval.train, s)?;
            Ok(m.save(p)?)
        })?;
        Ok((m, key, cached))
    }

    pub fn decoder(&self, data: &Data) -> Result<(TrainedModel, String, bool)> {
        let arch = self.cfg.decoder_arch()?;
        let key = stage_key("decoder", &(&data.key, &arch, &self.cfg.decoder.fit, self.seed));
        let (m, cached) = self.store.get_or_make(&key, load_model, |p| {
            let m = train_decoder(&data.bundle.public.batch, &arch, &self.cfg.decoder.fit, seed_for(self.seed, "decoder"))?;
            Ok(m.save(p)?)
        })?;
        Ok((m, key, cached))
    }

    pub fn target(&self, data: &Data, policy: &ErasePolicy) -> Result<(TrainedModel, String, bool)> {
        let arch = self.cfg.target_arch()?;
        // Every identity policy trains the same model, whatever its fill.
        let canonical = ErasePolicy::no_defense();
        let policy = if policy.is_identity() { &canonical } else { policy };
        let key = stage_key("target", &(&data.key, &arch, &self.cfg.target.train, policy, self.seed));
        let (m, cached) = self.store.get_or_make(&key, load_model, |p| {
            let s = seed_for(self.seed, "target");
            let init = build_model(&arch, s)?;
            let m = train_classifier(&init, &data.train, &data.test, policy, &self.cfg.target.train, s)?;
            Ok(m.save(p)?)
        })?;
        Ok((m, key, cached))
    }

    pub fn attack(&self, target: &TrainedModel, decoder: &TrainedModel) -> Result<(ImageBatch, String, bool)> {
        let attack = effective_attack(self.cfg, self.seed);
        let draws = self.cfg.attack.draws;
        let labels: Vec<u32> = (0..self.cfg.dataset.identities as u32).collect();
        let key = stage_key("attack", &(target.id(), decoder.id(), &attack, draws, &labels));
        let (batch, cached) = self.store.get_or_make(
            &key,
            |p| Ok(load_reconstructions(p)?),
            |p| {
                let run = attack_all(target, Some(decoder), &labels, &attack, draws)?;
                for f in &run.failed {
                    log::warn!("label {} failed: {}", f.label, f.reason);
                }
                Ok(save_reconstructions(&run, p)?)
            },
        )?;
        Ok((batch, key, cached))
    }

    /// Natural and attack accuracy of an undefended target with the same seed.
    pub fn baseline(&self, data: &Data, eval: &TrainedModel, decoder: &TrainedModel) -> Result<(f64, f64)> {
        let (target, _, _) = self.target(data, &ErasePolicy::no_defense())?;
        let (recon, _, _) = self.attack(&target, decoder)?;
        let acc = extract_features(&target, &data.test)?.accuracy();
        let att = attack_accuracy_from_features(&extract_features(eval, &recon)?).att_acc;
        Ok((acc, att))
    }
}

/// Metrics of one reconstruction set; feature-space overlap when enabled.
pub fn evaluate(
    cfg: &ExperimentConfig,
    seed: u64,
    data: &Data,
    models: &Models,
    recon: &ImageBatch,
) -> Result<(MetricsReport, Option<OverlapReport>)> {
    let f_rec = extract_features(&models.eval, recon)?;
    let att = attack_accuracy_from_features(&f_rec);
    let f_priv = extract_features(&models.eval, &data.train)?;
    let knn = if cfg.metrics.knn {
        knn_distance_features(&f_rec, &f_priv)?.mean
    } else {
        0.0
    };
    let ffd = if cfg.metrics.ffd {
        frechet_feature_distance(&f_rec, &f_priv, cfg.metrics.shrinkage)?
    } else {
        0.0
    };
    let overlap = if cfg.metrics.featspace {
        let ids: Vec<u32> = (0..cfg.dataset.identities as u32).collect();
        Some(overlap_report(
            &models.target,
            &data.train,
            &cfg.metrics.featspace_policy,
            recon,
            &ids,
            seed_for(seed, "featspace"),
        )?)
    } else {
        None
    };
    let attack = effective_attack(cfg, seed);
    let report = MetricsReport {
        acc: extract_features(&models.target, &data.test)?.accuracy(),
        att_acc: att.att_acc,
        att_acc_ci: att.ci_half_width,
        knn_dist: knn,
        delta: None,
        delta_flag: None,
        ffd,
        hull_iou_recon_priv: overlap.as_ref().map(|o| o.pooled.recon_priv),
        hull_iou_recon_re: overlap.as_ref().map(|o| o.pooled.recon_re),
        hull_iou_re_priv: overlap.as_ref().map(|o| o.pooled.re_priv),
        provenance: ReportProvenance {
            target_id: models.target.id(),
            eval_id: models.eval.id(),
            decoder_id: Some(models.decoder.id()),
            attack_config_hash: attack.hash(),
            seed,
        },
    };
    report.validate()?;
    Ok((report, overlap))
}

pub fn featspace_summary(overlap: &OverlapReport) -> FeatspaceSummary {
    let n = overlap.per_identity.len().max(1) as f64;
    let mut explained = [0.0; 2];
    for o in &overlap.per_identity {
        explained[0] += o.explained[0] / n;
        explained[1] += o.explained[1] / n;
    }
    FeatspaceSummary {
        pooled: overlap.pooled,
        explained,
        per_identity: overlap
            .per_identity
            .iter()
            .map(|o| IdentitySummary {
                identity: o.identity,
                iou: o.iou,
                explained: o.explained,
                hull_areas: o.hull_areas,
            })
            .collect(),
    }
}

/// `projection.csv` rows (x, y, group, identity) for the first `k` identities.
pub fn write_projection(overlap: &OverlapReport, k: usize, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["x", "y", "group", "identity"])?;
    for o in overlap.per_identity.iter().take(k) {
        for (p, g) in o.projection.points.iter().zip(&o.projection.groups) {
            w.write_record([p[0].to_string(), p[1].to_string(), g.as_str().to_string(), o.identity.to_string()])?;
        }
    }
    write_atomic(path, &w.into_inner().context("flushing projection")?)
}

fn copy_dir(from: &Path, to: &Path) -> Result<()> {
    fs::create_dir_all(to).with_context(|| format!("creating {}", to.display()))?;
    let mut names: Vec<_> = fs::read_dir(from)?.collect::<std::io::Result<Vec<_>>>()?;
    names.sort_by_key(|e| e.file_name());
    for e in names {
        fs::copy(e.path(), to.join(e.file_name()))
            .with_context(|| format!("copying {}", e.path().display()))?;
    }
    Ok(())
}

struct Runner<'a> {
    lab: Lab<'a>,
    run_dir: &'a Path,
    manifest: Manifest,
    stage: &'static str,
}

impl Runner<'_> {
    fn enter(&mut self, stage: &'static str) {
        log::info!("stage {stage}");
        self.stage = stage;
    }

    fn run(&mut self, until: Stage) -> Result<(Option<MetricsReport>, Option<OverlapReport>)> {
        let cfg = self.lab.cfg;
        let root = self.lab.store.root().to_path_buf();
        write_atomic(&self.run_dir.join("config.toml"), cfg.to_toml().as_bytes())?;

        self.enter("data");
        let (data, cached) = self.lab.data()?;
        self.manifest.record("data", Some(&data.key), cached, &[root.join(&data.key)])?;
        if until == Stage::Data {
            return Ok((None, None));
        }

        self.enter("train-eval");
        let (eval, key, cached) = self.lab.eval_model(&data)?;
        self.manifest.record("train-eval", Some(&key), cached, &[root.join(&key)])?;
        self.enter("train-decoder");
        let (decoder, key, cached) = self.lab.decoder(&data)?;
        self.manifest.record("train-decoder", Some(&key), cached, &[root.join(&key)])?;
        self.enter("train-target");
        let (target, key, cached) = self.lab.target(&data, &cfg.policy)?;
        self.manifest.record("train-target", Some(&key), cached, &[root.join(&key)])?;
        if until == Stage::Train {
            return Ok((None, None));
        }

        self.enter("attack");
        let (recon, key, cached) = self.lab.attack(&target, &decoder)?;
        let recon_dir = self.run_dir.join("reconstructions");
        copy_dir(&root.join(&key), &recon_dir)?;
        self.manifest.record("attack", Some(&key), cached, &[recon_dir])?;
        if until == Stage::Attack {
            return Ok((None, None));
        }

        let models = Models { eval, decoder, target };
        self.enter("eval");
        let (mut report, overlap) = evaluate(cfg, self.lab.seed, &data, &models, &recon)?;
        if cfg.metrics.delta && !cfg.policy.is_identity() {
            self.enter("baseline");
            let (acc, att) = self.lab.baseline(&data, &models.eval, &models.decoder)?;
            report = report.with_delta(acc, att)?;
            self.enter("eval");
        }
        let metrics_path = self.run_dir.join("metrics.json");
        write_atomic(&metrics_path, &serde_json::to_vec_pretty(&report)?)?;
        self.manifest.record("eval", None, false, &[metrics_path])?;

        if until >= Stage::Analyze {
            if let Some(o) = &overlap {
                self.enter("analyze");
                let fs_path = self.run_dir.join("featspace.json");
                write_atomic(&fs_path, &serde_json::to_vec_pretty(&featspace_summary(o))?)?;
                let proj_path = self.run_dir.join("projection.csv");
                write_projection(o, cfg.metrics.featspace_identities, &proj_path)?;
                self.manifest.record("analyze", None, false, &[fs_path, proj_path])?;
            }
        }
        Ok((Some(report), overlap))
    }
}

/// Runs every stage up to `until` for base seed `seed`, writing outputs and
/// `manifest.json` under `run_dir` and caching stage artifacts in `store`.
///
/// On failure the manifest is still written, marked `FAILED` with the stage
/// that raised the error; artifacts produced so far stay in place.
pub fn run_pipeline(cfg: &ExperimentConfig, seed: u64, run_dir: &Path, store: &Store, until: Stage) -> Result<RunOutcome> {
    cfg.validate()?;
    fs::create_dir_all(run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    let config_sha = hex::encode(Sha256::digest(cfg.to_toml().as_bytes()));
    let mut runner = Runner {
        lab: Lab { cfg, seed, store },
        run_dir,
        manifest: Manifest::new(seed, config_sha),
        stage: "setup",
    };
    match runner.run(until) {
        Ok((metrics, overlap)) => {
            runner.manifest.write(run_dir)?;
            Ok(RunOutcome {
                run_dir: run_dir.to_path_buf(),
                seed,
                metrics,
                overlap,
                manifest: runner.manifest,
            })
        }
        Err(e) => {
            let stage = runner.stage;
            runner.manifest.fail(stage, &e);
            if let Err(w) = runner.manifest.write(run_dir) {
                log::error!("could not write manifest: {w:#}");
            }
            Err(e.context(format!("stage `{stage}` failed")))
        }
    }
}

/// [`run_pipeline`] with the configuration's own seed and output directory,
/// caching under `<out>/cache`.
pub fn run_experiment(cfg: &ExperimentConfig, until: Stage) -> Result<RunOutcome> {
    let store = Store::new(cfg.out.join("cache"));
    run_pipeline(cfg, cfg.seed, &cfg.out, &store, until)
}
