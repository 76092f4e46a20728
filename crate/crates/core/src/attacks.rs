//! Gradient-based model inversion: search for inputs the target classifies as
//! a chosen identity with maximal likelihood, either directly in pixel space
//! or in the latent space of a decoder fitted to public data.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::batch::{Geometry, ImageBatch};
use crate::erasing::{apply_mask_in_place, make_mask, ErasePolicy, FillKind, SampleSite};
use crate::error::{Error, Result};
use crate::nn::{softmax, softmax_cross_entropy, ArchKind, Adam, Network, OptimizerConfig, Real, TrainedModel};
use crate::rng;
use crate::synthdata::f32s_to_le_bytes;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    PixelSpace,
    LatentSpace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub strategy: Strategy,
    /// Occlude every candidate with a fresh `adaptive_policy` mask at each step.
    #[serde(default)]
    pub adaptive: bool,
    #[serde(default = "default_adaptive_policy")]
    pub adaptive_policy: ErasePolicy,
    pub restarts: usize,
    pub steps: usize,
    pub step_size: f64,
    pub lambda_tv: f64,
    pub lambda_l2: f64,
    pub seed: u64,
}

fn default_adaptive_policy() -> ErasePolicy {
    ErasePolicy::random_erase(0.1, 0.5)
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            strategy: Strategy::LatentSpace,
            adaptive: false,
            adaptive_policy: default_adaptive_policy(),
            restarts: 8,
            steps: 300,
            step_size: 0.05,
            lambda_tv: 1e-3,
            lambda_l2: 1e-2,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 || self.steps == 0 {
            return Err(Error::Config("attack needs at least one restart and one step".into()));
        }
        if !(self.step_size > 0.0) || !(self.lambda_tv >= 0.0) || !(self.lambda_l2 >= 0.0) {
            return Err(Error::Config("attack step size must be positive and prior weights non-negative".into()));
        }
        if self.adaptive {
            self.adaptive_policy.validate()?;
        }
        Ok(())
    }

    /// Short content hash identifying this configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("attack config serializes");
        hex::encode(&Sha256::digest(json)[..8])
    }
}

/// Optimization record of one restart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartTrace {
    /// Objective evaluated before each update (on the occluded candidate when adaptive).
    pub losses: Vec<f64>,
    /// Unoccluded objective at initialization and after the last update.
    pub initial_objective: f64,
    pub final_objective: f64,
    /// Target-model softmax probability of the label for the final candidate.
    pub confidence: f64,
}

/// One independent inversion of a label: the best of its restarts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub label: u32,
    /// Draw index among the reconstructions of this label.
    pub draw: usize,
    /// `[C, H, W]` image in `[0, 1]`.
    pub image: Vec<f32>,
    pub selected: usize,
    pub confidence: f64,
    pub restarts: Vec<RestartTrace>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackProvenance {
    pub config: AttackConfig,
    pub config_hash: String,
    pub target_id: String,
    pub decoder_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub label: u32,
    pub geometry: Geometry,
    pub reconstructions: Vec<Reconstruction>,
    pub provenance: AttackProvenance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedLabel {
    pub label: u32,
    pub reason: String,
}

/// Output of [`attack_all`]: per-label results plus labels that failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRun {
    pub results: Vec<AttackResult>,
    pub failed: Vec<FailedLabel>,
    pub geometry: Geometry,
    pub provenance: AttackProvenance,
}

impl AttackRun {
    /// All reconstructions as a batch labelled with their target identities.
    pub fn to_batch(&self) -> Result<ImageBatch> {
        let recs: Vec<&Reconstruction> = self.results.iter().flat_map(|r| &r.reconstructions).collect();
        ImageBatch::new(
            self.geometry,
            recs.iter().flat_map(|r| r.image.iter().copied()).collect(),
            recs.iter().map(|r| r.label).collect(),
        )
    }

    pub fn reconstructions(&self) -> impl Iterator<Item = &Reconstruction> {
        self.results.iter().flat_map(|r| &r.reconstructions)
    }
}

/// Per-element keep flags and replacement values for an occluded candidate.
#[derive(Clone, Debug)]
pub struct Occlusion {
    keep: Vec<bool>,
    fill: Vec<f32>,
}

impl Occlusion {
    fn draw(policy: &ErasePolicy, geometry: Geometry, site: &SampleSite, rng: &mut rng::Stream) -> Result<Occlusion> {
        let mask = make_mask(policy, site, 0, geometry.width, geometry.height, 0, rng)?;
        let bits = mask.to_bitmap(geometry.width, geometry.height);
        let keep: Vec<bool> = (0..geometry.channels).flat_map(|_| bits.iter().map(|&b| !b)).collect();
        let mut fill = vec![0f32; geometry.len()];
        apply_mask_in_place(&mut fill, geometry, &mask, &policy.fill, rng)?;
        Ok(Occlusion { keep, fill })
    }
}

/// Where candidates live and how they map to target-model inputs.
enum Space<'a, F> {
    Pixel,
    Latent { net: Network, params: &'a [F] },
}

/// The inversion objective per candidate:
/// `CE(T(x), y) + lambda_tv * TV(x) + lambda_l2 * |x|^2` in pixel space and
/// `CE(T(G(z)), y) + lambda_l2 * |z|^2` in latent space.
struct Objective<'a, F> {
    target: Network,
    t_params: &'a [F],
    space: Space<'a, F>,
    geometry: Geometry,
    classes: usize,
    lambda_tv: F,
    lambda_l2: F,
}

struct Evaluation<F> {
    losses: Vec<F>,
    grad: Vec<F>,
    confidences: Vec<F>,
}

/// Anisotropic squared total variation of one `[C, H, W]` image, with its
/// gradient accumulated into `grad` scaled by `weight`.
fn total_variation<F: Real>(x: &[F], g: Geometry, weight: F, grad: Option<&mut [F]>) -> F {
    let (w, h) = (g.width, g.height);
    let mut tv = F::zero();
    let mut grad = grad;
    for c in 0..g.channels {
        let p = &x[c * w * h..(c + 1) * w * h];
        for y in 0..h {
            for xx in 0..w {
                let i = y * w + xx;
                for j in [(xx + 1 < w).then_some(i + 1), (y + 1 < h).then_some(i + w)].into_iter().flatten() {
                    let d = p[j] - p[i];
                    tv += d * d;
                    if let Some(gr) = grad.as_deref_mut() {
                        let two = F::of(2.0) * weight * d;
                        gr[c * w * h + j] += two;
                        gr[c * w * h + i] -= two;
                    }
                }
            }
        }
    }
    tv
}

impl<'a, F: Real> Objective<'a, F> {
    fn new(
        target: &TrainedModel,
        t_params: &'a [F],
        decoder: Option<(&TrainedModel, &'a [F])>,
        config: &AttackConfig,
    ) -> Result<Self> {
        if !target.arch.is_classifier() {
            return Err(Error::Config("attack target must be a classifier".into()));
        }
        let geometry = target
            .arch
            .input_geometry()
            .ok_or_else(|| Error::Config("classifier without image input".into()))?;
        let space = match (config.strategy, decoder) {
            (Strategy::PixelSpace, _) => Space::Pixel,
            (Strategy::LatentSpace, None) => {
                return Err(Error::Config("latent-space attack requires a decoder".into()));
            }
            (Strategy::LatentSpace, Some((dec, params))) => {
                if dec.arch.kind != ArchKind::Decoder {
                    return Err(Error::Config("latent-space attack needs a decoder model".into()));
                }
                let net = dec.network()?;
                if net.output_shape().len() != geometry.len() {
                    return Err(Error::Shape("decoder output does not match the target input".into()));
                }
                Space::Latent { net, params }
            }
        };
        Ok(Objective {
            target: target.network()?,
            t_params,
            space,
            geometry,
            classes: target.arch.num_classes(),
            lambda_tv: F::of(config.lambda_tv),
            lambda_l2: F::of(config.lambda_l2),
        })
    }

    fn candidate_len(&self) -> usize {
        match &self.space {
            Space::Pixel => self.geometry.len(),
            Space::Latent { net, .. } => net.input_shape().len(),
        }
    }

    fn evaluate(&self, cands: &[F], labels: &[u32], occl: Option<&[Occlusion]>, want_grad: bool) -> Result<Evaluation<F>> {
        let n = labels.len();
        let d = self.candidate_len();
        let img_len = self.geometry.len();
        let (images, dec_acts) = match &self.space {
            Space::Pixel => (cands.to_vec(), None),
            Space::Latent { net, params } => {
                let acts = net.forward(params, cands, n)?;
                (net.output(&acts), Some(acts))
            }
        };
        let mut inputs = images.clone();
        if let Some(occl) = occl {
            for (img, o) in inputs.chunks_exact_mut(img_len).zip(occl) {
                for ((v, &k), &f) in img.iter_mut().zip(&o.keep).zip(&o.fill) {
                    if !k {
                        *v = F::of(f as f64);
                    }
                }
            }
        }
        let acts = self.target.forward(self.t_params, &inputs, n)?;
        let logits = self.target.output(&acts);
        let (mut losses, dlogits) = softmax_cross_entropy(&logits, labels, self.classes);
        let probs = softmax(&logits, self.classes);
        let confidences = (0..n).map(|i| probs[i * self.classes + labels[i] as usize]).collect();

        for (i, loss) in losses.iter_mut().enumerate() {
            let c = &cands[i * d..(i + 1) * d];
            *loss += self.lambda_l2 * c.iter().fold(F::zero(), |a, &v| a + v * v);
            if matches!(self.space, Space::Pixel) && self.lambda_tv > F::zero() {
                *loss += self.lambda_tv * total_variation(c, self.geometry, F::zero(), None);
            }
        }
        if !want_grad {
            return Ok(Evaluation { losses, grad: Vec::new(), confidences });
        }

        let mut dimg = self
            .target
            .backward(self.t_params, &acts, &dlogits, None, true)?
            .expect("input gradient requested");
        if let Some(occl) = occl {
            for (g, o) in dimg.chunks_exact_mut(img_len).zip(occl) {
                for (v, &k) in g.iter_mut().zip(&o.keep) {
                    if !k {
                        *v = F::zero();
                    }
                }
            }
        }
        let mut grad = match (&self.space, dec_acts) {
            (Space::Latent { net, params }, Some(acts)) => net
                .backward(params, &acts, &dimg, None, true)?
                .expect("input gradient requested"),
            _ => {
                if self.lambda_tv > F::zero() {
                    for (g, c) in dimg.chunks_exact_mut(d).zip(cands.chunks_exact(d)) {
                        total_variation(c, self.geometry, self.lambda_tv, Some(g));
                    }
                }
                dimg
            }
        };
        let two_l2 = F::of(2.0) * self.lambda_l2;
        for (g, &c) in grad.iter_mut().zip(cands) {
            *g += two_l2 * c;
        }
        Ok(Evaluation { losses, grad, confidences })
    }

    fn images(&self, cands: &[F], n: usize) -> Result<Vec<F>> {
        match &self.space {
            Space::Pixel => Ok(cands.to_vec()),
            Space::Latent { net, params } => Ok(net.output(&net.forward(params, cands, n)?)),
        }
    }
}

/// Candidates optimized together; each is independent of the others.
const CANDIDATE_CHUNK: usize = 128;

#[derive(Clone, Copy, Debug)]
struct Job {
    label: u32,
    draw: usize,
    restart: usize,
}

fn init_candidate(job: Job, config: &AttackConfig, len: usize) -> Vec<f32> {
    let mut r = rng::stream(
        config.seed,
        &[rng::tag("attack-init"), job.label as u64, job.draw as u64, job.restart as u64],
    );
    match config.strategy {
        Strategy::PixelSpace => (0..len).map(|_| r.random::<f32>()).collect(),
        Strategy::LatentSpace => (0..len).map(|_| StandardNormal.sample(&mut r)).collect(),
    }
}

struct JobOutcome {
    job: Job,
    image: Vec<f32>,
    trace: RestartTrace,
    failure: Option<String>,
}

fn resolve_adaptive_policy(target: &TrainedModel, config: &AttackConfig) -> Result<ErasePolicy> {
    let mut policy = config.adaptive_policy.clone();
    if policy.fill.kind == FillKind::ChannelMean && policy.fill.channel_means.is_empty() {
        let trained = target.train_config.as_ref().map(|t| &t.policy.fill);
        match trained {
            Some(f) if f.kind == FillKind::ChannelMean && !f.channel_means.is_empty() => {
                policy.fill.channel_means = f.channel_means.clone();
            }
            _ => {
                return Err(Error::Config(
                    "adaptive mean fill needs channel means (none recorded in the target)".into(),
                ));
            }
        }
    }
    Ok(policy)
}

fn run_chunk(obj: &Objective<'_, f32>, jobs: &[Job], config: &AttackConfig, policy: &ErasePolicy) -> Result<Vec<JobOutcome>> {
    let d = obj.candidate_len();
    let n = jobs.len();
    let labels: Vec<u32> = jobs.iter().map(|j| j.label).collect();
    let mut cands: Vec<f32> = jobs.iter().flat_map(|&j| init_candidate(j, config, d)).collect();
    let mut opt = Adam::new(OptimizerConfig::default(), config.step_size, cands.len());
    let mut traces = vec![Vec::with_capacity(config.steps); n];
    let mut failure: Vec<Option<String>> = vec![None; n];
    let clamp = matches!(config.strategy, Strategy::PixelSpace);

    let initial = if config.adaptive {
        Some(obj.evaluate(&cands, &labels, None, false)?.losses)
    } else {
        None
    };
    for step in 0..config.steps {
        let occl = if config.adaptive {
            let sites: Vec<Occlusion> = jobs
                .iter()
                .enumerate()
                .map(|(i, j)| {
                    let mut r = rng::stream(
                        config.seed,
                        &[rng::tag("attack-mask"), j.label as u64, j.draw as u64, j.restart as u64, step as u64],
                    );
                    let site = SampleSite { index: i, label: j.label, rank: 0, class_size: 1 };
                    Occlusion::draw(policy, obj.geometry, &site, &mut r)
                })
                .collect::<Result<_>>()?;
            Some(sites)
        } else {
            None
        };
        let mut eval = obj.evaluate(&cands, &labels, occl.as_deref(), true)?;
        for i in 0..n {
            let loss = eval.losses[i] as f64;
            if !loss.is_finite() && failure[i].is_none() {
                failure[i] = Some(format!("non-finite objective at step {step}"));
            }
            if failure[i].is_some() {
                eval.grad[i * d..(i + 1) * d].fill(0.0);
            }
            traces[i].push(loss);
        }
        opt.step(&mut cands, &eval.grad);
        if clamp {
            cands.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        }
    }
    let last = obj.evaluate(&cands, &labels, None, false)?;
    let images = obj.images(&cands, n)?;
    let img_len = obj.geometry.len();
    Ok(jobs
        .iter()
        .enumerate()
        .map(|(i, &job)| {
            let trace = std::mem::take(&mut traces[i]);
            let initial_objective = initial.as_ref().map_or(trace[0], |v| v[i] as f64);
            let final_objective = last.losses[i] as f64;
            let mut fail = failure[i].take();
            if fail.is_none() && !final_objective.is_finite() {
                fail = Some("non-finite final objective".into());
            }
            JobOutcome {
                job,
                image: images[i * img_len..(i + 1) * img_len].to_vec(),
                trace: RestartTrace {
                    losses: trace,
                    initial_objective,
                    final_objective,
                    confidence: last.confidences[i] as f64,
                },
                failure: fail,
            }
        })
        .collect())
}

fn provenance(target: &TrainedModel, decoder: Option<&TrainedModel>, config: &AttackConfig) -> AttackProvenance {
    AttackProvenance {
        config: config.clone(),
        config_hash: config.hash(),
        target_id: target.id(),
        decoder_id: match config.strategy {
            Strategy::LatentSpace => decoder.map(TrainedModel::id),
            Strategy::PixelSpace => None,
        },
    }
}

/// Runs `draws` independent inversions for every label in `labels`.
///
/// Each (label, draw, restart) candidate has its own random stream, so the
/// result for a label does not depend on which other labels are attacked.
/// Labels whose optimization diverges are listed in `failed`.
pub fn attack_all(
    target: &TrainedModel,
    decoder: Option<&TrainedModel>,
    labels: &[u32],
    config: &AttackConfig,
    draws: usize,
) -> Result<AttackRun> {
    config.validate()?;
    if labels.is_empty() || draws == 0 {
        return Err(Error::Config("attack needs at least one label and one draw".into()));
    }
    let t_params = target.params.as_slice();
    let obj = Objective::new(target, t_params, decoder.map(|d| (d, d.params.as_slice())), config)?;
    let policy = if config.adaptive {
        resolve_adaptive_policy(target, config)?
    } else {
        ErasePolicy::no_defense()
    };
    let mut failed = Vec::new();
    let mut valid = Vec::new();
    for &label in labels {
        if (label as usize) < obj.classes {
            valid.push(label);
        } else {
            failed.push(FailedLabel {
                label,
                reason: format!("label outside the target's {} classes", obj.classes),
            });
        }
    }
    let jobs: Vec<Job> = valid
        .iter()
        .flat_map(|&label| {
            (0..draws).flat_map(move |draw| (0..config.restarts).map(move |restart| Job { label, draw, restart }))
        })
        .collect();
    let mut outcomes = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(CANDIDATE_CHUNK) {
        outcomes.extend(run_chunk(&obj, chunk, config, &policy)?);
    }

    let prov = provenance(target, decoder, config);
    let mut results = Vec::new();
    for (li, &label) in valid.iter().enumerate() {
        let per_label = &outcomes[li * draws * config.restarts..(li + 1) * draws * config.restarts];
        if let Some(bad) = per_label.iter().find_map(|o| o.failure.clone()) {
            failed.push(FailedLabel { label, reason: bad });
            continue;
        }
        let reconstructions = per_label
            .chunks(config.restarts)
            .map(|group| {
                let selected = group
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, o)| if o.trace.confidence > group[best].trace.confidence { i } else { best });
                Reconstruction {
                    label,
                    draw: group[0].job.draw,
                    image: group[selected].image.clone(),
                    selected,
                    confidence: group[selected].trace.confidence,
                    restarts: group.iter().map(|o| o.trace.clone()).collect(),
                }
            })
            .collect();
        results.push(AttackResult {
            label,
            geometry: obj.geometry,
            reconstructions,
            provenance: prov.clone(),
        });
    }
    Ok(AttackRun {
        results,
        failed,
        geometry: obj.geometry,
        provenance: prov,
    })
}

/// Inverts a single label: one reconstruction chosen among `config.restarts`.
pub fn invert_identity(
    target: &TrainedModel,
    label: u32,
    decoder: Option<&TrainedModel>,
    config: &AttackConfig,
) -> Result<AttackResult> {
    if label as usize >= target.arch.num_classes() {
        return Err(Error::Config(format!(
            "label {label} outside the target's {} classes",
            target.arch.num_classes()
        )));
    }
    let mut run = attack_all(target, decoder, &[label], config, 1)?;
    match run.failed.pop() {
        Some(f) => Err(Error::Divergence(f.reason)),
        None => Ok(run.results.remove(0)),
    }
}

/// Objective value and gradient for one candidate, in double precision.
///
/// `occlusion_seed` applies one fixed adaptive occlusion drawn from that seed.
pub fn objective_and_gradient(
    target: &TrainedModel,
    decoder: Option<&TrainedModel>,
    config: &AttackConfig,
    label: u32,
    candidate: &[f64],
    occlusion_seed: Option<u64>,
) -> Result<(f64, Vec<f64>)> {
    let t_params = target.params_f64();
    let d_params = decoder.map(TrainedModel::params_f64);
    let obj = Objective::new(
        target,
        &t_params,
        decoder.zip(d_params.as_deref()),
        config,
    )?;
    if candidate.len() != obj.candidate_len() {
        return Err(Error::Shape(format!(
            "candidate has {} values, objective expects {}",
            candidate.len(),
            obj.candidate_len()
        )));
    }
    let occl = match occlusion_seed {
        Some(seed) => {
            let policy = resolve_adaptive_policy(target, config)?;
            let site = SampleSite { index: 0, label, rank: 0, class_size: 1 };
            Some(vec![Occlusion::draw(&policy, obj.geometry, &site, &mut rng::stream(seed, &[]))?])
        }
        None => None,
    };
    let eval = obj.evaluate(candidate, &[label], occl.as_deref(), true)?;
    Ok((eval.losses[0], eval.grad))
}

/// Length of the search variable for `config` against `target`.
pub fn candidate_len(target: &TrainedModel, decoder: Option<&TrainedModel>, config: &AttackConfig) -> Result<usize> {
    Objective::new(target, &target.params, decoder.map(|d| (d, d.params.as_slice())), config).map(|o| o.candidate_len())
}

#[derive(Serialize, Deserialize)]
struct SidecarEntry {
    label: u32,
    draw: usize,
    restart: usize,
    confidence: f64,
    config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format_version: u32,
    width: usize,
    height: usize,
    channels: usize,
    target_id: String,
    decoder_id: Option<String>,
    config_hash: String,
    entries: Vec<SidecarEntry>,
    failed: Vec<FailedLabel>,
}

/// Writes `images.bin`, `labels.bin` and `reconstructions.json` under `dir`.
pub fn save_reconstructions(run: &AttackRun, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let batch = run.to_batch()?;
    let labels: Vec<u8> = batch.labels.iter().flat_map(|l| l.to_le_bytes()).collect();
    let sidecar = Sidecar {
        format_version: 1,
        width: run.geometry.width,
        height: run.geometry.height,
        channels: run.geometry.channels,
        target_id: run.provenance.target_id.clone(),
        decoder_id: run.provenance.decoder_id.clone(),
        config_hash: run.provenance.config_hash.clone(),
        entries: run
            .reconstructions()
            .map(|r| SidecarEntry {
                label: r.label,
                draw: r.draw,
                restart: r.selected,
                confidence: r.confidence,
                config_hash: run.provenance.config_hash.clone(),
            })
            .collect(),
        failed: run.failed.clone(),
    };
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    };
    write("images.bin", &f32s_to_le_bytes(&batch.data))?;
    write("labels.bin", &labels)?;
    write(
        "reconstructions.json",
        &serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes"),
    )
}

/// Reads reconstructions written by [`save_reconstructions`] as a labelled batch.
pub fn load_reconstructions(dir: &Path) -> Result<ImageBatch> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read(&p).map_err(|e| Error::io(&p, e))
    };
    let side_path = dir.join("reconstructions.json");
    let sidecar: Sidecar =
        serde_json::from_slice(&read("reconstructions.json")?).map_err(|e| Error::format(&side_path, e.to_string()))?;
    let g = Geometry::new(sidecar.width, sidecar.height, sidecar.channels);
    let n = sidecar.entries.len();
    let images = read("images.bin")?;
    if images.len() != n * g.len() * 4 {
        return Err(Error::format(
            dir.join("images.bin"),
            format!("expected {} bytes, found {}", n * g.len() * 4, images.len()),
        ));
    }
    let labels = read("labels.bin")?;
    if labels.len() != n * 4 {
        return Err(Error::format(
            dir.join("labels.bin"),
            format!("expected {} bytes, found {}", n * 4, labels.len()),
        ));
    }
    ImageBatch::new(
        g,
        crate::synthdata::f32s_from_le_bytes(&images),
        labels.chunks_exact(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect(),
    )
}
