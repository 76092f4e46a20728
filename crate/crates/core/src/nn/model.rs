use std::fs;
use std::path::Path;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::arch::ArchSpec;
use super::loss::argmax;
use super::network::Network;
use super::train::{EpochStats, TrainRecord};
use crate::batch::ImageBatch;
use crate::error::{Error, Result};

/// Rows per forward pass when evaluating large batches.
pub const EVAL_CHUNK: usize = 256;

/// Architecture, flat parameters and training history of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub arch: ArchSpec,
    pub params: Vec<f32>,
    pub history: Vec<EpochStats>,
    pub train_config: Option<TrainRecord>,
}

/// Deterministically initialized, untrained model.
pub fn build_model(arch: &ArchSpec, seed: u64) -> Result<TrainedModel> {
    let net = Network::new(arch)?;
    Ok(TrainedModel {
        arch: arch.clone(),
        params: net.init_params(seed),
        history: Vec::new(),
        train_config: None,
    })
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    arch: ArchSpec,
    params_sha256: String,
    params: String,
    history: Vec<EpochStats>,
    train_config: Option<TrainRecord>,
}

fn params_bytes(params: &[f32]) -> Vec<u8> {
    crate::synthdata::f32s_to_le_bytes(params)
}

impl TrainedModel {
    pub fn network(&self) -> Result<Network> {
        let net = Network::new(&self.arch)?;
        if net.num_params() != self.params.len() {
            return Err(Error::Shape(format!(
                "architecture needs {} parameters, model has {}",
                net.num_params(),
                self.params.len()
            )));
        }
        Ok(net)
    }

    /// Content hash of architecture and parameters.
    pub fn id(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.arch).expect("arch serializes"));
        h.update(params_bytes(&self.params));
        hex::encode(&h.finalize()[..12])
    }

    pub fn params_f64(&self) -> Vec<f64> {
        self.params.iter().map(|&v| v as f64).collect()
    }

    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.history.last().and_then(|h| h.test_acc)
    }

    pub fn to_json(&self) -> Vec<u8> {
        let bytes = params_bytes(&self.params);
        let ck = Checkpoint {
            format_version: 1,
            arch: self.arch.clone(),
            params_sha256: hex::encode(Sha256::digest(&bytes)),
            params: base64::engine::general_purpose::STANDARD.encode(&bytes),
            history: self.history.clone(),
            train_config: self.train_config.clone(),
        };
        serde_json::to_vec_pretty(&ck).expect("checkpoint serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<TrainedModel> {
        let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_slice(&raw).map_err(|e| Error::format(path, e.to_string()))?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(ck.params.as_bytes())
            .map_err(|e| Error::format(path, e.to_string()))?;
        if hex::encode(Sha256::digest(&bytes)) != ck.params_sha256 {
            return Err(Error::format(path, "parameter hash mismatch"));
        }
        let model = TrainedModel {
            arch: ck.arch,
            params: crate::synthdata::f32s_from_le_bytes(&bytes),
            history: ck.history,
            train_config: ck.train_config,
        };
        model.network()?;
        if model.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Invariant(format!("{} holds non-finite parameters", path.display())));
        }
        Ok(model)
    }

    /// Maps `[N, latent_dim]` codes to `[N, C, H, W]` images (decoders only).
    pub fn decode(&self, latents: &[f32], n: usize) -> Result<Vec<f32>> {
        let net = self.network()?;
        let mut out = Vec::with_capacity(n * net.output_shape().len());
        let d = net.input_shape().len();
        for chunk in latents.chunks(EVAL_CHUNK * d) {
            let rows = chunk.len() / d;
            let acts = net.forward(&self.params, chunk, rows)?;
            out.extend(net.output(&acts));
        }
        Ok(out)
    }
}

/// Penultimate activations and logits for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub features: Vec<f32>,
    pub logits: Vec<f32>,
    pub labels: Vec<u32>,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f32] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn predictions(&self) -> Vec<u32> {
        self.logits.chunks_exact(self.num_classes).map(|r| argmax(r) as u32).collect()
    }

    /// Fraction of rows whose top-1 class equals the stored label.
    pub fn accuracy(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let hits = self.predictions().iter().zip(&self.labels).filter(|(p, l)| p == l).count();
        hits as f64 / self.len() as f64
    }

    pub fn select(&self, rows: &[usize]) -> FeatureSet {
        FeatureSet {
            features: rows.iter().flat_map(|&i| self.feature(i).iter().copied()).collect(),
            logits: rows
                .iter()
                .flat_map(|&i| self.logits[i * self.num_classes..(i + 1) * self.num_classes].iter().copied())
                .collect(),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            feature_dim: self.feature_dim,
            num_classes: self.num_classes,
        }
    }

    pub fn rows_with_label(&self, label: u32) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == label).collect()
    }
}

/// Deterministic forward pass returning penultimate features and logits.
pub fn extract_features(model: &TrainedModel, batch: &ImageBatch) -> Result<FeatureSet> {
    if !model.arch.is_classifier() {
        return Err(Error::Config(format!("{:?} is not a classifier", model.arch.kind)));
    }
    if model.arch.input_geometry() != Some(batch.geometry) {
        return Err(Error::Shape(format!(
            "model expects {:?}, batch is {:?}",
            model.arch.input_geometry(),
            batch.geometry
        )));
    }
    let net = model.network()?;
    let d = batch.geometry.len();
    let mut features = Vec::with_capacity(batch.len() * net.penultimate_len());
    let mut logits = Vec::with_capacity(batch.len() * model.arch.num_classes());
    for chunk in batch.data.chunks(EVAL_CHUNK * d.max(1)) {
        let acts = net.forward(&model.params, chunk, chunk.len() / d)?;
        features.extend_from_slice(net.penultimate(&acts));
        logits.extend(net.output(&acts));
    }
    Ok(FeatureSet {
        features,
        logits,
        labels: batch.labels.clone(),
        feature_dim: net.penultimate_len(),
        num_classes: model.arch.num_classes(),
    })
}
