use serde::{Deserialize, Serialize};

use crate::batch::Geometry;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArchKind {
    ClassifierSmall,
    ClassifierEval,
    Decoder,
    Encoder,
}

/// Activation shape for one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Image { channels: usize, height: usize, width: usize },
    Flat { len: usize },
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Image { channels, height, width } => channels * height * width,
            Shape::Flat { len } => len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image(g: Geometry) -> Shape {
        Shape::Image {
            channels: g.channels,
            height: g.height,
            width: g.width,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { channels: usize, kernel: usize, stride: usize, padding: usize },
    ConvTranspose { channels: usize, kernel: usize, stride: usize, padding: usize },
    Linear { features: usize },
    Reshape { channels: usize, height: usize, width: usize },
    /// Per-channel mean over the spatial grid.
    GlobalAvgPool,
    Relu,
    Sigmoid,
}

impl LayerSpec {
    pub const fn conv3(channels: usize, stride: usize) -> Self {
        LayerSpec::Conv { channels, kernel: 3, stride, padding: 1 }
    }

    /// 4x4 transposed convolution that doubles the spatial size.
    pub const fn up2(channels: usize) -> Self {
        LayerSpec::ConvTranspose { channels, kernel: 4, stride: 2, padding: 1 }
    }
}

/// Network description: input shape plus an ordered layer list.
///
/// `feature_dim` is the width of the activation feeding the final linear map
/// (classifiers; for decoders the pre-sigmoid image) and `outputs` the width of
/// the final layer (class count or, for encoders, latent size). Decoders take
/// `latent_dim` inputs.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchSpec {
    pub kind: ArchKind,
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
    pub feature_dim: usize,
    pub outputs: usize,
}

pub const DEFAULT_FEATURE_DIM: usize = 128;
pub const EVAL_FEATURE_DIM: usize = 160;
pub const DEFAULT_LATENT_DIM: usize = 64;

fn classifier(kind: ArchKind, g: Geometry, stages: &[usize], feature_dim: usize, classes: usize) -> ArchSpec {
    let mut layers = Vec::new();
    for &c in stages {
        layers.push(LayerSpec::conv3(c, 2));
        layers.push(LayerSpec::Relu);
    }
    layers.extend([
        LayerSpec::Linear { features: feature_dim },
        LayerSpec::Relu,
        LayerSpec::Linear { features: classes },
    ]);
    ArchSpec {
        kind,
        input: Shape::image(g),
        layers,
        feature_dim,
        outputs: classes,
    }
}

impl ArchSpec {
    /// Target model: three stride-2 conv stages (16, 32, 64) and a 128-wide penultimate layer.
    pub fn classifier_small(g: Geometry, classes: usize) -> ArchSpec {
        classifier(ArchKind::ClassifierSmall, g, &[16, 32, 64], DEFAULT_FEATURE_DIM, classes)
    }

    /// Evaluation model: four stride-2 conv stages (24, 48, 96, 96), 160-wide penultimate layer.
    pub fn classifier_eval(g: Geometry, classes: usize) -> ArchSpec {
        classifier(ArchKind::ClassifierEval, g, &[24, 48, 96, 96], EVAL_FEATURE_DIM, classes)
    }

    /// Latent-to-image generator: linear to a 4x4 grid (at 32x32 output), then three doubling
    /// transposed convolutions and a sigmoid.
    pub fn decoder(g: Geometry, latent_dim: usize) -> Result<ArchSpec> {
        if g.width % 8 != 0 || g.height % 8 != 0 {
            return Err(Error::Config(format!("decoder needs sides divisible by 8, got {}x{}", g.width, g.height)));
        }
        let (h, w) = (g.height / 8, g.width / 8);
        let base = 64;
        Ok(ArchSpec {
            kind: ArchKind::Decoder,
            input: Shape::Flat { len: latent_dim },
            layers: vec![
                LayerSpec::Linear { features: base * h * w },
                LayerSpec::Relu,
                LayerSpec::Reshape { channels: base, height: h, width: w },
                LayerSpec::up2(32),
                LayerSpec::Relu,
                LayerSpec::up2(16),
                LayerSpec::Relu,
                LayerSpec::up2(g.channels),
                LayerSpec::Sigmoid,
            ],
            feature_dim: g.len(),
            outputs: g.len(),
        })
    }

    /// Image-to-latent map used only while fitting a decoder.
    pub fn encoder(g: Geometry, latent_dim: usize) -> ArchSpec {
        let mut layers = Vec::new();
        for c in [16, 32, 64] {
            layers.push(LayerSpec::conv3(c, 2));
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::Linear { features: latent_dim });
        let feature_dim = 64 * g.height.div_ceil(8) * g.width.div_ceil(8);
        ArchSpec {
            kind: ArchKind::Encoder,
            input: Shape::image(g),
            layers,
            feature_dim,
            outputs: latent_dim,
        }
    }

    pub fn is_classifier(&self) -> bool {
        matches!(self.kind, ArchKind::ClassifierSmall | ArchKind::ClassifierEval)
    }

    pub fn num_classes(&self) -> usize {
        self.outputs
    }

    pub fn latent_dim(&self) -> usize {
        self.input.len()
    }

    pub fn input_geometry(&self) -> Option<Geometry> {
        match self.input {
            Shape::Image { channels, height, width } => Some(Geometry::new(width, height, channels)),
            Shape::Flat { .. } => None,
        }
    }
}
