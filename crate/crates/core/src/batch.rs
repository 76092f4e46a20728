use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Image dimensions shared by a dataset and the models trained on it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Geometry {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

impl Geometry {
    pub const fn new(width: usize, height: usize, channels: usize) -> Self {
        Geometry {
            width,
            height,
            channels,
        }
    }

    pub const fn pixels(&self) -> usize {
        self.width * self.height
    }

    /// Number of scalars in one `[C, H, W]` image.
    pub const fn len(&self) -> usize {
        self.width * self.height * self.channels
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `N` images stored C-order as `[N, C, H, W]` with one label per image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub geometry: Geometry,
    pub data: Vec<f32>,
    pub labels: Vec<u32>,
}

impl ImageBatch {
    pub fn new(geometry: Geometry, data: Vec<f32>, labels: Vec<u32>) -> Result<Self> {
        if data.len() != labels.len() * geometry.len() {
            return Err(Error::Shape(format!(
                "{} scalars cannot hold {} images of {}x{}x{}",
                data.len(),
                labels.len(),
                geometry.channels,
                geometry.height,
                geometry.width
            )));
        }
        Ok(ImageBatch {
            geometry,
            data,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.geometry.len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn image_mut(&mut self, i: usize) -> &mut [f32] {
        let n = self.geometry.len();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn images(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.geometry.len().max(1))
    }

    /// Copies the listed rows into a new batch, in the order given.
    pub fn select(&self, indices: &[usize]) -> ImageBatch {
        let mut data = Vec::with_capacity(indices.len() * self.geometry.len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        ImageBatch {
            geometry: self.geometry,
            data,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn concat(&self, other: &ImageBatch) -> Result<ImageBatch> {
        if self.geometry != other.geometry {
            return Err(Error::Shape("cannot concatenate batches of different geometry".into()));
        }
        let mut out = self.clone();
        out.data.extend_from_slice(&other.data);
        out.labels.extend_from_slice(&other.labels);
        Ok(out)
    }

    /// Per-channel mean intensity over every image in the batch.
    pub fn channel_means(&self) -> Vec<f32> {
        let g = self.geometry;
        let mut sums = vec![0f64; g.channels];
        for img in self.images() {
            for (c, plane) in img.chunks_exact(g.pixels()).enumerate() {
                sums[c] += plane.iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        let count = (self.len() * g.pixels()).max(1) as f64;
        sums.into_iter().map(|s| (s / count) as f32).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0)
    }

    /// Indices of all samples carrying `label`, in storage order.
    pub fn indices_of(&self, label: u32) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == label)
            .map(|(i, _)| i)
            .collect()
    }
}
