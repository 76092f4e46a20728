//! Occlusion masks for training-time erasure.
//!
//! The default scheme erases one square region per image per iteration: an
//! area fraction `a_e` is drawn uniformly from `[a_lo, a_hi]`, turned into an
//! integer rectangle and placed at a random corner that keeps it inside the
//! image. The ablation schemes (fixed placement, whole-image blanking, random
//! pixels, several small patches) share the same sampler and fill strategies.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::{Geometry, ImageBatch};
use crate::error::{Error, Result};
use crate::rng;

/// Corner draws before falling back to a uniform draw over the feasible rectangle.
pub const MAX_CORNER_TRIES: usize = 100;

/// Axis-aligned erase rectangle; `(x, y)` is the top-left pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EraseRegion {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl EraseRegion {
    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.width >= 1
            && self.height >= 1
            && self.x + self.width <= width
            && self.y + self.height <= height
    }

    pub fn contains(&self, col: usize, row: usize) -> bool {
        col >= self.x && col < self.x + self.width && row >= self.y && row < self.y + self.height
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    RandomErase,
    FixedErase,
    EntireErase,
    RandomPixels,
    MultiPatch,
    NoDefense,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FillKind {
    Constant,
    UniformRandom,
    ChannelMean,
}

/// What erased pixels are replaced with.
///
/// An empty `channel_means` under `ChannelMean` means "use the training
/// data's own channel means"; callers resolve it with [`FillStrategy::resolved`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FillStrategy {
    pub kind: FillKind,
    #[serde(default)]
    pub constant_value: f32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub channel_means: Vec<f32>,
}

impl Default for FillStrategy {
    fn default() -> Self {
        FillStrategy::channel_mean(Vec::new())
    }
}

impl FillStrategy {
    pub fn constant(value: f32) -> Self {
        FillStrategy {
            kind: FillKind::Constant,
            constant_value: value,
            channel_means: Vec::new(),
        }
    }

    pub fn uniform() -> Self {
        FillStrategy {
            kind: FillKind::UniformRandom,
            constant_value: 0.0,
            channel_means: Vec::new(),
        }
    }

    pub fn channel_mean(means: Vec<f32>) -> Self {
        FillStrategy {
            kind: FillKind::ChannelMean,
            constant_value: 0.0,
            channel_means: means,
        }
    }

    /// Fills in data-derived channel means if none were configured.
    pub fn resolved(&self, data_means: &[f32]) -> FillStrategy {
        let mut out = self.clone();
        if out.kind == FillKind::ChannelMean && out.channel_means.is_empty() {
            out.channel_means = data_means.to_vec();
        }
        out
    }

    pub fn validate(&self, channels: Option<usize>) -> Result<()> {
        let in_unit = |v: f32| (0.0..=1.0).contains(&v);
        match self.kind {
            FillKind::Constant if !in_unit(self.constant_value) => Err(Error::InvalidPolicy(
                format!("constant fill {} outside [0,1]", self.constant_value),
            )),
            FillKind::ChannelMean => {
                if !self.channel_means.iter().all(|&m| in_unit(m)) {
                    return Err(Error::InvalidPolicy("channel means must lie in [0,1]".into()));
                }
                match channels {
                    Some(c) if self.channel_means.len() != c => Err(Error::Shape(format!(
                        "fill has {} channel means for a {c}-channel image",
                        self.channel_means.len()
                    ))),
                    _ => Ok(()),
                }
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErasePolicy {
    pub scheme: Scheme,
    #[serde(default = "default_a_lo")]
    pub a_lo: f64,
    #[serde(default = "default_a_hi")]
    pub a_hi: f64,
    #[serde(default = "default_aspect")]
    pub aspect: f64,
    #[serde(default = "default_patches")]
    pub patches: usize,
    #[serde(default)]
    pub pixel_prob: f64,
    #[serde(default)]
    pub ee_fraction: f64,
    #[serde(default)]
    pub fill: FillStrategy,
}

fn default_a_lo() -> f64 {
    0.1
}
fn default_a_hi() -> f64 {
    0.4
}
fn default_aspect() -> f64 {
    1.0
}
fn default_patches() -> usize {
    4
}

impl Default for ErasePolicy {
    fn default() -> Self {
        ErasePolicy::no_defense()
    }
}

impl ErasePolicy {
    fn base(scheme: Scheme) -> Self {
        ErasePolicy {
            scheme,
            a_lo: default_a_lo(),
            a_hi: default_a_hi(),
            aspect: default_aspect(),
            patches: default_patches(),
            pixel_prob: 0.0,
            ee_fraction: 0.0,
            fill: FillStrategy::default(),
        }
    }

    pub fn no_defense() -> Self {
        ErasePolicy::base(Scheme::NoDefense)
    }

    /// Random erasing with `a_e ~ U[a_lo, a_hi]`.
    pub fn random_erase(a_lo: f64, a_hi: f64) -> Self {
        ErasePolicy {
            a_lo,
            a_hi,
            ..ErasePolicy::base(Scheme::RandomErase)
        }
    }

    pub fn fixed_erase(a_lo: f64, a_hi: f64) -> Self {
        ErasePolicy {
            a_lo,
            a_hi,
            ..ErasePolicy::base(Scheme::FixedErase)
        }
    }

    pub fn entire_erase(fraction: f64) -> Self {
        ErasePolicy {
            ee_fraction: fraction,
            ..ErasePolicy::base(Scheme::EntireErase)
        }
    }

    pub fn random_pixels(p: f64) -> Self {
        ErasePolicy {
            pixel_prob: p,
            fill: FillStrategy::uniform(),
            ..ErasePolicy::base(Scheme::RandomPixels)
        }
    }

    /// `patches` regions whose combined expected area matches single-region
    /// erasing over `[a_lo, a_hi]`.
    pub fn multi_patch(patches: usize, a_lo: f64, a_hi: f64) -> Self {
        ErasePolicy {
            patches,
            a_lo,
            a_hi,
            ..ErasePolicy::base(Scheme::MultiPatch)
        }
    }

    pub fn with_fill(mut self, fill: FillStrategy) -> Self {
        self.fill = fill;
        self
    }

    pub fn is_identity(&self) -> bool {
        self.scheme == Scheme::NoDefense
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidPolicy(m));
        if self.scheme == Scheme::NoDefense {
            return Ok(());
        }
        if !(self.a_lo > 0.0 && self.a_lo <= self.a_hi && self.a_hi <= 1.0) {
            return bad(format!(
                "area range must satisfy 0 < a_lo <= a_hi <= 1, got [{}, {}]",
                self.a_lo, self.a_hi
            ));
        }
        if !(self.aspect > 0.0 && self.aspect.is_finite()) {
            return bad(format!("aspect ratio must be positive, got {}", self.aspect));
        }
        if !(0.0..=1.0).contains(&self.pixel_prob) {
            return bad(format!("pixel_prob {} outside [0,1]", self.pixel_prob));
        }
        if !(0.0..=1.0).contains(&self.ee_fraction) {
            return bad(format!("ee_fraction {} outside [0,1]", self.ee_fraction));
        }
        if self.patches == 0 {
            return bad("patches must be at least 1".into());
        }
        self.fill.validate(None)
    }
}

/// Which pixels of one image get replaced.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskSpec {
    Empty,
    Regions(Vec<EraseRegion>),
    Pixels {
        width: usize,
        height: usize,
        mask: Vec<bool>,
    },
    Whole,
}

impl MaskSpec {
    pub fn is_empty(&self) -> bool {
        match self {
            MaskSpec::Empty => true,
            MaskSpec::Regions(r) => r.is_empty(),
            MaskSpec::Pixels { mask, .. } => !mask.iter().any(|&m| m),
            MaskSpec::Whole => false,
        }
    }

    pub fn is_masked(&self, col: usize, row: usize, width: usize) -> bool {
        match self {
            MaskSpec::Empty => false,
            MaskSpec::Regions(rs) => rs.iter().any(|r| r.contains(col, row)),
            MaskSpec::Pixels { mask, .. } => mask[row * width + col],
            MaskSpec::Whole => true,
        }
    }

    /// Per-pixel boolean view (`H * W`, row-major).
    pub fn to_bitmap(&self, width: usize, height: usize) -> Vec<bool> {
        match self {
            MaskSpec::Empty => vec![false; width * height],
            MaskSpec::Whole => vec![true; width * height],
            MaskSpec::Pixels { mask, .. } => mask.clone(),
            MaskSpec::Regions(rs) => {
                let mut bits = vec![false; width * height];
                for r in rs {
                    for row in r.y..r.y + r.height {
                        bits[row * width + r.x..row * width + r.x + r.width].fill(true);
                    }
                }
                bits
            }
        }
    }

    pub fn masked_count(&self, width: usize, height: usize) -> usize {
        match self {
            MaskSpec::Empty => 0,
            MaskSpec::Whole => width * height,
            MaskSpec::Regions(rs) if rs.len() == 1 => rs[0].area(),
            _ => self.to_bitmap(width, height).iter().filter(|&&b| b).count(),
        }
    }

    fn check_geometry(&self, width: usize, height: usize) -> Result<()> {
        match self {
            MaskSpec::Regions(rs) => {
                if let Some(r) = rs.iter().find(|r| !r.fits(width, height)) {
                    return Err(Error::Shape(format!(
                        "region {r:?} does not fit a {width}x{height} image"
                    )));
                }
            }
            MaskSpec::Pixels {
                width: w,
                height: h,
                mask,
            } => {
                if (*w, *h) != (width, height) || mask.len() != width * height {
                    return Err(Error::Shape(format!(
                        "pixel mask {w}x{h} applied to a {width}x{height} image"
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Integer rectangle dimensions for a target area fraction.
pub fn region_dims(width: usize, height: usize, area_fraction: f64, aspect: f64) -> (usize, usize) {
    let target = (width * height) as f64 * area_fraction;
    let w = (target * aspect).sqrt().round() as usize;
    let h = (target / aspect).sqrt().round() as usize;
    (w.clamp(1, width), h.clamp(1, height))
}

/// Places a `w x h` rectangle: uniform corner draws inside the image,
/// redrawn until the rectangle fits.
fn place_region<R: Rng>(width: usize, height: usize, w: usize, h: usize, rng: &mut R) -> EraseRegion {
    for _ in 0..MAX_CORNER_TRIES {
        let x = rng.random_range(0..width);
        let y = rng.random_range(0..height);
        if x + w <= width && y + h <= height {
            return EraseRegion {
                x,
                y,
                width: w,
                height: h,
            };
        }
    }
    EraseRegion {
        x: rng.random_range(0..=width - w),
        y: rng.random_range(0..=height - h),
        width: w,
        height: h,
    }
}

fn sample_in_range<R: Rng>(
    width: usize,
    height: usize,
    lo: f64,
    hi: f64,
    aspect: f64,
    rng: &mut R,
) -> EraseRegion {
    let a_e = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let (w, h) = region_dims(width, height, a_e, aspect);
    place_region(width, height, w, h, rng)
}

/// Draws one erase rectangle for the single-region schemes.
pub fn sample_erase_region<R: Rng>(
    width: usize,
    height: usize,
    policy: &ErasePolicy,
    rng: &mut R,
) -> Result<EraseRegion> {
    if !matches!(policy.scheme, Scheme::RandomErase | Scheme::FixedErase) {
        return Err(Error::InvalidPolicy(format!(
            "{:?} does not sample single regions",
            policy.scheme
        )));
    }
    if width < 4 || height < 4 {
        return Err(Error::Geometry(format!("image {width}x{height} is smaller than 4x4")));
    }
    policy.validate()?;
    let region = sample_in_range(width, height, policy.a_lo, policy.a_hi, policy.aspect, rng);
    if !region.fits(width, height) {
        return Err(Error::Geometry(format!("no placement for {region:?}")));
    }
    Ok(region)
}

/// Where a sample sits in its dataset; the mask for a sample is a function of
/// this, the epoch, and the seeds alone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleSite {
    pub index: usize,
    pub label: u32,
    /// Position among the samples sharing `label`.
    pub rank: usize,
    pub class_size: usize,
}

impl SampleSite {
    /// Sites for every sample of a labelled collection, in storage order.
    pub fn from_labels(labels: &[u32]) -> Vec<SampleSite> {
        let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
        let mut sizes = vec![0usize; classes];
        for &l in labels {
            sizes[l as usize] += 1;
        }
        let mut seen = vec![0usize; classes];
        labels
            .iter()
            .enumerate()
            .map(|(index, &label)| {
                let rank = seen[label as usize];
                seen[label as usize] += 1;
                SampleSite {
                    index,
                    label,
                    rank,
                    class_size: sizes[label as usize],
                }
            })
            .collect()
    }
}

const TAG_FIXED: u64 = 0xF1CED;
const TAG_ENTIRE: u64 = 0xE471E;

/// Builds the mask for one sample.
///
/// `seed` keys the placement of fixed regions (per image index, independent of
/// epoch) and the per-epoch whole-image subsets; `rng` supplies all fresh draws.
pub fn make_mask<R: Rng>(
    policy: &ErasePolicy,
    site: &SampleSite,
    epoch: u64,
    width: usize,
    height: usize,
    seed: u64,
    rng: &mut R,
) -> Result<MaskSpec> {
    policy.validate()?;
    Ok(match policy.scheme {
        Scheme::NoDefense => MaskSpec::Empty,
        Scheme::RandomErase => MaskSpec::Regions(vec![sample_erase_region(width, height, policy, rng)?]),
        Scheme::FixedErase => {
            let mut fixed = rng::stream(seed, &[TAG_FIXED, site.index as u64]);
            MaskSpec::Regions(vec![sample_erase_region(width, height, policy, &mut fixed)?])
        }
        Scheme::EntireErase => {
            let take = (policy.ee_fraction * site.class_size as f64).round() as usize;
            let mut order: Vec<usize> = (0..site.class_size).collect();
            order.shuffle(&mut rng::stream(seed, &[TAG_ENTIRE, epoch, site.label as u64]));
            if order[..take.min(site.class_size)].contains(&site.rank) {
                MaskSpec::Whole
            } else {
                MaskSpec::Empty
            }
        }
        Scheme::RandomPixels => MaskSpec::Pixels {
            width,
            height,
            mask: (0..width * height)
                .map(|_| rng.random_bool(policy.pixel_prob))
                .collect(),
        },
        Scheme::MultiPatch => {
            let p = policy.patches as f64;
            MaskSpec::Regions(
                (0..policy.patches)
                    .map(|_| sample_in_range(width, height, policy.a_lo / p, policy.a_hi / p, policy.aspect, rng))
                    .collect(),
            )
        }
    })
}

/// Replaces masked pixels in place; unmasked pixels are not touched.
pub fn apply_mask_in_place<R: Rng>(
    image: &mut [f32],
    geometry: Geometry,
    mask: &MaskSpec,
    fill: &FillStrategy,
    rng: &mut R,
) -> Result<()> {
    let Geometry {
        width,
        height,
        channels,
    } = geometry;
    if image.len() != geometry.len() {
        return Err(Error::Shape(format!(
            "image has {} scalars, geometry expects {}",
            image.len(),
            geometry.len()
        )));
    }
    mask.check_geometry(width, height)?;
    fill.validate(Some(channels))?;
    if mask.is_empty() {
        return Ok(());
    }
    let bits = mask.to_bitmap(width, height);
    for c in 0..channels {
        let plane = &mut image[c * width * height..(c + 1) * width * height];
        for (px, &hit) in plane.iter_mut().zip(&bits) {
            if hit {
                *px = match fill.kind {
                    FillKind::Constant => fill.constant_value,
                    FillKind::ChannelMean => fill.channel_means[c],
                    FillKind::UniformRandom => rng.random::<f32>(),
                };
            }
        }
    }
    Ok(())
}

pub fn apply_mask<R: Rng>(
    image: &[f32],
    geometry: Geometry,
    mask: &MaskSpec,
    fill: &FillStrategy,
    rng: &mut R,
) -> Result<Vec<f32>> {
    let mut out = image.to_vec();
    apply_mask_in_place(&mut out, geometry, mask, fill, rng)?;
    Ok(out)
}

/// Masks one sample using its own stream derived from `(seed, epoch, index)`.
pub fn mask_sample(
    image: &mut [f32],
    geometry: Geometry,
    site: &SampleSite,
    policy: &ErasePolicy,
    fill: &FillStrategy,
    epoch: u64,
    seed: u64,
) -> Result<MaskSpec> {
    let mut stream = rng::stream(seed, &[epoch, site.index as u64]);
    let mask = make_mask(policy, site, epoch, geometry.width, geometry.height, seed, &mut stream)?;
    apply_mask_in_place(image, geometry, &mask, fill, &mut stream)?;
    Ok(mask)
}

/// Masks the listed samples of a batch; `sites[i]` describes row `i`.
pub fn augment_sites(
    batch: &mut ImageBatch,
    sites: &[SampleSite],
    policy: &ErasePolicy,
    epoch: u64,
    seed: u64,
) -> Result<()> {
    if sites.len() != batch.len() {
        return Err(Error::Shape(format!("{} sites for {} samples", sites.len(), batch.len())));
    }
    if policy.is_identity() {
        return Ok(());
    }
    policy.validate()?;
    let geometry = batch.geometry;
    let fill = policy.fill.resolved(&batch.channel_means());
    fill.validate(Some(geometry.channels))?;
    batch
        .data
        .par_chunks_mut(geometry.len())
        .zip(sites.par_iter())
        .try_for_each(|(img, site)| {
            mask_sample(img, geometry, site, policy, &fill, epoch, seed).map(|_| ())
        })
}

/// Applies `policy` to every sample; row position is the sample's index.
///
/// An unresolved mean fill uses the batch's own channel means.
pub fn augment_batch(batch: &ImageBatch, policy: &ErasePolicy, epoch: u64, seed: u64) -> Result<ImageBatch> {
    if batch.is_empty() {
        return Err(Error::Shape("cannot augment an empty batch".into()));
    }
    let mut out = batch.clone();
    let sites = SampleSite::from_labels(&batch.labels);
    augment_sites(&mut out, &sites, policy, epoch, seed)?;
    Ok(out)
}
