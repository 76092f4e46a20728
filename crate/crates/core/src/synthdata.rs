//! Deterministic synthetic identity dataset ("SynthFaces").
//!
//! An identity is a parametric face-like composition of soft ellipses and
//! Gaussian blobs (background, face oval, hair cap, two eyes, mouth and one
//! identity mark). Every sample re-renders the identity under a sub-pixel
//! shift, a brightness change and additive noise. Private and public
//! identities come from disjoint seed families.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::batch::{Geometry, ImageBatch};
use crate::error::{Error, Result};
use crate::rng;

pub const FORMAT_VERSION: u32 = 1;

/// Per-sample nuisance parameters applied on top of the identity pattern.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    /// Maximum translation in pixels along each axis.
    pub max_shift: f32,
    pub noise_sigma: f32,
    /// Relative brightness change, `1 ± brightness`.
    pub brightness: f32,
}

impl Default for Perturbation {
    fn default() -> Self {
        Perturbation {
            max_shift: 3.0,
            noise_sigma: 0.03,
            brightness: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Private,
    Public,
}

impl Role {
    fn tag(self) -> u64 {
        match self {
            Role::Private => rng::tag("private"),
            Role::Public => rng::tag("public"),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Private => "private",
            Role::Public => "public",
        }
    }
}

/// One split: images plus the global identity id behind each local label.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub role: Role,
    pub batch: ImageBatch,
    pub identities: Vec<u32>,
    pub samples_per_identity: usize,
}

impl Split {
    pub fn num_identities(&self) -> usize {
        self.identities.len()
    }

    /// Holds out the last `test_per_identity` samples of every identity.
    pub fn train_test(&self, test_per_identity: usize) -> Result<(ImageBatch, ImageBatch)> {
        if test_per_identity == 0 || test_per_identity >= self.samples_per_identity {
            return Err(Error::Config(format!(
                "cannot hold out {test_per_identity} of {} samples per identity",
                self.samples_per_identity
            )));
        }
        let keep = self.samples_per_identity - test_per_identity;
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for label in 0..self.num_identities() as u32 {
            for (rank, idx) in self.batch.indices_of(label).into_iter().enumerate() {
                if rank < keep { train.push(idx) } else { test.push(idx) }
            }
        }
        Ok((self.batch.select(&train), self.batch.select(&test)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub num_identities: usize,
    pub samples_per_identity: usize,
    pub perturbation: Perturbation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub private: Split,
    pub public: Split,
    pub geometry: Geometry,
    pub provenance: Provenance,
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f32,
    cy: f32,
    rx: f32,
    ry: f32,
    color: [f32; 3],
}

#[derive(Clone, Copy, Debug)]
struct Blob {
    cx: f32,
    cy: f32,
    sx: f32,
    sy: f32,
    color: [f32; 3],
}

/// Identity pattern in unit coordinates (0..1 across the image).
#[derive(Clone, Debug)]
struct Identity {
    background: [f32; 3],
    face: Ellipse,
    hair: Ellipse,
    blobs: Vec<Blob>,
}

fn color<R: Rng>(rng: &mut R, lo: f32, hi: f32) -> [f32; 3] {
    [0; 3].map(|_| rng.random_range(lo..hi))
}

impl Identity {
    fn sample<R: Rng>(rng: &mut R) -> Self {
        let cx = 0.5 + rng.random_range(-0.05..0.05);
        let cy = 0.54 + rng.random_range(-0.05..0.05);
        let rx = rng.random_range(0.24..0.34);
        let ry = rng.random_range(0.30..0.40);
        let face = Ellipse { cx, cy, rx, ry, color: color(rng, 0.35, 0.95) };
        let hair = Ellipse {
            cx: cx + rng.random_range(-0.04..0.04),
            cy: cy - ry * rng.random_range(0.75..0.95),
            rx: rx * rng.random_range(0.9..1.2),
            ry: ry * rng.random_range(0.3..0.6),
            color: color(rng, 0.0, 0.7),
        };
        let eye_dx = rng.random_range(0.08..0.15);
        let eye_y = cy - rng.random_range(0.02..0.10);
        let eye_s = rng.random_range(0.025..0.05);
        let eye_color = color(rng, 0.0, 1.0);
        let mouth = Blob {
            cx: cx + rng.random_range(-0.03..0.03),
            cy: cy + rng.random_range(0.12..0.22),
            sx: rng.random_range(0.05..0.12),
            sy: rng.random_range(0.015..0.035),
            color: color(rng, 0.0, 1.0),
        };
        let mark = Blob {
            cx: cx + rng.random_range(-0.2..0.2),
            cy: cy + rng.random_range(-0.15..0.2),
            sx: rng.random_range(0.03..0.07),
            sy: rng.random_range(0.03..0.07),
            color: color(rng, 0.0, 1.0),
        };
        let eye = |x: f32| Blob { cx: x, cy: eye_y, sx: eye_s, sy: eye_s, color: eye_color };
        Identity {
            background: color(rng, 0.1, 0.5),
            face,
            hair,
            blobs: vec![eye(cx - eye_dx), eye(cx + eye_dx), mouth, mark],
        }
    }

    /// Renders into `[C, H, W]`; `(dx, dy)` is a shift in unit coordinates.
    fn render(&self, g: Geometry, dx: f32, dy: f32, out: &mut [f32]) {
        let (w, h) = (g.width as f32, g.height as f32);
        let plane = g.pixels();
        for row in 0..g.height {
            let y = (row as f32 + 0.5) / h - dy;
            for col in 0..g.width {
                let x = (col as f32 + 0.5) / w - dx;
                let mut px = self.background;
                for e in [&self.face, &self.hair] {
                    let d = ((x - e.cx) / e.rx).powi(2) + ((y - e.cy) / e.ry).powi(2);
                    let a = soft_step(d.sqrt());
                    blend(&mut px, e.color, a);
                }
                for b in &self.blobs {
                    let d = ((x - b.cx) / b.sx).powi(2) + ((y - b.cy) / b.sy).powi(2);
                    blend(&mut px, b.color, (-0.5 * d).exp());
                }
                for c in 0..g.channels {
                    out[c * plane + row * g.width + col] = px[c % 3];
                }
            }
        }
    }
}

/// 1 inside the unit ellipse, fading to 0 over a soft rim.
fn soft_step(r: f32) -> f32 {
    let t = ((1.1 - r) / 0.2).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn blend(px: &mut [f32; 3], color: [f32; 3], alpha: f32) {
    for (p, c) in px.iter_mut().zip(color) {
        *p += alpha * (c - *p);
    }
}

fn validate_request(ids: usize, spi: usize, g: Geometry) -> Result<()> {
    if ids < 2 || spi < 2 || g.width < 16 || g.height < 16 || g.channels == 0 {
        return Err(Error::Config(format!(
            "need >= 2 identities, >= 2 samples each and >= 16x16 images; got {ids} x {spi} at {}x{}x{}",
            g.width, g.height, g.channels
        )));
    }
    Ok(())
}

fn generate_split(role: Role, ids: usize, spi: usize, g: Geometry, seed: u64, pert: Perturbation) -> Split {
    let mut data = vec![0f32; ids * spi * g.len()];
    let mut labels = Vec::with_capacity(ids * spi);
    let noise = Normal::new(0.0, pert.noise_sigma.max(0.0)).expect("finite sigma");
    let mut images = data.chunks_exact_mut(g.len());
    for id in 0..ids {
        let identity = Identity::sample(&mut rng::stream(seed, &[role.tag(), id as u64]));
        for s in 0..spi {
            let mut r = rng::stream(seed, &[role.tag(), id as u64, s as u64 + 1]);
            let dx = r.random_range(-pert.max_shift..=pert.max_shift) / g.width as f32;
            let dy = r.random_range(-pert.max_shift..=pert.max_shift) / g.height as f32;
            let gain = 1.0 + r.random_range(-pert.brightness..=pert.brightness);
            let img = images.next().expect("sized above");
            identity.render(g, dx, dy, img);
            for v in img.iter_mut() {
                *v = (*v * gain + noise.sample(&mut r)).clamp(0.0, 1.0);
            }
            labels.push(id as u32);
        }
    }
    let offset = match role {
        Role::Private => 0,
        Role::Public => ids as u32,
    };
    Split {
        role,
        batch: ImageBatch { geometry: g, data, labels },
        identities: (offset..offset + ids as u32).collect(),
        samples_per_identity: spi,
    }
}

/// Generates private and public splits with disjoint identities.
pub fn generate_synthfaces(
    num_identities_per_split: usize,
    samples_per_identity: usize,
    geometry: Geometry,
    seed: u64,
) -> Result<DatasetBundle> {
    validate_request(num_identities_per_split, samples_per_identity, geometry)?;
    let pert = Perturbation::default();
    let split = |role| generate_split(role, num_identities_per_split, samples_per_identity, geometry, seed, pert);
    Ok(DatasetBundle {
        private: split(Role::Private),
        public: split(Role::Public),
        geometry,
        provenance: Provenance {
            seed,
            num_identities: num_identities_per_split,
            samples_per_identity,
            perturbation: pert,
        },
    })
}

/// Contents of `meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitMeta {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub num_identities: usize,
    pub samples_per_identity: usize,
    pub seed: u64,
    pub role: Role,
    pub format_version: u32,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn f32s_to_le_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn f32s_from_le_bytes(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Writes one split as `meta.json`, `images.bin`, `labels.bin` under `dir`.
pub fn save_split(split: &Split, seed: u64, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let g = split.batch.geometry;
    let meta = SplitMeta {
        width: g.width,
        height: g.height,
        channels: g.channels,
        num_identities: split.num_identities(),
        samples_per_identity: split.samples_per_identity,
        seed,
        role: split.role,
        format_version: FORMAT_VERSION,
    };
    let json = serde_json::to_vec_pretty(&meta).expect("meta serializes");
    write(&dir.join("meta.json"), &json)?;
    write(&dir.join("images.bin"), &f32s_to_le_bytes(&split.batch.data))?;
    let labels: Vec<u8> = split.batch.labels.iter().flat_map(|l| l.to_le_bytes()).collect();
    write(&dir.join("labels.bin"), &labels)
}

/// Reads and validates one split directory.
pub fn load_split(dir: &Path) -> Result<(Split, SplitMeta)> {
    let meta_path = dir.join("meta.json");
    let meta: SplitMeta = serde_json::from_slice(&read(&meta_path)?)
        .map_err(|e| Error::format(&meta_path, e.to_string()))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::format(&meta_path, format!("unsupported format_version {}", meta.format_version)));
    }
    let g = Geometry::new(meta.width, meta.height, meta.channels);
    let n = meta.num_identities * meta.samples_per_identity;

    let images_path = dir.join("images.bin");
    let bytes = read(&images_path)?;
    let expected = n * g.len() * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            &images_path,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let data = f32s_from_le_bytes(&bytes);

    let labels_path = dir.join("labels.bin");
    let bytes = read(&labels_path)?;
    if bytes.len() != n * 4 {
        return Err(Error::format(
            &labels_path,
            format!("expected {} bytes, found {}", n * 4, bytes.len()),
        ));
    }
    let labels: Vec<u32> = bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    if let Some(bad) = labels.iter().find(|&&l| l as usize >= meta.num_identities) {
        return Err(Error::Invariant(format!(
            "label {bad} out of range for {} identities",
            meta.num_identities
        )));
    }
    if let Some(pos) = data.iter().position(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
        return Err(Error::Invariant(format!("pixel {pos} is {} (must be finite, in [0,1])", data[pos])));
    }
    let offset = match meta.role {
        Role::Private => 0,
        Role::Public => meta.num_identities as u32,
    };
    let split = Split {
        role: meta.role,
        batch: ImageBatch { geometry: g, data, labels },
        identities: (offset..offset + meta.num_identities as u32).collect(),
        samples_per_identity: meta.samples_per_identity,
    };
    Ok((split, meta))
}

pub fn save_dataset(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    let seed = bundle.provenance.seed;
    save_split(&bundle.private, seed, &dir.join("private"))?;
    save_split(&bundle.public, seed, &dir.join("public"))
}

pub fn load_dataset(dir: &Path) -> Result<DatasetBundle> {
    let (private, pm) = load_split(&dir.join("private"))?;
    let (public, qm) = load_split(&dir.join("public"))?;
    if private.role != Role::Private || public.role != Role::Public {
        return Err(Error::format(dir, "split directories carry the wrong roles"));
    }
    if private.batch.geometry != public.batch.geometry || pm.seed != qm.seed {
        return Err(Error::format(dir, "private and public splits disagree on geometry or seed"));
    }
    if private.identities.iter().any(|id| public.identities.contains(id)) {
        return Err(Error::Invariant("private and public identities overlap".into()));
    }
    Ok(DatasetBundle {
        geometry: private.batch.geometry,
        provenance: Provenance {
            seed: pm.seed,
            num_identities: pm.num_identities,
            samples_per_identity: pm.samples_per_identity,
            perturbation: Perturbation::default(),
        },
        private,
        public,
    })
}
