//! Penultimate-feature geometry: joint 2-D PCA of private, occluded-private
//! and reconstructed features, their convex hulls, and hull overlap.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::batch::ImageBatch;
use crate::erasing::{augment_batch, ErasePolicy};
use crate::error::{Error, Result};
use crate::nn::{extract_features, FeatureSet, TrainedModel};

pub type Point = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Priv,
    RePriv,
    Recon,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Priv => "priv",
            Group::RePriv => "re_priv",
            Group::Recon => "recon",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection2D {
    pub points: Vec<Point>,
    /// `[feature_dim, 2]` row-major; columns orthonormal.
    pub basis: Vec<Point>,
    pub mean: Vec<f64>,
    /// Fractions of total variance along each component, non-increasing.
    pub explained: [f64; 2],
    pub groups: Vec<Group>,
    pub labels: Vec<u32>,
}

impl Projection2D {
    pub fn points_of(&self, group: Group) -> Vec<Point> {
        self.points
            .iter()
            .zip(&self.groups)
            .filter(|(_, &g)| g == group)
            .map(|(p, _)| *p)
            .collect()
    }

    pub fn project(&self, row: &[f64]) -> Point {
        let mut out = [0.0; 2];
        for ((v, m), b) in row.iter().zip(&self.mean).zip(&self.basis) {
            out[0] += (v - m) * b[0];
            out[1] += (v - m) * b[1];
        }
        out
    }
}

/// Leading two principal directions of `n x dim` row-major data.
///
/// Each direction's largest-magnitude loading is made positive.
pub fn pca_rows(rows: &[f64], dim: usize) -> Result<(Vec<f64>, Vec<Point>, [f64; 2])> {
    if dim < 2 || rows.len() % dim != 0 {
        return Err(Error::Shape(format!("need at least 2-D rows, got width {dim}")));
    }
    let n = rows.len() / dim;
    if n < 3 {
        return Err(Error::Degenerate(format!("PCA needs at least 3 rows, got {n}")));
    }
    if rows.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite feature values".into()));
    }
    let x = DMatrix::from_row_slice(n, dim, rows);
    let mean: Vec<f64> = x.column_iter().map(|c| c.sum() / n as f64).collect();
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let cov = centered.transpose() * &centered / n as f64;
    let total = cov.trace();
    if !(total > 0.0) {
        return Err(Error::Degenerate("all points identical".into()));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut basis = vec![[0.0; 2]; dim];
    let mut explained = [0.0; 2];
    for (k, &col) in order.iter().take(2).enumerate() {
        let v = eig.eigenvectors.column(col);
        let lead = (0..dim).fold(0, |best, i| if v[i].abs() > v[best].abs() { i } else { best });
        let sign = if v[lead] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..dim {
            basis[i][k] = sign * v[i];
        }
        explained[k] = (eig.eigenvalues[col].max(0.0) / total).clamp(0.0, 1.0);
    }
    Ok((mean, basis, explained))
}

/// Fits one basis on the union of the tagged sets and projects every row.
pub fn pca_project(sets: &[(Group, &FeatureSet)]) -> Result<Projection2D> {
    let dim = sets.first().map_or(0, |(_, f)| f.feature_dim);
    if sets.iter().any(|(_, f)| f.feature_dim != dim) {
        return Err(Error::Shape("tagged feature sets differ in width".into()));
    }
    let rows: Vec<f64> = sets.iter().flat_map(|(_, f)| f.features.iter().map(|&v| v as f64)).collect();
    let (mean, basis, explained) = pca_rows(&rows, dim)?;
    let mut proj = Projection2D {
        points: Vec::new(),
        basis,
        mean,
        explained,
        groups: Vec::new(),
        labels: Vec::new(),
    };
    let points: Vec<Point> = rows.chunks_exact(dim).map(|r| proj.project(r)).collect();
    proj.points = points;
    for (g, f) in sets {
        proj.groups.extend(std::iter::repeat_n(*g, f.len()));
        proj.labels.extend_from_slice(&f.labels);
    }
    Ok(proj)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HullPolygon {
    /// Counter-clockwise, no repeated or collinear vertices.
    pub vertices: Vec<Point>,
    pub area: f64,
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Shoelace area, positive for counter-clockwise order.
pub fn signed_area(vertices: &[Point]) -> f64 {
    let n = vertices.len();
    (0..n)
        .map(|i| {
            let (a, b) = (vertices[i], vertices[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        / 2.0
}

/// Andrew's monotone chain.
pub fn convex_hull(points: &[Point]) -> HullPolygon {
    let mut pts: Vec<Point> = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return HullPolygon { vertices: pts, area: 0.0 };
    }
    let mut hull: Vec<Point> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Point>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    if hull.len() < 3 {
        return HullPolygon { vertices: hull, area: 0.0 };
    }
    let area = signed_area(&hull).max(0.0);
    HullPolygon { vertices: hull, area }
}

impl HullPolygon {
    /// Inside or on the boundary, with absolute tolerance `eps` on edge tests.
    pub fn contains(&self, p: Point, eps: f64) -> bool {
        match self.vertices.len() {
            0 => false,
            1 => (p[0] - self.vertices[0][0]).hypot(p[1] - self.vertices[0][1]) <= eps,
            2 => {
                let (a, b) = (self.vertices[0], self.vertices[1]);
                let len = (b[0] - a[0]).hypot(b[1] - a[1]);
                let t = ((p[0] - a[0]) * (b[0] - a[0]) + (p[1] - a[1]) * (b[1] - a[1])) / (len * len);
                cross(a, b, p).abs() / len <= eps && (-eps..=1.0 + eps).contains(&t)
            }
            n => (0..n).all(|i| {
                let (a, b) = (self.vertices[i], self.vertices[(i + 1) % n]);
                cross(a, b, p) / (b[0] - a[0]).hypot(b[1] - a[1]) >= -eps
            }),
        }
    }
}

/// Intersection of two counter-clockwise convex polygons (Sutherland-Hodgman).
pub fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut out = subject.to_vec();
    let m = clip.len();
    for i in 0..m {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % m]);
        let input = std::mem::take(&mut out);
        let k = input.len();
        for j in 0..k {
            let (p, q) = (input[j], input[(j + 1) % k]);
            let (cp, cq) = (cross(a, b, p), cross(a, b, q));
            if cp >= 0.0 {
                out.push(p);
            }
            if (cp >= 0.0) != (cq >= 0.0) {
                let t = cp / (cp - cq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    out
}

/// Area intersection-over-union of two convex hulls.
///
/// Two zero-area hulls score 1 when their vertex lists match and 0 otherwise.
pub fn hull_iou(a: &HullPolygon, b: &HullPolygon) -> f64 {
    if a.area <= 0.0 || b.area <= 0.0 {
        return if a.area <= 0.0 && b.area <= 0.0 && a.vertices == b.vertices {
            1.0
        } else {
            0.0
        };
    }
    let inter = signed_area(&clip_convex(&a.vertices, &b.vertices)).max(0.0);
    let union = a.area + b.area - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouTriple {
    pub recon_priv: f64,
    pub recon_re: f64,
    pub re_priv: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityOverlap {
    pub identity: u32,
    pub iou: IouTriple,
    pub explained: [f64; 2],
    pub hull_areas: [f64; 3],
    pub projection: Projection2D,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub per_identity: Vec<IdentityOverlap>,
    /// Mean of the per-identity values.
    pub pooled: IouTriple,
}

fn iou_triple(proj: &Projection2D) -> (IouTriple, [f64; 3]) {
    let priv_h = convex_hull(&proj.points_of(Group::Priv));
    let re_h = convex_hull(&proj.points_of(Group::RePriv));
    let rec_h = convex_hull(&proj.points_of(Group::Recon));
    (
        IouTriple {
            recon_priv: hull_iou(&rec_h, &priv_h),
            recon_re: hull_iou(&rec_h, &re_h),
            re_priv: hull_iou(&re_h, &priv_h),
        },
        [priv_h.area, re_h.area, rec_h.area],
    )
}

/// Overlap of private, occluded-private and reconstruction features, all
/// taken from `target`'s penultimate layer.
///
/// Each identity gets its own joint PCA over its three groups; `seed` keys the
/// occlusion of the private images.
pub fn overlap_report(
    target: &TrainedModel,
    private: &ImageBatch,
    policy: &ErasePolicy,
    reconstructions: &ImageBatch,
    identities: &[u32],
    seed: u64,
) -> Result<OverlapReport> {
    if identities.is_empty() {
        return Err(Error::Config("overlap report needs at least one identity".into()));
    }
    let occluded = augment_batch(private, policy, 0, seed)?;
    let f_priv = extract_features(target, private)?;
    let f_re = extract_features(target, &occluded)?;
    let f_rec = extract_features(target, reconstructions)?;
    let mut per_identity = Vec::with_capacity(identities.len());
    for &id in identities {
        let rp = f_priv.rows_with_label(id);
        let rr = f_rec.rows_with_label(id);
        if rp.is_empty() || rr.is_empty() {
            return Err(Error::MissingIdentity(id));
        }
        let (p, e, r) = (f_priv.select(&rp), f_re.select(&rp), f_rec.select(&rr));
        let proj = pca_project(&[(Group::Priv, &p), (Group::RePriv, &e), (Group::Recon, &r)])?;
        let (iou, hull_areas) = iou_triple(&proj);
        per_identity.push(IdentityOverlap {
            identity: id,
            iou,
            explained: proj.explained,
            hull_areas,
            projection: proj,
        });
    }
    let k = per_identity.len() as f64;
    let mean = |f: fn(&IouTriple) -> f64| per_identity.iter().map(|o| f(&o.iou)).sum::<f64>() / k;
    let pooled = IouTriple {
        recon_priv: mean(|t| t.recon_priv),
        recon_re: mean(|t| t.recon_re),
        re_priv: mean(|t| t.re_priv),
    };
    Ok(OverlapReport { per_identity, pooled })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(x: f64, y: f64) -> HullPolygon {
        convex_hull(&[[x, y], [x + 1.0, y], [x + 1.0, y + 1.0], [x, y + 1.0]])
    }

    #[test]
    fn square_with_center() {
        let h = convex_hull(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.5, 0.5]]);
        assert_eq!(h.vertices.len(), 4);
        assert!((h.area - 1.0).abs() < 1e-12);
    }

    #[test]
    fn collinear_points_have_zero_area() {
        let h = convex_hull(&[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]);
        assert_eq!(h.area, 0.0);
        assert!(h.contains([1.0, 1.0], 1e-12));
    }

    #[test]
    fn half_shifted_squares() {
        assert!((hull_iou(&square(0.0, 0.0), &square(0.5, 0.0)) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(hull_iou(&square(0.0, 0.0), &square(3.0, 0.0)), 0.0);
        assert_eq!(hull_iou(&square(0.0, 0.0), &square(0.0, 0.0)), 1.0);
    }

    #[test]
    fn x_axis_points_are_fully_explained_by_one_component() {
        let rows = [0.0, 0.0, 1.0, 0.0, 3.0, 0.0, 7.0, 0.0];
        let (_, basis, explained) = pca_rows(&rows, 2).unwrap();
        assert!((explained[0] - 1.0).abs() < 1e-12);
        assert!(explained[1].abs() < 1e-12);
        assert!((basis[0][0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_points_are_degenerate() {
        assert!(matches!(pca_rows(&[1.0; 8], 2), Err(Error::Degenerate(_))));
    }
}
