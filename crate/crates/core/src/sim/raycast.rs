//! Spinning-LiDAR simulation over a labelled mesh.
//!
//! Beam `(θ, φ)` points along `d = [cos φ sin θ, cos φ cos θ, sin φ]` from
//! the scanner centre `c`. A triangle with unit normal `n` and vertex `q` is
//! hit at `p = c + d · nᵀ(q − c) / nᵀd` when `p` passes a barycentric
//! inside test; the nearest hit within range is emitted.

use std::f64::consts::TAU;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::mesh::LabeledMesh;
use crate::error::{Error, Result};
use crate::Pose;

type V3 = Vector3<f64>;

/// Tolerance on barycentric coordinates at triangle edges.
pub const BARYCENTRIC_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanConfig {
    pub center: [f64; 3],
    pub n_azimuth: usize,
    pub n_elevation: usize,
    /// `[min, max]` elevation in radians.
    pub elevation_range: [f64; 2],
    pub max_range: f64,
    /// Horizontal distance of the humanoid from the scanner.
    pub distance: f64,
}

impl ScanConfig {
    /// 256 × 32 beams: fast enough to synthesise datasets on a laptop.
    pub fn desk() -> Self {
        Self {
            center: [0.0, 0.0, 2.0],
            n_azimuth: 256,
            n_elevation: 32,
            elevation_range: [-0.30, 0.12],
            max_range: 100.0,
            distance: 8.0,
        }
    }

    /// 2048 azimuth columns × 128 beams.
    pub fn paper() -> Self {
        Self {
            n_azimuth: 2048,
            n_elevation: 128,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_azimuth == 0 || self.n_elevation == 0 {
            return Err(Error::Config("beam grid needs at least one row and column".into()));
        }
        if !(self.elevation_range[0] < self.elevation_range[1]) {
            return Err(Error::Config(format!(
                "elevation range {:?} must be strictly increasing",
                self.elevation_range
            )));
        }
        if !(self.distance > 0.0) || !(self.max_range > 0.0) {
            return Err(Error::Config("distance and max_range must be positive".into()));
        }
        Ok(())
    }

    pub fn azimuth(&self, i: usize) -> f64 {
        TAU * i as f64 / self.n_azimuth as f64
    }

    pub fn elevation(&self, j: usize) -> f64 {
        let [lo, hi] = self.elevation_range;
        if self.n_elevation == 1 {
            0.5 * (lo + hi)
        } else {
            lo + (hi - lo) * j as f64 / (self.n_elevation - 1) as f64
        }
    }

    pub fn direction(&self, i: usize, j: usize) -> [f64; 3] {
        beam_direction(self.azimuth(i), self.elevation(j))
    }
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self::desk()
    }
}

pub fn beam_direction(azimuth: f64, elevation: f64) -> [f64; 3] {
    [
        elevation.cos() * azimuth.sin(),
        elevation.cos() * azimuth.cos(),
        elevation.sin(),
    ]
}

/// One LiDAR sweep of the subject.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanFrame {
    pub points: Vec<[f64; 3]>,
    /// Part label per point, or [`crate::NOISE_LABEL`].
    pub labels: Vec<u8>,
    pub gt_joints: Pose,
    pub timestamp: f64,
}

impl ScanFrame {
    pub fn empty(gt_joints: Pose, timestamp: f64) -> Self {
        Self {
            points: Vec::new(),
            labels: Vec::new(),
            gt_joints,
            timestamp,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// A single beam hit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub beam: (usize, usize),
    pub point: [f64; 3],
    pub triangle: usize,
    pub range: f64,
}

/// Intersects the ray `c + t·d` with triangle `tri` via the plane equation
/// and a barycentric inside test. Returns `t`.
pub fn intersect_triangle(c: &V3, d: &V3, tri: &[V3; 3], normal: &V3) -> Option<f64> {
    let denom = normal.dot(d);
    if denom == 0.0 || denom.abs() < 1e-15 {
        return None;
    }
    let t = normal.dot(&(tri[0] - c)) / denom;
    if !(t > 0.0) {
        return None;
    }
    let p = c + d * t;
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let w = p - tri[0];
    let d00 = e1.dot(&e1);
    let d01 = e1.dot(&e2);
    let d11 = e2.dot(&e2);
    let d20 = w.dot(&e1);
    let d21 = w.dot(&e2);
    let det = d00 * d11 - d01 * d01;
    if det == 0.0 {
        return None;
    }
    let v = (d11 * d20 - d01 * d21) / det;
    let w = (d00 * d21 - d01 * d20) / det;
    let u = 1.0 - v - w;
    if u >= -BARYCENTRIC_TOL && v >= -BARYCENTRIC_TOL && w >= -BARYCENTRIC_TOL {
        Some(t)
    } else {
        None
    }
}

/// Azimuth columns whose beam could pass through the triangle.
///
/// The directions through a triangle form the cone spanned by its vertices;
/// when their horizontal projections fit inside a half-plane, every
/// direction in the cone lies within the vertices' azimuth arc.
fn candidate_columns(cfg: &ScanConfig, c: &V3, tri: &[V3; 3], out: &mut Vec<usize>) {
    out.clear();
    let n = cfg.n_azimuth;
    let mut angles = [0.0f64; 3];
    for (a, v) in angles.iter_mut().zip(tri) {
        let rel = v - c;
        if rel.x.hypot(rel.y) < 1e-9 {
            out.extend(0..n);
            return;
        }
        *a = rel.x.atan2(rel.y).rem_euclid(TAU);
    }
    angles.sort_by(f64::total_cmp);
    let gaps = [angles[1] - angles[0], angles[2] - angles[1], angles[0] + TAU - angles[2]];
    let (largest, &gap) = gaps
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("three gaps");
    if gap <= std::f64::consts::PI + 1e-9 {
        out.extend(0..n);
        return;
    }
    let start = angles[(largest + 1) % 3];
    let span = TAU - gap;
    let slack = 1e-9;
    let step = TAU / n as f64;
    let first = ((start - slack) / step).ceil() as i64;
    let last = ((start + span + slack) / step).floor() as i64;
    for i in first..=last {
        out.push(i.rem_euclid(n as i64) as usize);
    }
    out.sort_unstable();
    out.dedup();
}

/// Nearest hit per beam; beams without a hit are omitted. Beams are
/// visited azimuth-major, so output order is deterministic.
pub fn cast_hits(mesh: &LabeledMesh, cfg: &ScanConfig) -> Result<Vec<Hit>> {
    cfg.validate()?;
    if mesh.is_empty() {
        return Err(Error::EmptyInput("ray casting an empty mesh".into()));
    }
    let c = V3::from(cfg.center);
    let tris: Vec<[V3; 3]> = (0..mesh.len()).map(|t| mesh.triangle(t)).collect();
    let normals: Vec<V3> = mesh.tri_normal.iter().map(|n| V3::from(*n)).collect();

    let mut columns: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_azimuth];
    let mut scratch = Vec::new();
    for (t, tri) in tris.iter().enumerate() {
        candidate_columns(cfg, &c, tri, &mut scratch);
        for &col in &scratch {
            columns[col].push(t);
        }
    }

    let mut hits = Vec::new();
    for (i, cands) in columns.iter().enumerate() {
        if cands.is_empty() {
            continue;
        }
        for j in 0..cfg.n_elevation {
            let d = V3::from(cfg.direction(i, j));
            let mut best: Option<(f64, usize)> = None;
            for &t in cands {
                if let Some(range) = intersect_triangle(&c, &d, &tris[t], &normals[t]) {
                    if range <= cfg.max_range && best.is_none_or(|(bt, _)| range < bt) {
                        best = Some((range, t));
                    }
                }
            }
            if let Some((range, t)) = best {
                let p = c + d * range;
                hits.push(Hit {
                    beam: (i, j),
                    point: [p.x, p.y, p.z],
                    triangle: t,
                    range,
                });
            }
        }
    }
    Ok(hits)
}

/// Scans `mesh`, labelling each point with its hit triangle's part.
pub fn ray_cast(mesh: &LabeledMesh, cfg: &ScanConfig, gt_joints: Pose, timestamp: f64) -> Result<ScanFrame> {
    let hits = cast_hits(mesh, cfg)?;
    Ok(ScanFrame {
        points: hits.iter().map(|h| h.point).collect(),
        labels: hits.iter().map(|h| mesh.tri_part[h.triangle]).collect(),
        gt_joints,
        timestamp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::NUM_JOINTS;

    fn flat_triangle() -> LabeledMesh {
        let mut m = LabeledMesh::default();
        m.push_triangle([[-1.0, -1.0, 0.0], [1.0, -1.0, 0.0], [0.0, 1.0, 0.0]], 6)
            .unwrap();
        m
    }

    #[test]
    fn straight_down_hits_origin() {
        let m = flat_triangle();
        let tri = m.triangle(0);
        let n = V3::from(m.tri_normal[0]);
        let c = V3::new(0.0, 0.0, 2.0);
        let t = intersect_triangle(&c, &V3::new(0.0, 0.0, -1.0), &tri, &n).unwrap();
        let p = c + V3::new(0.0, 0.0, -1.0) * t;
        assert_eq!([p.x, p.y, p.z], [0.0, 0.0, 0.0]);

        // Through the grid: one elevation row pointing straight down.
        let cfg = ScanConfig {
            n_azimuth: 1,
            n_elevation: 1,
            elevation_range: [-std::f64::consts::FRAC_PI_2 - 1e-3, -std::f64::consts::FRAC_PI_2 + 1e-3],
            ..ScanConfig::desk()
        };
        let frame = ray_cast(&m, &cfg, [[0.0; 3]; NUM_JOINTS], 0.0).unwrap();
        assert_eq!(frame.len(), 1);
        assert_eq!(frame.labels, vec![6]);
        assert!(frame.points[0].iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn parallel_beam_misses() {
        let m = flat_triangle();
        let tri = m.triangle(0);
        let n = V3::from(m.tri_normal[0]);
        let c = V3::new(0.0, -5.0, 0.0);
        assert!(intersect_triangle(&c, &V3::new(0.0, 1.0, 0.0), &tri, &n).is_none());
    }

    #[test]
    fn config_validation() {
        assert!(ScanConfig { n_azimuth: 0, ..ScanConfig::desk() }.validate().is_err());
        assert!(ScanConfig { elevation_range: [0.1, 0.1], ..ScanConfig::desk() }.validate().is_err());
        assert!(ScanConfig { distance: 0.0, ..ScanConfig::desk() }.validate().is_err());
        ScanConfig::paper().validate().unwrap();
    }

    #[test]
    fn wraparound_column_sets_cover_zero_azimuth() {
        let cfg = ScanConfig {
            n_azimuth: 8,
            ..ScanConfig::desk()
        };
        let c = V3::new(0.0, 0.0, 2.0);
        // Straddles +y (azimuth 0).
        let tri = [V3::new(-1.0, 5.0, 0.0), V3::new(1.0, 5.0, 0.0), V3::new(0.0, 5.0, 3.0)];
        let mut cols = Vec::new();
        candidate_columns(&cfg, &c, &tri, &mut cols);
        assert_eq!(cols, vec![0]);
    }
}
