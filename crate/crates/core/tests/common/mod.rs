#![allow(dead_code)]

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use lhmp_core::sim::{LabeledMesh, ScanConfig};
use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type V3 = Vector3<f64>;

/// Möller–Trumbore, no culling.
pub fn moller_trumbore(o: &V3, d: &V3, tri: &[V3; 3]) -> Option<f64> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = d.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = o - tri[0];
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = d.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > 0.0).then_some(t)
}

pub fn brute_force(mesh: &LabeledMesh, cfg: &ScanConfig) -> BTreeMap<(usize, usize), ([f64; 3], usize)> {
    let c = V3::from(cfg.center);
    let mut out = BTreeMap::new();
    for i in 0..cfg.n_azimuth {
        for j in 0..cfg.n_elevation {
            let theta = TAU * i as f64 / cfg.n_azimuth as f64;
            let [lo, hi] = cfg.elevation_range;
            let phi = lo + (hi - lo) * j as f64 / (cfg.n_elevation - 1) as f64;
            let d = V3::new(phi.cos() * theta.sin(), phi.cos() * theta.cos(), phi.sin());
            let mut best: Option<(f64, usize)> = None;
            for t in 0..mesh.len() {
                if let Some(r) = moller_trumbore(&c, &d, &mesh.triangle(t)) {
                    if r <= cfg.max_range && best.is_none_or(|(b, _)| r < b) {
                        best = Some((r, t));
                    }
                }
            }
            if let Some((r, t)) = best {
                let p = c + d * r;
                out.insert((i, j), ([p.x, p.y, p.z], t));
            }
        }
    }
    out
}

pub fn random_mesh(rng: &mut ChaCha8Rng, n: usize) -> LabeledMesh {
    let mut m = LabeledMesh::default();
    while m.len() < n {
        let az = rng.random_range(0.0..TAU);
        let dist = rng.random_range(2.0..8.0);
        let centre = V3::new(dist * az.sin(), dist * az.cos(), rng.random_range(0.0..2.0));
        let size = rng.random_range(0.3..3.0);
        let verts = [0, 1, 2].map(|_| {
            let v = centre + V3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * size;
            [v.x, v.y, v.z]
        });
        let _ = m.push_triangle(verts, rng.random_range(0..9));
    }
    m
}
