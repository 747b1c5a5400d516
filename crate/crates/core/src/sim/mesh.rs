//! Capsule skinning of a posed rig into a part-labelled triangle mesh.

use std::f64::consts::{FRAC_PI_2, TAU};

use nalgebra::Vector3;

use super::rig::HumanoidRig;
use crate::error::{Error, Result};
use crate::Pose;

type V3 = Vector3<f64>;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
    pub tri_part: Vec<u8>,
    /// Outward unit normal per triangle.
    pub tri_normal: Vec<[f64; 3]>,
}

impl LabeledMesh {
    pub fn len(&self) -> usize {
        self.triangles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle(&self, t: usize) -> [V3; 3] {
        let [a, b, c] = self.triangles[t];
        [
            V3::from(self.vertices[a]),
            V3::from(self.vertices[b]),
            V3::from(self.vertices[c]),
        ]
    }

    /// Appends a triangle, computing its unit normal from the winding.
    pub fn push_triangle(&mut self, verts: [[f64; 3]; 3], part: u8) -> Result<()> {
        let [a, b, c] = verts.map(V3::from);
        let cross = (b - a).cross(&(c - a));
        let area = 0.5 * cross.norm();
        if area <= 1e-12 {
            return Err(Error::Degenerate(format!("triangle with area {area:e}")));
        }
        let base = self.vertices.len();
        self.vertices.extend_from_slice(&verts);
        self.triangles.push([base, base + 1, base + 2]);
        self.tri_part.push(part);
        let n = cross / cross.norm();
        self.tri_normal.push([n.x, n.y, n.z]);
        Ok(())
    }

    /// Axis-aligned bounds `(min, max)` of all vertices.
    pub fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(mut lo, mut hi), v| {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
            (lo, hi)
        }))
    }
}

/// Latitude rings per hemispherical cap for a given ring resolution.
pub fn cap_rings(segments: usize) -> usize {
    (segments / 4).max(2)
}

/// Triangles emitted per bone: `4 · cap_rings(s) · s`
/// (two caps of `2·rings − 1` bands each, minus the shared seam, plus pole fans).
pub fn triangles_per_capsule(segments: usize) -> usize {
    4 * cap_rings(segments) * segments
}

fn closest_on_segment(p: &V3, a: &V3, b: &V3) -> V3 {
    let ab = b - a;
    let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
    a + ab * t
}

/// Triangulated capsule around segment `a → b`. Each triangle's winding is
/// chosen so its normal points away from the segment.
fn capsule(mesh: &mut LabeledMesh, a: V3, b: V3, radius: f64, segments: usize, part: u8) -> Result<()> {
    let axis = b - a;
    let len = axis.norm();
    let u = axis / len;
    let helper = if u.x.abs() < 0.9 { V3::x() } else { V3::y() };
    let e1 = u.cross(&helper).normalize();
    let e2 = u.cross(&e1);
    let h = cap_rings(segments);

    let ring = |center: V3, offset_along: f64, r: f64| -> Vec<V3> {
        (0..segments)
            .map(|k| {
                let ang = TAU * k as f64 / segments as f64;
                center + u * offset_along + (e1 * ang.cos() + e2 * ang.sin()) * r
            })
            .collect()
    };
    // Rings from the pole at `a` to the pole at `b`.
    let mut rings: Vec<Vec<V3>> = Vec::with_capacity(2 * h);
    for k in (0..h).rev() {
        let lat = FRAC_PI_2 * k as f64 / h as f64;
        rings.push(ring(a, -radius * lat.sin(), radius * lat.cos()));
    }
    for k in 0..h {
        let lat = FRAC_PI_2 * k as f64 / h as f64;
        rings.push(ring(b, radius * lat.sin(), radius * lat.cos()));
    }
    let pole_a = a - u * radius;
    let pole_b = b + u * radius;

    let mut emit = |p: V3, q: V3, r: V3| -> Result<()> {
        let n = (q - p).cross(&(r - p));
        let centroid = (p + q + r) / 3.0;
        let out = centroid - closest_on_segment(&centroid, &a, &b);
        let tri = if n.dot(&out) >= 0.0 { [p, q, r] } else { [p, r, q] };
        mesh.push_triangle(tri.map(|v| [v.x, v.y, v.z]), part)
    };
    for k in 0..segments {
        let k1 = (k + 1) % segments;
        emit(pole_a, rings[0][k], rings[0][k1])?;
    }
    for w in rings.windows(2) {
        for k in 0..segments {
            let k1 = (k + 1) % segments;
            emit(w[0][k], w[0][k1], w[1][k])?;
            emit(w[0][k1], w[1][k1], w[1][k])?;
        }
    }
    let last = rings.last().expect("at least two rings");
    for k in 0..segments {
        let k1 = (k + 1) % segments;
        emit(pole_b, last[k1], last[k])?;
    }
    Ok(())
}

/// Skins every bone of `pose` with a capsule of the rig's bone radius.
/// Each triangle carries the part label of its bone.
pub fn skin_rig(rig: &HumanoidRig, pose: &Pose, segments: usize) -> Result<LabeledMesh> {
    if segments < 3 {
        return Err(Error::Config(format!("capsules need at least 3 segments, got {segments}")));
    }
    let mut mesh = LabeledMesh::default();
    for (p, c) in rig.bones() {
        let a = V3::from(pose[p]);
        let b = V3::from(pose[c]);
        if (b - a).norm() < 1e-6 {
            return Err(Error::Degenerate(format!(
                "bone {p}→{c} has length {:e} m",
                (b - a).norm()
            )));
        }
        capsule(&mut mesh, a, b, rig.bone_radius[c], segments, rig.part_of_bone[c])?;
    }
    Ok(mesh)
}

/// Euclidean distance from `p` to triangle `tri` (closest-point construction).
pub fn point_triangle_distance(p: &V3, tri: &[V3; 3]) -> f64 {
    let [a, b, c] = tri;
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return ap.norm();
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return bp.norm();
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (p - (a + ab * v)).norm();
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return cp.norm();
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (p - (a + ac * w)).norm();
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (p - (b + (c - b) * w)).norm();
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (p - (a + ab * v + ac * w)).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn triangle_count_is_fixed_per_capsule() {
        let rig = HumanoidRig::standard();
        let mesh = skin_rig(&rig, &rig.joints, 8).unwrap();
        assert_eq!(triangles_per_capsule(8), 64);
        assert_eq!(mesh.len(), 23 * 64);
        assert_eq!(mesh.tri_part.len(), mesh.len());
    }

    #[test]
    fn normals_are_unit_and_outward() {
        let rig = HumanoidRig::standard();
        let mesh = skin_rig(&rig, &rig.joints, 12).unwrap();
        for n in &mesh.tri_normal {
            let len = V3::from(*n).norm();
            assert!((len - 1.0).abs() <= 1e-6);
        }
        // Outward: the normal points away from the bone the triangle belongs to.
        let bones: Vec<(usize, usize)> = rig.bones().collect();
        let per = triangles_per_capsule(12);
        for t in 0..mesh.len() {
            let (p, c) = bones[t / per];
            let tri = mesh.triangle(t);
            let centroid = (tri[0] + tri[1] + tri[2]) / 3.0;
            let axis_pt = closest_on_segment(&centroid, &V3::from(rig.joints[p]), &V3::from(rig.joints[c]));
            assert!(V3::from(mesh.tri_normal[t]).dot(&(centroid - axis_pt)) > 0.0);
        }
    }

    #[test]
    fn surface_samples_stay_within_bone_radius() {
        let rig = HumanoidRig::standard();
        let segments = 8;
        let mesh = skin_rig(&rig, &rig.joints, segments).unwrap();
        let bones: Vec<(usize, usize)> = rig.bones().collect();
        let per = triangles_per_capsule(segments);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let t = rng.random_range(0..mesh.len());
            let (mut u, mut v): (f64, f64) = (rng.random(), rng.random());
            if u + v > 1.0 {
                u = 1.0 - u;
                v = 1.0 - v;
            }
            let [a, b, c] = mesh.triangle(t);
            let p = a + (b - a) * u + (c - a) * v;
            let (pj, cj) = bones[t / per];
            let (s0, s1) = (V3::from(rig.joints[pj]), V3::from(rig.joints[cj]));
            let d = (p - closest_on_segment(&p, &s0, &s1)).norm();
            assert!(d <= rig.bone_radius[cj] + 1e-6, "{d} > {}", rig.bone_radius[cj]);
        }
    }

    #[test]
    fn coincident_joints_are_degenerate() {
        let rig = HumanoidRig::standard();
        let mut pose = rig.joints;
        pose[4] = pose[1];
        assert!(matches!(skin_rig(&rig, &pose, 8), Err(Error::Degenerate(_))));
    }

    #[test]
    fn point_triangle_distance_regions() {
        let tri = [V3::new(0.0, 0.0, 0.0), V3::new(1.0, 0.0, 0.0), V3::new(0.0, 1.0, 0.0)];
        assert!((point_triangle_distance(&V3::new(0.2, 0.2, 0.5), &tri) - 0.5).abs() < 1e-12);
        assert!((point_triangle_distance(&V3::new(-1.0, -1.0, 0.0), &tri) - 2f64.sqrt()).abs() < 1e-12);
        assert!((point_triangle_distance(&V3::new(1.0, 1.0, 0.0), &tri) - 0.5f64.sqrt()).abs() < 1e-12);
    }
}
