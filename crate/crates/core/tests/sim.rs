mod common;

use lhmp_core::sim::mesh::point_triangle_distance;
use lhmp_core::sim::raycast::cast_hits;
use lhmp_core::sim::{
    make_motion, place_pose, skin_rig, synth_dataset, HumanoidRig, MotionKind, ScanConfig, SynthConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{brute_force, random_mesh, V3};

#[test]
fn raycast_matches_brute_force_oracle() {
    let cfg = ScanConfig {
        n_azimuth: 64,
        n_elevation: 16,
        ..ScanConfig::desk()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut total_hits = 0;
    for _ in 0..24 {
        let mesh = random_mesh(&mut rng, 50);
        let oracle = brute_force(&mesh, &cfg);
        let hits = cast_hits(&mesh, &cfg).unwrap();
        assert_eq!(hits.len(), oracle.len());
        for h in &hits {
            let (p, t) = oracle[&h.beam];
            assert_eq!(h.triangle, t, "beam {:?}", h.beam);
            for k in 0..3 {
                assert!((h.point[k] - p[k]).abs() <= 1e-9, "beam {:?}", h.beam);
            }
        }
        total_hits += hits.len();
    }
    assert!(total_hits > 500, "meshes barely cover the beam grid: {total_hits}");
}

#[test]
fn scan_points_lie_on_their_labelled_triangle() {
    let rig = HumanoidRig::standard();
    let poses = make_motion(&rig, MotionKind::Walk, 6, 10.0, 4).unwrap();
    let cfg = ScanConfig::desk();
    for pose in &poses {
        let world = place_pose(pose, [0.0, 7.0, 0.0], 0.4);
        let mesh = skin_rig(&rig, &world, 8).unwrap();
        let hits = cast_hits(&mesh, &cfg).unwrap();
        assert!(hits.len() > 20, "{} hits", hits.len());
        for h in &hits {
            let tri = mesh.triangle(h.triangle);
            assert!(point_triangle_distance(&V3::from(h.point), &tri) <= 1e-7);
            assert!((mesh.tri_part[h.triangle] as usize) < lhmp_core::NUM_PARTS);
        }
    }
}

#[test]
fn density_decreases_with_distance() {
    let rig = HumanoidRig::standard();
    let cfg = ScanConfig::desk();
    let mut poses = Vec::new();
    for (i, kind) in MotionKind::ALL.iter().enumerate() {
        poses.extend(make_motion(&rig, *kind, 4, 10.0, i as u64).unwrap());
    }
    assert!(poses.len() >= 20);
    let mut prev = f64::INFINITY;
    for d in [6.0, 9.0, 12.0, 15.0, 18.0, 21.0, 24.0, 27.0] {
        let mean = poses
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let az = 0.7 * i as f64;
                let world = place_pose(p, [d * az.sin(), d * az.cos(), 0.0], 0.3 * i as f64);
                let mesh = skin_rig(&rig, &world, 8).unwrap();
                cast_hits(&mesh, &cfg).unwrap().len() as f64
            })
            .sum::<f64>()
            / poses.len() as f64;
        assert!(mean < prev, "mean hits {mean} at {d} m, {prev} closer");
        prev = mean;
    }
}

#[test]
fn synth_is_byte_identical_on_rerun() {
    let cfg = SynthConfig {
        n_sequences: 3,
        frames_per_sequence: 5,
        noise_frame_ratio: 0.4,
        occl_frame_ratio: 0.4,
        seed: 7,
        ..SynthConfig::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    synth_dataset(a.path(), &cfg).unwrap();
    synth_dataset(b.path(), &cfg).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 4);
    for n in names {
        let x = std::fs::read(a.path().join(&n)).unwrap();
        let y = std::fs::read(b.path().join(&n)).unwrap();
        assert!(x == y, "{n:?} differs");
    }
}
