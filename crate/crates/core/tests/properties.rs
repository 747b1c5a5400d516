use lhmp_core::pcops::{bin_by_part, center_normalize, chamfer, farthest_point_sample, min_mpjpe, mpjpe, Point};
use lhmp_core::{Pose, NOISE_LABEL};
use proptest::prelude::*;

fn point() -> impl Strategy<Value = Point> {
    prop::array::uniform3(-5.0..5.0f64)
}

fn cloud(max: usize) -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec(point(), 1..max)
}

fn poses(frames: usize) -> impl Strategy<Value = Vec<Pose>> {
    prop::collection::vec(prop::array::uniform24(point()), frames)
}

proptest! {
    #[test]
    fn chamfer_is_symmetric_and_zero_on_itself(a in cloud(30), b in cloud(30)) {
        prop_assert_eq!(chamfer(&a, &b).unwrap(), chamfer(&b, &a).unwrap());
        prop_assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        prop_assert!(chamfer(&a, &b).unwrap() >= 0.0);
    }

    #[test]
    fn fps_prefix_is_distinct_and_padded_with_zero(c in cloud(50), n in 1usize..64) {
        let idx = farthest_point_sample(&c, n).unwrap();
        prop_assert_eq!(idx.len(), n);
        let take = n.min(c.len());
        let mut head = idx[..take].to_vec();
        head.sort_unstable();
        head.dedup();
        prop_assert_eq!(head.len(), take);
        prop_assert!(idx[take..].iter().all(|&i| i == 0));
    }

    #[test]
    fn fps_prefixes_agree(c in cloud(40), n in 2usize..40) {
        let long = farthest_point_sample(&c, n).unwrap();
        let short = farthest_point_sample(&c, n - 1).unwrap();
        let k = (n - 1).min(c.len());
        prop_assert_eq!(&long[..k], &short[..k]);
    }

    #[test]
    fn centering_moves_the_centroid_to_the_origin(c in cloud(40)) {
        let labels = vec![0u8; c.len()];
        let f = center_normalize(&c, &labels).unwrap();
        for k in 0..3 {
            let mean = f.points.iter().map(|p| p[k]).sum::<f64>() / c.len() as f64;
            prop_assert!(mean.abs() < 1e-9);
        }
        for (p, q) in f.points.iter().zip(&c) {
            let back = f.denormalize(p);
            for k in 0..3 {
                prop_assert!((back[k] - q[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn bins_partition_the_labelled_points(labels in prop::collection::vec(prop_oneof![0u8..9, Just(NOISE_LABEL)], 0..80)) {
        let b = bin_by_part(&labels, 9).unwrap();
        let mut seen = vec![false; labels.len()];
        for (k, bin) in b.bins.iter().enumerate() {
            for &i in bin {
                prop_assert_eq!(labels[i] as usize, k);
                seen[i] = true;
            }
        }
        for &i in &b.noise {
            prop_assert_eq!(labels[i], NOISE_LABEL);
            seen[i] = true;
        }
        prop_assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn mpjpe_is_zero_on_identity_and_a_shift_costs_its_length(p in poses(3), shift in point()) {
        prop_assert!(mpjpe(&p, &p).unwrap().iter().all(|&e| e == 0.0));
        let moved: Vec<Pose> = p
            .iter()
            .map(|pose| pose.map(|j| [j[0] + shift[0], j[1] + shift[1], j[2] + shift[2]]))
            .collect();
        let norm = (shift[0] * shift[0] + shift[1] * shift[1] + shift[2] * shift[2]).sqrt() * 1000.0;
        for e in mpjpe(&moved, &p).unwrap() {
            prop_assert!((e - norm).abs() <= 1e-9 * norm.max(1.0));
        }
    }

    #[test]
    fn min_mpjpe_is_at_most_every_hypothesis(gt in poses(2), hyps in prop::collection::vec(poses(2), 1..5)) {
        let best = min_mpjpe(&hyps, &gt).unwrap();
        for h in &hyps {
            let mean = mpjpe(h, &gt).unwrap().iter().sum::<f64>() / 2.0;
            prop_assert!(best.value_mm <= mean);
        }
        prop_assert!(best.argmin < hyps.len());
    }
}
