//! Noise and occlusion applied to scans, each driven by its own seed.

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::raycast::ScanFrame;
use crate::error::{Error, Result};
use crate::NOISE_LABEL;

/// Points injected per noisy frame.
pub const NOISE_POINTS: usize = 30;
/// Default thickness of the shell noise is drawn from, in meters.
pub const NOISE_RADIUS: f64 = 0.3;
/// Edge of the occluding cube, in meters.
pub const OCCLUSION_CUBE: f64 = 0.4;

/// Derives an independent stream seed from a root seed and two indices.
pub fn stream_seed(seed: u64, a: u64, b: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(mix(mix(seed) ^ a) ^ b.rotate_left(17))
}

pub fn rng_for(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, a, b))
}

/// Result of an augmentation; `applied` is false when the frame was left
/// as-is (e.g. it had no points to anchor on).
#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub frame: ScanFrame,
    pub applied: bool,
}

/// Axis-aligned bounds of the frame's body (non-noise) points, or of all
/// points when none are labelled as body.
pub fn body_bounds(frame: &ScanFrame) -> Option<([f64; 3], [f64; 3])> {
    let body: Vec<&[f64; 3]> = frame
        .points
        .iter()
        .zip(&frame.labels)
        .filter(|(_, &l)| l != NOISE_LABEL)
        .map(|(p, _)| p)
        .collect();
    let pts: Vec<&[f64; 3]> = if body.is_empty() { frame.points.iter().collect() } else { body };
    let first = **pts.first()?;
    Some(pts.iter().fold((first, first), |(mut lo, mut hi), p| {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
        (lo, hi)
    }))
}

/// Appends `n_noise` NOISE-labelled points drawn uniformly from the shell
/// between the body's bounding box and that box grown by `radius`.
pub fn inject_noise(frame: &ScanFrame, n_noise: usize, radius: f64, seed: u64) -> Result<Augmented> {
    if !(radius > 0.0) {
        return Err(Error::Config(format!("noise radius must be positive, got {radius}")));
    }
    let Some((lo, hi)) = body_bounds(frame) else {
        warn!("noise injection skipped: empty frame at t={}", frame.timestamp);
        return Ok(Augmented {
            frame: frame.clone(),
            applied: false,
        });
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = frame.clone();
    let inside = |p: &[f64; 3]| (0..3).all(|k| p[k] >= lo[k] && p[k] <= hi[k]);
    let mut added = 0;
    while added < n_noise {
        let p = [
            rng.random_range(lo[0] - radius..=hi[0] + radius),
            rng.random_range(lo[1] - radius..=hi[1] + radius),
            rng.random_range(lo[2] - radius..=hi[2] + radius),
        ];
        if inside(&p) {
            continue;
        }
        out.points.push(p);
        out.labels.push(NOISE_LABEL);
        added += 1;
    }
    Ok(Augmented {
        frame: out,
        applied: n_noise > 0,
    })
}

/// Drops every point inside an axis-aligned cube of edge `cube_side`
/// centred on a randomly chosen body point.
pub fn inject_occlusion(frame: &ScanFrame, cube_side: f64, seed: u64) -> Result<Augmented> {
    if !(cube_side > 0.0) {
        return Err(Error::Config(format!("occlusion cube side must be positive, got {cube_side}")));
    }
    if frame.is_empty() {
        return Ok(Augmented {
            frame: frame.clone(),
            applied: false,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let body: Vec<usize> = (0..frame.len()).filter(|&i| frame.labels[i] != NOISE_LABEL).collect();
    let anchor = if body.is_empty() {
        rng.random_range(0..frame.len())
    } else {
        body[rng.random_range(0..body.len())]
    };
    let center = frame.points[anchor];
    let (points, labels) = occlude_cube(frame, center, cube_side);
    Ok(Augmented {
        frame: ScanFrame {
            points,
            labels,
            gt_joints: frame.gt_joints,
            timestamp: frame.timestamp,
        },
        applied: true,
    })
}

/// Points of `frame` outside the closed cube of edge `side` around `center`.
pub fn occlude_cube(frame: &ScanFrame, center: [f64; 3], side: f64) -> (Vec<[f64; 3]>, Vec<u8>) {
    let half = 0.5 * side;
    frame
        .points
        .iter()
        .zip(&frame.labels)
        .filter(|(p, _)| !(0..3).all(|k| (p[k] - center[k]).abs() <= half))
        .map(|(p, l)| (*p, *l))
        .unzip()
}

/// Exactly `⌈ratio · n⌉` frame flags set, at seeded positions. The chosen
/// set grows monotonically with `ratio` for a fixed seed.
pub fn select_frames(n: usize, ratio: f64, seed: u64) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("frame ratio {ratio} is outside [0, 1]")));
    }
    let count = frame_count_for_ratio(n, ratio);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut flags = vec![false; n];
    for &i in &order[..count] {
        flags[i] = true;
    }
    Ok(flags)
}

/// `⌈ratio · n⌉`, ignoring floating-point noise such as `0.7 · 10 = 7.000…1`.
pub fn frame_count_for_ratio(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64) - 1e-9).ceil().max(0.0) as usize
}
