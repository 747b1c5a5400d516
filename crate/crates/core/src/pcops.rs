//! Deterministic point-cloud preprocessing and evaluation metrics.
//!
//! Everything here runs in `f64`.

use crate::error::{contract, Error, Result};
use crate::{NOISE_LABEL, NUM_JOINTS, NUM_PARTS};

pub type Point = [f64; 3];

fn sq_dist(a: &Point, b: &Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

pub fn centroid(points: &[Point]) -> Option<Point> {
    if points.is_empty() {
        return None;
    }
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    Some([c[0] / n, c[1] / n, c[2] / n])
}

/// Greedy farthest point sampling.
///
/// Starts at the point farthest from the centroid (lowest index on ties) and
/// repeatedly adds the point whose distance to the selected set is largest.
/// With fewer than `n_target` points, every index is returned in FPS order
/// followed by copies of index 0.
pub fn farthest_point_sample(points: &[Point], n_target: usize) -> Result<Vec<usize>> {
    let c = centroid(points).ok_or_else(|| Error::EmptyInput("farthest point sampling of an empty cloud".into()))?;
    let m = points.len();
    let take = m.min(n_target);
    let mut out = Vec::with_capacity(n_target);
    if take > 0 {
        let mut start = 0;
        let mut best = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = sq_dist(p, &c);
            if d > best {
                best = d;
                start = i;
            }
        }
        let mut min_d = vec![f64::INFINITY; m];
        let mut chosen = vec![false; m];
        let mut cur = start;
        for _ in 0..take {
            out.push(cur);
            chosen[cur] = true;
            let mut next = usize::MAX;
            let mut next_d = f64::NEG_INFINITY;
            for (i, p) in points.iter().enumerate() {
                if chosen[i] {
                    continue;
                }
                let d = sq_dist(p, &points[cur]);
                if d < min_d[i] {
                    min_d[i] = d;
                }
                if min_d[i] > next_d {
                    next_d = min_d[i];
                    next = i;
                }
            }
            cur = next;
        }
    }
    out.resize(n_target, 0);
    Ok(out)
}

/// A sampled, centred frame ready for the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ProcessedFrame {
    pub points: Vec<Point>,
    pub labels: Vec<u8>,
    /// Offset that was subtracted from every point.
    pub centroid: Point,
    /// Point count before sampling.
    pub source_count: usize,
}

impl ProcessedFrame {
    pub fn denormalize(&self, p: &Point) -> Point {
        [p[0] + self.centroid[0], p[1] + self.centroid[1], p[2] + self.centroid[2]]
    }
}

/// Subtracts the centroid of `points` from each point.
pub fn center_normalize(points: &[Point], labels: &[u8]) -> Result<ProcessedFrame> {
    let c = centroid(points).ok_or_else(|| Error::EmptyInput("normalizing an empty frame".into()))?;
    normalize_with(points, labels, c)
}

/// Subtracts a given offset; used when a whole window shares one origin.
pub fn normalize_with(points: &[Point], labels: &[u8], offset: Point) -> Result<ProcessedFrame> {
    if labels.len() != points.len() {
        return Err(contract(format!("{} points but {} labels", points.len(), labels.len())));
    }
    Ok(ProcessedFrame {
        points: points
            .iter()
            .map(|p| [p[0] - offset[0], p[1] - offset[1], p[2] - offset[2]])
            .collect(),
        labels: labels.to_vec(),
        centroid: offset,
        source_count: points.len(),
    })
}

/// Point indices grouped by body part. Noise points go to a separate list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartBins {
    pub bins: Vec<Vec<usize>>,
    pub noise: Vec<usize>,
}

impl PartBins {
    pub fn mask(&self) -> Vec<bool> {
        self.bins.iter().map(|b| !b.is_empty()).collect()
    }

    pub fn any_nonempty(&self) -> bool {
        self.bins.iter().any(|b| !b.is_empty())
    }
}

pub fn bin_by_part(labels: &[u8], k_parts: usize) -> Result<PartBins> {
    let mut bins = vec![Vec::new(); k_parts];
    let mut noise = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        if l == NOISE_LABEL {
            noise.push(i);
        } else if (l as usize) < k_parts {
            bins[l as usize].push(i);
        } else {
            return Err(Error::Data(format!(
                "label {l} at point {i} is neither a part in 0..{k_parts} nor noise"
            )));
        }
    }
    Ok(PartBins { bins, noise })
}

/// Mean squared nearest-neighbour distance from `a` to `b` plus from `b` to `a`.
pub fn chamfer(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("chamfer distance of an empty set".into()));
    }
    Ok(directed(a, b) + directed(b, a))
}

fn directed(from: &[Point], to: &[Point]) -> f64 {
    let total: f64 = from
        .iter()
        .map(|p| to.iter().map(|q| sq_dist(p, q)).fold(f64::INFINITY, f64::min))
        .sum();
    total / from.len() as f64
}

pub type JointSeq = [[[f64; 3]; NUM_JOINTS]];

/// Per-timestamp MPJPE in millimetres for poses given in meters.
pub fn mpjpe(pred: &JointSeq, gt: &JointSeq) -> Result<Vec<f64>> {
    if pred.len() != gt.len() {
        return Err(contract(format!(
            "mpjpe: {} predicted frames vs {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let sum: f64 = p.iter().zip(g).map(|(a, b)| sq_dist(a, b).sqrt()).sum();
            1000.0 * sum / NUM_JOINTS as f64
        })
        .collect())
}

pub fn mpjpe_mean(pred: &JointSeq, gt: &JointSeq) -> Result<f64> {
    let per = mpjpe(pred, gt)?;
    if per.is_empty() {
        return Err(contract("mpjpe over an empty horizon"));
    }
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MinMpjpe {
    pub value_mm: f64,
    pub argmin: usize,
}

/// Best hypothesis by mean-over-horizon MPJPE; lowest index wins ties.
pub fn min_mpjpe(hypotheses: &[Vec<[[f64; 3]; NUM_JOINTS]>], gt: &JointSeq) -> Result<MinMpjpe> {
    if hypotheses.is_empty() {
        return Err(contract("min_mpjpe needs at least one hypothesis"));
    }
    let mut best = MinMpjpe {
        value_mm: f64::INFINITY,
        argmin: 0,
    };
    for (i, h) in hypotheses.iter().enumerate() {
        let v = mpjpe_mean(h, gt)?;
        if v < best.value_mm {
            best = MinMpjpe { value_mm: v, argmin: i };
        }
    }
    Ok(best)
}

/// Convenience for the standard 9-part labeller.
pub fn bin_standard(labels: &[u8]) -> Result<PartBins> {
    bin_by_part(labels, NUM_PARTS)
}
