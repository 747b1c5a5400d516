//! Horizon evaluation and robustness sweeps.

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::MotionSample;
use crate::autodiff::{Graph, ParamStore};
use crate::error::{contract, Error, Result};
use crate::model::{forward_diverse, tensor_poses, ModelConfig};
use crate::pcops::mpjpe;
use crate::sim::augment::{inject_noise, inject_occlusion, select_frames, stream_seed, NOISE_POINTS, NOISE_RADIUS, OCCLUSION_CUBE};
use crate::Pose;

/// Short-term horizons in milliseconds.
pub const SHORT_HORIZONS_MS: [u32; 4] = [100, 200, 300, 400];
/// Long-term horizons in milliseconds.
pub const LONG_HORIZONS_MS: [u32; 3] = [600, 800, 1000];

/// Standard horizons that fit in `t_pred` frames at `fps`.
pub fn standard_horizons(fps: f64, t_pred: usize) -> Vec<u32> {
    SHORT_HORIZONS_MS
        .iter()
        .chain(&LONG_HORIZONS_MS)
        .copied()
        .filter(|&h| horizon_frame(h, fps, t_pred).is_ok())
        .collect()
}

/// 1-based future frame of a horizon: `round(h · fps / 1000)`.
pub fn horizon_frame(horizon_ms: u32, fps: f64, t_pred: usize) -> Result<usize> {
    let f = (horizon_ms as f64 * fps / 1000.0).round();
    if f < 1.0 || f > t_pred as f64 {
        return Err(contract(format!(
            "horizon {horizon_ms} ms is frame {f} at {fps} fps, outside 1..={t_pred}"
        )));
    }
    Ok(f as usize)
}

pub fn horizon_key(horizon_ms: u32) -> String {
    format!("h{horizon_ms}")
}

/// Anything that forecasts world-frame future poses for a sample.
pub trait MotionPredictor: Sync {
    fn hypotheses(&self) -> usize;

    /// `M` hypotheses of `t_pred` world-frame poses each.
    fn predict(&self, sample: &MotionSample) -> Result<Vec<Vec<Pose>>>;
}

/// The network with fixed parameters.
#[derive(Clone, Debug)]
pub struct ModelPredictor {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
}

impl MotionPredictor for ModelPredictor {
    fn hypotheses(&self) -> usize {
        self.config.m_hypotheses
    }

    fn predict(&self, sample: &MotionSample) -> Result<Vec<Vec<Pose>>> {
        let prep = sample.prepared()?;
        let mut g = Graph::<f32>::new();
        let p = self.params.bind(&mut g);
        let fg = forward_diverse(&mut g, &p, &self.config, &prep.frames, &prep.bins)?;
        let c = prep.centroid;
        fg.hypotheses
            .iter()
            .map(|h| {
                let poses = tensor_poses(g.value(h.joints));
                let future = &poses[self.config.t_obs..];
                if future.iter().flatten().flatten().any(|x| !x.is_finite()) {
                    return Err(Error::Divergence("model produced non-finite joints".into()));
                }
                Ok(future
                    .iter()
                    .map(|pose| pose.map(|j| [j[0] + c[0], j[1] + c[1], j[2] + c[2]]))
                    .collect())
            })
            .collect()
    }
}

pub type HorizonTable = IndexMap<String, f64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Percent for occlusion and noise, lower bin edge in meters for distance.
    pub level: f64,
    pub samples: usize,
    pub mpjpe_mm: HorizonTable,
    pub avg: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Sweeps {
    pub occlusion: Vec<SweepRow>,
    pub noise: Vec<SweepRow>,
    pub distance: Vec<SweepRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Root seed of the evaluated model.
    pub seed: u64,
    /// Root seed of the dataset, when it has a manifest.
    pub data_seed: Option<u64>,
    pub fps: f64,
    pub samples: usize,
    pub hypotheses: usize,
    /// MPJPE of the first hypothesis.
    pub mpjpe_mm: HorizonTable,
    pub avg_short: Option<f64>,
    pub avg_long: Option<f64>,
    /// Per-horizon minimum over hypotheses, when there is more than one.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub min_mpjpe_mm: Option<HorizonTable>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hypothesis_mpjpe_mm: Option<Vec<HorizonTable>>,
    pub sweeps: Sweeps,
}

/// Per-sample, per-hypothesis MPJPE (mm) at each horizon.
struct HorizonErrors {
    /// `[sample][hypothesis][horizon]`
    values: Vec<Vec<Vec<f64>>>,
}

fn horizon_errors(
    predictor: &dyn MotionPredictor,
    samples: &[MotionSample],
    frames: &[usize],
) -> Result<HorizonErrors> {
    let m = predictor.hypotheses();
    let values = samples
        .par_iter()
        .map(|s| {
            let hyps = predictor.predict(s)?;
            if hyps.len() != m {
                return Err(contract(format!("predictor returned {} hypotheses, expected {m}", hyps.len())));
            }
            hyps.iter()
                .map(|h| {
                    let per = mpjpe(h, &s.future_gt_joints)?;
                    Ok(frames.iter().map(|&f| per[f - 1]).collect())
                })
                .collect::<Result<Vec<Vec<f64>>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HorizonErrors { values })
}

impl HorizonErrors {
    /// Mean over samples of `pick(sample's [hypothesis][horizon])`, summed in
    /// sample order.
    fn mean(&self, n_horizons: usize, pick: impl Fn(&[Vec<f64>], usize) -> f64) -> Vec<f64> {
        let n = self.values.len() as f64;
        (0..n_horizons)
            .map(|k| self.values.iter().map(|s| pick(s, k)).sum::<f64>() / n)
            .collect()
    }
}

fn table(horizons: &[u32], values: &[f64]) -> HorizonTable {
    horizons.iter().zip(values).map(|(&h, &v)| (horizon_key(h), v)).collect()
}

fn average(horizons: &[u32], values: &[f64], keep: impl Fn(u32) -> bool) -> Option<f64> {
    let picked: Vec<f64> = horizons.iter().zip(values).filter(|(&h, _)| keep(h)).map(|(_, &v)| v).collect();
    (!picked.is_empty()).then(|| picked.iter().sum::<f64>() / picked.len() as f64)
}

fn check_inputs(samples: &[MotionSample], fps: f64, horizons: &[u32]) -> Result<Vec<usize>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::EmptyInput("no samples to evaluate".into()))?;
    if horizons.is_empty() {
        return Err(contract("no horizons to evaluate"));
    }
    let t_pred = first.t_pred();
    horizons.iter().map(|&h| horizon_frame(h, fps, t_pred)).collect()
}

/// MPJPE per horizon over `samples`, in world millimeters.
pub fn evaluate(
    predictor: &dyn MotionPredictor,
    samples: &[MotionSample],
    fps: f64,
    horizons: &[u32],
    seed: u64,
) -> Result<EvalReport> {
    let frames = check_inputs(samples, fps, horizons)?;
    let errs = horizon_errors(predictor, samples, &frames)?;
    let first = errs.mean(horizons.len(), |s, k| s[0][k]);
    let m = predictor.hypotheses();
    let (min_mpjpe_mm, hypothesis_mpjpe_mm) = if m > 1 {
        let min = errs.mean(horizons.len(), |s, k| s.iter().map(|h| h[k]).fold(f64::INFINITY, f64::min));
        let per = (0..m)
            .map(|i| table(horizons, &errs.mean(horizons.len(), |s, k| s[i][k])))
            .collect();
        (Some(table(horizons, &min)), Some(per))
    } else {
        (None, None)
    };
    Ok(EvalReport {
        seed,
        data_seed: None,
        fps,
        samples: samples.len(),
        hypotheses: m,
        mpjpe_mm: table(horizons, &first),
        avg_short: average(horizons, &first, |h| h <= 400),
        avg_long: average(horizons, &first, |h| h >= 600),
        min_mpjpe_mm,
        hypothesis_mpjpe_mm,
        sweeps: Sweeps::default(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepMode {
    Occlusion,
    Noise,
    Distance,
}

impl std::str::FromStr for SweepMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "occlusion" => Ok(Self::Occlusion),
            "noise" => Ok(Self::Noise),
            "distance" => Ok(Self::Distance),
            _ => Err(Error::Config(format!("unknown sweep mode {s:?}"))),
        }
    }
}

const TAG_SWEEP_FRAMES: u64 = 0x5eed_0001;
const TAG_SWEEP_OCCL: u64 = 0x5eed_0002 << 32;
const TAG_SWEEP_NOISE: u64 = 0x5eed_0003 << 32;

/// Copy of `sample` (index `i`) with a `ratio` share of its observed frames
/// augmented. Frames are chosen nested in `ratio`, and each frame's
/// augmentation seed depends only on `(seed, i, t)`.
pub fn augment_sample(sample: &MotionSample, i: usize, mode: SweepMode, ratio: f64, seed: u64) -> Result<MotionSample> {
    let flags = select_frames(sample.t_obs(), ratio, stream_seed(seed, i as u64, TAG_SWEEP_FRAMES))?;
    sample.map_observed(|t, f| {
        if !flags[t] {
            return Ok(f.clone());
        }
        let t = t as u64;
        Ok(match mode {
            SweepMode::Occlusion => inject_occlusion(f, OCCLUSION_CUBE, stream_seed(seed, i as u64, TAG_SWEEP_OCCL | t))?.frame,
            SweepMode::Noise => {
                inject_noise(f, NOISE_POINTS, NOISE_RADIUS, stream_seed(seed, i as u64, TAG_SWEEP_NOISE | t))?.frame
            }
            SweepMode::Distance => f.clone(),
        })
    })
}

fn row(
    predictor: &dyn MotionPredictor,
    samples: &[MotionSample],
    fps: f64,
    horizons: &[u32],
    level: f64,
) -> Result<SweepRow> {
    if samples.is_empty() {
        return Ok(SweepRow {
            level,
            samples: 0,
            mpjpe_mm: HorizonTable::new(),
            avg: None,
        });
    }
    let r = evaluate(predictor, samples, fps, horizons, 0)?;
    let values: Vec<f64> = r.mpjpe_mm.values().copied().collect();
    Ok(SweepRow {
        level,
        samples: r.samples,
        avg: average(horizons, &values, |_| true),
        mpjpe_mm: r.mpjpe_mm,
    })
}

/// One row per level. Occlusion and noise levels are percentages of
/// observed frames, re-augmented from the clean samples with fixed seeds;
/// samples left without any observed point are dropped from that row.
/// Distance levels are ascending lower bin edges in meters; the last bin is
/// open-ended.
pub fn robustness_sweep(
    predictor: &dyn MotionPredictor,
    samples: &[MotionSample],
    fps: f64,
    horizons: &[u32],
    mode: SweepMode,
    levels: &[f64],
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if levels.is_empty() {
        return Err(contract("sweep needs at least one level"));
    }
    check_inputs(samples, fps, horizons)?;
    match mode {
        SweepMode::Occlusion | SweepMode::Noise => levels
            .iter()
            .map(|&level| {
                if !(0.0..=100.0).contains(&level) {
                    return Err(Error::Config(format!("sweep level {level}% is outside 0..=100")));
                }
                let mut copies = Vec::with_capacity(samples.len());
                for (i, s) in samples.iter().enumerate() {
                    let a = augment_sample(s, i, mode, level / 100.0, seed)?;
                    if a.centroid().is_some() {
                        copies.push(a);
                    }
                }
                row(predictor, &copies, fps, horizons, level)
            })
            .collect(),
        SweepMode::Distance => {
            if levels.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::Config("distance levels must be strictly ascending".into()));
            }
            let mut bins: Vec<Vec<MotionSample>> = vec![Vec::new(); levels.len()];
            for s in samples {
                let d = s
                    .meta
                    .distance_m
                    .ok_or_else(|| contract("distance sweep needs per-sequence distances from a dataset manifest"))?;
                if let Some(b) = levels.iter().rposition(|&lo| d >= lo) {
                    bins[b].push(s.clone());
                }
            }
            levels
                .iter()
                .zip(&bins)
                .map(|(&level, bin)| row(predictor, bin, fps, horizons, level))
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::{window_samples, SequenceStore, StoredSequence};
    use crate::sim::{synth_sequence, HumanoidRig, ScanFrame, Sequence, SynthConfig};

    /// Returns the ground truth, optionally offset per hypothesis.
    struct Oracle {
        m: usize,
        offset: f64,
    }

    impl MotionPredictor for Oracle {
        fn hypotheses(&self) -> usize {
            self.m
        }

        fn predict(&self, s: &MotionSample) -> Result<Vec<Vec<Pose>>> {
            Ok((0..self.m)
                .map(|i| {
                    s.future_gt_joints
                        .iter()
                        .map(|p| p.map(|j| [j[0] + self.offset * i as f64, j[1], j[2]]))
                        .collect()
                })
                .collect())
        }
    }

    /// Error grows with the number of missing observed points.
    struct PointCounter;

    impl MotionPredictor for PointCounter {
        fn hypotheses(&self) -> usize {
            1
        }

        fn predict(&self, s: &MotionSample) -> Result<Vec<Vec<Pose>>> {
            let body: usize = s
                .observed
                .iter()
                .map(|f| f.labels.iter().filter(|&&l| l != crate::NOISE_LABEL).count())
                .sum();
            let noise: usize = s.observed.iter().map(ScanFrame::len).sum::<usize>() - body;
            let off = 1.0 / (1.0 + body as f64) + 1e-3 * noise as f64;
            Ok(vec![s.future_gt_joints.iter().map(|p| p.map(|j| [j[0] + off, j[1], j[2]])).collect()])
        }
    }

    fn samples(t_pred: usize) -> Vec<MotionSample> {
        let cfg = SynthConfig {
            n_sequences: 3,
            frames_per_sequence: 4 + t_pred + 2,
            dist_min: 6.0,
            dist_max: 12.0,
            seed: 5,
            ..SynthConfig::default()
        };
        let rig = HumanoidRig::standard();
        let sequences = (0..cfg.n_sequences)
            .map(|i| {
                let (sequence, meta): (Sequence, _) = synth_sequence(&cfg, &rig, i).unwrap();
                StoredSequence {
                    id: i,
                    name: meta.file,
                    distance_m: Some(meta.distance_m),
                    noise_frames: meta.noise_frames,
                    occluded_frames: meta.occluded_frames,
                    sequence,
                }
            })
            .collect();
        let store = SequenceStore {
            manifest: None,
            sequences,
        };
        let model = ModelConfig {
            n_points: 64,
            ..ModelConfig::desk(t_pred)
        };
        window_samples(&store, &model, 1).unwrap()
    }

    #[test]
    fn horizon_frames_at_ten_fps() {
        assert_eq!(horizon_frame(100, 10.0, 10).unwrap(), 1);
        assert_eq!(horizon_frame(400, 10.0, 10).unwrap(), 4);
        assert_eq!(horizon_frame(1000, 10.0, 10).unwrap(), 10);
        assert!(matches!(horizon_frame(600, 10.0, 4), Err(Error::Contract(_))));
        assert!(horizon_frame(20, 10.0, 4).is_err());
        assert_eq!(standard_horizons(10.0, 4), vec![100, 200, 300, 400]);
        assert_eq!(standard_horizons(10.0, 10).len(), 7);
    }

    #[test]
    fn exact_predictor_scores_zero() {
        let s = samples(10);
        let r = evaluate(&Oracle { m: 1, offset: 0.0 }, &s, 10.0, &standard_horizons(10.0, 10), 1).unwrap();
        assert_eq!(r.mpjpe_mm.len(), 7);
        assert!(r.mpjpe_mm.values().all(|&v| v == 0.0));
        assert_eq!(r.avg_short, Some(0.0));
        assert_eq!(r.avg_long, Some(0.0));
        assert!(r.min_mpjpe_mm.is_none());
        assert_eq!(r.samples, s.len());
    }

    #[test]
    fn min_is_below_every_hypothesis() {
        let s = samples(4);
        let hz = standard_horizons(10.0, 4);
        let r = evaluate(&Oracle { m: 3, offset: 0.01 }, &s, 10.0, &hz, 1).unwrap();
        let min = r.min_mpjpe_mm.as_ref().unwrap();
        for per in r.hypothesis_mpjpe_mm.as_ref().unwrap() {
            for (k, v) in per {
                assert!(min[k] <= *v);
            }
        }
        assert_eq!(min["h100"], 0.0);
        assert!((r.hypothesis_mpjpe_mm.unwrap()[2]["h400"] - 20.0).abs() < 1e-9);
        let keys: Vec<&String> = r.mpjpe_mm.keys().collect();
        assert_eq!(keys, ["h100", "h200", "h300", "h400"]);
    }

    #[test]
    fn horizon_beyond_prediction_is_rejected() {
        let s = samples(4);
        let e = evaluate(&Oracle { m: 1, offset: 0.0 }, &s, 10.0, &[100, 600], 1).unwrap_err();
        assert!(matches!(e, Error::Contract(_)));
    }

    #[test]
    fn sweeps_are_nested_and_level_zero_is_clean() {
        let s = samples(4);
        let hz = standard_horizons(10.0, 4);
        let clean = evaluate(&PointCounter, &s, 10.0, &hz, 0).unwrap();
        for mode in [SweepMode::Occlusion, SweepMode::Noise] {
            let rows = robustness_sweep(&PointCounter, &s, 10.0, &hz, mode, &[0.0, 20.0, 40.0, 80.0], 9).unwrap();
            assert_eq!(rows.len(), 4);
            assert_eq!(rows[0].mpjpe_mm, clean.mpjpe_mm);
            for w in rows.windows(2) {
                assert!(w[1].avg.unwrap() >= w[0].avg.unwrap(), "{mode:?}: {rows:?}");
            }
            assert!(rows[3].avg > rows[0].avg);
        }
        assert!(robustness_sweep(&PointCounter, &s, 10.0, &hz, SweepMode::Noise, &[120.0], 9).is_err());
    }

    #[test]
    fn distance_bins_partition_samples() {
        let s = samples(4);
        let hz = standard_horizons(10.0, 4);
        let rows = robustness_sweep(&PointCounter, &s, 10.0, &hz, SweepMode::Distance, &[0.0, 8.0, 10.0, 30.0], 0)
            .unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows.iter().map(|r| r.samples).sum::<usize>(), s.len());
        assert_eq!(rows[3].samples, 0);
        assert_eq!(rows[3].avg, None);
    }

    #[test]
    fn evaluation_is_repeatable_and_serializes_fixed_keys() {
        let s = samples(4);
        let hz = standard_horizons(10.0, 4);
        let a = evaluate(&PointCounter, &s, 10.0, &hz, 3).unwrap();
        let b = evaluate(&PointCounter, &s, 10.0, &hz, 3).unwrap();
        assert_eq!(a, b);
        let v: serde_json::Value = serde_json::to_value(&a).unwrap();
        assert!(v["mpjpe_mm"]["h400"].is_f64());
        assert!(v["sweeps"]["occlusion"].is_array());
        assert!(v.get("min_mpjpe_mm").is_none());
        let back: EvalReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, a);
    }
}
