//! Sequence loading, windowing and per-sample preprocessing.

use std::path::Path;
use std::sync::OnceLock;

use log::debug;

use crate::error::{contract, Error, Result};
use crate::model::{ModelConfig, Targets};
use crate::pcops::{bin_by_part, farthest_point_sample, normalize_with, PartBins, Point, ProcessedFrame};
use crate::sim::augment::stream_seed;
use crate::sim::dataset::{dataset_files, read_sequence, DatasetManifest};
use crate::sim::{ScanFrame, Sequence};
use crate::{Pose, NOISE_LABEL};

#[derive(Clone, Debug)]
pub struct StoredSequence {
    /// Position in the dataset (manifest order).
    pub id: usize,
    pub name: String,
    pub sequence: Sequence,
    /// Horizontal scanner distance, when the manifest records it.
    pub distance_m: Option<f64>,
    pub noise_frames: Vec<bool>,
    pub occluded_frames: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct SequenceStore {
    pub manifest: Option<DatasetManifest>,
    pub sequences: Vec<StoredSequence>,
}

impl SequenceStore {
    /// Frame rate shared by every sequence.
    pub fn fps(&self) -> Result<f64> {
        let first = self
            .sequences
            .first()
            .ok_or_else(|| Error::EmptyInput("dataset has no sequences".into()))?;
        let fps = first.sequence.fps;
        if let Some(s) = self.sequences.iter().find(|s| s.sequence.fps != fps) {
            return Err(Error::Data(format!(
                "sequence {} runs at {} fps, {} at {} fps",
                s.name, s.sequence.fps, first.name, fps
            )));
        }
        Ok(fps as f64)
    }

    /// Root seed of the generating run, if recorded.
    pub fn seed(&self) -> Option<u64> {
        self.manifest.as_ref().map(|m| m.seed)
    }
}

/// Reads every sequence of a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<SequenceStore> {
    let (manifest, files) = dataset_files(dir)?;
    if files.is_empty() {
        return Err(Error::EmptyInput(format!("no .lhmp files in {}", dir.display())));
    }
    let mut sequences = Vec::with_capacity(files.len());
    for (id, path) in files.iter().enumerate() {
        let sequence = read_sequence(path)?;
        let meta = manifest.as_ref().and_then(|m| m.sequences.get(id));
        let n = sequence.frames.len();
        sequences.push(StoredSequence {
            id,
            name: path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            distance_m: meta.map(|m| m.distance_m),
            noise_frames: meta.map(|m| m.noise_frames.clone()).unwrap_or_else(|| vec![false; n]),
            occluded_frames: meta.map(|m| m.occluded_frames.clone()).unwrap_or_else(|| vec![false; n]),
            sequence,
        });
    }
    Ok(SequenceStore { manifest, sequences })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleMeta {
    pub sequence: usize,
    pub start: usize,
    pub distance_m: Option<f64>,
    /// Augmentation flags of the window's frames, observed then future.
    pub noise_frames: Vec<bool>,
    pub occluded_frames: Vec<bool>,
}

/// Network inputs of a sample, computed on first use.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub frames: Vec<ProcessedFrame>,
    pub bins: Vec<PartBins>,
    /// Shared origin of the window; subtract it to normalize.
    pub centroid: Point,
    /// Supervision for all window frames, in normalized coordinates.
    pub targets: Targets,
}

/// One training or evaluation window.
#[derive(Debug)]
pub struct MotionSample {
    pub observed: Vec<ScanFrame>,
    pub observed_gt_joints: Vec<Pose>,
    pub future_gt_joints: Vec<Pose>,
    /// Raw future clouds, body points only.
    pub future_gt_clouds: Vec<Vec<Point>>,
    pub meta: SampleMeta,
    n_points: usize,
    k_parts: usize,
    cache: OnceLock<Prepared>,
}

impl Clone for MotionSample {
    fn clone(&self) -> Self {
        let cache = OnceLock::new();
        if let Some(p) = self.cache.get() {
            let _ = cache.set(p.clone());
        }
        Self {
            observed: self.observed.clone(),
            observed_gt_joints: self.observed_gt_joints.clone(),
            future_gt_joints: self.future_gt_joints.clone(),
            future_gt_clouds: self.future_gt_clouds.clone(),
            meta: self.meta.clone(),
            n_points: self.n_points,
            k_parts: self.k_parts,
            cache,
        }
    }
}

fn body_points(frame: &ScanFrame) -> Vec<Point> {
    frame
        .points
        .iter()
        .zip(&frame.labels)
        .filter(|(_, &l)| l != NOISE_LABEL)
        .map(|(p, _)| *p)
        .collect()
}

impl MotionSample {
    pub fn t_obs(&self) -> usize {
        self.observed.len()
    }

    pub fn t_pred(&self) -> usize {
        self.future_gt_joints.len()
    }

    /// Window origin: centroid of the last non-empty observed frame.
    pub fn centroid(&self) -> Option<Point> {
        self.observed.iter().rev().find_map(|f| crate::pcops::centroid(&f.points))
    }

    /// Samples each observed frame to `n_points` by FPS and centres the
    /// window on [`Self::centroid`]. Empty frames become `n_points` points at
    /// the origin labelled as noise. Cached after the first call.
    pub fn prepared(&self) -> Result<&Prepared> {
        if let Some(p) = self.cache.get() {
            return Ok(p);
        }
        let p = self.prepare()?;
        let _ = self.cache.set(p);
        Ok(self.cache.get().expect("cache was just filled"))
    }

    fn prepare(&self) -> Result<Prepared> {
        let c = self
            .centroid()
            .ok_or_else(|| Error::Degenerate("every observed frame of the window is empty".into()))?;
        let mut frames = Vec::with_capacity(self.t_obs());
        let mut bins = Vec::with_capacity(self.t_obs());
        for f in &self.observed {
            let pf = if f.is_empty() {
                ProcessedFrame {
                    points: vec![[0.0; 3]; self.n_points],
                    labels: vec![NOISE_LABEL; self.n_points],
                    centroid: c,
                    source_count: 0,
                }
            } else {
                let idx = farthest_point_sample(&f.points, self.n_points)?;
                let pts: Vec<Point> = idx.iter().map(|&i| f.points[i]).collect();
                let labels: Vec<u8> = idx.iter().map(|&i| f.labels[i]).collect();
                let mut pf = normalize_with(&pts, &labels, c)?;
                pf.source_count = f.len();
                pf
            };
            bins.push(bin_by_part(&pf.labels, self.k_parts)?);
            frames.push(pf);
        }
        let shift = |p: &Point| [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
        let joints = self
            .observed_gt_joints
            .iter()
            .chain(&self.future_gt_joints)
            .map(|pose| pose.map(|j| shift(&j)))
            .collect();
        let clouds = self
            .observed
            .iter()
            .map(body_points)
            .chain(self.future_gt_clouds.iter().cloned())
            .map(|cloud| cloud.iter().map(shift).collect())
            .collect();
        Ok(Prepared {
            frames,
            bins,
            centroid: c,
            targets: Targets { joints, clouds },
        })
    }

    /// A copy whose observed frame `t` is replaced by `f(t, frame)`; the
    /// ground truth is untouched and preprocessing is redone on demand.
    pub fn map_observed(&self, mut f: impl FnMut(usize, &ScanFrame) -> Result<ScanFrame>) -> Result<Self> {
        let observed = self
            .observed
            .iter()
            .enumerate()
            .map(|(t, fr)| f(t, fr))
            .collect::<Result<_>>()?;
        Ok(Self {
            observed,
            cache: OnceLock::new(),
            ..self.clone()
        })
    }
}

/// Number of windows of length `len` in a sequence of `frames` frames.
pub fn window_count(frames: usize, len: usize, stride: usize) -> usize {
    if stride == 0 || frames < len {
        0
    } else {
        (frames - len) / stride + 1
    }
}

/// Sliding windows of `cfg.t_obs + cfg.t_pred` frames with the given stride.
/// Windows never cross sequences; windows whose observed frames are all
/// empty are skipped.
pub fn window_samples(store: &SequenceStore, cfg: &ModelConfig, stride: usize) -> Result<Vec<MotionSample>> {
    if stride == 0 {
        return Err(contract("window stride must be at least 1"));
    }
    let (t_obs, t_pred) = (cfg.t_obs, cfg.t_pred);
    let len = t_obs + t_pred;
    let mut out = Vec::new();
    let mut skipped = 0;
    for s in &store.sequences {
        let frames = &s.sequence.frames;
        for w in 0..window_count(frames.len(), len, stride) {
            let start = w * stride;
            let window = &frames[start..start + len];
            let (obs, fut) = window.split_at(t_obs);
            if obs.iter().all(ScanFrame::is_empty) {
                skipped += 1;
                continue;
            }
            let flags = |v: &[bool]| v.get(start..start + len).map(<[bool]>::to_vec).unwrap_or_else(|| vec![false; len]);
            out.push(MotionSample {
                observed: obs.to_vec(),
                observed_gt_joints: obs.iter().map(|f| f.gt_joints).collect(),
                future_gt_joints: fut.iter().map(|f| f.gt_joints).collect(),
                future_gt_clouds: fut.iter().map(body_points).collect(),
                meta: SampleMeta {
                    sequence: s.id,
                    start,
                    distance_m: s.distance_m,
                    noise_frames: flags(&s.noise_frames),
                    occluded_frames: flags(&s.occluded_frames),
                },
                n_points: cfg.n_points,
                k_parts: cfg.k_parts,
                cache: OnceLock::new(),
            });
        }
    }
    if skipped > 0 {
        debug!("skipped {skipped} window(s) with no observed points");
    }
    Ok(out)
}

const TAG_SPLIT: u64 = 0x5911_7000_0000_0000;

/// True when sequence `id` belongs to the validation tenth under `seed`.
pub fn is_validation(seed: u64, id: usize) -> bool {
    stream_seed(seed, id as u64, TAG_SPLIT) % 10 == 0
}

/// Sequence ids split 90/10 into `(train, validation)` by a seeded hash.
/// If the hash would leave no training sequence, everything trains.
pub fn split_sequences(ids: &[usize], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let (val, train): (Vec<usize>, Vec<usize>) = ids.iter().partition(|&&id| is_validation(seed, id));
    if train.is_empty() {
        (val, Vec::new())
    } else {
        (train, val)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::dataset::{synth_dataset, SynthConfig};
    use crate::NUM_JOINTS;

    fn frame(n: usize, t: f64) -> ScanFrame {
        let mut f = ScanFrame::empty([[t, 8.0, 1.0]; NUM_JOINTS], t);
        for i in 0..n {
            let x = i as f64;
            f.points.push([0.2 * (x * 0.9).sin() + t, 8.0 + 0.1 * x.cos(), 0.1 * x]);
            f.labels.push((i % 9) as u8);
        }
        f
    }

    fn store(lengths: &[usize]) -> SequenceStore {
        let sequences = lengths
            .iter()
            .enumerate()
            .map(|(id, &n)| StoredSequence {
                id,
                name: format!("s{id}"),
                sequence: Sequence {
                    fps: 10.0,
                    frames: (0..n).map(|t| frame(40, t as f64)).collect(),
                },
                distance_m: None,
                noise_frames: vec![false; n],
                occluded_frames: vec![false; n],
            })
            .collect();
        SequenceStore {
            manifest: None,
            sequences,
        }
    }

    fn cfg(t_obs: usize, t_pred: usize) -> ModelConfig {
        ModelConfig {
            t_obs,
            t_pred,
            n_points: 32,
            ..ModelConfig::desk(t_pred)
        }
    }

    #[test]
    fn window_counts() {
        assert_eq!(window_samples(&store(&[14]), &cfg(4, 10), 1).unwrap().len(), 1);
        assert_eq!(window_samples(&store(&[20]), &cfg(4, 4), 2).unwrap().len(), 7);
        assert_eq!(window_samples(&store(&[7]), &cfg(4, 4), 1).unwrap().len(), 0);
        assert!(window_samples(&store(&[20]), &cfg(4, 4), 0).is_err());
    }

    #[test]
    fn windows_stay_inside_their_sequence() {
        let s = store(&[10, 9, 12]);
        let samples = window_samples(&s, &cfg(3, 2), 1).unwrap();
        assert_eq!(samples.len(), 6 + 5 + 8);
        for smp in &samples {
            let seq = &s.sequences[smp.meta.sequence].sequence;
            assert!(smp.meta.start + 5 <= seq.frames.len());
            assert_eq!(smp.observed[0], seq.frames[smp.meta.start]);
            assert_eq!(smp.future_gt_joints[1], seq.frames[smp.meta.start + 4].gt_joints);
        }
    }

    #[test]
    fn preparation_samples_centres_and_caches() {
        let s = store(&[8]);
        let samples = window_samples(&s, &cfg(4, 4), 4).unwrap();
        let smp = &samples[0];
        let p = smp.prepared().unwrap();
        let last = crate::pcops::centroid(&smp.observed[3].points).unwrap();
        assert_eq!(p.centroid, last);
        assert!(p.frames.iter().all(|f| f.points.len() == 32 && f.centroid == last));
        assert_eq!(p.targets.joints.len(), 8);
        assert_eq!(p.targets.joints[5][0][0], smp.future_gt_joints[1][0][0] - last[0]);
        assert!(std::ptr::eq(p, smp.prepared().unwrap()));
    }

    #[test]
    fn empty_observed_frames_become_noise_padding() {
        let mut s = store(&[8]);
        s.sequences[0].sequence.frames[1].points.clear();
        s.sequences[0].sequence.frames[1].labels.clear();
        let samples = window_samples(&s, &cfg(4, 4), 4).unwrap();
        let p = samples[0].prepared().unwrap();
        assert!(p.frames[1].points.iter().all(|q| *q == [0.0; 3]));
        assert!(p.frames[1].labels.iter().all(|&l| l == NOISE_LABEL));
        assert!(!p.bins[1].any_nonempty());

        for f in &mut s.sequences[0].sequence.frames[..4] {
            f.points.clear();
            f.labels.clear();
        }
        assert_eq!(window_samples(&s, &cfg(4, 4), 4).unwrap().len(), 0);
    }

    #[test]
    fn split_is_seeded_and_covers_all() {
        let ids: Vec<usize> = (0..500).collect();
        let (tr, va) = split_sequences(&ids, 3);
        assert_eq!(tr.len() + va.len(), 500);
        assert!((30..80).contains(&va.len()), "{}", va.len());
        assert_eq!(split_sequences(&ids, 3), (tr.clone(), va.clone()));
        assert_ne!(split_sequences(&ids, 4).1, va);
        let lone = (0..100).find(|&i| is_validation(3, i)).unwrap();
        assert_eq!(split_sequences(&[lone], 3), (vec![lone], vec![]));
    }

    #[test]
    fn write_read_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_sequences: 2,
            frames_per_sequence: 6,
            noise_frame_ratio: 0.5,
            seed: 2,
            ..SynthConfig::default()
        };
        let manifest = synth_dataset(dir.path(), &cfg).unwrap();
        let store = load_dataset(dir.path()).unwrap();
        assert_eq!(store.sequences.len(), 2);
        assert_eq!(store.seed(), Some(2));
        assert_eq!(store.fps().unwrap(), 10.0);
        let rig = crate::sim::HumanoidRig::standard();
        for (i, s) in store.sequences.iter().enumerate() {
            let (seq, _) = crate::sim::synth_sequence(&cfg, &rig, i).unwrap();
            assert_eq!(s.sequence, seq);
            assert_eq!(s.noise_frames, manifest.sequences[i].noise_frames);
        }
    }
}
