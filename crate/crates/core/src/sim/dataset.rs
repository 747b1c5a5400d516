//! `.lhmp` sequence files and dataset synthesis.
//!
//! Layout (little-endian): `"LHMP"`, version `u32 = 1`, fps `f32`, frame
//! count `u32`, then per frame: point count `u32`, `n × 3` `f32` xyz,
//! `n` `u8` labels, `24 × 3` `f32` ground-truth joints.
//!
//! A dataset is a directory of sequence files plus `manifest.json`.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::augment::{self, rng_for, select_frames};
use super::mesh::skin_rig;
use super::motion::{make_motion, place_pose, MotionKind};
use super::raycast::{ray_cast, ScanConfig, ScanFrame};
use super::rig::HumanoidRig;
use crate::error::{Error, Result};
use crate::fsutil::{read, write_atomic};
use crate::{Pose, NOISE_LABEL, NUM_JOINTS, NUM_PARTS};

pub const MAGIC: &[u8; 4] = b"LHMP";
pub const VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Consecutive scans of one subject at a fixed rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub fps: f32,
    pub frames: Vec<ScanFrame>,
}

pub fn encode_sequence(seq: &Sequence) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&seq.fps.to_le_bytes());
    buf.extend_from_slice(&(seq.frames.len() as u32).to_le_bytes());
    for f in &seq.frames {
        buf.extend_from_slice(&(f.points.len() as u32).to_le_bytes());
        for p in &f.points {
            for &x in p {
                buf.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        buf.extend_from_slice(&f.labels);
        for j in &f.gt_joints {
            for &x in j {
                buf.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated file: needed {n} bytes for {what} at byte offset {}, only {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_sequence(bytes: &[u8]) -> Result<Sequence> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected \"LHMP\"")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}, expected {VERSION}")));
    }
    let fps = r.f32("fps")?;
    let n_frames = r.u32("frame count")? as usize;
    let mut frames = Vec::with_capacity(n_frames.min(1 << 16));
    for fi in 0..n_frames {
        let n = r.u32("point count")? as usize;
        let mut points = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let x = r.f32("point")?;
            let y = r.f32("point")?;
            let z = r.f32("point")?;
            points.push([x as f64, y as f64, z as f64]);
        }
        let label_offset = r.pos;
        let labels = r.take(n, "labels")?.to_vec();
        if let Some((i, &l)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= NUM_PARTS && l != NOISE_LABEL)
        {
            return Err(Error::Format(format!(
                "frame {fi}: invalid label {l} at byte offset {}",
                label_offset + i
            )));
        }
        let mut gt_joints = [[0.0; 3]; NUM_JOINTS];
        for j in gt_joints.iter_mut() {
            for x in j.iter_mut() {
                *x = r.f32("joints")? as f64;
            }
        }
        frames.push(ScanFrame {
            points,
            labels,
            gt_joints,
            timestamp: fi as f64 / fps as f64,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last frame at offset {}",
            bytes.len() - r.pos,
            r.pos
        )));
    }
    Ok(Sequence { fps, frames })
}

pub fn write_sequence(path: &Path, seq: &Sequence) -> Result<()> {
    write_atomic(path, &encode_sequence(seq))
}

pub fn read_sequence(path: &Path) -> Result<Sequence> {
    decode_sequence(&read(path)?).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn quantize(x: f64) -> f64 {
    x as f32 as f64
}

/// Rounds every coordinate to `f32` so in-memory frames equal what is stored.
pub fn quantize_frame(frame: &mut ScanFrame) {
    for p in frame.points.iter_mut() {
        p.iter_mut().for_each(|x| *x = quantize(*x));
    }
    for j in frame.gt_joints.iter_mut() {
        j.iter_mut().for_each(|x| *x = quantize(*x));
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_sequences: usize,
    pub frames_per_sequence: usize,
    pub fps: f64,
    pub dist_min: f64,
    pub dist_max: f64,
    pub noise_frame_ratio: f64,
    pub occl_frame_ratio: f64,
    pub seed: u64,
    pub scan: ScanConfig,
    pub capsule_segments: usize,
    pub motions: Vec<MotionKind>,
    pub noise_points: usize,
    pub noise_radius: f64,
    pub occlusion_cube: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_sequences: 200,
            frames_per_sequence: 14,
            fps: 10.0,
            dist_min: 6.0,
            dist_max: 27.0,
            noise_frame_ratio: 0.0,
            occl_frame_ratio: 0.0,
            seed: 0,
            scan: ScanConfig::desk(),
            capsule_segments: 8,
            motions: MotionKind::ALL.to_vec(),
            noise_points: augment::NOISE_POINTS,
            noise_radius: augment::NOISE_RADIUS,
            occlusion_cube: augment::OCCLUSION_CUBE,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.scan.validate()?;
        for (name, r) in [("noise", self.noise_frame_ratio), ("occlusion", self.occl_frame_ratio)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} frame ratio {r} is outside [0, 1]")));
            }
        }
        if self.frames_per_sequence == 0 || !(self.fps > 0.0) {
            return Err(Error::Config("need at least one frame and a positive fps".into()));
        }
        if !(self.dist_min > 0.0 && self.dist_min <= self.dist_max) {
            return Err(Error::Config(format!(
                "distance range [{}, {}] is invalid",
                self.dist_min, self.dist_max
            )));
        }
        if self.motions.is_empty() {
            return Err(Error::Config("no motion kinds to sample from".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub file: String,
    pub index: usize,
    pub motion: MotionKind,
    pub motion_seed: u64,
    pub distance_m: f64,
    pub azimuth_rad: f64,
    pub yaw_rad: f64,
    pub frames: usize,
    pub empty_frames: usize,
    pub noise_frames: Vec<bool>,
    pub occluded_frames: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub params: SynthConfig,
    pub sequences: Vec<SequenceMeta>,
}

// Stream tags so the per-sequence and per-frame generators never collide.
const TAG_SEQUENCE: u64 = u64::MAX;
const TAG_NOISE_FRAMES: u64 = u64::MAX - 1;
const TAG_OCCL_FRAMES: u64 = u64::MAX - 2;
const TAG_NOISE: u64 = 1 << 32;
const TAG_OCCL: u64 = 2 << 32;

/// Renders one sequence. Randomness is drawn from streams keyed by
/// `(seed, sequence, frame)`, so sequences can be built in any order.
pub fn synth_sequence(cfg: &SynthConfig, rig: &HumanoidRig, index: usize) -> Result<(Sequence, SequenceMeta)> {
    let si = index as u64;
    let mut rng = rng_for(cfg.seed, si, TAG_SEQUENCE);
    let motion = cfg.motions[rng.random_range(0..cfg.motions.len())];
    let motion_seed: u64 = rng.random();
    let distance = if cfg.dist_max > cfg.dist_min {
        rng.random_range(cfg.dist_min..cfg.dist_max)
    } else {
        cfg.dist_min
    };
    let azimuth = rng.random_range(0.0..TAU);
    let yaw = rng.random_range(0.0..TAU);

    let n = cfg.frames_per_sequence;
    let poses = make_motion(rig, motion, n, cfg.fps, motion_seed)?;
    let noise_flags = select_frames(n, cfg.noise_frame_ratio, augment::stream_seed(cfg.seed, si, TAG_NOISE_FRAMES))?;
    let occl_flags = select_frames(n, cfg.occl_frame_ratio, augment::stream_seed(cfg.seed, si, TAG_OCCL_FRAMES))?;
    let origin = [distance * azimuth.sin(), distance * azimuth.cos(), 0.0];
    let scan = ScanConfig {
        distance,
        ..cfg.scan.clone()
    };

    let mut frames = Vec::with_capacity(n);
    let mut empty = 0;
    for (fi, pose) in poses.iter().enumerate() {
        let world: Pose = place_pose(pose, origin, yaw);
        let mesh = skin_rig(rig, &world, cfg.capsule_segments)?;
        let mut frame = ray_cast(&mesh, &scan, world, fi as f64 / cfg.fps)?;
        let fi64 = fi as u64;
        if occl_flags[fi] {
            frame = augment::inject_occlusion(&frame, cfg.occlusion_cube, augment::stream_seed(cfg.seed, si, TAG_OCCL | fi64))?
                .frame;
        }
        if noise_flags[fi] {
            frame = augment::inject_noise(
                &frame,
                cfg.noise_points,
                cfg.noise_radius,
                augment::stream_seed(cfg.seed, si, TAG_NOISE | fi64),
            )?
            .frame;
        }
        quantize_frame(&mut frame);
        if frame.is_empty() {
            empty += 1;
        }
        frames.push(frame);
    }
    let meta = SequenceMeta {
        file: sequence_file_name(index),
        index,
        motion,
        motion_seed,
        distance_m: distance,
        azimuth_rad: azimuth,
        yaw_rad: yaw,
        frames: n,
        empty_frames: empty,
        noise_frames: noise_flags,
        occluded_frames: occl_flags,
    };
    Ok((
        Sequence {
            fps: cfg.fps as f32,
            frames,
        },
        meta,
    ))
}

pub fn sequence_file_name(index: usize) -> String {
    format!("seq_{index:05}.lhmp")
}

/// Renders all sequences (in parallel) and writes them plus the manifest.
pub fn synth_dataset(out_dir: &Path, cfg: &SynthConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    let rig = HumanoidRig::standard();
    let rendered: Vec<(Sequence, SequenceMeta)> = (0..cfg.n_sequences)
        .into_par_iter()
        .map(|i| synth_sequence(cfg, &rig, i))
        .collect::<Result<_>>()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut sequences = Vec::with_capacity(rendered.len());
    for (seq, meta) in rendered {
        write_sequence(&out_dir.join(&meta.file), &seq)?;
        sequences.push(meta);
    }
    let manifest = DatasetManifest {
        format: "lhmp".into(),
        version: VERSION,
        seed: cfg.seed,
        params: cfg.clone(),
        sequences,
    };
    write_atomic(&out_dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Sequence files of a dataset directory, manifest order first.
pub fn dataset_files(dir: &Path) -> Result<(Option<DatasetManifest>, Vec<PathBuf>)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if manifest_path.exists() {
        let manifest: DatasetManifest = serde_json::from_slice(&read(&manifest_path)?)
            .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
        let files = manifest.sequences.iter().map(|m| dir.join(&m.file)).collect();
        return Ok((Some(manifest), files));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "lhmp"))
        .collect();
    files.sort();
    Ok((None, files))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            n_sequences: 2,
            frames_per_sequence: 10,
            dist_min: 6.0,
            dist_max: 9.0,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn encode_decode_roundtrip() {
        let rig = HumanoidRig::standard();
        let (seq, _) = synth_sequence(&small_cfg(), &rig, 0).unwrap();
        let bytes = encode_sequence(&seq);
        let back = decode_sequence(&bytes).unwrap();
        assert_eq!(back, seq);
        assert_eq!(encode_sequence(&back), bytes);
    }

    #[test]
    fn bad_headers_and_truncation() {
        let seq = Sequence {
            fps: 10.0,
            frames: vec![ScanFrame {
                points: vec![[1.0, 2.0, 3.0]],
                labels: vec![2],
                gt_joints: [[0.5; 3]; NUM_JOINTS],
                timestamp: 0.0,
            }],
        };
        let bytes = encode_sequence(&seq);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_sequence(&bad), Err(Error::Format(m)) if m.contains("magic")));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_sequence(&bad), Err(Error::Format(m)) if m.contains("version")));
        let err = decode_sequence(&bytes[..bytes.len() - 5]).unwrap_err();
        assert!(err.to_string().contains("byte offset"), "{err}");
        let mut bad = bytes.clone();
        bad[16 + 4 + 12] = 77;
        assert!(matches!(decode_sequence(&bad), Err(Error::Format(m)) if m.contains("label")));
    }

    #[test]
    fn occlusion_ratio_flags_exact_count() {
        let cfg = SynthConfig {
            occl_frame_ratio: 0.8,
            ..small_cfg()
        };
        let (_, meta) = synth_sequence(&cfg, &HumanoidRig::standard(), 1).unwrap();
        assert_eq!(meta.occluded_frames.iter().filter(|&&b| b).count(), 8);
        assert!(meta.noise_frames.iter().all(|&b| !b));
    }

    #[test]
    fn clean_config_has_no_noise_labels() {
        let (seq, meta) = synth_sequence(&small_cfg(), &HumanoidRig::standard(), 0).unwrap();
        assert!(seq.frames.iter().all(|f| f.labels.iter().all(|&l| l != NOISE_LABEL)));
        assert!(meta.occluded_frames.iter().all(|&b| !b));
        assert!(seq.frames.iter().any(|f| !f.is_empty()));
    }

    #[test]
    fn invalid_ratio_is_config_error() {
        let cfg = SynthConfig {
            noise_frame_ratio: 1.2,
            ..small_cfg()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
