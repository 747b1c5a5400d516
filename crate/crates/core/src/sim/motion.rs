//! Procedural motion clips driving the rig through forward kinematics.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::rig::HumanoidRig;
use crate::error::{Error, Result};
use crate::{Pose, NUM_JOINTS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    Walk,
    Squat,
    ArmRaise,
    Turn,
    Still,
}

impl MotionKind {
    pub const ALL: [MotionKind; 5] = [
        MotionKind::Walk,
        MotionKind::Squat,
        MotionKind::ArmRaise,
        MotionKind::Turn,
        MotionKind::Still,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MotionKind::Walk => "walk",
            MotionKind::Squat => "squat",
            MotionKind::ArmRaise => "arm_raise",
            MotionKind::Turn => "turn",
            MotionKind::Still => "still",
        }
    }
}

impl fmt::Display for MotionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MotionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MotionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown motion kind {s:?}")))
    }
}

/// Local joint rotations plus root placement for one frame.
struct Articulation {
    local: [Rotation3<f64>; NUM_JOINTS],
    root_offset: Vector3<f64>,
}

impl Articulation {
    fn rest() -> Self {
        Self {
            local: [Rotation3::identity(); NUM_JOINTS],
            root_offset: Vector3::zeros(),
        }
    }
}

fn about_x(a: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::x_axis(), a)
}

fn about_y(a: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::y_axis(), a)
}

fn about_z(a: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::z_axis(), a)
}

fn forward_kinematics(rig: &HumanoidRig, art: &Articulation) -> Pose {
    let rest = |j: usize| Vector3::from(rig.joints[j]);
    let mut world_rot = [Rotation3::identity(); NUM_JOINTS];
    let mut world_pos = [Vector3::zeros(); NUM_JOINTS];
    // Parents always precede children in SMPL ordering.
    for j in 0..NUM_JOINTS {
        match rig.parent[j] {
            None => {
                world_pos[j] = rest(j) + art.root_offset;
                world_rot[j] = art.local[j];
            }
            Some(p) => {
                world_pos[j] = world_pos[p] + world_rot[p] * (rest(j) - rest(p));
                world_rot[j] = world_rot[p] * art.local[j];
            }
        }
    }
    let mut out = [[0.0; 3]; NUM_JOINTS];
    for (o, p) in out.iter_mut().zip(&world_pos) {
        *o = [p.x, p.y, p.z];
    }
    out
}

// Joint indices used below.
const PELVIS: usize = 0;
const L_HIP: usize = 1;
const R_HIP: usize = 2;
const L_KNEE: usize = 4;
const R_KNEE: usize = 5;
const L_SHOULDER: usize = 16;
const R_SHOULDER: usize = 17;
const L_ELBOW: usize = 18;
const R_ELBOW: usize = 19;

/// Generates `n_frames` poses of the given motion in the rig's body frame.
///
/// Amplitude, tempo and phase are jittered by `seed`; the same
/// `(kind, seed)` always yields the same trajectory.
pub fn make_motion(rig: &HumanoidRig, kind: MotionKind, n_frames: usize, fps: f64, seed: u64) -> Result<Vec<Pose>> {
    if n_frames == 0 {
        return Err(Error::Config("a motion needs at least one frame".into()));
    }
    if !(fps > 0.0) {
        return Err(Error::Config(format!("fps must be positive, got {fps}")));
    }
    if kind == MotionKind::Still {
        return Ok(vec![rig.joints; n_frames]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amp: f64 = rng.random_range(0.85..1.1);
    let tempo: f64 = rng.random_range(0.9..1.1);
    let phase: f64 = rng.random_range(0.0..TAU);

    let poses = (0..n_frames)
        .map(|i| {
            let t = i as f64 / fps;
            let mut art = Articulation::rest();
            match kind {
                MotionKind::Walk => {
                    let w = TAU * 0.8 * tempo;
                    let s = (w * t + phase).sin();
                    let hip = 0.3 * amp;
                    art.local[L_HIP] = about_x(hip * s);
                    art.local[R_HIP] = about_x(-hip * s);
                    // Knees bend while the leg swings forward.
                    let lk = (w * t + phase + PI / 2.0).sin().max(0.0);
                    let rk = (w * t + phase - PI / 2.0).sin().max(0.0);
                    art.local[L_KNEE] = about_x(-0.5 * amp * lk);
                    art.local[R_KNEE] = about_x(-0.5 * amp * rk);
                    art.local[L_SHOULDER] = about_x(-0.35 * amp * s);
                    art.local[R_SHOULDER] = about_x(0.35 * amp * s);
                    art.local[L_ELBOW] = about_x(0.25);
                    art.local[R_ELBOW] = about_x(0.25);
                    let speed = 0.9 * tempo;
                    art.root_offset = Vector3::new(0.0, speed * t, 0.015 * (2.0 * (w * t + phase)).cos());
                }
                MotionKind::Squat => {
                    let w = TAU * 0.4 * tempo;
                    let depth = 0.5 * (1.0 - (w * t + phase).cos());
                    art.local[L_HIP] = about_x(1.1 * amp * depth);
                    art.local[R_HIP] = about_x(1.1 * amp * depth);
                    art.local[L_KNEE] = about_x(-1.9 * amp * depth);
                    art.local[R_KNEE] = about_x(-1.9 * amp * depth);
                    art.local[PELVIS] = about_x(-0.3 * amp * depth);
                    art.local[L_SHOULDER] = about_x(1.2 * amp * depth);
                    art.local[R_SHOULDER] = about_x(1.2 * amp * depth);
                    art.root_offset = Vector3::new(0.0, -0.05 * depth, -0.32 * amp * depth);
                }
                MotionKind::ArmRaise => {
                    let w = TAU * 0.35 * tempo;
                    let lift = 0.5 * (1.0 - (w * t + phase).cos());
                    art.local[L_SHOULDER] = about_y(-1.5 * amp * lift);
                    art.local[R_SHOULDER] = about_y(1.5 * amp * (0.5 * (1.0 - (w * t + phase + 0.6).cos())));
                    art.local[L_ELBOW] = about_y(-0.3 * lift);
                    art.local[R_ELBOW] = about_y(0.3 * lift);
                }
                MotionKind::Turn => {
                    let yaw = 0.8 * amp * tempo * t + phase;
                    art.local[PELVIS] = about_z(yaw);
                    let s = (TAU * 0.6 * tempo * t + phase).sin();
                    art.local[L_SHOULDER] = about_x(0.2 * s);
                    art.local[R_SHOULDER] = about_x(-0.2 * s);
                }
                MotionKind::Still => unreachable!("handled above"),
            }
            forward_kinematics(rig, &art)
        })
        .collect();
    Ok(poses)
}

/// Rotates a body-frame pose by `yaw` about +z and moves it to `origin`.
pub fn place_pose(pose: &Pose, origin: [f64; 3], yaw: f64) -> Pose {
    let r = about_z(yaw);
    let mut out = *pose;
    for j in out.iter_mut() {
        let v = r * Vector3::from(*j);
        *j = [v.x + origin[0], v.y + origin[1], v.z + origin[2]];
    }
    out
}

/// Largest single-joint displacement between consecutive frames, in meters.
pub fn max_step(poses: &[Pose]) -> f64 {
    poses
        .windows(2)
        .flat_map(|w| {
            w[0].iter().zip(&w[1]).map(|(a, b)| {
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
            })
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn still_repeats_rest_pose() {
        let rig = HumanoidRig::standard();
        let m = make_motion(&rig, MotionKind::Still, 4, 10.0, 99).unwrap();
        assert_eq!(m.len(), 4);
        assert!(m.iter().all(|p| *p == rig.joints));
    }

    #[test]
    fn same_seed_same_trajectory() {
        let rig = HumanoidRig::standard();
        let a = make_motion(&rig, MotionKind::Walk, 14, 10.0, 5).unwrap();
        let b = make_motion(&rig, MotionKind::Walk, 14, 10.0, 5).unwrap();
        let bits = |m: &[Pose]| -> Vec<u64> { m.iter().flatten().flatten().map(|x| x.to_bits()).collect() };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn displacement_stays_human() {
        let rig = HumanoidRig::standard();
        for kind in MotionKind::ALL {
            for seed in 0..20 {
                let m = make_motion(&rig, kind, 40, 10.0, seed).unwrap();
                let step = max_step(&m);
                assert!(step <= 0.3, "{kind} seed {seed}: {step}");
            }
        }
    }

    #[test]
    fn bad_arguments() {
        let rig = HumanoidRig::standard();
        assert!("jump".parse::<MotionKind>().is_err());
        assert_eq!("arm_raise".parse::<MotionKind>().unwrap(), MotionKind::ArmRaise);
        assert!(make_motion(&rig, MotionKind::Walk, 0, 10.0, 0).is_err());
        assert!(make_motion(&rig, MotionKind::Walk, 3, 0.0, 0).is_err());
    }

    #[test]
    fn moving_kinds_actually_move() {
        let rig = HumanoidRig::standard();
        for kind in [MotionKind::Walk, MotionKind::Squat, MotionKind::ArmRaise, MotionKind::Turn] {
            let m = make_motion(&rig, kind, 10, 10.0, 1).unwrap();
            assert!(max_step(&m) > 0.01, "{kind}");
        }
    }
}
