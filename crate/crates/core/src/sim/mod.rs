//! Synthetic part-labelled LiDAR scans of an animated humanoid.
//!
//! A 24-joint rig is animated procedurally ([`motion`]), skinned with
//! capsules ([`mesh`]), and scanned by a spherical beam grid ([`raycast`]).
//! [`augment`] adds noise and occlusion; [`dataset`] writes `.lhmp` files.

pub mod augment;
pub mod dataset;
pub mod mesh;
pub mod motion;
pub mod raycast;
pub mod rig;

pub use augment::{inject_noise, inject_occlusion, Augmented};
pub use dataset::{
    decode_sequence, encode_sequence, read_sequence, synth_dataset, synth_sequence, write_sequence, DatasetManifest,
    Sequence, SequenceMeta, SynthConfig,
};
pub use mesh::{skin_rig, LabeledMesh};
pub use motion::{make_motion, place_pose, MotionKind};
pub use raycast::{ray_cast, ScanConfig, ScanFrame};
pub use rig::HumanoidRig;
