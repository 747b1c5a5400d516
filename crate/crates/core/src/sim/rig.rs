use crate::error::{Error, Result};
use crate::{Pose, NUM_JOINTS, NUM_PARTS};

/// Body-part labels emitted by the scanner.
pub mod part {
    pub const HEAD: u8 = 0;
    pub const LEFT_ARM: u8 = 1;
    pub const RIGHT_ARM: u8 = 2;
    pub const UPPER_BODY: u8 = 3;
    pub const LOWER_BODY: u8 = 4;
    pub const UPPER_LEFT_LEG: u8 = 5;
    pub const UPPER_RIGHT_LEG: u8 = 6;
    pub const LOWER_LEFT_LEG: u8 = 7;
    pub const LOWER_RIGHT_LEG: u8 = 8;
}

/// SMPL joint names, in order.
pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee", "spine2", "left_ankle",
    "right_ankle", "spine3", "left_foot", "right_foot", "neck", "left_collar", "right_collar", "head",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
    "left_hand", "right_hand",
];

/// A 24-joint skeleton with per-bone capsule radii and part labels.
///
/// Bones are identified by their child joint: bone `j` runs from
/// `parent[j]` to `j`. Body frame: +x left, +y forward, +z up, feet at z = 0.
#[derive(Clone, Debug, PartialEq)]
pub struct HumanoidRig {
    pub joints: Pose,
    pub parent: [Option<usize>; NUM_JOINTS],
    pub bone_radius: [f64; NUM_JOINTS],
    pub part_of_bone: [u8; NUM_JOINTS],
}

impl HumanoidRig {
    /// A ~1.75 m adult in a relaxed A-pose.
    pub fn standard() -> Self {
        use part::*;
        let joints = [
            [0.0, 0.0, 0.95],    // pelvis
            [0.09, 0.0, 0.88],   // left_hip
            [-0.09, 0.0, 0.88],  // right_hip
            [0.0, -0.01, 1.06],  // spine1
            [0.10, 0.01, 0.49],  // left_knee
            [-0.10, 0.01, 0.49], // right_knee
            [0.0, -0.01, 1.19],  // spine2
            [0.10, -0.02, 0.08], // left_ankle
            [-0.10, -0.02, 0.08],
            [0.0, 0.0, 1.31], // spine3
            [0.11, 0.12, 0.03],
            [-0.11, 0.12, 0.03],
            [0.0, 0.0, 1.50],   // neck
            [0.07, 0.0, 1.42],  // left_collar
            [-0.07, 0.0, 1.42], // right_collar
            [0.0, 0.02, 1.62],  // head
            [0.18, 0.0, 1.42],  // left_shoulder
            [-0.18, 0.0, 1.42],
            [0.24, 0.0, 1.15], // left_elbow
            [-0.24, 0.0, 1.15],
            [0.28, 0.02, 0.90], // left_wrist
            [-0.28, 0.02, 0.90],
            [0.29, 0.03, 0.82], // left_hand
            [-0.29, 0.03, 0.82],
        ];
        let parent = [
            None,
            Some(0),
            Some(0),
            Some(0),
            Some(1),
            Some(2),
            Some(3),
            Some(4),
            Some(5),
            Some(6),
            Some(7),
            Some(8),
            Some(9),
            Some(9),
            Some(9),
            Some(12),
            Some(13),
            Some(14),
            Some(16),
            Some(17),
            Some(18),
            Some(19),
            Some(20),
            Some(21),
        ];
        let bone_radius = [
            0.0, 0.09, 0.09, 0.12, 0.075, 0.075, 0.13, 0.05, 0.05, 0.13, 0.04, 0.04, 0.06, 0.06, 0.06, 0.10, 0.055,
            0.055, 0.045, 0.045, 0.038, 0.038, 0.035, 0.035,
        ];
        let part_of_bone = [
            LOWER_BODY,      // root (no bone)
            LOWER_BODY,      // pelvis → left_hip
            LOWER_BODY,      // pelvis → right_hip
            LOWER_BODY,      // pelvis → spine1
            UPPER_LEFT_LEG,  // left_hip → left_knee
            UPPER_RIGHT_LEG, // right_hip → right_knee
            UPPER_BODY,      // spine1 → spine2
            LOWER_LEFT_LEG,  // left_knee → left_ankle
            LOWER_RIGHT_LEG,
            UPPER_BODY,
            LOWER_LEFT_LEG, // ankle → foot
            LOWER_RIGHT_LEG,
            UPPER_BODY, // spine3 → neck
            UPPER_BODY, // collars
            UPPER_BODY,
            HEAD, // neck → head
            UPPER_BODY, // collar → shoulder
            UPPER_BODY,
            LEFT_ARM, // shoulder → elbow
            RIGHT_ARM,
            LEFT_ARM,
            RIGHT_ARM,
            LEFT_ARM,
            RIGHT_ARM,
        ];
        Self {
            joints,
            parent,
            bone_radius,
            part_of_bone,
        }
    }

    /// `(parent, child)` for every bone, ordered by child index.
    pub fn bones(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.parent
            .iter()
            .enumerate()
            .filter_map(|(child, p)| p.map(|p| (p, child)))
    }

    /// Checks for a single root, acyclic parents and valid part labels.
    pub fn validate(&self) -> Result<()> {
        let roots = self.parent.iter().filter(|p| p.is_none()).count();
        if roots != 1 {
            return Err(Error::Config(format!("rig has {roots} roots, expected 1")));
        }
        for start in 0..NUM_JOINTS {
            let mut cur = start;
            for _ in 0..=NUM_JOINTS {
                match self.parent[cur] {
                    None => break,
                    Some(p) if p >= NUM_JOINTS => {
                        return Err(Error::Config(format!("joint {cur} has out-of-range parent {p}")))
                    }
                    Some(p) => cur = p,
                }
            }
            if self.parent[cur].is_some() {
                return Err(Error::Config(format!("cycle in rig parents reached from joint {start}")));
            }
        }
        for (_, child) in self.bones() {
            if self.part_of_bone[child] as usize >= NUM_PARTS {
                return Err(Error::Config(format!(
                    "bone ending at joint {child} has part label {}",
                    self.part_of_bone[child]
                )));
            }
            if self.bone_radius[child] <= 0.0 {
                return Err(Error::Config(format!("bone ending at joint {child} has no radius")));
            }
        }
        Ok(())
    }
}

impl Default for HumanoidRig {
    fn default() -> Self {
        Self::standard()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_rig_is_valid() {
        let rig = HumanoidRig::standard();
        rig.validate().unwrap();
        assert_eq!(rig.bones().count(), 23);
        let parts: std::collections::BTreeSet<u8> = rig.bones().map(|(_, c)| rig.part_of_bone[c]).collect();
        assert_eq!(parts.len(), NUM_PARTS);
    }

    #[test]
    fn cycles_are_rejected() {
        let mut rig = HumanoidRig::standard();
        rig.parent[0] = Some(3);
        assert!(rig.validate().is_err());
        let mut rig = HumanoidRig::standard();
        rig.parent[3] = Some(6);
        rig.parent[0] = None;
        assert!(rig.validate().is_err());
    }
}
