//! Training objectives and winner-take-all selection.

use std::sync::Arc;

use log::debug;

use super::network::{tensor_poses, ForwardGraph, HypothesisGraph};
use super::ModelConfig;
use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{contract, Result};
use crate::pcops::{min_mpjpe, MinMpjpe, Point};
use crate::{Pose, NUM_JOINTS};

/// Supervision for every observed and future frame of a window, in the
/// window's normalized coordinates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Targets {
    pub joints: Vec<Pose>,
    /// Ground-truth clouds; an empty cloud skips that frame's Chamfer term.
    pub clouds: Vec<Vec<Point>>,
}

impl Targets {
    fn joint_tensor<T: Real>(&self, frames: usize) -> Result<Tensor<T>> {
        if self.joints.len() != frames {
            return Err(contract(format!(
                "ground truth covers {} frames, the prediction {}",
                self.joints.len(),
                frames
            )));
        }
        let data = self.joints.iter().flatten().flatten().map(|&x| T::of(x)).collect();
        Tensor::new(&[frames, NUM_JOINTS, 3], data)
    }
}

fn joint_loss<T: Real>(g: &mut Graph<T>, joints: Var, targets: &Targets) -> Result<Var> {
    let frames = *g.shape(joints).first().unwrap_or(&0);
    let gt = g.constant(targets.joint_tensor(frames)?);
    g.squared_error(joints, gt)
}

/// `Σ_t ‖Ĵ_t − J_t‖²` over every frame of the coarse joints.
pub fn loss_initial<T: Real>(g: &mut Graph<T>, coarse: Var, targets: &Targets) -> Result<Var> {
    joint_loss(g, coarse, targets)
}

/// Same as [`loss_initial`], on the final joints.
pub fn loss_final<T: Real>(g: &mut Graph<T>, joints: Var, targets: &Targets) -> Result<Var> {
    joint_loss(g, joints, targets)
}

/// Sum over frames of the Chamfer distance between the frame's decoded
/// `K × P` points and its ground-truth cloud. Returns the loss and the
/// number of frames skipped for lack of ground truth.
pub fn loss_points<T: Real>(g: &mut Graph<T>, points: Var, targets: &Targets) -> Result<(Var, usize)> {
    let frames = *g.shape(points).first().unwrap_or(&0);
    if targets.clouds.len() != frames {
        return Err(contract(format!(
            "{} ground-truth clouds for {} predicted frames",
            targets.clouds.len(),
            frames
        )));
    }
    let mut terms = Vec::with_capacity(frames);
    let mut skipped = 0;
    for (t, cloud) in targets.clouds.iter().enumerate() {
        if cloud.is_empty() {
            skipped += 1;
            continue;
        }
        let target = Tensor::new(&[cloud.len(), 3], cloud.iter().flatten().map(|&x| T::of(x)).collect())?;
        let pred = g.slice(points, 0, t, 1)?;
        terms.push(g.chamfer(pred, Arc::new(target))?);
    }
    if skipped > 0 {
        debug!("chamfer skipped {skipped} frame(s) without ground-truth points");
    }
    let mut total = match terms.first() {
        Some(&v) => v,
        None => g.constant(Tensor::scalar(T::zero())),
    };
    for &v in terms.iter().skip(1) {
        total = g.add(total, v)?;
    }
    Ok((total, skipped))
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub initial: Var,
    pub final_: Var,
    pub points: Var,
    pub skipped_frames: usize,
}

impl LossTerms {
    /// `(total, initial, final, chamfer)` as `f64`.
    pub fn values<T: Real>(&self, g: &Graph<T>) -> [f64; 4] {
        [self.total, self.initial, self.final_, self.points].map(|v| g.value(v).item().as_f64())
    }
}

/// `L_initial + L_final + L_CD`, unweighted.
pub fn loss_total<T: Real>(g: &mut Graph<T>, hyp: &HypothesisGraph, targets: &Targets) -> Result<LossTerms> {
    let initial = loss_initial(g, hyp.latent.coarse, targets)?;
    let final_ = loss_final(g, hyp.joints, targets)?;
    let (points, skipped_frames) = loss_points(g, hyp.points, targets)?;
    let s = g.add(initial, final_)?;
    let total = g.add(s, points)?;
    Ok(LossTerms {
        total,
        initial,
        final_,
        points,
        skipped_frames,
    })
}

/// Hypothesis with the lowest mean MPJPE over the predicted frames,
/// computed from graph values (no gradient involvement).
pub fn select_winner<T: Real>(
    g: &Graph<T>,
    cfg: &ModelConfig,
    fg: &ForwardGraph,
    targets: &Targets,
) -> Result<MinMpjpe> {
    if fg.hypotheses.is_empty() {
        return Err(contract("winner selection needs at least one hypothesis"));
    }
    if targets.joints.len() != cfg.frames() {
        return Err(contract(format!(
            "ground truth covers {} frames, expected {}",
            targets.joints.len(),
            cfg.frames()
        )));
    }
    let future: Vec<Vec<Pose>> = fg
        .hypotheses
        .iter()
        .map(|h| tensor_poses(g.value(h.joints))[cfg.t_obs..].to_vec())
        .collect();
    min_mpjpe(&future, &targets.joints[cfg.t_obs..])
}

#[derive(Clone, Copy, Debug)]
pub struct WtaLoss {
    pub winner: MinMpjpe,
    pub terms: LossTerms,
}

/// Total loss of the winning hypothesis only; the other query banks get no
/// gradient from this loss.
pub fn wta_loss<T: Real>(g: &mut Graph<T>, cfg: &ModelConfig, fg: &ForwardGraph, targets: &Targets) -> Result<WtaLoss> {
    let winner = select_winner(g, cfg, fg, targets)?;
    let terms = loss_total(g, &fg.hypotheses[winner.argmin], targets)?;
    Ok(WtaLoss { winner, terms })
}
