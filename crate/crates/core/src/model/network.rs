//! Forward pass, expressed on an autodiff graph.

use crate::autodiff::{nn, Bound, Graph, Real, Tensor, Var};
use crate::error::{contract, Error, Result};
use crate::pcops::{PartBins, ProcessedFrame};
use crate::NUM_JOINTS;

use super::ModelConfig;

/// Graph handles for the structure-aware descriptor.
#[derive(Clone, Copy, Debug)]
pub struct Descriptor {
    /// Per-point features `[T_o, N, d1]`.
    pub pointwise: Var,
    /// Global max-pooled feature `[T_o, d1]`.
    pub global: Var,
    /// Global and part tokens before enhancement `[T_o, K+1, d1]`.
    pub tokens: Var,
    /// Enhanced descriptor `H`, `[T_o, K+1, d1]`.
    pub h: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Latent {
    /// Cross-attention output `[T, K+1, d1]`.
    pub f: Var,
    /// Refined features `[T, K+1, d1]`.
    pub f_prime: Var,
    /// Coarse joints `[T, 24, 3]`.
    pub coarse: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Refined {
    /// Joint embeddings `[T, 24, d2]`.
    pub e_joint: Var,
    /// Feature embeddings `[T, K+1, d2]`.
    pub e_f: Var,
    /// Output of the last spatial layer `[T, K+25, d2]`.
    pub h_s: Var,
    /// Output of the last temporal layer `[T, K+25, d2]`.
    pub h_t: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct HypothesisGraph {
    pub index: usize,
    pub latent: Latent,
    pub refined: Refined,
    /// Final joints `[T, 24, 3]`.
    pub joints: Var,
    /// Decoded clouds `[T, K, P, 3]`.
    pub points: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardGraph {
    pub descriptor: Descriptor,
    pub hypotheses: Vec<HypothesisGraph>,
}

/// Values of one hypothesis' forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<T: Real = f32> {
    pub coarse_joints: Tensor<T>,
    pub final_joints: Tensor<T>,
    pub pred_points: Tensor<T>,
    pub descriptor: Tensor<T>,
    pub f: Tensor<T>,
    pub f_prime: Tensor<T>,
    pub e_joint: Tensor<T>,
    pub e_f: Tensor<T>,
    pub h_s: Tensor<T>,
    pub h_t: Tensor<T>,
}

impl<T: Real> ForwardOutput<T> {
    pub fn read(g: &Graph<T>, d: &Descriptor, h: &HypothesisGraph) -> Self {
        let v = |x: Var| g.value(x).clone();
        Self {
            coarse_joints: v(h.latent.coarse),
            final_joints: v(h.joints),
            pred_points: v(h.points),
            descriptor: v(d.h),
            f: v(h.latent.f),
            f_prime: v(h.latent.f_prime),
            e_joint: v(h.refined.e_joint),
            e_f: v(h.refined.e_f),
            h_s: v(h.refined.h_s),
            h_t: v(h.refined.h_t),
        }
    }

    pub fn all_finite(&self) -> bool {
        [
            &self.coarse_joints,
            &self.final_joints,
            &self.pred_points,
            &self.descriptor,
            &self.f,
            &self.f_prime,
            &self.e_joint,
            &self.e_f,
            &self.h_s,
            &self.h_t,
        ]
        .iter()
        .all(|t| t.all_finite())
    }

    /// Final joints as `f64` poses, one per frame.
    pub fn poses(&self) -> Vec<crate::Pose> {
        tensor_poses(&self.final_joints)
    }
}

/// Splits a `[T, 24, 3]` tensor into poses.
pub fn tensor_poses<T: Real>(t: &Tensor<T>) -> Vec<crate::Pose> {
    t.data()
        .chunks(NUM_JOINTS * 3)
        .map(|c| {
            let mut pose = [[0.0; 3]; NUM_JOINTS];
            for (j, p) in pose.iter_mut().enumerate() {
                *p = [c[3 * j].as_f64(), c[3 * j + 1].as_f64(), c[3 * j + 2].as_f64()];
            }
            pose
        })
        .collect()
}

/// Runs a transformer layer over the second axis of `x` (`[A, B, d]`).
fn transformer_over_first_axis<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    name: &str,
    x: Var,
    heads: usize,
    pe: Option<Var>,
) -> Result<Var> {
    let xt = g.permute(x, &[1, 0, 2])?;
    let xt = match pe {
        Some(pe) => g.add(xt, pe)?,
        None => xt,
    };
    let y = nn::transformer_layer(g, p, name, xt, heads)?;
    g.permute(y, &[1, 0, 2])
}

fn check_frames(cfg: &ModelConfig, frames: &[ProcessedFrame]) -> Result<()> {
    for (t, f) in frames.iter().enumerate() {
        if f.points.len() != cfg.n_points || f.labels.len() != cfg.n_points {
            return Err(contract(format!(
                "frame {t} has {} points and {} labels, expected {}",
                f.points.len(),
                f.labels.len(),
                cfg.n_points
            )));
        }
        if f.points.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Data(format!("frame {t} contains non-finite coordinates")));
        }
    }
    Ok(())
}

/// Per-point features `[T, N, d1]` and their channel-wise max `[T, d1]`.
pub fn encode_frames<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    frames: &[ProcessedFrame],
) -> Result<(Var, Var)> {
    check_frames(cfg, frames)?;
    let n = cfg.n_points;
    let pts = Tensor::from_fn(&[frames.len(), n, 3], |i| {
        let (f, rest) = (i / (3 * n), i % (3 * n));
        T::of(frames[f].points[rest / 3][rest % 3])
    });
    let x = g.constant(pts);
    let f = nn::mlp(g, p, "pointnet", cfg.pointnet_widths.len(), x)?;
    let global = g.max_reduce(f, 1)?;
    Ok((f, global))
}

/// Point-wise features `[N, d1]` and global feature `[d1]` of one frame.
pub fn encode_frame<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    frame: &ProcessedFrame,
) -> Result<(Var, Var)> {
    let (f, global) = encode_frames(g, p, cfg, std::slice::from_ref(frame))?;
    let f = g.reshape(f, &[cfg.n_points, cfg.d1])?;
    let global = g.reshape(global, &[cfg.d1])?;
    Ok((f, global))
}

/// Builds `H = [H_glo, H_part]` and enhances it with one spatial and one
/// temporal transformer layer. Tokens of empty part bins are zero before
/// enhancement and masked back to zero after it.
pub fn build_descriptor<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    frames: &[ProcessedFrame],
    bins: &[PartBins],
) -> Result<Descriptor> {
    if frames.len() != cfg.t_obs || bins.len() != cfg.t_obs {
        return Err(contract(format!(
            "expected {} observed frames and bin sets, got {} and {}",
            cfg.t_obs,
            frames.len(),
            bins.len()
        )));
    }
    if let Some(b) = bins.iter().find(|b| b.bins.len() != cfg.k_parts) {
        return Err(contract(format!("{} part bins, expected {}", b.bins.len(), cfg.k_parts)));
    }
    if !bins.iter().any(PartBins::any_nonempty) {
        return Err(Error::Degenerate("every part bin is empty in every observed frame".into()));
    }
    let (n, d1, k) = (cfg.n_points, cfg.d1, cfg.k_parts);
    let (pointwise, global) = encode_frames(g, p, cfg, frames)?;
    let flat = g.reshape(pointwise, &[cfg.t_obs * n, d1])?;
    let zero = g.constant(Tensor::zeros(&[1, d1]));

    let mut frame_tokens = Vec::with_capacity(cfg.t_obs);
    let mut mask = Vec::with_capacity(cfg.t_obs * cfg.tokens() * d1);
    for (t, b) in bins.iter().enumerate() {
        let mut toks = vec![g.slice(global, 0, t, 1)?];
        mask.extend(std::iter::repeat_n(T::one(), d1));
        for bin in &b.bins {
            if let Some(&bad) = bin.iter().find(|&&i| i >= n) {
                return Err(contract(format!("bin index {bad} out of range for {n} points")));
            }
            if bin.is_empty() {
                toks.push(zero);
                mask.extend(std::iter::repeat_n(T::zero(), d1));
            } else {
                let idx: Vec<usize> = bin.iter().map(|i| t * n + i).collect();
                let sel = g.index_select(flat, &idx)?;
                let m = g.max_reduce(sel, 0)?;
                toks.push(g.reshape(m, &[1, d1])?);
                mask.extend(std::iter::repeat_n(T::one(), d1));
            }
        }
        let ft = g.concat(&toks, 0)?;
        frame_tokens.push(g.reshape(ft, &[1, k + 1, d1])?);
    }
    let tokens = g.concat(&frame_tokens, 0)?;
    let x = nn::transformer_layer(g, p, "desc.spatial", tokens, cfg.heads)?;
    let x = transformer_over_first_axis(g, p, "desc.temporal", x, cfg.heads, None)?;
    let mask = g.constant(Tensor::new(&[cfg.t_obs, k + 1, d1], mask)?);
    let h = g.mul(x, mask)?;
    Ok(Descriptor {
        pointwise,
        global,
        tokens,
        h,
    })
}

/// Cross-attends hypothesis `hyp`'s query bank to `h`, refines the result
/// with spatial/temporal layers and regresses coarse joints for all frames.
pub fn motion_latent_map<T: Real>(g: &mut Graph<T>, p: &Bound, cfg: &ModelConfig, h: Var, hyp: usize) -> Result<Latent> {
    if hyp >= cfg.m_hypotheses {
        return Err(contract(format!(
            "hypothesis {hyp} out of range for {} query banks",
            cfg.m_hypotheses
        )));
    }
    let (t, tok, d1) = (cfg.frames(), cfg.tokens(), cfg.d1);
    let kv = g.reshape(h, &[cfg.t_obs * tok, d1])?;
    let q = p.get(&format!("query.{hyp}"))?;
    let q = g.reshape(q, &[t * tok, d1])?;
    let f = nn::multi_head_attention(g, p, "mhca", q, kv, cfg.heads)?;
    let f = g.reshape(f, &[t, tok, d1])?;
    let mut x = f;
    for i in 0..cfg.n_st_pairs {
        x = nn::transformer_layer(g, p, &format!("latent.{i}.spatial"), x, cfg.heads)?;
        x = transformer_over_first_axis(g, p, &format!("latent.{i}.temporal"), x, cfg.heads, None)?;
    }
    let flat = g.reshape(x, &[t, tok * d1])?;
    let coarse = nn::linear(g, p, "coarse", flat)?;
    let coarse = g.reshape(coarse, &[t, NUM_JOINTS, 3])?;
    Ok(Latent { f, f_prime: x, coarse })
}

/// Embeds coarse joints and refined features into one token grid and runs
/// the alternating spatial/temporal refinement. Positional encodings are
/// added before the first spatial and first temporal layer.
pub fn stcr_refine<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    coarse: Var,
    f_prime: Var,
) -> Result<Refined> {
    let e_joint = nn::mlp(g, p, "embed.joint", 2, coarse)?;
    let e_f = nn::mlp(g, p, "embed.feat", 2, f_prime)?;
    let mut x = g.concat(&[e_joint, e_f], 1)?;
    let mut h_s = x;
    for i in 0..cfg.n_st_pairs {
        if i == 0 {
            let pe = p.get("pe.spatial")?;
            x = g.add(x, pe)?;
        }
        x = nn::transformer_layer(g, p, &format!("stcr.{i}.spatial"), x, cfg.heads)?;
        h_s = x;
        let pe = if i == 0 { Some(p.get("pe.temporal")?) } else { None };
        x = transformer_over_first_axis(g, p, &format!("stcr.{i}.temporal"), x, cfg.heads, pe)?;
    }
    Ok(Refined {
        e_joint,
        e_f,
        h_s,
        h_t: x,
    })
}

/// Final joints `[T, 24, 3]` from the joint tokens and per-part clouds
/// `[T, K, P, 3]` from the part tokens (the global token is not decoded).
pub fn decode_heads<T: Real>(g: &mut Graph<T>, p: &Bound, cfg: &ModelConfig, tokens: Var) -> Result<(Var, Var)> {
    let t = cfg.frames();
    let joint_tokens = g.slice(tokens, 1, 0, NUM_JOINTS)?;
    let joints = nn::mlp(g, p, "head.joint", 3, joint_tokens)?;
    let part_tokens = g.slice(tokens, 1, NUM_JOINTS + 1, cfg.k_parts)?;
    let points = nn::mlp(g, p, "head.point", 3, part_tokens)?;
    let points = g.reshape(points, &[t, cfg.k_parts, cfg.points_per_part, 3])?;
    Ok((joints, points))
}

fn hypothesis<T: Real>(g: &mut Graph<T>, p: &Bound, cfg: &ModelConfig, h: Var, index: usize) -> Result<HypothesisGraph> {
    let latent = motion_latent_map(g, p, cfg, h, index)?;
    let refined = stcr_refine(g, p, cfg, latent.coarse, latent.f_prime)?;
    let (joints, points) = decode_heads(g, p, cfg, refined.h_t)?;
    Ok(HypothesisGraph {
        index,
        latent,
        refined,
        joints,
        points,
    })
}

/// Single-hypothesis forward pass using query bank `hyp`.
pub fn forward<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    frames: &[ProcessedFrame],
    bins: &[PartBins],
    hyp: usize,
) -> Result<ForwardGraph> {
    let descriptor = build_descriptor(g, p, cfg, frames, bins)?;
    let h = hypothesis(g, p, cfg, descriptor.h, hyp)?;
    Ok(ForwardGraph {
        descriptor,
        hypotheses: vec![h],
    })
}

/// One forward pass per query bank, sharing a single descriptor.
pub fn forward_diverse<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    frames: &[ProcessedFrame],
    bins: &[PartBins],
) -> Result<ForwardGraph> {
    let descriptor = build_descriptor(g, p, cfg, frames, bins)?;
    let hypotheses = (0..cfg.m_hypotheses)
        .map(|m| hypothesis(g, p, cfg, descriptor.h, m))
        .collect::<Result<_>>()?;
    Ok(ForwardGraph { descriptor, hypotheses })
}
