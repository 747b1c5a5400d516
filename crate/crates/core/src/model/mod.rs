//! The motion prediction network.
//!
//! Observed clouds are encoded per point, pooled into a global token plus one
//! token per body part, and enhanced by a spatial and a temporal transformer
//! layer. Learnable motion queries cross-attend to this descriptor and are
//! refined into per-frame features that regress coarse joints. Coarse joints
//! and features are then embedded into one token grid, refined by alternating
//! spatial/temporal transformer layers and decoded into final joints and
//! per-part point clouds.

mod loss;
mod network;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check_steps, nn, Bound, Graph, ParamStore, Probe, Real, Tensor};
use crate::error::{Error, Result};
use crate::pcops::{bin_by_part, PartBins, ProcessedFrame};
use crate::{NOISE_LABEL, NUM_JOINTS};

pub use loss::{
    loss_final, loss_initial, loss_points, loss_total, select_winner, wta_loss, LossTerms, Targets, WtaLoss,
};
pub use network::{
    build_descriptor, decode_heads, encode_frame, encode_frames, forward, forward_diverse, motion_latent_map,
    stcr_refine, tensor_poses, Descriptor, ForwardGraph, ForwardOutput, HypothesisGraph, Latent, Refined,
};

/// Standard deviation of the query bank initialisation.
pub const QUERY_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub t_obs: usize,
    pub t_pred: usize,
    pub n_points: usize,
    pub k_parts: usize,
    pub d1: usize,
    pub d2: usize,
    pub heads: usize,
    pub n_st_pairs: usize,
    pub m_hypotheses: usize,
    /// Per-point MLP widths; the last entry must equal `d1`.
    pub pointnet_widths: Vec<usize>,
    /// Points decoded per part and frame.
    pub points_per_part: usize,
}

impl ModelConfig {
    /// CPU-trainable widths.
    pub fn desk(t_pred: usize) -> Self {
        Self {
            t_obs: 4,
            t_pred,
            n_points: 256,
            k_parts: 9,
            d1: 128,
            d2: 64,
            heads: 4,
            n_st_pairs: 2,
            m_hypotheses: 1,
            pointnet_widths: vec![64, 128, 128],
            points_per_part: 32,
        }
    }

    /// Full-width model (`d1 = 1024`, `d2 = 512`).
    pub fn paper(t_pred: usize) -> Self {
        Self {
            d1: 1024,
            d2: 512,
            heads: 8,
            pointnet_widths: vec![64, 128, 1024],
            ..Self::desk(t_pred)
        }
    }

    /// Tiny configuration for finite-difference checks.
    pub fn micro() -> Self {
        Self {
            t_obs: 2,
            t_pred: 2,
            n_points: 16,
            k_parts: 9,
            d1: 16,
            d2: 8,
            heads: 2,
            n_st_pairs: 1,
            m_hypotheses: 1,
            pointnet_widths: vec![8, 16],
            points_per_part: 4,
        }
    }

    pub fn frames(&self) -> usize {
        self.t_obs + self.t_pred
    }

    /// Descriptor tokens per frame: global plus one per part.
    pub fn tokens(&self) -> usize {
        self.k_parts + 1
    }

    /// Refinement tokens per frame: 24 joints, then the descriptor tokens.
    pub fn refine_tokens(&self) -> usize {
        NUM_JOINTS + self.tokens()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.t_obs == 0 || self.t_pred == 0 {
            return fail("t_obs and t_pred must be at least 1".into());
        }
        if self.n_points == 0 || self.k_parts == 0 || self.points_per_part == 0 {
            return fail("n_points, k_parts and points_per_part must be positive".into());
        }
        if self.k_parts > crate::NOISE_LABEL as usize {
            return fail(format!("k_parts {} collides with the noise label", self.k_parts));
        }
        if self.heads == 0 || self.d1 % self.heads != 0 || self.d2 % self.heads != 0 {
            return fail(format!(
                "d1 = {} and d2 = {} must both be divisible by heads = {}",
                self.d1, self.d2, self.heads
            ));
        }
        if self.n_st_pairs == 0 || self.m_hypotheses == 0 {
            return fail("n_st_pairs and m_hypotheses must be at least 1".into());
        }
        if self.pointnet_widths.last() != Some(&self.d1) {
            return fail(format!(
                "pointnet widths {:?} must end with d1 = {}",
                self.pointnet_widths, self.d1
            ));
        }
        Ok(())
    }
}

/// Registers every network parameter, seeded.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let (d1, d2, t, tokens) = (cfg.d1, cfg.d2, cfg.frames(), cfg.tokens());

    let mut widths = vec![3];
    widths.extend(&cfg.pointnet_widths);
    nn::init_mlp(&mut s, "pointnet", &widths, &mut rng)?;
    nn::init_transformer_layer(&mut s, "desc.spatial", d1, &mut rng)?;
    nn::init_transformer_layer(&mut s, "desc.temporal", d1, &mut rng)?;

    for m in 0..cfg.m_hypotheses {
        s.register_normal(&format!("query.{m}"), &[t, tokens, d1], QUERY_INIT_STD, &mut rng)?;
    }
    nn::init_attention(&mut s, "mhca", d1, &mut rng)?;
    for i in 0..cfg.n_st_pairs {
        nn::init_transformer_layer(&mut s, &format!("latent.{i}.spatial"), d1, &mut rng)?;
        nn::init_transformer_layer(&mut s, &format!("latent.{i}.temporal"), d1, &mut rng)?;
    }
    nn::init_linear(&mut s, "coarse", tokens * d1, NUM_JOINTS * 3, &mut rng)?;

    nn::init_mlp(&mut s, "embed.joint", &[3, d2, d2], &mut rng)?;
    nn::init_mlp(&mut s, "embed.feat", &[d1, d2, d2], &mut rng)?;
    s.register_normal("pe.spatial", &[cfg.refine_tokens(), d2], QUERY_INIT_STD, &mut rng)?;
    s.register_normal("pe.temporal", &[t, d2], QUERY_INIT_STD, &mut rng)?;
    for i in 0..cfg.n_st_pairs {
        nn::init_transformer_layer(&mut s, &format!("stcr.{i}.spatial"), d2, &mut rng)?;
        nn::init_transformer_layer(&mut s, &format!("stcr.{i}.temporal"), d2, &mut rng)?;
    }
    nn::init_mlp(&mut s, "head.joint", &[d2, d2, d2, 3], &mut rng)?;
    nn::init_mlp(&mut s, "head.point", &[d2, d2, d2, 3 * cfg.points_per_part], &mut rng)?;
    Ok(s)
}

/// Random observed frames with part labels (a few noise points) and
/// random targets, shaped for `cfg`. Used by tests and benchmarks.
pub fn random_window(cfg: &ModelConfig, seed: u64) -> (Vec<ProcessedFrame>, Vec<PartBins>, Targets) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let body = |rng: &mut ChaCha8Rng| -> [f64; 3] {
        [
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.2..0.2),
            rng.random_range(-0.9..0.9),
        ]
    };
    let mut frames = Vec::with_capacity(cfg.t_obs);
    let mut bins = Vec::with_capacity(cfg.t_obs);
    for _ in 0..cfg.t_obs {
        let points: Vec<[f64; 3]> = (0..cfg.n_points).map(|_| body(&mut rng)).collect();
        let labels: Vec<u8> = (0..cfg.n_points)
            .map(|_| {
                if rng.random_bool(0.05) {
                    NOISE_LABEL
                } else {
                    rng.random_range(0..cfg.k_parts) as u8
                }
            })
            .collect();
        bins.push(bin_by_part(&labels, cfg.k_parts).expect("labels in range"));
        frames.push(ProcessedFrame {
            points,
            labels,
            centroid: [0.0; 3],
            source_count: cfg.n_points,
        });
    }
    let joints = (0..cfg.frames())
        .map(|_| {
            let mut pose = [[0.0; 3]; NUM_JOINTS];
            for j in pose.iter_mut() {
                *j = body(&mut rng);
            }
            pose
        })
        .collect();
    let clouds = (0..cfg.frames()).map(|_| (0..20).map(|_| body(&mut rng)).collect()).collect();
    (frames, bins, Targets { joints, clouds })
}

/// Moves parameters to a generic point: every entry is jittered uniformly
/// by up to `jitter`, and query banks and positional encodings are redrawn
/// in `±spread`. At the raw initialisation biases sit exactly on ReLU kinks
/// and the small query banks make all latent tokens of a frame nearly equal.
pub fn perturb_params(store: &mut ParamStore<f64>, jitter: f64, spread: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = store.names().map(str::to_owned).collect();
    for n in &names {
        let redraw = n.starts_with("query.") || n.starts_with("pe.");
        if let Some(t) = store.get_mut(n) {
            for x in t.data_mut() {
                let u = rng.random_range(-1.0..1.0);
                if redraw {
                    *x = spread * u;
                } else {
                    *x += jitter * u;
                }
            }
        }
    }
}

/// Central-difference steps of the end-to-end check.
pub const E2E_STEPS: [f64; 3] = [1e-6, 1e-5, 1e-4];
/// Parameter jitter and query/encoding spread of the end-to-end check.
pub const E2E_JITTER: f64 = 0.2;
pub const E2E_SPREAD: f64 = 1.7;

/// Finite-difference check of the WTA training loss against every
/// parameter, in `f64`, at a generic point (see [`perturb_params`]) and a
/// random window. Each probed coordinate is scored against central
/// differences at [`E2E_STEPS`]. Returns the worst relative error per
/// parameter name.
pub fn end_to_end_grad_check(cfg: &ModelConfig, seed: u64, probe: Probe) -> Result<Vec<(String, f64)>> {
    let mut store = init_params::<f64>(cfg, seed)?;
    perturb_params(&mut store, E2E_JITTER, E2E_SPREAD, seed ^ 0x9e37);
    let (frames, bins, targets) = random_window(cfg, seed ^ 0x5eed);
    let names: Vec<String> = store.names().map(str::to_owned).collect();
    let inputs: Vec<Tensor<f64>> = store.iter().map(|(_, t)| t.clone()).collect();
    let report = grad_check_steps(
        |g: &mut Graph<f64>, vars| {
            let p = Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
            let fg = forward_diverse(g, &p, cfg, &frames, &bins)?;
            Ok(wta_loss(g, cfg, &fg, &targets)?.terms.total)
        },
        &inputs,
        &E2E_STEPS,
        probe,
    )?;
    Ok(names.into_iter().zip(report.per_input).collect())
}


#[cfg(test)]
mod config_tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::desk(4).validate().unwrap();
        ModelConfig::desk(10).validate().unwrap();
        ModelConfig::paper(10).validate().unwrap();
        ModelConfig::micro().validate().unwrap();
        assert_eq!(ModelConfig::desk(4).refine_tokens(), 34);
    }

    #[test]
    fn bad_configs_are_rejected() {
        let c = ModelConfig {
            heads: 3,
            ..ModelConfig::desk(4)
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = ModelConfig {
            pointnet_widths: vec![64, 64],
            ..ModelConfig::desk(4)
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            t_pred: 0,
            ..ModelConfig::desk(4)
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn query_banks_are_small_and_distinct() {
        let cfg = ModelConfig {
            m_hypotheses: 4,
            ..ModelConfig::micro()
        };
        let p = init_params::<f64>(&cfg, 3).unwrap();
        let q0 = p.get("query.0").unwrap();
        assert_eq!(q0.shape(), &[4, 10, 16]);
        let var = q0.data().iter().map(|x| x * x).sum::<f64>() / q0.len() as f64;
        assert!((var.sqrt() - QUERY_INIT_STD).abs() < 0.006, "{}", var.sqrt());
        assert!(q0.max_abs_diff(p.get("query.3").unwrap()) > 1e-3);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::micro();
        let a = init_params::<f32>(&cfg, 1).unwrap();
        assert!(a.bit_eq(&init_params::<f32>(&cfg, 1).unwrap()));
        assert!(!a.bit_eq(&init_params::<f32>(&cfg, 2).unwrap()));
    }
}
