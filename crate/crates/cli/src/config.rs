use std::path::Path;

use lhmp_core::fsutil::read;
use lhmp_core::harness::TrainConfig;
use lhmp_core::model::ModelConfig;
use lhmp_core::{Error, Result};
use serde::Deserialize;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Desk,
    Paper,
}

/// Training run description. The preset supplies every default; keys that
/// are present override it.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub preset: Preset,
    pub t_obs: Option<usize>,
    pub t_pred: Option<usize>,
    pub n_points: Option<usize>,
    pub k_parts: Option<usize>,
    pub d1: Option<usize>,
    pub d2: Option<usize>,
    pub heads: Option<usize>,
    pub n_st_pairs: Option<usize>,
    pub m_hypotheses: Option<usize>,
    pub lr: Option<f64>,
    pub batch: Option<usize>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub stride: Option<usize>,
    pub max_steps: Option<u64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_slice(&read(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn expand(&self) -> Result<(ModelConfig, TrainConfig)> {
        let t_pred = self.t_pred.unwrap_or(4);
        let (mut m, mut t) = match self.preset {
            Preset::Desk => (ModelConfig::desk(t_pred), TrainConfig::default()),
            Preset::Paper => (
                ModelConfig::paper(t_pred),
                TrainConfig {
                    batch: 128,
                    epochs: 100,
                    ..TrainConfig::default()
                },
            ),
        };
        let set = |dst: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut m.t_obs, self.t_obs);
        set(&mut m.n_points, self.n_points);
        set(&mut m.k_parts, self.k_parts);
        set(&mut m.d2, self.d2);
        set(&mut m.heads, self.heads);
        set(&mut m.n_st_pairs, self.n_st_pairs);
        set(&mut m.m_hypotheses, self.m_hypotheses);
        if let Some(d1) = self.d1 {
            m.d1 = d1;
            if let Some(last) = m.pointnet_widths.last_mut() {
                *last = d1;
            }
        }
        set(&mut t.batch, self.batch);
        set(&mut t.epochs, self.epochs);
        set(&mut t.stride, self.stride);
        if let Some(lr) = self.lr {
            t.lr = lr;
        }
        if let Some(seed) = self.seed {
            t.seed = seed;
        }
        t.max_steps = self.max_steps.or(t.max_steps);
        m.validate()?;
        t.validate()?;
        Ok((m, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<RunConfig> {
        serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    #[test]
    fn empty_config_is_the_desk_preset() {
        let (m, t) = parse("{}").unwrap().expand().unwrap();
        assert_eq!(m, ModelConfig::desk(4));
        assert_eq!((t.batch, t.lr), (8, 1e-4));
    }

    #[test]
    fn overrides_apply_after_the_preset() {
        let (m, t) = parse(r#"{"preset": "paper", "t_pred": 10, "d1": 256, "batch": 4, "seed": 9}"#)
            .unwrap()
            .expand()
            .unwrap();
        assert_eq!((m.d1, m.d2, m.t_pred), (256, 512, 10));
        assert_eq!(m.pointnet_widths, vec![64, 128, 256]);
        assert_eq!((t.batch, t.epochs, t.seed), (4, 100, 9));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(parse(r#"{"learning_rate": 0.1}"#).is_err());
        assert!(parse(r#"{"preset": "huge"}"#).is_err());
        assert!(parse(r#"{"heads": 3}"#).unwrap().expand().is_err());
        assert!(parse(r#"{"batch": 0}"#).unwrap().expand().is_err());
    }
}
