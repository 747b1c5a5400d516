//! Seeded mini-batch training with Adam.

use std::fmt::Write as _;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, Checkpoint, DataInfo, RngState};
use super::data::MotionSample;
use super::eval::ModelPredictor;
use crate::autodiff::{AdamConfig, AdamState, Graph, ParamGrads, ParamStore};
use crate::error::{Error, Result};
use crate::fsutil::{read, write_atomic};
use crate::model::{forward_diverse, init_params, loss_total, wta_loss, ModelConfig};
use crate::sim::augment::{rng_for, stream_seed};

pub const LOSS_FILE: &str = "loss.csv";
const LOSS_HEADER: &str = "step,loss,l_initial,l_final,l_cd";

const TAG_INIT: u64 = 0x1417;
const TAG_SHUFFLE: u64 = 0x5b0f;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Window stride when cutting sequences into samples.
    pub stride: usize,
    /// Stop after this many optimizer steps in total, even mid-epoch.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch: 8,
            epochs: 300,
            seed: 0,
            stride: 1,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {}", self.lr)));
        }
        if self.batch == 0 || self.stride == 0 {
            return Err(Error::Config("batch and stride must be at least 1".into()));
        }
        Ok(())
    }
}

/// Batch means of the loss terms after one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
    pub l_initial: f64,
    pub l_final: f64,
    pub l_cd: f64,
}

impl LossRecord {
    fn csv_line(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.loss, self.l_initial, self.l_final, self.l_cd)
    }
}

pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut s = String::from(LOSS_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

pub fn parse_loss_csv(text: &str) -> Result<Vec<LossRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(LOSS_HEADER) {
        return Err(Error::Format(format!("loss curve must start with {LOSS_HEADER:?}")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::Format(format!("loss curve line {}: {line:?}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(LossRecord {
                step: f[0].parse().map_err(|_| bad())?,
                loss: num(f[1])?,
                l_initial: num(f[2])?,
                l_final: num(f[3])?,
                l_cd: num(f[4])?,
            })
        })
        .collect()
}

/// Loss and parameter gradients of one sample. Uses the winner-take-all
/// loss when the model has several hypotheses.
pub fn sample_gradients(
    model: &ModelConfig,
    params: &ParamStore<f32>,
    sample: &MotionSample,
) -> Result<(ParamGrads<f32>, [f64; 4])> {
    let prep = sample.prepared()?;
    let mut g = Graph::<f32>::new();
    let p = params.bind(&mut g);
    let fg = forward_diverse(&mut g, &p, model, &prep.frames, &prep.bins)?;
    let terms = if model.m_hypotheses > 1 {
        wta_loss(&mut g, model, &fg, &prep.targets)?.terms
    } else {
        loss_total(&mut g, &fg.hypotheses[0], &prep.targets)?
    };
    let values = terms.values(&g);
    if !values[0].is_finite() {
        return Err(Error::Divergence(format!(
            "non-finite loss on sequence {} window {}",
            sample.meta.sequence, sample.meta.start
        )));
    }
    let grads = g.backward(terms.total)?;
    Ok((p.collect_grads(params, &grads), values))
}

/// Training state that can stop and resume at any step.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: ModelConfig,
    pub config: TrainConfig,
    pub params: ParamStore<f32>,
    pub adam: AdamState<f32>,
    pub data: Option<DataInfo>,
    /// Records of this run, in step order.
    pub curve: Vec<LossRecord>,
    epoch: usize,
    cursor: usize,
    epoch_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = init_params::<f32>(&model, stream_seed(config.seed, 0, TAG_INIT))?;
        let adam = AdamState::new(AdamConfig::with_lr(config.lr), &params);
        Ok(Self {
            epoch_rng: rng_for(config.seed, 0, TAG_SHUFFLE),
            model,
            config,
            params,
            adam,
            data: None,
            curve: Vec::new(),
            epoch: 0,
            cursor: 0,
        })
    }

    /// Continues from `ckpt`. `config` may raise `epochs` or `max_steps`;
    /// every other field must match the checkpoint.
    pub fn resume(ckpt: Checkpoint, config: Option<TrainConfig>) -> Result<Self> {
        let config = match config {
            None => ckpt.train.clone(),
            Some(c) => {
                let same = TrainConfig {
                    epochs: ckpt.train.epochs,
                    max_steps: ckpt.train.max_steps,
                    ..c.clone()
                };
                if same != ckpt.train {
                    return Err(Error::Config(
                        "resuming may only change epochs and max_steps of the training configuration".into(),
                    ));
                }
                c
            }
        };
        config.validate()?;
        ckpt.check_config(&ckpt.model)?;
        Ok(Self {
            epoch_rng: ckpt.rng.restore()?,
            model: ckpt.model,
            config,
            params: ckpt.params,
            adam: ckpt.adam,
            data: ckpt.data,
            curve: Vec::new(),
            epoch: ckpt.epoch,
            cursor: ckpt.cursor,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn steps(&self) -> u64 {
        self.adam.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            train: self.config.clone(),
            data: self.data.clone(),
            epoch: self.epoch,
            cursor: self.cursor,
            rng: RngState::capture(&self.epoch_rng),
            params: self.params.clone(),
            adam: self.adam.clone(),
        }
    }

    pub fn predictor(&self) -> ModelPredictor {
        ModelPredictor {
            config: self.model.clone(),
            params: self.params.clone(),
        }
    }

    fn done(&self) -> bool {
        self.epoch >= self.config.epochs || self.config.max_steps.is_some_and(|m| self.adam.step >= m)
    }

    /// One optimizer step on `batch`; gradients are averaged in batch order.
    /// Leaves the state untouched when the loss or a gradient is not finite.
    pub fn step(&mut self, batch: &[&MotionSample]) -> Result<LossRecord> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("empty batch".into()));
        }
        let per: Vec<(ParamGrads<f32>, [f64; 4])> = batch
            .par_iter()
            .map(|s| sample_gradients(&self.model, &self.params, s))
            .collect::<Result<_>>()?;
        let mut grads = ParamGrads::zeros_like(&self.params);
        let mut sums = [0.0; 4];
        for (g, v) in &per {
            grads.accumulate(g);
            for (s, x) in sums.iter_mut().zip(v) {
                *s += x;
            }
        }
        let n = batch.len() as f64;
        grads.scale(1.0 / batch.len() as f32);
        if !grads.all_finite() {
            return Err(Error::Divergence(format!("non-finite gradient at step {}", self.adam.step + 1)));
        }
        self.adam.step(&mut self.params, &grads)?;
        let rec = LossRecord {
            step: self.adam.step,
            loss: sums[0] / n,
            l_initial: sums[1] / n,
            l_final: sums[2] / n,
            l_cd: sums[3] / n,
        };
        debug!(
            "step {} loss {:.5} (initial {:.5}, final {:.5}, chamfer {:.5})",
            rec.step, rec.loss, rec.l_initial, rec.l_final, rec.l_cd
        );
        self.curve.push(rec);
        Ok(rec)
    }

    /// Trains until `epochs` or `max_steps` is reached. With `out`, writes a
    /// checkpoint and the loss curve after every epoch and when stopping;
    /// a failed step leaves the last written checkpoint in place.
    pub fn run(&mut self, samples: &[MotionSample], out: Option<&Path>) -> Result<()> {
        if samples.is_empty() {
            return Err(Error::EmptyInput("no training samples".into()));
        }
        let prior = match out {
            Some(dir) if self.adam.step > 0 && dir.join(LOSS_FILE).exists() => {
                let text = String::from_utf8_lossy(&read(&dir.join(LOSS_FILE))?).into_owned();
                let mut r = parse_loss_csv(&text)?;
                r.retain(|r| r.step <= self.adam.step - self.curve.len() as u64);
                r
            }
            _ => Vec::new(),
        };
        let save = |t: &Self| -> Result<()> {
            if let Some(dir) = out {
                save_checkpoint(dir, &t.checkpoint())?;
                let all: Vec<LossRecord> = prior.iter().chain(&t.curve).copied().collect();
                write_atomic(&dir.join(LOSS_FILE), loss_csv(&all).as_bytes())?;
            }
            Ok(())
        };
        if self.done() {
            return save(self);
        }
        while !self.done() {
            let mut rng = self.epoch_rng.clone();
            let mut order: Vec<usize> = (0..samples.len()).collect();
            order.shuffle(&mut rng);
            let batches: Vec<&[usize]> = order.chunks(self.config.batch).collect();
            while self.cursor < batches.len() {
                if self.done() {
                    save(self)?;
                    return Ok(());
                }
                let batch: Vec<&MotionSample> = batches[self.cursor].iter().map(|&i| &samples[i]).collect();
                self.step(&batch)?;
                self.cursor += 1;
            }
            self.epoch += 1;
            self.cursor = 0;
            self.epoch_rng = rng;
            if let Some(last) = self.curve.last() {
                info!("epoch {} done, step {}, loss {:.5}", self.epoch, last.step, last.loss);
            }
            save(self)?;
        }
        Ok(())
    }
}

/// Fresh training run on `samples`.
pub fn train(
    samples: &[MotionSample],
    model: &ModelConfig,
    config: &TrainConfig,
    out: Option<&Path>,
) -> Result<Trainer> {
    let mut t = Trainer::new(model.clone(), config.clone())?;
    t.run(samples, out)?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::checkpoint::load_checkpoint;
    use crate::harness::data::{window_samples, SequenceStore, StoredSequence};
    use crate::sim::{synth_sequence, HumanoidRig, SynthConfig};

    fn model() -> ModelConfig {
        ModelConfig {
            t_obs: 2,
            t_pred: 2,
            n_points: 32,
            ..ModelConfig::micro()
        }
    }

    fn samples(m: &ModelConfig) -> Vec<MotionSample> {
        let cfg = SynthConfig {
            n_sequences: 2,
            frames_per_sequence: 7,
            seed: 8,
            ..SynthConfig::default()
        };
        let rig = HumanoidRig::standard();
        let sequences = (0..2)
            .map(|i| {
                let (sequence, meta) = synth_sequence(&cfg, &rig, i).unwrap();
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
        window_samples(&store, m, 1).unwrap()
    }

    fn config() -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            batch: 3,
            epochs: 2,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let m = model();
        let s = samples(&m);
        let fresh = Trainer::new(m.clone(), TrainConfig { lr: 0.0, ..config() }).unwrap();
        let t = train(&s, &m, &TrainConfig { lr: 0.0, epochs: 1, ..config() }, None).unwrap();
        assert!(t.steps() > 0);
        assert!(t.params.bit_eq(&fresh.params));
    }

    #[test]
    fn training_is_deterministic_and_lowers_the_loss() {
        let m = model();
        let s = samples(&m);
        assert_eq!(s.len(), 8);
        let cfg = TrainConfig { epochs: 15, ..config() };
        let a = train(&s, &m, &cfg, None).unwrap();
        let b = train(&s, &m, &cfg, None).unwrap();
        assert_eq!(a.curve.len(), 45);
        assert_eq!(loss_csv(&a.curve), loss_csv(&b.curve));
        assert!(a.params.bit_eq(&b.params));
        let head: f64 = a.curve[..4].iter().map(|r| r.loss).sum();
        let tail: f64 = a.curve[41..].iter().map(|r| r.loss).sum();
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let m = ModelConfig {
            m_hypotheses: 2,
            ..model()
        };
        let s = samples(&m);
        let full = train(&s, &m, &config(), None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let first = TrainConfig {
            max_steps: Some(4),
            ..config()
        };
        let part = train(&s, &m, &first, Some(dir.path())).unwrap();
        assert_eq!((part.epoch(), part.steps()), (1, 4));
        let ckpt = load_checkpoint(dir.path()).unwrap();
        assert_eq!(ckpt.cursor, 1);
        let mut rest = Trainer::resume(ckpt, Some(config())).unwrap();
        rest.run(&s, Some(dir.path())).unwrap();
        assert!(rest.params.bit_eq(&full.params));
        assert_eq!(rest.adam.first, full.adam.first);
        let text = std::fs::read_to_string(dir.path().join(LOSS_FILE)).unwrap();
        assert_eq!(text, loss_csv(&full.curve));
        assert!(Trainer::resume(load_checkpoint(dir.path()).unwrap(), Some(TrainConfig { lr: 0.5, ..config() })).is_err());
    }

    #[test]
    fn divergence_keeps_the_last_good_checkpoint() {
        let m = model();
        let s = samples(&m);
        let dir = tempfile::tempdir().unwrap();
        let mut t = train(&s, &m, &TrainConfig { epochs: 1, ..config() }, Some(dir.path())).unwrap();
        let before = std::fs::read(dir.path().join(crate::harness::checkpoint::BLOB_FILE)).unwrap();
        let mut w = t.params.get("coarse.w").unwrap().clone();
        w.data_mut()[0] = f32::NAN;
        t.params.set("coarse.w", w).unwrap();
        t.config.epochs = 2;
        let snapshot = t.params.clone();
        let e = t.run(&s, Some(dir.path())).unwrap_err();
        assert!(matches!(e, Error::Divergence(_)), "{e}");
        assert!(t.params.bit_eq(&snapshot));
        assert_eq!(std::fs::read(dir.path().join(crate::harness::checkpoint::BLOB_FILE)).unwrap(), before);
    }

    #[test]
    fn loss_csv_round_trips() {
        let r = vec![LossRecord {
            step: 1,
            loss: 0.1 + 0.2,
            l_initial: 1e-30,
            l_final: 3.0,
            l_cd: f64::MIN_POSITIVE,
        }];
        assert_eq!(parse_loss_csv(&loss_csv(&r)).unwrap(), r);
        assert!(parse_loss_csv("step,loss\n").is_err());
    }
}
