//! Checkpoint directories: `manifest.json` plus a float32 little-endian blob.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::train::TrainConfig;
use crate::autodiff::{AdamConfig, AdamState, ParamStore, Tensor};
use crate::error::{contract, Error, Result};
use crate::fsutil::{read, write_atomic};
use crate::model::{init_params, ModelConfig};

pub const CHECKPOINT_FORMAT: &str = "lhmp-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

/// Serializable ChaCha8 position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte key, hex.
    pub seed: String,
    pub stream: u64,
    /// Word position; a decimal string because it is a `u128`.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |what: &str| Error::Corruption(format!("checkpoint rng {what} is malformed"));
        let key: [u8; 32] = hex::decode(&self.seed)
            .ok()
            .and_then(|v| v.try_into().ok())
            .ok_or_else(|| bad("seed"))?;
        let pos: u128 = self.word_pos.parse().map_err(|_| bad("word position"))?;
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Dataset a model was trained on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataInfo {
    pub fps: f64,
    /// Root seed of the dataset, when it has a manifest.
    pub seed: Option<u64>,
}

/// Full training state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: Option<DataInfo>,
    /// Completed epochs.
    pub epoch: usize,
    /// Batches already taken from the current epoch's permutation.
    pub cursor: usize,
    /// Shuffle generator as it was before the current epoch's permutation.
    pub rng: RngState,
    pub params: ParamStore<f32>,
    pub adam: AdamState<f32>,
}

impl Checkpoint {
    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    /// Fails unless the model was trained on data at `fps`.
    pub fn check_fps(&self, fps: f64) -> Result<()> {
        match &self.data {
            Some(d) if d.fps != fps => Err(contract(format!(
                "checkpoint was trained at {} fps, the dataset runs at {fps} fps",
                d.fps
            ))),
            _ => Ok(()),
        }
    }

    /// Checks that every parameter `cfg` needs is present with its shape.
    pub fn check_config(&self, cfg: &ModelConfig) -> Result<()> {
        check_params(&self.params, cfg)
    }
}

/// Names and shapes of `params` must be exactly those `cfg` builds.
pub fn check_params(params: &ParamStore<f32>, cfg: &ModelConfig) -> Result<()> {
    cfg.validate()?;
    let expected = init_params::<f32>(cfg, 0)?;
    for (name, t) in expected.iter() {
        match params.get(name) {
            None => return Err(contract(format!("parameter {name} is missing from the checkpoint"))),
            Some(p) if p.shape() != t.shape() => {
                return Err(contract(format!(
                    "parameter {name} has shape {:?} in the checkpoint, the configuration needs {:?}",
                    p.shape(),
                    t.shape()
                )))
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = params.names().find(|n| expected.get(n).is_none()) {
        return Err(contract(format!("checkpoint parameter {extra} is not part of the configuration")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Byte length.
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamMeta {
    config: AdamConfig,
    step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    seed: u64,
    epoch: usize,
    cursor: usize,
    model: ModelConfig,
    train: TrainConfig,
    data: Option<DataInfo>,
    rng: RngState,
    adam: AdamMeta,
    blob: String,
    blob_sha256: String,
    tensors: Vec<TensorEntry>,
}

const FIRST: &str = "adam.m.";
const SECOND: &str = "adam.v.";

fn encode(ckpt: &Checkpoint) -> Result<(Vec<u8>, Vec<u8>)> {
    let names: Vec<&str> = ckpt.params.names().collect();
    if ckpt.adam.first.len() != names.len() || ckpt.adam.second.len() != names.len() {
        return Err(contract("optimizer state does not match the parameter list"));
    }
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: String, t: &Tensor<f32>| {
        let offset = blob.len();
        for x in t.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
            length: blob.len() - offset,
        });
    };
    for (name, t) in ckpt.params.iter() {
        push(name.to_owned(), t);
    }
    for (name, t) in names.iter().zip(&ckpt.adam.first) {
        push(format!("{FIRST}{name}"), t);
    }
    for (name, t) in names.iter().zip(&ckpt.adam.second) {
        push(format!("{SECOND}{name}"), t);
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        seed: ckpt.train.seed,
        epoch: ckpt.epoch,
        cursor: ckpt.cursor,
        model: ckpt.model.clone(),
        train: ckpt.train.clone(),
        data: ckpt.data.clone(),
        rng: ckpt.rng.clone(),
        adam: AdamMeta {
            config: ckpt.adam.config,
            step: ckpt.adam.step,
        },
        blob: BLOB_FILE.into(),
        blob_sha256: hex::encode(Sha256::digest(&blob)),
        tensors,
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    Ok((json, blob))
}

/// Writes the blob, then the manifest, each atomically.
pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    let (manifest, blob) = encode(ckpt)?;
    write_atomic(&dir.join(BLOB_FILE), &blob)?;
    write_atomic(&dir.join(MANIFEST_FILE), &manifest)
}

fn tensor_at(blob: &[u8], e: &TensorEntry) -> Result<Tensor<f32>> {
    let numel: usize = e.shape.iter().product();
    if e.length != 4 * numel {
        return Err(Error::Corruption(format!(
            "tensor {} has shape {:?} but {} bytes",
            e.name, e.shape, e.length
        )));
    }
    let bytes = e
        .offset
        .checked_add(e.length)
        .and_then(|end| blob.get(e.offset..end))
        .ok_or_else(|| {
            Error::Corruption(format!(
                "tensor {} spans bytes {}..{} of a {}-byte blob",
                e.name,
                e.offset,
                e.offset.saturating_add(e.length),
                blob.len()
            ))
        })?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(&e.shape, data)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let m: Manifest = serde_json::from_slice(&read(&manifest_path)?)
        .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
    if m.format != CHECKPOINT_FORMAT || m.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "{}: expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}, found {} v{}",
            manifest_path.display(),
            m.format,
            m.version
        )));
    }
    if m.seed != m.train.seed {
        return Err(Error::Corruption("manifest seed disagrees with the training configuration".into()));
    }
    let blob = read(&dir.join(&m.blob))?;
    if hex::encode(Sha256::digest(&blob)) != m.blob_sha256 {
        return Err(Error::Corruption(format!("{} does not match its recorded hash", m.blob)));
    }
    let covered: usize = m.tensors.iter().map(|e| e.length).sum();
    if covered != blob.len() {
        return Err(Error::Corruption(format!(
            "manifest covers {covered} bytes, blob has {}",
            blob.len()
        )));
    }

    let mut params = ParamStore::new();
    let mut first = Vec::new();
    let mut second = Vec::new();
    for e in &m.tensors {
        let t = tensor_at(&blob, e)?;
        if let Some(n) = e.name.strip_prefix(FIRST) {
            first.push((n.to_owned(), t));
        } else if let Some(n) = e.name.strip_prefix(SECOND) {
            second.push((n.to_owned(), t));
        } else {
            params
                .register(e.name.clone(), t)
                .map_err(|_| Error::Corruption(format!("parameter {} is listed twice", e.name)))?;
        }
    }
    let moments = |v: Vec<(String, Tensor<f32>)>, kind: &str| -> Result<Vec<Tensor<f32>>> {
        if v.len() != params.len() {
            return Err(Error::Corruption(format!(
                "{} {kind} moment tensors for {} parameters",
                v.len(),
                params.len()
            )));
        }
        v.into_iter()
            .zip(params.iter())
            .map(|((n, t), (pn, pt))| {
                if n != pn || t.shape() != pt.shape() {
                    Err(Error::Corruption(format!("{kind} moment {n} does not line up with parameter {pn}")))
                } else {
                    Ok(t)
                }
            })
            .collect()
    };
    let adam = AdamState {
        config: m.adam.config,
        step: m.adam.step,
        first: moments(first, "first")?,
        second: moments(second, "second")?,
    };
    m.rng.restore()?;
    let ckpt = Checkpoint {
        model: m.model,
        train: m.train,
        data: m.data,
        epoch: m.epoch,
        cursor: m.cursor,
        rng: m.rng,
        params,
        adam,
    };
    ckpt.check_config(&ckpt.model)?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sample_checkpoint() -> Checkpoint {
        let model = ModelConfig::micro();
        let train = TrainConfig {
            lr: 3e-4,
            seed: 12,
            ..TrainConfig::default()
        };
        let params = init_params::<f32>(&model, 4).unwrap();
        let mut adam = AdamState::new(AdamConfig::with_lr(train.lr), &params);
        adam.step = 17;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t in adam.first.iter_mut().chain(adam.second.iter_mut()) {
            for x in t.data_mut() {
                *x = rng.random::<f32>() * 1e-3;
            }
        }
        let _: u64 = rng.random();
        Checkpoint {
            model,
            train,
            data: Some(DataInfo { fps: 10.0, seed: Some(2) }),
            epoch: 3,
            cursor: 1,
            rng: RngState::capture(&rng),
            params,
            adam,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        let ck = sample_checkpoint();
        save_checkpoint(&a, &ck).unwrap();
        let back = load_checkpoint(&a).unwrap();
        assert!(back.params.bit_eq(&ck.params));
        assert_eq!(back.adam.step, 17);
        assert_eq!(back.adam.first, ck.adam.first);
        assert_eq!((back.epoch, back.cursor), (3, 1));
        assert_eq!(back.train, ck.train);
        assert_eq!(back.data, ck.data);
        assert!(back.check_fps(10.0).is_ok());
        assert!(matches!(back.check_fps(20.0), Err(Error::Contract(_))));
        save_checkpoint(&b, &back).unwrap();
        for f in [MANIFEST_FILE, BLOB_FILE] {
            assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn rng_state_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..37 {
            let _: u32 = rng.random();
        }
        let mut back = RngState::capture(&rng).restore().unwrap();
        let a: Vec<u64> = (0..8).map(|_| rng.random()).collect();
        let b: Vec<u64> = (0..8).map(|_| back.random()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn mismatched_config_names_the_parameter() {
        let ck = sample_checkpoint();
        let other = ModelConfig {
            d2: 12,
            ..ModelConfig::micro()
        };
        let msg = ck.check_config(&other).unwrap_err().to_string();
        assert!(msg.contains("shape"), "{msg}");
        assert!(msg.contains("embed.joint"), "{msg}");
        let more = ModelConfig {
            m_hypotheses: 2,
            ..ModelConfig::micro()
        };
        assert!(matches!(ck.check_config(&more), Err(Error::Contract(m)) if m.contains("query.1")));
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let ck = sample_checkpoint();
        save_checkpoint(dir.path(), &ck).unwrap();
        let blob = dir.path().join(BLOB_FILE);
        let mut bytes = std::fs::read(&blob).unwrap();
        bytes[10] ^= 1;
        std::fs::write(&blob, &bytes).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Corruption(_))));

        save_checkpoint(dir.path(), &ck).unwrap();
        let mut bytes = std::fs::read(&blob).unwrap();
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&blob, &bytes).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Corruption(_))));

        save_checkpoint(dir.path(), &ck).unwrap();
        let mpath = dir.path().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&mpath).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["tensors"][0]["length"] = serde_json::json!(8);
        std::fs::write(&mpath, serde_json::to_vec(&v).unwrap()).unwrap();
        let e = load_checkpoint(dir.path()).unwrap_err();
        assert!(matches!(e, Error::Corruption(_)), "{e}");
        assert!(e.is_io());

        std::fs::write(&mpath, b"{not json").unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Format(_))));
    }
}
