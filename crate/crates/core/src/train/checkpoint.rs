//! On-disk training state: `config.txt`, `manifest.txt`, `params.bin`,
//! `optimizer.bin` and `state.txt` in one directory.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::optim::AdamW;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::model::{ModelConfig, ParamStore};
use crate::scalar::Scalar;

/// Position of a ChaCha generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<[u8; 32]> {
    let bad = || Error::format("state.txt", format!("bad rng seed {s}"));
    if s.len() != 64 {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, b) in out.iter_mut().enumerate() {
        *b = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointState {
    pub step: u64,
    pub rng: RngState,
    /// Hash of the model configuration the parameters belong to.
    pub config_hash: String,
}

impl CheckpointState {
    fn to_text(&self) -> String {
        let mut kv = KeyValues::new();
        kv.set("step", self.step);
        kv.set("rng_seed", hex(&self.rng.seed));
        kv.set("rng_stream", self.rng.stream);
        kv.set("rng_word_pos", self.rng.word_pos);
        kv.set("config_hash", &self.config_hash);
        kv.to_text()
    }

    fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        kv.reject_unknown(&["step", "rng_seed", "rng_stream", "rng_word_pos", "config_hash"])?;
        let need = |k: &str| kv.get(k).ok_or_else(|| Error::format("state.txt", format!("missing {k}")));
        Ok(Self {
            step: kv.parse_or("step", 0)?,
            rng: RngState {
                seed: unhex(need("rng_seed")?)?,
                stream: kv.parse_or("rng_stream", 0)?,
                word_pos: kv.parse_or("rng_word_pos", 0)?,
            },
            config_hash: need("config_hash")?.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S: Scalar> {
    pub config: TrainConfig,
    pub params: ParamStore<S>,
    pub optimizer: AdamW<S>,
    pub state: CheckpointState,
}

const FILES: [&str; 5] = ["config.txt", "manifest.txt", "params.bin", "optimizer.bin", "state.txt"];

fn read(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let p = dir.join(name);
    fs::read(&p).map_err(|e| Error::io(p, e))
}

fn text(bytes: Vec<u8>, what: &'static str) -> Result<String> {
    String::from_utf8(bytes).map_err(|_| Error::format(what, "not UTF-8"))
}

impl<S: Scalar> Checkpoint<S> {
    pub fn new(config: &TrainConfig, params: ParamStore<S>, optimizer: AdamW<S>, step: u64, rng: RngState) -> Self {
        let state = CheckpointState { step, rng, config_hash: config.model.hash() };
        Self { config: config.clone(), params, optimizer, state }
    }

    /// Contents of every file, in [`FILES`] order.
    pub fn to_files(&self) -> Vec<(&'static str, Vec<u8>)> {
        let (manifest, params) = self.params.to_bytes();
        vec![
            (FILES[0], self.config.to_text().into_bytes()),
            (FILES[1], manifest.into_bytes()),
            (FILES[2], params),
            (FILES[3], self.optimizer.to_bytes()),
            (FILES[4], self.state.to_text().into_bytes()),
        ]
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, bytes) in self.to_files() {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    }

    /// Loads a checkpoint. The stored config must hash to the recorded
    /// value unless `force`.
    pub fn load(dir: &Path, force: bool) -> Result<Self> {
        let config = TrainConfig::parse(&text(read(dir, FILES[0])?, "config.txt")?)?;
        let state = CheckpointState::parse(&text(read(dir, FILES[4])?, "state.txt")?)?;
        let expected = config.model.hash();
        if !force && expected != state.config_hash {
            return Err(Error::ConfigHash { expected, found: state.config_hash });
        }
        let manifest = text(read(dir, FILES[1])?, "manifest.txt")?;
        let params = ParamStore::<S>::from_bytes(&manifest, &read(dir, FILES[2])?)?;
        params.check_compatible(&config.model)?;
        let optimizer = AdamW::from_bytes(&read(dir, FILES[3])?, params.tensors(), config.weight_decay)?;
        let ckpt = Self { config, params, optimizer, state };
        Ok(ckpt)
    }

    /// Fails unless `model` hashes like the checkpoint, or `force`.
    pub fn check_hash(&self, model: &ModelConfig, force: bool) -> Result<()> {
        let expected = model.hash();
        if !force && expected != self.state.config_hash {
            return Err(Error::ConfigHash { expected, found: self.state.config_hash.clone() });
        }
        Ok(())
    }
}
