use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{read_tensor, write_tensor, Tensor};

pub const INIT_STD: f64 = 0.02;

/// Time-frequency features fed into the timestep MLP.
pub const TIME_FREQ_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Normal with [`INIT_STD`], truncated at two standard deviations.
    Normal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<S: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

fn spec(out: &mut Vec<ParamSpec>, name: String, shape: &[usize], init: Init) {
    out.push(ParamSpec { name, shape: shape.to_vec(), init });
}

/// `zero_out` zero-initializes the output projection, for attention whose
/// result is added to the residual stream without a gate.
fn attn_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize, zero_out: bool) {
    for p in ["q", "k", "v", "o"] {
        let init = if p == "o" && zero_out { Init::Zeros } else { Init::Normal };
        spec(out, format!("{prefix}.w{p}"), &[d, d], init);
        spec(out, format!("{prefix}.b{p}"), &[d], Init::Zeros);
    }
}

/// Every parameter of a model with this configuration, in storage order.
/// `max_group` does not appear anywhere in the result.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.dim;
    let h = cfg.hidden();
    let mut out = Vec::new();
    spec(&mut out, "patch_embed.w".into(), &[cfg.patch_dim_in(), d], Init::Normal);
    spec(&mut out, "patch_embed.b".into(), &[d], Init::Zeros);
    spec(&mut out, "ctx_embed.table".into(), &[cfg.vocab, d], Init::Normal);
    spec(&mut out, "ctx_embed.pos".into(), &[cfg.context_len, d], Init::Normal);
    spec(&mut out, "time_mlp.w1".into(), &[TIME_FREQ_DIM, d], Init::Normal);
    spec(&mut out, "time_mlp.b1".into(), &[d], Init::Zeros);
    spec(&mut out, "time_mlp.w2".into(), &[d, d], Init::Normal);
    spec(&mut out, "time_mlp.b2".into(), &[d], Init::Zeros);
    for i in 0..cfg.depth {
        let b = format!("blocks.{i}");
        spec(&mut out, format!("{b}.ada.w"), &[d, 6 * d], Init::Zeros);
        spec(&mut out, format!("{b}.ada.b"), &[6 * d], Init::Zeros);
        attn_specs(&mut out, &format!("{b}.attn"), d, false);
        if cfg.variant == Variant::EncoderDecoder {
            spec(&mut out, format!("{b}.cross_norm.gain"), &[d], Init::Ones);
            spec(&mut out, format!("{b}.cross_norm.bias"), &[d], Init::Zeros);
            attn_specs(&mut out, &format!("{b}.cross"), d, true);
        }
        spec(&mut out, format!("{b}.mlp.w1"), &[d, h], Init::Normal);
        spec(&mut out, format!("{b}.mlp.b1"), &[h], Init::Zeros);
        spec(&mut out, format!("{b}.mlp.w2"), &[h, d], Init::Normal);
        spec(&mut out, format!("{b}.mlp.b2"), &[d], Init::Zeros);
    }
    spec(&mut out, "final.ada.w".into(), &[d, 2 * d], Init::Zeros);
    spec(&mut out, "final.ada.b".into(), &[2 * d], Init::Zeros);
    spec(&mut out, "final.linear.w".into(), &[d, cfg.patch_dim_out()], Init::Zeros);
    spec(&mut out, "final.linear.b".into(), &[cfg.patch_dim_out()], Init::Zeros);
    out
}

/// Closed-form parameter count.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let (d, h) = (cfg.dim, cfg.hidden());
    let attn = 4 * (d * d + d);
    let cross = match cfg.variant {
        Variant::EncoderDecoder => 2 * d + attn,
        Variant::EncoderOnly => 0,
    };
    let block = (d * 6 * d + 6 * d) + attn + cross + (d * h + h + h * d + d);
    (cfg.patch_dim_in() * d + d)
        + (cfg.vocab + cfg.context_len) * d
        + (TIME_FREQ_DIM * d + d + d * d + d)
        + cfg.depth * block
        + (d * 2 * d + 2 * d)
        + (d * cfg.patch_dim_out() + cfg.patch_dim_out())
}

fn truncated_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * INIT_STD;
        }
    }
}

impl<S: Scalar> ParamStore<S> {
    /// Fresh initialization; deterministic in `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for p in param_specs(cfg) {
            let t = match p.init {
                Init::Normal => Tensor::from_fn(p.shape, |_| S::lit(truncated_normal(&mut rng))),
                Init::Zeros => Tensor::zeros(p.shape),
                Init::Ones => Tensor::full(p.shape, S::one()),
            };
            names.push(p.name);
            tensors.push(t);
        }
        Ok(Self { names, tensors })
    }

    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor<S>>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::contract(format!("{} names for {} tensors", names.len(), tensors.len())));
        }
        Ok(Self { names, tensors })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    /// Checks names and shapes against `cfg`; every mismatch is listed.
    pub fn check_compatible(&self, cfg: &ModelConfig) -> Result<()> {
        let want = param_specs(cfg);
        let mut offending = Vec::new();
        for p in &want {
            match self.get(&p.name) {
                None => offending.push(format!("{} (missing)", p.name)),
                Some(t) if t.shape() != p.shape.as_slice() => {
                    offending.push(format!("{} (shape {:?}, expected {:?})", p.name, t.shape(), p.shape))
                }
                Some(_) => {}
            }
        }
        for n in &self.names {
            if !want.iter().any(|p| &p.name == n) {
                offending.push(format!("{n} (unexpected)"));
            }
        }
        if offending.is_empty() && self.names.iter().zip(&want).any(|(a, b)| a != &b.name) {
            offending.push("parameter order".into());
        }
        if offending.is_empty() {
            Ok(())
        } else {
            Err(Error::Load { offending })
        }
    }

    /// Concatenated tensor containers, in order, plus the text manifest
    /// (`name<TAB>shape<TAB>byte offset` per line).
    pub fn to_bytes(&self) -> (String, Vec<u8>) {
        let mut bytes = Vec::new();
        let mut manifest = String::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            manifest.push_str(&format!("{name}\t{}\t{}\n", shape.join(","), bytes.len()));
            write_tensor(t, &mut bytes);
        }
        (manifest, bytes)
    }

    pub fn from_bytes(manifest: &str, bytes: &[u8]) -> Result<Self> {
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        let mut pos = 0usize;
        for (lineno, line) in manifest.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split('\t').collect();
            let [name, shape, offset] = fields[..] else {
                return Err(Error::format("manifest", format!("line {}: expected 3 fields", lineno + 1)));
            };
            let offset: usize = offset
                .parse()
                .map_err(|_| Error::format("manifest", format!("line {}: bad offset", lineno + 1)))?;
            if offset != pos {
                return Err(Error::format("manifest", format!("{name}: offset {offset}, data at {pos}")));
            }
            let t: Tensor<S> = read_tensor(bytes, &mut pos)?;
            let want: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            if want.join(",") != shape {
                return Err(Error::format("manifest", format!("{name}: shape {shape} but data is {:?}", t.shape())));
            }
            names.push(name.to_string());
            tensors.push(t);
        }
        if pos != bytes.len() {
            return Err(Error::format("parameters", format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Self { names, tensors })
    }
}
