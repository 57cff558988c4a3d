use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::diffusion::Objective;
use crate::error::{Error, Result};
use crate::kv::KeyValues;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Image self-attention, per-member cross-attention to the context, FFN.
    EncoderDecoder,
    /// One masked self-attention over the joint context + image sequence.
    EncoderOnly,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::EncoderDecoder => "encoder-decoder",
            Variant::EncoderOnly => "encoder-only",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder-decoder" => Ok(Variant::EncoderDecoder),
            "encoder-only" => Ok(Variant::EncoderOnly),
            other => Err(Error::config(format!("unknown variant {other}"))),
        }
    }
}

/// Extra input channels carried by every member.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InputConditioning {
    None,
    /// `[noised | reference-or-zeros | indicator]`.
    Inpaint,
}

impl fmt::Display for InputConditioning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputConditioning::None => "none",
            InputConditioning::Inpaint => "inpaint",
        })
    }
}

impl FromStr for InputConditioning {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(InputConditioning::None),
            "inpaint" => Ok(InputConditioning::Inpaint),
            other => Err(Error::config(format!("unknown conditioning {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub variant: Variant,
    pub image_size: usize,
    /// Image channels; the model output always has this many.
    pub channels: usize,
    pub conditioning: InputConditioning,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub vocab: usize,
    /// Longest context a member may carry.
    pub context_len: usize,
    pub max_group: usize,
    pub objective: Objective,
}

const KEYS: &[&str] = &[
    "variant",
    "image_size",
    "channels",
    "conditioning",
    "patch",
    "dim",
    "heads",
    "depth",
    "mlp_ratio",
    "vocab",
    "context_len",
    "max_group",
    "objective",
];

impl ModelConfig {
    /// The small encoder-only flow model used for the training experiments.
    pub fn tiny() -> Self {
        Self {
            variant: Variant::EncoderOnly,
            image_size: 16,
            channels: 3,
            conditioning: InputConditioning::None,
            patch: 4,
            dim: 64,
            heads: 4,
            depth: 4,
            mlp_ratio: 4,
            vocab: crate::data::VOCAB,
            context_len: crate::data::CAPTION_LEN,
            max_group: 2,
            objective: Objective::VelocityFlow,
        }
    }

    pub fn channels_in(&self) -> usize {
        match self.conditioning {
            InputConditioning::None => self.channels,
            InputConditioning::Inpaint => 2 * self.channels + 1,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens_per_image(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim_in(&self) -> usize {
        self.patch * self.patch * self.channels_in()
    }

    pub fn patch_dim_out(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("patch", self.patch),
            ("dim", self.dim),
            ("heads", self.heads),
            ("depth", self.depth),
            ("mlp_ratio", self.mlp_ratio),
            ("vocab", self.vocab),
            ("max_group", self.max_group),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{k} must be positive")));
        }
        if self.image_size % self.patch != 0 {
            return Err(Error::config(format!("patch {} does not divide image size {}", self.patch, self.image_size)));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::config(format!("{} heads do not divide dim {}", self.heads, self.dim)));
        }
        if self.dim % 4 != 0 {
            return Err(Error::config(format!("dim {} must be a multiple of 4 for the 2D position table", self.dim)));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("variant", self.variant);
        kv.set("image_size", self.image_size);
        kv.set("channels", self.channels);
        kv.set("conditioning", self.conditioning);
        kv.set("patch", self.patch);
        kv.set("dim", self.dim);
        kv.set("heads", self.heads);
        kv.set("depth", self.depth);
        kv.set("mlp_ratio", self.mlp_ratio);
        kv.set("vocab", self.vocab);
        kv.set("context_len", self.context_len);
        kv.set("max_group", self.max_group);
        kv.set("objective", self.objective);
        kv
    }

    /// Reads the model keys of `kv`, starting from `base` for absent ones.
    /// Keys outside the model namespace are ignored.
    pub fn from_kv(kv: &KeyValues, base: &ModelConfig) -> Result<Self> {
        let cfg = Self {
            variant: kv.parse_or("variant", base.variant)?,
            image_size: kv.parse_or("image_size", base.image_size)?,
            channels: kv.parse_or("channels", base.channels)?,
            conditioning: kv.parse_or("conditioning", base.conditioning)?,
            patch: kv.parse_or("patch", base.patch)?,
            dim: kv.parse_or("dim", base.dim)?,
            heads: kv.parse_or("heads", base.heads)?,
            depth: kv.parse_or("depth", base.depth)?,
            mlp_ratio: kv.parse_or("mlp_ratio", base.mlp_ratio)?,
            vocab: kv.parse_or("vocab", base.vocab)?,
            context_len: kv.parse_or("context_len", base.context_len)?,
            max_group: kv.parse_or("max_group", base.max_group)?,
            objective: kv.parse_or("objective", base.objective)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    pub fn to_text(&self) -> String {
        self.to_kv().to_text()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        kv.reject_unknown(KEYS)?;
        Self::from_kv(&kv, &Self::tiny())
    }

    /// Hex SHA-256 of [`ModelConfig::to_text`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
