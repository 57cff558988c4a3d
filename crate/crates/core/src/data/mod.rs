//! Procedural image groups with known factors.
//!
//! Each group draws one shape, palette and style for all members, one hidden
//! background tint, and then a quadrant, scale and background shade per
//! member. Images are rasterized on integer pixel coordinates with no
//! anti-aliasing, so [`factor_oracle_decode`] inverts clean renders exactly.
//! Captions are six slot tokens; the shared slots repeat in every member's
//! caption.

mod factors;
mod image_io;
mod render;

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use factors::{
    background_rgb, caption, caption_values, decode_caption, describe, FactorSpec, MemberFactors, SharedFactors, Slot,
    Tint, CAPTION_LEN, NULL_TOKEN, PALETTES, PALETTE_RGB, QUADRANTS, SCALES, SHADES, SHAPES, STYLES, TINT_OFFSET, VOCAB,
};
pub use image_io::{decode_png, decode_ppm, encode_png, encode_ppm, from_rgb8, read_image, to_rgb8, write_image};
pub use render::{
    covers, factor_oracle_decode, quadrant_center, radius, render_member, shape_mask, Decoded, LOW_CONFIDENCE,
    MIN_IMAGE_SIZE,
};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GroupSample<S: Scalar> {
    pub images: Vec<Tensor<S>>,
    pub captions: Vec<Vec<usize>>,
    pub factors: FactorSpec,
    pub seed: u64,
}

impl<S: Scalar> GroupSample<S> {
    pub fn n(&self) -> usize {
        self.images.len()
    }
}

/// Deterministic rasterization of every member.
pub fn render_group<S: Scalar>(factors: &FactorSpec, size: usize, seed: u64) -> GroupSample<S> {
    let images = factors.members.iter().map(|&m| render_member(size, factors.shared, factors.tint, m)).collect();
    let captions = factors.members.iter().map(|&m| caption(factors.shared, m)).collect();
    GroupSample { images, captions, factors: factors.clone(), seed }
}

/// Uniform on `1..=max_group`.
pub fn sample_group_size<R: Rng + ?Sized>(max_group: usize, rng: &mut R) -> Result<usize> {
    if max_group == 0 {
        return Err(Error::contract("max_group must be at least 1"));
    }
    Ok(rng.gen_range(1..=max_group))
}

/// Groups of `n` members that fit in `token_budget`.
pub fn dynamic_batcher(token_budget: usize, n: usize, l_img: usize, l_ctx_total: usize) -> Result<usize> {
    let needed = n * l_img + l_ctx_total;
    if needed == 0 {
        return Err(Error::contract("a group with no tokens"));
    }
    if needed > token_budget {
        return Err(Error::Capacity { needed, budget: token_budget });
    }
    Ok(token_budget / needed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Heldout,
    /// Restricted palettes and the two darkest backgrounds, for fine-tuning.
    Quality,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Heldout => "heldout",
            Split::Quality => "quality",
        }
    }

    fn salt(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e00_0001,
            Split::Heldout => 0x6865_6c64_6f75_7402,
            Split::Quality => 0x7175_616c_6974_7903,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "heldout" => Ok(Split::Heldout),
            "quality" => Ok(Split::Quality),
            other => Err(Error::config(format!("unknown split {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetConfig {
    pub image_size: usize,
    pub max_group: usize,
    /// Number of distinct groups; indices wrap modulo this.
    pub corpus_size: u64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { image_size: 32, max_group: 4, corpus_size: 100_000, seed: 0 }
    }
}

/// Indexable view of one split.
#[derive(Debug, Clone)]
pub struct Dataset {
    cfg: DatasetConfig,
    split: Split,
}

impl Dataset {
    pub fn new(cfg: DatasetConfig, split: Split) -> Result<Self> {
        if cfg.image_size < MIN_IMAGE_SIZE || cfg.image_size % 2 != 0 {
            return Err(Error::config(format!(
                "image size {} must be even and at least {MIN_IMAGE_SIZE}",
                cfg.image_size
            )));
        }
        if cfg.max_group == 0 || cfg.corpus_size == 0 {
            return Err(Error::config("max_group and corpus_size must be positive"));
        }
        Ok(Self { cfg, split })
    }

    pub fn config(&self) -> &DatasetConfig {
        &self.cfg
    }

    pub fn split(&self) -> Split {
        self.split
    }

    fn rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ self.split.salt());
        rng.set_stream(index % self.cfg.corpus_size);
        rng
    }

    /// Factors of group `index` with `n` members. The shared factors and
    /// tint do not depend on `n`; members are drawn in order, so a smaller
    /// group is a prefix of a larger one.
    pub fn factors(&self, index: u64, n: usize) -> FactorSpec {
        let mut rng = self.rng(index);
        let _group_size_draw = rng.gen::<u64>();
        let (palettes, shades) = match self.split {
            Split::Quality => (4, 2),
            _ => (PALETTES.len(), SHADES.len()),
        };
        let shared = SharedFactors {
            shape: rng.gen_range(0..SHAPES.len()),
            palette: rng.gen_range(0..palettes),
            style: rng.gen_range(0..STYLES.len()),
        };
        let tint = Tint::ALL[rng.gen_range(0..2)];
        let members = (0..n)
            .map(|_| MemberFactors {
                quadrant: rng.gen_range(0..QUADRANTS),
                scale: rng.gen_range(0..SCALES),
                shade: rng.gen_range(0..shades),
            })
            .collect();
        FactorSpec { shared, tint, members }
    }

    /// Group size of `index`, uniform on `1..=max_group`.
    pub fn group_size(&self, index: u64) -> usize {
        let draw = self.rng(index).gen::<u64>();
        1 + (draw % self.cfg.max_group as u64) as usize
    }

    pub fn get<S: Scalar>(&self, index: u64) -> GroupSample<S> {
        self.get_with_size(index, self.group_size(index))
    }

    pub fn get_with_size<S: Scalar>(&self, index: u64, n: usize) -> GroupSample<S> {
        let seed = (self.cfg.seed ^ self.split.salt()).wrapping_add(index % self.cfg.corpus_size);
        render_group(&self.factors(index, n), self.cfg.image_size, seed)
    }

    /// Writes `count` groups under `dir/<split>/`: one image per member
    /// (`<index>_<member>.<ext>`) and `manifest.txt` with
    /// `index<TAB>n<TAB>captions` (members separated by `;`, tokens by `,`).
    pub fn export(&self, dir: &Path, count: u64, ext: &str) -> Result<()> {
        let out = dir.join(self.split.name());
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let mut manifest = String::new();
        for index in 0..count {
            let g: GroupSample<f32> = self.get(index);
            for (m, img) in g.images.iter().enumerate() {
                write_image(&out.join(format!("{index:06}_{m}.{ext}")), img)?;
            }
            let caps: Vec<String> = g
                .captions
                .iter()
                .map(|c| c.iter().map(usize::to_string).collect::<Vec<_>>().join(","))
                .collect();
            manifest.push_str(&format!("{index}\t{}\t{}\n", g.n(), caps.join(";")));
        }
        let path = out.join("manifest.txt");
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }
}
