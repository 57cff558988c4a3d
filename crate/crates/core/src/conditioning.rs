//! Reference-conditioned group generation.
//!
//! A [`ReferenceSpec`] marks `m < n` members of a group as given. Two ways
//! of using them are supported: trainable inpainting, where every member's
//! input is `[noised | reference-or-zeros | indicator]` along channels, and
//! SDEdit, where reference latents are overwritten with forward-noised clean
//! references before each model call.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;

use crate::diffusion::{
    build_schedule, ddpm_ancestral_step, flow_euler_step, sdedit_replace, standard_normal, NoiseSchedule,
    ScheduleKind, Timestep, DEFAULT_TRAIN_STEPS,
};
use crate::error::{Error, Result};
use crate::model::{GdtModel, InputConditioning};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSpec<S: Scalar> {
    flags: Vec<bool>,
    images: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> ReferenceSpec<S> {
    /// Flags without images. Fails unless `m < n`.
    pub fn from_flags(flags: Vec<bool>) -> Result<Self> {
        let n = flags.len();
        let m = flags.iter().filter(|&&f| f).count();
        if n == 0 || m >= n {
            return Err(Error::contract(format!("{m} references in a group of {n}; need m < n")));
        }
        Ok(Self { images: vec![None; n], flags })
    }

    /// No references in a group of `n`.
    pub fn none(n: usize) -> Self {
        Self { flags: vec![false; n], images: vec![None; n] }
    }

    /// Flags plus one clean image per flagged member, taken from `images`
    /// (indexed by member; entries for non-reference members are ignored).
    pub fn with_images(flags: Vec<bool>, images: &[Tensor<S>]) -> Result<Self> {
        let mut spec = Self::from_flags(flags)?;
        if images.len() != spec.n() {
            return Err(Error::contract(format!("{} images for {} members", images.len(), spec.n())));
        }
        for i in spec.indices() {
            spec.images[i] = Some(images[i].clone());
        }
        Ok(spec)
    }

    /// Stores the clean image for reference member `i`.
    pub fn attach(&mut self, i: usize, image: Tensor<S>) -> Result<()> {
        if !self.flags.get(i).copied().unwrap_or(false) {
            return Err(Error::contract(format!("member {i} is not a reference")));
        }
        self.images[i] = Some(image);
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.flags.len()
    }

    pub fn m(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn is_reference(&self, i: usize) -> bool {
        self.flags[i]
    }

    /// Indices of reference members, ascending.
    pub fn indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.flags[i]).collect()
    }

    /// Clean image of reference member `i`.
    pub fn image(&self, i: usize) -> Result<&Tensor<S>> {
        if !self.flags.get(i).copied().unwrap_or(false) {
            return Err(Error::contract(format!("member {i} is not a reference")));
        }
        self.images[i]
            .as_ref()
            .ok_or_else(|| Error::contract(format!("reference member {i} has no stored image")))
    }

    pub fn cast<T: Scalar>(&self) -> ReferenceSpec<T> {
        ReferenceSpec {
            flags: self.flags.clone(),
            images: self.images.iter().map(|im| im.as_ref().map(Tensor::cast)).collect(),
        }
    }
}

/// Builds the `[2C+1, H, W]` inpainting input for every member from the
/// noised `[C, H, W]` latents.
pub fn make_inpaint_input<S: Scalar>(noised: &[Tensor<S>], refs: &ReferenceSpec<S>) -> Result<Vec<Tensor<S>>> {
    if noised.len() != refs.n() {
        return Err(Error::contract(format!("{} latents for {} reference flags", noised.len(), refs.n())));
    }
    noised
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let &[c, h, w] = x.shape() else {
                return Err(Error::shape("make_inpaint_input", x.shape(), &[]));
            };
            let plane = h * w;
            let mut data = Vec::with_capacity((2 * c + 1) * plane);
            data.extend_from_slice(x.data());
            if refs.is_reference(i) {
                let r = refs.image(i)?;
                if r.shape() != x.shape() {
                    return Err(Error::shape("make_inpaint_input", x.shape(), r.shape()));
                }
                data.extend_from_slice(r.data());
                data.extend(std::iter::repeat(S::one()).take(plane));
            } else {
                data.extend(std::iter::repeat(S::zero()).take((c + 1) * plane));
            }
            Tensor::new([2 * c + 1, h, w], data)
        })
        .collect()
}

/// Draws `m` uniformly from `{0, .., n-1}`, then `m` members uniformly
/// without replacement.
pub fn sample_references_for_training<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<bool>> {
    if n == 0 {
        return Err(Error::contract("group of zero members"));
    }
    let m = rng.gen_range(0..n);
    let mut flags = vec![false; n];
    for i in index::sample(rng, n, m) {
        flags[i] = true;
    }
    Ok(flags)
}

/// How references enter sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SampleMode {
    /// Plain group sampling; no references allowed.
    #[default]
    None,
    Inpaint,
    Sdedit,
}

impl fmt::Display for SampleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SampleMode::None => "none",
            SampleMode::Inpaint => "inpaint",
            SampleMode::Sdedit => "sdedit",
        })
    }
}

impl FromStr for SampleMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(SampleMode::None),
            "inpaint" => Ok(SampleMode::Inpaint),
            "sdedit" => Ok(SampleMode::Sdedit),
            other => Err(Error::config(format!("unknown sampling mode {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    /// Classifier-free guidance scale; 1.0 disables the unconditional pass.
    pub guidance: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: crate::diffusion::DEFAULT_SAMPLE_STEPS, guidance: 1.0 }
    }
}

/// Context of `len` null tokens; the null token is the last vocabulary id.
pub fn null_context(vocab: usize, len: usize) -> Vec<usize> {
    vec![vocab - 1; len]
}

/// Sampling schedule for a model's objective: the training DDPM schedule
/// respaced to `steps`, or a uniform flow grid of `steps` intervals.
pub fn sampling_schedule(kind: ScheduleKind, steps: usize) -> Result<NoiseSchedule> {
    match kind {
        ScheduleKind::DdpmLinear => build_schedule(kind, DEFAULT_TRAIN_STEPS)?.respace(steps),
        ScheduleKind::FlowLinear => build_schedule(kind, steps),
    }
}

/// Joint sampling of `contexts.len()` members with no references. Inpaint
/// models see all-zero reference channels.
pub fn unconditional_sample<S: Scalar, R: Rng + ?Sized>(
    model: &GdtModel<S>,
    contexts: &[Vec<usize>],
    sampler: SamplerConfig,
    rng: &mut R,
) -> Result<Vec<Tensor<S>>> {
    let mode = match model.config().conditioning {
        InputConditioning::Inpaint => SampleMode::Inpaint,
        InputConditioning::None => SampleMode::None,
    };
    denoise(model, contexts, &ReferenceSpec::none(contexts.len()), mode, sampler, rng)
}

/// Joint sampling with reference members held as given. Returns all `n`
/// members; reference slots hold their clean images.
pub fn conditional_sample<S: Scalar, R: Rng + ?Sized>(
    model: &GdtModel<S>,
    contexts: &[Vec<usize>],
    refs: &ReferenceSpec<S>,
    mode: SampleMode,
    sampler: SamplerConfig,
    rng: &mut R,
) -> Result<Vec<Tensor<S>>> {
    if refs.n() != contexts.len() {
        return Err(Error::contract(format!("{} reference flags for {} contexts", refs.n(), contexts.len())));
    }
    for i in refs.indices() {
        refs.image(i)?;
    }
    denoise(model, contexts, refs, mode, sampler, rng)
}

fn denoise<S: Scalar, R: Rng + ?Sized>(
    model: &GdtModel<S>,
    contexts: &[Vec<usize>],
    refs: &ReferenceSpec<S>,
    mode: SampleMode,
    sampler: SamplerConfig,
    rng: &mut R,
) -> Result<Vec<Tensor<S>>> {
    let cfg = model.config();
    let inpaint_model = cfg.conditioning == InputConditioning::Inpaint;
    if (mode == SampleMode::Inpaint) != inpaint_model {
        return Err(Error::config(format!(
            "mode {mode} needs a {} model, checkpoint has {} input channels",
            if mode == SampleMode::Inpaint { "reference-channel" } else { "plain" },
            cfg.channels_in()
        )));
    }
    if mode == SampleMode::None && refs.m() > 0 {
        return Err(Error::contract("references given with sampling mode none"));
    }
    if sampler.steps == 0 {
        return Err(Error::contract("sampling needs at least one step"));
    }
    let n = contexts.len();
    let sched = sampling_schedule(cfg.objective.schedule_kind(), sampler.steps)?;
    let shape = [cfg.channels, cfg.image_size, cfg.image_size];
    let mut x: Vec<Tensor<S>> = (0..n).map(|_| standard_normal(&shape, rng)).collect();
    let guided = sampler.guidance != 1.0;
    let null: Vec<Vec<usize>> = contexts.iter().map(|c| null_context(cfg.vocab, c.len())).collect();
    let times = sched.sampling_times();
    for (k, &t) in times.iter().enumerate() {
        if mode == SampleMode::Sdedit {
            sdedit_replace(&mut x, refs, t, &sched, rng)?;
        }
        let inputs = if inpaint_model { make_inpaint_input(&x, refs)? } else { x.clone() };
        let time = sched.model_time(t)?;
        let mut pred = model.forward(&inputs, contexts, time)?;
        if guided {
            let uncond = model.forward(&inputs, &null, time)?;
            let g = S::lit(sampler.guidance);
            for (p, u) in pred.iter_mut().zip(&uncond) {
                for (pv, &uv) in p.data_mut().iter_mut().zip(u.data()) {
                    *pv = uv + g * (*pv - uv);
                }
            }
        }
        x = match t {
            Timestep::Step(s) => x
                .iter()
                .zip(&pred)
                .map(|(xi, e)| ddpm_ancestral_step(xi, e, s, &sched, rng))
                .collect::<Result<_>>()?,
            Timestep::Time(tt) => {
                let next = match times.get(k + 1) {
                    Some(Timestep::Time(nt)) => *nt,
                    _ => 0.0,
                };
                x.iter().zip(&pred).map(|(xi, v)| flow_euler_step(xi, v, tt, tt - next)).collect::<Result<_>>()?
            }
        };
    }
    for i in refs.indices() {
        x[i] = refs.image(i)?.clone();
    }
    Ok(x)
}
