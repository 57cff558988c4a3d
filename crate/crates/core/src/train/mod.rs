//! Training loop, checkpoints and the evaluation/sampling pipelines behind
//! the command-line tool.
//!
//! Every step draws one `u64` batch seed from the trainer's main generator;
//! all randomness of the step (group size, data indices, caption dropout,
//! references, noise level and noise) comes from a generator seeded with it.
//! Checkpoints store the main generator's position, so a resumed run
//! continues the same sequence of batches.

mod checkpoint;
mod optim;
mod pipeline;

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, RngState};
pub use optim::{learning_rate, AdamW, ADAM_EPS, BETA1, BETA2};
pub use pipeline::{
    evaluate, finetune, inspect_manifest, inspect_mask, inspect_schedule, sample_to_disk, EvalConfig, FinetuneOutcome,
    SampleRequest,
};

use crate::conditioning::{make_inpaint_input, null_context, sample_references_for_training, ReferenceSpec};
use crate::data::{dynamic_batcher, sample_group_size, Dataset, DatasetConfig, GroupSample, Split};
use crate::diffusion::{
    build_schedule, q_sample, standard_normal, training_target, NoiseSchedule, TimeSampling, DEFAULT_TRAIN_STEPS,
};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::model::{GdtModel, InputConditioning, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

const TRAIN_KEYS: &[&str] = &[
    "steps",
    "lr",
    "warmup",
    "token_budget",
    "weight_decay",
    "ctx_dropout",
    "time_sampling",
    "seed",
    "checkpoint_every",
    "split",
    "corpus_size",
];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub steps: u64,
    pub lr: f64,
    pub warmup: u64,
    /// Upper bound on image plus context tokens per batch.
    pub token_budget: usize,
    pub weight_decay: f64,
    /// Probability that a group's captions are replaced by null tokens.
    pub ctx_dropout: f64,
    pub time_sampling: TimeSampling,
    pub seed: u64,
    /// Save every this many steps; 0 saves only at the end.
    pub checkpoint_every: u64,
    pub split: Split,
    pub corpus_size: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::tiny(),
            steps: 5000,
            lr: 1e-3,
            warmup: 500,
            token_budget: 176,
            weight_decay: 0.01,
            ctx_dropout: 0.1,
            time_sampling: TimeSampling::Uniform,
            seed: 0,
            checkpoint_every: 0,
            split: Split::Train,
            corpus_size: 100_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.token_budget == 0 || self.corpus_size == 0 {
            return Err(Error::config("token_budget and corpus_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.ctx_dropout) {
            return Err(Error::config(format!("ctx_dropout {} outside [0, 1)", self.ctx_dropout)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        let widest = self.model.max_group * (self.model.tokens_per_image() + self.model.context_len);
        if widest > self.token_budget {
            return Err(Error::Capacity { needed: widest, budget: self.token_budget });
        }
        Ok(())
    }

    /// Model keys followed by training keys.
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = self.model.to_kv();
        kv.set("steps", self.steps);
        kv.set("lr", self.lr);
        kv.set("warmup", self.warmup);
        kv.set("token_budget", self.token_budget);
        kv.set("weight_decay", self.weight_decay);
        kv.set("ctx_dropout", self.ctx_dropout);
        kv.set("time_sampling", self.time_sampling);
        kv.set("seed", self.seed);
        kv.set("checkpoint_every", self.checkpoint_every);
        kv.set("split", self.split.name());
        kv.set("corpus_size", self.corpus_size);
        kv
    }

    pub fn to_text(&self) -> String {
        self.to_kv().to_text()
    }

    /// Missing keys take their values from `base`.
    pub fn from_kv(kv: &KeyValues, base: &TrainConfig) -> Result<Self> {
        let known: Vec<&str> = ModelConfig::keys().iter().chain(TRAIN_KEYS).copied().collect();
        kv.reject_unknown(&known)?;
        let cfg = Self {
            model: ModelConfig::from_kv(kv, &base.model)?,
            steps: kv.parse_or("steps", base.steps)?,
            lr: kv.parse_or("lr", base.lr)?,
            warmup: kv.parse_or("warmup", base.warmup)?,
            token_budget: kv.parse_or("token_budget", base.token_budget)?,
            weight_decay: kv.parse_or("weight_decay", base.weight_decay)?,
            ctx_dropout: kv.parse_or("ctx_dropout", base.ctx_dropout)?,
            time_sampling: kv.parse_or("time_sampling", base.time_sampling)?,
            seed: kv.parse_or("seed", base.seed)?,
            checkpoint_every: kv.parse_or("checkpoint_every", base.checkpoint_every)?,
            split: kv.parse_or("split", base.split)?,
            corpus_size: kv.parse_or("corpus_size", base.corpus_size)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KeyValues::parse(text)?, &Self::default())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn dataset(&self) -> Result<Dataset> {
        Dataset::new(
            DatasetConfig {
                image_size: self.model.image_size,
                max_group: self.model.max_group,
                corpus_size: self.corpus_size,
                seed: self.seed,
            },
            self.split,
        )
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub n: usize,
    pub batch: usize,
}

impl StepLog {
    pub fn to_line(&self) -> String {
        format!("step={} loss={:.8e} lr={:.6e} n={} batch={}", self.step, self.loss, self.lr, self.n, self.batch)
    }
}

/// Everything drawn for one training group.
#[derive(Debug, Clone)]
struct GroupDraw<S: Scalar> {
    index: u64,
    sample: GroupSample<S>,
    contexts: Vec<Vec<usize>>,
    flags: Vec<bool>,
    time: f64,
    inputs: Vec<Tensor<S>>,
    targets: Vec<Tensor<S>>,
}

pub struct Trainer<S: Scalar> {
    cfg: TrainConfig,
    model: GdtModel<S>,
    opt: AdamW<S>,
    step: u64,
    rng: ChaCha8Rng,
    data: Dataset,
    sched: NoiseSchedule,
    log_path: Option<PathBuf>,
}

impl<S: Scalar> Trainer<S> {
    /// Fresh parameters initialized from `cfg.seed`.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = GdtModel::init(cfg.model.clone(), cfg.seed)?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Self::assemble(cfg, model, None, 0, rng)
    }

    /// Trainer continuing from `ckpt` with `cfg`. The model part of `cfg`
    /// must hash like the checkpoint's unless `force`.
    pub fn resume(cfg: TrainConfig, ckpt: Checkpoint<S>, force: bool) -> Result<Self> {
        cfg.validate()?;
        ckpt.check_hash(&cfg.model, force)?;
        let rng = ckpt.state.rng.restore();
        let model = GdtModel::new(cfg.model.clone(), ckpt.params)?;
        Self::assemble(cfg, model, Some(ckpt.optimizer), ckpt.state.step, rng)
    }

    /// Trainer starting a new stage from `params` with reset moments.
    pub fn from_params(cfg: TrainConfig, model: GdtModel<S>) -> Result<Self> {
        cfg.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = GdtModel::new(cfg.model.clone(), model.into_params())?;
        Self::assemble(cfg, model, None, 0, rng)
    }

    fn assemble(
        cfg: TrainConfig,
        model: GdtModel<S>,
        opt: Option<AdamW<S>>,
        step: u64,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        let opt = opt.unwrap_or_else(|| AdamW::new(model.params().tensors(), cfg.weight_decay));
        let data = cfg.dataset()?;
        let sched = build_schedule(cfg.model.objective.schedule_kind(), DEFAULT_TRAIN_STEPS)?;
        Ok(Self { cfg, model, opt, step, rng, data, sched, log_path: None })
    }

    /// Appends one log line per step to `path`.
    pub fn log_to(&mut self, path: impl Into<PathBuf>) {
        self.log_path = Some(path.into());
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &GdtModel<S> {
        &self.model
    }

    pub fn into_model(self) -> GdtModel<S> {
        self.model
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn optimizer(&self) -> &AdamW<S> {
        &self.opt
    }

    pub fn checkpoint(&self) -> Checkpoint<S> {
        Checkpoint::new(&self.cfg, self.model.params().clone(), self.opt.clone(), self.step, RngState::capture(&self.rng))
    }

    fn draw_group(&self, rng: &mut ChaCha8Rng, n: usize) -> Result<GroupDraw<S>> {
        let cfg = &self.cfg.model;
        let index = rng.gen::<u64>() % self.cfg.corpus_size;
        let sample: GroupSample<S> = self.data.get_with_size(index, n);
        let dropped = rng.gen::<f64>() < self.cfg.ctx_dropout;
        let contexts = if dropped {
            sample.captions.iter().map(|c| null_context(cfg.vocab, c.len())).collect()
        } else {
            sample.captions.clone()
        };
        let flags = match cfg.conditioning {
            InputConditioning::Inpaint => sample_references_for_training(n, rng)?,
            InputConditioning::None => vec![false; n],
        };
        let t = self.sched.sample_training_time_with(self.cfg.time_sampling, rng);
        let time = self.sched.model_time(t)?;
        let mut noised = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        for x0 in &sample.images {
            let eps: Tensor<S> = standard_normal(x0.shape(), rng);
            noised.push(q_sample(x0, t, &eps, &self.sched)?);
            targets.push(training_target(x0, &eps, cfg.objective)?);
        }
        let inputs = match cfg.conditioning {
            InputConditioning::Inpaint => {
                make_inpaint_input(&noised, &ReferenceSpec::with_images(flags.clone(), &sample.images)?)?
            }
            InputConditioning::None => noised,
        };
        Ok(GroupDraw { index, sample, contexts, flags, time, inputs, targets })
    }

    /// One optimizer update.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let step = self.step + 1;
        let batch_seed: u64 = self.rng.gen();
        let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
        let cfg = &self.cfg.model;
        let n = sample_group_size(cfg.max_group, &mut rng)?;
        let batch = dynamic_batcher(self.cfg.token_budget, n, cfg.tokens_per_image(), n * cfg.context_len)?;
        let groups = (0..batch).map(|_| self.draw_group(&mut rng, n)).collect::<Result<Vec<_>>>()?;

        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, true);
        let mut total = None;
        for g in &groups {
            let tokens = self.model.input_tokens(&mut tape, &g.inputs, false)?;
            let l = self.model.group_loss(&mut tape, &bound, &tokens, &g.contexts, g.time, &g.targets)?;
            total = Some(match total {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        let loss_var = tape.scale(total.expect("batch of at least one"), S::one() / S::lit(batch as f64));
        let loss = tape.value(loss_var).data()[0].as_f64();
        if !loss.is_finite() {
            let dump = self.dump_batch(step, batch_seed, &groups);
            return Err(Error::NonFiniteLoss { step, batch_seed, dump });
        }
        tape.backward(loss_var)?;
        let lr = learning_rate(step, self.cfg.lr, self.cfg.warmup, self.cfg.steps);
        let grads: Vec<Option<&[S]>> = bound.vars().iter().map(|&v| tape.grad(v)).collect();
        self.opt.step(self.model.params_mut().tensors_mut(), &grads, lr)?;
        self.step = step;
        let log = StepLog { step, loss, lr, n, batch };
        if let Some(path) = &self.log_path {
            let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
            writeln!(f, "{}", log.to_line()).map_err(|e| Error::io(path, e))?;
        }
        Ok(log)
    }

    /// Writes what is needed to replay a failing batch next to the log, or
    /// in the working directory without one.
    fn dump_batch(&self, step: u64, batch_seed: u64, groups: &[GroupDraw<S>]) -> Option<PathBuf> {
        let dir = self.log_path.as_ref().and_then(|p| p.parent()).map(Path::to_path_buf).unwrap_or_default();
        let path = dir.join(format!("nonfinite_step{step}.txt"));
        let mut s = format!("step={step}\nbatch_seed={batch_seed:#018x}\nconfig_hash={}\n", self.cfg.model.hash());
        for (i, g) in groups.iter().enumerate() {
            let _ = writeln!(
                s,
                "group={i} index={} n={} time={} flags={:?} captions={:?} contexts={:?}",
                g.index,
                g.sample.n(),
                g.time,
                g.flags,
                g.sample.captions,
                g.contexts
            );
        }
        fs::write(&path, s).ok().map(|_| path)
    }

    /// Runs until `cfg.steps`, saving to `out` (when given) at the cadence
    /// and at the end.
    pub fn run(&mut self, out: Option<&Path>) -> Result<Vec<StepLog>> {
        let mut logs = Vec::new();
        while self.step < self.cfg.steps {
            logs.push(self.train_step()?);
            if let Some(dir) = out {
                let every = self.cfg.checkpoint_every;
                if every > 0 && self.step % every == 0 && self.step < self.cfg.steps {
                    self.checkpoint().save(dir)?;
                }
            }
        }
        if let Some(dir) = out {
            self.checkpoint().save(dir)?;
        }
        Ok(logs)
    }
}

/// Trains from scratch, writing the checkpoint and `train.log` under `out`.
pub fn train<S: Scalar>(cfg: TrainConfig, out: &Path) -> Result<Checkpoint<S>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log = out.join("train.log");
    if log.exists() {
        fs::remove_file(&log).map_err(|e| Error::io(&log, e))?;
    }
    let mut trainer = Trainer::<S>::new(cfg)?;
    trainer.log_to(log);
    trainer.run(Some(out))?;
    Ok(trainer.checkpoint())
}
