use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Checkpoint, TrainConfig, Trainer};
use crate::attention::{build_group_mask, GroupLayout};
use crate::conditioning::{conditional_sample, unconditional_sample, ReferenceSpec, SampleMode, SamplerConfig};
use crate::data::{describe, write_image, Dataset, DatasetConfig, GroupSample, Slot, Split};
use crate::diffusion::{build_schedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::metrics::{content_consistency, fidelity_mmd, image_features, prompt_adherence, EvalReport, Exclusion};
use crate::model::{param_count, GdtModel, ModelConfig, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub groups: usize,
    pub group_size: usize,
    pub split: Split,
    pub sampler: SamplerConfig,
    pub seed: u64,
    pub corpus_size: u64,
    /// Sample each member on its own (`n = 1`) instead of jointly.
    pub independent: bool,
    /// Caption every member with the real group's first caption.
    pub repeat_caption: bool,
    pub consistency: bool,
    pub adherence: bool,
    pub fidelity: bool,
    pub slots: Vec<Slot>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            groups: 200,
            group_size: 2,
            split: Split::Heldout,
            sampler: SamplerConfig::default(),
            seed: 0,
            corpus_size: 100_000,
            independent: false,
            repeat_caption: false,
            consistency: true,
            adherence: true,
            fidelity: true,
            slots: Slot::ALL.to_vec(),
        }
    }
}

impl EvalConfig {
    fn dataset(&self, image_size: usize) -> Result<Dataset> {
        Dataset::new(
            DatasetConfig { image_size, max_group: self.group_size, corpus_size: self.corpus_size, seed: self.seed },
            self.split,
        )
    }
}

struct EvalGroup<S: Scalar> {
    real: GroupSample<S>,
    captions: Vec<Vec<usize>>,
    generated: Vec<Tensor<S>>,
}

/// Real groups, the captions sampled from, and the generated members.
fn sample_eval_groups<S: Scalar>(model: &GdtModel<S>, cfg: &EvalConfig) -> Result<Vec<EvalGroup<S>>> {
    let data = cfg.dataset(model.config().image_size)?;
    (0..cfg.groups)
        .map(|g| {
            let real: GroupSample<S> = data.get_with_size(g as u64, cfg.group_size);
            let captions =
                if cfg.repeat_caption { vec![real.captions[0].clone(); real.n()] } else { real.captions.clone() };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(g as u64);
            let generated = if cfg.independent {
                let mut out = Vec::with_capacity(real.n());
                for c in &captions {
                    out.extend(unconditional_sample(model, std::slice::from_ref(c), cfg.sampler, &mut rng)?);
                }
                out
            } else {
                unconditional_sample(model, &captions, cfg.sampler, &mut rng)?
            };
            Ok(EvalGroup { real, captions, generated })
        })
        .collect()
}

/// Samples `cfg.groups` groups captioned like real groups of `cfg.split` and
/// scores them.
pub fn evaluate<S: Scalar>(model: &GdtModel<S>, cfg: &EvalConfig) -> Result<EvalReport> {
    if cfg.groups == 0 || cfg.group_size == 0 {
        return Err(Error::contract("evaluation needs at least one group of one member"));
    }
    let groups = sample_eval_groups(model, cfg)?;
    let mut report = EvalReport { groups: groups.len(), ..Default::default() };
    if cfg.consistency {
        let mut total = 0.0;
        for g in &groups {
            let c = content_consistency(&g.generated, &vec![false; g.generated.len()], Exclusion::default())?;
            total += c.score;
            report.image_pairs += c.pairs;
        }
        report.content_consistency = Some(total / groups.len() as f64);
    }
    if cfg.adherence {
        let mut hits = 0.0;
        for g in &groups {
            let a = prompt_adherence(&g.generated, &g.captions, &vec![false; g.generated.len()], &cfg.slots)?;
            hits += a.accuracy * a.members as f64;
            report.text_pairs += a.members;
        }
        report.prompt_adherence = Some(hits / report.text_pairs as f64);
    }
    if cfg.fidelity {
        let feats = |imgs: &mut dyn Iterator<Item = &Tensor<S>>| imgs.map(image_features).collect::<Result<Vec<_>>>();
        let gen = feats(&mut groups.iter().flat_map(|g| g.generated.iter()))?;
        let real = feats(&mut groups.iter().flat_map(|g| g.real.images.iter()))?;
        report.fidelity_mmd = Some(fidelity_mmd(&gen, &real)?);
    }
    Ok(report)
}

impl TrainConfig {
    /// Quality-tuning stage after `base`: quality split, a tenth of the
    /// learning rate, `steps` steps with a tenth of them as warmup.
    pub fn finetune_from(base: &TrainConfig, steps: u64) -> TrainConfig {
        TrainConfig { steps, lr: base.lr * 0.1, warmup: steps / 10, split: Split::Quality, ..base.clone() }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome<S: Scalar> {
    pub checkpoint: Checkpoint<S>,
    pub before: EvalReport,
    pub after: EvalReport,
}

/// A second training stage from `base` with fresh optimizer moments.
/// Writes the checkpoint, `train.log` and both reports under `out` when
/// given.
pub fn finetune<S: Scalar>(
    base: &Checkpoint<S>,
    cfg: TrainConfig,
    eval: &EvalConfig,
    out: Option<&Path>,
    force: bool,
) -> Result<FinetuneOutcome<S>> {
    base.check_hash(&cfg.model, force)?;
    base.params.check_compatible(&cfg.model)?;
    let model = GdtModel::new(cfg.model.clone(), base.params.clone())?;
    let before = evaluate(&model, eval)?;
    let mut trainer = Trainer::from_params(cfg, model)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let log = dir.join("train.log");
        if log.exists() {
            fs::remove_file(&log).map_err(|e| Error::io(&log, e))?;
        }
        trainer.log_to(log);
    }
    trainer.run(out)?;
    let after = evaluate(trainer.model(), eval)?;
    if let Some(dir) = out {
        for (name, r) in [("eval_before", &before), ("eval_after", &after)] {
            write_text(&dir.join(format!("{name}.txt")), &r.to_text())?;
            write_text(&dir.join(format!("{name}.json")), &r.to_json())?;
        }
    }
    Ok(FinetuneOutcome { checkpoint: trainer.checkpoint(), before, after })
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct SampleRequest<S: Scalar> {
    pub captions: Vec<Vec<usize>>,
    pub refs: ReferenceSpec<S>,
    pub mode: SampleMode,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

/// Samples one group and writes `member_<i>.ppm`, `member_<i>.png` and
/// `manifest.txt` under `out`.
pub fn sample_to_disk<S: Scalar>(model: &GdtModel<S>, req: &SampleRequest<S>, out: &Path) -> Result<Vec<Tensor<S>>> {
    let n = req.captions.len();
    if n == 0 || n > model.config().max_group {
        return Err(Error::contract(format!("{n} captions for a model with max_group {}", model.config().max_group)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let images = if req.mode == SampleMode::None && req.refs.m() == 0 {
        unconditional_sample(model, &req.captions, req.sampler, &mut rng)?
    } else {
        conditional_sample(model, &req.captions, &req.refs, req.mode, req.sampler, &mut rng)?
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut manifest = format!(
        "seed={}\nmode={}\nsteps={}\nguidance={}\nconfig_hash={}\n",
        req.seed,
        req.mode,
        req.sampler.steps,
        req.sampler.guidance,
        model.config().hash()
    );
    manifest.push_str("member\treference\tcaption\tdescription\tfiles\n");
    for (i, img) in images.iter().enumerate() {
        let files = [format!("member_{i}.ppm"), format!("member_{i}.png")];
        for f in &files {
            write_image(&out.join(f), img)?;
        }
        let cap: Vec<String> = req.captions[i].iter().map(usize::to_string).collect();
        let _ = writeln!(
            manifest,
            "{i}\t{}\t{}\t{}\t{}",
            u8::from(req.refs.is_reference(i)),
            cap.join(","),
            describe(&req.captions[i]),
            files.join(",")
        );
    }
    write_text(&out.join("manifest.txt"), &manifest)?;
    Ok(images)
}

/// Parameter table plus the stored and closed-form totals.
pub fn inspect_manifest<S: Scalar>(params: &ParamStore<S>, cfg: &ModelConfig) -> String {
    let mut s = String::from("name\tshape\tnumel\n");
    for (name, t) in params.names().iter().zip(params.tensors()) {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let _ = writeln!(s, "{name}\t{}\t{}", shape.join(","), t.numel());
    }
    let _ = writeln!(s, "total\t\t{}", params.numel());
    let _ = writeln!(s, "closed_form\t\t{}", param_count(cfg));
    s
}

/// Joint-sequence attention mask for a group whose members have
/// `img_tokens` image tokens and `ctx_tokens[i]` context tokens.
pub fn inspect_mask(img_tokens: usize, ctx_tokens: &[usize]) -> Result<String> {
    let layout = GroupLayout::new(img_tokens, ctx_tokens.to_vec())?;
    Ok(build_group_mask(&layout).to_grid())
}

pub fn inspect_schedule(kind: ScheduleKind, steps: usize) -> Result<String> {
    Ok(build_schedule(kind, steps)?.dump())
}
