//! `gdt`: train, fine-tune, sample, evaluate and inspect group diffusion
//! transformers on the synthetic shape groups.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use gdt_core::conditioning::{ReferenceSpec, SampleMode, SamplerConfig};
use gdt_core::data::{read_image, Slot};
use gdt_core::diffusion::ScheduleKind;
use gdt_core::metrics::EvalReport;
use gdt_core::model::GdtModel;
use gdt_core::train::{
    evaluate, finetune, inspect_manifest, inspect_mask, inspect_schedule, sample_to_disk, train, Checkpoint,
    EvalConfig, SampleRequest, TrainConfig, Trainer,
};

type Ckpt = Checkpoint<f32>;

#[derive(Parser)]
#[command(name = "gdt", version, about = "Group diffusion transformers on synthetic shape groups")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch, or continue a checkpoint with --resume.
    Train(TrainArgs),
    /// Quality-tune a checkpoint on the quality split.
    Finetune(FinetuneArgs),
    /// Sample one group to image files.
    Sample(SampleArgs),
    /// Sample held-out-captioned groups and write an evaluation report.
    Eval(EvalArgs),
    /// Print a parameter manifest, an attention mask or a noise schedule.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// key=value training config; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from the checkpoint already in --out.
    #[arg(long)]
    resume: bool,
    /// Accept a checkpoint whose config hash differs.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalOpts {
    #[arg(long, default_value_t = 200)]
    groups: usize,
    #[arg(long, default_value_t = 2)]
    group_size: usize,
    #[arg(long, default_value = "heldout")]
    split: String,
    /// Sampling steps.
    #[arg(long, default_value_t = 50)]
    sample_steps: usize,
    #[arg(long, default_value_t = 1.0)]
    guidance: f64,
    /// Comma-separated subset of consistency,adherence,fidelity.
    #[arg(long, default_value = "consistency,adherence,fidelity")]
    metrics: String,
    /// Sample each member alone instead of jointly.
    #[arg(long)]
    independent: bool,
    /// Give every member the first member's caption.
    #[arg(long)]
    repeat_caption: bool,
    /// Score only the shared slots (shape, palette, style).
    #[arg(long)]
    shared_slots: bool,
}

impl EvalOpts {
    fn to_config(&self, seed: u64) -> Result<EvalConfig> {
        let mut cfg = EvalConfig {
            groups: self.groups,
            group_size: self.group_size,
            split: self.split.parse()?,
            sampler: SamplerConfig { steps: self.sample_steps, guidance: self.guidance },
            seed,
            independent: self.independent,
            repeat_caption: self.repeat_caption,
            consistency: false,
            adherence: false,
            fidelity: false,
            slots: if self.shared_slots { Slot::SHARED.to_vec() } else { Slot::ALL.to_vec() },
            ..Default::default()
        };
        for m in self.metrics.split(',').map(str::trim).filter(|m| !m.is_empty()) {
            match m {
                "consistency" => cfg.consistency = true,
                "adherence" => cfg.adherence = true,
                "fidelity" => cfg.fidelity = true,
                other => bail!("unknown metric {other}"),
            }
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct FinetuneArgs {
    /// Base checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Optional key=value overrides applied to the derived fine-tune config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    steps: u64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    eval: EvalOpts,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    None,
    Inpaint,
    Sdedit,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// One caption per member, `;`-separated; tokens `,`-separated.
    #[arg(long)]
    captions: String,
    #[arg(long, value_enum, default_value_t = Mode::None)]
    mode: Mode,
    /// Reference images as `member:file` pairs, `,`-separated.
    #[arg(long)]
    refs: Option<String>,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 1.0)]
    guidance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    eval: EvalOpts,
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Manifest,
    Mask,
    Schedule,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(value_enum)]
    target: Target,
    /// Checkpoint directory (manifest).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// key=value config to inspect without a checkpoint (manifest).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Image tokens per member (mask).
    #[arg(long, default_value_t = 1)]
    img_tokens: usize,
    /// Context tokens per member, `,`-separated (mask).
    #[arg(long, default_value = "1,1")]
    ctx: String,
    /// ddpm-linear or flow-linear (schedule).
    #[arg(long, default_value = "ddpm-linear")]
    kind: String,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(a) => cmd_train(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Inspect(a) => cmd_inspect(a),
    }
}

fn load_config(path: Option<&Path>, base: &TrainConfig) -> Result<TrainConfig> {
    match path {
        None => Ok(base.clone()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let kv = gdt_core::kv::KeyValues::parse(&text)?;
            Ok(TrainConfig::from_kv(&kv, base)?)
        }
    }
}

fn load_checkpoint(dir: &Path, force: bool) -> Result<Ckpt> {
    Checkpoint::load(dir, force).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn load_model(dir: &Path, force: bool) -> Result<GdtModel<f32>> {
    let ckpt = load_checkpoint(dir, force)?;
    Ok(GdtModel::new(ckpt.config.model, ckpt.params)?)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref(), &TrainConfig::default())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    cfg.validate()?;
    if a.resume {
        let ckpt = load_checkpoint(&a.out, a.force)?;
        let mut trainer = Trainer::resume(cfg, ckpt, a.force)?;
        trainer.log_to(a.out.join("train.log"));
        trainer.run(Some(&a.out))?;
        println!("resumed to step {} in {}", trainer.step_count(), a.out.display());
    } else {
        let ckpt: Ckpt = train(cfg, &a.out)?;
        println!("trained {} steps into {}", ckpt.state.step, a.out.display());
    }
    Ok(())
}

fn print_report(label: &str, r: &EvalReport) {
    println!("# {label}");
    print!("{}", r.to_text());
}

fn cmd_finetune(a: FinetuneArgs) -> Result<()> {
    let base = load_checkpoint(&a.checkpoint, a.force)?;
    let mut cfg = load_config(a.config.as_deref(), &TrainConfig::finetune_from(&base.config, a.steps))?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let eval = a.eval.to_config(cfg.seed)?;
    let outcome = finetune(&base, cfg, &eval, Some(&a.out), a.force)?;
    print_report("before", &outcome.before);
    print_report("after", &outcome.after);
    Ok(())
}

fn parse_tokens(list: &str) -> Result<Vec<usize>> {
    list.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<usize>().with_context(|| format!("bad token {t:?}")))
        .collect()
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let model = load_model(&a.checkpoint, a.force)?;
    let captions = a.captions.split(';').map(parse_tokens).collect::<Result<Vec<_>>>()?;
    let n = captions.len();
    let mut flags = vec![false; n];
    let mut images = Vec::new();
    for pair in a.refs.iter().flat_map(|r| r.split(',')).map(str::trim).filter(|p| !p.is_empty()) {
        let (idx, file) = pair.split_once(':').with_context(|| format!("reference {pair:?} is not member:file"))?;
        let idx: usize = idx.parse().with_context(|| format!("bad member index {idx:?}"))?;
        if idx >= n {
            bail!("reference member {idx} outside a group of {n}");
        }
        flags[idx] = true;
        images.push((idx, read_image::<f32>(Path::new(file))?));
    }
    let refs = if images.is_empty() {
        ReferenceSpec::none(n)
    } else {
        let mut spec = ReferenceSpec::from_flags(flags)?;
        for (i, img) in images {
            spec.attach(i, img)?;
        }
        spec
    };
    let mode = match a.mode {
        Mode::None => SampleMode::None,
        Mode::Inpaint => SampleMode::Inpaint,
        Mode::Sdedit => SampleMode::Sdedit,
    };
    let req = SampleRequest {
        captions,
        refs,
        mode,
        sampler: SamplerConfig { steps: a.steps, guidance: a.guidance },
        seed: a.seed,
    };
    sample_to_disk(&model, &req, &a.out)?;
    println!("wrote {n} members to {}", a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.checkpoint, a.force)?;
    let cfg = a.eval.to_config(a.seed)?;
    let report = evaluate(&model, &cfg)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join("eval.txt"), report.to_text())?;
    fs::write(a.out.join("eval.json"), report.to_json())?;
    print!("{}", report.to_text());
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let text = match a.target {
        Target::Manifest => match (&a.checkpoint, &a.config) {
            (Some(dir), _) => {
                let ckpt = load_checkpoint(dir, true)?;
                inspect_manifest(&ckpt.params, &ckpt.config.model)
            }
            (None, Some(path)) => {
                let cfg = load_config(Some(path), &TrainConfig::default())?;
                let params = gdt_core::model::ParamStore::<f32>::init(&cfg.model, cfg.seed)?;
                inspect_manifest(&params, &cfg.model)
            }
            (None, None) => bail!("inspect manifest needs --checkpoint or --config"),
        },
        Target::Mask => inspect_mask(a.img_tokens, &parse_tokens(&a.ctx)?)?,
        Target::Schedule => inspect_schedule(a.kind.parse::<ScheduleKind>()?, a.steps)?,
    };
    print!("{text}");
    Ok(())
}
