use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mdsm::config::RunConfig;
use mdsm::dataset::{Dataset, DatasetConfig, Split, SplitSizes};
use mdsm::pipeline;
use mdsm::types::Image;

#[derive(Debug, Parser)]
#[command(name = "mdsm", version, about = "Instruction-conditioned object segmentation with diffusion-feature refinement")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Datagen(DatagenArgs),
    /// Train the crossmodal encoder and segmentation head.
    TrainStage1(Stage1Args),
    /// Train the noise-prediction UNet.
    TrainDdpm(DdpmArgs),
    /// Train the refinement head on top of frozen stage-1 and denoiser checkpoints.
    TrainStage2(Stage2Args),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Segment one image.
    Infer(InferArgs),
    /// List the worst samples of an evaluation.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct DatagenArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 800)]
    train: usize,
    #[arg(long, default_value_t = 100)]
    val: usize,
    #[arg(long, default_value_t = 100)]
    test: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 2)]
    min_objects: usize,
    #[arg(long, default_value_t = 4)]
    max_objects: usize,
}

#[derive(Debug, Args)]
struct OptimFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Debug, Args)]
struct Stage1Args {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    optim: OptimFlags,
    #[arg(long)]
    c1: Option<usize>,
    #[arg(long)]
    c_clp: Option<usize>,
    /// Disable the global image branch.
    #[arg(long)]
    no_global_branch: bool,
}

#[derive(Debug, Args)]
struct DdpmArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    optim: OptimFlags,
    /// Number of diffusion steps T.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    beta_start: Option<f64>,
    #[arg(long)]
    beta_end: Option<f64>,
}

#[derive(Debug, Args)]
struct Stage2Args {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    stage1: Option<PathBuf>,
    #[arg(long)]
    ddpm: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    optim: OptimFlags,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    /// Comma-separated feature levels, e.g. `0,1,2`.
    #[arg(long, value_delimiter = ',')]
    level_selection: Option<Vec<usize>>,
    #[arg(long)]
    t_infer: Option<usize>,
    #[arg(long)]
    no_clamp: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Evaluate stage 1 only.
    #[arg(long)]
    no_diffusion: bool,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    instruction: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    no_diffusion: bool,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    eval: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    worst: usize,
}

fn apply_optim(flags: &OptimFlags, epochs: &mut usize, batch: &mut usize, lr: &mut f64) {
    if let Some(e) = flags.epochs {
        *epochs = e;
    }
    if let Some(b) = flags.batch_size {
        *batch = b;
    }
    if let Some(l) = flags.lr {
        *lr = l;
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let or = |p: &Option<PathBuf>, d: &Path| p.clone().unwrap_or_else(|| d.to_path_buf());

    match cli.command {
        Command::Datagen(a) => {
            let out = or(&a.out, &cfg.paths.data_dir);
            let dc = DatasetConfig {
                image_size: a.size,
                min_objects: a.min_objects,
                max_objects: a.max_objects,
                sizes: SplitSizes {
                    train: a.train,
                    val: a.val,
                    test: a.test,
                },
                seed: cfg.seed,
                ..Default::default()
            };
            let ds = Dataset::generate(dc)?;
            ds.save(&out)?;
            println!("wrote {} samples and {} vocabulary entries to {}", dc.sizes.total(), ds.vocab.len(), out.display());
        }
        Command::TrainStage1(a) => {
            let s = &mut cfg.stage1;
            apply_optim(&a.optim, &mut s.epochs, &mut s.batch_size, &mut s.lr);
            if let Some(c) = a.c1 {
                cfg.model.c1 = c;
            }
            if let Some(c) = a.c_clp {
                cfg.model.c_clp = c;
            }
            if a.no_global_branch {
                cfg.model.use_global_branch = false;
            }
            cfg.validate()?;
            let data = or(&a.data, &cfg.paths.data_dir);
            let out = or(&a.out, &cfg.paths.stage1_dir);
            let r = pipeline::run_stage1(&cfg, &data, &out)?;
            println!(
                "stage 1: {} steps, final loss {}, best val mIoU {} (epoch {})",
                r.steps,
                r.final_loss().map_or("-".into(), |l| format!("{l:.4}")),
                r.best_val_miou.map_or("-".into(), |m| format!("{m:.4}")),
                r.best_epoch
            );
        }
        Command::TrainDdpm(a) => {
            let d = &mut cfg.diffusion;
            apply_optim(&a.optim, &mut d.epochs, &mut d.batch_size, &mut d.lr);
            if let Some(t) = a.steps {
                d.steps = t;
                d.t_infer = d.t_infer.min(t);
            }
            if let Some(b) = a.beta_start {
                d.beta_start = b;
            }
            if let Some(b) = a.beta_end {
                d.beta_end = b;
            }
            cfg.validate()?;
            let data = or(&a.data, &cfg.paths.data_dir);
            let out = or(&a.out, &cfg.paths.ddpm_dir);
            let r = pipeline::run_ddpm(&cfg, &data, &out)?;
            println!(
                "denoiser: {} steps, final loss {}",
                r.steps,
                r.epoch_losses.last().map_or("-".into(), |l| format!("{l:.4}"))
            );
        }
        Command::TrainStage2(a) => {
            let s = &mut cfg.stage2;
            apply_optim(&a.optim, &mut s.epochs, &mut s.batch_size, &mut s.lr);
            if let Some(p) = a.patience {
                s.patience = p;
            }
            if let Some(w) = a.warmup_epochs {
                s.warmup_epochs = w;
            }
            if let Some(l) = a.level_selection {
                s.level_selection = l;
            }
            if a.no_clamp {
                s.clamp_probability = false;
            }
            if let Some(t) = a.t_infer {
                cfg.diffusion.t_infer = t;
            }
            let data = or(&a.data, &cfg.paths.data_dir);
            let stage1 = or(&a.stage1, &cfg.paths.stage1_dir);
            let ddpm = or(&a.ddpm, &cfg.paths.ddpm_dir);
            let out = or(&a.out, &cfg.paths.stage2_dir);
            let r = pipeline::run_stage2(&cfg, &data, &stage1, &ddpm, &out)?;
            println!(
                "stage 2: {} iterations, best held-out MAE {:.4} at iteration {}{}",
                r.val_losses.len() - 1,
                r.best_val_loss,
                r.best_iteration,
                r.stopped_at.map_or(String::new(), |s| format!(", early stop at {s}"))
            );
        }
        Command::Eval(a) => {
            let data = or(&a.data, &cfg.paths.data_dir);
            let out = or(&a.out, &cfg.paths.eval_dir);
            let r = pipeline::run_eval(&a.checkpoint, &data, a.split, &out, !a.no_diffusion)?;
            print!("stage 1\n{}", r.stage1.summary());
            if let Some(s2) = &r.stage2 {
                print!("stage 2\n{}", s2.summary());
            }
        }
        Command::Infer(a) => {
            let (model, vocab, has_stage2) = pipeline::load_model(&a.checkpoint)?;
            let diffusion = !a.no_diffusion;
            if diffusion && !has_stage2 {
                bail!("{} is not a stage-2 checkpoint; pass --no-diffusion", a.checkpoint.display());
            }
            let image = Image::load_png(&a.image)?;
            let r = pipeline::infer(&model, &vocab, &image, &a.instruction, diffusion)?;
            std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
            r.p_it.save_png(&a.out.join("prob_stage1.png"))?;
            r.p_it.binarize().save_png(&a.out.join("mask_stage1.png"))?;
            if let Some(p) = &r.p_diff {
                p.save_png(&a.out.join("prob_stage2.png"))?;
            }
            r.mask.save_png(&a.out.join("mask.png"))?;
            println!("foreground pixels: {}", r.mask.count());
        }
        Command::Report(a) => {
            let dir = or(&a.eval, &cfg.paths.eval_dir);
            let r = pipeline::run_report(&dir, a.worst)?;
            print!("{}", r.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mdsm: {e:#}");
            ExitCode::FAILURE
        }
    }
}
