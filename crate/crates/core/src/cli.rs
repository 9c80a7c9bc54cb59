//! Command-line surface. Exit codes: 0 success, 1 usage error, 2 runtime
//! failure.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::degrade::{
    crop_divisible, list_pngs, load_unpaired, make_pairs, DegradationKernel, KernelKind,
    PairedDataset,
};
use crate::error::{DrnError, Result};
use crate::eval::evaluate_dirs;
use crate::io::checkpoint::{checkpoint_load, checkpoint_save};
use crate::io::config::RunConfig;
use crate::io::png::{png_read, png_write};
use crate::model::DrnModel;
use crate::train::{adapt_unpaired, train_paired, TrainObserver};

#[derive(Parser)]
#[command(
    name = "drn",
    about = "Closed-loop super-resolution toolkit: train, adapt, infer, evaluate",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags mirroring the config file keys; a `--config` file is applied first,
/// explicit flags override it.
#[derive(Args, Default, Clone)]
struct ConfigArgs {
    /// Config file (key = value with [model]/[train]/[adapt]/[eval] sections).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    reduction: Option<usize>,
    #[arg(long)]
    slope: Option<f64>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    lr_start: Option<f64>,
    #[arg(long)]
    lr_end: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    augment: Option<bool>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    dual_scales: Option<String>,
    #[arg(long)]
    two_phase: Option<bool>,
    #[arg(long)]
    val_every: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    adapt_iterations: Option<u64>,
    #[arg(long)]
    unpaired_batch: Option<usize>,
    #[arg(long)]
    paired_batch: Option<usize>,
    #[arg(long)]
    adapt_lr: Option<f64>,
    #[arg(long)]
    channel: Option<String>,
    #[arg(long)]
    shave: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text =
                    std::fs::read_to_string(path).map_err(|e| DrnError::io(path, e))?;
                RunConfig::parse(&text)?
            }
            None => RunConfig::default(),
        };
        let mut set = |key: &str, value: Option<String>| -> Result<()> {
            if let Some(v) = value {
                cfg.set("", key, &v)?;
            }
            Ok(())
        };
        set("model.preset", self.preset.clone())?;
        set("model.scale", self.scale.map(|v| v.to_string()))?;
        set("model.blocks", self.blocks.map(|v| v.to_string()))?;
        set("model.channels", self.channels.map(|v| v.to_string()))?;
        set("model.reduction", self.reduction.map(|v| v.to_string()))?;
        set("model.slope", self.slope.map(|v| v.to_string()))?;
        set("train.iterations", self.iterations.map(|v| v.to_string()))?;
        set("train.batch", self.batch.map(|v| v.to_string()))?;
        set("train.patch", self.patch.map(|v| v.to_string()))?;
        set("train.lr_start", self.lr_start.map(|v| v.to_string()))?;
        set("train.lr_end", self.lr_end.map(|v| v.to_string()))?;
        set("train.seed", self.seed.map(|v| v.to_string()))?;
        set("train.augment", self.augment.map(|v| v.to_string()))?;
        set("train.lambda", self.lambda.map(|v| v.to_string()))?;
        set("train.dual_scales", self.dual_scales.clone())?;
        set("train.two_phase", self.two_phase.map(|v| v.to_string()))?;
        set("train.val_every", self.val_every.map(|v| v.to_string()))?;
        set(
            "train.checkpoint_every",
            self.checkpoint_every.map(|v| v.to_string()),
        )?;
        set(
            "adapt.iterations",
            self.adapt_iterations.map(|v| v.to_string()),
        )?;
        set(
            "adapt.unpaired_batch",
            self.unpaired_batch.map(|v| v.to_string()),
        )?;
        set(
            "adapt.paired_batch",
            self.paired_batch.map(|v| v.to_string()),
        )?;
        set("adapt.lr", self.adapt_lr.map(|v| v.to_string()))?;
        set("eval.channel", self.channel.clone())?;
        set("eval.shave", self.shave.clone())?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train on paired LR/HR data with the closed-loop objective.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory of HR PNG images.
        #[arg(long)]
        hr: PathBuf,
        /// Directory of matching LR PNG images; omitted means LR is
        /// generated from HR with --kernel.
        #[arg(long)]
        lr: Option<PathBuf>,
        /// Degradation kernel for generated pairs: bicubic, nearest, or bd.
        #[arg(long, default_value = "bicubic")]
        kernel: String,
        /// Hold out the last N images (by sorted name) for validation PSNR.
        #[arg(long, default_value_t = 0)]
        holdout: usize,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Metrics log path (default: <out>.log).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Adapt a pretrained model to unpaired LR data (two-phase updates).
    Adapt {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory of unpaired LR PNG images.
        #[arg(long)]
        unpaired: PathBuf,
        /// Directory of HR images for the paired synthetic branch.
        #[arg(long)]
        hr: PathBuf,
        /// Kernel generating the paired synthetic data.
        #[arg(long, default_value = "bicubic")]
        kernel: String,
        /// Pretrained checkpoint to start from.
        #[arg(long, group = "init", required = true)]
        pretrained: Option<PathBuf>,
        /// Adapt from random initialization instead of a checkpoint.
        #[arg(long, group = "init")]
        scratch: bool,
        /// Optional validation LR directory (same degradation as unpaired).
        #[arg(long, requires = "val_hr")]
        val_lr: Option<PathBuf>,
        /// Optional validation HR directory matching --val-lr by filename.
        #[arg(long)]
        val_hr: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Super-resolve a directory of LR images.
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input LR directory.
        #[arg(long = "in")]
        input: PathBuf,
        /// Output SR directory (created if missing).
        #[arg(long)]
        out: PathBuf,
    },
    /// Score an output directory against a reference directory.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Reference (HR) directory.
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Directory of outputs to score; with --checkpoint, inference
        /// results are written here first.
        #[arg(long)]
        out: PathBuf,
        /// Run inference with this checkpoint before scoring.
        #[arg(long, requires = "input")]
        checkpoint: Option<PathBuf>,
        /// LR input directory for --checkpoint inference.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// Also write the CSV report here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Degrade a directory of HR images into LR images.
    Degrade {
        /// Kernel: bicubic, nearest, or bd.
        #[arg(long)]
        kernel: String,
        #[arg(long)]
        scale: usize,
        /// BD blur size (odd).
        #[arg(long, default_value_t = crate::degrade::BD_DEFAULT_SIZE)]
        size: usize,
        /// BD blur standard deviation.
        #[arg(long, default_value_t = crate::degrade::BD_DEFAULT_SIGMA)]
        sigma: f64,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print parameter counts and multiply-accumulate cost.
    Count {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// LR input height for the MAdds column.
        #[arg(long, default_value_t = 48)]
        h: usize,
        /// LR input width for the MAdds column.
        #[arg(long, default_value_t = 48)]
        w: usize,
    },
    /// Finite-difference audit of all differentiable ops.
    Gradcheck {
        /// Random instances per op.
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Runs the CLI; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

struct RunObserver {
    log: std::io::BufWriter<std::fs::File>,
    stdout_every: u64,
    lines: u64,
    checkpoint_base: PathBuf,
    meta: String,
}

impl RunObserver {
    fn create(log_path: &Path, header: &str, checkpoint_base: &Path, meta: &str) -> Result<Self> {
        let file = std::fs::File::create(log_path).map_err(|e| DrnError::io(log_path, e))?;
        let mut log = std::io::BufWriter::new(file);
        for line in header.lines() {
            writeln!(log, "# {line}").map_err(|e| DrnError::io(log_path, e))?;
        }
        Ok(RunObserver {
            log,
            stdout_every: 50,
            lines: 0,
            checkpoint_base: checkpoint_base.to_path_buf(),
            meta: meta.to_string(),
        })
    }
}

impl TrainObserver<f32> for RunObserver {
    fn on_log(&mut self, line: &str) {
        let _ = writeln!(self.log, "{line}");
        if self.lines % self.stdout_every == 0 {
            println!("{line}");
        }
        self.lines += 1;
    }

    fn on_checkpoint(&mut self, iteration: u64, model: &DrnModel<f32>) -> Result<()> {
        let stem = self
            .checkpoint_base
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "checkpoint".into());
        let path = self
            .checkpoint_base
            .with_file_name(format!("{stem}-it{iteration}.ckpt"));
        let meta = format!("{}iteration = {iteration}\n", self.meta);
        checkpoint_save(model, &meta, &path)
    }
}

/// Pairs LR and HR directories by filename; every LR image must be exactly
/// `scale` times smaller than its HR counterpart.
fn pair_directories(lr_dir: &Path, hr_dir: &Path, scale: usize) -> Result<PairedDataset<f32>> {
    let hr_files = list_pngs(hr_dir)?;
    let mut pairs = Vec::new();
    let mut warnings = Vec::new();
    for hr_path in hr_files {
        let name = hr_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let lr_path = lr_dir.join(&name);
        if !lr_path.exists() {
            warnings.push(format!("{name}: no LR counterpart"));
            continue;
        }
        let hr = crop_divisible(&png_read(&hr_path)?, scale);
        let lr = png_read(&lr_path)?;
        let [_, _, hh, hw] = hr.shape();
        let [_, _, lh, lw] = lr.shape();
        if (lh * scale, lw * scale) != (hh, hw) {
            return Err(DrnError::InvalidArgument(format!(
                "{name}: LR ({lh}x{lw}) is not 1/{scale} of HR ({hh}x{hw})"
            )));
        }
        pairs.push(crate::degrade::ImagePair { name, lr, hr });
    }
    if pairs.is_empty() {
        return Err(DrnError::InvalidArgument(format!(
            "no LR/HR pairs between {} and {}",
            lr_dir.display(),
            hr_dir.display()
        )));
    }
    Ok(PairedDataset { pairs, warnings })
}

fn split_holdout(data: PairedDataset<f32>, holdout: usize) -> (PairedDataset<f32>, Option<PairedDataset<f32>>) {
    if holdout == 0 || holdout >= data.pairs.len() {
        return (data, None);
    }
    let mut pairs = data.pairs;
    let val_pairs = pairs.split_off(pairs.len() - holdout);
    (
        PairedDataset {
            pairs,
            warnings: data.warnings,
        },
        Some(PairedDataset {
            pairs: val_pairs,
            warnings: Vec::new(),
        }),
    )
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Train {
            cfg,
            hr,
            lr,
            kernel,
            holdout,
            out,
            log,
        } => {
            let run_cfg = cfg.resolve()?;
            let echo = run_cfg.echo()?;
            let model_cfg = run_cfg.model_config()?;
            let seed = run_cfg.resolve_seed();
            let data = match &lr {
                Some(lr_dir) => pair_directories(lr_dir, &hr, model_cfg.scale)?,
                None => {
                    let kind: KernelKind = kernel.parse()?;
                    make_pairs(&hr, &DegradationKernel::new(kind, model_cfg.scale)?)?
                }
            };
            for w in &data.warnings {
                eprintln!("warning: {w}");
            }
            let (train_set, val_set) = split_holdout(data, holdout);
            let mut model = DrnModel::<f32>::build(model_cfg, seed)?;
            let log_path = log.unwrap_or_else(|| out.with_extension("log"));
            let mut observer = RunObserver::create(&log_path, &echo, &out, &echo)?;
            let report = train_paired(
                &mut model,
                &train_set,
                val_set.as_ref(),
                &run_cfg.train_config(),
                &run_cfg.loss_config(),
                &mut observer,
            )?;
            drop(observer);
            let meta = format!("{echo}iteration = {}\n", run_cfg.train_config().iterations);
            checkpoint_save(&model, &meta, &out)?;
            println!(
                "trained {} iterations: total {:.6} -> {:.6}; checkpoint {}",
                run_cfg.train_config().iterations,
                report.initial_total,
                report.final_total,
                out.display()
            );
            Ok(0)
        }
        Command::Adapt {
            cfg,
            unpaired,
            hr,
            kernel,
            pretrained,
            scratch,
            val_lr,
            val_hr,
            out,
            log,
        } => {
            let run_cfg = cfg.resolve()?;
            let echo = run_cfg.echo()?;
            let model_cfg = run_cfg.model_config()?;
            let seed = run_cfg.resolve_seed();
            let mut model = DrnModel::<f32>::build(model_cfg, seed)?;
            if let Some(ckpt) = &pretrained {
                checkpoint_load(ckpt, &mut model)?;
            } else if !scratch {
                return Err(DrnError::Config(
                    "adaptation needs --pretrained <ckpt> or --scratch".into(),
                ));
            }
            let kind: KernelKind = kernel.parse()?;
            let paired = make_pairs(&hr, &DegradationKernel::new(kind, model_cfg.scale)?)?;
            let unpaired_set = load_unpaired(&unpaired)?;
            let val_set = match (&val_lr, &val_hr) {
                (Some(lr_dir), Some(hr_dir)) => {
                    Some(pair_directories(lr_dir, hr_dir, model_cfg.scale)?)
                }
                _ => None,
            };
            let log_path = log.unwrap_or_else(|| out.with_extension("log"));
            let mut observer = RunObserver::create(&log_path, &echo, &out, &echo)?;
            let adapt_cfg = run_cfg.adapt_config();
            let report = adapt_unpaired(
                &mut model,
                &unpaired_set,
                &paired,
                val_set.as_ref(),
                &adapt_cfg,
                &run_cfg.loss_config(),
                &mut observer,
            )?;
            drop(observer);
            let meta = format!("{echo}iteration = {}\n", adapt_cfg.iterations);
            checkpoint_save(&model, &meta, &out)?;
            println!(
                "adapted {} iterations (rho = {:.1}%): total {:.6} -> {:.6}; checkpoint {}",
                adapt_cfg.iterations,
                100.0 * adapt_cfg.rho(),
                report.initial_total,
                report.final_total,
                out.display()
            );
            Ok(0)
        }
        Command::Infer {
            cfg,
            checkpoint,
            input,
            out,
        } => {
            let run_cfg = cfg.resolve()?;
            let mut model = DrnModel::<f32>::build(run_cfg.model_config()?, run_cfg.resolve_seed())?;
            checkpoint_load(&checkpoint, &mut model)?;
            run_inference(&model, &input, &out)?;
            Ok(0)
        }
        Command::Eval {
            cfg,
            reference,
            out,
            checkpoint,
            input,
            csv,
        } => {
            let run_cfg = cfg.resolve()?;
            if let (Some(ckpt), Some(lr_dir)) = (&checkpoint, &input) {
                let mut model =
                    DrnModel::<f32>::build(run_cfg.model_config()?, run_cfg.resolve_seed())?;
                checkpoint_load(ckpt, &mut model)?;
                run_inference(&model, lr_dir, &out)?;
            }
            let report = evaluate_dirs(&out, &reference, &run_cfg.eval_protocol())?;
            print!("{}", report.to_table());
            if let Some(csv_path) = csv {
                std::fs::write(&csv_path, report.to_csv())
                    .map_err(|e| DrnError::io(&csv_path, e))?;
            }
            Ok(0)
        }
        Command::Degrade {
            kernel,
            scale,
            size,
            sigma,
            input,
            out,
        } => {
            let kind: KernelKind = kernel.parse()?;
            let kind = match kind {
                KernelKind::BdGaussian { .. } => KernelKind::BdGaussian { size, sigma },
                other => other,
            };
            let degradation = DegradationKernel::new(kind, scale)?;
            std::fs::create_dir_all(&out).map_err(|e| DrnError::io(&out, e))?;
            let files = list_pngs(&input)?;
            if files.is_empty() {
                return Err(DrnError::InvalidArgument(format!(
                    "no PNG images in {}",
                    input.display()
                )));
            }
            let mut written = 0usize;
            for path in files {
                let name = path.file_name().expect("listed file");
                match png_read(&path) {
                    Ok(img) => {
                        let hr = crop_divisible(&img, scale);
                        let lr = degradation.apply(&hr)?;
                        png_write(&lr, &out.join(name))?;
                        written += 1;
                    }
                    Err(e) => eprintln!("warning: skipping {}: {e}", name.to_string_lossy()),
                }
            }
            println!("degraded {written} images into {}", out.display());
            Ok(0)
        }
        Command::Count { cfg, h, w } => {
            let run_cfg = cfg.resolve()?;
            let model_cfg = run_cfg.model_config()?;
            let model = DrnModel::<f32>::build(model_cfg, 0)?;
            let madds = model.count_madds(h, w);
            println!(
                "scale x{}  blocks {}  channels {}",
                model_cfg.scale, model_cfg.blocks, model_cfg.channels
            );
            println!(
                "params: primal {}  dual {}  total {}  ({:.2}M)",
                model.count_primal_params(),
                model.count_dual_params(),
                model.count_params(),
                model.count_params() as f64 / 1e6
            );
            println!("madds @ {h}x{w} LR input: {madds}  ({:.2}G)", madds as f64 / 1e9);
            Ok(0)
        }
        Command::Gradcheck { instances, seed } => {
            let report = crate::gradcheck::run_audit(instances, seed)?;
            print!("{}", report.render());
            Ok(if report.pass() { 0 } else { 2 })
        }
    }
}

fn run_inference(model: &DrnModel<f32>, input: &Path, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| DrnError::io(out, e))?;
    let files = list_pngs(input)?;
    if files.is_empty() {
        return Err(DrnError::InvalidArgument(format!(
            "no PNG images in {}",
            input.display()
        )));
    }
    for path in files {
        let name = path.file_name().expect("listed file");
        let lr = png_read(&path)?;
        let sr = model.infer(&lr)?;
        png_write(&sr, &out.join(name))?;
        println!("sr {}", name.to_string_lossy());
    }
    Ok(())
}
