//! Command-line front end.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::degrade::{self, DatasetOptions, DegradationSpec, Kernel2D, GAUSSIAN_SIZE};
use crate::error::{Error, Result};
use crate::eval::{self, MetricReport, MetricRow};
use crate::infer::Model;
use crate::io;
use crate::synth;
use crate::tensor::PadMode;
use crate::train::{self, Checkpoint, HrPool, Stage, TrainConfig, Trainer};

#[derive(Parser, Debug)]
#[command(name = "koalanet", version, about = "Blind super-resolution with kernel-oriented adaptive local adjustment")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Degrade a directory of HR images into an LR dataset
    Degrade(DegradeArgs),
    /// Run one training stage
    Train(TrainArgs),
    /// Super-resolve one LR image
    Infer(InferArgs),
    /// Score SR images against ground truth
    Eval(EvalArgs),
    /// Build a degradation kernel file
    Kernel(KernelArgs),
    /// Write procedural HR images
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct DegradeArgs {
    #[arg(long)]
    pub hr_dir: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub scale: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, requires_all = ["sigma2", "theta"])]
    pub sigma1: Option<f64>,
    #[arg(long, requires_all = ["sigma1", "theta"])]
    pub sigma2: Option<f64>,
    #[arg(long, requires_all = ["sigma1", "sigma2"])]
    pub theta: Option<f64>,
    #[arg(long, value_enum, default_value_t = Pad::Replicate)]
    pub pad: Pad,
    #[arg(long)]
    pub force: bool,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum Pad {
    Replicate,
    Zero,
}

impl From<Pad> for PadMode {
    fn from(p: Pad) -> Self {
        match p {
            Pad::Replicate => PadMode::Replicate,
            Pad::Zero => PadMode::Zero,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub stage: u32,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub init_down: Option<PathBuf>,
    #[arg(long)]
    pub init_up: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub lr: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub scale: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub dump_kernels: Option<PathBuf>,
    /// Ground-truth kernel for the cosine-similarity map
    #[arg(long, requires = "dump_kernels")]
    pub gt_kernel: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub sr_dir: PathBuf,
    #[arg(long)]
    pub gt_dir: PathBuf,
    #[arg(long, requires = "gt_kernel_dir")]
    pub est_kernel_dir: Option<PathBuf>,
    #[arg(long, requires = "est_kernel_dir")]
    pub gt_kernel_dir: Option<PathBuf>,
    #[arg(long)]
    pub scale: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Border crop per side (defaults to the scale)
    #[arg(long)]
    pub crop: Option<usize>,
    #[arg(long, default_value_t = eval::DEFAULT_MAX_SHIFT)]
    pub max_shift: usize,
    /// Also print published full-scale reference figures
    #[arg(long)]
    pub reference: bool,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum KernelKind {
    Gaussian,
    Bicubic,
    Compose,
}

#[derive(Args, Debug)]
pub struct KernelArgs {
    #[arg(long, value_enum)]
    pub make: KernelKind,
    #[arg(long)]
    pub sigma1: Option<f64>,
    #[arg(long)]
    pub sigma2: Option<f64>,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub scale: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub png: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 128)]
    pub width: u32,
    #[arg(long, default_value_t = 128)]
    pub height: u32,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
            let _ = e.print();
            Error::Usage(String::new())
        }
        _ => Error::Usage(e.render().to_string()),
    })?;
    run(cli)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Degrade(a) => cmd_degrade(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Kernel(a) => cmd_kernel(a),
        Command::Synth(a) => {
            synth::write_synth_set(&a.out_dir, a.count, a.seed, a.width, a.height)?;
            log::info!("wrote {} images to {}", a.count, a.out_dir.display());
            Ok(())
        }
    }
}

pub fn cmd_degrade(a: DegradeArgs) -> Result<()> {
    let fixed = match (a.sigma1, a.sigma2, a.theta) {
        (Some(s1), Some(s2), Some(t)) => Some((s1, s2, t)),
        _ => None,
    };
    let rows = degrade::generate_dataset(
        &a.hr_dir,
        &a.out_dir,
        &DatasetOptions {
            scale: a.scale,
            base_seed: a.seed,
            pad: a.pad.into(),
            fixed,
            force: a.force,
        },
    )?;
    log::info!("degraded {} images into {}", rows.len(), a.out_dir.display());
    Ok(())
}

pub fn cmd_train(a: TrainArgs) -> Result<()> {
    let stage = Stage::try_from(a.stage)?;
    let mut cfg = TrainConfig::load(&a.config)?;
    cfg.stage = stage;

    if let Some(path) = &a.resume {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.is_finished() {
            log::info!(
                "{} already finished ({} of {} iterations)",
                path.display(),
                ckpt.iteration,
                ckpt.total_iters
            );
            return Ok(());
        }
        cfg.total_iters = ckpt.total_iters;
        let log_rows = if cfg.log_path().exists() {
            train::read_log(&cfg.log_path())?
        } else {
            Vec::new()
        };
        let pool = HrPool::load(&cfg.hr_dir)?;
        let mut t = Trainer::resume(cfg, pool, ckpt, log_rows)?;
        return t.run(true);
    }

    let mut t = match stage {
        Stage::Joint => {
            let (Some(d), Some(u)) = (&a.init_down, &a.init_up) else {
                return Err(Error::Usage(
                    "stage 3 needs --init-down and --init-up (or --resume)".into(),
                ));
            };
            let down_w = Checkpoint::load(d)?.weights;
            let up_w = Checkpoint::load(u)?.weights;
            let pool = HrPool::load(&cfg.hr_dir)?;
            Trainer::joint(cfg, pool, &down_w, &up_w)?
        }
        _ => {
            if a.init_down.is_some() || a.init_up.is_some() {
                return Err(Error::Usage("--init-down/--init-up apply to stage 3 only".into()));
            }
            let pool = HrPool::load(&cfg.hr_dir)?;
            Trainer::new(cfg, pool)?
        }
    };
    t.run(true)?;
    log::info!("wrote {}", t.cfg.checkpoint_path().display());
    Ok(())
}

pub fn cmd_infer(a: InferArgs) -> Result<()> {
    let model = Model::load(&a.ckpt)?;
    if model.scale() != a.scale {
        return Err(Error::Usage(format!(
            "checkpoint upsamples ×{}, --scale is {}",
            model.scale(),
            a.scale
        )));
    }
    let img = io::read_png(&a.lr)?;
    let started = Instant::now();
    let out = model.run(&img, a.dump_kernels.is_some())?;
    log::info!("inference took {:.2} s", started.elapsed().as_secs_f64());
    io::write_png(&a.out, &out.sr)?;

    if let (Some(dir), Some(fd)) = (&a.dump_kernels, out.kernels) {
        let stem = a
            .lr
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        let mk = eval::mean_kernel(&fd, 0)?;
        io::write_kernel(&dir.join(format!("{stem}.kernel")), &mk)?;
        io::write_png(&dir.join(format!("{stem}_kernel.png")), &eval::kernel_png(mk.values(), 20, 8))?;
        if let Some(gt) = &a.gt_kernel {
            let gt = read_kernel_checked(gt)?;
            let map = eval::cosine_similarity_map(&fd, 0, &gt)?;
            let (w, h) = (img.width() as usize, img.height() as usize);
            io::write_png(&dir.join(format!("{stem}_cosine.png")), &eval::similarity_png(&map, w, h))?;
        }
    }
    Ok(())
}

/// Loads a kernel, warning when it does not sum to one.
pub fn read_kernel_checked(path: &Path) -> Result<Kernel2D> {
    let k = io::read_kernel(path)?;
    if (k.sum() - 1.0).abs() > 1e-5 {
        log::warn!("{} sums to {:.6}, not 1", path.display(), k.sum());
    }
    Ok(k)
}

fn file_names(dir: &Path) -> Result<BTreeSet<String>> {
    Ok(io::list_pngs(dir)?
        .iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect())
}

pub fn cmd_eval(a: EvalArgs) -> Result<()> {
    degrade::check_scale(a.scale)?;
    let crop = a.crop.unwrap_or(a.scale);
    let sr = file_names(&a.sr_dir)?;
    let gt = file_names(&a.gt_dir)?;
    let unmatched: Vec<&String> = sr.symmetric_difference(&gt).collect();
    if !unmatched.is_empty() {
        return Err(Error::Usage(format!(
            "filenames differ between --sr-dir and --gt-dir: {}",
            unmatched.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        )));
    }
    let names: Vec<String> = sr.into_iter().collect();
    let rows = names
        .par_iter()
        .map(|name| {
            let a_img = io::read_png(&a.sr_dir.join(name))?;
            let b_img = io::read_png(&a.gt_dir.join(name))?;
            let kernel_l2 = match (&a.est_kernel_dir, &a.gt_kernel_dir) {
                (Some(ed), Some(gd)) => {
                    let stem = Path::new(name)
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_default();
                    let file = format!("{stem}.kernel");
                    let est = read_kernel_checked(&ed.join(&file))?;
                    let gtk = read_kernel_checked(&gd.join(&file))?;
                    Some(eval::kernel_l2_shifted(&est, &gtk, a.max_shift))
                }
                _ => None,
            };
            Ok(MetricRow {
                name: name.clone(),
                psnr_y: eval::psnr_y(&a_img, &b_img, crop)?,
                ssim_y: eval::ssim_y(&a_img, &b_img, crop)?,
                kernel_l2,
                runtime_s: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = MetricReport { rows };
    report.write_csv(&a.out)?;
    let agg = report.aggregate();
    println!(
        "{} images: PSNR-Y {:.3} dB, SSIM-Y {:.4}{}",
        report.rows.len(),
        agg.psnr_y,
        agg.ssim_y,
        agg.kernel_l2.map(|k| format!(", kernel l2 {k:.5}")).unwrap_or_default()
    );
    if a.reference {
        println!("{}:", eval::REFERENCE_LABEL);
        for r in eval::reference_numbers() {
            println!(
                "  {:<22} {:<18} {:<10} ×{} {:<9} {}",
                r.context, r.method, r.dataset, r.scale, r.metric, r.value
            );
        }
    }
    Ok(())
}

pub fn cmd_kernel(a: KernelArgs) -> Result<()> {
    let spec = || -> Result<DegradationSpec> {
        match (a.sigma1, a.sigma2, a.theta) {
            (Some(s1), Some(s2), Some(t)) => DegradationSpec::new(s1, s2, t, 0),
            _ => Err(Error::Usage("--sigma1, --sigma2 and --theta are required".into())),
        }
    };
    let scale = || a.scale.ok_or_else(|| Error::Usage("--scale is required".into()));
    let (values, size) = match a.make {
        KernelKind::Gaussian => {
            let k = degrade::make_gaussian_kernel(&spec()?, GAUSSIAN_SIZE)?;
            io::write_kernel_grid(&a.out, &k)?;
            (k.values().to_vec(), k.size())
        }
        KernelKind::Bicubic => {
            let k = degrade::bicubic_only(scale()?)?;
            io::write_kernel(&a.out, &k)?;
            (k.values().to_vec(), degrade::KERNEL_SIZE)
        }
        KernelKind::Compose => {
            let k = degrade::degradation_kernel(&spec()?, scale()?)?;
            io::write_kernel(&a.out, &k)?;
            (k.values().to_vec(), degrade::KERNEL_SIZE)
        }
    };
    if let Some(png) = &a.png {
        io::write_png(png, &eval::kernel_png(&values, size, 8))?;
    }
    Ok(())
}
