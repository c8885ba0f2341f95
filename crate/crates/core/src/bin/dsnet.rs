use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use dsnet::checkpoint::Checkpoint;
use dsnet::config::{Config, InitMode};
use dsnet::data::{make_toy_data, scan_dataset, DatasetKind, SamplePool};
use dsnet::imageio::{is_image, list_images, stem_of};
use dsnet::metrics::evaluate_dir;
use dsnet::pipeline::{
    generate_pseudo_depth, infer_with, train_stage1_depth, train_stage3_semi, train_supervised, TrainOutput,
};

#[derive(Parser)]
#[command(name = "dsnet", version, about = "Depth-decoupled RGB-D salient object detection")]
struct Cli {
    /// TOML configuration file; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured device.
    #[arg(long, global = true)]
    device: Option<String>,
    /// Output directory (for `eval`, the report CSV path).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Iters {
    /// Overrides `train.max_iter`.
    #[arg(long)]
    iters: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Stage 1: train the depth branch on labeled RGB-D data.
    TrainDepth {
        #[arg(long)]
        labeled: PathBuf,
        #[command(flatten)]
        iters: Iters,
    },
    /// Stage 2: write pseudo depth for every RGB image in a directory.
    GenPseudoDepth {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        rgb: PathBuf,
    },
    /// Stage 3: semi-supervised training with a mean teacher.
    TrainSemi {
        #[arg(long)]
        labeled: PathBuf,
        /// Directory with `rgb/` and pseudo-depth `depth/`.
        #[arg(long)]
        unlabeled: PathBuf,
        /// Stage-1 checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        iters: Iters,
    },
    /// Supervised-only baseline training.
    TrainSupervised {
        #[arg(long)]
        labeled: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        iters: Iters,
    },
    /// Predict saliency for an image or a directory of images.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        rgb: PathBuf,
        /// Depth image, or directory of depth images matched by stem.
        /// Pseudo depth is used when omitted.
        #[arg(long)]
        depth: Option<PathBuf>,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Generate the synthetic toy dataset.
    MakeToyData {
        #[arg(long, default_value_t = 16)]
        labeled: usize,
        #[arg(long, default_value_t = 16)]
        unlabeled: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.device {
        cfg.device = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn with_iters(mut cfg: Config, iters: &Iters) -> Config {
    if let Some(n) = iters.iters {
        cfg.train.max_iter = n;
    }
    cfg
}

fn out_dir(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn pool(dir: &Path, kind: DatasetKind) -> Result<SamplePool> {
    let index = scan_dataset(dir, kind).with_context(|| format!("scanning {}", dir.display()))?;
    Ok(SamplePool::new(index)?)
}

fn finish(out: &TrainOutput, cfg: &Config, dir: &Path) -> Result<()> {
    let path = out.write(dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml_string()?)?;
    if let (Some(first), Some(last)) = (out.trace.first(), out.trace.last()) {
        println!("loss {:.5} -> {:.5} over {} iterations", first.total, last.total, out.trace.len());
    }
    println!("checkpoint written to {}", path.display());
    Ok(())
}

fn load_init(path: Option<&PathBuf>) -> Result<Option<Checkpoint>> {
    path.map(|p| Checkpoint::load(p).with_context(|| format!("loading {}", p.display())))
        .transpose()
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::TrainDepth { labeled, iters } => {
            let cfg = with_iters(load_config(cli)?, iters);
            let out = train_stage1_depth(&cfg, &pool(labeled, DatasetKind::LabeledRgbd)?)?;
            finish(&out, &cfg, &out_dir(cli, "runs/depth"))
        }
        Command::GenPseudoDepth { checkpoint, rgb } => {
            let dir = out_dir(cli, "pseudo_depth");
            let n = generate_pseudo_depth(checkpoint, rgb, &dir)?;
            println!("wrote {n} pseudo-depth maps to {}", dir.display());
            Ok(())
        }
        Command::TrainSemi {
            labeled,
            unlabeled,
            init,
            iters,
        } => {
            let cfg = with_iters(load_config(cli)?, iters);
            if cfg.train.init == InitMode::Stage1 && init.is_none() {
                bail!("train-semi needs --init with a stage-1 checkpoint (or train.init = \"scratch\" in the config)");
            }
            let init = load_init(init.as_ref())?;
            let out = train_stage3_semi(
                &cfg,
                &pool(labeled, DatasetKind::LabeledRgbd)?,
                &pool(unlabeled, DatasetKind::UnlabeledRgbWithPseudoDepth)?,
                init.as_ref(),
            )?;
            finish(&out, &cfg, &out_dir(cli, "runs/semi"))
        }
        Command::TrainSupervised { labeled, init, iters } => {
            let cfg = with_iters(load_config(cli)?, iters);
            let init = load_init(init.as_ref())?;
            let out = train_supervised(&cfg, &pool(labeled, DatasetKind::LabeledRgbd)?, init.as_ref())?;
            finish(&out, &cfg, &out_dir(cli, "runs/supervised"))
        }
        Command::Infer { checkpoint, rgb, depth } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            let net = ckpt.student_network()?;
            let dir = out_dir(cli, "predictions");
            let inputs = if rgb.is_dir() { list_images(rgb)? } else { vec![rgb.clone()] };
            for path in &inputs {
                let stem = stem_of(path);
                let depth_path = match depth {
                    Some(d) if d.is_dir() => Some(find_by_stem(d, &stem)?),
                    Some(d) => Some(d.clone()),
                    None => None,
                };
                let out = dir.join(format!("{stem}.png"));
                infer_with(&net.model, path, depth_path.as_deref(), &out)?;
                info!("wrote {}", out.display());
            }
            println!("wrote {} saliency maps to {}", inputs.len(), dir.display());
            Ok(())
        }
        Command::Eval { pred, gt } => {
            let report = evaluate_dir(pred, gt)?;
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("report.csv"));
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(&out, report.to_csv())?;
            let name = gt
                .parent()
                .and_then(|p| p.file_name())
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into());
            print!("{}", report.to_table(&name));
            Ok(())
        }
        Command::MakeToyData {
            labeled,
            unlabeled,
            size,
        } => {
            let cfg = load_config(cli)?;
            let dir = out_dir(cli, "toy");
            let counts = make_toy_data(&dir, *labeled, *unlabeled, cfg.seed, *size)?;
            println!(
                "wrote {} labeled and {} unlabeled samples to {}",
                counts.labeled,
                counts.unlabeled,
                dir.display()
            );
            Ok(())
        }
    }
}

fn find_by_stem(dir: &Path, stem: &str) -> Result<PathBuf> {
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        if is_image(&p) && stem_of(&p) == stem {
            return Ok(p);
        }
    }
    bail!("no depth image for {stem} in {}", dir.display())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
