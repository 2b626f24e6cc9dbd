use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use ron_core::ablation;
use ron_core::config::RunConfig;
use ron_core::data::{manifest, ppm, shapes, weights};
use ron_core::eval::{self, ApMode};
use ron_core::gradcheck::{self, REL_TOLERANCE};
use ron_core::inference::{self, DetectParams};
use ron_core::trainer;
use ron_core::{Error, Model32};

/// Single-shot detector with reverse-connection fusion and an objectness prior.
#[derive(Parser)]
#[command(name = "ron", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes dataset (PPM images, VOC XML, manifest.json).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Image side in pixels.
        #[arg(long, default_value_t = 128)]
        size: usize,
    },
    /// Train a model; writes checkpoints, final.ronw and train_log.csv into --out.
    Train {
        /// key = value config file; defaults are used for missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override a config key, e.g. --set total_iters=100 (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Score a model on an annotated dataset.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Metrics JSON; the per-class CSV is written next to it with a .csv extension.
        #[arg(long)]
        metrics_out: PathBuf,
        /// Also report AP averaged over IoU 0.5:0.05:0.95.
        #[arg(long)]
        coco_style: bool,
        /// Area under the full precision envelope instead of 11-point interpolation.
        #[arg(long)]
        all_point: bool,
    },
    /// Detect objects in one PPM image; writes JSON lines.
    Detect {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = inference::CONF_THRESH)]
        conf_thresh: f64,
        #[arg(long, default_value_t = inference::NMS_THRESH)]
        nms_thresh: f64,
        #[arg(long, default_value_t = inference::TOP_K)]
        top_k: usize,
    },
    /// Recall versus number of objectness-ranked proposals (IoU 0.5).
    Proposals {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,50,100,300")]
        n_list: Vec<usize>,
        #[arg(long)]
        curve_out: PathBuf,
    },
    /// Finite-difference gradient checks in f64.
    Gradcheck {
        /// `all` or one operation name.
        #[arg(long, default_value = "all")]
        ops: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and score a sweep of model variants on the same seed.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Sweep {
    Layers,
    Objectness,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, value_enum)]
    sweep: Sweep,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training set.
    #[arg(long)]
    data: PathBuf,
    /// Held-out set.
    #[arg(long)]
    val: PathBuf,
    /// Output directory for table.md and table.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parse { .. } => 3,
        Error::NotFound(_) => 4,
        Error::Io { .. } => 5,
        Error::Numeric(_) => 6,
        Error::Input(_) | Error::Dimension(_) | Error::Unsupported(_) => 7,
    }
}

fn write(path: &Path, text: &str) -> ron_core::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run_config(config: Option<&Path>, overrides: &[String]) -> ron_core::Result<RunConfig> {
    let mut cfg = match config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    for o in overrides {
        cfg.set_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> ron_core::Result<()> {
    match cli.command {
        Command::GenData { out, n, seed, size } => {
            let ds = shapes::generate(n, &shapes::ShapesConfig::for_size(size), seed)?;
            manifest::write_dataset(&out, &ds)?;
            println!("wrote {} images to {}", ds.len(), out.display());
        }
        Command::Train {
            config,
            data,
            out,
            overrides,
        } => {
            let cfg = run_config(config.as_deref(), &overrides)?;
            let ds = manifest::read_dataset(&data)?;
            if ds.classes.len() != cfg.model.num_classes {
                return Err(Error::Config(format!(
                    "dataset has {} classes, num_classes = {}",
                    ds.classes.len(),
                    cfg.model.num_classes
                )));
            }
            let mut model = Model32::build(cfg.model.clone(), cfg.train.seed)?;
            let output = trainer::output(&out);
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write(&out.join("config.txt"), &cfg.to_text())?;
            let rows = trainer::train(&mut model, &ds, &cfg.train, Some(&output))?;
            if let Some(last) = rows.last() {
                println!("iter {} total loss {:.4}", last.iter, last.report.total);
            }
            println!("weights: {}", output.final_weights().display());
        }
        Command::Eval {
            weights: w,
            data,
            metrics_out,
            coco_style,
            all_point,
        } => {
            let model: Model32 = weights::load(&w)?;
            let ds = manifest::read_dataset(&data)?;
            let mode = if all_point { ApMode::AllPoint } else { ApMode::ElevenPoint };
            let metrics = eval::evaluate(&model, &ds, mode, coco_style)?;
            write(&metrics_out, &metrics.to_json())?;
            write(&metrics_out.with_extension("csv"), &metrics.to_csv())?;
            match metrics.map {
                Some(m) => println!("mAP@0.5 {m:.4}"),
                None => println!("mAP@0.5 undefined (no ground truth)"),
            }
            if let Some(c) = metrics.coco_map {
                println!("mAP@[0.5:0.95] {c:.4}");
            }
        }
        Command::Detect {
            weights: w,
            image,
            out,
            conf_thresh,
            nms_thresh,
            top_k,
        } => {
            let model: Model32 = weights::load(&w)?;
            let img = ppm::read(&image)?;
            let params = DetectParams {
                conf_thresh,
                nms_thresh,
                top_k,
            };
            let dets = inference::detect(&model, &img, params)?;
            let id = image.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
            write(&out, &inference::to_json_lines(&id, &dets))?;
            println!("{} detections", dets.len());
        }
        Command::Proposals {
            weights: w,
            data,
            n_list,
            curve_out,
        } => {
            let model: Model32 = weights::load(&w)?;
            let ds = manifest::read_dataset(&data)?;
            let max_n = n_list.iter().copied().max().unwrap_or(0);
            let props = eval::propose_dataset(&model, &ds, max_n)?;
            let curve = eval::recall_curve(&props, &ds, &n_list, 0.5);
            write(&curve_out, &eval::recall_csv(&curve))?;
            for (n, r) in curve {
                println!("recall@{n} {r:.4}");
            }
        }
        Command::Gradcheck { ops, seed } => {
            let reports = if ops == "all" {
                gradcheck::check_all(seed)?
            } else {
                vec![gradcheck::check_named(&ops, seed)?]
            };
            let mut failed = Vec::new();
            for r in &reports {
                let ok = r.passed(REL_TOLERANCE);
                println!(
                    "{:<16} coords {:>4}  max rel {:.3e}  max abs {:.3e}  {}",
                    r.op,
                    r.coords,
                    r.max_rel_error,
                    r.max_abs_error,
                    if ok { "ok" } else { "FAIL" }
                );
                if !ok {
                    failed.push(r.op.clone());
                }
            }
            if !failed.is_empty() {
                return Err(Error::Numeric(format!("gradient check failed for {}", failed.join(", "))));
            }
        }
        Command::Ablate(a) => {
            let cfg = run_config(a.config.as_deref(), &a.overrides)?;
            let train_set = manifest::read_dataset(&a.data)?;
            let val_set = manifest::read_dataset(&a.val)?;
            let variants = match a.sweep {
                Sweep::Layers => ablation::layer_variants(&cfg),
                Sweep::Objectness => ablation::objectness_variants(&cfg),
            };
            let rows = ablation::run(&variants, &train_set, &val_set, ApMode::ElevenPoint)?;
            let table = ablation::table(&rows, &val_set.classes);
            write(&a.out.join("table.md"), &table)?;
            write(&a.out.join("table.csv"), &ablation::csv(&rows, &val_set.classes))?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            info!("exiting with code {}", exit_code(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
