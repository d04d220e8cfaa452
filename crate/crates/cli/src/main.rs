use std::fs;
use std::io::Read as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use qyolop::config::{Preset, RunConfig};
use qyolop::data::{load_samples, read_rgb_png, write_label_png, write_rgb_png, Image, Sample};
use qyolop::engine::Tensor;
use qyolop::evaluation::{evaluate, EvalReport};
use qyolop::network::{load_checkpoint, save_checkpoint, Model, CHECKPOINT_MAGIC};
use qyolop::postprocess::{infer, Prediction};
use qyolop::quant::{calibrate_ptq, export_int8, load_int8, QuantSpecs, INT8_MAGIC};
use qyolop::trainer::{collate, fit_sample, make_batch, read_log, run_schedule, train_step, Adam, Resume};
use qyolop::{Error, Result};

mod overlay;
mod report;

#[derive(Parser)]
#[command(name = "qyolop", version, about = "Multi-task driving perception: train, quantize, evaluate, infer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct ConfigArgs {
    /// TOML run configuration layered over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    Preset::parse(s).map_err(|e| e.to_string())
}

#[derive(Clone, Copy, ValueEnum)]
enum QuantMode {
    /// Calibrate a float checkpoint and export it.
    Ptq,
    /// Export a checkpoint trained with fake quantization.
    QatExport,
}

#[derive(Subcommand)]
enum Command {
    /// Regenerate labels from a source annotation document into a manifest.
    Prepare {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Lane-line stroke width in pixels.
        #[arg(long, default_value_t = 5.0)]
        stroke: f32,
    },
    /// Generate the synthetic train/val/mix splits.
    Toygen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the training schedule.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the dataset root of the configuration.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Validate, build the model, run one optimizer step and stop.
        #[arg(long)]
        dry_run: bool,
        /// Checkpoint of the last finished stage.
        #[arg(long, requires = "from_stage")]
        resume: Option<PathBuf>,
        /// 1-based index of the first stage to run when resuming.
        #[arg(long, requires = "resume")]
        from_stage: Option<usize>,
    },
    /// Produce an INT8 archive.
    Quantize {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mode: QuantMode,
        /// Calibration manifest (PTQ only); defaults to the configured one.
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint or INT8 archive on a manifest.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict boxes and masks for images.
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "image", required = true)]
        images: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write a color overlay per image.
        #[arg(long)]
        overlay: bool,
    },
    /// Plot loss and metric curves from training logs.
    Report {
        #[arg(long = "log", required = true)]
        logs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(a: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p, a.preset)?,
        None => RunConfig::from_toml_str("", a.preset)?,
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| Error::io(p, e))
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))
}

fn sniff(path: &Path) -> Result<[u8; 8]> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut m = [0u8; 8];
    f.read_exact(&mut m).map_err(|e| Error::io(path, e))?;
    Ok(m)
}

/// Loads either a float checkpoint or an INT8 archive, by magic.
fn load_any_model(path: &Path) -> Result<Model> {
    let magic = sniff(path)?;
    if magic == *INT8_MAGIC {
        Ok(load_int8(path)?.model)
    } else if magic == *CHECKPOINT_MAGIC {
        load_checkpoint(path)
    } else {
        Err(Error::Format(format!("{} is neither a checkpoint nor an INT8 archive", path.display())))
    }
}

fn cmd_train(
    cfg: RunConfig,
    out: &Path,
    data: Option<PathBuf>,
    dry_run: bool,
    resume: Option<(PathBuf, usize)>,
) -> Result<serde_json::Value> {
    let mut cfg = cfg;
    if let Some(d) = data {
        cfg.paths.data_root = d;
    }
    let schedule = cfg.train_schedule();
    schedule.validate()?;
    create_dir(out)?;
    write_text(&out.join("config.toml"), &cfg.to_toml_string()?)?;
    if dry_run {
        let mut model = Model::build(&schedule.network, schedule.seed)?;
        let stage = &schedule.stages[0];
        let mut samples: Vec<Sample> = Vec::new();
        for p in &stage.datasets {
            let [h, w] = schedule.network.input_size;
            samples.extend(load_samples(&schedule.resolve(p))?.iter().map(|s| fit_sample(s, h, w)));
        }
        if samples.is_empty() {
            return Err(Error::Argument("training datasets are empty".into()));
        }
        let n = stage.batch_size.min(samples.len());
        let order: Vec<usize> = (0..samples.len()).collect();
        let batch = make_batch(schedule.seed, &samples, &order, 0..n, &schedule.augment, stage.mosaic_active(0), 0, 0)?;
        let mut opt = Adam::new(schedule.adam);
        let step = train_step(&mut model, &mut opt, &batch, &schedule, stage.lr_init)?.map_err(|c| Error::NonFiniteLoss {
            stage: stage.name.as_str().into(),
            epoch: 0,
            component: c.into(),
        })?;
        return Ok(serde_json::json!({
            "dry_run": true,
            "parameters": model.param_count(),
            "batch": n,
            "loss": step.loss,
        }));
    }
    let resume = match resume {
        Some((ckpt, from)) => {
            if from == 0 {
                return Err(Error::Argument("--from-stage is 1-based".into()));
            }
            Some(Resume {
                model: load_checkpoint(&ckpt)?,
                next_stage: from - 1,
            })
        }
        None => None,
    };
    let outcome = run_schedule(&schedule, out, resume)?;
    let last = outcome.checkpoints.last().cloned();
    let final_path = out.join("final.ckpt");
    save_checkpoint(&outcome.model, &final_path)?;
    Ok(serde_json::json!({
        "epochs": outcome.logs.len(),
        "checkpoints": outcome.checkpoints,
        "last_stage_checkpoint": last,
        "final": final_path,
        "log": out.join("train_log.jsonl"),
    }))
}

fn cmd_quantize(cfg: RunConfig, checkpoint: &Path, mode: QuantMode, calibration: Option<PathBuf>, out: &Path) -> Result<serde_json::Value> {
    let mut model = load_checkpoint(checkpoint)?;
    let specs = match mode {
        QuantMode::Ptq => {
            let manifest = calibration.unwrap_or_else(|| cfg.paths.data_root.join(&cfg.paths.calibration));
            let [h, w] = model.config.input_size;
            let samples: Vec<Sample> = load_samples(&manifest)?.iter().map(|s| fit_sample(s, h, w)).collect();
            let aug = &cfg.augment;
            let batches: Vec<Tensor> = samples
                .chunks(cfg.evaluation.batch_size.max(1))
                .map(|c| collate(c, aug.normalize_mean, aug.normalize_std).images)
                .collect();
            calibrate_ptq(&mut model, &batches, &cfg.quantization)?
        }
        QuantMode::QatExport => {
            if model.qat.is_none() {
                return Err(Error::Argument(format!(
                    "{} carries no quantization state; train a qat stage or use --mode ptq",
                    checkpoint.display()
                )));
            }
            QuantSpecs::from_model(&model)?
        }
    };
    create_dir(out)?;
    let archive = out.join("model.int8");
    export_int8(&model, &specs, &archive)?;
    write_text(&out.join("quant_specs.json"), &to_json(&specs)?)?;
    let size = |p: &Path| fs::metadata(p).map(|m| m.len()).map_err(|e| Error::io(p, e));
    let (a, c) = (size(&archive)?, size(checkpoint)?);
    Ok(serde_json::json!({
        "archive": archive,
        "archive_bytes": a,
        "checkpoint_bytes": c,
        "size_ratio": a as f64 / c as f64,
    }))
}

fn cmd_eval(cfg: RunConfig, model: &Path, manifest: &Path, out: &Path) -> Result<EvalReport> {
    let mut m = load_any_model(model)?;
    let samples = load_samples(manifest)?;
    let report = evaluate(&mut m, &samples, &cfg.inference, &cfg.evaluation)?;
    create_dir(out)?;
    write_text(&out.join("report.json"), &to_json(&report)?)?;
    let label = model.file_name().map_or_else(|| "model".into(), |n| n.to_string_lossy().into_owned());
    let table = report.to_table(&label);
    write_text(&out.join("report.txt"), &table)?;
    eprint!("{table}");
    Ok(report)
}

fn stem(p: &Path, i: usize) -> String {
    p.file_stem().map_or_else(|| format!("image{i}"), |s| s.to_string_lossy().into_owned())
}

fn cmd_infer(cfg: RunConfig, model: &Path, images: &[PathBuf], out: &Path, draw: bool) -> Result<serde_json::Value> {
    let mut m = load_any_model(model)?;
    create_dir(out)?;
    let mut written = Vec::new();
    for (i, p) in images.iter().enumerate() {
        let img: Image = read_rgb_png(p)?;
        let pred: Prediction = infer(&mut m, &img, &cfg.inference)?;
        let name = stem(p, i);
        let json = out.join(format!("{name}.json"));
        write_text(&json, &pred.to_json())?;
        write_label_png(&out.join(format!("{name}_merged.png")), &pred.merged)?;
        if draw {
            write_rgb_png(&out.join(format!("{name}_overlay.png")), &overlay::render(&img, &pred))?;
        }
        written.push(json);
    }
    Ok(serde_json::json!({ "predictions": written }))
}

fn run(cli: Cli) -> Result<()> {
    let summary = match cli.command {
        Command::Prepare { source, out, stroke } => {
            let manifest = qyolop::labelprep::prepare_dataset(&source, &out, stroke)?;
            serde_json::json!({ "manifest": manifest })
        }
        Command::Toygen { cfg, out } => {
            let cfg = load_config(&cfg)?;
            let mut manifests = serde_json::Map::new();
            for (name, spec) in cfg.toy_splits() {
                if spec.n_images == 0 {
                    continue;
                }
                let m = qyolop::toyset::generate(&spec, &out.join(name))?;
                manifests.insert(name.into(), serde_json::json!(m));
            }
            serde_json::Value::Object(manifests)
        }
        Command::Train {
            cfg,
            out,
            data,
            dry_run,
            resume,
            from_stage,
        } => cmd_train(load_config(&cfg)?, &out, data, dry_run, resume.zip(from_stage))?,
        Command::Quantize {
            cfg,
            checkpoint,
            mode,
            calibration,
            out,
        } => cmd_quantize(load_config(&cfg)?, &checkpoint, mode, calibration, &out)?,
        Command::Eval { cfg, model, manifest, out } => {
            let r = cmd_eval(load_config(&cfg)?, &model, &manifest, &out)?;
            serde_json::json!({
                "report": out.join("report.json"),
                "map50": r.map50,
                "drivable_miou": r.drivable.miou,
                "lane_miou": r.lane.miou,
                "merged_miou": r.merged.miou,
            })
        }
        Command::Infer {
            cfg,
            model,
            images,
            out,
            overlay,
        } => cmd_infer(load_config(&cfg)?, &model, &images, &out, overlay)?,
        Command::Report { logs, out } => {
            let runs = logs
                .iter()
                .map(|p| Ok((p.display().to_string(), read_log(p)?)))
                .collect::<Result<Vec<_>>>()?;
            create_dir(&out)?;
            let files = report::plot(&runs, &out)?;
            serde_json::json!({ "plots": files })
        }
    };
    println!("{}", serde_json::to_string(&summary).map_err(|e| Error::Format(e.to_string()))?);
    Ok(())
}

fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": { "kind": kind, "message": message } }).to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Ok(n) = std::env::var("QYOLOP_WORKERS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("{}", error_line("config", &format!("QYOLOP_WORKERS must be a positive integer, got `{n}`")));
                return ExitCode::from(2);
            }
        }
    }
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", error_line("usage", first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string().replace('\n', " ")));
            ExitCode::FAILURE
        }
    }
}
