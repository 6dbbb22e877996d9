use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mvdet::metrics::{read_jsonl, write_jsonl, MetricReport};
use mvdet::model::Model;
use mvdet::pipeline::{self, RunConfig, TrainError};
use mvdet::scene_sim::Scene;
use serde_json::json;

#[derive(Parser)]
#[command(name = "mvdet", version, about = "Synthetic multi-camera 3D detection")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply to missing keys
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic scenes and train/val manifests
    Generate {
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        val: Option<usize>,
    },
    /// Train on a manifest, writing a JSONL log and per-epoch checkpoints
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Predict and score a manifest
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Predict a manifest without scoring
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Top-down SVG of a scene with optional predictions
    RenderBev {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Half width of the plotted square in meters
        #[arg(long, default_value_t = 40.0)]
        extent: f64,
    },
    /// Train and evaluate every variant of a preset
    Ablate {
        #[arg(long)]
        preset: String,
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference check of the full training loss
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        #[arg(long, default_value_t = 4)]
        per_tensor: usize,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().skip(1).map(|c| c.to_string()).collect();
            eprintln!("{}", json!({ "error": e.to_string(), "causes": chain }));
            ExitCode::FAILURE
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn manifest_path(data: &Path, split: &str) -> PathBuf {
    if data.is_dir() {
        data.join(format!("{split}.txt"))
    } else {
        data.to_path_buf()
    }
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<Model> {
    let doc: serde_json::Value = serde_json::from_str(&pipeline::read(checkpoint)?)
        .with_context(|| format!("parsing {}", checkpoint.display()))?;
    let (model, _) = Model::with_checkpoint(&cfg.model, cfg.modes, &cfg.sim, &doc)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    Ok(model)
}

fn write_report(out: &Path, report: &MetricReport) -> Result<()> {
    pipeline::write(
        &out.join("metrics.json"),
        &serde_json::to_string_pretty(report)?,
    )?;
    pipeline::write(&out.join("metrics.csv"), &report.to_csv())?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let out = cli.common.out.as_path();
    match cli.command {
        Command::Generate { train, val } => {
            let train = train.unwrap_or(cfg.data.train_scenes);
            let val = val.unwrap_or(cfg.data.val_scenes);
            let files = pipeline::generate(&cfg.sim, train + val, val, cfg.seed, out)?;
            println!("wrote {} scenes to {}", files.len(), out.display());
        }
        Command::Train { data } => {
            let scenes = pipeline::load_manifest(&manifest_path(&data, "train"))?;
            let probe = Model::new(&cfg.model, cfg.modes, &cfg.sim, 0)?;
            let samples = pipeline::prepare(&probe, scenes)?;
            pipeline::write(&out.join("config.toml"), &cfg.to_toml()?)?;
            let log_path = out.join("log.jsonl");
            let mut log = String::new();
            let result = pipeline::train(
                &cfg,
                &samples,
                |entry| {
                    log.push_str(&serde_json::to_string(entry)?);
                    log.push('\n');
                    Ok(())
                },
                |epoch, model, optim| {
                    let doc = serde_json::to_string(&model.checkpoint(Some(optim)))?;
                    pipeline::write(&out.join(format!("checkpoint-epoch{epoch:03}.json")), &doc)?;
                    pipeline::write(&out.join("checkpoint.json"), &doc)?;
                    eprintln!("epoch {epoch} done");
                    Ok(())
                },
            );
            pipeline::write(&log_path, &log)?;
            match result {
                Ok(trained) => {
                    let last = trained.log.last().map(|l| l.loss.total).unwrap_or(0.0);
                    println!("trained {} steps, final loss {last:.4}", trained.log.len());
                }
                Err(TrainError::NonFinite(e)) => {
                    let dump = out.join("nonfinite_step.json");
                    pipeline::write(&dump, &serde_json::to_string_pretty(&e.log)?)?;
                    bail!("{e}; loss report written to {}", dump.display());
                }
                Err(TrainError::Run(e)) => return Err(e.into()),
            }
        }
        Command::Eval { checkpoint, data } => {
            let mut model = load_model(&cfg, &checkpoint)?;
            let scenes = pipeline::load_manifest(&manifest_path(&data, "val"))?;
            let samples = pipeline::prepare(&model, scenes)?;
            let (report, preds) = pipeline::evaluate_model(&mut model, &samples, &cfg.eval)?;
            pipeline::write(&out.join("predictions.jsonl"), &write_jsonl(&preds)?)?;
            write_report(out, &report)?;
            println!("NDS {:.4} mAP {:.4}", report.nds, report.map);
        }
        Command::Infer { checkpoint, data } => {
            let mut model = load_model(&cfg, &checkpoint)?;
            let scenes = pipeline::load_manifest(&manifest_path(&data, "val"))?;
            let samples = pipeline::prepare(&model, scenes)?;
            let preds = pipeline::predict(&mut model, &samples)?;
            pipeline::write(&out.join("predictions.jsonl"), &write_jsonl(&preds)?)?;
            println!("wrote {} detections", preds.len());
        }
        Command::RenderBev {
            scene,
            predictions,
            extent,
        } => {
            let scene_json = pipeline::read(&scene)?;
            let parsed = Scene::from_json(&scene_json)
                .with_context(|| format!("parsing {}", scene.display()))?;
            let stem = scene
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("scene")
                .to_string();
            let gt: Vec<_> = parsed
                .boxes
                .iter()
                .map(|b| mvdet::metrics::DetectionRecord::from_box(&stem, b, 1.0))
                .collect();
            let preds = match predictions {
                Some(p) => {
                    let all = read_jsonl(&pipeline::read(&p)?)?;
                    // prediction scene ids carry the split prefix
                    all.into_iter()
                        .filter(|r| {
                            Path::new(&r.scene_id).file_name().and_then(|s| s.to_str())
                                == Some(stem.as_str())
                        })
                        .collect()
                }
                None => Vec::new(),
            };
            let path = out.join(format!("{stem}.svg"));
            pipeline::write(&path, &pipeline::render_bev(&gt, &preds, extent))?;
            println!("wrote {}", path.display());
        }
        Command::Ablate { preset, data } => {
            let train = pipeline::load_manifest(&manifest_path(&data, "train"))?;
            let val = pipeline::load_manifest(&data.join("val.txt"))?;
            let rows = pipeline::run_ablation(&cfg, &preset, &train, &val, |name, r| {
                eprintln!("{name}: NDS {:.4} mAP {:.4}", r.nds, r.map)
            })
            .map_err(|e| anyhow::anyhow!("{e}"))?;
            let path = out.join(format!("{preset}.csv"));
            pipeline::write(&path, &pipeline::ablation_csv(&rows))?;
            println!("wrote {}", path.display());
        }
        Command::Gradcheck {
            step,
            per_tensor,
            tolerance,
        } => {
            let mut gc = pipeline::gradcheck_config();
            gc.seed = cfg.seed;
            let report = pipeline::gradcheck_pipeline(&gc, step, per_tensor)?;
            pipeline::write(
                &out.join("gradcheck.json"),
                &serde_json::to_string_pretty(&report)?,
            )?;
            println!(
                "{} tensors, worst norm relative error {:.3e}",
                report.tensors.len(),
                report.worst_norm_rel_error
            );
            if !(report.worst_norm_rel_error < tolerance) {
                bail!(
                    "gradient check failed: {:.3e} >= {tolerance:e}",
                    report.worst_norm_rel_error
                );
            }
        }
    }
    Ok(())
}
