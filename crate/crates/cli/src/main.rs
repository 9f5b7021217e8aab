use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};

use pvqae::checkpoint::Checkpoint;
use pvqae::config::RunConfig;
use pvqae::data::{load_dataset, synth_texture_dataset, write_mvtec_layout, DatasetManifest, SynthSpec};
use pvqae::pipeline::{evaluate, infer, logs_to_csv, train_prior_stage, train_stage1};
use pvqae::{PvqaeError, Result};

#[derive(Parser)]
#[command(name = "pvqae", version, about = "Patch-level VQ autoencoder defect detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Config override `section.key=value`; applied after the file, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic texture dataset as an MVTec-style tree.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        /// TOML file with synthetic dataset parameters.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Stage 1: train autoencoder, codebooks, routing gate and discriminator.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Stage 2: freeze stage 1 and train the budget prior.
    TrainPrior {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write the updated checkpoint here instead of in place.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score the test split and write per-category AUROC.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Score by reconstruction alone with routed allocation.
        #[arg(long)]
        no_prior: bool,
    },
    /// Score a single image and write its heatmap.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        /// Category whose CLS token conditions the prior (default: first registered).
        #[arg(long)]
        category: Option<String>,
    },
}

fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path, overrides)?;
    cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(root: &Path, cfg: &RunConfig) -> Result<DatasetManifest> {
    let cats = (!cfg.data.categories.is_empty()).then_some(cfg.data.categories.as_slice());
    let manifest = load_dataset(root, cfg.data.image_size, cats)?;
    info!(
        "loaded {} train / {} test images over {} categories",
        manifest.train.len(),
        manifest.test.len(),
        manifest.categories.len()
    );
    Ok(manifest)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| PvqaeError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| PvqaeError::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData { out, spec, overrides } => {
            let text = match &spec {
                Some(p) => fs::read_to_string(p).map_err(|e| PvqaeError::io(p, e))?,
                None => String::new(),
            };
            let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| PvqaeError::Config(e.to_string()))?;
            for o in &overrides.set {
                let (k, v) = o
                    .split_once('=')
                    .ok_or_else(|| PvqaeError::Config(format!("override {o:?} is not key=value")))?;
                let value = format!("v = {v}")
                    .parse::<toml::Table>()
                    .ok()
                    .and_then(|mut t| t.remove("v"))
                    .unwrap_or_else(|| toml::Value::String(v.to_string()));
                table.insert(k.trim().to_string(), value);
            }
            let spec: SynthSpec = toml::Value::Table(table)
                .try_into()
                .map_err(|e: toml::de::Error| PvqaeError::Config(e.to_string()))?;
            let ds = synth_texture_dataset(&spec)?;
            write_mvtec_layout(&ds.manifest, &out)?;
            let detail: Vec<Vec<Vec<bool>>> = ds
                .test_truth
                .iter()
                .map(|t| t.detail_cells.rows().into_iter().map(|r| r.to_vec()).collect())
                .collect();
            write_file(&out.join("detail_cells.json"), &serde_json::to_string(&detail)?)?;
            info!("wrote {} train / {} test images to {}", ds.manifest.train.len(), ds.manifest.test.len(), out.display());
        }
        Command::Train { config, data, out, overrides } => {
            let cfg = load_config(&config, &overrides.set)?;
            let manifest = load_data(&data, &cfg)?;
            let (ckpt, logs) = train_stage1(&cfg, &manifest, &mut |_| {})?;
            ckpt.save(&out)?;
            write_file(&out.join("train_log.csv"), &logs_to_csv(&logs, cfg.model.levels))?;
            write_file(&out.join("config.toml"), &cfg.to_toml_string()?)?;
            if let Some(last) = logs.last() {
                println!(
                    "stage1 done: {} steps, reconstruction {:.5}, budget cost {:.3}",
                    last.step, last.reconstruction, last.budget_cost
                );
            }
        }
        Command::TrainPrior { config, ckpt, data, out, overrides } => {
            let cfg = load_config(&config, &overrides.set)?;
            let checkpoint = Checkpoint::load(&ckpt)?;
            let manifest = load_data(&data, checkpoint.config())?;
            let outcome = train_prior_stage(&cfg, checkpoint, &manifest)?;
            let target = out.unwrap_or(ckpt);
            outcome.checkpoint.save(&target)?;
            let mut log = String::from("step,loss\n");
            for (i, l) in outcome.report.losses.iter().enumerate() {
                log.push_str(&format!("{i},{l}\n"));
            }
            write_file(&target.join("prior_log.csv"), &log)?;
            println!(
                "prior done: {} sequences, final loss {:.4}",
                outcome.sequences,
                outcome.report.final_loss()
            );
        }
        Command::Eval { ckpt, data, report, no_prior } => {
            let checkpoint = Checkpoint::load(&ckpt)?;
            let manifest = load_data(&data, checkpoint.config())?;
            let (metrics, _) = evaluate(&checkpoint, &manifest, !no_prior)?;
            metrics.write_csv(&report)?;
            if let Some(o) = metrics.overall() {
                println!("image AUROC {:.4}, pixel AUROC {:.4}", o.image_auroc, o.pixel_auroc);
            }
        }
        Command::Infer { ckpt, image, out, threshold, category } => {
            let checkpoint = Checkpoint::load(&ckpt)?;
            let res = infer(&checkpoint, &image, &out, threshold, category.as_deref())?;
            println!("image score {:.6}; heatmap {}", res.info.image_score, res.heatmap.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
