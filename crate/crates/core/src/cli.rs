//! The `pandense` command line.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::datapipe::{load_manifest, Manifest, SourceImage};
use crate::error::{invalid, io_err, Error, Result};
use crate::model::{FelMode, ModelSpec, PaDNet};
use crate::persist::{heatmap, load_checkpoint, load_checkpoint_matching, read_checkpoint_manifest, save_checkpoint, spec_mismatch, write_dmap};
use crate::pipeline::{evaluate_sources, load_annotated_dir, predict_map, prepare_dir, samples_for, write_prepared};
use crate::raster::Raster;
use crate::synth::{generate_dataset, write_dataset, Profile};
use crate::training::{joint_train, pretrain_subnetworks, split_validation, Sample, TrainLog};

#[derive(Debug, Parser)]
#[command(name = "pandense", version, about = "Pan-density crowd counting")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// `key.path=value` override, applied after the config file. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic annotated dataset.
    Synth {
        #[arg(long)]
        profile: Profile,
        #[arg(long, short = 'm')]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "png")]
        format: String,
    },
    /// Extract, cluster and balance patches; write a manifest and ground-truth maps.
    Prepare {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of density levels (defaults to model.N).
        #[arg(long)]
        levels: Option<usize>,
        /// Neighbours in the dense degree (defaults to data.Q).
        #[arg(long)]
        q: Option<usize>,
    },
    /// Phase one: train each subnetwork with the front-end on its level.
    Pretrain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Phase two: train the whole network jointly.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpoint written by `pretrain`.
        #[arg(long, conflicts_with = "no_pretrain")]
        pretrained: Option<PathBuf>,
        /// Start from fresh parameters.
        #[arg(long)]
        no_pretrain: bool,
        /// Continue from a checkpoint with the identical spec.
        #[arg(long, conflicts_with_all = ["pretrained", "no_pretrain"])]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Count errors of a checkpoint on an annotated directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        n_values: Option<Vec<usize>>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write the predicted density map of one image.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        heatmap: Option<PathBuf>,
    },
    /// Run the built-in self-checks.
    Verify,
}

#[derive(Debug, Args, Clone, Copy, Default)]
pub struct TrainFlags {
    /// Keep the front-end fixed.
    #[arg(long)]
    pub freeze_fen: bool,
    /// Replace the classifier weights with uniform ones.
    #[arg(long)]
    pub ablate_fel: bool,
    /// Drop the raw-map skip connection.
    #[arg(long)]
    pub ablate_skip: bool,
}

impl TrainFlags {
    pub fn apply(&self, cfg: &mut RunConfig) {
        cfg.train.freeze_fen |= self.freeze_fen;
        if self.ablate_fel {
            cfg.model.fel_mode = FelMode::Uniform;
        }
        if self.ablate_skip {
            cfg.model.skip = false;
        }
    }
}

pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn seed_of(cli: &Cli, cfg: &RunConfig) -> u64 {
    cli.seed.unwrap_or(cfg.train.seed)
}

fn manifest_sources(manifest: &Manifest, path: &Path, channels: usize) -> Result<Vec<SourceImage>> {
    let data = manifest.data_dir.as_ref().ok_or_else(|| Error::Invalid(format!("{}: no data_dir", path.display())))?;
    load_annotated_dir(Path::new(data), channels)
}

fn training_set(manifest_path: &Path, cfg: &RunConfig) -> Result<(Manifest, Vec<Sample>)> {
    let manifest = load_manifest(manifest_path)?;
    if manifest.n != cfg.model.levels {
        return invalid(format!("manifest has N = {} but model.N = {}", manifest.n, cfg.model.levels));
    }
    let sources = manifest_sources(&manifest, manifest_path, cfg.model.input_channels)?;
    let samples = samples_for(&manifest, &sources, &cfg.kernel, cfg.model.downsample())?;
    Ok((manifest, samples))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Invalid(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

/// Copies front-end and subnetwork tensors of a pretrained checkpoint into `model`.
/// Both must agree on everything except the fusion settings.
pub fn load_pretrained(model: &mut PaDNet<f32>, dir: &Path) -> Result<()> {
    let found = read_checkpoint_manifest(dir)?.model_spec;
    let want = model.spec().clone();
    let trunk = |s: &ModelSpec| (s.levels, s.channel_scale, s.input_channels, s.fen_channels.clone());
    if trunk(&found) != trunk(&want) {
        return Err(spec_mismatch(&found, &want));
    }
    let src = load_checkpoint(dir)?;
    let ids: Vec<usize> = model.groups().fen.iter().chain(model.groups().dan.iter().flatten()).copied().collect();
    for &id in &ids {
        let name = model.params.get(id).name.clone();
        let sid = src.params.find(&name).ok_or_else(|| Error::Checkpoint(format!("pretrained checkpoint lacks {name}")))?;
        let values = src.params.tensor(sid).data().to_vec();
        model.params.get_mut(id).value.data_mut().copy_from_slice(&values);
    }
    for (i, name) in model.stat_names().to_vec().iter().enumerate() {
        if let Some(j) = src.stat_names().iter().position(|n| n == name) {
            if name.starts_with("fen.") || name.starts_with("dan.") {
                model.stats[i] = src.stats[j].clone();
            }
        }
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve_config(&cli)?;
    let seed = seed_of(&cli, &cfg);
    match &cli.command {
        Command::Synth { profile, count, out, format } => {
            let scenes = generate_dataset(*profile, *count, seed, &cfg.synth)?;
            let files = write_dataset(out, &scenes, format)?;
            println!("wrote {} images to {}", files.len(), out.display());
        }
        Command::Prepare { data, out, levels, q } => {
            if let Some(n) = levels {
                cfg.model.levels = *n;
            }
            if let Some(q) = q {
                cfg.data.q = *q;
            }
            cfg.validate()?;
            let (manifest, sources) = prepare_dir(data, &cfg, seed)?;
            let samples = samples_for(&manifest, &sources, &cfg.kernel, cfg.model.downsample())?;
            let path = write_prepared(out, &manifest, &samples)?;
            println!("{} patches, level sizes {:?} -> {}", manifest.patches.len(), manifest.level_sizes(), path.display());
        }
        Command::Pretrain { manifest, out, flags } => {
            flags.apply(&mut cfg);
            let (_, samples) = training_set(manifest, &cfg)?;
            let levels: Vec<usize> = samples.iter().map(|s| s.level).collect();
            let (train, val) = split_validation(&levels, cfg.model.levels, cfg.train.val_fraction, cfg.train.seed);
            let mut model = PaDNet::<f32>::build(&cfg.model, cfg.train.seed)?;
            std::fs::create_dir_all(out).map_err(io_err(out))?;
            let mut log = TrainLog::streaming(&out.join("train_log.jsonl"))?;
            let outcome = pretrain_subnetworks(&mut model, &samples, &train, &val, &cfg.train, &mut log)?;
            save_checkpoint(&model, &out.join("checkpoint"))?;
            write_json(&out.join("pretrain.json"), &outcome)?;
            println!("pretrained: best val mae per level {:?}", outcome.best_val_mae);
        }
        Command::Train { manifest, pretrained, no_pretrain, resume, out, flags } => {
            flags.apply(&mut cfg);
            let (_, samples) = training_set(manifest, &cfg)?;
            let levels: Vec<usize> = samples.iter().map(|s| s.level).collect();
            let (train, val) = split_validation(&levels, cfg.model.levels, cfg.train.val_fraction, cfg.train.seed);
            let mut model = match resume {
                Some(dir) => load_checkpoint_matching(dir, &cfg.model)?,
                None => PaDNet::<f32>::build(&cfg.model, cfg.train.seed)?,
            };
            match (pretrained, no_pretrain, resume) {
                (Some(dir), _, _) => load_pretrained(&mut model, dir)?,
                (None, true, _) | (None, _, Some(_)) => {}
                (None, false, None) => return invalid("train needs --pretrained DIR, --resume DIR or an explicit --no-pretrain"),
            }
            std::fs::create_dir_all(out).map_err(io_err(out))?;
            let mut log = TrainLog::streaming(&out.join("train_log.jsonl"))?;
            let outcome = joint_train(&mut model, &samples, &train, &val, &cfg.train, &mut log)?;
            save_checkpoint(&model, &out.join("checkpoint"))?;
            write_json(&out.join("train.json"), &outcome)?;
            println!("joint: best val mae {:.4} at epoch {}", outcome.best_val_mae, outcome.best_epoch);
        }
        Command::Eval { checkpoint, data, n_values, out, csv } => {
            let mut model = load_checkpoint(checkpoint)?;
            let sources = load_annotated_dir(data, model.spec().input_channels)?;
            let n_values = n_values.clone().unwrap_or_else(|| cfg.data.n_values.clone());
            let report = evaluate_sources(&mut model, &sources, &cfg.kernel, &n_values)?;
            if let Some(p) = out {
                report.save_json(p)?;
            }
            if let Some(p) = csv {
                report.save_csv(p)?;
            }
            println!("M={} MAE={:.4} RMSE={:.4}", report.m, report.mae, report.rmse);
            for n in &report.n_values {
                println!("n={n} PMAE={:.4} PRMSE={:.4}", report.pmae[n], report.prmse[n]);
            }
        }
        Command::Export { checkpoint, image, out, heatmap: png } => {
            let mut model = load_checkpoint(checkpoint)?;
            let raster = Raster::load(image, model.spec().input_channels)?;
            let map = predict_map(&mut model, &raster)?;
            write_dmap(out, &map)?;
            if let Some(p) = png {
                heatmap(&map).save(p)?;
            }
            println!("count {:.3} -> {}", map.sum(), out.display());
        }
        Command::Verify => {
            let checks = crate::verify::run_checks(seed);
            let failed = checks.iter().filter(|c| !c.passed).count();
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if failed > 0 {
                return Err(Error::Invalid(format!("{failed} check(s) failed")));
            }
        }
    }
    Ok(())
}

/// Entry point of the binary: logging, the thread cap, then the command.
pub fn main() -> std::process::ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = std::env::var("PANDENSE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        pandense_tensor::init_thread_pool(n);
    }
    match run(Cli::parse()) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::FAILURE
        }
    }
}
