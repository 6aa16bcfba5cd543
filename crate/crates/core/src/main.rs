use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dualdenoise::config::ExperimentConfig;
use dualdenoise::error::{Error, Result, StageContext};
use dualdenoise::experiment::{self, read_pairs_csv, write_with, FpModel, Pipeline};
use dualdenoise::metrics;
use dualdenoise::noisemodel::{gaussianity_report, JointGaussianModel};
use dualdenoise::sampler::{self, Mode};
use dualdenoise::toymodel::GaussianMixture;

#[derive(Parser)]
#[command(name = "dualdenoise", version, about = "Quantization-noise correction for toy diffusion samplers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (TOML, or JSON by extension).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy noise predictor and save it as JSON.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Calibrate a fake-quantized copy of the net and save it.
    Quantize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Collect (eps_hat, delta) pairs along sampling trajectories.
    Collect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the per-timestep joint Gaussian noise model.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Fit from a pairs CSV written by `collect` instead of collecting.
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw samples under one mode.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Mode,
        /// Noise model JSON; fitted on the fly when absent.
        #[arg(long)]
        noise_model: Option<PathBuf>,
    },
    /// Per-step drift bias and diffusion inflation of the noise model.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        noise_model: Option<PathBuf>,
    },
    /// Run the full pipeline and write all artifacts.
    Experiment {
        #[command(flatten)]
        common: Common,
    },
    /// Compare two sample CSV files.
    Metrics {
        #[command(flatten)]
        common: Common,
        a: PathBuf,
        b: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p).stage("config")?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Config for commands that produce artifacts; these need an explicit file.
fn required_config(common: &Common) -> Result<ExperimentConfig> {
    if common.config.is_none() {
        return Err(Error::Stage { stage: "config", source: Box::new(Error::Config("--config is required".into())) });
    }
    load_config(common)
}

fn output_path(cfg: &ExperimentConfig, explicit: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    if let Some(p) = explicit {
        if let Some(parent) = p.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        return Ok(p.clone());
    }
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    Ok(cfg.output_dir.join(name))
}

fn noise_model(p: &Pipeline, path: &Option<PathBuf>) -> Result<JointGaussianModel> {
    match path {
        Some(path) => JointGaussianModel::load(path).stage("fit"),
        None => {
            let (fp, _) = p.fp_model().stage("model")?;
            let q = p.quant_source(&fp).stage("quantize")?;
            let pairs = p.collect(&fp, &q)?;
            p.noise_model(&pairs, &q)
        }
    }
}

fn announce(path: &Path) {
    println!("wrote {}", path.display());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, out } => {
            let cfg = required_config(&common)?;
            let p = Pipeline::new(cfg).stage("config")?;
            let net = p.train_net().stage("train")?;
            let path = output_path(&p.cfg, &out, "net.json").stage("write")?;
            net.save(&path).stage("write")?;
            announce(&path);
        }
        Command::Quantize { common, out } => {
            let cfg = required_config(&common)?;
            let p = Pipeline::new(cfg).stage("config")?;
            let (fp, _) = p.fp_model().stage("model")?;
            let FpModel::Net { net, .. } = &fp else {
                return Err(Error::Config("quantize requires model.source = \"net\"".into())).stage("config");
            };
            let q = p.quantize(net).stage("quantize")?;
            let path = output_path(&p.cfg, &out, "qnet.json").stage("write")?;
            q.save(&path).stage("write")?;
            announce(&path);
        }
        Command::Collect { common, out } => {
            let cfg = required_config(&common)?;
            let p = Pipeline::new(cfg).stage("config")?;
            let (fp, _) = p.fp_model().stage("model")?;
            let q = p.quant_source(&fp).stage("quantize")?;
            let pairs = p.collect(&fp, &q)?;
            let path = output_path(&p.cfg, &out, "pairs.csv").stage("write")?;
            write_with(&path, |w| experiment::write_pairs_csv(&pairs, w)).stage("write")?;
            announce(&path);
            let report = gaussianity_report(&pairs).stage("gaussianity")?;
            let gpath = path.with_file_name("gaussianity.csv");
            write_with(&gpath, |w| report.write_csv(w)).stage("write")?;
            announce(&gpath);
        }
        Command::Fit { common, pairs, out } => {
            let cfg = required_config(&common)?;
            let p = Pipeline::new(cfg).stage("config")?;
            let model = match pairs {
                Some(path) => JointGaussianModel::fit(&read_pairs_csv(&path).stage("fit")?).stage("fit")?,
                None => noise_model(&p, &None)?,
            };
            let path = output_path(&p.cfg, &out, "noise_model.json").stage("write")?;
            model.save(&path).stage("write")?;
            announce(&path);
        }
        Command::Sample { common, mode, noise_model: nm_path } => {
            let cfg = required_config(&common)?;
            let p = Pipeline::new(cfg).stage("config")?;
            let (fp, _) = p.fp_model().stage("model")?;
            let q = p.quant_source(&fp).stage("quantize")?;
            let model = if mode.needs_noise_model() { Some(noise_model(&p, &nm_path)?) } else { None };
            let out = p.sample(mode, &fp, &q, model.as_ref())?;
            let path = output_path(&p.cfg, &None, &format!("samples_{mode}.csv")).stage("write")?;
            metrics::save_points(&out.points, &path).stage("write")?;
            announce(&path);
            let dpath = p.cfg.output_dir.join(format!("diagnostics_{mode}.csv"));
            write_with(&dpath, |w| sampler::write_diagnostics_csv(&out.diagnostics, w)).stage("write")?;
            announce(&dpath);
        }
        Command::Report { common, noise_model: nm_path } => {
            let cfg = required_config(&common)?;
            let p = Pipeline::new(cfg).stage("config")?;
            let model = noise_model(&p, &nm_path)?;
            let rows = p.perturbation(&model).stage("report")?;
            let path = output_path(&p.cfg, &None, "perturbation.csv").stage("write")?;
            write_with(&path, |w| experiment::write_perturbation_csv(&rows, w)).stage("write")?;
            experiment::write_perturbation_csv(&rows, std::io::stdout().lock())
                .map_err(|e| Error::io("<stdout>", e))?;
        }
        Command::Experiment { common } => {
            let cfg = required_config(&common)?;
            let out = experiment::run_experiment(&cfg)?;
            println!("{}", out.report.to_json()?);
        }
        Command::Metrics { common, a, b } => {
            let mixture = match &common.config {
                Some(_) => load_config(&common)?.mixture().stage("config")?,
                None => GaussianMixture::default(),
            };
            let pa = metrics::load_points(&a).stage("metrics")?;
            let pb = metrics::load_points(&b).stage("metrics")?;
            let m = metrics::compare(&pa, &pb, &mixture).stage("metrics")?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
