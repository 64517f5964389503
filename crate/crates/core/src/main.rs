//! Command-line entry point: city generation, pre-training, fine-tuning,
//! evaluation, similarity analysis, attention export and full experiments.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{error, info};

use fepcross::data::{
    few_shot_split, generate_synthetic_city, load_city, normalize_adjacency, save_city, window_at, SyntheticCitySpec,
};
use fepcross::encoder::EncoderModel;
use fepcross::eval::{
    default_horizons, evaluate, export_attention, similarity_analysis, test_windows, write_ndjson, HistoricalAverage,
};
use fepcross::experiment::{run_experiment, write_similarity, ExperimentConfig};
use fepcross::finetune::{finetune_run, FinetuneConfig, ForecastModel};
use fepcross::pretrain::{pretrain_run, PretrainConfig};
use fepcross::{Error, Result};

#[derive(Parser)]
#[command(name = "fepcross", version, about = "Cross-city few-shot traffic forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic city from a JSON specification.
    GenCity {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train the encoder on a source city.
    Pretrain {
        #[arg(long)]
        city: PathBuf,
        /// Pre-training configuration (defaults when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a forecaster on the few-shot head of a target city.
    Finetune {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a fine-tuned model and the historical-average baseline on the held-out range.
    Eval {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated forecast steps to report.
        #[arg(long, value_delimiter = ',')]
        horizons: Option<Vec<usize>>,
        #[arg(long, default_value_t = 12)]
        stride: usize,
        /// Output NDJSON file (one MetricReport per line).
        #[arg(long)]
        out: PathBuf,
    },
    /// Cosine similarity of two cities in the time and frequency domains.
    Similarity {
        #[arg(long)]
        city_a: PathBuf,
        #[arg(long)]
        city_b: PathBuf,
        #[arg(long, default_value_t = 7)]
        days: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the cross-domain attention map of an encoder for one window.
    Attention {
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        city: PathBuf,
        /// First step of the history window.
        #[arg(long, default_value_t = 0)]
        start: usize,
        /// Also write per-node maps.
        #[arg(long)]
        per_node: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a complete experiment from one configuration document.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            Ok(serde_json::from_slice(&bytes)?)
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenCity { spec, seed, out } => {
            let bytes = std::fs::read(&spec).map_err(|e| Error::io(&spec, e))?;
            let spec: SyntheticCitySpec = serde_json::from_slice(&bytes)?;
            let city = generate_synthetic_city(&spec, seed)?;
            save_city(&city, &out)?;
            info!(
                "wrote {} ({} nodes, {} steps) to {}",
                city.name,
                city.num_nodes(),
                city.num_steps(),
                out.display()
            );
        }
        Command::Pretrain { city, config, out } => {
            let city = load_city(&city)?;
            let config: PretrainConfig = read_json(config.as_deref())?;
            pretrain_run(&city, &config, Some(&out))?;
        }
        Command::Finetune {
            target,
            encoder,
            config,
            out,
        } => {
            let city = load_city(&target)?;
            let encoder = EncoderModel::load(&encoder)?;
            let config: FinetuneConfig = read_json(config.as_deref())?;
            let split = few_shot_split(&city, config.few_shot_days)?;
            finetune_run(&city, &split, &encoder, &config, Some(&out))?;
        }
        Command::Eval {
            target,
            model,
            horizons,
            stride,
            out,
        } => {
            let city = load_city(&target)?;
            let model = ForecastModel::load(&model)?;
            let split = few_shot_split(&city, model.config.few_shot_days)?;
            let horizons = horizons.unwrap_or_else(default_horizons);
            let t_h = model.encoder.config.layout.history_len;
            let windows = test_windows(&city, &split, t_h, model.config.horizon, stride)?;
            let ha = HistoricalAverage::fit(&city, split.finetune_steps.clone())?;
            let seed = model.config.seed;
            let reports = vec![
                evaluate("historical_average", "", &city, &windows, &horizons, seed, |w| {
                    Ok(ha.predict(w))
                })?,
                evaluate("model", "", &city, &windows, &horizons, seed, |w| model.forecast(w))?,
            ];
            if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            write_ndjson(&out, &reports)?;
            for r in &reports {
                info!("{}: MAE {:.4}, MAPE {:.3}%", r.model, r.overall_mae, r.overall_mape);
            }
        }
        Command::Similarity {
            city_a,
            city_b,
            days,
            seed,
            out,
        } => {
            let report = similarity_analysis(&load_city(&city_a)?, &load_city(&city_b)?, days, seed)?;
            write_similarity(&report, &out)?;
            info!(
                "time {:.4}, frequency {:.4}",
                report.mean_time_cos, report.mean_freq_cos
            );
        }
        Command::Attention {
            encoder,
            city,
            start,
            per_node,
            out,
        } => {
            let encoder = EncoderModel::load(&encoder)?;
            let city = load_city(&city)?;
            let stats = city.stats();
            let w = window_at(&city, start, encoder.config.layout.history_len, 0, &stats)?;
            let adjacency = normalize_adjacency(&city.adjacency, city.num_nodes())?;
            export_attention(&encoder, &w.history, w.nodes, &adjacency)?.write(&out, per_node)?;
        }
        Command::Run { config, out } => {
            let base = config.parent().map(Path::to_path_buf).unwrap_or_default();
            let config = ExperimentConfig::from_file(&config)?;
            run_experiment(&config, &base, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                error!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
