//! End-to-end experiment driver: cities, pre-training, fine-tuning,
//! evaluation, similarity analysis, attention export and the ablation ladder,
//! all derived from one JSON document and one root seed.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::data::{
    few_shot_split, generate_synthetic_city, load_city, normalize_adjacency, SyntheticCitySpec, TrafficCity,
};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result, StageContext};
use crate::eval::{
    default_horizons, evaluate, export_attention, similarity_analysis, test_windows, write_ndjson, HistoricalAverage,
    MetricReport, SimilarityReport,
};
use crate::finetune::{finetune_run, FinetuneConfig};
use crate::pretrain::{pretrain_run, PretrainConfig};

pub const METRICS_FILE: &str = "metrics.ndjson";
pub const SIMILARITY_FILE: &str = "similarity.json";

/// A city given either as a directory in the on-disk format or as a
/// synthetic specification (`{"synthetic": {...}, "seed": optional}`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CitySource {
    Directory(PathBuf),
    Synthetic {
        synthetic: SyntheticCitySpec,
        #[serde(default)]
        seed: Option<u64>,
    },
}

impl CitySource {
    /// Load or generate; synthetic cities without their own seed use `fallback_seed`.
    pub fn resolve(&self, base_dir: &Path, fallback_seed: u64) -> Result<TrafficCity> {
        match self {
            CitySource::Directory(p) => load_city(&base_dir.join(p)),
            CitySource::Synthetic { synthetic, seed } => {
                generate_synthetic_city(synthetic, seed.unwrap_or(fallback_seed))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub horizons: Vec<usize>,
    /// Distance between consecutive test window starts.
    pub test_stride: usize,
    pub similarity_window_days: usize,
    /// Also export per-node attention maps.
    pub attention_per_node: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            horizons: default_horizons(),
            test_stride: 12,
            similarity_window_days: 7,
            attention_per_node: false,
        }
    }
}

/// Module switches; all on is the complete model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub frequency_domains: bool,
    pub cross_domain: bool,
    pub cross_space: bool,
    pub contrastive: bool,
    pub momentum_graph: bool,
    pub enrich: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            frequency_domains: true,
            cross_domain: true,
            cross_space: true,
            contrastive: true,
            momentum_graph: true,
            enrich: true,
        }
    }
}

impl AblationFlags {
    fn pretrain_key(&self) -> (bool, bool, bool, bool) {
        (
            self.frequency_domains,
            self.cross_domain,
            self.cross_space,
            self.contrastive,
        )
    }

    pub fn apply(&self, pretrain: &PretrainConfig, finetune: &FinetuneConfig) -> (PretrainConfig, FinetuneConfig) {
        let mut p = pretrain.clone();
        p.encoder.frequency_domains = self.frequency_domains;
        p.encoder.cross_domain = self.cross_domain;
        p.encoder.cross_space = self.cross_space;
        p.contrastive = self.contrastive;
        let mut f = finetune.clone();
        f.momentum_graph = self.momentum_graph;
        if !self.enrich {
            f.enrich_copies = 0;
        }
        (p, f)
    }
}

/// Rungs of the module ablation ladder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Time-domain encoder only, full fine-tuning modules.
    PretrainBase,
    /// Adds amplitude and phase encoders.
    #[serde(rename = "pretrain_base+F")]
    PretrainBaseF,
    /// Adds the cross-domain aggregators.
    #[serde(rename = "pretrain_base+F+D")]
    PretrainBaseFD,
    /// Adds the cross-space aggregator.
    #[serde(rename = "pretrain_base+F+D+S")]
    PretrainBaseFDS,
    /// Complete encoder, no fine-tuning modules.
    FinetuneBase,
    /// Complete encoder with the momentum graph.
    #[serde(rename = "finetune_base+M")]
    FinetuneBaseM,
    /// Everything on.
    Full,
}

impl Variant {
    pub const LADDER: [Variant; 7] = [
        Variant::PretrainBase,
        Variant::PretrainBaseF,
        Variant::PretrainBaseFD,
        Variant::PretrainBaseFDS,
        Variant::FinetuneBase,
        Variant::FinetuneBaseM,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::PretrainBase => "pretrain_base",
            Variant::PretrainBaseF => "pretrain_base+F",
            Variant::PretrainBaseFD => "pretrain_base+F+D",
            Variant::PretrainBaseFDS => "pretrain_base+F+D+S",
            Variant::FinetuneBase => "finetune_base",
            Variant::FinetuneBaseM => "finetune_base+M",
            Variant::Full => "full",
        }
    }

    pub fn flags(self) -> AblationFlags {
        let all = AblationFlags::default();
        let pre = |f, d, s| AblationFlags {
            frequency_domains: f,
            cross_domain: d,
            cross_space: s,
            contrastive: false,
            ..all
        };
        match self {
            Variant::PretrainBase => pre(false, false, false),
            Variant::PretrainBaseF => pre(true, false, false),
            Variant::PretrainBaseFD => pre(true, true, false),
            Variant::PretrainBaseFDS => pre(true, true, true),
            Variant::FinetuneBase => AblationFlags {
                momentum_graph: false,
                enrich: false,
                ..all
            },
            Variant::FinetuneBaseM => AblationFlags { enrich: false, ..all },
            Variant::Full => all,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    /// Switches for the main model.
    pub flags: AblationFlags,
    /// Additional ladder rungs to train and evaluate.
    pub variants: Vec<Variant>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub source_city: CitySource,
    pub target_city: CitySource,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_seed() -> u64 {
    7
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

pub struct ExperimentOutcome {
    /// Historical average first, then the main model, then ablation variants.
    pub reports: Vec<MetricReport>,
    pub similarity: Option<SimilarityReport>,
}

/// Run the pipeline and write every report to `out`. Paths of on-disk cities
/// are resolved relative to `base_dir`.
pub fn run_experiment(config: &ExperimentConfig, base_dir: &Path, out: &Path) -> Result<ExperimentOutcome> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let seed = config.seed;
    let source = config.source_city.resolve(base_dir, seed).stage("load source city")?;
    let target = config
        .target_city
        .resolve(base_dir, seed.wrapping_add(1))
        .stage("load target city")?;
    let resolved = out.join("config.json");
    std::fs::write(&resolved, serde_json::to_vec_pretty(config)?).map_err(|e| Error::io(&resolved, e))?;

    let similarity = if source.num_steps().min(target.num_steps())
        >= config.eval.similarity_window_days * source.steps_per_day()
        && source.interval_minutes == target.interval_minutes
    {
        let r = similarity_analysis(&source, &target, config.eval.similarity_window_days, seed).stage("similarity")?;
        write_similarity(&r, out).stage("similarity")?;
        info!(
            "similarity: time {:.4}, frequency {:.4}",
            r.mean_time_cos, r.mean_freq_cos
        );
        Some(r)
    } else {
        warn!("skipping similarity analysis: cities are too short or sampled differently");
        None
    };

    let mut pretrain_cfg = config.pretrain.clone();
    pretrain_cfg.seed = seed;
    let mut finetune_cfg = config.finetune.clone();
    finetune_cfg.seed = seed;
    let split = few_shot_split(&target, finetune_cfg.few_shot_days).stage("split target city")?;
    let t_h = pretrain_cfg.encoder.layout.history_len;
    let windows =
        test_windows(&target, &split, t_h, finetune_cfg.horizon, config.eval.test_stride).stage("test windows")?;

    let ha = HistoricalAverage::fit(&target, split.finetune_steps.clone()).stage("historical average")?;
    let mut reports = vec![evaluate(
        "historical_average",
        &source.name,
        &target,
        &windows,
        &config.eval.horizons,
        seed,
        |w| Ok(ha.predict(w)),
    )
    .stage("evaluate historical average")?];

    let mut runs: Vec<(String, AblationFlags)> = vec![("main".into(), config.ablation.flags)];
    runs.extend(
        config
            .ablation
            .variants
            .iter()
            .map(|v| (v.name().to_string(), v.flags())),
    );
    let mut encoders: HashMap<(bool, bool, bool, bool), EncoderModel> = HashMap::new();
    let mut main_encoder = None;
    for (name, flags) in &runs {
        let dir = out.join("runs").join(name);
        let (p_cfg, f_cfg) = flags.apply(&pretrain_cfg, &finetune_cfg);
        let encoder = match encoders.get(&flags.pretrain_key()) {
            Some(e) => e.clone(),
            None => {
                info!("{name}: pre-training");
                let e = pretrain_run(&source, &p_cfg, Some(&dir.join("pretrain")))
                    .stage("pretrain")?
                    .model;
                encoders.insert(flags.pretrain_key(), e.clone());
                e
            }
        };
        info!("{name}: fine-tuning");
        let tuned = finetune_run(&target, &split, &encoder, &f_cfg, Some(&dir.join("finetune"))).stage("finetune")?;
        let report = evaluate(
            name,
            &source.name,
            &target,
            &windows,
            &config.eval.horizons,
            seed,
            |w| tuned.model.forecast(w),
        )
        .stage("evaluate")?;
        info!("{name}: test MAE {:.4}", report.overall_mae);
        reports.push(report);
        if main_encoder.is_none() {
            main_encoder = Some(encoder);
        }
    }
    write_ndjson(&out.join(METRICS_FILE), &reports).stage("write metrics")?;

    let encoder = main_encoder.expect("main run always present");
    if encoder.config.cross_domain {
        let w = &windows[0];
        let adjacency = normalize_adjacency(&target.adjacency, target.num_nodes())?;
        export_attention(&encoder, &w.history, w.nodes, &adjacency)
            .and_then(|ex| ex.write(&out.join("attention"), config.eval.attention_per_node))
            .stage("attention export")?;
    }
    Ok(ExperimentOutcome { reports, similarity })
}

/// `similarity.json` (means) plus the two per-pair matrices as CSV.
pub fn write_similarity(report: &SimilarityReport, out: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Summary<'a> {
        city_a: &'a str,
        city_b: &'a str,
        nodes_a: usize,
        nodes_b: usize,
        window_days: usize,
        windows: usize,
        pairs: usize,
        mean_time_cos: f64,
        mean_freq_cos: f64,
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(SIMILARITY_FILE);
    let summary = Summary {
        city_a: &report.city_a,
        city_b: &report.city_b,
        nodes_a: report.nodes_a,
        nodes_b: report.nodes_b,
        window_days: report.window_days,
        windows: report.windows,
        pairs: report.pairs,
        mean_time_cos: report.mean_time_cos,
        mean_freq_cos: report.mean_freq_cos,
    };
    std::fs::write(&path, serde_json::to_vec_pretty(&summary)?).map_err(|e| Error::io(&path, e))?;
    let nb = report.nodes_b;
    for (file, m) in [
        ("similarity_time.csv", &report.time_matrix),
        ("similarity_freq.csv", &report.freq_matrix),
    ] {
        let mut w = csv::Writer::from_path(out.join(file))?;
        w.write_record(["node_a", "node_b", "cosine"])?;
        for (i, v) in m.iter().enumerate() {
            w.write_record(&[(i / nb).to_string(), (i % nb).to_string(), v.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(out.join(file), e))?;
    }
    Ok(())
}
