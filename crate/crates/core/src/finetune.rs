//! Few-shot adaptation on the target city.
//!
//! The frozen encoder contributes two things: reconstructions used to enrich
//! the tiny training set, and node embeddings used both as a forecasting
//! feature and to refine the graph through a momentum-updated meta-graph.
//! A small gated dilated-convolution / diffusion-convolution backbone reads
//! the most recent patch, and a linear head maps the concatenated embeddings
//! to the next `T_f` steps.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use log::info;
use numcore::{init, load_checkpoint, save_checkpoint, Adam, AdamConfig, Graph, ParamStore, Scalar, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{normalize_adjacency, window_at, window_starts, FewShotSplit, NormStats, TrafficCity, Window};
use crate::encoder::{EncoderModel, PoolMode};
use crate::error::{Error, Result};
use crate::spectral::Domain;

pub const LOG_FILE: &str = "finetune_log.ndjson";
pub const META_FILE: &str = "forecast_meta.json";
pub const GRAPH_PARAM: &str = "graph/A_hat";

// ---- momentum graph ---------------------------------------------------------

/// Refined adjacency kept as an exponential moving average of meta-graphs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentumGraph {
    pub nodes: usize,
    /// `[N][N]` row-stochastic.
    pub a_hat: Vec<f64>,
    pub k: u64,
    pub tau: f64,
}

impl MomentumGraph {
    /// Start from the row-normalised raw adjacency.
    pub fn new(adjacency: &[f64], nodes: usize, tau: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::Config(format!("tau {tau} outside [0, 1]")));
        }
        Ok(MomentumGraph {
            nodes,
            a_hat: normalize_adjacency(adjacency, nodes)?,
            k: 0,
            tau,
        })
    }

    /// `A_k = tau * A_meta + (1 - tau) * A_{k-1}`.
    pub fn update(&mut self, meta: &[f64]) -> Result<()> {
        if meta.len() != self.a_hat.len() {
            return Err(Error::shape("meta-graph entries", self.a_hat.len(), meta.len()));
        }
        let tau = self.tau;
        for (a, &m) in self.a_hat.iter_mut().zip(meta) {
            *a = tau * m + (1.0 - tau) * *a;
        }
        self.k += 1;
        Ok(())
    }
}

/// Functional form of [`MomentumGraph::update`] with an explicit `tau`.
pub fn momentum_update(graph: &MomentumGraph, meta: &[f64], tau: f64) -> Result<MomentumGraph> {
    let mut g = MomentumGraph { tau, ..graph.clone() };
    g.update(meta)?;
    g.tau = graph.tau;
    Ok(g)
}

/// Row-wise softmax of `H H^T` for `H: [N, d]`.
pub fn build_meta_graph(h: &Tensor<f32>) -> Result<Vec<f64>> {
    if h.rank() != 2 {
        return Err(Error::shape("meta-graph embedding rank", 2, h.rank()));
    }
    if !h.is_finite() {
        return Err(Error::NonFinite {
            what: "meta-graph embedding".into(),
            detail: "input contains NaN or infinity".into(),
        });
    }
    let (n, d) = (h.shape()[0], h.shape()[1]);
    let x = h.to_f64_vec();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let row = &mut out[i * n..(i + 1) * n];
        for (j, r) in row.iter_mut().enumerate() {
            *r = (0..d).map(|c| x[i * d + c] * x[j * d + c]).sum();
        }
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for r in row.iter_mut() {
            *r = (*r - mx).exp();
            s += *r;
        }
        row.iter_mut().for_each(|r| *r /= s);
    }
    Ok(out)
}

// ---- configuration ------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Windows per optimizer step.
    pub batch_size: usize,
    pub enrich_mask_ratio: f64,
    /// Augmented copies per original window (0 disables enriching).
    pub enrich_copies: usize,
    pub tau: f64,
    /// Refine the graph with momentum updates (off: keep the normalised raw graph).
    pub momentum_graph: bool,
    /// Keep encoder parameters fixed (off: fine-tune them too).
    pub freeze_encoder: bool,
    /// Distance between consecutive training window starts.
    pub window_stride: usize,
    /// Windows in the fixed batch that drives momentum updates.
    pub probe_windows: usize,
    pub horizon: usize,
    pub short_term_len: usize,
    pub few_shot_days: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            learning_rate: 1e-3,
            weight_decay: 0.01,
            epochs: 50,
            batch_size: 8,
            enrich_mask_ratio: 0.25,
            enrich_copies: 1,
            tau: 0.1,
            momentum_graph: true,
            freeze_encoder: true,
            window_stride: 12,
            probe_windows: 4,
            horizon: 12,
            short_term_len: 12,
            few_shot_days: 2,
            seed: 7,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.enrich_mask_ratio) {
            return Err(Error::Config(format!(
                "enrich_mask_ratio {} outside [0, 1)",
                self.enrich_mask_ratio
            )));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [0, 1]", self.tau)));
        }
        if self.batch_size == 0 || self.window_stride == 0 || self.horizon == 0 || self.short_term_len == 0 {
            return Err(Error::Config(
                "batch_size, window_stride, horizon and short_term_len must be positive".into(),
            ));
        }
        Ok(())
    }
}

// ---- enrichment ---------------------------------------------------------------

/// The originals followed by `copies` augmented versions of each. A copy masks
/// `ceil(ratio * P)` patches per domain, reconstructs them with the encoder
/// and splices the reconstructed time patches into the masked positions; all
/// other history values and the targets are copied unchanged.
pub fn enrich_training_data<R: Rng + ?Sized>(
    windows: &[Window],
    encoder: &EncoderModel,
    adjacency: &[f64],
    ratio: f64,
    copies: usize,
    rng: &mut R,
) -> Result<Vec<Window>> {
    let mut out = windows.to_vec();
    let layout = encoder.config.layout;
    let width = layout.time_len();
    for _ in 0..copies {
        for w in windows {
            if w.history_len != layout.history_len {
                return Err(Error::shape(
                    "enrichment history length",
                    layout.history_len,
                    w.history_len,
                ));
            }
            let mut sample = encoder.config.sample(&w.history, w.nodes)?;
            sample.mask_with(ratio, rng);
            let mut copy = w.clone();
            let time_mask = &sample.domain(Domain::Time).mask;
            if time_mask.iter().any(|&m| m) {
                let recon = encoder.reconstruct(&encoder.encode(&sample, adjacency)?)?;
                let rt = recon[0].data();
                for (slot, _) in time_mask.iter().enumerate().filter(|(_, &m)| m) {
                    let s = slot * width;
                    copy.history[s..s + width].copy_from_slice(&rt[s..s + width]);
                }
            }
            out.push(copy);
        }
    }
    Ok(out)
}

// ---- spatial-temporal backbone -----------------------------------------------

pub const ST_BLOCKS: usize = 2;
const DILATIONS: [usize; ST_BLOCKS] = [1, 2];
const DIFFUSION_ORDER: usize = 2;
const EMBEDDING_NORM_EPS: f64 = 1e-5;

/// Parameter store with the backbone (`st/...`) and forecast head (`head/...`).
#[derive(Clone, Debug)]
pub struct StModel<T: Scalar = f32> {
    pub d_model: usize,
    pub input_len: usize,
    pub horizon: usize,
    pub params: ParamStore<T>,
}

/// Intermediate backbone values for inspection: per-step activations before
/// the output projection (`[B, N, T_in, d]`) and the embedding (`[B, N, d]`).
pub struct StOutput {
    pub per_step: Var,
    pub embedding: Var,
}

impl<T: Scalar> StModel<T> {
    /// Xavier-initialised backbone and a zero-initialised forecast head.
    pub fn new(d_model: usize, input_len: usize, horizon: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = d_model;
        let mut params = ParamStore::new();
        let mut reg = |name: String, t: Tensor<T>| params.register(name, t).map(|_| ());
        reg("st/start/w".into(), init::xavier_uniform(&mut rng, 1, d))?;
        reg("st/start/b".into(), Tensor::zeros(&[d]))?;
        for b in 0..ST_BLOCKS {
            reg(
                format!("st/block{b}/conv/w"),
                init::xavier_uniform(&mut rng, 2 * d, 2 * d),
            )?;
            reg(format!("st/block{b}/conv/b"), Tensor::zeros(&[2 * d]))?;
            reg(
                format!("st/block{b}/gc/w"),
                init::xavier_uniform(&mut rng, (DIFFUSION_ORDER + 1) * d, d),
            )?;
            reg(format!("st/block{b}/gc/b"), Tensor::zeros(&[d]))?;
            reg(format!("st/block{b}/skip/w"), init::xavier_uniform(&mut rng, d, d))?;
            reg(format!("st/block{b}/skip/b"), Tensor::zeros(&[d]))?;
        }
        reg("st/out/w".into(), init::xavier_uniform(&mut rng, input_len * d, d))?;
        reg("st/out/b".into(), Tensor::zeros(&[d]))?;
        reg("head/w".into(), Tensor::zeros(&[2 * d, horizon]))?;
        reg("head/b".into(), Tensor::zeros(&[horizon]))?;
        Ok(StModel {
            d_model,
            input_len,
            horizon,
            params,
        })
    }

    pub fn cast<U: Scalar>(&self) -> StModel<U> {
        StModel {
            d_model: self.d_model,
            input_len: self.input_len,
            horizon: self.horizon,
            params: self.params.cast(),
        }
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.by_name(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let id = self.params.id(name)?;
        Some(self.params.get_mut(id))
    }

    fn var(&self, vars: &[Var], name: &str) -> Var {
        vars[self
            .params
            .id(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .index()]
    }

    /// `A x` along the node axis of `x: [B, N, T, d]` with a shared `[N, N]` matrix.
    fn diffuse(g: &mut Graph<T>, a: Var, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let xt = g.permute(x, &[1, 0, 2, 3])?;
        let flat = g.reshape(xt, &[s[1], s[0] * s[2] * s[3]])?;
        let mixed = g.matmul(a, flat)?;
        let mixed = g.reshape(mixed, &[s[1], s[0], s[2], s[3]])?;
        Ok(g.permute(mixed, &[1, 0, 2, 3])?)
    }

    /// Backbone on `x: [B, N, T_in]` (normalised recent steps) over the
    /// `[N, N]` graph `adjacency`.
    pub fn forward_graph(&self, g: &mut Graph<T>, vars: &[Var], x: Var, adjacency: &[f64]) -> Result<StOutput> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.input_len {
            return Err(Error::shape(
                "short-term input",
                format!("[B, N, {}]", self.input_len),
                format!("{s:?}"),
            ));
        }
        let (bs, n, t, d) = (s[0], s[1], s[2], self.d_model);
        if adjacency.len() != n * n {
            return Err(Error::shape("backbone adjacency", n * n, adjacency.len()));
        }
        let p = |name: &str| self.var(vars, name);
        let a = g.constant(Tensor::from_f64(&[n, n], adjacency)?);
        let x4 = g.reshape(x, &[bs, n, t, 1])?;
        let mut h = g.linear(x4, p("st/start/w"), Some(p("st/start/b")))?;
        let mut skip: Option<Var> = None;
        for (b, &dil) in DILATIONS.iter().enumerate() {
            // Causal kernel-2 convolution: combine step t - dilation with step t.
            let shifted = if dil >= t {
                g.constant(Tensor::zeros(&[bs, n, t, d]))
            } else {
                let pad = g.constant(Tensor::zeros(&[bs, n, dil, d]));
                let past = g.narrow(h, 2, 0, t - dil)?;
                g.concat(&[pad, past], 2)?
            };
            let pair = g.concat(&[shifted, h], 3)?;
            let fg = g.linear(
                pair,
                p(&format!("st/block{b}/conv/w")),
                Some(p(&format!("st/block{b}/conv/b"))),
            )?;
            let parts = g.split(fg, 3, &[d, d])?;
            let filt = g.tanh(parts[0]);
            let gate = g.sigmoid(parts[1]);
            let z = g.mul(filt, gate)?;

            let mut terms = vec![z];
            let mut cur = z;
            for _ in 0..DIFFUSION_ORDER {
                cur = Self::diffuse(g, a, cur)?;
                terms.push(cur);
            }
            let cat = g.concat(&terms, 3)?;
            let gc = g.linear(
                cat,
                p(&format!("st/block{b}/gc/w")),
                Some(p(&format!("st/block{b}/gc/b"))),
            )?;
            h = g.add(h, gc)?;

            let sk = g.linear(
                z,
                p(&format!("st/block{b}/skip/w")),
                Some(p(&format!("st/block{b}/skip/b"))),
            )?;
            skip = Some(match skip {
                Some(acc) => g.add(acc, sk)?,
                None => sk,
            });
        }
        let per_step = g.relu(skip.expect("at least one block"));
        let flat = g.reshape(per_step, &[bs, n, t * d])?;
        let embedding = g.linear(flat, p("st/out/w"), Some(p("st/out/b")))?;
        Ok(StOutput { per_step, embedding })
    }

    /// Forecast head: `[B, N, d]` encoder and backbone embeddings to
    /// normalised predictions `[B, N, T_f]`.
    pub fn head_graph(&self, g: &mut Graph<T>, vars: &[Var], h_enc: Var, h_st: Var) -> Result<Var> {
        // Encoder features arrive on the scale of raw spectral amplitudes;
        // standardise them per node so the head sees both inputs comparably.
        let h_enc = g.layer_norm(h_enc, EMBEDDING_NORM_EPS)?;
        let cat = g.concat(&[h_enc, h_st], 2)?;
        Ok(g.linear(cat, self.var(vars, "head/w"), Some(self.var(vars, "head/b")))?)
    }

    /// Tape-free backbone embedding for one window: `[N, T_in]` to `[N, d]`.
    pub fn st_forward(&self, short_term: &Tensor<T>, adjacency: &[f64]) -> Result<Tensor<T>> {
        let s = short_term.shape().to_vec();
        if s.len() != 2 {
            return Err(Error::shape("short-term input rank", 2, s.len()));
        }
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let x = g.constant(short_term.clone().reshape(&[1, s[0], s[1]])?);
        let out = self.forward_graph(&mut g, &vars, x, adjacency)?;
        Ok(g.value(out.embedding).clone().reshape(&[s[0], self.d_model])?)
    }

    /// Per-step pre-projection activations `[N, T_in, d]` for one window.
    pub fn st_activations(&self, short_term: &Tensor<T>, adjacency: &[f64]) -> Result<Tensor<T>> {
        let s = short_term.shape().to_vec();
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let x = g.constant(short_term.clone().reshape(&[1, s[0], s[1]])?);
        let out = self.forward_graph(&mut g, &vars, x, adjacency)?;
        Ok(g.value(out.per_step).clone().reshape(&[s[0], s[1], self.d_model])?)
    }
}

// ---- forecasting model ----------------------------------------------------------

/// Everything needed to forecast a target-city window.
#[derive(Clone, Debug)]
pub struct ForecastModel {
    pub encoder: EncoderModel,
    pub st: StModel,
    pub graph: MomentumGraph,
    /// Row-normalised raw adjacency used by the encoder's cross-space step.
    pub encoder_adjacency: Vec<f64>,
    pub stats: NormStats,
    pub config: FinetuneConfig,
}

#[derive(Serialize, Deserialize)]
struct ForecastMeta {
    stats: NormStats,
    graph_k: u64,
    tau: f64,
    nodes: usize,
    encoder_adjacency: Vec<f64>,
    config: FinetuneConfig,
    encoder: crate::encoder::EncoderConfig,
}

impl ForecastModel {
    /// Encoder node embedding (`"sum"` pooling) of an unmasked history.
    pub fn encoder_embedding(&self, window: &Window) -> Result<Tensor<f32>> {
        let sample = self.encoder.config.sample(&window.history, window.nodes)?;
        let enc = self.encoder.encode(&sample, &self.encoder_adjacency)?;
        self.encoder.pool_node_embedding(&enc, PoolMode::Sum)
    }

    /// Normalised `[N, T_f]` forecast for one window.
    pub fn forecast_normalized(&self, window: &Window) -> Result<Tensor<f32>> {
        let h = self.encoder_embedding(window)?;
        self.forecast_with_embedding(window, &h)
    }

    fn forecast_with_embedding(&self, window: &Window, h_enc: &Tensor<f32>) -> Result<Tensor<f32>> {
        let n = window.nodes;
        let mut g = Graph::new();
        let vars = self.st.params.bind(&mut g, false);
        let x = g.constant(Tensor::new(
            &[1, n, self.st.input_len],
            window.recent(self.st.input_len),
        )?);
        let st = self.st.forward_graph(&mut g, &vars, x, &self.graph.a_hat)?;
        let he = g.constant(h_enc.clone().reshape(&[1, n, self.st.d_model])?);
        let y = self.st.head_graph(&mut g, &vars, he, st.embedding)?;
        Ok(g.value(y).clone().reshape(&[n, self.st.horizon])?)
    }

    /// Forecast in raw speed units, `[N, T_f]` node-major.
    pub fn forecast(&self, window: &Window) -> Result<Vec<f32>> {
        Ok(denormalize(&self.forecast_normalized(window)?, &self.stats))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let n = self.graph.nodes;
        let a_hat = Tensor::from_f64(&[n, n], &self.graph.a_hat)?;
        let entries = self
            .encoder
            .params
            .iter()
            .chain(self.st.params.iter())
            .chain(std::iter::once((GRAPH_PARAM, &a_hat)));
        save_checkpoint(dir, entries)?;
        let meta = ForecastMeta {
            stats: self.stats,
            graph_k: self.graph.k,
            tau: self.graph.tau,
            nodes: n,
            encoder_adjacency: self.encoder_adjacency.clone(),
            config: self.config.clone(),
            encoder: self.encoder.config.clone(),
        };
        let path = dir.join(META_FILE);
        std::fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(META_FILE);
        let meta: ForecastMeta = serde_json::from_slice(&std::fs::read(&path).map_err(|e| Error::io(&path, e))?)?;
        let entries = load_checkpoint(dir)?;
        let by_name: HashMap<&str, &Tensor<f32>> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut encoder = EncoderModel::new(meta.encoder.clone(), 0)?;
        encoder.params.load_from(
            entries
                .iter()
                .filter(|(n, _)| n.starts_with(crate::encoder::PARAM_PREFIX))
                .map(|(n, t)| (n.as_str(), t)),
        )?;
        let mut st = StModel::new(
            encoder.config.d_model,
            meta.config.short_term_len,
            meta.config.horizon,
            0,
        )?;
        st.params.load_from(
            entries
                .iter()
                .filter(|(n, _)| n.starts_with("st/") || n.starts_with("head/"))
                .map(|(n, t)| (n.as_str(), t)),
        )?;
        let a = by_name
            .get(GRAPH_PARAM)
            .ok_or_else(|| Error::Data(format!("checkpoint lacks {GRAPH_PARAM}")))?;
        Ok(ForecastModel {
            encoder,
            st,
            graph: MomentumGraph {
                nodes: meta.nodes,
                a_hat: a.to_f64_vec(),
                k: meta.graph_k,
                tau: meta.tau,
            },
            encoder_adjacency: meta.encoder_adjacency,
            stats: meta.stats,
            config: meta.config,
        })
    }
}

pub fn denormalize(t: &Tensor<f32>, stats: &NormStats) -> Vec<f32> {
    t.data().iter().map(|&z| stats.denormalize(z as f64) as f32).collect()
}

// ---- training -------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub epoch: usize,
    pub loss: f64,
    pub windows: usize,
    pub graph_k: u64,
    pub wall_ms: u64,
}

pub struct FinetuneOutcome {
    pub model: ForecastModel,
    pub log: Vec<FinetuneRecord>,
}

/// Training windows over the fine-tune range of `split`.
pub fn finetune_windows(
    city: &TrafficCity,
    split: &FewShotSplit,
    config: &FinetuneConfig,
    history_len: usize,
) -> Result<Vec<Window>> {
    window_starts(&split.finetune_steps, history_len, config.horizon, config.window_stride)?
        .into_iter()
        .map(|s| window_at(city, s, history_len, config.horizon, &split.normalization_stats))
        .collect()
}

fn stack(rows: &[Vec<f32>], shape: &[usize]) -> Result<Tensor<f32>> {
    Ok(Tensor::new(shape, rows.concat())?)
}

/// Fine-tune the backbone and head on the target city's few-shot range.
pub fn finetune_run(
    city: &TrafficCity,
    split: &FewShotSplit,
    encoder: &EncoderModel,
    config: &FinetuneConfig,
    out: Option<&Path>,
) -> Result<FinetuneOutcome> {
    config.validate()?;
    let n = city.num_nodes();
    let t_h = encoder.config.layout.history_len;
    let d = encoder.config.d_model;
    let originals = finetune_windows(city, split, config, t_h)?;
    let encoder_adjacency = normalize_adjacency(&city.adjacency, n)?;
    let mut model = ForecastModel {
        encoder: encoder.clone(),
        st: StModel::new(d, config.short_term_len, config.horizon, config.seed)?,
        graph: MomentumGraph::new(&city.adjacency, n, config.tau)?,
        encoder_adjacency,
        stats: split.normalization_stats,
        config: config.clone(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xf1e7_0003);
    let mut st_opt = Adam::new(AdamConfig::new(config.learning_rate).with_weight_decay(config.weight_decay));
    let mut enc_opt = Adam::new(AdamConfig::new(config.learning_rate).with_weight_decay(config.weight_decay));

    // Frozen encoder: embeddings of the unaugmented windows never change.
    let mut cached: Vec<Option<Tensor<f32>>> = vec![None; originals.len()];
    if config.freeze_encoder {
        for (c, w) in cached.iter_mut().zip(&originals) {
            *c = Some(model.encoder_embedding(w)?);
        }
    }
    let probe: Vec<usize> = {
        let mut idx: Vec<usize> = (0..originals.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(config.probe_windows.max(1));
        idx
    };
    info!(
        "fine-tuning on {}: {} windows, {} epochs",
        city.name,
        originals.len(),
        config.epochs
    );

    let mut log_writer = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            Some(BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?))
        }
        None => None,
    };
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let t0 = Instant::now();
        let copies = config.enrich_copies;
        let windows = enrich_training_data(
            &originals,
            &model.encoder,
            &model.encoder_adjacency,
            config.enrich_mask_ratio,
            copies,
            &mut rng,
        )?;

        if config.momentum_graph {
            let mut meta = vec![0.0; n * n];
            for &i in &probe {
                let h = match &cached[i] {
                    Some(h) => h.clone(),
                    None => model.encoder_embedding(&originals[i])?,
                };
                for (m, v) in meta.iter_mut().zip(build_meta_graph(&h)?) {
                    *m += v / probe.len() as f64;
                }
            }
            model.graph.update(&meta)?;
        }

        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let bs = chunk.len();
            let mut g = Graph::new();
            let st_vars = model.st.params.bind(&mut g, true);
            let recent: Vec<Vec<f32>> = chunk
                .iter()
                .map(|&i| windows[i].recent(config.short_term_len))
                .collect();
            let x = g.constant(stack(&recent, &[bs, n, config.short_term_len])?);
            let st = model.st.forward_graph(&mut g, &st_vars, x, &model.graph.a_hat)?;

            let frozen = config.freeze_encoder;
            let enc_model = model.encoder.clone();
            let enc_bound = if frozen {
                None
            } else {
                Some(enc_model.bind(&mut g, true))
            };
            let h_enc = match &enc_bound {
                None => {
                    let mut hs = Vec::with_capacity(bs);
                    for &i in chunk {
                        let h = match cached.get(i).and_then(Option::as_ref) {
                            Some(h) => h.clone(),
                            None => model.encoder_embedding(&windows[i])?,
                        };
                        hs.push(h.into_data());
                    }
                    g.constant(stack(&hs, &[bs, n, d])?)
                }
                Some(b) => {
                    let mut hs = Vec::with_capacity(bs);
                    for &i in chunk {
                        let sample = enc_model.config.sample(&windows[i].history, n)?;
                        let enc = enc_model.encode_graph(&mut g, b, &sample, &model.encoder_adjacency)?;
                        let pooled = enc_model.pool_graph(&mut g, b, &enc.domains, PoolMode::Sum)?;
                        hs.push(g.reshape(pooled, &[1, n, d])?);
                    }
                    g.concat(&hs, 0)?
                }
            };
            let pred = model.st.head_graph(&mut g, &st_vars, h_enc, st.embedding)?;
            let futures: Vec<Vec<f32>> = chunk.iter().map(|&i| windows[i].future.clone()).collect();
            let target = g.constant(stack(&futures, &[bs, n, config.horizon])?);
            let loss = g.mse(pred, target)?;
            let lv = g.value(loss).item() as f64;
            if !lv.is_finite() {
                return Err(Error::NonFinite {
                    what: "fine-tuning loss".into(),
                    detail: format!(
                        "epoch {epoch}, window starts {:?}",
                        chunk.iter().map(|&i| windows[i].start).collect::<Vec<_>>()
                    ),
                });
            }
            let grads = g.backward(loss)?;
            model.st.params.apply_adam(&mut st_opt, &grads, &st_vars)?;
            if let Some(b) = &enc_bound {
                model.encoder.params.apply_adam(&mut enc_opt, &grads, b.vars())?;
            }
            loss_sum += lv;
            batches += 1;
        }
        if !config.freeze_encoder {
            // Embedding cache is only valid for a frozen encoder.
            cached.iter_mut().for_each(|c| *c = None);
        }
        let record = FinetuneRecord {
            epoch,
            loss: loss_sum / batches.max(1) as f64,
            windows: windows.len(),
            graph_k: model.graph.k,
            wall_ms: t0.elapsed().as_millis() as u64,
        };
        info!(
            "fine-tune epoch {epoch}: loss {:.5} ({} ms)",
            record.loss, record.wall_ms
        );
        if let Some(w) = log_writer.as_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            writeln!(w).map_err(|e| Error::io(LOG_FILE, e))?;
        }
        log.push(record);
    }
    if let Some(w) = log_writer.as_mut() {
        w.flush().map_err(|e| Error::io(LOG_FILE, e))?;
    }
    if let Some(dir) = out {
        model.save(dir)?;
    }
    Ok(FinetuneOutcome { model, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{few_shot_split, generate_synthetic_city, SyntheticCitySpec};
    use crate::encoder::EncoderConfig;
    use crate::spectral::PatchLayout;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn momentum_example_row() {
        let mut g = MomentumGraph {
            nodes: 2,
            a_hat: vec![0.5, 0.5, 0.5, 0.5],
            k: 0,
            tau: 0.1,
        };
        g.update(&[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(&g.a_hat[..2], &[0.55, 0.45]);
        assert_eq!(g.k, 1);
        let same = momentum_update(&g, &[0.0, 1.0, 0.0, 1.0], 0.0).unwrap();
        assert_eq!(same.a_hat, g.a_hat);
        assert_eq!(same.k, 2);
        assert!(g.update(&[1.0]).is_err());
    }

    #[test]
    fn meta_graph_cases() {
        let same = Tensor::new(&[3, 2], vec![0.3, -1.0, 0.3, -1.0, 0.3, -1.0]).unwrap();
        let m = build_meta_graph(&same).unwrap();
        assert!(m.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
        assert_eq!(
            build_meta_graph(&Tensor::new(&[1, 4], vec![1.0; 4]).unwrap()).unwrap(),
            vec![1.0]
        );
        let r = build_meta_graph(&rand_tensor(&[5, 7], 1)).unwrap();
        for row in r.chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let bad = Tensor::new(&[1, 1], vec![f32::NAN]).unwrap();
        assert!(build_meta_graph(&bad).is_err());
    }

    #[test]
    fn identity_graph_has_no_cross_node_dependence() {
        let st = StModel::<f32>::new(16, 12, 12, 1).unwrap();
        let eye: Vec<f64> = (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
        let x = rand_tensor(&[4, 12], 2);
        let base = st.st_forward(&x, &eye).unwrap();
        let mut y = x.clone();
        for t in 0..12 {
            y.data_mut()[2 * 12 + t] += 1.0;
        }
        let pert = st.st_forward(&y, &eye).unwrap();
        for node in [0, 1, 3] {
            for c in 0..16 {
                assert_eq!(base.data()[node * 16 + c], pert.data()[node * 16 + c]);
            }
        }
        assert!((0..16).any(|c| base.data()[32 + c] != pert.data()[32 + c]));
    }

    #[test]
    fn backbone_is_causal() {
        let st = StModel::<f32>::new(16, 12, 12, 3).unwrap();
        let a = normalize_adjacency(&[0.0, 1.0, 1.0, 0.0], 2).unwrap();
        let x = rand_tensor(&[2, 12], 4);
        let base = st.st_activations(&x, &a).unwrap();
        for t in [3usize, 7, 11] {
            let mut y = x.clone();
            y.data_mut()[t] += 0.7;
            let pert = st.st_activations(&y, &a).unwrap();
            for node in 0..2 {
                for s in 0..12 {
                    let row = |v: &Tensor<f32>| v.data()[(node * 12 + s) * 16..(node * 12 + s + 1) * 16].to_vec();
                    if s < t {
                        assert_eq!(row(&base), row(&pert), "step {s} changed by input {t}");
                    }
                }
            }
            assert!(base.max_abs_diff(&pert) > 0.0);
        }
    }

    #[test]
    fn zero_head_predicts_split_mean() {
        let cfg = EncoderConfig {
            d_model: 8,
            heads: 2,
            ff_mult: 2,
            layout: PatchLayout {
                history_len: 16,
                patches: 4,
            },
            ..EncoderConfig::default()
        };
        let n = 3;
        let model = ForecastModel {
            encoder: EncoderModel::new(cfg, 1).unwrap(),
            st: StModel::new(8, 4, 12, 1).unwrap(),
            graph: MomentumGraph::new(&[0.0; 9], n, 0.1).unwrap(),
            encoder_adjacency: normalize_adjacency(&[0.0; 9], n).unwrap(),
            stats: NormStats { mean: 42.5, std: 3.0 },
            config: FinetuneConfig::default(),
        };
        let w = Window {
            start: 0,
            nodes: n,
            history_len: 16,
            horizon: 12,
            history: rand_tensor(&[n * 16], 5).into_data(),
            future: vec![0.0; n * 12],
            future_raw: vec![0.0; n * 12],
        };
        let y = model.forecast(&w).unwrap();
        assert_eq!(y.len(), n * 12);
        assert!(y.iter().all(|&v| v == 42.5));
    }

    fn tiny_setup() -> (TrafficCity, FewShotSplit, EncoderModel) {
        let spec = SyntheticCitySpec::canonical("t", 4, 7);
        let city = generate_synthetic_city(&spec, 11).unwrap();
        let split = few_shot_split(&city, 2).unwrap();
        let cfg = EncoderConfig {
            d_model: 16,
            heads: 2,
            ff_mult: 2,
            ..EncoderConfig::default()
        };
        (city, split, EncoderModel::new(cfg, 2).unwrap())
    }

    #[test]
    fn enrichment_keeps_unmasked_content() {
        let (city, split, enc) = tiny_setup();
        let cfg = FinetuneConfig {
            window_stride: 96,
            ..FinetuneConfig::default()
        };
        let wins = finetune_windows(&city, &split, &cfg, 288).unwrap();
        let adj = normalize_adjacency(&city.adjacency, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            enrich_training_data(&wins, &enc, &adj, 0.25, 0, &mut rng).unwrap(),
            wins
        );
        let none = enrich_training_data(&wins, &enc, &adj, 0.0, 1, &mut rng).unwrap();
        assert_eq!(&none[wins.len()..], &wins[..]);
        let out = enrich_training_data(&wins, &enc, &adj, 0.25, 2, &mut rng).unwrap();
        assert_eq!(out.len(), 3 * wins.len());
        for (k, aug) in out[wins.len()..].iter().enumerate() {
            let orig = &wins[k % wins.len()];
            assert_eq!(aug.future, orig.future);
            let changed_patches = (0..4 * 24)
                .filter(|p| aug.history[p * 12..(p + 1) * 12] != orig.history[p * 12..(p + 1) * 12])
                .count();
            // 6 of 24 patches per node may change; everything else is identical.
            assert!(changed_patches <= 4 * 6);
            assert!(changed_patches > 0);
        }
    }

    #[test]
    fn run_bookkeeping_and_frozen_encoder() {
        let (city, split, enc) = tiny_setup();
        let cfg = FinetuneConfig {
            epochs: 2,
            window_stride: 48,
            ..FinetuneConfig::default()
        };
        let before = enc.snapshot();
        let out = finetune_run(&city, &split, &enc, &cfg, None).unwrap();
        assert_eq!(out.model.graph.k, 2);
        assert_eq!(out.log.len(), 2);
        assert_eq!(out.model.encoder.snapshot(), before);
        for row in out.model.graph.a_hat.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
        let zero = finetune_run(&city, &split, &enc, &FinetuneConfig { epochs: 0, ..cfg }, None).unwrap();
        assert!(zero.model.st.param("head/w").unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(zero.model.graph.k, 0);
    }

    #[test]
    fn forecast_checkpoint_round_trip() {
        let (city, split, enc) = tiny_setup();
        let cfg = FinetuneConfig {
            epochs: 1,
            window_stride: 96,
            ..FinetuneConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let out = finetune_run(&city, &split, &enc, &cfg, Some(dir.path())).unwrap();
        let back = ForecastModel::load(dir.path()).unwrap();
        let w = window_at(&city, 700, 288, 12, &split.normalization_stats).unwrap();
        assert_eq!(out.model.forecast(&w).unwrap().len(), 48);
        let a = out.model.forecast(&w).unwrap();
        let b = back.forecast(&w).unwrap();
        // The graph is stored in f32, so allow rounding-level differences.
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-3));
        assert_eq!(back.graph.k, 1);
        let lines = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(lines.lines().count(), 1);
    }
}
