//! Traffic cities: on-disk format, synthetic generation, adjacency
//! normalisation, window sampling and the few-shot split.
//!
//! A city directory holds three files:
//!
//! * `meta.json`: `{name, interval_minutes, num_nodes, num_steps, channels, nodes}`
//! * `adjacency.csv`: `src,dst,weight` rows (0-indexed, header line, zero weights omitted)
//! * `readings.f32`: little-endian `f32`, row-major `[step][node][channel]`

use std::f64::consts::PI;
use std::fs;
use std::ops::Range;
use std::path::Path;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MINUTES_PER_DAY: usize = 1440;

/// Standard deviations below this are treated as 1 when z-scoring.
const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct TrafficCity {
    pub name: String,
    pub interval_minutes: usize,
    pub nodes: Vec<String>,
    /// `[N][N]` non-negative weights, row-major.
    pub adjacency: Vec<f64>,
    /// `[T][N]` speed readings (single channel).
    pub readings: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct CityMeta {
    name: String,
    interval_minutes: usize,
    num_nodes: usize,
    num_steps: usize,
    #[serde(default = "one")]
    channels: usize,
    #[serde(default)]
    nodes: Vec<String>,
}

fn one() -> usize {
    1
}

#[derive(Serialize, Deserialize)]
struct EdgeRecord {
    src: usize,
    dst: usize,
    weight: f64,
}

impl TrafficCity {
    /// Validate shapes and values, building a city from parts.
    pub fn new(
        name: impl Into<String>,
        interval_minutes: usize,
        nodes: Vec<String>,
        adjacency: Vec<f64>,
        readings: Vec<f32>,
    ) -> Result<Self> {
        let n = nodes.len();
        if interval_minutes == 0 || !MINUTES_PER_DAY.is_multiple_of(interval_minutes) {
            return Err(Error::Data(format!(
                "interval {interval_minutes} min does not divide a day"
            )));
        }
        if n == 0 {
            return Err(Error::Data("city has no nodes".into()));
        }
        if adjacency.len() != n * n {
            return Err(Error::shape("adjacency entries", n * n, adjacency.len()));
        }
        if let Some(w) = adjacency.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::Data(format!("adjacency weight {w} is negative or non-finite")));
        }
        if !readings.len().is_multiple_of(n) {
            return Err(Error::shape(
                "readings length",
                format!("a multiple of {n}"),
                readings.len(),
            ));
        }
        if let Some(i) = readings.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "reading".into(),
                detail: format!("step {} node {}", i / n, i % n),
            });
        }
        Ok(TrafficCity {
            name: name.into(),
            interval_minutes,
            nodes,
            adjacency,
            readings,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_steps(&self) -> usize {
        self.readings.len() / self.nodes.len()
    }

    pub fn steps_per_day(&self) -> usize {
        MINUTES_PER_DAY / self.interval_minutes
    }

    pub fn reading(&self, step: usize, node: usize) -> f32 {
        self.readings[step * self.num_nodes() + node]
    }

    /// One node's readings over `range`.
    pub fn series(&self, node: usize, range: Range<usize>) -> Vec<f32> {
        range.map(|t| self.reading(t, node)).collect()
    }

    pub fn stats(&self) -> NormStats {
        NormStats::from_range(self, 0..self.num_steps())
    }

    /// A copy restricted to the given node subset, adjacency included.
    pub fn subset(&self, nodes: &[usize]) -> Result<Self> {
        let n = self.num_nodes();
        let labels = nodes.iter().map(|&i| self.nodes[i].clone()).collect();
        let adjacency = nodes
            .iter()
            .flat_map(|&i| nodes.iter().map(move |&j| (i, j)))
            .map(|(i, j)| self.adjacency[i * n + j])
            .collect();
        let readings = (0..self.num_steps())
            .flat_map(|t| nodes.iter().map(move |&i| (t, i)))
            .map(|(t, i)| self.readings[t * n + i])
            .collect();
        TrafficCity::new(self.name.clone(), self.interval_minutes, labels, adjacency, readings)
    }
}

pub fn load_city(dir: &Path) -> Result<TrafficCity> {
    let meta_path = dir.join("meta.json");
    let meta: CityMeta = serde_json::from_slice(&fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?)?;
    if meta.channels != 1 {
        return Err(Error::Data(format!(
            "only single-channel cities are supported, found {} channels",
            meta.channels
        )));
    }
    let n = meta.num_nodes;
    let nodes = if meta.nodes.is_empty() {
        (0..n).map(|i| i.to_string()).collect()
    } else if meta.nodes.len() == n {
        meta.nodes
    } else {
        return Err(Error::shape("node labels", n, meta.nodes.len()));
    };

    let adj_path = dir.join("adjacency.csv");
    let mut adjacency = vec![0.0; n * n];
    let mut reader = csv::Reader::from_path(&adj_path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::io(
            &adj_path,
            std::io::Error::new(std::io::ErrorKind::NotFound, e.to_string()),
        ),
        _ => Error::Csv(e),
    })?;
    for rec in reader.deserialize() {
        let rec: EdgeRecord = rec?;
        if rec.src >= n || rec.dst >= n {
            return Err(Error::Data(format!(
                "edge {} -> {} out of range for {n} nodes",
                rec.src, rec.dst
            )));
        }
        adjacency[rec.src * n + rec.dst] = rec.weight;
    }

    let blob_path = dir.join("readings.f32");
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let expected = meta.num_steps * n * 4;
    if blob.len() != expected {
        return Err(Error::shape("readings.f32 bytes", expected, blob.len()));
    }
    let readings = blob
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let city = TrafficCity::new(meta.name, meta.interval_minutes, nodes, adjacency, readings)?;
    let stats = city.stats();
    info!(
        "loaded city {} with {} nodes, {} steps, mean {:.4}, std {:.4}",
        city.name,
        city.num_nodes(),
        city.num_steps(),
        stats.mean,
        stats.std
    );
    Ok(city)
}

pub fn save_city(city: &TrafficCity, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n = city.num_nodes();
    let meta = CityMeta {
        name: city.name.clone(),
        interval_minutes: city.interval_minutes,
        num_nodes: n,
        num_steps: city.num_steps(),
        channels: 1,
        nodes: city.nodes.clone(),
    };
    let meta_path = dir.join("meta.json");
    fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))?;

    let adj_path = dir.join("adjacency.csv");
    let mut writer = csv::Writer::from_path(&adj_path)?;
    for i in 0..n {
        for j in 0..n {
            let weight = city.adjacency[i * n + j];
            if weight != 0.0 {
                writer.serialize(EdgeRecord { src: i, dst: j, weight })?;
            }
        }
    }
    writer.flush().map_err(|e| Error::io(&adj_path, e))?;

    let blob: Vec<u8> = city.readings.iter().flat_map(|v| v.to_le_bytes()).collect();
    let blob_path = dir.join("readings.f32");
    fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))
}

/// Row-stochastic adjacency with self-loops: `D^{-1}(A + I)`.
pub fn normalize_adjacency(adjacency: &[f64], n: usize) -> Result<Vec<f64>> {
    if adjacency.len() != n * n {
        return Err(Error::shape("adjacency entries", n * n, adjacency.len()));
    }
    let mut out = adjacency.to_vec();
    for (i, row) in out.chunks_mut(n).enumerate() {
        row[i] += 1.0;
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|w| *w /= s);
    }
    Ok(out)
}

/// One periodic component of the synthetic speed profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Harmonic {
    pub period_minutes: f64,
    pub amplitude: f64,
    #[serde(default)]
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCitySpec {
    #[serde(default = "default_city_name")]
    pub name: String,
    pub n_nodes: usize,
    pub days: usize,
    pub interval_minutes: usize,
    pub shared_harmonics: Vec<Harmonic>,
    /// Phase offsets are drawn from `U(-pi * jitter, pi * jitter)`, once per
    /// harmonic for the whole city and once per harmonic per node.
    pub city_phase_jitter: f64,
    pub noise_std: f64,
    /// Probability per node per step that a congestion dip starts.
    pub congestion_rate: f64,
    #[serde(default = "default_base_speed")]
    pub base_speed: f64,
    /// Per-node spread of the base speed and harmonic gain (relative).
    #[serde(default = "default_node_spread")]
    pub node_spread: f64,
    #[serde(default = "default_ar")]
    pub ar_coefficient: f64,
    #[serde(default = "default_kernel_width")]
    pub kernel_width: f64,
    #[serde(default = "default_edge_threshold")]
    pub edge_threshold: f64,
    #[serde(default = "default_congestion_depth")]
    pub congestion_depth: f64,
    #[serde(default = "default_congestion_steps")]
    pub congestion_steps: usize,
}

fn default_city_name() -> String {
    "synthetic".into()
}
fn default_base_speed() -> f64 {
    60.0
}
fn default_node_spread() -> f64 {
    0.1
}
fn default_ar() -> f64 {
    0.9
}
fn default_kernel_width() -> f64 {
    0.3
}
fn default_edge_threshold() -> f64 {
    0.1
}
fn default_congestion_depth() -> f64 {
    15.0
}
fn default_congestion_steps() -> usize {
    12
}

impl SyntheticCitySpec {
    /// The benchmark profile: daily, half-daily and weekly cycles, phase
    /// jitter 0.3, noise 0.5, occasional congestion.
    pub fn canonical(name: &str, n_nodes: usize, days: usize) -> Self {
        SyntheticCitySpec {
            name: name.into(),
            n_nodes,
            days,
            interval_minutes: 5,
            shared_harmonics: vec![
                Harmonic {
                    period_minutes: 1440.0,
                    amplitude: 8.0,
                    phase: 0.0,
                },
                Harmonic {
                    period_minutes: 720.0,
                    amplitude: 4.0,
                    phase: 0.5,
                },
                Harmonic {
                    period_minutes: 10080.0,
                    amplitude: 2.0,
                    phase: 0.0,
                },
            ],
            city_phase_jitter: 0.3,
            noise_std: 0.5,
            congestion_rate: 0.002,
            base_speed: default_base_speed(),
            node_spread: default_node_spread(),
            ar_coefficient: default_ar(),
            kernel_width: default_kernel_width(),
            edge_threshold: default_edge_threshold(),
            congestion_depth: default_congestion_depth(),
            congestion_steps: default_congestion_steps(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_nodes < 4 {
            return Err(Error::Config(format!("n_nodes {} < 4", self.n_nodes)));
        }
        if self.days < 7 {
            return Err(Error::Config(format!("days {} < 7", self.days)));
        }
        if self.interval_minutes == 0 || !MINUTES_PER_DAY.is_multiple_of(self.interval_minutes) {
            return Err(Error::Config(format!(
                "interval {} min does not divide a day",
                self.interval_minutes
            )));
        }
        if !(0.0..1.0).contains(&self.ar_coefficient) || self.noise_std < 0.0 {
            return Err(Error::Config(
                "ar_coefficient must lie in [0, 1), noise_std >= 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.congestion_rate) {
            return Err(Error::Config("congestion_rate must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

fn jitter<R: Rng>(rng: &mut R, scale: f64) -> f64 {
    if scale == 0.0 {
        0.0
    } else {
        rng.random_range(-PI * scale..=PI * scale)
    }
}

/// Generate a city from `spec`; a pure function of `(spec, seed)`.
pub fn generate_synthetic_city(spec: &SyntheticCitySpec, seed: u64) -> Result<TrafficCity> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.n_nodes;
    let steps = spec.days * MINUTES_PER_DAY / spec.interval_minutes;

    let pos: Vec<(f64, f64)> = (0..n).map(|_| (rng.random(), rng.random())).collect();
    let mut adjacency = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let d2 = (pos[i].0 - pos[j].0).powi(2) + (pos[i].1 - pos[j].1).powi(2);
                let w = (-d2 / (spec.kernel_width * spec.kernel_width)).exp();
                if w >= spec.edge_threshold {
                    adjacency[i * n + j] = w;
                }
            }
        }
    }
    let smoother = normalize_adjacency(&adjacency, n)?;

    let harmonics = &spec.shared_harmonics;
    let city_offset: Vec<f64> = harmonics
        .iter()
        .map(|_| jitter(&mut rng, spec.city_phase_jitter))
        .collect();
    let node_offset: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            harmonics
                .iter()
                .map(|_| jitter(&mut rng, spec.city_phase_jitter))
                .collect()
        })
        .collect();
    let base: Vec<f64> = (0..n)
        .map(|_| spec.base_speed * (1.0 + spec.node_spread * rng.random_range(-1.0..=1.0)))
        .collect();
    let gain: Vec<f64> = (0..n)
        .map(|_| 1.0 + spec.node_spread * rng.random_range(-1.0..=1.0))
        .collect();

    let rho = spec.ar_coefficient;
    let innovation = spec.noise_std * (1.0 - rho * rho).sqrt();
    let mut ar = vec![0.0f64; n];
    let mut fresh = vec![0.0f64; n];
    let mut dip_left = vec![0usize; n];
    let mut dip_depth = vec![0.0f64; n];
    let dip_len = spec.congestion_steps.max(1);
    let mut readings = Vec::with_capacity(steps * n);
    for t in 0..steps {
        let minutes = (t * spec.interval_minutes) as f64;
        for (i, a) in ar.iter_mut().enumerate() {
            let e: f64 = StandardNormal.sample(&mut rng);
            fresh[i] = rho * *a + innovation * e;
        }
        // Spatially correlated noise: diffuse the fresh AR state once.
        for i in 0..n {
            ar[i] = (0..n).map(|j| smoother[i * n + j] * fresh[j]).sum();
        }
        for i in 0..n {
            if dip_left[i] == 0 && spec.congestion_rate > 0.0 && rng.random::<f64>() < spec.congestion_rate {
                dip_left[i] = dip_len;
                dip_depth[i] = spec.congestion_depth * rng.random_range(0.5..=1.0);
            }
            let mut v = base[i] + ar[i];
            for (h, harm) in harmonics.iter().enumerate() {
                let angle = 2.0 * PI * minutes / harm.period_minutes + harm.phase + city_offset[h] + node_offset[i][h];
                v += gain[i] * harm.amplitude * angle.cos();
            }
            if dip_left[i] > 0 {
                // Raised-cosine dip over `dip_len` steps.
                let k = (dip_len - dip_left[i]) as f64 + 0.5;
                v -= dip_depth[i] * (PI * k / dip_len as f64).sin().powi(2);
                dip_left[i] -= 1;
            }
            readings.push(v.max(0.0) as f32);
        }
    }
    let nodes = (0..n).map(|i| format!("{}-{i}", spec.name)).collect();
    TrafficCity::new(spec.name.clone(), spec.interval_minutes, nodes, adjacency, readings)
}

/// Mean and standard deviation used for z-scoring.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    /// Population standard deviation (may be 0).
    pub std: f64,
}

impl NormStats {
    pub fn from_values(values: impl IntoIterator<Item = f64>) -> Self {
        let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
        let vals: Vec<f64> = values.into_iter().collect();
        for &v in &vals {
            n += 1;
            sum += v;
        }
        let mean = if n == 0 { 0.0 } else { sum / n as f64 };
        for &v in &vals {
            sq += (v - mean) * (v - mean);
        }
        let std = if n == 0 { 0.0 } else { (sq / n as f64).sqrt() };
        NormStats { mean, std }
    }

    pub fn from_range(city: &TrafficCity, steps: Range<usize>) -> Self {
        let n = city.num_nodes();
        Self::from_values(city.readings[steps.start * n..steps.end * n].iter().map(|&v| v as f64))
    }

    fn scale(&self) -> f64 {
        if self.std < STD_FLOOR {
            1.0
        } else {
            self.std
        }
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.mean) / self.scale()
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.scale() + self.mean
    }
}

/// Target-city partition: a fine-tune head and a held-out test tail.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotSplit {
    pub finetune_steps: Range<usize>,
    pub test_steps: Range<usize>,
    pub normalization_stats: NormStats,
}

pub fn few_shot_split(city: &TrafficCity, days: usize) -> Result<FewShotSplit> {
    let head = days * city.steps_per_day();
    let total = city.num_steps();
    if days == 0 || head >= total {
        return Err(Error::Data(format!(
            "city {} has {total} steps, needs more than {head} for a {days}-day split",
            city.name
        )));
    }
    Ok(FewShotSplit {
        finetune_steps: 0..head,
        test_steps: head..total,
        normalization_stats: NormStats::from_range(city, 0..head),
    })
}

/// One forecasting window. Arrays are node-major: `history[node * T_h + t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub start: usize,
    pub nodes: usize,
    pub history_len: usize,
    pub horizon: usize,
    /// Z-scored history.
    pub history: Vec<f32>,
    /// Z-scored future.
    pub future: Vec<f32>,
    /// Future in raw speed units.
    pub future_raw: Vec<f32>,
}

impl Window {
    /// The last `len` history steps of every node, node-major.
    pub fn recent(&self, len: usize) -> Vec<f32> {
        self.history
            .chunks(self.history_len)
            .flat_map(|s| s[self.history_len - len..].iter().copied())
            .collect()
    }
}

/// The window whose history begins at `start`.
pub fn window_at(
    city: &TrafficCity,
    start: usize,
    history_len: usize,
    horizon: usize,
    stats: &NormStats,
) -> Result<Window> {
    let end = start + history_len + horizon;
    if end > city.num_steps() {
        return Err(Error::Data(format!(
            "window {start}..{end} exceeds {} steps",
            city.num_steps()
        )));
    }
    let n = city.num_nodes();
    let mut history = Vec::with_capacity(n * history_len);
    let mut future = Vec::with_capacity(n * horizon);
    let mut future_raw = Vec::with_capacity(n * horizon);
    for node in 0..n {
        for t in start..start + history_len {
            history.push(stats.normalize(city.reading(t, node) as f64) as f32);
        }
        for t in start + history_len..end {
            let raw = city.reading(t, node);
            future_raw.push(raw);
            future.push(stats.normalize(raw as f64) as f32);
        }
    }
    Ok(Window {
        start,
        nodes: n,
        history_len,
        horizon,
        history,
        future,
        future_raw,
    })
}

/// Every admissible window start inside `range`, `stride` apart.
pub fn window_starts(range: &Range<usize>, history_len: usize, horizon: usize, stride: usize) -> Result<Vec<usize>> {
    let span = history_len + horizon;
    let available = range.end.saturating_sub(range.start);
    if available < span {
        return Err(Error::Data(format!(
            "step range needs at least {span} steps for one window, has {available}"
        )));
    }
    Ok((range.start..=range.end - span).step_by(stride.max(1)).collect())
}

/// `batch_size` windows with uniformly drawn starts fitting inside `range`.
pub fn sample_windows(
    city: &TrafficCity,
    history_len: usize,
    horizon: usize,
    range: Range<usize>,
    batch_size: usize,
    stats: &NormStats,
    seed: u64,
) -> Result<Vec<Window>> {
    sample_windows_with(
        city,
        history_len,
        horizon,
        range,
        batch_size,
        stats,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
}

pub fn sample_windows_with<R: Rng + ?Sized>(
    city: &TrafficCity,
    history_len: usize,
    horizon: usize,
    range: Range<usize>,
    batch_size: usize,
    stats: &NormStats,
    rng: &mut R,
) -> Result<Vec<Window>> {
    let starts = window_starts(&range, history_len, horizon, 1)?;
    if range.end > city.num_steps() {
        return Err(Error::Data(format!(
            "step range ends at {} beyond {} steps",
            range.end,
            city.num_steps()
        )));
    }
    (0..batch_size)
        .map(|_| {
            window_at(
                city,
                starts[rng.random_range(0..starts.len())],
                history_len,
                horizon,
                stats,
            )
        })
        .collect()
}
