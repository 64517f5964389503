//! Forecast metrics, the historical-average baseline, cross-city similarity
//! analysis and attention-map export.

use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{window_at, window_starts, FewShotSplit, TrafficCity, Window};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::spectral::{Dft, Domain, TriDomainSample};

/// Targets with `|y|` below this are excluded from MAPE.
pub const MAPE_FLOOR: f64 = 1e-3;
/// Cross-city node pairs considered by the similarity analysis.
pub const MAX_SIMILARITY_PAIRS: usize = 10_000;

/// Mean absolute error.
pub fn mae(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_lengths(y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

/// Mean absolute percentage error in percent, skipping targets with `|y| < floor`.
pub fn mape(y: &[f64], y_hat: &[f64], floor: f64) -> Result<f64> {
    check_lengths(y, y_hat)?;
    let (sum, count) = y
        .iter()
        .zip(y_hat)
        .filter(|(a, _)| a.abs() >= floor)
        .fold((0.0, 0usize), |(s, c), (a, b)| (s + ((a - b) / a).abs(), c + 1));
    if count == 0 {
        return Err(Error::Data(format!("every MAPE target is below the floor {floor}")));
    }
    Ok(100.0 * sum / count as f64)
}

fn check_lengths(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.len() != y_hat.len() {
        return Err(Error::shape("prediction length", y.len(), y_hat.len()));
    }
    if y.is_empty() {
        return Err(Error::Data("metric over an empty set".into()));
    }
    Ok(())
}

/// Reported forecast steps; identical for 5- and 10-minute cities.
pub fn default_horizons() -> Vec<usize> {
    vec![1, 3, 6]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetric {
    pub horizon_steps: usize,
    pub horizon_minutes: usize,
    /// Speed units.
    pub mae: f64,
    /// Percent.
    pub mape: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub source_city: String,
    pub target_city: String,
    pub seed: u64,
    pub windows: usize,
    pub horizons: Vec<HorizonMetric>,
    /// Over all forecast steps.
    pub overall_mae: f64,
    pub overall_mape: f64,
    pub overall_count: usize,
}

/// Forecasts and ground truth for a set of windows, both raw-unit and
/// node-major `[N, T_f]`.
#[derive(Clone, Debug, Default)]
pub struct ForecastSet {
    pub nodes: usize,
    pub horizon: usize,
    pub predictions: Vec<Vec<f32>>,
    pub truths: Vec<Vec<f32>>,
}

impl ForecastSet {
    pub fn new(nodes: usize, horizon: usize) -> Self {
        ForecastSet {
            nodes,
            horizon,
            ..Default::default()
        }
    }

    pub fn push(&mut self, prediction: Vec<f32>, truth: Vec<f32>) -> Result<()> {
        let len = self.nodes * self.horizon;
        if prediction.len() != len || truth.len() != len {
            return Err(Error::shape("forecast entries", len, prediction.len().max(truth.len())));
        }
        self.predictions.push(prediction);
        self.truths.push(truth);
        Ok(())
    }

    /// Values at forecast step `step` (1-based), or at every step when `None`.
    fn collect(&self, step: Option<usize>) -> (Vec<f64>, Vec<f64>) {
        let keep = |i: usize| step.is_none_or(|s| i % self.horizon == s - 1);
        let mut y = Vec::new();
        let mut y_hat = Vec::new();
        for (p, t) in self.predictions.iter().zip(&self.truths) {
            for (i, (&a, &b)) in t.iter().zip(p).enumerate() {
                if keep(i) {
                    y.push(a as f64);
                    y_hat.push(b as f64);
                }
            }
        }
        (y, y_hat)
    }
}

/// Per-horizon and overall metrics. `interval_minutes` only labels the horizons.
pub fn horizon_metrics(
    set: &ForecastSet,
    horizons: &[usize],
    interval_minutes: usize,
) -> Result<(Vec<HorizonMetric>, HorizonMetric)> {
    let metric = |step: Option<usize>| -> Result<HorizonMetric> {
        let (y, y_hat) = set.collect(step);
        let s = step.unwrap_or(set.horizon);
        Ok(HorizonMetric {
            horizon_steps: s,
            horizon_minutes: s * interval_minutes,
            mae: mae(&y, &y_hat)?,
            mape: mape(&y, &y_hat, MAPE_FLOOR)?,
            count: y.len(),
        })
    };
    let mut out = Vec::with_capacity(horizons.len());
    for &h in horizons {
        if h == 0 || h > set.horizon {
            return Err(Error::Config(format!(
                "horizon {h} outside the forecast length 1..={}",
                set.horizon
            )));
        }
        out.push(metric(Some(h))?);
    }
    Ok((out, metric(None)?))
}

/// Test windows lying entirely inside the held-out range.
pub fn test_windows(
    city: &TrafficCity,
    split: &FewShotSplit,
    history_len: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<Window>> {
    window_starts(&split.test_steps, history_len, horizon, stride)?
        .into_iter()
        .map(|s| window_at(city, s, history_len, horizon, &split.normalization_stats))
        .collect()
}

/// Apply `predict` to every window and assemble a report.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<F>(
    model: &str,
    source_city: &str,
    target: &TrafficCity,
    windows: &[Window],
    horizons: &[usize],
    seed: u64,
    mut predict: F,
) -> Result<MetricReport>
where
    F: FnMut(&Window) -> Result<Vec<f32>>,
{
    let horizon = windows.first().map_or(0, |w| w.horizon);
    let mut set = ForecastSet::new(target.num_nodes(), horizon);
    for w in windows {
        set.push(predict(w)?, w.future_raw.clone())?;
    }
    let (per, overall) = horizon_metrics(&set, horizons, target.interval_minutes)?;
    Ok(MetricReport {
        model: model.to_string(),
        source_city: source_city.to_string(),
        target_city: target.name.clone(),
        seed,
        windows: windows.len(),
        horizons: per,
        overall_mae: overall.mae,
        overall_mape: overall.mape,
        overall_count: overall.count,
    })
}

// ---- historical average -------------------------------------------------------

/// Per-node, per-time-of-day mean of the fine-tune range.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoricalAverage {
    pub nodes: usize,
    pub steps_per_day: usize,
    /// `[slot * N + node]`.
    pub means: Vec<f64>,
}

impl HistoricalAverage {
    pub fn fit(city: &TrafficCity, range: std::ops::Range<usize>) -> Result<Self> {
        if range.is_empty() || range.end > city.num_steps() {
            return Err(Error::Data(format!(
                "historical-average range {range:?} invalid for {} steps",
                city.num_steps()
            )));
        }
        let (n, spd) = (city.num_nodes(), city.steps_per_day());
        let mut sums = vec![0.0; spd * n];
        let mut counts = vec![0usize; spd];
        let mut overall = vec![0.0; n];
        for t in range.clone() {
            let slot = t % spd;
            counts[slot] += 1;
            for node in 0..n {
                let v = city.reading(t, node) as f64;
                sums[slot * n + node] += v;
                overall[node] += v;
            }
        }
        let len = range.len() as f64;
        let means = sums
            .iter()
            .enumerate()
            .map(|(i, &s)| match counts[i / n] {
                // Slots never observed fall back to the node's overall mean.
                0 => overall[i % n] / len,
                c => s / c as f64,
            })
            .collect();
        Ok(HistoricalAverage {
            nodes: n,
            steps_per_day: spd,
            means,
        })
    }

    /// Raw-unit `[N, T_f]` forecast for the steps following the window's history.
    pub fn predict(&self, window: &Window) -> Vec<f32> {
        let first = window.start + window.history_len;
        let mut out = Vec::with_capacity(self.nodes * window.horizon);
        for node in 0..self.nodes {
            for t in first..first + window.horizon {
                out.push(self.means[(t % self.steps_per_day) * self.nodes + node] as f32);
            }
        }
        out
    }
}

// ---- cross-city similarity ------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub city_a: String,
    pub city_b: String,
    pub nodes_a: usize,
    pub nodes_b: usize,
    pub window_days: usize,
    pub windows: usize,
    /// Sampled (node_a, node_b, window) triples behind the means.
    pub pairs: usize,
    pub mean_time_cos: f64,
    pub mean_freq_cos: f64,
    /// `[node_a * N_b + node_b]`, averaged over windows.
    pub time_matrix: Vec<f64>,
    pub freq_matrix: Vec<f64>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Mean-centred series and amplitude spectrum (retained bins) of every node
/// for every aligned window: `[window][node]`.
fn window_views(city: &TrafficCity, windows: usize, len: usize, dft: &Dft) -> Vec<Vec<(Vec<f64>, Vec<f64>)>> {
    (0..windows)
        .map(|k| {
            (0..city.num_nodes())
                .map(|node| {
                    let raw: Vec<f64> = city
                        .series(node, k * len..(k + 1) * len)
                        .into_iter()
                        .map(f64::from)
                        .collect();
                    let mean = raw.iter().sum::<f64>() / len as f64;
                    let centred: Vec<f64> = raw.iter().map(|v| v - mean).collect();
                    let amp = dft.forward(&centred, len / 2).iter().map(|c| c.norm()).collect();
                    (centred, amp)
                })
                .collect()
        })
        .collect()
}

/// Cosine similarity of aligned `window_days` windows between every node of
/// `a` and every node of `b`, in the time domain and on amplitude spectra.
pub fn similarity_analysis(
    a: &TrafficCity,
    b: &TrafficCity,
    window_days: usize,
    seed: u64,
) -> Result<SimilarityReport> {
    if a.interval_minutes != b.interval_minutes {
        return Err(Error::Data(format!(
            "sampling intervals differ ({} vs {} minutes)",
            a.interval_minutes, b.interval_minutes
        )));
    }
    let len = window_days * a.steps_per_day();
    let windows = a.num_steps().min(b.num_steps()) / len.max(1);
    if window_days == 0 || windows == 0 {
        return Err(Error::Data(format!(
            "similarity needs {window_days} full days in both cities ({} and {} steps available)",
            a.num_steps(),
            b.num_steps()
        )));
    }
    let dft = Dft::new(len);
    let va = window_views(a, windows, len, &dft);
    let vb = window_views(b, windows, len, &dft);
    let (na, nb) = (a.num_nodes(), b.num_nodes());
    let mut time_matrix = vec![0.0; na * nb];
    let mut freq_matrix = vec![0.0; na * nb];
    let mut all = Vec::with_capacity(windows * na * nb);
    for k in 0..windows {
        for i in 0..na {
            for j in 0..nb {
                let tc = cosine(&va[k][i].0, &vb[k][j].0);
                let fc = cosine(&va[k][i].1, &vb[k][j].1);
                time_matrix[i * nb + j] += tc / windows as f64;
                freq_matrix[i * nb + j] += fc / windows as f64;
                all.push((tc, fc));
            }
        }
    }
    let chosen: Vec<usize> = if all.len() > MAX_SIMILARITY_PAIRS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = index::sample(&mut rng, all.len(), MAX_SIMILARITY_PAIRS).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..all.len()).collect()
    };
    let m = chosen.len() as f64;
    Ok(SimilarityReport {
        city_a: a.name.clone(),
        city_b: b.name.clone(),
        nodes_a: na,
        nodes_b: nb,
        window_days,
        windows,
        pairs: chosen.len(),
        mean_time_cos: chosen.iter().map(|&i| all[i].0).sum::<f64>() / m,
        mean_freq_cos: chosen.iter().map(|&i| all[i].1).sum::<f64>() / m,
        time_matrix,
        freq_matrix,
    })
}

// ---- attention export -----------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionAxis {
    pub index: usize,
    pub domain: String,
    pub patch: usize,
    /// Time steps (time domain) or frequency bins covered, half-open.
    pub range_start: usize,
    pub range_end: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionExport {
    pub size: usize,
    /// Averaged over heads and nodes, row-major `[S, S]` (rows are queries).
    pub matrix: Vec<f64>,
    /// Averaged over heads only, `[N][S * S]`.
    pub per_node: Vec<Vec<f64>>,
    pub axes: Vec<AttentionAxis>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    /// Mean attention mass from time-domain queries onto each domain's keys.
    pub time_to_time: f64,
    pub time_to_amplitude: f64,
    pub time_to_phase: f64,
    pub max_row_sum_error: f64,
}

/// Attention of the last cross-domain aggregator for one unmasked history.
pub fn export_attention(
    encoder: &EncoderModel,
    history: &[f32],
    nodes: usize,
    adjacency: &[f64],
) -> Result<AttentionExport> {
    let sample: TriDomainSample = encoder.config.sample(history, nodes)?;
    let attn = encoder
        .attention_map(&sample, adjacency)?
        .ok_or_else(|| Error::Config("encoder has no cross-domain aggregator to export".into()))?;
    let s = attn.shape()[1];
    let per_node: Vec<Vec<f64>> = attn
        .data()
        .chunks(s * s)
        .map(|c| c.iter().map(|&v| v as f64).collect())
        .collect();
    let mut matrix = vec![0.0; s * s];
    for node in &per_node {
        for (m, v) in matrix.iter_mut().zip(node) {
            *m += v / nodes as f64;
        }
    }
    let layout = encoder.config.layout;
    let mut axes = Vec::with_capacity(s);
    for &dom in encoder.config.domains() {
        let width = layout.width(dom);
        for patch in 0..layout.patches {
            axes.push(AttentionAxis {
                index: axes.len(),
                domain: dom.name().to_string(),
                patch,
                range_start: patch * width,
                range_end: (patch + 1) * width,
            });
        }
    }
    Ok(AttentionExport {
        size: s,
        matrix,
        per_node,
        axes,
    })
}

impl AttentionExport {
    pub fn summary(&self) -> AttentionSummary {
        let s = self.size;
        let mass = |to: Domain| -> f64 {
            let (mut total, mut rows) = (0.0, 0usize);
            for q in self.axes.iter().filter(|a| a.domain == Domain::Time.name()) {
                rows += 1;
                total += self
                    .axes
                    .iter()
                    .filter(|k| k.domain == to.name())
                    .map(|k| self.matrix[q.index * s + k.index])
                    .sum::<f64>();
            }
            total / rows.max(1) as f64
        };
        let max_row_sum_error = self
            .matrix
            .chunks(s)
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max);
        AttentionSummary {
            time_to_time: mass(Domain::Time),
            time_to_amplitude: mass(Domain::Amplitude),
            time_to_phase: mass(Domain::Phase),
            max_row_sum_error,
        }
    }

    /// `attention.csv` (square matrix, header of axis labels),
    /// `attention_axes.csv`, `attention_summary.json` and, when
    /// `per_node`, `attention_nodes.csv` (node, query, key, weight).
    pub fn write(&self, dir: &Path, per_node: bool) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let label = |a: &AttentionAxis| format!("{}:{}", a.domain, a.patch);
        let mut w = csv::Writer::from_path(dir.join("attention.csv"))?;
        let mut header = vec!["query".to_string()];
        header.extend(self.axes.iter().map(label));
        w.write_record(&header)?;
        for (row, axis) in self.matrix.chunks(self.size).zip(&self.axes) {
            let mut rec = vec![label(axis)];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(dir.join("attention.csv"), e))?;

        let mut w = csv::Writer::from_path(dir.join("attention_axes.csv"))?;
        for axis in &self.axes {
            w.serialize(axis)?;
        }
        w.flush().map_err(|e| Error::io(dir.join("attention_axes.csv"), e))?;

        if per_node {
            let mut w = csv::Writer::from_path(dir.join("attention_nodes.csv"))?;
            w.write_record(["node", "query", "key", "weight"])?;
            for (node, m) in self.per_node.iter().enumerate() {
                for (i, v) in m.iter().enumerate() {
                    w.write_record(&[
                        node.to_string(),
                        (i / self.size).to_string(),
                        (i % self.size).to_string(),
                        v.to_string(),
                    ])?;
                }
            }
            w.flush().map_err(|e| Error::io(dir.join("attention_nodes.csv"), e))?;
        }
        let path = dir.join("attention_summary.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&self.summary())?).map_err(|e| Error::io(&path, e))
    }
}

/// Append one JSON record per line.
pub fn write_ndjson<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}
