//! Self-supervised pre-training: masked tri-domain reconstruction plus an
//! amplitude-swap contrastive objective, `L = L_re + alpha * L_con`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use numcore::{Adam, AdamConfig, Graph, Scalar, Tensor, Var};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{normalize_adjacency, window_at, window_starts, NormStats, TrafficCity, Window};
use crate::encoder::{EncoderConfig, EncoderModel, PoolMode};
use crate::error::{Error, Result};
use crate::spectral::{amplitude_swap_with, TriDomainSample};

pub const LOG_FILE: &str = "pretrain_log.ndjson";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub mask_ratio: f64,
    pub alpha: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Windows per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    pub negative_fraction: f64,
    /// Distance between consecutive window starts; one epoch visits every
    /// window once in shuffled order.
    pub window_stride: usize,
    /// Turn the contrastive term off entirely (ablation).
    pub contrastive: bool,
    /// Backpropagate through the augmented branch (off: its embeddings are
    /// treated as constants).
    pub grad_through_augmented: bool,
    pub seed: u64,
    pub encoder: EncoderConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            mask_ratio: 0.75,
            alpha: 1.0,
            learning_rate: 1e-4,
            weight_decay: 0.0,
            batch_size: 1,
            epochs: 10,
            negative_fraction: 0.10,
            window_stride: 288,
            contrastive: true,
            grad_through_augmented: true,
            seed: 7,
            encoder: EncoderConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!("mask_ratio {} outside (0, 1)", self.mask_ratio)));
        }
        if self.alpha.is_nan() || self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha {} must be >= 0", self.alpha)));
        }
        if !(self.negative_fraction > 0.0 && self.negative_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "negative_fraction {} outside (0, 1]",
                self.negative_fraction
            )));
        }
        if self.batch_size == 0 || self.window_stride == 0 {
            return Err(Error::Config("batch_size and window_stride must be positive".into()));
        }
        Ok(())
    }

    fn uses_contrastive(&self) -> bool {
        self.contrastive && self.alpha > 0.0 && self.encoder.frequency_domains
    }
}

/// Masked reconstruction loss on the tape: for each domain, the squared error
/// summed over masked patches divided by `masked patches * width`, summed over
/// domains. A domain with no masked patch contributes 0.
pub fn reconstruction_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    recon: &[Var],
    sample: &TriDomainSample,
    domains: &[crate::spectral::Domain],
) -> Result<Var> {
    let (n, p) = (sample.nodes, sample.layout.patches);
    let mut total: Option<Var> = None;
    for (&dom, &r) in domains.iter().zip(recon) {
        let dp = sample.domain(dom);
        let count = dp.masked_patches();
        if count == 0 {
            warn!("no masked {} patches; reconstruction term is 0", dom.name());
            continue;
        }
        let target = g.constant(Tensor::new(
            &[n, p, dp.width],
            dp.values.iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
        )?);
        let mask = g.constant(Tensor::new(
            &[n, p, 1],
            dp.mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect(),
        )?);
        let diff = g.sub(r, target)?;
        let sq = g.square(diff)?;
        let masked = g.mul(sq, mask)?;
        let s = g.sum_all(masked);
        let term = g.mul_scalar(s, 1.0 / (count * dp.width) as f64);
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(T::zero())),
    })
}

/// Tensor-level reconstruction loss (see [`reconstruction_loss_graph`]).
pub fn reconstruction_loss(recon: &[Tensor<f32>], sample: &TriDomainSample) -> Result<f64> {
    let domains = &crate::spectral::Domain::ALL[..recon.len()];
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = recon.iter().map(|t| g.constant(t.cast())).collect();
    let l = reconstruction_loss_graph(&mut g, &vars, sample, domains)?;
    Ok(g.value(l).item())
}

fn row_norms<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    let d = t.shape()[1];
    t.data()
        .chunks(d)
        .map(|r| r.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt())
        .collect()
}

/// NT-Xent without temperature over cosine similarities:
/// `mean_i -log(e^{s_ii} / (e^{s_ii} + sum_{j in neg(i)} e^{s_ij}))` with
/// `s_ij = cos(orig_i, aug_j)`. Every node needs the same number of negatives.
pub fn contrastive_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    orig: Var,
    aug: Var,
    negatives: &[Vec<usize>],
) -> Result<Var> {
    let shape = g.shape(orig).to_vec();
    if shape.len() != 2 || g.shape(aug) != shape.as_slice() {
        return Err(Error::shape(
            "contrastive embeddings",
            format!("{shape:?}"),
            format!("{:?}", g.shape(aug)),
        ));
    }
    let n = shape[0];
    if negatives.len() != n {
        return Err(Error::shape("negative sets", n, negatives.len()));
    }
    let k = negatives.first().map_or(0, Vec::len);
    for (i, neg) in negatives.iter().enumerate() {
        if neg.len() != k || k == 0 || neg.iter().any(|&j| j == i || j >= n) {
            return Err(Error::Data(format!("invalid negatives {neg:?} for node {i}")));
        }
    }
    for (what, v) in [("original", orig), ("augmented", aug)] {
        if let Some(i) = row_norms(g.value(v)).iter().position(|&r| r == 0.0) {
            return Err(Error::Data(format!("{what} embedding of node {i} has zero norm")));
        }
    }
    let unit = |g: &mut Graph<T>, v: Var| -> Result<Var> {
        let sq = g.square(v)?;
        let ss = g.sum(sq, 1)?;
        let norm = g.sqrt(ss)?;
        let norm = g.reshape(norm, &[n, 1])?;
        Ok(g.div(v, norm)?)
    };
    let a = unit(g, orig)?;
    let b = unit(g, aug)?;
    let sim = g.matmul_t(a, b)?;
    let flat = g.reshape(sim, &[n * n, 1])?;
    let mut idx = Vec::with_capacity(n * (k + 1));
    for (i, neg) in negatives.iter().enumerate() {
        idx.push(i * n + i);
        idx.extend(neg.iter().map(|&j| i * n + j));
    }
    let logits = g.gather_rows(flat, &idx)?;
    let logits = g.reshape(logits, &[n, k + 1])?;
    let pos = g.narrow(logits, 1, 0, 1)?;
    let pos = g.reshape(pos, &[n])?;
    let e = g.exp(logits);
    let denom = g.sum(e, 1)?;
    let lse = g.log(denom)?;
    let per_node = g.sub(lse, pos)?;
    Ok(g.mean_all(per_node))
}

/// Tensor-level contrastive loss (see [`contrastive_loss_graph`]).
pub fn contrastive_loss(orig: &Tensor<f64>, aug: &Tensor<f64>, negatives: &[Vec<usize>]) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let a = g.constant(orig.clone());
    let b = g.constant(aug.clone());
    let l = contrastive_loss_graph(&mut g, a, b, negatives)?;
    Ok(g.value(l).item())
}

/// Negatives per node: `max(1, round(fraction * N))`, capped at `N - 1`.
pub fn negative_count(fraction: f64, nodes: usize) -> usize {
    ((fraction * nodes as f64).round() as usize)
        .max(1)
        .min(nodes.saturating_sub(1))
}

/// For every node, distinct other nodes drawn uniformly without replacement.
pub fn sample_negatives<R: Rng + ?Sized>(rng: &mut R, nodes: usize, count: usize) -> Vec<Vec<usize>> {
    (0..nodes)
        .map(|i| {
            index::sample(rng, nodes - 1, count)
                .into_iter()
                .map(|j| if j >= i { j + 1 } else { j })
                .collect()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub loss_total: f64,
    pub loss_re: f64,
    pub loss_con: f64,
}

/// Trainer state: model, optimizer and the step RNG.
pub struct Pretrainer {
    pub model: EncoderModel,
    pub config: PretrainConfig,
    opt: Adam<f32>,
    rng: ChaCha8Rng,
    steps: u64,
}

impl Pretrainer {
    pub fn new(config: PretrainConfig) -> Result<Self> {
        config.validate()?;
        let model = EncoderModel::new(config.encoder.clone(), config.seed)?;
        Ok(Self::with_model(model, config))
    }

    pub fn with_model(model: EncoderModel, config: PretrainConfig) -> Self {
        let opt = Adam::new(AdamConfig::new(config.learning_rate).with_weight_decay(config.weight_decay));
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0001);
        Pretrainer {
            model,
            config,
            opt,
            rng,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Loss terms for one window, added to the tape.
    fn window_losses(
        &mut self,
        g: &mut Graph<f32>,
        b: &crate::encoder::Bound<f32>,
        window: &Window,
        adjacency: &[f64],
    ) -> Result<(Var, Option<Var>)> {
        let cfg = &self.config;
        let domains = cfg.encoder.domains();
        let clean = cfg.encoder.sample(&window.history, window.nodes)?;
        let mut masked = clean.clone();
        masked.mask_with(cfg.mask_ratio, &mut self.rng);
        let enc = self.model.encode_graph(g, b, &masked, adjacency)?;
        let recon = self.model.reconstruct_graph(g, b, &enc.domains)?;
        let l_re = reconstruction_loss_graph(g, &recon, &masked, domains)?;

        if !cfg.uses_contrastive() {
            return Ok((l_re, None));
        }
        if window.nodes < 2 {
            warn!("contrastive term skipped: a window with one node has no negatives");
            return Ok((l_re, None));
        }
        let (mut aug, _) = amplitude_swap_with(&clean, &mut self.rng);
        aug.mask_with(cfg.mask_ratio, &mut self.rng);
        let h_orig = self.model.pool_graph(g, b, &enc.domains, PoolMode::LinearConcat)?;
        let h_aug = if cfg.grad_through_augmented {
            let enc_aug = self.model.encode_graph(g, b, &aug, adjacency)?;
            self.model.pool_graph(g, b, &enc_aug.domains, PoolMode::LinearConcat)?
        } else {
            let mut side = Graph::new();
            let sb = self.model.bind(&mut side, false);
            let enc_aug = self.model.encode_graph(&mut side, &sb, &aug, adjacency)?;
            let pooled = self
                .model
                .pool_graph(&mut side, &sb, &enc_aug.domains, PoolMode::LinearConcat)?;
            g.constant(side.value(pooled).clone())
        };
        let k = negative_count(cfg.negative_fraction, window.nodes);
        let negatives = sample_negatives(&mut self.rng, window.nodes, k);
        let l_con = contrastive_loss_graph(g, h_orig, h_aug, &negatives)?;
        Ok((l_re, Some(l_con)))
    }

    /// One optimizer step on `batch`; losses are averaged over windows.
    pub fn step(&mut self, batch: &[Window], adjacency: &[f64]) -> Result<StepLosses> {
        if batch.is_empty() {
            return Err(Error::Data("empty pre-training batch".into()));
        }
        let model = self.model.clone();
        let mut g = Graph::new();
        let b = model.bind(&mut g, true);
        let mut re_terms = Vec::new();
        let mut con_terms = Vec::new();
        // `window_losses` borrows the model through `self`; the bound copy is
        // identical, so tape parameters and updated parameters line up.
        for w in batch {
            let (re, con) = self.window_losses(&mut g, &b, w, adjacency)?;
            re_terms.push(re);
            con_terms.extend(con);
        }
        let scale = 1.0 / batch.len() as f64;
        let sum = |g: &mut Graph<f32>, v: &[Var]| -> Result<Option<Var>> {
            let mut acc: Option<Var> = None;
            for &x in v {
                acc = Some(match acc {
                    Some(a) => g.add(a, x)?,
                    None => x,
                });
            }
            Ok(acc.map(|a| g.mul_scalar(a, scale)))
        };
        let l_re = sum(&mut g, &re_terms)?.expect("non-empty batch");
        let l_con = sum(&mut g, &con_terms)?;
        let total = match l_con {
            Some(c) => {
                let weighted = g.mul_scalar(c, self.config.alpha);
                g.add(l_re, weighted)?
            }
            None => l_re,
        };
        let losses = StepLosses {
            loss_total: g.value(total).item() as f64,
            loss_re: g.value(l_re).item() as f64,
            loss_con: l_con.map_or(0.0, |c| g.value(c).item() as f64),
        };
        if !losses.loss_total.is_finite() {
            return Err(Error::NonFinite {
                what: "pre-training loss".into(),
                detail: format!(
                    "step {} (seed {}, window starts {:?}): {losses:?}",
                    self.steps,
                    self.config.seed,
                    batch.iter().map(|w| w.start).collect::<Vec<_>>()
                ),
            });
        }
        let grads = g.backward(total)?;
        self.model.params.apply_adam(&mut self.opt, &grads, b.vars())?;
        if !self.model.params.is_finite() {
            return Err(Error::NonFinite {
                what: "encoder parameters".into(),
                detail: format!("after step {}", self.steps),
            });
        }
        self.steps += 1;
        Ok(losses)
    }
}

/// Per-epoch record of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_re: f64,
    pub loss_con: f64,
    pub wall_ms: u64,
}

pub struct PretrainOutcome {
    pub model: EncoderModel,
    pub log: Vec<EpochRecord>,
}

/// Train on every full window of `city` for `config.epochs` epochs. When
/// `out` is given, the checkpoint and the NDJSON log are written there.
pub fn pretrain_run(city: &TrafficCity, config: &PretrainConfig, out: Option<&Path>) -> Result<PretrainOutcome> {
    config.validate()?;
    let stats = NormStats::from_range(city, 0..city.num_steps());
    let adjacency = normalize_adjacency(&city.adjacency, city.num_nodes())?;
    let t_h = config.encoder.layout.history_len;
    let starts = window_starts(&(0..city.num_steps()), t_h, 0, config.window_stride)?;
    let windows = starts
        .iter()
        .map(|&s| window_at(city, s, t_h, 0, &stats))
        .collect::<Result<Vec<_>>>()?;
    info!(
        "pre-training on {} ({} nodes): {} windows per epoch, {} epochs",
        city.name,
        city.num_nodes(),
        windows.len(),
        config.epochs
    );
    let mut trainer = Pretrainer::new(config.clone())?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x0de7_0002);
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
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(&mut order_rng);
        let (mut tot, mut re, mut con, mut count) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Window> = chunk.iter().map(|&i| windows[i].clone()).collect();
            let l = trainer.step(&batch, &adjacency)?;
            tot += l.loss_total;
            re += l.loss_re;
            con += l.loss_con;
            count += 1;
        }
        let c = count.max(1) as f64;
        let record = EpochRecord {
            epoch,
            loss_total: tot / c,
            loss_re: re / c,
            loss_con: con / c,
            wall_ms: t0.elapsed().as_millis() as u64,
        };
        info!(
            "epoch {epoch}: total {:.5} re {:.5} con {:.5} ({} ms)",
            record.loss_total, record.loss_re, record.loss_con, record.wall_ms
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
        trainer.model.save(dir)?;
    }
    Ok(PretrainOutcome {
        model: trainer.model,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{apply_mask, Domain, PatchLayout};

    fn tiny_encoder() -> EncoderConfig {
        EncoderConfig {
            d_model: 8,
            heads: 2,
            ff_mult: 2,
            layout: PatchLayout {
                history_len: 16,
                patches: 4,
            },
            amplitude_scale: 0.25,
            ..EncoderConfig::default()
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn perfect_reconstruction_is_zero() {
        let cfg = tiny_encoder();
        let hist: Vec<f32> = (0..48).map(|i| (i as f32 * 0.3).sin()).collect();
        let s = apply_mask(&cfg.sample(&hist, 3).unwrap(), 0.5, 1).unwrap();
        let recon: Vec<Tensor<f32>> = s
            .domains
            .iter()
            .map(|d| Tensor::new(&[3, 4, d.width], d.values.clone()).unwrap())
            .collect();
        assert_eq!(reconstruction_loss(&recon, &s).unwrap(), 0.0);
    }

    #[test]
    fn constant_residual_on_one_patch() {
        let cfg = tiny_encoder();
        let mut s = cfg.sample(&[0.0; 16], 1).unwrap();
        s.domain_mut(Domain::Time).mask[2] = true;
        let mut recon: Vec<Tensor<f32>> = s
            .domains
            .iter()
            .map(|d| Tensor::new(&[1, 4, d.width], d.values.clone()).unwrap())
            .collect();
        recon[0].data_mut().iter_mut().for_each(|v| *v += 2.0);
        assert!((reconstruction_loss(&recon, &s).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn contrastive_closed_form() {
        let orig = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let l = contrastive_loss(&orig, &orig, &[vec![1], vec![0]]).unwrap();
        let want = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        assert!((l - want).abs() < 1e-12);
    }

    #[test]
    fn contrastive_matches_naive_loop() {
        let (n, d) = (6, 5);
        let a = random(&[n, d], 1);
        let b = random(&[n, d], 2);
        let negs = sample_negatives(&mut ChaCha8Rng::seed_from_u64(3), n, 2);
        let cos = |i: usize, j: usize| {
            let (x, y) = (&a.data()[i * d..(i + 1) * d], &b.data()[j * d..(j + 1) * d]);
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            dot / (nx * ny)
        };
        let mut naive = 0.0;
        for i in 0..n {
            let pos = cos(i, i).exp();
            let den = pos + negs[i].iter().map(|&j| cos(i, j).exp()).sum::<f64>();
            naive -= (pos / den).ln();
        }
        naive /= n as f64;
        assert!((contrastive_loss(&a, &b, &negs).unwrap() - naive).abs() < 1e-9);
    }

    #[test]
    fn contrastive_rejects_zero_norm_and_self_negatives() {
        let z = Tensor::new(&[2, 2], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let o = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(contrastive_loss(&z, &o, &[vec![1], vec![0]]).is_err());
        assert!(contrastive_loss(&o, &o, &[vec![0], vec![0]]).is_err());
    }

    #[test]
    fn negatives_exclude_self() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(negative_count(0.1, 8), 1);
        assert_eq!(negative_count(0.1, 325), 33);
        for _ in 0..20 {
            let negs = sample_negatives(&mut rng, 8, 3);
            for (i, n) in negs.iter().enumerate() {
                assert!(!n.contains(&i));
                let mut s = n.clone();
                s.sort();
                s.dedup();
                assert_eq!(s.len(), 3);
            }
        }
    }

    fn tiny_windows(n: usize, count: usize) -> Vec<Window> {
        (0..count)
            .map(|w| {
                let mut rng = ChaCha8Rng::seed_from_u64(w as u64);
                Window {
                    start: w,
                    nodes: n,
                    history_len: 16,
                    horizon: 0,
                    history: (0..n * 16).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    future: vec![],
                    future_raw: vec![],
                }
            })
            .collect()
    }

    #[test]
    fn alpha_zero_total_is_reconstruction() {
        let cfg = PretrainConfig {
            alpha: 0.0,
            encoder: tiny_encoder(),
            ..PretrainConfig::default()
        };
        let mut t = Pretrainer::new(cfg).unwrap();
        let adj = normalize_adjacency(&[0.0; 16], 4).unwrap();
        let l = t.step(&tiny_windows(4, 2), &adj).unwrap();
        assert_eq!(l.loss_total, l.loss_re);
    }

    #[test]
    fn steps_are_deterministic() {
        let cfg = PretrainConfig {
            encoder: tiny_encoder(),
            ..PretrainConfig::default()
        };
        let adj = normalize_adjacency(&[0.0; 16], 4).unwrap();
        let run = || {
            let mut t = Pretrainer::new(cfg.clone()).unwrap();
            (0..5)
                .map(|_| t.step(&tiny_windows(4, 1), &adj).unwrap())
                .collect::<Vec<_>>()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert!(a.iter().all(|l| (l.loss_total - (l.loss_re + l.loss_con)).abs() < 1e-5));
    }
}
