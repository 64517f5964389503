//! Cross-domain spatial-temporal encoder.
//!
//! Pipeline for one window of `N` nodes (each domain is a `[N, P, d]` token
//! tensor):
//!
//! 1. patch embedding, with masked positions replaced by a learned mask token,
//!    plus positional and domain-type embeddings;
//! 2. one transformer layer per domain over the `P` tokens of each node;
//! 3. cross-domain aggregator: per node, one transformer layer over the `3P`
//!    concatenated tokens of all domains;
//! 4. cross-space aggregator: per domain, `relu(A' H W)` with the
//!    row-stochastic adjacency `A'`;
//! 5. a second cross-domain aggregator with its own weights.
//!
//! Reconstruction heads map tokens back to patch widths, and two pooling
//! modes turn the token grids into one `d`-vector per node.

use std::collections::HashMap;
use std::path::Path;

use numcore::{init, load_checkpoint, save_checkpoint, Graph, ParamStore, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{Domain, PatchLayout, TriDomainSample};

pub const PARAM_PREFIX: &str = "encoder/";
pub const CONFIG_FILE: &str = "encoder_config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Feed-forward width as a multiple of `d_model`.
    pub ff_mult: usize,
    pub layout: PatchLayout,
    /// Feed amplitude and phase domains (off: time domain only).
    pub frequency_domains: bool,
    /// Use the two cross-domain aggregators.
    pub cross_domain: bool,
    /// Use the graph-convolution cross-space aggregator.
    pub cross_space: bool,
    /// Share weights between the two cross-domain aggregators.
    pub share_aggregators: bool,
    /// Multiplier applied to DFT amplitudes before patching.
    pub amplitude_scale: f64,
    pub layer_norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        let layout = PatchLayout::default();
        EncoderConfig {
            d_model: 128,
            heads: 4,
            ff_mult: 4,
            layout,
            frequency_domains: true,
            cross_domain: true,
            cross_space: true,
            share_aggregators: false,
            amplitude_scale: 1.0,
            layer_norm_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn domains(&self) -> &'static [Domain] {
        if self.frequency_domains {
            &Domain::ALL
        } else {
            &Domain::ALL[..1]
        }
    }

    /// Build the encoder input for a node-major `[N][T_h]` history.
    pub fn sample(&self, history: &[f32], nodes: usize) -> Result<TriDomainSample> {
        TriDomainSample::from_history(history, nodes, self.layout, self.amplitude_scale)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolMode {
    /// Mean over patches, concatenate domains, linear to `d`.
    LinearConcat,
    /// Mean over patches, sum over domains.
    Sum,
}

impl std::str::FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear-concat" => Ok(PoolMode::LinearConcat),
            "sum" => Ok(PoolMode::Sum),
            other => Err(Error::Config(format!("unknown pooling mode {other:?}"))),
        }
    }
}

/// All learnable encoder parameters, stored by name under `encoder/`.
#[derive(Clone, Debug)]
pub struct EncoderModel<T: Scalar = f32> {
    pub config: EncoderConfig,
    pub params: ParamStore<T>,
}

/// Parameters placed on a tape, looked up by name.
pub struct Bound<'a, T: Scalar> {
    params: &'a ParamStore<T>,
    vars: Vec<Var>,
}

impl<T: Scalar> Bound<'_, T> {
    pub fn get(&self, name: &str) -> Var {
        let full = format!("{PARAM_PREFIX}{name}");
        let id = self
            .params
            .id(&full)
            .unwrap_or_else(|| panic!("encoder parameter {full} is not registered"));
        self.vars[id.index()]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Per-domain token grids (`[N, P, d]` each, in `config.domains()` order).
pub struct Encoded {
    pub domains: Vec<Var>,
    /// Softmax weights of the last cross-domain aggregator, `[N * heads, S, S]`.
    pub attention: Option<Var>,
}

fn transformer_names(prefix: &str) -> Vec<String> {
    ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "w1", "b1", "w2", "b2"]
        .iter()
        .map(|s| format!("{prefix}/{s}"))
        .collect()
}

impl EncoderModel<f32> {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        EncoderModel::<f32>::with_scalar(config, seed)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, self.params.iter())?;
        let path = dir.join(CONFIG_FILE);
        std::fs::write(&path, serde_json::to_vec_pretty(&self.config)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CONFIG_FILE);
        let config: EncoderConfig = serde_json::from_slice(&std::fs::read(&path).map_err(|e| Error::io(&path, e))?)?;
        let mut model = EncoderModel::new(config, 0)?;
        let entries = load_checkpoint(dir)?;
        model.params.load_from(entries.iter().map(|(n, t)| (n.as_str(), t)))?;
        Ok(model)
    }
}

impl<T: Scalar> EncoderModel<T> {
    /// Randomly initialised model (Xavier weights, zero biases, small normal
    /// embeddings); deterministic in `seed`.
    pub fn with_scalar(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.d_model;
        let p = config.layout.patches;
        let mut reg = |name: String, t: Tensor<T>| params.register(format!("{PARAM_PREFIX}{name}"), t).map(|_| ());

        reg("pos".into(), init::normal(&mut rng, &[p, d], 0.02))?;
        reg("domain_emb".into(), init::normal(&mut rng, &[3, d], 0.02))?;
        for &dom in config.domains() {
            let name = dom.name();
            let width = config.layout.width(dom);
            reg(format!("embed/{name}/w"), init::xavier_uniform(&mut rng, width, d))?;
            reg(format!("embed/{name}/b"), Tensor::zeros(&[d]))?;
            reg(format!("mask_token/{name}"), init::normal(&mut rng, &[d], 0.02))?;
        }
        let mut layers: Vec<String> = config.domains().iter().map(|d| format!("ts/{}", d.name())).collect();
        if config.cross_domain {
            layers.push("agg1".into());
            if !config.share_aggregators {
                layers.push("agg2".into());
            }
        }
        let ff = d * config.ff_mult;
        for layer in &layers {
            for name in transformer_names(layer) {
                let leaf = name.rsplit('/').next().unwrap();
                let t = match leaf {
                    "w1" => init::xavier_uniform(&mut rng, d, ff),
                    "b1" => Tensor::zeros(&[ff]),
                    "w2" => init::xavier_uniform(&mut rng, ff, d),
                    l if l.starts_with('w') => init::xavier_uniform(&mut rng, d, d),
                    _ => Tensor::zeros(&[d]),
                };
                reg(name, t)?;
            }
        }
        if config.cross_space {
            for &dom in config.domains() {
                reg(format!("gcn/{}/w", dom.name()), init::xavier_uniform(&mut rng, d, d))?;
            }
        }
        for &dom in config.domains() {
            let width = config.layout.width(dom);
            reg(
                format!("head/{}/w", dom.name()),
                init::xavier_uniform(&mut rng, d, width),
            )?;
            reg(format!("head/{}/b", dom.name()), Tensor::zeros(&[width]))?;
        }
        let k = config.domains().len();
        reg("pool/w".into(), init::xavier_uniform(&mut rng, k * d, d))?;
        reg("pool/b".into(), Tensor::zeros(&[d]))?;
        Ok(EncoderModel { config, params })
    }

    pub fn cast<U: Scalar>(&self) -> EncoderModel<U> {
        EncoderModel {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.by_name(&format!("{PARAM_PREFIX}{name}"))
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let id = self.params.id(&format!("{PARAM_PREFIX}{name}"))?;
        Some(self.params.get_mut(id))
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<T>, requires_grad: bool) -> Bound<'a, T> {
        Bound {
            params: &self.params,
            vars: self.params.bind(g, requires_grad),
        }
    }

    /// Treat existing tape variables, in registration order, as the
    /// parameters (e.g. leaves created by a gradient checker).
    pub fn bind_existing(&self, vars: Vec<Var>) -> Result<Bound<'_, T>> {
        if vars.len() != self.params.len() {
            return Err(Error::shape("bound parameter count", self.params.len(), vars.len()));
        }
        Ok(Bound {
            params: &self.params,
            vars,
        })
    }

    fn check_sample(&self, sample: &TriDomainSample) -> Result<()> {
        if sample.layout != self.config.layout {
            return Err(Error::shape(
                "sample layout",
                format!("{:?}", self.config.layout),
                format!("{:?}", sample.layout),
            ));
        }
        for &dom in self.config.domains() {
            let dp = sample.domain(dom);
            let want = self.config.layout.width(dom);
            if dp.width != want {
                return Err(Error::shape(format!("{} patch width", dom.name()), want, dp.width));
            }
        }
        Ok(())
    }

    /// Token grids after embedding (step 1 above), one `[N, P, d]` per domain.
    pub fn embed_graph(&self, g: &mut Graph<T>, b: &Bound<T>, sample: &TriDomainSample) -> Result<Vec<Var>> {
        self.check_sample(sample)?;
        let (n, p, d) = (sample.nodes, self.config.layout.patches, self.config.d_model);
        let mut out = Vec::new();
        for &dom in self.config.domains() {
            let dp = sample.domain(dom);
            let name = dom.name();
            let x = g.constant(Tensor::new(
                &[n, p, dp.width],
                dp.values.iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
            )?);
            let emb = g.linear(
                x,
                b.get(&format!("embed/{name}/w")),
                Some(b.get(&format!("embed/{name}/b"))),
            )?;
            let tokens = if dp.mask.iter().any(|&m| m) {
                let keep: Vec<T> = dp.mask.iter().map(|&m| if m { T::zero() } else { T::one() }).collect();
                let masked: Vec<T> = dp.mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect();
                let keep = g.constant(Tensor::new(&[n, p, 1], keep)?);
                let masked = g.constant(Tensor::new(&[n, p, 1], masked)?);
                let kept = g.mul(emb, keep)?;
                let mt = g.reshape(b.get(&format!("mask_token/{name}")), &[1, d])?;
                let fill = g.matmul(masked, mt)?;
                g.add(kept, fill)?
            } else {
                emb
            };
            let with_pos = g.add(tokens, b.get("pos"))?;
            let dom_row = g.gather_rows(b.get("domain_emb"), &[dom.index()])?;
            let dom_row = g.reshape(dom_row, &[d])?;
            out.push(g.add(with_pos, dom_row)?);
        }
        Ok(out)
    }

    /// Pre-norm transformer layer over `x: [B, S, d]`; also returns the
    /// attention weights `[B * heads, S, S]`.
    fn transformer(&self, g: &mut Graph<T>, b: &Bound<T>, layer: &str, x: Var) -> Result<(Var, Var)> {
        let shape = g.shape(x).to_vec();
        let (bs, s, d) = (shape[0], shape[1], shape[2]);
        let h = self.config.heads;
        let dh = d / h;
        let eps = self.config.layer_norm_eps;
        let p = |n: &str| b.get(&format!("{layer}/{n}"));

        let xn = g.layer_norm(x, eps)?;
        let heads_of = |g: &mut Graph<T>, w: &str, bias: &str| -> Result<Var> {
            let y = g.linear(xn, p(w), Some(p(bias)))?;
            let y = g.reshape(y, &[bs, s, h, dh])?;
            let y = g.permute(y, &[0, 2, 1, 3])?;
            Ok(g.reshape(y, &[bs * h, s, dh])?)
        };
        let q = heads_of(g, "wq", "bq")?;
        let k = heads_of(g, "wk", "bk")?;
        let v = heads_of(g, "wv", "bv")?;
        let scores = g.matmul_t(q, k)?;
        let scores = g.mul_scalar(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax(scores, 2)?;
        let ctx = g.matmul(attn, v)?;
        let ctx = g.reshape(ctx, &[bs, h, s, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[bs, s, d])?;
        let proj = g.linear(ctx, p("wo"), Some(p("bo")))?;
        let x = g.add(x, proj)?;

        let xn = g.layer_norm(x, eps)?;
        let f = g.linear(xn, p("w1"), Some(p("b1")))?;
        let f = g.relu(f);
        let f = g.linear(f, p("w2"), Some(p("b2")))?;
        Ok((g.add(x, f)?, attn))
    }

    fn cross_domain(&self, g: &mut Graph<T>, b: &Bound<T>, layer: &str, tokens: &[Var]) -> Result<(Vec<Var>, Var)> {
        let p = self.config.layout.patches;
        let joined = g.concat(tokens, 1)?;
        let (y, attn) = self.transformer(g, b, layer, joined)?;
        Ok((g.split(y, 1, &vec![p; tokens.len()])?, attn))
    }

    /// Full encoder pass. `adjacency` must be the `[N, N]` row-stochastic
    /// matrix of the window's nodes.
    pub fn encode_graph(
        &self,
        g: &mut Graph<T>,
        b: &Bound<T>,
        sample: &TriDomainSample,
        adjacency: &[f64],
    ) -> Result<Encoded> {
        let n = sample.nodes;
        if adjacency.len() != n * n {
            return Err(Error::shape("encoder adjacency", format!("{n}x{n}"), adjacency.len()));
        }
        let (p, d) = (self.config.layout.patches, self.config.d_model);
        let tokens = self.embed_graph(g, b, sample)?;
        let mut hs = Vec::with_capacity(tokens.len());
        let mut attention = None;
        for (&dom, &t) in self.config.domains().iter().zip(&tokens) {
            let (y, a) = self.transformer(g, b, &format!("ts/{}", dom.name()), t)?;
            hs.push(y);
            attention = Some(a);
        }
        if self.config.cross_domain {
            hs = self.cross_domain(g, b, "agg1", &hs)?.0;
        }
        if self.config.cross_space {
            let a = g.constant(Tensor::from_f64(&[n, n], adjacency)?);
            for (&dom, h) in self.config.domains().iter().zip(hs.iter_mut()) {
                let flat = g.reshape(*h, &[n, p * d])?;
                let mixed = g.matmul(a, flat)?;
                let mixed = g.reshape(mixed, &[n, p, d])?;
                let y = g.matmul(mixed, b.get(&format!("gcn/{}/w", dom.name())))?;
                *h = g.relu(y);
            }
        }
        if self.config.cross_domain {
            let layer = if self.config.share_aggregators { "agg1" } else { "agg2" };
            let (y, a) = self.cross_domain(g, b, layer, &hs)?;
            hs = y;
            attention = Some(a);
        }
        Ok(Encoded { domains: hs, attention })
    }

    /// Per-domain linear heads: `[N, P, d]` to `[N, P, width]`.
    pub fn reconstruct_graph(&self, g: &mut Graph<T>, b: &Bound<T>, encoded: &[Var]) -> Result<Vec<Var>> {
        self.config
            .domains()
            .iter()
            .zip(encoded)
            .map(|(dom, &h)| {
                let name = dom.name();
                Ok(g.linear(
                    h,
                    b.get(&format!("head/{name}/w")),
                    Some(b.get(&format!("head/{name}/b"))),
                )?)
            })
            .collect()
    }

    /// One `[N, d]` embedding per node.
    pub fn pool_graph(&self, g: &mut Graph<T>, b: &Bound<T>, encoded: &[Var], mode: PoolMode) -> Result<Var> {
        let means = encoded
            .iter()
            .map(|&h| g.mean(h, 1))
            .collect::<numcore::Result<Vec<_>>>()?;
        match mode {
            PoolMode::Sum => {
                let mut acc = means[0];
                for &m in &means[1..] {
                    acc = g.add(acc, m)?;
                }
                Ok(acc)
            }
            PoolMode::LinearConcat => {
                let cat = g.concat(&means, 1)?;
                Ok(g.linear(cat, b.get("pool/w"), Some(b.get("pool/b")))?)
            }
        }
    }

    // ---- tape-free convenience wrappers ------------------------------------

    pub fn embed_patches(&self, sample: &TriDomainSample) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let out = self.embed_graph(&mut g, &b, sample)?;
        Ok(out.iter().map(|&v| g.value(v).clone()).collect())
    }

    pub fn encode(&self, sample: &TriDomainSample, adjacency: &[f64]) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let enc = self.encode_graph(&mut g, &b, sample, adjacency)?;
        Ok(enc.domains.iter().map(|&v| g.value(v).clone()).collect())
    }

    pub fn reconstruct(&self, encoded: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let vars: Vec<Var> = encoded.iter().map(|t| g.constant(t.clone())).collect();
        let out = self.reconstruct_graph(&mut g, &b, &vars)?;
        Ok(out.iter().map(|&v| g.value(v).clone()).collect())
    }

    pub fn pool_node_embedding(&self, encoded: &[Tensor<T>], mode: PoolMode) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let vars: Vec<Var> = encoded.iter().map(|t| g.constant(t.clone())).collect();
        let out = self.pool_graph(&mut g, &b, &vars, mode)?;
        Ok(g.value(out).clone())
    }

    /// Encode with the attention weights of the last cross-domain aggregator
    /// averaged over heads: `[N, S, S]`. `None` without cross-domain aggregators.
    pub fn attention_map(&self, sample: &TriDomainSample, adjacency: &[f64]) -> Result<Option<Tensor<T>>> {
        if !self.config.cross_domain {
            return Ok(None);
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let enc = self.encode_graph(&mut g, &b, sample, adjacency)?;
        let attn = g.value(enc.attention.expect("aggregator attention"));
        let (nh, s) = (attn.shape()[0], attn.shape()[1]);
        let h = self.config.heads;
        let n = nh / h;
        let scale = T::one() / T::from_usize(h).unwrap();
        let mut out = vec![T::zero(); n * s * s];
        for (blk, chunk) in attn.data().chunks(s * s).enumerate() {
            let node = blk / h;
            for (o, &v) in out[node * s * s..(node + 1) * s * s].iter_mut().zip(chunk) {
                *o = *o + v * scale;
            }
        }
        Ok(Some(Tensor::new(&[n, s, s], out)?))
    }

    /// Names of all parameters (with prefix), in registration order.
    pub fn param_names(&self) -> Vec<String> {
        self.params.iter().map(|(n, _)| n.to_string()).collect()
    }

    pub fn snapshot(&self) -> HashMap<String, Tensor<T>> {
        self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }
}
