//! Time / amplitude / phase decomposition of traffic windows.
//!
//! The forward transform is the unnormalised DFT `X_k = sum_t x_t e^{-2 pi i k t / T}`
//! evaluated directly from a twiddle table (T is 288 in the canonical setup,
//! which is not a power of two, and the O(T^2) sum is cheap at that size).
//! Only bins `0..T/2` are retained so that the frequency axis splits evenly
//! into the same number of patches as the time axis; the Nyquist bin is
//! dropped.

use log::warn;
use num_complex::Complex64;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Amplitudes below this magnitude get phase 0.
pub const PHASE_AMPLITUDE_FLOOR: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Time,
    Amplitude,
    Phase,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::Time, Domain::Amplitude, Domain::Phase];

    pub fn index(self) -> usize {
        match self {
            Domain::Time => 0,
            Domain::Amplitude => 1,
            Domain::Phase => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Domain::Time => "time",
            Domain::Amplitude => "amplitude",
            Domain::Phase => "phase",
        }
    }
}

/// Direct DFT over a fixed length with a precomputed twiddle table.
#[derive(Clone, Debug)]
pub struct Dft {
    len: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Dft {
    pub fn new(len: usize) -> Self {
        let step = 2.0 * std::f64::consts::PI / len as f64;
        Dft {
            len,
            cos: (0..len).map(|j| (step * j as f64).cos()).collect(),
            sin: (0..len).map(|j| (step * j as f64).sin()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Bins `0..bins` of the forward transform.
    pub fn forward(&self, x: &[f64], bins: usize) -> Vec<Complex64> {
        debug_assert_eq!(x.len(), self.len);
        let n = self.len;
        (0..bins)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                let mut j = 0usize;
                for &v in x {
                    re += v * self.cos[j];
                    im -= v * self.sin[j];
                    j += k;
                    if j >= n {
                        j -= n;
                    }
                }
                Complex64::new(re, im)
            })
            .collect()
    }

    /// Real inverse from the lower half-spectrum `0..bins` (bins <= len/2);
    /// the remaining bins are the conjugate mirror, the Nyquist bin is zero.
    pub fn inverse_real(&self, half: &[Complex64]) -> Vec<f64> {
        let n = self.len;
        let scale = 1.0 / n as f64;
        (0..n)
            .map(|t| {
                let mut acc = half.first().map_or(0.0, |c| c.re);
                let mut j = t;
                for c in half.iter().skip(1) {
                    // 2 Re(X_k e^{+i theta})
                    acc += 2.0 * (c.re * self.cos[j] - c.im * self.sin[j]);
                    j += t;
                    if j >= n {
                        j -= n;
                    }
                }
                acc * scale
            })
            .collect()
    }
}

/// Window geometry: history length and number of patches per domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchLayout {
    pub history_len: usize,
    pub patches: usize,
}

impl Default for PatchLayout {
    fn default() -> Self {
        PatchLayout {
            history_len: 288,
            patches: 24,
        }
    }
}

impl PatchLayout {
    pub fn validate(&self) -> Result<()> {
        if self.patches == 0 || !self.history_len.is_multiple_of(2 * self.patches) {
            return Err(Error::Config(format!(
                "history length {} must be divisible by twice the patch count {}",
                self.history_len, self.patches
            )));
        }
        Ok(())
    }

    /// Number of retained frequency bins.
    pub fn freq_bins(&self) -> usize {
        self.history_len / 2
    }

    pub fn time_len(&self) -> usize {
        self.history_len / self.patches
    }

    pub fn freq_len(&self) -> usize {
        self.freq_bins() / self.patches
    }

    pub fn width(&self, domain: Domain) -> usize {
        match domain {
            Domain::Time => self.time_len(),
            Domain::Amplitude | Domain::Phase => self.freq_len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriDomainSeries {
    pub time: Vec<f64>,
    pub amplitude: Vec<f64>,
    pub phase: Vec<f64>,
}

fn amplitude_phase(bins: &[Complex64]) -> (Vec<f64>, Vec<f64>) {
    bins.iter()
        .map(|c| {
            let a = c.norm();
            let p = if a < PHASE_AMPLITUDE_FLOOR {
                0.0
            } else {
                c.im.atan2(c.re)
            };
            // atan2 yields [-pi, pi]; fold -pi onto pi.
            let p = if p <= -std::f64::consts::PI {
                std::f64::consts::PI
            } else {
                p
            };
            (a, p)
        })
        .unzip()
}

/// Decompose one series into its time, amplitude and phase representations.
pub fn to_tri_domain(x: &[f64], patches: usize) -> Result<TriDomainSeries> {
    let layout = PatchLayout {
        history_len: x.len(),
        patches,
    };
    layout.validate()?;
    to_tri_domain_with(&Dft::new(x.len()), x)
}

pub(crate) fn to_tri_domain_with(dft: &Dft, x: &[f64]) -> Result<TriDomainSeries> {
    if let Some(v) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "series value".into(),
            detail: v.to_string(),
        });
    }
    let bins = dft.forward(x, x.len() / 2);
    let (amplitude, phase) = amplitude_phase(&bins);
    Ok(TriDomainSeries {
        time: x.to_vec(),
        amplitude,
        phase,
    })
}

/// Invert a retained half-spectrum back to a real series of `history_len` steps.
pub fn from_tri_domain(amplitude: &[f64], phase: &[f64], history_len: usize) -> Result<Vec<f64>> {
    if amplitude.len() != phase.len() || amplitude.len() != history_len / 2 {
        return Err(Error::shape(
            "from_tri_domain bins",
            history_len / 2,
            format!("amplitude {} / phase {}", amplitude.len(), phase.len()),
        ));
    }
    let half: Vec<Complex64> = amplitude
        .iter()
        .zip(phase)
        .map(|(&a, &p)| Complex64::from_polar(a, p))
        .collect();
    Ok(Dft::new(history_len).inverse_real(&half))
}

/// Split a series into `patches` contiguous equal-length pieces.
pub fn patchify<T: Copy>(series: &[T], patches: usize) -> Result<Vec<Vec<T>>> {
    if patches == 0 || !series.len().is_multiple_of(patches) {
        return Err(Error::shape(
            "patchify length",
            format!("a multiple of {patches}"),
            series.len(),
        ));
    }
    Ok(series.chunks(series.len() / patches).map(<[T]>::to_vec).collect())
}

/// Number of patches masked out of `patches` at `ratio`.
pub fn masked_count(ratio: f64, patches: usize) -> usize {
    ((ratio * patches as f64 - 1e-9).ceil().max(0.0) as usize).min(patches)
}

/// Patches of one domain for every node, `values` laid out `[node][patch][width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainPatches {
    pub width: usize,
    pub values: Vec<f32>,
    /// `[node][patch]`, true = masked.
    pub mask: Vec<bool>,
}

impl DomainPatches {
    pub fn patch(&self, node: usize, patch: usize, patches: usize) -> &[f32] {
        let s = (node * patches + patch) * self.width;
        &self.values[s..s + self.width]
    }

    pub fn masked_patches(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Patched tri-domain view of one traffic window across all nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct TriDomainSample {
    pub nodes: usize,
    pub layout: PatchLayout,
    pub domains: [DomainPatches; 3],
}

impl TriDomainSample {
    /// Build from a node-major `[node][step]` history. Amplitudes are multiplied
    /// by `amplitude_scale` before patching.
    pub fn from_history(history: &[f32], nodes: usize, layout: PatchLayout, amplitude_scale: f64) -> Result<Self> {
        layout.validate()?;
        let t = layout.history_len;
        if history.len() != nodes * t {
            return Err(Error::shape("history", nodes * t, history.len()));
        }
        let dft = Dft::new(t);
        let f = layout.freq_bins();
        let mut amp = Vec::with_capacity(nodes * f);
        let mut phase = Vec::with_capacity(nodes * f);
        let mut buf = vec![0.0f64; t];
        for series in history.chunks(t) {
            for (b, &v) in buf.iter_mut().zip(series) {
                *b = v as f64;
            }
            let tri = to_tri_domain_with(&dft, &buf)?;
            amp.extend(tri.amplitude.iter().map(|a| (a * amplitude_scale) as f32));
            phase.extend(tri.phase.iter().map(|&p| p as f32));
        }
        let mask = vec![false; nodes * layout.patches];
        Ok(TriDomainSample {
            nodes,
            layout,
            domains: [
                DomainPatches {
                    width: layout.time_len(),
                    values: history.to_vec(),
                    mask: mask.clone(),
                },
                DomainPatches {
                    width: layout.freq_len(),
                    values: amp,
                    mask: mask.clone(),
                },
                DomainPatches {
                    width: layout.freq_len(),
                    values: phase,
                    mask,
                },
            ],
        })
    }

    pub fn domain(&self, d: Domain) -> &DomainPatches {
        &self.domains[d.index()]
    }

    pub fn domain_mut(&mut self, d: Domain) -> &mut DomainPatches {
        &mut self.domains[d.index()]
    }

    pub fn clear_masks(&mut self) {
        for d in &mut self.domains {
            d.mask.iter_mut().for_each(|m| *m = false);
        }
    }

    /// Mask `masked_count(ratio, P)` patches per node, independently per domain.
    pub fn mask_with<R: Rng + ?Sized>(&mut self, ratio: f64, rng: &mut R) {
        let p = self.layout.patches;
        let k = masked_count(ratio, p);
        for d in &mut self.domains {
            d.mask.iter_mut().for_each(|m| *m = false);
            for node in 0..self.nodes {
                for i in index::sample(rng, p, k) {
                    d.mask[node * p + i] = true;
                }
            }
        }
    }
}

pub fn apply_mask(sample: &TriDomainSample, ratio: f64, seed: u64) -> Result<TriDomainSample> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let mut out = sample.clone();
    out.mask_with(ratio, &mut ChaCha8Rng::seed_from_u64(seed));
    Ok(out)
}

/// Uniform random permutation without fixed points (identity for n < 2).
pub fn derangement<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    if n < 2 {
        return perm;
    }
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return perm;
        }
    }
}

/// Amplitude-swap augmentation across the nodes of one window: node `i` of
/// the result carries the amplitude patches of node `perm[i]` and keeps its
/// own time and phase patches. Masks are reset.
pub fn amplitude_swap_with<R: Rng + ?Sized>(sample: &TriDomainSample, rng: &mut R) -> (TriDomainSample, Vec<usize>) {
    if sample.nodes < 2 {
        warn!("amplitude swap on a batch of one is the identity");
    }
    let perm = derangement(sample.nodes, rng);
    let mut out = sample.clone();
    out.clear_masks();
    let src = sample.domain(Domain::Amplitude);
    let block = sample.layout.patches * src.width;
    let dst = out.domain_mut(Domain::Amplitude);
    for (i, &j) in perm.iter().enumerate() {
        dst.values[i * block..(i + 1) * block].copy_from_slice(&src.values[j * block..(j + 1) * block]);
    }
    (out, perm)
}

pub fn amplitude_swap(sample: &TriDomainSample, seed: u64) -> (TriDomainSample, Vec<usize>) {
    amplitude_swap_with(sample, &mut ChaCha8Rng::seed_from_u64(seed))
}
