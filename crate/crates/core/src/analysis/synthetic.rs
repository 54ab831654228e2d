//! Synthetic KV streams with the structure real caches show.
//!
//! K: each head has a fixed channel-magnitude profile with a few outlier
//! channels scaled up, drifting linearly toward a second profile at
//! `k_drift_rate` per step, plus Gaussian noise (scaled with the channel
//! multiplier). V: each token id has a preferred cluster per head; a token
//! lands in it with probability `v_consistency` and in a uniformly random
//! cluster otherwise, then gets Gaussian noise around the cluster center.
//!
//! Spec files are flat `key = value` lines; `#` starts a comment and lists
//! are comma separated. Keys not given keep their defaults.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::engine::head_seed;
use crate::error::{Error, Result};
use crate::stream::{HeadStream, KvStream};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticStreamSpec {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub prefill_len: usize,
    pub decode_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
    pub k_outlier_channels: Vec<usize>,
    pub k_outlier_multipliers: Vec<f64>,
    pub k_drift_rate: f64,
    pub k_noise_std: f64,
    pub v_clusters: usize,
    pub v_center_spread: f64,
    pub v_cluster_std: f64,
    pub v_consistency: f64,
}

impl Default for SyntheticStreamSpec {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            head_dim: 64,
            prefill_len: 512,
            decode_len: 1024,
            vocab_size: 64,
            seed: 0,
            k_outlier_channels: vec![7],
            k_outlier_multipliers: vec![20.0],
            k_drift_rate: 0.001,
            k_noise_std: 0.1,
            v_clusters: 8,
            v_center_spread: 10.0,
            v_cluster_std: 0.1,
            v_consistency: 0.9,
        }
    }
}

/// A generated stream plus the ground truth behind it.
#[derive(Debug, Clone)]
pub struct SyntheticStream {
    pub stream: KvStream,
    /// V cluster id per token, per head (layer-major).
    pub v_cluster_ids: Vec<Vec<usize>>,
    /// V cluster centers per head (layer-major).
    pub v_centers: Vec<Vec<Vec<f64>>>,
}

impl SyntheticStreamSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("prefill_len", self.prefill_len),
            ("vocab_size", self.vocab_size),
            ("v_clusters", self.v_clusters),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::usage(format!("{name} must be >= 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.v_consistency) {
            return Err(Error::usage(format!(
                "v_consistency must lie in [0, 1], got {}",
                self.v_consistency
            )));
        }
        if self.k_outlier_channels.len() != self.k_outlier_multipliers.len() {
            return Err(Error::usage(
                "k_outlier_channels and k_outlier_multipliers differ in length",
            ));
        }
        if let Some(&c) = self.k_outlier_channels.iter().find(|&&c| c >= self.head_dim) {
            return Err(Error::usage(format!("outlier channel {c} >= head_dim")));
        }
        let reals = [
            ("k_drift_rate", self.k_drift_rate),
            ("k_noise_std", self.k_noise_std),
            ("v_center_spread", self.v_center_spread),
            ("v_cluster_std", self.v_cluster_std),
        ];
        for (name, v) in reals {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::usage(format!("{name} must be finite and >= 0")));
            }
        }
        if self
            .k_outlier_multipliers
            .iter()
            .any(|m| !(m.is_finite() && *m > 0.0))
        {
            return Err(Error::usage("outlier multipliers must be finite and > 0"));
        }
        Ok(())
    }

    /// Parse the `key = value` text format.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::usage(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |e: &dyn std::fmt::Display| {
                Error::usage(format!("line {}: bad value for {key}: {e}", lineno + 1))
            };
            let int = |v: &str| v.parse::<usize>().map_err(|e| bad(&e));
            let real = |v: &str| v.parse::<f64>().map_err(|e| bad(&e));
            match key {
                "layers" => spec.layers = int(value)?,
                "heads" => spec.heads = int(value)?,
                "head_dim" => spec.head_dim = int(value)?,
                "prefill_len" => spec.prefill_len = int(value)?,
                "decode_len" => spec.decode_len = int(value)?,
                "vocab_size" => spec.vocab_size = int(value)?,
                "seed" => spec.seed = value.parse().map_err(|e| bad(&e))?,
                "k_outlier_channels" => {
                    spec.k_outlier_channels = split_list(value).map(int).collect::<Result<_>>()?
                }
                "k_outlier_multipliers" => {
                    spec.k_outlier_multipliers = split_list(value).map(real).collect::<Result<_>>()?
                }
                "k_drift_rate" => spec.k_drift_rate = real(value)?,
                "k_noise_std" => spec.k_noise_std = real(value)?,
                "v_clusters" => spec.v_clusters = int(value)?,
                "v_center_spread" => spec.v_center_spread = real(value)?,
                "v_cluster_std" => spec.v_cluster_std = real(value)?,
                "v_consistency" => spec.v_consistency = real(value)?,
                other => {
                    return Err(Error::usage(format!(
                        "line {}: unknown key `{other}`",
                        lineno + 1
                    )))
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Render in the format [`parse`](Self::parse) reads.
    pub fn to_text(&self) -> String {
        let join = |v: Vec<String>| v.join(", ");
        let mut s = String::new();
        let _ = writeln!(s, "layers = {}", self.layers);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "head_dim = {}", self.head_dim);
        let _ = writeln!(s, "prefill_len = {}", self.prefill_len);
        let _ = writeln!(s, "decode_len = {}", self.decode_len);
        let _ = writeln!(s, "vocab_size = {}", self.vocab_size);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(
            s,
            "k_outlier_channels = {}",
            join(self.k_outlier_channels.iter().map(|c| c.to_string()).collect())
        );
        let _ = writeln!(
            s,
            "k_outlier_multipliers = {}",
            join(
                self.k_outlier_multipliers
                    .iter()
                    .map(|c| format!("{c:?}"))
                    .collect()
            )
        );
        let _ = writeln!(s, "k_drift_rate = {:?}", self.k_drift_rate);
        let _ = writeln!(s, "k_noise_std = {:?}", self.k_noise_std);
        let _ = writeln!(s, "v_clusters = {}", self.v_clusters);
        let _ = writeln!(s, "v_center_spread = {:?}", self.v_center_spread);
        let _ = writeln!(s, "v_cluster_std = {:?}", self.v_cluster_std);
        let _ = writeln!(s, "v_consistency = {:?}", self.v_consistency);
        s
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn channel_profile(rng: &mut ChaCha8Rng, d: usize, multipliers: &[f64]) -> Vec<f64> {
    (0..d)
        .map(|c| {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            sign * (1.0 + rng.random_range(-0.2..0.2)) * multipliers[c]
        })
        .collect()
}

fn split_list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

pub fn generate_synthetic_stream(spec: &SyntheticStreamSpec) -> Result<SyntheticStream> {
    spec.validate()?;
    let d = spec.head_dim;
    let total = spec.prefill_len + spec.decode_len;

    let mut id_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let token_ids: Vec<u32> = (0..total)
        .map(|_| id_rng.random_range(0..spec.vocab_size as u32))
        .collect();

    let mut multipliers = vec![1.0; d];
    for (&c, &m) in spec.k_outlier_channels.iter().zip(&spec.k_outlier_multipliers) {
        multipliers[c] = m;
    }

    let mut heads = Vec::with_capacity(spec.layers * spec.heads);
    let mut v_cluster_ids = Vec::with_capacity(heads.capacity());
    let mut v_centers = Vec::with_capacity(heads.capacity());
    for layer in 0..spec.layers {
        for head in 0..spec.heads {
            let mut rng = ChaCha8Rng::seed_from_u64(head_seed(spec.seed, layer, head));

            let p0 = channel_profile(&mut rng, d, &multipliers);
            let p1 = channel_profile(&mut rng, d, &multipliers);
            let mut k = Matrix::zeros(total, d);
            for t in 0..total {
                let lambda = (spec.k_drift_rate * t as f64).min(1.0);
                for (c, out) in k.row_mut(t).iter_mut().enumerate() {
                    let base = p0[c] + lambda * (p1[c] - p0[c]);
                    *out = base + spec.k_noise_std * multipliers[c] * normal(&mut rng);
                }
            }

            let half = 0.5 * spec.v_center_spread;
            let centers: Vec<Vec<f64>> = (0..spec.v_clusters)
                .map(|_| (0..d).map(|_| rng.random_range(-half..=half)).collect())
                .collect();
            let preferred: Vec<usize> = (0..spec.vocab_size)
                .map(|_| rng.random_range(0..spec.v_clusters))
                .collect();
            let mut v = Matrix::zeros(total, d);
            let mut ids = Vec::with_capacity(total);
            for (t, &tok) in token_ids.iter().enumerate() {
                let cluster = if rng.random_bool(spec.v_consistency) {
                    preferred[tok as usize]
                } else {
                    rng.random_range(0..spec.v_clusters)
                };
                ids.push(cluster);
                for (out, &c) in v.row_mut(t).iter_mut().zip(&centers[cluster]) {
                    *out = c + spec.v_cluster_std * normal(&mut rng);
                }
            }

            heads.push(HeadStream { layer, head, k, v });
            v_cluster_ids.push(ids);
            v_centers.push(centers);
        }
    }

    let stream = KvStream {
        num_layers: spec.layers,
        num_heads: spec.heads,
        head_dim: d,
        prefill_len: spec.prefill_len,
        decode_len: spec.decode_len,
        heads,
        token_ids: Some(token_ids),
    };
    stream.validate()?;
    Ok(SyntheticStream {
        stream,
        v_cluster_ids,
        v_centers,
    })
}
