//! The decoder-only multi-token ASR model.
//!
//! A strided feature encoder and stacking adapter turn frames into a speech
//! prefix; a pre-norm causal transformer trunk runs over the concatenated
//! `[speech; tokens]` stream with learned absolute positions; K output
//! heads each predict a different future token offset. Two head variants:
//!
//! - projection: K independent `D x V` matrices;
//! - latent: K full-rank `D x D` maps into one shared `D x V` un-embedding.

mod checkpoint;
mod forward;
mod infer;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::{Error, Result};

pub use checkpoint::{load_checkpoint, load_model, save_checkpoint, save_model, TrainState};
pub use forward::{
    encode_speech, forward_full, forward_full_tape, ForwardNodes, GraphBuilder, LogProbs,
    TapeForward,
};
pub use infer::{forward_step, forward_step_group, prefill, KVCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadVariant {
    Projection,
    Latent,
}

/// Architecture description. `k_heads` is the number of prediction heads;
/// `n_attn` the number of attention heads per trunk layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub vocab: usize,
    pub k_heads: usize,
    pub n_layers: usize,
    pub n_attn: usize,
    pub head_variant: HeadVariant,
    pub d_feat: usize,
    pub enc_width: usize,
    pub enc_layers: usize,
    pub subsample: usize,
    pub stack: usize,
    pub max_positions: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            vocab: 64,
            k_heads: 4,
            n_layers: 4,
            n_attn: 4,
            head_variant: HeadVariant::Latent,
            d_feat: 16,
            enc_width: 64,
            enc_layers: 2,
            subsample: 2,
            stack: 2,
            max_positions: 128,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_heads < 1 {
            return Err(Error::config("k_heads must be at least 1"));
        }
        if self.d_model == 0 || self.n_attn == 0 || self.d_model % self.n_attn != 0 {
            return Err(Error::config(format!(
                "d_model ({}) must be a positive multiple of n_attn ({})",
                self.d_model, self.n_attn
            )));
        }
        if self.vocab < 4 {
            return Err(Error::config("vocab must be at least 4 (pad, bos, eos, content)"));
        }
        if self.subsample < 1 {
            return Err(Error::config("subsample must be at least 1"));
        }
        if self.stack < 1 {
            return Err(Error::config("stack must be at least 1"));
        }
        if self.n_layers < 1 {
            return Err(Error::config("n_layers must be at least 1"));
        }
        if self.d_feat == 0 {
            return Err(Error::config("d_feat must be at least 1"));
        }
        if self.enc_width == 0 {
            return Err(Error::config("enc_width must be at least 1"));
        }
        if self.max_positions < 2 {
            return Err(Error::config("max_positions must be at least 2"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_attn
    }

    /// Adapted speech prefix length for `t` input frames.
    pub fn speech_prefix_len(&self, t: usize) -> usize {
        (t / self.subsample) / self.stack
    }

    /// Extra head parameters relative to a single-head model of the same
    /// trunk: `(K-1) D V` for projection heads, `K D^2` for latent maps.
    pub fn head_param_overhead(&self) -> usize {
        match self.head_variant {
            HeadVariant::Projection => (self.k_heads - 1) * self.d_model * self.vocab,
            HeadVariant::Latent => self.k_heads * self.d_model * self.d_model,
        }
    }
}

enum InitKind {
    Zero,
    One,
    Normal(f64),
    /// Identity plus small noise, so latent maps start out approximating
    /// the shared un-embedding behaviour.
    IdentityNoise(f64),
    /// Copy of an earlier parameter plus small noise.
    CopyNoise(usize, f64),
}

fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, InitKind)> {
    let d = config.d_model;
    let v = config.vocab;
    let ew = config.enc_width;
    let mut out: Vec<(String, Vec<usize>, InitKind)> = Vec::new();

    out.push(("enc.in.w".into(), vec![config.subsample * config.d_feat, ew], InitKind::Normal(0.02)));
    out.push(("enc.in.b".into(), vec![ew], InitKind::Zero));
    for e in 0..config.enc_layers {
        out.push((format!("enc.{e}.ln.g"), vec![ew], InitKind::One));
        out.push((format!("enc.{e}.ln.b"), vec![ew], InitKind::Zero));
        out.push((format!("enc.{e}.ff1.w"), vec![ew, 2 * ew], InitKind::Normal(0.02)));
        out.push((format!("enc.{e}.ff1.b"), vec![2 * ew], InitKind::Zero));
        out.push((format!("enc.{e}.ff2.w"), vec![2 * ew, ew], InitKind::Normal(0.02)));
        out.push((format!("enc.{e}.ff2.b"), vec![ew], InitKind::Zero));
    }
    out.push(("adapter.w".into(), vec![config.stack * ew, d], InitKind::Normal(0.02)));
    out.push(("adapter.b".into(), vec![d], InitKind::Zero));
    out.push(("tok_emb".into(), vec![v, d], InitKind::Normal(0.02)));
    out.push(("pos_emb".into(), vec![config.max_positions, d], InitKind::Normal(0.02)));
    for l in 0..config.n_layers {
        out.push((format!("trf.{l}.ln1.g"), vec![d], InitKind::One));
        out.push((format!("trf.{l}.ln1.b"), vec![d], InitKind::Zero));
        for proj in ["q", "k", "v", "o"] {
            out.push((format!("trf.{l}.w{proj}"), vec![d, d], InitKind::Normal(0.02)));
            out.push((format!("trf.{l}.b{proj}"), vec![d], InitKind::Zero));
        }
        out.push((format!("trf.{l}.ln2.g"), vec![d], InitKind::One));
        out.push((format!("trf.{l}.ln2.b"), vec![d], InitKind::Zero));
        out.push((format!("trf.{l}.ff1.w"), vec![d, 4 * d], InitKind::Normal(0.02)));
        out.push((format!("trf.{l}.ff1.b"), vec![4 * d], InitKind::Zero));
        out.push((format!("trf.{l}.ff2.w"), vec![4 * d, d], InitKind::Normal(0.02)));
        out.push((format!("trf.{l}.ff2.b"), vec![d], InitKind::Zero));
    }
    out.push(("ln_f.g".into(), vec![d], InitKind::One));
    out.push(("ln_f.b".into(), vec![d], InitKind::Zero));

    match config.head_variant {
        HeadVariant::Projection => {
            let head0 = out.len();
            out.push(("head.0.w".into(), vec![d, v], InitKind::Normal(0.02)));
            for k in 1..config.k_heads {
                out.push((format!("head.{k}.w"), vec![d, v], InitKind::CopyNoise(head0, 0.01)));
            }
        }
        HeadVariant::Latent => {
            for k in 0..config.k_heads {
                out.push((format!("latent.{k}.w"), vec![d, d], InitKind::IdentityNoise(0.01)));
            }
            out.push(("unembed.w".into(), vec![d, v], InitKind::Normal(0.02)));
        }
    }
    out
}

/// Model parameters in a fixed, named registry order.
#[derive(Debug, Clone)]
pub struct MultiHeadModel {
    pub config: ModelConfig,
    params: Vec<Tensor>,
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl MultiHeadModel {
    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param(&self, name: &str) -> &Tensor {
        &self.params[self.index[name]]
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self.params[self.index[name]]
    }

    pub fn param_index(&self, name: &str) -> usize {
        self.index[name]
    }

    pub(crate) fn from_parts(config: ModelConfig, names: Vec<String>, params: Vec<Tensor>) -> Self {
        let index = names.iter().cloned().zip(0..).collect();
        MultiHeadModel {
            config,
            params,
            names,
            index,
        }
    }

    pub fn n_parameters(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    /// Parameter count of the output heads (everything past the trunk).
    pub fn head_parameter_count(&self) -> usize {
        self.names
            .iter()
            .zip(&self.params)
            .filter(|(n, _)| {
                n.starts_with("head.") || n.starts_with("latent.") || n.starts_with("unembed.")
            })
            .map(|(_, p)| p.numel())
            .sum()
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = loop {
        let u: f64 = rng.gen();
        if u > 1e-300 {
            break u;
        }
    };
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Deterministic random initialization from `config.seed`.
pub fn init_model(config: &ModelConfig) -> Result<MultiHeadModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut names = Vec::new();
    let mut params: Vec<Tensor> = Vec::new();
    for (name, shape, kind) in layout(config) {
        let numel: usize = shape.iter().product();
        let data = match kind {
            InitKind::Zero => vec![0.0; numel],
            InitKind::One => vec![1.0; numel],
            InitKind::Normal(sigma) => {
                (0..numel).map(|_| sigma * standard_normal(&mut rng)).collect()
            }
            InitKind::IdentityNoise(sigma) => {
                let n = shape[0];
                let mut data = vec![0.0; numel];
                for i in 0..n {
                    data[i * n + i] = 1.0;
                }
                for v in &mut data {
                    *v += sigma * standard_normal(&mut rng);
                }
                data
            }
            InitKind::CopyNoise(src, sigma) => params[src]
                .data()
                .iter()
                .map(|&v| v + sigma * standard_normal(&mut rng))
                .collect(),
        };
        names.push(name);
        params.push(Tensor::new(shape, data)?);
    }
    Ok(MultiHeadModel::from_parts(config.clone(), names, params))
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn test_config(k_heads: usize, variant: HeadVariant) -> ModelConfig {
        ModelConfig {
            d_model: 16,
            vocab: 12,
            k_heads,
            n_layers: 2,
            n_attn: 2,
            head_variant: variant,
            d_feat: 4,
            enc_width: 8,
            enc_layers: 1,
            subsample: 2,
            stack: 2,
            max_positions: 64,
            seed: 9,
        }
    }

    pub(crate) fn random_features(t: usize, d_feat: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..t * d_feat).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![t, d_feat], data).unwrap()
    }
}
