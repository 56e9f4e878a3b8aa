//! Full forward passes, built as tape graphs so training can reuse them.

use crate::model::{HeadVariant, MultiHeadModel};
use crate::numerics::{NodeId, Tape, Tensor};
use crate::{Error, Result};

/// Log-probabilities for a span of positions: `row(pos, head)` is the
/// normalized log-distribution of head `head` (0-based) at position `pos`.
#[derive(Debug, Clone)]
pub struct LogProbs {
    pub n_pos: usize,
    pub k: usize,
    pub vocab: usize,
    data: Vec<f64>,
}

impl LogProbs {
    pub(crate) fn from_raw(n_pos: usize, k: usize, vocab: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), n_pos * k * vocab);
        LogProbs {
            n_pos,
            k,
            vocab,
            data,
        }
    }

    pub fn row(&self, pos: usize, head: usize) -> &[f64] {
        let base = (pos * self.k + head) * self.vocab;
        &self.data[base..base + self.vocab]
    }

    /// Distributions of all heads at the final position.
    pub fn last(&self, head: usize) -> &[f64] {
        self.row(self.n_pos - 1, head)
    }
}

/// Node handles of one utterance's forward graph.
pub struct ForwardNodes {
    /// One `[n_tok, V]` log-probability node per prediction head.
    pub head_logprobs: Vec<NodeId>,
    pub n_tok: usize,
    pub speech_len: usize,
}

/// Records model applications on a shared tape. One builder may hold many
/// utterance subgraphs; parameter leaves are created once so gradients
/// accumulate across them.
pub struct GraphBuilder<'m> {
    model: &'m MultiHeadModel,
    pub tape: Tape,
    param_nodes: Vec<NodeId>,
}

impl<'m> GraphBuilder<'m> {
    pub fn new(model: &'m MultiHeadModel) -> Self {
        let mut tape = Tape::new();
        let param_nodes = model.params().iter().map(|p| tape.param(p)).collect();
        GraphBuilder {
            model,
            tape,
            param_nodes,
        }
    }

    /// Tape leaves aligned with `model.params()` order.
    pub fn param_nodes(&self) -> &[NodeId] {
        &self.param_nodes
    }

    fn node(&self, name: &str) -> NodeId {
        self.param_nodes[self.model.param_index(name)]
    }

    /// Encoder plus adapter: `[T, d_feat]` frames to a `[T', D]` speech
    /// prefix with `T' = floor(floor(T / subsample) / stack)`.
    pub fn encode(&mut self, features: &Tensor) -> Result<NodeId> {
        let cfg = self.model.config.clone();
        if features.shape().len() != 2 || features.shape()[1] != cfg.d_feat {
            return Err(Error::ShapeMismatch {
                op: "encode_speech",
                lhs: features.shape().to_vec(),
                rhs: vec![cfg.d_feat],
            });
        }
        let t = features.shape()[0];
        if t < cfg.subsample * cfg.stack {
            return Err(Error::contract(format!(
                "{} frames cannot fill one adapted position (need {})",
                t,
                cfg.subsample * cfg.stack
            )));
        }
        let feat = self.tape.leaf(features.clone());
        let x = self.tape.stack_rows(feat, cfg.subsample)?;
        let w = self.node("enc.in.w");
        let b = self.node("enc.in.b");
        let x = self.tape.matmul(x, w)?;
        let x = self.tape.add_bias(x, b)?;
        let mut x = self.tape.gelu(x);
        for e in 0..cfg.enc_layers {
            let g = self.node(&format!("enc.{e}.ln.g"));
            let bt = self.node(&format!("enc.{e}.ln.b"));
            let w1 = self.node(&format!("enc.{e}.ff1.w"));
            let b1 = self.node(&format!("enc.{e}.ff1.b"));
            let w2 = self.node(&format!("enc.{e}.ff2.w"));
            let b2 = self.node(&format!("enc.{e}.ff2.b"));
            let h = self.tape.layer_norm(x, g, bt)?;
            let h = self.tape.matmul(h, w1)?;
            let h = self.tape.add_bias(h, b1)?;
            let h = self.tape.gelu(h);
            let h = self.tape.matmul(h, w2)?;
            let h = self.tape.add_bias(h, b2)?;
            x = self.tape.add(x, h)?;
        }
        let x = self.tape.stack_rows(x, cfg.stack)?;
        let w = self.node("adapter.w");
        let b = self.node("adapter.b");
        let x = self.tape.matmul(x, w)?;
        let x = self.tape.add_bias(x, b)?;
        Ok(x)
    }

    /// Full forward over `[speech; tokens]`. `tokens` is `y_0..y_U` with
    /// `y_0 = bos`; returns per-head log-probabilities at every token
    /// position.
    pub fn forward(&mut self, features: &Tensor, tokens: &[usize]) -> Result<ForwardNodes> {
        let cfg = self.model.config.clone();
        if tokens.is_empty() {
            return Err(Error::contract("forward needs at least the bos token"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab) {
            return Err(Error::contract(format!(
                "token {bad} out of range for vocabulary {}",
                cfg.vocab
            )));
        }
        let speech = self.encode(features)?;
        let speech_len = self.tape.value(speech).shape()[0];
        let seq_len = speech_len + tokens.len();
        if seq_len > cfg.max_positions {
            return Err(Error::Length(format!(
                "prefix of {seq_len} positions exceeds max_positions {}",
                cfg.max_positions
            )));
        }
        let tok_emb = self.node("tok_emb");
        let tok = self.tape.gather(tok_emb, tokens)?;
        let mut x = self.tape.concat_rows(speech, tok)?;
        let pos_emb = self.node("pos_emb");
        let pos = self.tape.slice_rows(pos_emb, 0, seq_len)?;
        x = self.tape.add(x, pos)?;

        let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
        for l in 0..cfg.n_layers {
            let ln1g = self.node(&format!("trf.{l}.ln1.g"));
            let ln1b = self.node(&format!("trf.{l}.ln1.b"));
            let wq = self.node(&format!("trf.{l}.wq"));
            let bq = self.node(&format!("trf.{l}.bq"));
            let wk = self.node(&format!("trf.{l}.wk"));
            let bk = self.node(&format!("trf.{l}.bk"));
            let wv = self.node(&format!("trf.{l}.wv"));
            let bv = self.node(&format!("trf.{l}.bv"));
            let wo = self.node(&format!("trf.{l}.wo"));
            let bo = self.node(&format!("trf.{l}.bo"));

            let h = self.tape.layer_norm(x, ln1g, ln1b)?;
            let q = self.tape.matmul(h, wq)?;
            let q = self.tape.add_bias(q, bq)?;
            let k = self.tape.matmul(h, wk)?;
            let k = self.tape.add_bias(k, bk)?;
            let v = self.tape.matmul(h, wv)?;
            let v = self.tape.add_bias(v, bv)?;
            let qh = self.tape.split_heads(q, cfg.n_attn)?;
            let kh = self.tape.split_heads(k, cfg.n_attn)?;
            let vh = self.tape.split_heads(v, cfg.n_attn)?;
            let scores = self.tape.bmm(qh, kh, true)?;
            let scores = self.tape.scale(scores, scale);
            let attn = self.tape.causal_softmax(scores)?;
            let ctx = self.tape.bmm(attn, vh, false)?;
            let merged = self.tape.merge_heads(ctx)?;
            let o = self.tape.matmul(merged, wo)?;
            let o = self.tape.add_bias(o, bo)?;
            x = self.tape.add(x, o)?;

            let ln2g = self.node(&format!("trf.{l}.ln2.g"));
            let ln2b = self.node(&format!("trf.{l}.ln2.b"));
            let w1 = self.node(&format!("trf.{l}.ff1.w"));
            let b1 = self.node(&format!("trf.{l}.ff1.b"));
            let w2 = self.node(&format!("trf.{l}.ff2.w"));
            let b2 = self.node(&format!("trf.{l}.ff2.b"));
            let h = self.tape.layer_norm(x, ln2g, ln2b)?;
            let h = self.tape.matmul(h, w1)?;
            let h = self.tape.add_bias(h, b1)?;
            let h = self.tape.gelu(h);
            let h = self.tape.matmul(h, w2)?;
            let h = self.tape.add_bias(h, b2)?;
            x = self.tape.add(x, h)?;
        }
        let lng = self.node("ln_f.g");
        let lnb = self.node("ln_f.b");
        let x = self.tape.layer_norm(x, lng, lnb)?;
        let tok_out = self.tape.slice_rows(x, speech_len, tokens.len())?;

        let mut head_logprobs = Vec::with_capacity(cfg.k_heads);
        match cfg.head_variant {
            HeadVariant::Projection => {
                for k in 0..cfg.k_heads {
                    let hw = self.node(&format!("head.{k}.w"));
                    let logits = self.tape.matmul(tok_out, hw)?;
                    head_logprobs.push(self.tape.log_softmax_rows(logits)?);
                }
            }
            HeadVariant::Latent => {
                let unembed = self.node("unembed.w");
                for k in 0..cfg.k_heads {
                    let lw = self.node(&format!("latent.{k}.w"));
                    let lat = self.tape.matmul(tok_out, lw)?;
                    let logits = self.tape.matmul(lat, unembed)?;
                    head_logprobs.push(self.tape.log_softmax_rows(logits)?);
                }
            }
        }
        Ok(ForwardNodes {
            head_logprobs,
            n_tok: tokens.len(),
            speech_len,
        })
    }

    /// Copies the per-head log-probabilities out of the tape.
    pub fn log_probs(&self, nodes: &ForwardNodes) -> LogProbs {
        let vocab = self.model.config.vocab;
        let k = nodes.head_logprobs.len();
        let mut data = vec![0.0; nodes.n_tok * k * vocab];
        for (ki, &node) in nodes.head_logprobs.iter().enumerate() {
            let values = self.tape.value(node).data();
            for pos in 0..nodes.n_tok {
                let dst = (pos * k + ki) * vocab;
                data[dst..dst + vocab].copy_from_slice(&values[pos * vocab..(pos + 1) * vocab]);
            }
        }
        LogProbs {
            n_pos: nodes.n_tok,
            k,
            vocab,
            data,
        }
    }
}

/// Reusable handle for a single-utterance graph, kept so callers can run
/// backward after inspecting the outputs.
pub struct TapeForward {
    pub tape: Tape,
    pub param_nodes: Vec<NodeId>,
    pub nodes: ForwardNodes,
}

/// Speech encoder + adapter as a plain value computation.
pub fn encode_speech(model: &MultiHeadModel, features: &Tensor) -> Result<Tensor> {
    let mut builder = GraphBuilder::new(model);
    let node = builder.encode(features)?;
    let mut out = builder.tape.value(node).clone();
    out.requires_grad = false;
    out.grad = None;
    Ok(out)
}

/// Teacher-forced forward pass: per-head log-distributions at every token
/// position. Position `u` of head `k` estimates the token `k+1` places
/// after `tokens[u]`.
pub fn forward_full(model: &MultiHeadModel, features: &Tensor, tokens: &[usize]) -> Result<LogProbs> {
    let mut builder = GraphBuilder::new(model);
    let nodes = builder.forward(features, tokens)?;
    Ok(builder.log_probs(&nodes))
}

/// Like [`forward_full`] but keeps the tape for backward.
pub fn forward_full_tape(
    model: &MultiHeadModel,
    features: &Tensor,
    tokens: &[usize],
) -> Result<TapeForward> {
    let mut builder = GraphBuilder::new(model);
    let nodes = builder.forward(features, tokens)?;
    let GraphBuilder {
        tape, param_nodes, ..
    } = builder;
    Ok(TapeForward {
        tape,
        param_nodes,
        nodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::testutil::{random_features, test_config};
    use crate::model::{init_model, ModelConfig};

    #[test]
    fn head_rows_are_normalized_distributions() {
        let model = init_model(&test_config(3, HeadVariant::Latent)).unwrap();
        let features = random_features(12, 4, 3);
        let tokens = [1usize, 5, 7, 9, 4];
        let lp = forward_full(&model, &features, &tokens).unwrap();
        for pos in 0..lp.n_pos {
            for head in 0..lp.k {
                let sum: f64 = lp.row(pos, head).iter().map(|v| v.exp()).sum();
                assert!((sum - 1.0).abs() < 1e-5, "pos {pos} head {head} sums to {sum}");
            }
        }
    }

    #[test]
    fn outputs_before_a_mutated_token_are_bitwise_unchanged() {
        let model = init_model(&test_config(2, HeadVariant::Projection)).unwrap();
        let features = random_features(12, 4, 4);
        let tokens = [1usize, 5, 7, 9, 4, 6];
        let base = forward_full(&model, &features, &tokens).unwrap();
        let mut mutated = tokens;
        mutated[3] = 11;
        let changed = forward_full(&model, &features, &mutated).unwrap();
        for pos in 0..3 {
            for head in 0..2 {
                assert_eq!(base.row(pos, head), changed.row(pos, head), "pos {pos}");
            }
        }
        // The mutated position itself must differ somewhere downstream.
        assert_ne!(base.row(4, 0), changed.row(4, 0));
    }

    #[test]
    fn k1_projection_model_equals_head_one_of_k4() {
        // Heads are drawn after the trunk, so the same seed yields an
        // identical trunk and an identical first head.
        let cfg4 = test_config(4, HeadVariant::Projection);
        let cfg1 = ModelConfig { k_heads: 1, ..cfg4.clone() };
        let model4 = init_model(&cfg4).unwrap();
        let model1 = init_model(&cfg1).unwrap();
        assert_eq!(
            model4.param("head.0.w").data(),
            model1.param("head.0.w").data()
        );
        let features = random_features(10, 4, 5);
        let tokens = [1usize, 5, 7, 9];
        let lp4 = forward_full(&model4, &features, &tokens).unwrap();
        let lp1 = forward_full(&model1, &features, &tokens).unwrap();
        for pos in 0..tokens.len() {
            assert_eq!(lp4.row(pos, 0), lp1.row(pos, 0));
        }
    }

    #[test]
    fn latent_head_with_identity_map_matches_shared_unembedding() {
        let cfg = test_config(2, HeadVariant::Latent);
        let mut model = init_model(&cfg).unwrap();
        // Force the first latent map to an exact identity.
        let d = cfg.d_model;
        let ident: Vec<f64> = (0..d * d)
            .map(|i| if i / d == i % d { 1.0 } else { 0.0 })
            .collect();
        *model.param_mut("latent.0.w") = Tensor::new(vec![d, d], ident).unwrap();
        // A single-head projection model sharing the trunk, whose head is
        // the latent model's un-embedding.
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, p) in model.param_names().iter().zip(model.params()) {
            if name.starts_with("latent.") || name == "unembed.w" {
                continue;
            }
            names.push(name.clone());
            params.push(p.clone());
        }
        names.push("head.0.w".to_string());
        params.push(model.param("unembed.w").clone());
        let baseline_cfg = ModelConfig {
            k_heads: 1,
            head_variant: HeadVariant::Projection,
            ..cfg
        };
        let baseline = MultiHeadModel::from_parts(baseline_cfg, names, params);

        let features = random_features(8, 4, 6);
        let tokens = [1usize, 4, 9];
        let latent = forward_full(&model, &features, &tokens).unwrap();
        let plain = forward_full(&baseline, &features, &tokens).unwrap();
        for pos in 0..tokens.len() {
            let max_diff = latent
                .row(pos, 0)
                .iter()
                .zip(plain.row(pos, 0))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_diff < 1e-12, "pos {pos}: {max_diff}");
        }
    }

    #[test]
    fn encode_speech_length_arithmetic() {
        let cfg = ModelConfig {
            subsample: 6,
            stack: 3,
            d_feat: 4,
            ..test_config(1, HeadVariant::Projection)
        };
        let model = init_model(&cfg).unwrap();
        // Exactly one adapted position.
        let out = encode_speech(&model, &random_features(18, 4, 7)).unwrap();
        assert_eq!(out.shape(), &[1, cfg.d_model]);
        // floor(floor(60 / 6) / 3) = 3.
        let out = encode_speech(&model, &random_features(60, 4, 7)).unwrap();
        assert_eq!(out.shape(), &[3, cfg.d_model]);
        // Too short to fill one position.
        let err = encode_speech(&model, &random_features(17, 4, 7)).unwrap_err();
        assert!(err.to_string().contains("frames"), "{err}");
    }

    #[test]
    fn encoder_is_local_to_subsample_windows() {
        let cfg = ModelConfig {
            subsample: 2,
            stack: 2,
            d_feat: 4,
            ..test_config(1, HeadVariant::Projection)
        };
        let model = init_model(&cfg).unwrap();
        let features = random_features(16, 4, 8);
        let base = encode_speech(&model, &features).unwrap();

        // Swapping two frames inside one subsample window changes output.
        let mut swapped = features.clone();
        for j in 0..4 {
            let tmp = swapped.data()[j];
            swapped.data_mut()[j] = swapped.data()[4 + j];
            swapped.data_mut()[4 + j] = tmp;
        }
        let out = encode_speech(&model, &swapped).unwrap();
        assert_ne!(base.data(), out.data());

        // Swapping frames between distant windows only changes the
        // corresponding adapted positions.
        let mut crossed = features.clone();
        // Frame 0 lives in adapted position 0; frame 12 in adapted position 3.
        for j in 0..4 {
            let tmp = crossed.data()[j];
            crossed.data_mut()[j] = crossed.data()[12 * 4 + j];
            crossed.data_mut()[12 * 4 + j] = tmp;
        }
        let out = encode_speech(&model, &crossed).unwrap();
        let d = cfg.d_model;
        for pos in 0..4 {
            let same = base.data()[pos * d..(pos + 1) * d] == out.data()[pos * d..(pos + 1) * d];
            if pos == 0 || pos == 3 {
                assert!(!same, "adapted position {pos} should have changed");
            } else {
                assert!(same, "adapted position {pos} should be untouched");
            }
        }
    }

    #[test]
    fn context_overflow_is_a_length_error() {
        let cfg = ModelConfig {
            max_positions: 8,
            ..test_config(1, HeadVariant::Projection)
        };
        let model = init_model(&cfg).unwrap();
        let features = random_features(16, 4, 9);
        let tokens = vec![1usize; 8];
        assert!(matches!(
            forward_full(&model, &features, &tokens),
            Err(Error::Length(_))
        ));
    }
}
