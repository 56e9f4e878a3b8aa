//! Incremental decoding with per-layer key/value caches.
//!
//! The trunk math mirrors the tape forward exactly: the same kernels run
//! row by row, so cached stepping agrees with the full forward pass to
//! rounding, and feeding n tokens in one call equals n separate calls.

use crate::data::vocab;
use crate::model::forward::encode_speech;
use crate::model::{HeadVariant, LogProbs, MultiHeadModel};
use crate::numerics::kernels;
use crate::numerics::Tensor;
use crate::{Error, Result};

/// Per-layer attention state for one in-flight hypothesis. Rows cover the
/// adapted speech prefix and every consumed token; `consumed_len` equals
/// the row count of every layer at all times.
#[derive(Debug, Clone)]
pub struct KVCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    d_model: usize,
    speech_len: usize,
    consumed: usize,
}

impl KVCache {
    fn new(model: &MultiHeadModel, speech_len: usize) -> Self {
        KVCache {
            keys: vec![Vec::new(); model.config.n_layers],
            values: vec![Vec::new(); model.config.n_layers],
            d_model: model.config.d_model,
            speech_len,
            consumed: 0,
        }
    }

    /// Prefix positions (speech rows + tokens) already processed.
    pub fn consumed_len(&self) -> usize {
        self.consumed
    }

    pub fn speech_len(&self) -> usize {
        self.speech_len
    }

    /// Tokens consumed so far, bos included.
    pub fn tokens_consumed(&self) -> usize {
        self.consumed - self.speech_len
    }

    /// Rolls the cache back to a shorter prefix, discarding newer rows.
    pub fn truncate(&mut self, consumed_len: usize) -> Result<()> {
        if consumed_len > self.consumed || consumed_len < self.speech_len + 1 {
            return Err(Error::Cache(format!(
                "cannot truncate cache of {} rows to {consumed_len} (speech prefix is {})",
                self.consumed, self.speech_len
            )));
        }
        for layer in self.keys.iter_mut().chain(self.values.iter_mut()) {
            layer.truncate(consumed_len * self.d_model);
        }
        self.consumed = consumed_len;
        Ok(())
    }

    fn check_consistent(&self) -> Result<()> {
        let want = self.consumed * self.d_model;
        for layer in self.keys.iter().chain(self.values.iter()) {
            if layer.len() != want {
                return Err(Error::Cache(format!(
                    "consumed_len mismatch: cache claims {} rows but a layer holds {}",
                    self.consumed,
                    layer.len() / self.d_model
                )));
            }
        }
        Ok(())
    }
}

/// Runs the trunk over `n_new` fresh rows per cache member, appending to the
/// caches. `x` is the stacked `[G * n_new, D]` embedding block (token or
/// speech embeddings plus positions). All caches must be equally long.
/// Returns the final-layer-norm outputs, stacked the same way.
fn advance(
    model: &MultiHeadModel,
    caches: &mut [&mut KVCache],
    mut x: Vec<f64>,
    n_new: usize,
) -> Result<Vec<f64>> {
    let cfg = &model.config;
    let d = cfg.d_model;
    let group = caches.len();
    debug_assert_eq!(x.len(), group * n_new * d);
    let consumed = caches[0].consumed;
    for cache in caches.iter() {
        cache.check_consistent()?;
        if cache.consumed != consumed {
            return Err(Error::Cache(
                "grouped caches must share one prefix length".into(),
            ));
        }
    }
    if consumed + n_new > cfg.max_positions {
        return Err(Error::Length(format!(
            "prefix of {} positions exceeds max_positions {}",
            consumed + n_new,
            cfg.max_positions
        )));
    }

    let rows = group * n_new;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    for l in 0..cfg.n_layers {
        let h = kernels::layer_norm_rows(
            &x,
            d,
            model.param(&format!("trf.{l}.ln1.g")).data(),
            model.param(&format!("trf.{l}.ln1.b")).data(),
        );
        let mut q = kernels::matmul(&h, rows, d, model.param(&format!("trf.{l}.wq")).data(), d);
        kernels::add_bias_inplace(&mut q, model.param(&format!("trf.{l}.bq")).data());
        let mut k_new = kernels::matmul(&h, rows, d, model.param(&format!("trf.{l}.wk")).data(), d);
        kernels::add_bias_inplace(&mut k_new, model.param(&format!("trf.{l}.bk")).data());
        let mut v_new = kernels::matmul(&h, rows, d, model.param(&format!("trf.{l}.wv")).data(), d);
        kernels::add_bias_inplace(&mut v_new, model.param(&format!("trf.{l}.bv")).data());

        for (g, cache) in caches.iter_mut().enumerate() {
            let block = &k_new[g * n_new * d..(g + 1) * n_new * d];
            cache.keys[l].extend_from_slice(block);
            let block = &v_new[g * n_new * d..(g + 1) * n_new * d];
            cache.values[l].extend_from_slice(block);
        }

        let mut ctx = vec![0.0; rows * d];
        for g in 0..group {
            let keys = &caches[g].keys[l];
            let vals = &caches[g].values[l];
            for j in 0..n_new {
                let pos = consumed + j;
                let row = g * n_new + j;
                for head in 0..cfg.n_attn {
                    let q_h = &q[row * d + head * dh..row * d + (head + 1) * dh];
                    let mut scores = Vec::with_capacity(pos + 1);
                    for c in 0..=pos {
                        let k_h = &keys[c * d + head * dh..c * d + (head + 1) * dh];
                        scores.push(kernels::dot(q_h, k_h) * scale);
                    }
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    for s in scores.iter_mut() {
                        *s /= sum;
                    }
                    let out = &mut ctx[row * d + head * dh..row * d + (head + 1) * dh];
                    for (c, &a) in scores.iter().enumerate() {
                        let v_h = &vals[c * d + head * dh..c * d + (head + 1) * dh];
                        for (o, &vv) in out.iter_mut().zip(v_h) {
                            *o += a * vv;
                        }
                    }
                }
            }
        }

        let mut o = kernels::matmul(&ctx, rows, d, model.param(&format!("trf.{l}.wo")).data(), d);
        kernels::add_bias_inplace(&mut o, model.param(&format!("trf.{l}.bo")).data());
        for (xv, ov) in x.iter_mut().zip(&o) {
            *xv += ov;
        }

        let h = kernels::layer_norm_rows(
            &x,
            d,
            model.param(&format!("trf.{l}.ln2.g")).data(),
            model.param(&format!("trf.{l}.ln2.b")).data(),
        );
        let mut f = kernels::matmul(&h, rows, d, model.param(&format!("trf.{l}.ff1.w")).data(), 4 * d);
        kernels::add_bias_inplace(&mut f, model.param(&format!("trf.{l}.ff1.b")).data());
        for v in f.iter_mut() {
            *v = kernels::gelu(*v);
        }
        let mut f = kernels::matmul(&f, rows, 4 * d, model.param(&format!("trf.{l}.ff2.w")).data(), d);
        kernels::add_bias_inplace(&mut f, model.param(&format!("trf.{l}.ff2.b")).data());
        for (xv, fv) in x.iter_mut().zip(&f) {
            *xv += fv;
        }
    }
    for cache in caches.iter_mut() {
        cache.consumed = consumed + n_new;
    }
    Ok(kernels::layer_norm_rows(
        &x,
        d,
        model.param("ln_f.g").data(),
        model.param("ln_f.b").data(),
    ))
}

/// Per-head log-distributions for `n` trunk output rows.
fn head_log_probs(model: &MultiHeadModel, rows: &[f64], n: usize) -> LogProbs {
    let cfg = &model.config;
    let d = cfg.d_model;
    let v = cfg.vocab;
    let k = cfg.k_heads;
    let mut data = vec![0.0; n * k * v];
    for ki in 0..k {
        let mut logits = match cfg.head_variant {
            HeadVariant::Projection => {
                kernels::matmul(rows, n, d, model.param(&format!("head.{ki}.w")).data(), v)
            }
            HeadVariant::Latent => {
                let lat =
                    kernels::matmul(rows, n, d, model.param(&format!("latent.{ki}.w")).data(), d);
                kernels::matmul(&lat, n, d, model.param("unembed.w").data(), v)
            }
        };
        kernels::log_softmax_rows_inplace(&mut logits, v);
        for pos in 0..n {
            let dst = (pos * k + ki) * v;
            data[dst..dst + v].copy_from_slice(&logits[pos * v..(pos + 1) * v]);
        }
    }
    LogProbs::from_raw(n, k, v, data)
}

fn embed_tokens(model: &MultiHeadModel, tokens: &[usize], first_pos: usize) -> Result<Vec<f64>> {
    let cfg = &model.config;
    let d = cfg.d_model;
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab) {
        return Err(Error::contract(format!(
            "token {bad} out of range for vocabulary {}",
            cfg.vocab
        )));
    }
    if first_pos + tokens.len() > cfg.max_positions {
        return Err(Error::Length(format!(
            "prefix of {} positions exceeds max_positions {}",
            first_pos + tokens.len(),
            cfg.max_positions
        )));
    }
    let emb = model.param("tok_emb").data();
    let pos_emb = model.param("pos_emb").data();
    let mut x = vec![0.0; tokens.len() * d];
    for (j, &tok) in tokens.iter().enumerate() {
        let pos = first_pos + j;
        let dst = &mut x[j * d..(j + 1) * d];
        dst.copy_from_slice(&emb[tok * d..(tok + 1) * d]);
        for (o, &p) in dst.iter_mut().zip(&pos_emb[pos * d..(pos + 1) * d]) {
            *o += p;
        }
    }
    Ok(x)
}

/// One decoder call over the adapted speech prefix plus bos. Returns the
/// fresh cache and the K head distributions at the bos position.
pub fn prefill(model: &MultiHeadModel, features: &Tensor) -> Result<(KVCache, LogProbs)> {
    let cfg = &model.config;
    let speech = encode_speech(model, features)?;
    let speech_len = speech.shape()[0];
    if speech_len + 1 > cfg.max_positions {
        return Err(Error::Length(format!(
            "speech prefix of {speech_len} rows leaves no room for tokens (max_positions {})",
            cfg.max_positions
        )));
    }
    let d = cfg.d_model;
    let pos_emb = model.param("pos_emb").data();
    let mut x = vec![0.0; (speech_len + 1) * d];
    for (i, row) in speech.data().chunks(d).enumerate() {
        let dst = &mut x[i * d..(i + 1) * d];
        dst.copy_from_slice(row);
        for (o, &p) in dst.iter_mut().zip(&pos_emb[i * d..(i + 1) * d]) {
            *o += p;
        }
    }
    let bos = embed_tokens(model, &[vocab::BOS], speech_len)?;
    x[speech_len * d..].copy_from_slice(&bos);

    let mut cache = KVCache::new(model, speech_len);
    let out = advance(model, &mut [&mut cache], x, speech_len + 1)?;
    let last = &out[speech_len * d..];
    Ok((cache, head_log_probs(model, last, 1)))
}

/// One decoder call feeding `new_tokens`, returning the K head
/// distributions at every fed position (the last one is the usual
/// "next draft" position).
pub fn forward_step(
    model: &MultiHeadModel,
    cache: &mut KVCache,
    new_tokens: &[usize],
) -> Result<LogProbs> {
    if cache.consumed == 0 {
        return Err(Error::Cache("forward_step before prefill".into()));
    }
    if new_tokens.is_empty() {
        return Err(Error::contract("forward_step needs at least one new token"));
    }
    let x = embed_tokens(model, new_tokens, cache.consumed)?;
    let out = advance(model, &mut [&mut *cache], x, new_tokens.len())?;
    Ok(head_log_probs(model, &out, new_tokens.len()))
}

/// Grouped variant of [`forward_step`]: every cache advances by its own
/// token block. All members must share one prefix length and one block
/// length, which is what grouping hypotheses by prefix length guarantees.
pub fn forward_step_group(
    model: &MultiHeadModel,
    caches: &mut [&mut KVCache],
    new_tokens: &[&[usize]],
) -> Result<Vec<LogProbs>> {
    if caches.is_empty() || caches.len() != new_tokens.len() {
        return Err(Error::contract(
            "forward_step_group needs one token block per cache",
        ));
    }
    let n = new_tokens[0].len();
    if n == 0 {
        return Err(Error::contract("forward_step_group needs non-empty token blocks"));
    }
    if new_tokens.iter().any(|t| t.len() != n) {
        return Err(Error::contract(
            "forward_step_group token blocks must share one length",
        ));
    }
    if caches.iter().any(|c| c.consumed == 0) {
        return Err(Error::Cache("forward_step_group before prefill".into()));
    }
    let d = model.config.d_model;
    let consumed = caches[0].consumed;
    let mut x = Vec::with_capacity(caches.len() * n * d);
    for tokens in new_tokens {
        x.extend(embed_tokens(model, tokens, consumed)?);
    }
    let out = advance(model, caches, x, n)?;
    Ok((0..new_tokens.len())
        .map(|g| head_log_probs(model, &out[g * n * d..(g + 1) * n * d], n))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward::forward_full;
    use crate::model::testutil::{random_features, test_config};
    use crate::model::{init_model, ModelConfig};

    #[test]
    fn stepping_matches_the_full_forward() {
        for variant in [HeadVariant::Projection, HeadVariant::Latent] {
            let model = init_model(&test_config(3, variant)).unwrap();
            let features = random_features(12, 4, 21);
            let tokens = [vocab::BOS, 5, 7, 9, 4, 6];
            let full = forward_full(&model, &features, &tokens).unwrap();

            let (mut cache, first) = prefill(&model, &features).unwrap();
            let mut max_diff = 0.0f64;
            for head in 0..3 {
                for (a, b) in first.row(0, head).iter().zip(full.row(0, head)) {
                    max_diff = max_diff.max((a - b).abs());
                }
            }
            for (i, &tok) in tokens.iter().enumerate().skip(1) {
                let step = forward_step(&model, &mut cache, &[tok]).unwrap();
                for head in 0..3 {
                    for (a, b) in step.row(0, head).iter().zip(full.row(i, head)) {
                        max_diff = max_diff.max((a - b).abs());
                    }
                }
            }
            assert!(max_diff < 1e-9, "cache/full divergence {max_diff}");
        }
    }

    #[test]
    fn feeding_three_tokens_at_once_equals_three_calls() {
        let model = init_model(&test_config(2, HeadVariant::Latent)).unwrap();
        let features = random_features(10, 4, 22);
        let (cache0, _) = prefill(&model, &features).unwrap();

        let mut bulk = cache0.clone();
        let out_bulk = forward_step(&model, &mut bulk, &[5, 7, 9]).unwrap();

        let mut serial = cache0.clone();
        let o1 = forward_step(&model, &mut serial, &[5]).unwrap();
        let o2 = forward_step(&model, &mut serial, &[7]).unwrap();
        let o3 = forward_step(&model, &mut serial, &[9]).unwrap();

        for head in 0..2 {
            assert_eq!(out_bulk.row(0, head), o1.row(0, head));
            assert_eq!(out_bulk.row(1, head), o2.row(0, head));
            assert_eq!(out_bulk.row(2, head), o3.row(0, head));
        }
        assert_eq!(bulk.consumed_len(), serial.consumed_len());
        for l in 0..model.config.n_layers {
            assert_eq!(bulk.keys[l], serial.keys[l]);
            assert_eq!(bulk.values[l], serial.values[l]);
        }
    }

    #[test]
    fn empty_step_after_prefill_is_an_error() {
        let model = init_model(&test_config(2, HeadVariant::Projection)).unwrap();
        let features = random_features(10, 4, 23);
        let (mut cache, _) = prefill(&model, &features).unwrap();
        assert!(matches!(
            forward_step(&model, &mut cache, &[]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn overflowing_the_context_is_a_length_error() {
        let cfg = ModelConfig {
            max_positions: 8,
            ..test_config(1, HeadVariant::Projection)
        };
        let model = init_model(&cfg).unwrap();
        let features = random_features(8, 4, 24);
        let (mut cache, _) = prefill(&model, &features).unwrap();
        let room = cfg.max_positions - cache.consumed_len();
        let err = forward_step(&model, &mut cache, &vec![5usize; room + 1]).unwrap_err();
        assert!(matches!(err, Error::Length(_)));
    }

    #[test]
    fn truncate_then_refeed_matches_a_fresh_path() {
        let model = init_model(&test_config(2, HeadVariant::Latent)).unwrap();
        let features = random_features(10, 4, 25);
        let (cache0, _) = prefill(&model, &features).unwrap();

        let mut rolled = cache0.clone();
        forward_step(&model, &mut rolled, &[5, 7, 9]).unwrap();
        rolled.truncate(cache0.consumed_len() + 1).unwrap();
        let out_rolled = forward_step(&model, &mut rolled, &[8]).unwrap();

        let mut fresh = cache0.clone();
        forward_step(&model, &mut fresh, &[5]).unwrap();
        let out_fresh = forward_step(&model, &mut fresh, &[8]).unwrap();

        for head in 0..2 {
            assert_eq!(out_rolled.row(0, head), out_fresh.row(0, head));
        }
        for l in 0..model.config.n_layers {
            assert_eq!(rolled.keys[l], fresh.keys[l]);
        }
    }

    #[test]
    fn grouped_step_equals_individual_steps() {
        let model = init_model(&test_config(2, HeadVariant::Latent)).unwrap();
        let features = random_features(10, 4, 26);
        let (cache0, _) = prefill(&model, &features).unwrap();

        let mut a = cache0.clone();
        let mut b = cache0.clone();
        let grouped = forward_step_group(
            &model,
            &mut [&mut a, &mut b],
            &[&[5usize, 7], &[9usize, 4]],
        )
        .unwrap();

        let mut a2 = cache0.clone();
        let solo_a = forward_step(&model, &mut a2, &[5, 7]).unwrap();
        let mut b2 = cache0.clone();
        let solo_b = forward_step(&model, &mut b2, &[9, 4]).unwrap();

        for head in 0..2 {
            for pos in 0..2 {
                assert_eq!(grouped[0].row(pos, head), solo_a.row(pos, head));
                assert_eq!(grouped[1].row(pos, head), solo_b.row(pos, head));
            }
        }
        for l in 0..model.config.n_layers {
            assert_eq!(a.keys[l], a2.keys[l]);
            assert_eq!(b.keys[l], b2.keys[l]);
        }
    }
}
