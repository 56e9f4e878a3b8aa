//! Single-hypothesis decoding loops.

use crate::data::vocab;
use crate::decoding::{threshold_accept, verify_accept, DecodeConfig, Hypothesis, Strategy};
use crate::model::{forward_step, prefill, LogProbs, MultiHeadModel};
use crate::numerics::kernels::argmax;
use crate::numerics::Tensor;
use crate::{Error, Result};

/// Indices of the `m` largest entries, best first; ties go to the lower
/// index.
pub(crate) fn top_m_desc(row: &[f64], m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(m);
    idx
}

/// Argmax token and log-probability of every head at one output position.
fn draft_at(out: &LogProbs, pos: usize) -> (Vec<usize>, Vec<f64>) {
    let mut tokens = Vec::with_capacity(out.k);
    let mut logps = Vec::with_capacity(out.k);
    for head in 0..out.k {
        let row = out.row(pos, head);
        let tok = argmax(row);
        tokens.push(tok);
        logps.push(row[tok]);
    }
    (tokens, logps)
}

/// Greedy autoregressive baseline: head 1 only, one decoder call per
/// emitted token (the prefill call emits the first).
pub fn decode_greedy_ar(
    model: &MultiHeadModel,
    features: &Tensor,
    config: &DecodeConfig,
) -> Result<Hypothesis> {
    config.validate()?;
    let (mut cache, mut out) = prefill(model, features)?;
    let mut hyp = Hypothesis::empty();
    hyp.nu = 1;
    loop {
        let row = out.row(out.n_pos - 1, 0);
        let tok = argmax(row);
        hyp.push(tok, 1, row[tok]);
        if tok == vocab::EOS {
            hyp.finished = true;
            break;
        }
        if hyp.len() >= config.max_tokens
            || cache.consumed_len() + 1 > model.config.max_positions
        {
            hyp.truncated = true;
            break;
        }
        out = forward_step(model, &mut cache, &[tok])?;
        hyp.nu += 1;
    }
    Ok(hyp)
}

/// Multi-token decoding with a verify or threshold acceptance rule.
pub fn decode_multitoken(
    model: &MultiHeadModel,
    features: &Tensor,
    config: &DecodeConfig,
) -> Result<Hypothesis> {
    config.validate()?;
    match config.strategy {
        Strategy::Verify { m } => decode_verify(model, features, config, m),
        Strategy::Threshold { tau } => decode_threshold(model, features, config, tau),
        Strategy::GreedyAr => Err(Error::config(
            "decode_multitoken needs a verify or threshold strategy",
        )),
    }
}

fn decode_threshold(
    model: &MultiHeadModel,
    features: &Tensor,
    config: &DecodeConfig,
    tau: f64,
) -> Result<Hypothesis> {
    let (mut cache, mut out) = prefill(model, features)?;
    let mut hyp = Hypothesis::empty();
    hyp.nu = 1;
    loop {
        let last = out.n_pos - 1;
        let (tokens, logps) = draft_at(&out, last);
        let confidences: Vec<f64> = logps.iter().map(|lp| lp.exp()).collect();
        let k_hat = threshold_accept(&confidences, tau).min(tokens.len());
        let mut accepted = Vec::with_capacity(k_hat);
        let mut done = false;
        for r in 0..k_hat {
            hyp.push(tokens[r], r + 1, logps[r]);
            accepted.push(tokens[r]);
            if tokens[r] == vocab::EOS {
                hyp.finished = true;
                done = true;
                break;
            }
            if hyp.len() >= config.max_tokens {
                hyp.truncated = true;
                done = true;
                break;
            }
        }
        if done {
            break;
        }
        if cache.consumed_len() + accepted.len() > model.config.max_positions {
            hyp.truncated = true;
            break;
        }
        out = forward_step(model, &mut cache, &accepted)?;
        hyp.nu += 1;
    }
    Ok(hyp)
}

/// Predict-verify-accept. Each call feeds the previous draft, verifies its
/// speculative tail against the main head's top-M candidates, rolls the
/// cache back to the verified prefix, and drafts the next K tokens there.
/// The fresh main-head token at the boundary needs no verification (it is
/// the autoregressive choice by construction); by default the call that
/// computed it appends it. With `append_corrected` it instead travels as
/// the next call's draft head, which leaves emitted sequences unchanged.
fn decode_verify(
    model: &MultiHeadModel,
    features: &Tensor,
    config: &DecodeConfig,
    m: usize,
) -> Result<Hypothesis> {
    let eager = !config.append_corrected;
    let (mut cache, out0) = prefill(model, features)?;
    let mut hyp = Hypothesis::empty();
    hyp.nu = 1;
    let (mut draft_tokens, mut draft_logps) = draft_at(&out0, 0);

    if eager {
        hyp.push(draft_tokens[0], 1, draft_logps[0]);
        if draft_tokens[0] == vocab::EOS {
            hyp.finished = true;
            return Ok(hyp);
        }
        if hyp.len() >= config.max_tokens {
            hyp.truncated = true;
            return Ok(hyp);
        }
    }

    loop {
        let room = model.config.max_positions - cache.consumed_len();
        if room == 0 {
            hyp.truncated = true;
            break;
        }
        let feed_len = draft_tokens.len().min(room);
        let feed = &draft_tokens[..feed_len];
        let out = forward_step(model, &mut cache, feed)?;
        hyp.nu += 1;

        // Candidate lists: position r of the feed is checked against the
        // main head's distribution after consuming feed[..r].
        let mut lists = Vec::with_capacity(feed_len);
        lists.push(vec![feed[0]]);
        for r in 1..feed_len {
            lists.push(top_m_desc(out.row(r - 1, 0), m));
        }
        let k_hat = verify_accept(feed, &lists, m)?;

        let start = if eager { 1 } else { 0 };
        let mut done = false;
        for r in start..k_hat {
            hyp.push(feed[r], r + 1, draft_logps[r]);
            if feed[r] == vocab::EOS {
                hyp.finished = true;
                done = true;
                break;
            }
            if hyp.len() >= config.max_tokens {
                hyp.truncated = true;
                done = true;
                break;
            }
        }
        // Drop the rejected rows from the cache.
        cache.truncate(cache.consumed_len() - (feed_len - k_hat))?;
        if done {
            break;
        }

        let (tokens, logps) = draft_at(&out, k_hat - 1);
        draft_tokens = tokens;
        draft_logps = logps;

        if eager {
            hyp.push(draft_tokens[0], 1, draft_logps[0]);
            if draft_tokens[0] == vocab::EOS {
                hyp.finished = true;
                break;
            }
            if hyp.len() >= config.max_tokens {
                hyp.truncated = true;
                break;
            }
        } else if draft_tokens[0] == vocab::EOS {
            // The boundary token is deterministic, so an eos draft ends
            // decoding without waiting for its trivial verification.
            hyp.push(draft_tokens[0], 1, draft_logps[0]);
            hyp.finished = true;
            break;
        }
    }
    Ok(hyp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::testutil::{random_features, test_config};
    use crate::model::{init_model, HeadVariant};

    #[test]
    fn greedy_uses_one_call_per_token() {
        let model = init_model(&test_config(4, HeadVariant::Latent)).unwrap();
        let features = random_features(12, 4, 31);
        let config = DecodeConfig {
            strategy: Strategy::GreedyAr,
            max_tokens: 10,
            ..DecodeConfig::default()
        };
        let hyp = decode_greedy_ar(&model, &features, &config).unwrap();
        assert_eq!(hyp.nu, hyp.len());
        assert!(hyp.head_of.iter().all(|&h| h == 1));
        // Two runs are identical.
        let again = decode_greedy_ar(&model, &features, &config).unwrap();
        assert_eq!(hyp, again);
    }

    #[test]
    fn verify_top1_reproduces_greedy_ar() {
        for variant in [HeadVariant::Projection, HeadVariant::Latent] {
            for seed in 0..8u64 {
                let mut cfg = test_config(4, variant);
                cfg.seed = 100 + seed;
                let model = init_model(&cfg).unwrap();
                let features = random_features(12, 4, 40 + seed);
                let config = DecodeConfig {
                    strategy: Strategy::Verify { m: 1 },
                    max_tokens: 12,
                    ..DecodeConfig::default()
                };
                let ar_config = DecodeConfig {
                    strategy: Strategy::GreedyAr,
                    ..config
                };
                let ar = decode_greedy_ar(&model, &features, &ar_config).unwrap();
                let spec = decode_multitoken(&model, &features, &config).unwrap();
                assert_eq!(spec.tokens, ar.tokens, "seed {seed}");
                assert!(spec.nu <= ar.nu, "seed {seed}: {} > {}", spec.nu, ar.nu);

                // The deferred-boundary bookkeeping emits the same tokens.
                let deferred = decode_multitoken(
                    &model,
                    &features,
                    &DecodeConfig {
                        append_corrected: true,
                        ..config
                    },
                )
                .unwrap();
                assert_eq!(deferred.tokens, ar.tokens, "seed {seed}");
                assert!(deferred.nu <= ar.nu, "seed {seed}");
            }
        }
    }

    #[test]
    fn strict_threshold_reproduces_greedy_ar() {
        // tau = 1.0: nothing clears the bar, the floor accepts exactly one
        // main-head token per call.
        let model = init_model(&test_config(3, HeadVariant::Latent)).unwrap();
        let features = random_features(12, 4, 50);
        let config = DecodeConfig {
            strategy: Strategy::Threshold { tau: 1.0 },
            max_tokens: 10,
            ..DecodeConfig::default()
        };
        let ar = decode_greedy_ar(&model, &features, &config).unwrap();
        let thr = decode_multitoken(&model, &features, &config).unwrap();
        assert_eq!(thr.tokens, ar.tokens);
        assert_eq!(thr.nu, ar.nu);
        assert!(thr.head_of.iter().all(|&h| h == 1));
    }

    #[test]
    fn multitoken_never_uses_more_calls_than_tokens() {
        let model = init_model(&test_config(4, HeadVariant::Projection)).unwrap();
        for seed in 0..6u64 {
            let features = random_features(12, 4, 60 + seed);
            for strategy in [
                Strategy::Verify { m: 3 },
                Strategy::Threshold { tau: 0.3 },
            ] {
                let config = DecodeConfig {
                    strategy,
                    max_tokens: 16,
                    ..DecodeConfig::default()
                };
                let hyp = decode_multitoken(&model, &features, &config).unwrap();
                assert!(hyp.nu <= hyp.len());
                let k = model.config.k_heads;
                assert!(hyp.nu >= hyp.len().div_ceil(k));
                let sum: f64 = hyp.token_logp.iter().sum();
                assert!((hyp.score - sum).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn greedy_strategy_is_rejected_by_multitoken() {
        let model = init_model(&test_config(2, HeadVariant::Latent)).unwrap();
        let features = random_features(10, 4, 70);
        let config = DecodeConfig {
            strategy: Strategy::GreedyAr,
            ..DecodeConfig::default()
        };
        assert!(decode_multitoken(&model, &features, &config).is_err());
    }

    #[test]
    fn truncation_stops_at_max_tokens() {
        let model = init_model(&test_config(4, HeadVariant::Latent)).unwrap();
        let features = random_features(12, 4, 71);
        let config = DecodeConfig {
            strategy: Strategy::Threshold { tau: 0.1 },
            max_tokens: 5,
            ..DecodeConfig::default()
        };
        let hyp = decode_multitoken(&model, &features, &config).unwrap();
        if !hyp.finished {
            assert!(hyp.truncated);
            assert_eq!(hyp.len(), 5);
        }
    }
}
