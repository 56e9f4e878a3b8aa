//! N-best beam search over the greedy_ar and threshold strategies.
//!
//! Hypotheses are expanded at their first open position with the top-B
//! main-head tokens; under the threshold strategy each expansion then
//! greedily appends auxiliary-head argmax tokens that clear tau, scored
//! with their own head's log-probability. Active hypotheses always share
//! one decoder-call count, so pruning compares raw cumulative scores.
//! Forward calls are batched over hypotheses grouped by prefix length,
//! which keys their cache shapes; [`sequential_reference`] runs the same
//! search one hypothesis at a time and must match exactly.

use std::collections::BTreeMap;

use crate::data::vocab;
use crate::decoding::greedy::top_m_desc;
use crate::decoding::{threshold_accept, DecodeConfig, Hypothesis, Strategy};
use crate::model::{forward_step, forward_step_group, prefill, KVCache, LogProbs, MultiHeadModel};
use crate::numerics::kernels::argmax;
use crate::numerics::Tensor;
use crate::{Error, Result};

struct BeamItem {
    hyp: Hypothesis,
    cache: KVCache,
    /// Tokens accepted by the last expansion, not yet consumed by a call.
    pending: Vec<usize>,
}

/// One proposed extension: the chosen main-head token plus any
/// threshold-accepted auxiliary tail, each with provenance.
struct Candidate {
    parent: usize,
    tokens: Vec<usize>,
    heads: Vec<usize>,
    logps: Vec<f64>,
    score_gain: f64,
}

fn expand_candidates(
    out: &LogProbs,
    pos: usize,
    strategy: &Strategy,
    beam_size: usize,
    parent: usize,
) -> Vec<Candidate> {
    let head1 = out.row(pos, 0);
    let choices = top_m_desc(head1, beam_size.min(head1.len()));
    let mut tail_tokens = Vec::new();
    let mut tail_logps = Vec::new();
    if out.k > 1 {
        for head in 1..out.k {
            let row = out.row(pos, head);
            let tok = argmax(row);
            tail_tokens.push(tok);
            tail_logps.push(row[tok]);
        }
    }
    choices
        .into_iter()
        .map(|tok| {
            let mut tokens = vec![tok];
            let mut heads = vec![1usize];
            let mut logps = vec![head1[tok]];
            if let Strategy::Threshold { tau } = strategy {
                if tok != vocab::EOS {
                    // Acceptance uses the chosen token's own confidence as
                    // head 1's entry, so beam size 1 degenerates exactly to
                    // the greedy multi-token rule.
                    let mut confidences = vec![head1[tok].exp()];
                    confidences.extend(tail_logps.iter().map(|lp| lp.exp()));
                    let k_hat = threshold_accept(&confidences, *tau).min(confidences.len());
                    for r in 1..k_hat {
                        tokens.push(tail_tokens[r - 1]);
                        heads.push(r + 1);
                        logps.push(tail_logps[r - 1]);
                        if tail_tokens[r - 1] == vocab::EOS {
                            break;
                        }
                    }
                }
            }
            let score_gain = logps.iter().sum();
            Candidate {
                parent,
                tokens,
                heads,
                logps,
                score_gain,
            }
        })
        .collect()
}

/// Applies a candidate to its parent hypothesis. Returns the extended
/// hypothesis plus the tokens that still need to enter the cache, or marks
/// it finished/truncated.
fn apply_candidate(parent: &Hypothesis, cand: &Candidate, max_tokens: usize) -> (Hypothesis, Vec<usize>) {
    let mut hyp = parent.clone();
    let mut pending = Vec::with_capacity(cand.tokens.len());
    for ((&tok, &head), &logp) in cand.tokens.iter().zip(&cand.heads).zip(&cand.logps) {
        hyp.push(tok, head, logp);
        pending.push(tok);
        if tok == vocab::EOS {
            hyp.finished = true;
            break;
        }
        if hyp.len() >= max_tokens {
            hyp.truncated = true;
            break;
        }
    }
    (hyp, pending)
}

fn sort_candidates(candidates: &mut [Candidate], items: &[BeamItem]) {
    candidates.sort_by(|a, b| {
        let sa = items[a.parent].hyp.score + a.score_gain;
        let sb = items[b.parent].hyp.score + b.score_gain;
        sb.partial_cmp(&sa)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.parent.cmp(&b.parent))
            .then(a.tokens.cmp(&b.tokens))
    });
}

fn finalize(mut bank: Vec<Hypothesis>, active: Vec<BeamItem>, beam_size: usize) -> Vec<Hypothesis> {
    for mut item in active {
        item.hyp.truncated = true;
        bank.push(item.hyp);
    }
    bank.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
    bank.truncate(beam_size);
    bank
}

fn check_strategy(config: &DecodeConfig) -> Result<()> {
    config.validate()?;
    if matches!(config.strategy, Strategy::Verify { .. }) {
        return Err(Error::config(
            "beam search supports the greedy_ar and threshold strategies; \
             verify-mode drafts are only defined for beam size 1",
        ));
    }
    Ok(())
}

/// Batched N-best beam search. Returns up to `beam_size` hypotheses sorted
/// by descending cumulative log-probability.
pub fn beam_search(
    model: &MultiHeadModel,
    features: &Tensor,
    config: &DecodeConfig,
) -> Result<Vec<Hypothesis>> {
    check_strategy(config)?;
    let beam_size = config.beam_size;
    let (cache0, out0) = prefill(model, features)?;

    let mut bank: Vec<Hypothesis> = Vec::new();
    let mut active: Vec<BeamItem> = Vec::new();
    let root = BeamItem {
        hyp: {
            let mut h = Hypothesis::empty();
            h.nu = 1;
            h
        },
        cache: cache0,
        pending: Vec::new(),
    };
    let roots = vec![root];
    let mut candidates = expand_candidates(&out0, 0, &config.strategy, beam_size, 0);
    sort_candidates(&mut candidates, &roots);
    for cand in candidates.into_iter() {
        let (hyp, pending) = apply_candidate(&roots[0].hyp, &cand, config.max_tokens);
        if hyp.finished || hyp.truncated {
            bank.push(hyp);
        } else if active.len() < beam_size {
            active.push(BeamItem {
                hyp,
                cache: roots[0].cache.clone(),
                pending,
            });
        }
    }

    while !active.is_empty() && bank.len() < beam_size {
        // One decoder call per active hypothesis, batched by prefix length
        // (cache rows + pending tokens fix the shapes that must agree).
        let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (i, item) in active.iter().enumerate() {
            groups
                .entry((item.cache.consumed_len(), item.pending.len()))
                .or_default()
                .push(i);
        }
        let mut outs: Vec<Option<LogProbs>> = (0..active.len()).map(|_| None).collect();
        for members in groups.values() {
            let pendings: Vec<Vec<usize>> =
                members.iter().map(|&idx| active[idx].pending.clone()).collect();
            let blocks: Vec<&[usize]> = pendings.iter().map(|p| p.as_slice()).collect();
            // Pull disjoint mutable cache references in member order.
            let mut caches: Vec<&mut KVCache> = Vec::with_capacity(members.len());
            let mut rest = &mut active[..];
            let mut taken = 0usize;
            for &idx in members {
                let (_, tail) = rest.split_at_mut(idx - taken);
                let (item, tail) = tail.split_first_mut().unwrap();
                caches.push(&mut item.cache);
                taken = idx + 1;
                rest = tail;
            }
            let group_outs = forward_step_group(model, &mut caches, &blocks)?;
            for (&idx, out) in members.iter().zip(group_outs) {
                outs[idx] = Some(out);
            }
        }
        let mut candidates: Vec<Candidate> = Vec::new();
        for (i, item) in active.iter_mut().enumerate() {
            item.hyp.nu += 1;
            let out = outs[i].as_ref().expect("every active member ran");
            let pos = item.pending.len() - 1;
            candidates.extend(expand_candidates(out, pos, &config.strategy, beam_size, i));
            item.pending.clear();
        }
        sort_candidates(&mut candidates, &active);

        let mut next_active: Vec<BeamItem> = Vec::new();
        for cand in &candidates {
            let parent = &active[cand.parent];
            let (hyp, pending) = apply_candidate(&parent.hyp, cand, config.max_tokens);
            if hyp.finished || hyp.truncated {
                bank.push(hyp);
            } else if next_active.len() < beam_size {
                next_active.push(BeamItem {
                    hyp,
                    cache: parent.cache.clone(),
                    pending,
                });
            }
        }
        active = next_active;
    }
    Ok(finalize(bank, active, beam_size))
}

/// One-hypothesis-at-a-time reference implementation of the same search,
/// kept independent of the grouped execution path so equivalence tests
/// exercise the batching machinery.
pub fn sequential_reference(
    model: &MultiHeadModel,
    features: &Tensor,
    config: &DecodeConfig,
) -> Result<Vec<Hypothesis>> {
    check_strategy(config)?;
    let beam_size = config.beam_size;
    let (cache0, out0) = prefill(model, features)?;

    let mut bank: Vec<Hypothesis> = Vec::new();
    let mut active: Vec<BeamItem> = Vec::new();
    let root_hyp = {
        let mut h = Hypothesis::empty();
        h.nu = 1;
        h
    };
    let roots = vec![BeamItem {
        hyp: root_hyp,
        cache: cache0,
        pending: Vec::new(),
    }];
    let mut candidates = expand_candidates(&out0, 0, &config.strategy, beam_size, 0);
    sort_candidates(&mut candidates, &roots);
    for cand in candidates.into_iter() {
        let (hyp, pending) = apply_candidate(&roots[0].hyp, &cand, config.max_tokens);
        if hyp.finished || hyp.truncated {
            bank.push(hyp);
        } else if active.len() < beam_size {
            active.push(BeamItem {
                hyp,
                cache: roots[0].cache.clone(),
                pending,
            });
        }
    }

    while !active.is_empty() && bank.len() < beam_size {
        let mut candidates: Vec<Candidate> = Vec::new();
        for (i, item) in active.iter_mut().enumerate() {
            let pending = std::mem::take(&mut item.pending);
            let out = forward_step(model, &mut item.cache, &pending)?;
            item.hyp.nu += 1;
            candidates.extend(expand_candidates(
                &out,
                pending.len() - 1,
                &config.strategy,
                beam_size,
                i,
            ));
        }
        sort_candidates(&mut candidates, &active);
        let mut next_active: Vec<BeamItem> = Vec::new();
        for cand in &candidates {
            let parent = &active[cand.parent];
            let (hyp, pending) = apply_candidate(&parent.hyp, cand, config.max_tokens);
            if hyp.finished || hyp.truncated {
                bank.push(hyp);
            } else if next_active.len() < beam_size {
                next_active.push(BeamItem {
                    hyp,
                    cache: parent.cache.clone(),
                    pending,
                });
            }
        }
        active = next_active;
    }
    Ok(finalize(bank, active, beam_size))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::testutil::{random_features, test_config};
    use crate::model::{init_model, HeadVariant};

    fn thr_config(beam: usize, tau: f64) -> DecodeConfig {
        DecodeConfig {
            strategy: Strategy::Threshold { tau },
            beam_size: beam,
            max_tokens: 12,
            append_corrected: false,
        }
    }

    #[test]
    fn single_beam_threshold_equals_greedy_multitoken() {
        for seed in 0..6u64 {
            let mut cfg = test_config(3, HeadVariant::Latent);
            cfg.seed = 200 + seed;
            let model = init_model(&cfg).unwrap();
            let features = random_features(12, 4, 80 + seed);
            let config = thr_config(1, 0.5);
            let nbest = beam_search(&model, &features, &config).unwrap();
            let greedy = crate::decoding::decode_multitoken(&model, &features, &config).unwrap();
            assert_eq!(nbest.len(), 1);
            assert_eq!(nbest[0].tokens, greedy.tokens, "seed {seed}");
            assert_eq!(nbest[0].head_of, greedy.head_of, "seed {seed}");
            assert_eq!(nbest[0].nu, greedy.nu, "seed {seed}");
        }
    }

    #[test]
    fn single_beam_greedy_ar_equals_plain_decoder() {
        let model = init_model(&test_config(2, HeadVariant::Projection)).unwrap();
        let features = random_features(12, 4, 90);
        let config = DecodeConfig {
            strategy: Strategy::GreedyAr,
            beam_size: 1,
            max_tokens: 10,
            append_corrected: false,
        };
        let nbest = beam_search(&model, &features, &config).unwrap();
        let greedy = crate::decoding::decode_greedy_ar(&model, &features, &config).unwrap();
        assert_eq!(nbest[0].tokens, greedy.tokens);
        assert_eq!(nbest[0].nu, greedy.nu);
    }

    #[test]
    fn batched_equals_sequential_reference() {
        for seed in 0..6u64 {
            let mut cfg = test_config(3, HeadVariant::Latent);
            cfg.seed = 300 + seed;
            let model = init_model(&cfg).unwrap();
            let features = random_features(12, 4, 100 + seed);
            for config in [thr_config(4, 0.4), thr_config(3, 0.8)] {
                let batched = beam_search(&model, &features, &config).unwrap();
                let sequential = sequential_reference(&model, &features, &config).unwrap();
                assert_eq!(batched.len(), sequential.len(), "seed {seed}");
                for (a, b) in batched.iter().zip(&sequential) {
                    assert_eq!(a.tokens, b.tokens, "seed {seed}");
                    assert_eq!(a.head_of, b.head_of, "seed {seed}");
                    assert_eq!(a.nu, b.nu, "seed {seed}");
                    assert!((a.score - b.score).abs() < 1e-12, "seed {seed}");
                }
            }
        }
    }

    #[test]
    fn scores_are_non_increasing() {
        let model = init_model(&test_config(3, HeadVariant::Projection)).unwrap();
        let features = random_features(12, 4, 110);
        let nbest = beam_search(&model, &features, &thr_config(4, 0.5)).unwrap();
        for pair in nbest.windows(2) {
            assert!(pair[0].score >= pair[1].score);
        }
    }

    #[test]
    fn verify_strategy_is_rejected() {
        let model = init_model(&test_config(2, HeadVariant::Latent)).unwrap();
        let features = random_features(10, 4, 120);
        let config = DecodeConfig {
            strategy: Strategy::Verify { m: 2 },
            beam_size: 4,
            max_tokens: 10,
            append_corrected: false,
        };
        assert!(beam_search(&model, &features, &config).is_err());
    }
}
