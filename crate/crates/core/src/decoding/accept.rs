//! Acceptance rules shared by the multi-token decode loops.

use crate::{Error, Result};

/// Largest draft prefix verified by the main head.
///
/// `main_top_m[r]` lists head 1's candidates, best first, at the prefix
/// ending just before drafted position `r`. A drafted token is verified
/// when it appears among the first `m` candidates of its list; the first
/// failure stops the scan, so later matches are never reconsidered. The
/// first draft token is head 1's own argmax at the drafting prefix, so
/// `main_top_m[0]` must rank it first and the result is always >= 1.
pub fn verify_accept(draft: &[usize], main_top_m: &[Vec<usize>], m: usize) -> Result<usize> {
    if draft.is_empty() || draft.len() != main_top_m.len() {
        return Err(Error::contract(format!(
            "verify_accept needs one candidate list per drafted token ({} vs {})",
            draft.len(),
            main_top_m.len()
        )));
    }
    if m < 1 {
        return Err(Error::contract("verify_accept needs M >= 1"));
    }
    if main_top_m[0].first() != Some(&draft[0]) {
        return Err(Error::contract(
            "verify_accept: draft[0] is not the main head's top candidate at its prefix",
        ));
    }
    let mut accepted = 1;
    for r in 1..draft.len() {
        let list = &main_top_m[r];
        let horizon = m.min(list.len());
        if list[..horizon].contains(&draft[r]) {
            accepted += 1;
        } else {
            break;
        }
    }
    Ok(accepted)
}

/// Longest head prefix whose argmax confidences all reach `tau`, floored
/// at one token so decoding always makes progress.
pub fn threshold_accept(confidences: &[f64], tau: f64) -> usize {
    let mut accepted = 0;
    for &c in confidences {
        if c >= tau {
            accepted += 1;
        } else {
            break;
        }
    }
    accepted.max(super::MIN_ACCEPT)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verify_matches_main_argmaxes() {
        // Main argmaxes [5, 7, 9] against draft [5, 7, 2] at M = 1.
        let lists = vec![vec![5], vec![7], vec![9]];
        assert_eq!(verify_accept(&[5, 7, 2], &lists, 1).unwrap(), 2);
    }

    #[test]
    fn verify_stops_at_first_failure() {
        // Position 3 matches again but is never reconsidered.
        let lists = vec![vec![5], vec![9], vec![2]];
        assert_eq!(verify_accept(&[5, 7, 2], &lists, 1).unwrap(), 1);
    }

    #[test]
    fn verify_top_m_membership() {
        let lists = vec![vec![5, 1], vec![3, 7]];
        assert_eq!(verify_accept(&[5, 7], &lists, 2).unwrap(), 2);
    }

    #[test]
    fn verify_rejects_inconsistent_first_token() {
        let lists = vec![vec![9], vec![7]];
        assert!(verify_accept(&[5, 7], &lists, 1).is_err());
    }

    #[test]
    fn threshold_prefix_rule() {
        assert_eq!(threshold_accept(&[0.92, 0.85, 0.63, 0.95], 0.8), 2);
        assert_eq!(threshold_accept(&[0.92, 0.85, 0.63, 0.95], 0.5), 4);
    }

    #[test]
    fn threshold_floors_at_one() {
        assert_eq!(threshold_accept(&[0.40, 0.99], 0.8), 1);
    }

    #[test]
    fn raising_tau_never_accepts_more() {
        let confs = [0.9, 0.7, 0.8, 0.95, 0.2];
        let mut taus: Vec<f64> = (1..=20).map(|i| i as f64 / 20.0).collect();
        taus.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut last = usize::MAX;
        for tau in taus {
            let k = threshold_accept(&confs, tau);
            assert!(k <= last, "tau {tau} accepted {k} > {last}");
            last = k;
        }
    }

    #[test]
    fn raising_m_never_accepts_fewer() {
        let draft = [5, 7, 2, 4];
        let lists = vec![vec![5, 8, 1], vec![3, 7, 9], vec![6, 1, 2], vec![4, 5, 8]];
        let mut last = 0;
        for m in 1..=3 {
            let k = verify_accept(&draft, &lists, m).unwrap();
            assert!(k >= last, "M {m} accepted {k} < {last}");
            last = k;
        }
    }
}
