//! Model-selection strategies: exhaustive (subset, anchor) enumeration,
//! dataset-level grid search, and a per-sample oracle that picks the best
//! combination for every query independently.

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, SelectionMask};
use crate::error::{Error, Result};
use crate::fusion::{act_fuse_dataset, act_fuse_query};
use crate::metrics::{ap_and_best_mate_rank, evaluate_report, MetricReport, NonMatedTrial};

/// Enumeration refuses above this model count; candidate count grows as
/// n * 2^(n-1).
pub const CANDIDATE_CAP: usize = 8;

/// A model subset with a designated anchor inside it, applied uniformly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CombinationCandidate {
    subset: Vec<usize>,
    anchor: usize,
}

impl CombinationCandidate {
    /// Sorts and deduplicates the subset; the anchor must be a member.
    pub fn new(mut subset: Vec<usize>, anchor: usize) -> Result<Self> {
        subset.sort_unstable();
        subset.dedup();
        if subset.is_empty() {
            return Err(Error::Contract("candidate subset is empty".into()));
        }
        if !subset.contains(&anchor) {
            return Err(Error::Contract(format!(
                "candidate anchor {anchor} not in subset {subset:?}"
            )));
        }
        Ok(CombinationCandidate { subset, anchor })
    }

    pub fn subset(&self) -> &[usize] {
        &self.subset
    }

    pub fn anchor(&self) -> usize {
        self.anchor
    }

    /// Uniform per-query mask for this candidate.
    pub fn mask(&self, n_queries: usize, n_models: usize) -> Result<SelectionMask> {
        SelectionMask::uniform(n_queries, n_models, &self.subset, self.anchor)
    }

    /// Tie-break key: smaller subset first, then lexicographic subset, then
    /// anchor.
    fn order_key(&self) -> (usize, &[usize], usize) {
        (self.subset.len(), &self.subset, self.anchor)
    }
}

impl std::fmt::Display for CombinationCandidate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.subset.iter().map(|m| m.to_string()).collect();
        write!(f, "{{{}}}@{}", parts.join(","), self.anchor)
    }
}

/// All (subset, anchor) pairs over `n_models` models, anchor in subset.
///
/// Count is n * 2^(n-1). Refuses when `n_models` exceeds [`CANDIDATE_CAP`].
pub fn enumerate_candidates(n_models: usize) -> Result<Vec<CombinationCandidate>> {
    if n_models == 0 {
        return Err(Error::Contract("cannot enumerate candidates for zero models".into()));
    }
    if n_models > CANDIDATE_CAP {
        return Err(Error::Contract(format!(
            "candidate enumeration for {n_models} models exceeds the cap of {CANDIDATE_CAP} \
             ({} combinations)",
            n_models as u128 * (1u128 << (n_models - 1))
        )));
    }
    let mut out = Vec::new();
    for bits in 1u32..(1u32 << n_models) {
        let subset: Vec<usize> = (0..n_models).filter(|m| bits & (1 << m) != 0).collect();
        for &anchor in &subset {
            out.push(CombinationCandidate {
                subset: subset.clone(),
                anchor,
            });
        }
    }
    Ok(out)
}

/// Evaluate every candidate with a uniform mask; rows come back in
/// enumeration order.
pub fn grid_search_all(
    d: &Dataset,
    k: usize,
    far_target: f64,
    fpir_target: f64,
    trials: &[NonMatedTrial],
    eps: f64,
) -> Result<Vec<(CombinationCandidate, MetricReport)>> {
    let candidates = enumerate_candidates(d.n_models())?;
    let mut rows = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let mask = cand.mask(d.n_queries(), d.n_models())?;
        let fused = act_fuse_dataset(d, &mask, k, eps)?;
        let report = evaluate_report(
            &fused,
            &d.query_labels,
            &d.gallery_labels,
            far_target,
            fpir_target,
            trials,
        )?;
        rows.push((cand, report));
    }
    Ok(rows)
}

/// Index of the row maximizing overall; exact ties go to the candidate with
/// the smaller order key, so the winner does not depend on row order.
pub fn pick_winner(rows: &[(CombinationCandidate, MetricReport)]) -> usize {
    let mut best = 0;
    for i in 1..rows.len() {
        let (cand, report) = &rows[i];
        let (best_cand, best_report) = &rows[best];
        if report.overall > best_report.overall
            || (report.overall == best_report.overall && cand.order_key() < best_cand.order_key())
        {
            best = i;
        }
    }
    best
}

/// Exhaustive dataset-level search for the best uniform (subset, anchor)
/// under ACT fusion, judged by the overall score.
pub fn grid_search(
    d: &Dataset,
    k: usize,
    far_target: f64,
    fpir_target: f64,
    trials: &[NonMatedTrial],
    eps: f64,
) -> Result<(CombinationCandidate, MetricReport)> {
    let rows = grid_search_all(d, k, far_target, fpir_target, trials, eps)?;
    let i = pick_winner(&rows);
    Ok(rows[i].clone())
}

/// For each query independently, pick the candidate maximizing that row's
/// average precision under ACT fusion.
///
/// Ties prefer a better (smaller) best-mate rank, then a smaller subset,
/// then lexicographic order. Queries without any mate fall through to the
/// final tie rule.
pub fn per_sample_oracle(d: &Dataset, k: usize, eps: f64) -> Result<SelectionMask> {
    let candidates = enumerate_candidates(d.n_models())?;
    let nq = d.n_queries();
    let nm = d.n_models();
    let mut mask = vec![false; nq * nm];
    let mut anchors = vec![0usize; nq];

    for q in 0..nq {
        let is_mate: Vec<bool> = d
            .gallery_labels
            .iter()
            .map(|g| *g == d.query_labels[q])
            .collect();
        let mut best: Option<(f64, usize, &CombinationCandidate)> = None;
        for cand in &candidates {
            let rows: Vec<&[f64]> = cand.subset.iter().map(|&m| d.scores[m].row(q)).collect();
            let anchor_pos = cand.subset.iter().position(|&m| m == cand.anchor).unwrap();
            let fused = act_fuse_query(&rows, anchor_pos, k, eps)?;
            let (ap, best_rank) = ap_and_best_mate_rank(&fused, &is_mate).unwrap_or((0.0, usize::MAX));
            let better = match &best {
                None => true,
                Some((bap, brank, bcand)) => {
                    ap > *bap
                        || (ap == *bap && best_rank < *brank)
                        || (ap == *bap && best_rank == *brank && cand.order_key() < bcand.order_key())
                }
            };
            if better {
                best = Some((ap, best_rank, cand));
            }
        }
        let (_, _, cand) = best.expect("candidate list is nonempty");
        for &m in &cand.subset {
            mask[q * nm + m] = true;
        }
        anchors[q] = cand.anchor;
    }
    SelectionMask::new(nq, nm, mask, anchors)
}
