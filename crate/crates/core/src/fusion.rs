//! Score fusion: anchored confidence top-k (ACT) fusion plus rule-based
//! baselines (min, max, z-score, min-max, weighted sum) and a surrogate-anchor
//! variant that anchors on the mean of the selected models.
//!
//! ACT fuses one query row as (s_anchor + sum of per-model contribution
//! vectors) / (1 + |selection|), where a model's contribution is its z-score
//! weighted by the raw score, restricted to that model's top-k gallery
//! entries. The anchor's own contribution is part of the sum.

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FusedScores, ScoreMatrix, SelectionMask};
use crate::error::{Error, Result};
use crate::util::ranked_desc;

/// Below this population standard deviation a score vector is treated as
/// constant and its z-vector is zero.
pub const DEFAULT_SIGMA_EPSILON: f64 = 1e-12;

/// Fusion rule selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMethod {
    Act,
    Min,
    Max,
    Zscore,
    Minmax,
    WeightedSum,
    SurrogateAnchorAct,
}

impl std::fmt::Display for FusionMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FusionMethod::Act => "act",
            FusionMethod::Min => "min",
            FusionMethod::Max => "max",
            FusionMethod::Zscore => "zscore",
            FusionMethod::Minmax => "minmax",
            FusionMethod::WeightedSum => "weighted_sum",
            FusionMethod::SurrogateAnchorAct => "surrogate_anchor_act",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for FusionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "act" => Ok(FusionMethod::Act),
            "min" => Ok(FusionMethod::Min),
            "max" => Ok(FusionMethod::Max),
            "zscore" => Ok(FusionMethod::Zscore),
            "minmax" => Ok(FusionMethod::Minmax),
            "weighted_sum" => Ok(FusionMethod::WeightedSum),
            "surrogate_anchor_act" => Ok(FusionMethod::SurrogateAnchorAct),
            other => Err(Error::Config(format!("unknown fusion method {other:?}"))),
        }
    }
}

/// Declarative fusion settings, loadable from an experiment config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub method: FusionMethod,
    /// Top-k size for the contribution vectors (act variants only).
    pub k: usize,
    /// Per-model weights for weighted_sum; uniform when absent.
    pub weights: Option<Vec<f64>>,
    pub sigma_epsilon: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            method: FusionMethod::Act,
            k: 10,
            weights: None,
            sigma_epsilon: DEFAULT_SIGMA_EPSILON,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self, n_models: usize) -> Result<()> {
        if !(self.sigma_epsilon > 0.0 && self.sigma_epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "fusion.sigma_epsilon must be a positive real, got {}",
                self.sigma_epsilon
            )));
        }
        if let Some(w) = &self.weights {
            if w.len() != n_models {
                return Err(Error::Config(format!(
                    "fusion.weights has {} entries for {} models",
                    w.len(),
                    n_models
                )));
            }
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Config("fusion.weights must be nonnegative reals".into()));
            }
            if w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Config("fusion.weights must sum to a positive value".into()));
            }
        }
        Ok(())
    }
}

/// Per-(model, query) intermediates of the ACT pipeline.
///
/// `topk` holds min(k, |G|) gallery indices; `contribution` is zero outside
/// of them.
#[derive(Debug, Clone)]
pub struct ActIntermediates {
    pub mu: f64,
    pub sigma: f64,
    pub z: Vec<f64>,
    pub topk: Vec<usize>,
    pub contribution: Vec<f64>,
}

/// Z-normalize with population standard deviation; a vector whose sigma falls
/// below `eps` normalizes to all zeros.
pub fn zscore_normalize(s: &[f64], eps: f64) -> Result<Vec<f64>> {
    let (_, _, z) = mu_sigma_z(s, eps)?;
    Ok(z)
}

fn mu_sigma_z(s: &[f64], eps: f64) -> Result<(f64, f64, Vec<f64>)> {
    if s.is_empty() {
        return Err(Error::Domain("cannot z-normalize an empty vector".into()));
    }
    let n = s.len() as f64;
    let mu = s.iter().sum::<f64>() / n;
    let var = s.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let sigma = var.sqrt();
    let z = if sigma < eps {
        vec![0.0; s.len()]
    } else {
        s.iter().map(|v| (v - mu) / sigma).collect()
    };
    Ok((mu, sigma, z))
}

/// Compute mean, sigma, z-vector, top-k set, and contribution vector for one
/// score vector.
pub fn act_intermediates(s: &[f64], k: usize, eps: f64) -> Result<ActIntermediates> {
    let (mu, sigma, z) = mu_sigma_z(s, eps)?;
    let take = k.min(s.len());
    let mut topk = ranked_desc(s);
    topk.truncate(take);
    let mut contribution = vec![0.0; s.len()];
    for &g in &topk {
        contribution[g] = z[g] * s[g];
    }
    Ok(ActIntermediates {
        mu,
        sigma,
        z,
        topk,
        contribution,
    })
}

/// Contribution vector: z[g] * s[g] on the k highest-scoring gallery indices
/// (ties broken by ascending index), zero elsewhere.
pub fn contribution_vector(s: &[f64], k: usize, eps: f64) -> Result<Vec<f64>> {
    Ok(act_intermediates(s, k, eps)?.contribution)
}

/// Fuse one query row: (s_anchor + sum of contributions) / (1 + |selection|).
///
/// `anchor_index` indexes into `scores` (the selection), not the full model
/// list. The anchor's own contribution is included in the sum.
pub fn act_fuse_query(scores: &[&[f64]], anchor_index: usize, k: usize, eps: f64) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Contract("act_fuse_query requires a nonempty selection".into()));
    }
    if anchor_index >= scores.len() {
        return Err(Error::Contract(format!(
            "anchor index {} outside selection of size {}",
            anchor_index,
            scores.len()
        )));
    }
    let anchor = scores[anchor_index];
    fuse_with_anchor_vector(scores, anchor, k, eps)
}

fn fuse_with_anchor_vector(scores: &[&[f64]], anchor: &[f64], k: usize, eps: f64) -> Result<Vec<f64>> {
    let ng = anchor.len();
    let mut fused: Vec<f64> = anchor.to_vec();
    for s in scores {
        if s.len() != ng {
            return Err(Error::Contract(format!(
                "selected score vectors disagree on gallery size ({} vs {ng})",
                s.len()
            )));
        }
        let c = contribution_vector(s, k, eps)?;
        for g in 0..ng {
            fused[g] += c[g];
        }
    }
    let denom = 1.0 + scores.len() as f64;
    for v in &mut fused {
        *v /= denom;
    }
    Ok(fused)
}

fn selected_rows<'a>(d: &'a Dataset, m: &SelectionMask, q: usize) -> Result<(Vec<usize>, Vec<&'a [f64]>)> {
    let selected = m.selected(q);
    if selected.is_empty() {
        return Err(Error::Contract(format!("query {q}: no model selected")));
    }
    let rows: Vec<&[f64]> = selected.iter().map(|&j| d.scores[j].row(q)).collect();
    Ok((selected, rows))
}

/// ACT fusion over a whole dataset under a per-query selection mask.
pub fn act_fuse_dataset(d: &Dataset, m: &SelectionMask, k: usize, eps: f64) -> Result<FusedScores> {
    m.validate_for(d)?;
    let mut out = ScoreMatrix::zeros(d.n_queries(), d.n_gallery());
    for q in 0..d.n_queries() {
        let (selected, rows) = selected_rows(d, m, q)?;
        let anchor_pos = selected
            .iter()
            .position(|&j| j == m.anchor(q))
            .ok_or_else(|| Error::Contract(format!("query {q}: anchor not in selected set")))?;
        let fused = act_fuse_query(&rows, anchor_pos, k, eps)?;
        out.row_mut(q).copy_from_slice(&fused);
    }
    Ok(FusedScores { matrix: out })
}

/// Like ACT, but the anchor vector is the elementwise mean of the selected
/// models' scores; contributions still come from the real models and the
/// normalizer stays 1 + |selection|.
pub fn surrogate_anchor_fuse(d: &Dataset, m: &SelectionMask, k: usize, eps: f64) -> Result<FusedScores> {
    m.validate_for(d)?;
    let ng = d.n_gallery();
    let mut out = ScoreMatrix::zeros(d.n_queries(), ng);
    for q in 0..d.n_queries() {
        let (_, rows) = selected_rows(d, m, q)?;
        let mut anchor = vec![0.0; ng];
        for s in &rows {
            for g in 0..ng {
                anchor[g] += s[g];
            }
        }
        for v in &mut anchor {
            *v /= rows.len() as f64;
        }
        let fused = fuse_with_anchor_vector(&rows, &anchor, k, eps)?;
        out.row_mut(q).copy_from_slice(&fused);
    }
    Ok(FusedScores { matrix: out })
}

fn minmax_normalize(s: &[f64]) -> Vec<f64> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in s {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi == lo {
        return vec![0.0; s.len()];
    }
    s.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Rule-based baseline fusion. `method` must be one of min, max, zscore,
/// minmax, weighted_sum; the act variants have their own entry points.
pub fn baseline_fuse(
    d: &Dataset,
    m: &SelectionMask,
    method: FusionMethod,
    weights: Option<&[f64]>,
    eps: f64,
) -> Result<FusedScores> {
    m.validate_for(d)?;
    if matches!(method, FusionMethod::Act | FusionMethod::SurrogateAnchorAct) {
        return Err(Error::Contract(format!(
            "baseline_fuse does not handle {method}; call its dedicated entry point"
        )));
    }
    if let Some(w) = weights {
        if w.len() != d.n_models() {
            return Err(Error::Config(format!(
                "weights has {} entries for {} models",
                w.len(),
                d.n_models()
            )));
        }
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("weights must be nonnegative reals".into()));
        }
    }
    let ng = d.n_gallery();
    let mut out = ScoreMatrix::zeros(d.n_queries(), ng);
    for q in 0..d.n_queries() {
        let (selected, rows) = selected_rows(d, m, q)?;
        let fused: Vec<f64> = match method {
            FusionMethod::Min => {
                let mut acc = vec![f64::INFINITY; ng];
                for s in &rows {
                    for g in 0..ng {
                        acc[g] = acc[g].min(s[g]);
                    }
                }
                acc
            }
            FusionMethod::Max => {
                let mut acc = vec![f64::NEG_INFINITY; ng];
                for s in &rows {
                    for g in 0..ng {
                        acc[g] = acc[g].max(s[g]);
                    }
                }
                acc
            }
            FusionMethod::Zscore => {
                let mut acc = vec![0.0; ng];
                for s in &rows {
                    let z = zscore_normalize(s, eps)?;
                    for g in 0..ng {
                        acc[g] += z[g];
                    }
                }
                for v in &mut acc {
                    *v /= rows.len() as f64;
                }
                acc
            }
            FusionMethod::Minmax => {
                let mut acc = vec![0.0; ng];
                for s in &rows {
                    let n = minmax_normalize(s);
                    for g in 0..ng {
                        acc[g] += n[g];
                    }
                }
                for v in &mut acc {
                    *v /= rows.len() as f64;
                }
                acc
            }
            FusionMethod::WeightedSum => {
                let denom: f64 = match weights {
                    Some(w) => selected.iter().map(|&j| w[j]).sum(),
                    None => selected.len() as f64,
                };
                if denom <= 0.0 {
                    return Err(Error::Config(format!(
                        "query {q}: selected model weights sum to zero"
                    )));
                }
                let mut acc = vec![0.0; ng];
                for (pos, &j) in selected.iter().enumerate() {
                    let w = weights.map(|w| w[j]).unwrap_or(1.0);
                    for g in 0..ng {
                        acc[g] += w * rows[pos][g];
                    }
                }
                for v in &mut acc {
                    *v /= denom;
                }
                acc
            }
            FusionMethod::Act | FusionMethod::SurrogateAnchorAct => unreachable!(),
        };
        out.row_mut(q).copy_from_slice(&fused);
    }
    Ok(FusedScores { matrix: out })
}

/// Dispatch any configured method over a dataset and mask.
pub fn fuse_dataset(d: &Dataset, m: &SelectionMask, cfg: &FusionConfig) -> Result<FusedScores> {
    cfg.validate(d.n_models())?;
    match cfg.method {
        FusionMethod::Act => act_fuse_dataset(d, m, cfg.k, cfg.sigma_epsilon),
        FusionMethod::SurrogateAnchorAct => surrogate_anchor_fuse(d, m, cfg.k, cfg.sigma_epsilon),
        method => baseline_fuse(d, m, method, cfg.weights.as_deref(), cfg.sigma_epsilon),
    }
}
