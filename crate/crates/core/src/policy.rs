//! Parametric selection policy and its group-relative training step.
//!
//! The policy replaces a tool-calling agent with two linear softmax heads
//! conditioned on query features: an anchor head choosing the first model,
//! and a continuation head choosing, at each later turn, between stopping
//! (fixed logit 0) and one of the models not yet consulted. A trajectory is
//! the ordered sequence of those choices plus a final answer turn, so its
//! probability factorizes over the visited decision points. Training ascends
//! the clipped surrogate min(r·A, clip(r, 1±eps)·A) - beta·KL(pi||pi_ref)
//! with group-normalized advantages, where the KL is taken in closed form
//! between the categorical action distributions at the visited points.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, SelectionMask};
use crate::error::{Error, Result};
use crate::fusion::act_fuse_query;
use crate::metrics::MetricReport;
use crate::reward::{
    total_reward, RewardConfig, ToolCall, TrajectoryMode, TrajectoryTranscript, Turn, TurnAction,
};
use crate::util::{argmax_tie_low, derive_seed, mean_and_pop_std};

/// Head weights: one row per model, layout [feature weights..., bias].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub anchor: Vec<Vec<f64>>,
    pub continuation: Vec<Vec<f64>>,
}

impl PolicyParams {
    fn zeros(n_models: usize, feature_dim: usize) -> Self {
        PolicyParams {
            anchor: vec![vec![0.0; feature_dim + 1]; n_models],
            continuation: vec![vec![0.0; feature_dim + 1]; n_models],
        }
    }

    fn seeded(n_models: usize, feature_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = PolicyParams::zeros(n_models, feature_dim);
        for head in [&mut params.anchor, &mut params.continuation] {
            for row in head.iter_mut() {
                for w in row.iter_mut() {
                    let draw: f64 = rng.sample(StandardNormal);
                    *w = 0.1 * draw;
                }
            }
        }
        params
    }

    fn check_shape(&self, n_models: usize, feature_dim: usize) -> Result<()> {
        for (name, head) in [("anchor", &self.anchor), ("continuation", &self.continuation)] {
            if head.len() != n_models {
                return Err(Error::Contract(format!(
                    "{name} head has {} rows, expected {n_models}",
                    head.len()
                )));
            }
            for (m, row) in head.iter().enumerate() {
                if row.len() != feature_dim + 1 {
                    return Err(Error::Contract(format!(
                        "{name} row {m} has {} weights, expected {}",
                        row.len(),
                        feature_dim + 1
                    )));
                }
                if let Some(w) = row.iter().find(|w| !w.is_finite()) {
                    return Err(Error::Contract(format!("{name} row {m} contains non-finite weight {w}")));
                }
            }
        }
        Ok(())
    }

    fn axpy(&mut self, scale: f64, other: &PolicyParams) {
        for (dst, src) in self.anchor.iter_mut().zip(&other.anchor) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
        for (dst, src) in self.continuation.iter_mut().zip(&other.continuation) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    fn norm(&self) -> f64 {
        let mut sum = 0.0;
        for head in [&self.anchor, &self.continuation] {
            for row in head {
                for w in row {
                    sum += w * w;
                }
            }
        }
        sum.sqrt()
    }

    fn is_finite(&self) -> bool {
        [&self.anchor, &self.continuation]
            .iter()
            .all(|head| head.iter().all(|row| row.iter().all(|w| w.is_finite())))
    }
}

/// Selection policy over a fixed model roster.
///
/// `reference` is the frozen snapshot the KL penalty pulls toward; it is set
/// at construction and never touched by training steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Policy {
    pub model_names: Vec<String>,
    pub feature_dim: usize,
    pub params: PolicyParams,
    pub reference: PolicyParams,
}

impl Policy {
    /// Fresh policy with small seeded weights; reference equals the initial
    /// parameters, so the first update's KL gradient vanishes.
    pub fn new(model_names: Vec<String>, feature_dim: usize, seed: u64) -> Result<Self> {
        if model_names.is_empty() {
            return Err(Error::Config("policy needs at least one model".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for name in &model_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Config(format!("duplicate model name {name:?}")));
            }
        }
        let params = PolicyParams::seeded(model_names.len(), feature_dim, seed);
        Ok(Policy {
            feature_dim,
            reference: params.clone(),
            params,
            model_names,
        })
    }

    pub fn n_models(&self) -> usize {
        self.model_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_names.is_empty() {
            return Err(Error::Contract("policy has no models".into()));
        }
        self.params.check_shape(self.n_models(), self.feature_dim)?;
        self.reference.check_shape(self.n_models(), self.feature_dim)
    }

    fn model_index(&self, name: &str) -> Result<usize> {
        self.model_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Contract(format!("trajectory names unknown model {name:?}")))
    }
}

/// Group-relative training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    /// Trajectories sampled per query (N).
    pub group_size: usize,
    pub kl_beta: f64,
    pub clip_epsilon: f64,
    pub learning_rate: f64,
    pub steps: usize,
    /// Max turns per trajectory, tool calls plus the answer turn.
    pub turn_limit: usize,
    /// Queries per training step.
    pub batch_size: usize,
    pub mode: TrajectoryMode,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 6,
            kl_beta: 0.04,
            clip_epsilon: 0.2,
            learning_rate: 0.3,
            steps: 200,
            turn_limit: 4,
            batch_size: 8,
            mode: TrajectoryMode::Cot,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config(format!(
                "grpo.group_size must be at least 2, got {}",
                self.group_size
            )));
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return Err(Error::Config(format!("grpo.kl_beta must be a nonnegative real, got {}", self.kl_beta)));
        }
        if !(self.clip_epsilon > 0.0) {
            return Err(Error::Config(format!(
                "grpo.clip_epsilon must be positive, got {}",
                self.clip_epsilon
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "grpo.learning_rate must be a positive real, got {}",
                self.learning_rate
            )));
        }
        if self.turn_limit < 2 {
            return Err(Error::Config(format!(
                "grpo.turn_limit must leave room for one tool call and an answer, got {}",
                self.turn_limit
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("grpo.batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-step training diagnostics, one line-delimited record per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoDiagnostics {
    pub step: usize,
    pub mean_reward: f64,
    pub reward_std: f64,
    pub adv_abs_mean: f64,
    pub mean_kl: f64,
    pub grad_norm: f64,
    pub n_trajectories: usize,
}

/// One sampled trajectory with its group-normalized advantage, as consumed
/// by the surrogate.
#[derive(Debug, Clone)]
pub struct TrajectoryItem {
    pub features: Vec<f64>,
    pub transcript: TrajectoryTranscript,
    pub advantage: f64,
}

// A visited decision point. The continuation head's action space is stop
// (index None, logit fixed 0) plus the models not yet consulted.
#[derive(Debug, Clone)]
enum Decision {
    Anchor { chosen: usize },
    Continuation { remaining: Vec<usize>, chosen: Option<usize> },
}

fn augmented(features: &[f64]) -> Vec<f64> {
    let mut x = features.to_vec();
    x.push(1.0);
    x
}

fn dot(w: &[f64], x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(a, b)| a * b).sum()
}

// Option logits for a decision: continuation prepends the stop option, whose
// logit is constant 0 and owns no parameters (row = None).
fn decision_logits(params: &PolicyParams, x_aug: &[f64], d: &Decision) -> (Vec<f64>, Vec<Option<usize>>) {
    match d {
        Decision::Anchor { .. } => {
            let logits = params.anchor.iter().map(|row| dot(row, x_aug)).collect();
            let rows = (0..params.anchor.len()).map(Some).collect();
            (logits, rows)
        }
        Decision::Continuation { remaining, .. } => {
            let mut logits = vec![0.0];
            let mut rows = vec![None];
            for &m in remaining {
                logits.push(dot(&params.continuation[m], x_aug));
                rows.push(Some(m));
            }
            (logits, rows)
        }
    }
}

fn chosen_option(d: &Decision, rows: &[Option<usize>]) -> usize {
    let target = match d {
        Decision::Anchor { chosen } => Some(*chosen),
        Decision::Continuation { chosen, .. } => *chosen,
    };
    rows.iter().position(|r| *r == target).expect("chosen action is in the option set")
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).iter().map(|lp| lp.exp()).collect()
}

// Reconstruct the decision sequence a transcript's tool calls imply. A stop
// decision exists only where the policy had a real choice: when the call
// budget (turn_limit - 1) was not exhausted and models remained.
fn decision_sequence(p: &Policy, t: &TrajectoryTranscript, turn_limit: usize) -> Result<Vec<Decision>> {
    let calls: Vec<usize> = t
        .tool_calls
        .iter()
        .filter(|c| c.succeeded)
        .map(|c| p.model_index(&c.model_name))
        .collect::<Result<_>>()?;
    if calls.is_empty() {
        return Err(Error::Contract("trajectory has no successful tool call".into()));
    }
    let budget = turn_limit - 1;
    if calls.len() > budget {
        return Err(Error::Contract(format!(
            "{} tool calls exceed the budget of {budget}",
            calls.len()
        )));
    }
    let mut decisions = vec![Decision::Anchor { chosen: calls[0] }];
    let mut used = vec![false; p.n_models()];
    used[calls[0]] = true;
    for &c in &calls[1..] {
        let remaining: Vec<usize> = (0..p.n_models()).filter(|&m| !used[m]).collect();
        decisions.push(Decision::Continuation { remaining, chosen: Some(c) });
        used[c] = true;
    }
    let remaining: Vec<usize> = (0..p.n_models()).filter(|&m| !used[m]).collect();
    if calls.len() < budget && !remaining.is_empty() {
        decisions.push(Decision::Continuation { remaining, chosen: None });
    }
    Ok(decisions)
}

fn transcript_from_calls(p: &Policy, calls: &[usize], mode: TrajectoryMode) -> TrajectoryTranscript {
    let think = matches!(mode, TrajectoryMode::Cot);
    let mut turns: Vec<Turn> = calls
        .iter()
        .map(|_| Turn { has_think: think, action: TurnAction::ToolCall })
        .collect();
    turns.push(Turn { has_think: think, action: TurnAction::Answer });
    TrajectoryTranscript {
        mode,
        turns,
        tool_calls: calls
            .iter()
            .map(|&m| ToolCall { model_name: p.model_names[m].clone(), succeeded: true })
            .collect(),
        final_answer: None,
    }
}

fn sample_option(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (i, p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    probs.len() - 1
}

fn check_features(p: &Policy, features: &[f64]) -> Result<()> {
    if features.len() != p.feature_dim {
        return Err(Error::Contract(format!(
            "feature vector has {} entries, policy expects {}",
            features.len(),
            p.feature_dim
        )));
    }
    Ok(())
}

/// Sample one trajectory: anchor draw, continuation draws until stop or the
/// call budget runs out, then an answer turn. Bit-reproducible under `seed`.
/// The answer content is left empty; callers that can fuse scores fill it.
pub fn sample_trajectory(
    p: &Policy,
    features: &[f64],
    cfg: &GrpoConfig,
    seed: u64,
) -> Result<TrajectoryTranscript> {
    cfg.validate()?;
    check_features(p, features)?;
    let x = augmented(features);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let anchor_probs = softmax(&decision_logits(&p.params, &x, &Decision::Anchor { chosen: 0 }).0);
    let mut calls = vec![sample_option(&anchor_probs, &mut rng)];
    let budget = cfg.turn_limit - 1;
    loop {
        if calls.len() >= budget {
            break;
        }
        let remaining: Vec<usize> = (0..p.n_models()).filter(|m| !calls.contains(m)).collect();
        if remaining.is_empty() {
            break;
        }
        let d = Decision::Continuation { remaining: remaining.clone(), chosen: None };
        let probs = softmax(&decision_logits(&p.params, &x, &d).0);
        let opt = sample_option(&probs, &mut rng);
        if opt == 0 {
            break;
        }
        calls.push(remaining[opt - 1]);
    }
    Ok(transcript_from_calls(p, &calls, cfg.mode))
}

/// Deterministic argmax variant of [`sample_trajectory`] for evaluation.
/// Ties prefer stopping, then the lowest model index.
pub fn greedy_trajectory(p: &Policy, features: &[f64], cfg: &GrpoConfig) -> Result<TrajectoryTranscript> {
    cfg.validate()?;
    check_features(p, features)?;
    let x = augmented(features);

    let anchor_logits = decision_logits(&p.params, &x, &Decision::Anchor { chosen: 0 }).0;
    let mut calls = vec![argmax_tie_low(&anchor_logits)];
    let budget = cfg.turn_limit - 1;
    loop {
        if calls.len() >= budget {
            break;
        }
        let remaining: Vec<usize> = (0..p.n_models()).filter(|m| !calls.contains(m)).collect();
        if remaining.is_empty() {
            break;
        }
        let d = Decision::Continuation { remaining: remaining.clone(), chosen: None };
        let logits = decision_logits(&p.params, &x, &d).0;
        let opt = argmax_tie_low(&logits);
        if opt == 0 {
            break;
        }
        calls.push(remaining[opt - 1]);
    }
    Ok(transcript_from_calls(p, &calls, cfg.mode))
}

/// Log-probability of a transcript's decision sequence under `theta`.
pub fn trajectory_log_prob(
    p: &Policy,
    theta: &PolicyParams,
    features: &[f64],
    t: &TrajectoryTranscript,
    turn_limit: usize,
) -> Result<f64> {
    check_features(p, features)?;
    let x = augmented(features);
    let mut total = 0.0;
    for d in decision_sequence(p, t, turn_limit)? {
        let (logits, rows) = decision_logits(theta, &x, &d);
        total += log_softmax(&logits)[chosen_option(&d, &rows)];
    }
    Ok(total)
}

/// Normalize a group's rewards to advantages: (r - mean) / population std,
/// all zeros when the spread is below 1e-12.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Contract(format!(
            "advantage normalization needs a group of at least 2, got {}",
            rewards.len()
        )));
    }
    let (mean, std) = mean_and_pop_std(rewards);
    if std < 1e-12 {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

// Per-trajectory pieces of the surrogate at theta: log-prob under theta and
// under the sampling-time parameters, and KL(theta || reference) summed over
// the visited decision points.
fn trajectory_terms(
    p: &Policy,
    theta: &PolicyParams,
    old: &PolicyParams,
    item: &TrajectoryItem,
    turn_limit: usize,
) -> Result<(f64, f64, f64)> {
    let x = augmented(&item.features);
    let mut logp_theta = 0.0;
    let mut logp_old = 0.0;
    let mut kl = 0.0;
    for d in decision_sequence(p, &item.transcript, turn_limit)? {
        let (logits_t, rows) = decision_logits(theta, &x, &d);
        let (logits_o, _) = decision_logits(old, &x, &d);
        let (logits_r, _) = decision_logits(&p.reference, &x, &d);
        let lp_t = log_softmax(&logits_t);
        let lp_o = log_softmax(&logits_o);
        let lp_r = log_softmax(&logits_r);
        let chosen = chosen_option(&d, &rows);
        logp_theta += lp_t[chosen];
        logp_old += lp_o[chosen];
        kl += lp_t
            .iter()
            .zip(&lp_r)
            .map(|(&lt, &lr)| lt.exp() * (lt - lr))
            .sum::<f64>();
    }
    Ok((logp_theta, logp_old, kl))
}

/// Mean clipped surrogate over the items, evaluated at `theta` against the
/// sampling parameters `old` and the policy's frozen reference.
pub fn surrogate_objective(
    p: &Policy,
    theta: &PolicyParams,
    old: &PolicyParams,
    items: &[TrajectoryItem],
    cfg: &GrpoConfig,
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Contract("surrogate needs at least one trajectory".into()));
    }
    let mut total = 0.0;
    for item in items {
        let (lp_t, lp_o, kl) = trajectory_terms(p, theta, old, item, cfg.turn_limit)?;
        let ratio = (lp_t - lp_o).exp();
        let unclipped = ratio * item.advantage;
        let clipped = ratio.clamp(1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon) * item.advantage;
        total += unclipped.min(clipped) - cfg.kl_beta * kl;
    }
    Ok(total / items.len() as f64)
}

/// Analytic gradient of [`surrogate_objective`] with respect to `theta`.
///
/// Softmax score function per decision: d logp(chosen)/d logit_i =
/// [i = chosen] - p_i; the clipped term contributes A·ratio·grad logp when
/// the unclipped branch is active and nothing otherwise; the KL term uses
/// d KL/d logit_m = p_m·((log p_m - log q_m) - KL).
pub fn surrogate_gradient(
    p: &Policy,
    theta: &PolicyParams,
    old: &PolicyParams,
    items: &[TrajectoryItem],
    cfg: &GrpoConfig,
) -> Result<PolicyParams> {
    if items.is_empty() {
        return Err(Error::Contract("surrogate needs at least one trajectory".into()));
    }
    let mut grad = PolicyParams::zeros(p.n_models(), p.feature_dim);
    let scale = 1.0 / items.len() as f64;
    for item in items {
        let x = augmented(&item.features);
        let decisions = decision_sequence(p, &item.transcript, cfg.turn_limit)?;
        let (lp_t, lp_o, _) = trajectory_terms(p, theta, old, item, cfg.turn_limit)?;
        let ratio = (lp_t - lp_o).exp();
        let unclipped = ratio * item.advantage;
        let clipped = ratio.clamp(1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon) * item.advantage;
        let policy_coeff = if unclipped <= clipped { item.advantage * ratio } else { 0.0 };

        for d in &decisions {
            let (logits_t, rows) = decision_logits(theta, &x, d);
            let (logits_r, _) = decision_logits(&p.reference, &x, d);
            let lp = log_softmax(&logits_t);
            let lq = log_softmax(&logits_r);
            let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
            let kl: f64 = lp.iter().zip(&lq).map(|(&a, &b)| a.exp() * (a - b)).sum();
            let chosen = chosen_option(d, &rows);

            for (i, row) in rows.iter().enumerate() {
                let Some(m) = row else { continue };
                let d_logp = (if i == chosen { 1.0 } else { 0.0 }) - probs[i];
                let d_kl = probs[i] * ((lp[i] - lq[i]) - kl);
                let coeff = scale * (policy_coeff * d_logp - cfg.kl_beta * d_kl);
                let target = match d {
                    Decision::Anchor { .. } => &mut grad.anchor[*m],
                    Decision::Continuation { .. } => &mut grad.continuation[*m],
                };
                for (t, xi) in target.iter_mut().zip(&x) {
                    *t += coeff * xi;
                }
            }
        }
    }
    Ok(grad)
}

fn query_features(d: &Dataset, q: usize) -> Vec<f64> {
    d.query_features.as_ref().map(|f| f[q].clone()).unwrap_or_default()
}

fn check_policy_dataset(p: &Policy, d: &Dataset) -> Result<()> {
    if p.model_names != d.model_names {
        return Err(Error::Contract(
            "policy model roster does not match the dataset's models".into(),
        ));
    }
    let dim = d.query_features.as_ref().map(|f| f[0].len()).unwrap_or(0);
    if dim != p.feature_dim {
        return Err(Error::Contract(format!(
            "dataset features have {dim} entries, policy expects {}",
            p.feature_dim
        )));
    }
    Ok(())
}

// Answer a query from the trajectory's consulted models: fuse their score
// rows anchored at the first call, take the top-scoring gallery label.
fn answer_query(
    p: &Policy,
    t: &TrajectoryTranscript,
    d: &Dataset,
    q: usize,
    reward_cfg: &RewardConfig,
) -> Result<String> {
    let mut selected = Vec::new();
    for call in t.tool_calls.iter().filter(|c| c.succeeded) {
        selected.push(p.model_index(&call.model_name)?);
    }
    let rows: Vec<&[f64]> = selected.iter().map(|&m| d.scores[m].row(q)).collect();
    let fused = act_fuse_query(&rows, 0, reward_cfg.k, reward_cfg.sigma_epsilon)?;
    Ok(d.gallery_labels[argmax_tie_low(&fused)].clone())
}

/// One group-relative update: per query, sample a group, reward it, normalize
/// advantages within the group, then take a single ascent step on the clipped
/// surrogate evaluated at the sampling parameters. The reference stays fixed.
pub fn grpo_step(
    p: &Policy,
    batch: &[usize],
    d: &Dataset,
    reward_cfg: &RewardConfig,
    cfg: &GrpoConfig,
    seed: u64,
) -> Result<(Policy, GrpoDiagnostics)> {
    cfg.validate()?;
    reward_cfg.validate()?;
    check_policy_dataset(p, d)?;
    if batch.is_empty() {
        return Err(Error::Contract("training batch is empty".into()));
    }
    for &q in batch {
        if q >= d.n_queries() {
            return Err(Error::Contract(format!(
                "batch query {q} out of range, dataset has {}",
                d.n_queries()
            )));
        }
    }

    let mut items = Vec::with_capacity(batch.len() * cfg.group_size);
    let mut rewards_all = Vec::with_capacity(batch.len() * cfg.group_size);
    for &q in batch {
        let features = query_features(d, q);
        let mut group = Vec::with_capacity(cfg.group_size);
        let mut rewards = Vec::with_capacity(cfg.group_size);
        for j in 0..cfg.group_size {
            let mut t = sample_trajectory(p, &features, cfg, derive_seed(seed, q as u64, j as u64))?;
            t.final_answer = Some(answer_query(p, &t, d, q, reward_cfg)?);
            let mut rc = reward_cfg.clone();
            rc.mask_seed = derive_seed(reward_cfg.mask_seed, q as u64, j as u64);
            rewards.push(total_reward(&t, &d.query_labels[q], d, &rc)?);
            group.push(t);
        }
        let advantages = group_advantages(&rewards)?;
        for (j, t) in group.into_iter().enumerate() {
            items.push(TrajectoryItem {
                features: features.clone(),
                transcript: t,
                advantage: advantages[j],
            });
        }
        rewards_all.extend(rewards);
    }

    let grad = surrogate_gradient(p, &p.params, &p.params, &items, cfg)?;
    let (mean_reward, reward_std) = mean_and_pop_std(&rewards_all);
    let adv_abs_mean = items.iter().map(|i| i.advantage.abs()).sum::<f64>() / items.len() as f64;
    let mut kl_sum = 0.0;
    for item in &items {
        kl_sum += trajectory_terms(p, &p.params, &p.params, item, cfg.turn_limit)?.2;
    }
    let diagnostics = GrpoDiagnostics {
        step: 0,
        mean_reward,
        reward_std,
        adv_abs_mean,
        mean_kl: kl_sum / items.len() as f64,
        grad_norm: grad.norm(),
        n_trajectories: items.len(),
    };
    if !grad.is_finite() {
        return Err(Error::Domain(format!(
            "non-finite gradient: mean_reward={}, mean_kl={}, n_trajectories={}",
            diagnostics.mean_reward, diagnostics.mean_kl, diagnostics.n_trajectories
        )));
    }

    let mut params = p.params.clone();
    params.axpy(cfg.learning_rate, &grad);
    let updated = Policy {
        model_names: p.model_names.clone(),
        feature_dim: p.feature_dim,
        params,
        reference: p.reference.clone(),
    };
    Ok((updated, diagnostics))
}

/// Run `cfg.steps` updates from a fresh seeded policy. Each step draws a
/// without-replacement batch of queries, or every query when the batch size
/// covers the dataset. Deterministic in (init_seed, train_seed).
pub fn train_policy(
    d: &Dataset,
    reward_cfg: &RewardConfig,
    cfg: &GrpoConfig,
    init_seed: u64,
    train_seed: u64,
) -> Result<(Policy, Vec<GrpoDiagnostics>)> {
    cfg.validate()?;
    reward_cfg.validate()?;
    let dim = d.query_features.as_ref().map(|f| f[0].len()).unwrap_or(0);
    let mut policy = Policy::new(d.model_names.clone(), dim, init_seed)?;
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<usize> = if cfg.batch_size >= d.n_queries() {
            (0..d.n_queries()).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(train_seed, step as u64, 0));
            let mut idx = rand::seq::index::sample(&mut rng, d.n_queries(), cfg.batch_size).into_vec();
            idx.sort_unstable();
            idx
        };
        let step_seed = derive_seed(train_seed, step as u64, 1);
        let (next, mut diag) = grpo_step(&policy, &batch, d, reward_cfg, cfg, step_seed)?;
        diag.step = step;
        history.push(diag);
        policy = next;
    }
    Ok((policy, history))
}

/// Greedy per-query selections assembled into a mask, for evaluation.
pub fn greedy_selection_mask(p: &Policy, d: &Dataset, cfg: &GrpoConfig) -> Result<SelectionMask> {
    check_policy_dataset(p, d)?;
    let (nq, nm) = (d.n_queries(), d.n_models());
    let mut mask = vec![false; nq * nm];
    let mut anchors = vec![0usize; nq];
    for q in 0..nq {
        let t = greedy_trajectory(p, &query_features(d, q), cfg)?;
        let mut first = None;
        for call in &t.tool_calls {
            let m = p.model_index(&call.model_name)?;
            mask[q * nm + m] = true;
            first.get_or_insert(m);
        }
        anchors[q] = first.expect("greedy trajectory always anchors");
    }
    SelectionMask::new(nq, nm, mask, anchors)
}

/// Score the policy's greedy selections with the full metric suite, using
/// the reward config's fusion depth and evaluation targets.
pub fn evaluate_greedy(
    p: &Policy,
    d: &Dataset,
    cfg: &GrpoConfig,
    reward_cfg: &RewardConfig,
) -> Result<MetricReport> {
    reward_cfg.validate()?;
    let mask = greedy_selection_mask(p, d, cfg)?;
    let fused = crate::fusion::act_fuse_dataset(d, &mask, reward_cfg.k, reward_cfg.sigma_epsilon)?;
    let trials = crate::metrics::build_nonmated_trials(
        &d.query_labels,
        &d.gallery_labels,
        reward_cfg.trial_fraction,
        reward_cfg.n_trials,
        reward_cfg.trial_base_seed,
    )?;
    crate::metrics::evaluate_report(
        &fused,
        &d.query_labels,
        &d.gallery_labels,
        reward_cfg.far_target,
        reward_cfg.fpir_target,
        &trials,
    )
}

/// Write the policy as a pretty-printed structured document.
pub fn save_policy(p: &Policy, path: &Path) -> Result<()> {
    p.validate()?;
    let mut body = serde_json::to_string_pretty(p)
        .map_err(|e| Error::Contract(format!("policy serialization failed: {e}")))?;
    body.push('\n');
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Load and validate a policy document written by [`save_policy`].
pub fn load_policy(path: &Path) -> Result<Policy> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let policy: Policy = serde_json::from_str(&text)
        .map_err(|e| Error::parse(path, e.line(), format!("invalid policy document: {e}")))?;
    policy.validate()?;
    Ok(policy)
}
