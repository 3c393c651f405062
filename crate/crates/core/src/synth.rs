//! Seeded synthetic dataset generation with controllable per-model
//! reliability.
//!
//! Each model draws match and non-match scores from configured normal
//! distributions, clamped to the score range. A model may be gated on a
//! binary query feature: when the feature is inactive for a query, the
//! model's match distribution collapses (by default onto the non-match
//! mean), making the model uninformative exactly there. This mirrors a face
//! recognizer that fails when the face is not visible, and gives the
//! selection policy something real to learn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, MetricKind, ScoreMatrix};
use crate::error::{Error, Result};

/// One binary query attribute, active with the given probability.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub active_probability: f64,
}

/// Reliability profile of one synthetic model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub match_mean: f64,
    pub match_spread: f64,
    pub nonmatch_mean: f64,
    pub nonmatch_spread: f64,
    /// Feature index this model depends on; `None` means always reliable.
    #[serde(default)]
    pub gate_feature: Option<usize>,
    /// Match mean when the gate feature is inactive. Defaults to
    /// `nonmatch_mean`, which removes all separation.
    #[serde(default)]
    pub gated_match_mean: Option<f64>,
}

/// Full generator configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub queries_per_subject: usize,
    pub gallery_per_subject: usize,
    pub models: Vec<ModelSpec>,
    pub features: Vec<FeatureSpec>,
    pub score_min: f64,
    pub score_max: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_subjects: 10,
            queries_per_subject: 2,
            gallery_per_subject: 2,
            models: vec![ModelSpec {
                name: "model0".into(),
                match_mean: 0.8,
                match_spread: 0.05,
                nonmatch_mean: 0.2,
                nonmatch_spread: 0.05,
                gate_feature: None,
                gated_match_mean: None,
            }],
            features: Vec::new(),
            score_min: 0.0,
            score_max: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 1 || self.queries_per_subject < 1 || self.gallery_per_subject < 1 {
            return Err(Error::Config("synth counts must all be at least 1".into()));
        }
        if self.n_subjects > 9999 {
            return Err(Error::Config("synth.n_subjects is capped at 9999".into()));
        }
        if self.models.is_empty() {
            return Err(Error::Config("synth.models must be nonempty".into()));
        }
        if !(self.score_min.is_finite() && self.score_max.is_finite() && self.score_min < self.score_max) {
            return Err(Error::Config(format!(
                "synth score range [{}, {}] is invalid",
                self.score_min, self.score_max
            )));
        }
        let mut names = std::collections::HashSet::new();
        for (i, m) in self.models.iter().enumerate() {
            if !names.insert(m.name.as_str()) {
                return Err(Error::Config(format!("synth.models[{i}]: duplicate name {:?}", m.name)));
            }
            if !(m.match_spread > 0.0 && m.nonmatch_spread > 0.0) {
                return Err(Error::Config(format!("synth.models[{i}]: spreads must be positive")));
            }
            for v in [m.match_mean, m.nonmatch_mean] {
                if !v.is_finite() {
                    return Err(Error::Config(format!("synth.models[{i}]: non-finite mean")));
                }
            }
            if m.match_mean < m.nonmatch_mean {
                return Err(Error::Config(format!(
                    "synth.models[{i}]: match mean {} below non-match mean {}",
                    m.match_mean, m.nonmatch_mean
                )));
            }
            if let Some(g) = m.gate_feature {
                if g >= self.features.len() {
                    return Err(Error::Config(format!(
                        "synth.models[{i}]: gate feature {g} out of range for {} features",
                        self.features.len()
                    )));
                }
            }
            if let Some(v) = m.gated_match_mean {
                if !v.is_finite() {
                    return Err(Error::Config(format!("synth.models[{i}]: non-finite gated mean")));
                }
            }
        }
        for (j, f) in self.features.iter().enumerate() {
            if !(0.0..=1.0).contains(&f.active_probability) {
                return Err(Error::Config(format!(
                    "synth.features[{j}]: active_probability must be in [0,1]"
                )));
            }
        }
        Ok(())
    }
}

/// Generate a dataset. Deterministic for a fixed config: one ChaCha stream
/// drives feature draws first, then scores in model, query, gallery order.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let subject = |s: usize| format!("s{s:04}");
    let mut gallery_labels = Vec::with_capacity(cfg.n_subjects * cfg.gallery_per_subject);
    for s in 0..cfg.n_subjects {
        for _ in 0..cfg.gallery_per_subject {
            gallery_labels.push(subject(s));
        }
    }
    let mut query_labels = Vec::with_capacity(cfg.n_subjects * cfg.queries_per_subject);
    for s in 0..cfg.n_subjects {
        for _ in 0..cfg.queries_per_subject {
            query_labels.push(subject(s));
        }
    }
    let nq = query_labels.len();
    let ng = gallery_labels.len();

    let query_features: Option<Vec<Vec<f64>>> = if cfg.features.is_empty() {
        None
    } else {
        Some(
            (0..nq)
                .map(|_| {
                    cfg.features
                        .iter()
                        .map(|f| if rng.random::<f64>() < f.active_probability { 1.0 } else { 0.0 })
                        .collect()
                })
                .collect(),
        )
    };

    let mut scores = Vec::with_capacity(cfg.models.len());
    for spec in &cfg.models {
        let mut mat = ScoreMatrix::zeros(nq, ng);
        for q in 0..nq {
            let gate_active = match spec.gate_feature {
                Some(j) => query_features.as_ref().map(|f| f[q][j] > 0.5).unwrap_or(true),
                None => true,
            };
            for g in 0..ng {
                let matched = query_labels[q] == gallery_labels[g];
                let (mean, spread) = if matched {
                    let mean = if gate_active {
                        spec.match_mean
                    } else {
                        spec.gated_match_mean.unwrap_or(spec.nonmatch_mean)
                    };
                    (mean, spec.match_spread)
                } else {
                    (spec.nonmatch_mean, spec.nonmatch_spread)
                };
                let z: f64 = rng.sample(StandardNormal);
                let v = (mean + spread * z).clamp(cfg.score_min, cfg.score_max);
                mat.set(q, g, v);
            }
        }
        scores.push(mat);
    }

    Dataset::new(
        cfg.models.iter().map(|m| m.name.clone()).collect(),
        vec![MetricKind::Cosine; cfg.models.len()],
        scores,
        query_labels,
        gallery_labels,
        query_features,
    )
}
