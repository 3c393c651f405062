//! Retrieval and open-set evaluation over fused score matrices: Rank-1
//! accuracy, mean average precision, TAR@FAR, FNIR@FPIR over seeded
//! non-mated trials, and the composite overall score.
//!
//! All metrics are fractions in [0, 1]. Thresholds are always chosen among
//! observed score values as the smallest value whose strictly-greater count
//! meets the target rate, which keeps every metric exact and platform
//! deterministic.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::FusedScores;
use crate::error::{Error, Result};
use crate::util::{mean_and_pop_std, ranked_desc};

/// Aggregated evaluation results for one fused matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rank1: f64,
    pub map: f64,
    pub tar: f64,
    pub far_target: f64,
    pub fnir_mean: f64,
    /// Population standard deviation of FNIR across trials.
    pub fnir_std: f64,
    pub fpir_target: f64,
    /// rank1 + map + tar - fnir_mean.
    pub overall: f64,
}

/// One seeded open-set trial: a subset of gallery subjects is removed, their
/// queries become non-mated probes, and the gallery shrinks accordingly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonMatedTrial {
    pub seed: u64,
    /// Subjects removed from the gallery, sorted.
    pub nonmated_subjects: Vec<String>,
    /// Surviving gallery column indices, ascending.
    pub kept_gallery: Vec<usize>,
    /// Queries that still have at least one mate in the reduced gallery.
    pub mated_probes: Vec<usize>,
    /// Queries whose subject was removed.
    pub nonmated_probes: Vec<usize>,
}

fn check_shapes(f: &FusedScores, query_labels: &[String], gallery_labels: &[String]) -> Result<()> {
    if f.n_queries() != query_labels.len() {
        return Err(Error::Contract(format!(
            "fused matrix has {} rows but {} query labels",
            f.n_queries(),
            query_labels.len()
        )));
    }
    if f.n_gallery() != gallery_labels.len() {
        return Err(Error::Contract(format!(
            "fused matrix has {} cols but {} gallery labels",
            f.n_gallery(),
            gallery_labels.len()
        )));
    }
    Ok(())
}

/// Fraction of mated queries whose top-scoring gallery entry (ties broken by
/// lowest gallery index) shares the query's subject. Queries without any
/// mate are excluded from the denominator.
pub fn rank1_accuracy(f: &FusedScores, query_labels: &[String], gallery_labels: &[String]) -> Result<f64> {
    check_shapes(f, query_labels, gallery_labels)?;
    let mut mated = 0usize;
    let mut hits = 0usize;
    for q in 0..f.n_queries() {
        if !gallery_labels.iter().any(|g| *g == query_labels[q]) {
            continue;
        }
        mated += 1;
        let top = crate::util::argmax_tie_low(f.row(q));
        if gallery_labels[top] == query_labels[q] {
            hits += 1;
        }
    }
    if mated == 0 {
        return Err(Error::Domain("no query has a mated gallery entry".into()));
    }
    Ok(hits as f64 / mated as f64)
}

/// Average precision of one ranked row plus the rank (1-based) of the best
/// mate; `None` when the row has no mate.
pub(crate) fn ap_and_best_mate_rank(row: &[f64], is_mate: &[bool]) -> Option<(f64, usize)> {
    let n_mates = is_mate.iter().filter(|&&m| m).count();
    if n_mates == 0 {
        return None;
    }
    let order = ranked_desc(row);
    let mut hits = 0usize;
    let mut sum = 0.0;
    let mut best_rank = 0usize;
    for (pos, &g) in order.iter().enumerate() {
        if is_mate[g] {
            hits += 1;
            if hits == 1 {
                best_rank = pos + 1;
            }
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    Some((sum / n_mates as f64, best_rank))
}

/// Mean over mated queries of average precision under descending-score order
/// with ascending-index tie break.
pub fn mean_average_precision(
    f: &FusedScores,
    query_labels: &[String],
    gallery_labels: &[String],
) -> Result<f64> {
    check_shapes(f, query_labels, gallery_labels)?;
    let mut sum = 0.0;
    let mut mated = 0usize;
    for q in 0..f.n_queries() {
        let is_mate: Vec<bool> = gallery_labels.iter().map(|g| *g == query_labels[q]).collect();
        if let Some((ap, _)) = ap_and_best_mate_rank(f.row(q), &is_mate) {
            sum += ap;
            mated += 1;
        }
    }
    if mated == 0 {
        return Err(Error::Domain("no query has a mated gallery entry".into()));
    }
    Ok(sum / mated as f64)
}

/// Smallest value in `values` whose strictly-greater fraction is at most
/// `target`; falls back to the maximum when nothing qualifies. `values` must
/// be nonempty.
fn threshold_at_rate(values: &[f64], target: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let n = sorted.len();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let greater = (n - j - 1) as f64 / n as f64;
        if greater <= target {
            return sorted[i];
        }
        i = j + 1;
    }
    sorted[n - 1]
}

/// True-accept rate at a false-accept rate over pooled query-gallery pairs.
///
/// All (q, g) scores are pooled into match (same subject) and non-match
/// sets. The threshold is the smallest non-match value whose strictly-greater
/// false-accept fraction is at most `far_target`; a target of 1 accepts
/// everything (threshold negative infinity).
pub fn tar_at_far(
    f: &FusedScores,
    query_labels: &[String],
    gallery_labels: &[String],
    far_target: f64,
) -> Result<f64> {
    check_shapes(f, query_labels, gallery_labels)?;
    if !(0.0..=1.0).contains(&far_target) {
        return Err(Error::Domain(format!("far_target must be in [0,1], got {far_target}")));
    }
    let mut matches = Vec::new();
    let mut non_matches = Vec::new();
    for q in 0..f.n_queries() {
        for g in 0..f.n_gallery() {
            if query_labels[q] == gallery_labels[g] {
                matches.push(f.matrix.get(q, g));
            } else {
                non_matches.push(f.matrix.get(q, g));
            }
        }
    }
    if matches.is_empty() {
        return Err(Error::Domain("no match pairs exist".into()));
    }
    if non_matches.is_empty() {
        return Err(Error::Domain("no non-match pairs exist".into()));
    }
    let threshold = if far_target >= 1.0 {
        f64::NEG_INFINITY
    } else {
        threshold_at_rate(&non_matches, far_target)
    };
    let accepted = matches.iter().filter(|&&s| s > threshold).count();
    Ok(accepted as f64 / matches.len() as f64)
}

/// Build seeded open-set trials. Trial `i` removes round(fraction * S)
/// subjects sampled without replacement from the sorted unique gallery
/// subjects using seed `base_seed + i`.
pub fn build_nonmated_trials(
    query_labels: &[String],
    gallery_labels: &[String],
    fraction: f64,
    n_trials: usize,
    base_seed: u64,
) -> Result<Vec<NonMatedTrial>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Domain(format!("trial fraction must be in (0,1), got {fraction}")));
    }
    let mut subjects: Vec<&String> = gallery_labels.iter().collect();
    subjects.sort();
    subjects.dedup();
    let n_subjects = subjects.len();
    let n_remove = (fraction * n_subjects as f64).round() as usize;
    if n_remove == 0 {
        return Err(Error::Domain(format!(
            "fraction {fraction} of {n_subjects} subjects rounds to zero removals"
        )));
    }
    if n_remove >= n_subjects {
        return Err(Error::Domain(format!(
            "fraction {fraction} would remove all {n_subjects} subjects"
        )));
    }

    let mut trials = Vec::with_capacity(n_trials);
    for i in 0..n_trials {
        let seed = base_seed.wrapping_add(i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picked = rand::seq::index::sample(&mut rng, n_subjects, n_remove);
        let mut nonmated_subjects: Vec<String> =
            picked.iter().map(|j| subjects[j].clone()).collect();
        nonmated_subjects.sort();

        let removed: std::collections::HashSet<&str> =
            nonmated_subjects.iter().map(String::as_str).collect();
        let kept_gallery: Vec<usize> = (0..gallery_labels.len())
            .filter(|&g| !removed.contains(gallery_labels[g].as_str()))
            .collect();
        let mut mated_probes = Vec::new();
        let mut nonmated_probes = Vec::new();
        for (q, label) in query_labels.iter().enumerate() {
            if removed.contains(label.as_str()) {
                nonmated_probes.push(q);
            } else if kept_gallery.iter().any(|&g| gallery_labels[g] == *label) {
                mated_probes.push(q);
            }
        }
        trials.push(NonMatedTrial {
            seed,
            nonmated_subjects,
            kept_gallery,
            mated_probes,
            nonmated_probes,
        });
    }
    Ok(trials)
}

/// False-negative identification rate at a false-positive identification
/// rate for one trial.
///
/// Every non-mated probe raises an alarm equal to its best reduced-gallery
/// score. The threshold is the smallest alarm value whose strictly-greater
/// alarm fraction is at most `fpir_target`. A mated probe counts as a miss
/// when its reduced-gallery top-1 identity is wrong or its best same-subject
/// score does not exceed the threshold.
pub fn fnir_at_fpir(
    f: &FusedScores,
    query_labels: &[String],
    gallery_labels: &[String],
    trial: &NonMatedTrial,
    fpir_target: f64,
) -> Result<f64> {
    check_shapes(f, query_labels, gallery_labels)?;
    if trial.mated_probes.is_empty() {
        return Err(Error::Domain("trial has no mated probes".into()));
    }
    if trial.nonmated_probes.is_empty() {
        return Err(Error::Domain("trial has no non-mated probes".into()));
    }
    if trial.kept_gallery.is_empty() {
        return Err(Error::Domain("trial removed the entire gallery".into()));
    }

    let alarms: Vec<f64> = trial
        .nonmated_probes
        .iter()
        .map(|&q| {
            let row = f.row(q);
            trial
                .kept_gallery
                .iter()
                .map(|&g| row[g])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let threshold = threshold_at_rate(&alarms, fpir_target);

    let mut misses = 0usize;
    for &q in &trial.mated_probes {
        let row = f.row(q);
        // top-1 over the reduced gallery, ties to the lowest original index
        let mut top = trial.kept_gallery[0];
        for &g in &trial.kept_gallery {
            if row[g] > row[top] {
                top = g;
            }
        }
        let correct = gallery_labels[top] == query_labels[q];
        let best_mate = trial
            .kept_gallery
            .iter()
            .filter(|&&g| gallery_labels[g] == query_labels[q])
            .map(|&g| row[g])
            .fold(f64::NEG_INFINITY, f64::max);
        if !correct || best_mate <= threshold {
            misses += 1;
        }
    }
    Ok(misses as f64 / trial.mated_probes.len() as f64)
}

/// Evaluate all four metrics plus the composite overall score.
///
/// FNIR is aggregated as mean and population standard deviation over the
/// provided trials, in trial order.
pub fn evaluate_report(
    f: &FusedScores,
    query_labels: &[String],
    gallery_labels: &[String],
    far_target: f64,
    fpir_target: f64,
    trials: &[NonMatedTrial],
) -> Result<MetricReport> {
    if trials.is_empty() {
        return Err(Error::Domain("evaluate_report requires at least one trial".into()));
    }
    let rank1 = rank1_accuracy(f, query_labels, gallery_labels)?;
    let map = mean_average_precision(f, query_labels, gallery_labels)?;
    let tar = tar_at_far(f, query_labels, gallery_labels, far_target)?;
    let fnirs: Vec<f64> = trials
        .iter()
        .map(|t| fnir_at_fpir(f, query_labels, gallery_labels, t, fpir_target))
        .collect::<Result<_>>()?;
    let (fnir_mean, fnir_std) = mean_and_pop_std(&fnirs);
    Ok(MetricReport {
        rank1,
        map,
        tar,
        far_target,
        fnir_mean,
        fnir_std,
        fpir_target,
        overall: rank1 + map + tar - fnir_mean,
    })
}
