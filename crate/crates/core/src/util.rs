//! Small numeric helpers shared across modules.

/// Gallery indices sorted by descending score, ties broken by ascending index.
///
/// This single ordering backs top-k selection and every ranking metric, so
/// tie handling is identical everywhere.
pub(crate) fn ranked_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Index of the maximum entry, ties broken by ascending index.
pub(crate) fn argmax_tie_low(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate().skip(1) {
        if v > scores[best] {
            best = i;
        }
    }
    best
}

/// Mean and population (divide-by-N) standard deviation.
pub(crate) fn mean_and_pop_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// SplitMix64 finalizer; used to derive independent per-item seeds from a
/// base seed without overlapping streams.
pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for stream `(a, b)` under `base`. Deterministic and collision-resistant
/// enough for test-scale workloads.
pub(crate) fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(base ^ splitmix64(a)) ^ splitmix64(b.wrapping_add(0x9E37_79B9)))
}
