//! Nucleus (top-p) sampling with temperature.

use rand::Rng;

/// Temperatures below this decode greedily.
pub const GREEDY_TEMPERATURE: f64 = 1e-4;

/// Sampling distribution over token ids: keep the smallest set of most likely
/// tokens whose probability mass reaches `top_p`, then rescale the kept
/// log-probabilities by `1 / temperature` and renormalize.
///
/// Returns `(token, probability)` pairs in descending model probability.
/// Ties in probability are ordered by token id.
pub fn nucleus_distribution(logprobs: &[f64], top_p: f64, temperature: f64) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..logprobs.len()).collect();
    order.sort_by(|&a, &b| logprobs[b].total_cmp(&logprobs[a]).then(a.cmp(&b)));
    if temperature < GREEDY_TEMPERATURE {
        return vec![(order[0], 1.0)];
    }
    let keep = if top_p >= 1.0 {
        order.len()
    } else {
        let mut mass = 0.0;
        let mut n = 0;
        for &t in &order {
            mass += logprobs[t].exp();
            n += 1;
            if mass >= top_p - 1e-12 {
                break;
            }
        }
        n
    };
    let kept = &order[..keep];
    let scaled: Vec<f64> = kept.iter().map(|&t| logprobs[t] / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    kept.iter()
        .zip(weights)
        .map(|(&t, w)| (t, w / total))
        .collect()
}

pub fn sample_from(dist: &[(usize, f64)], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &(t, p) in dist {
        acc += p;
        if u < acc {
            return t;
        }
    }
    dist.last().expect("non-empty distribution").0
}

pub fn sample_token(logprobs: &[f64], top_p: f64, temperature: f64, rng: &mut impl Rng) -> usize {
    sample_from(&nucleus_distribution(logprobs, top_p, temperature), rng)
}

/// Cut `text` at the earliest occurrence of any stop string.
/// Returns whether a stop string was found.
pub fn apply_stop(text: &mut String, stops: &[String]) -> bool {
    let cut = stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min();
    match cut {
        Some(at) => {
            text.truncate(at);
            true
        }
        None => false,
    }
}
