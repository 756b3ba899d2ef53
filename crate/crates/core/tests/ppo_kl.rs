//! The per-episode KL estimate used for reward shaping is unbiased for the
//! exact sequence KL between policy and reference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use synthfeed::genbackend::tinylm::{LmConfig, TinyLm, Token, BYTE_TOKENS, VOCAB_SIZE};
use synthfeed::policytrain::ppo::{rollout, PpoConfig, ValueHead};
use synthfeed::rm::Scorer;

struct Zero;

impl Scorer for Zero {
    fn score(&self, _: &str, _: &str) -> f64 {
        0.0
    }
}

fn lm(seed: u64) -> TinyLm<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lm = TinyLm::new(
        LmConfig {
            embed_dim: 8,
            hidden_dim: 16,
            max_seq: 64,
        },
        &mut rng,
    );
    lm.randomize_output_head(1.5, &mut rng);
    lm
}

/// Next-token log-distribution after `tokens`.
fn next_logprobs(lm: &TinyLm<f64>, tokens: &[Token]) -> Vec<f64> {
    let mut cache = lm.new_cache();
    let mut row = Vec::new();
    for &t in tokens {
        row = lm.step(&mut cache, t);
    }
    lm.step_logprobs(&row)
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a.exp() * (a - b)).sum()
}

#[test]
fn two_token_kl_estimate_matches_exact_value() {
    let (policy, reference) = (lm(1), lm(2));
    let cfg = PpoConfig {
        rollout_max_tokens: 2,
        temperature: 1.0,
        ..PpoConfig::default()
    };
    let n = 1000;
    let prompts = vec!["hi".to_string(); n];
    let seeds: Vec<u64> = (0..n as u64).collect();
    let episodes = rollout(
        &policy,
        &reference,
        &ValueHead::zeros(8),
        &Zero,
        &prompts,
        &seeds,
        &cfg,
    );
    assert_eq!(episodes.len(), n);

    // Sum over the first token, then over the second unless the first ended
    // the response.
    let prompt = &episodes[0].prompt_tokens;
    let (p1, r1) = (
        next_logprobs(&policy, prompt),
        next_logprobs(&reference, prompt),
    );
    let mut exact = 0.0;
    for t in 0..VOCAB_SIZE {
        let mut term = p1[t] - r1[t];
        if t < BYTE_TOKENS {
            let mut ctx = prompt.clone();
            ctx.push(t as Token);
            term += kl(
                &next_logprobs(&policy, &ctx),
                &next_logprobs(&reference, &ctx),
            );
        }
        exact += p1[t].exp() * term;
    }

    let ks: Vec<f64> = episodes.iter().map(|e| e.kl()).collect();
    let mean = ks.iter().sum::<f64>() / n as f64;
    let sd = (ks.iter().map(|k| (k - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let se = sd / (n as f64).sqrt();
    assert!(
        exact > 0.05,
        "models too similar for a meaningful check: {exact}"
    );
    assert!(
        (mean - exact).abs() < 4.0 * se,
        "estimate {mean} vs exact {exact} (se {se})"
    );
}
