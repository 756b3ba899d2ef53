//! Central finite-difference checks of the hand-written backward passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use synthfeed::genbackend::lm_train::{sequence_nll, WeightedSequence};
use synthfeed::genbackend::tinylm::{encode_with_bos, LmConfig, TinyLm, EOS};

const H: f64 = 1e-5;

fn random_lm(seed: u64) -> TinyLm<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lm = TinyLm::new(
        LmConfig {
            embed_dim: 8,
            hidden_dim: 12,
            max_seq: 32,
        },
        &mut rng,
    );
    lm.randomize_output_head(0.4, &mut rng);
    lm
}

/// Relative error with a floor on the denominator so coordinates whose true
/// gradient is ~0 are compared absolutely.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Coordinates touched by the sequence: every dense block plus the embedding
/// rows of tokens that occur, so sampled coordinates carry real gradient.
fn sample_coords(lm: &TinyLm<f64>, grad: &[f64], n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let live: Vec<usize> = (0..lm.num_params()).filter(|&i| grad[i] != 0.0).collect();
    (0..n).map(|_| live[rng.gen_range(0..live.len())]).collect()
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let mut lm = random_lm(1);
    let mut tokens = encode_with_bos("Human: hi\n\nAssistant: ok");
    tokens.push(EOS);
    let mut weights = vec![1.0f32; tokens.len() - 1];
    // Mask the first half to exercise the weighted path.
    for w in weights.iter_mut().take(8) {
        *w = 0.0;
    }
    let seq = WeightedSequence { tokens, weights };
    let mut grad = vec![0.0; lm.num_params()];
    sequence_nll(&lm, &seq, Some(&mut grad));

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let coords = sample_coords(&lm, &grad, 150, &mut rng);
    let mut worst: f64 = 0.0;
    for &i in &coords {
        let orig = lm.params()[i];
        lm.params_mut()[i] = orig + H;
        let (up, _) = sequence_nll(&lm, &seq, None);
        lm.params_mut()[i] = orig - H;
        let (down, _) = sequence_nll(&lm, &seq, None);
        lm.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * H);
        worst = worst.max(rel_err(numeric, grad[i]));
    }
    assert!(worst <= 1e-3, "worst relative error {worst}");
}
