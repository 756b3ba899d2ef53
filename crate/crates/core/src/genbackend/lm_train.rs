//! Next-token cross-entropy training for [`TinyLm`], shared by base-model
//! pre-training and supervised fine-tuning.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tinylm::{encode_with_bos, TinyLm, Token, EOS};
use crate::error::{Error, Result};
use crate::optim::{clip_grad_norm, Adam, AdamConfig};
use crate::rng::rng_for;
use crate::scalar::Scalar;
use crate::seed_path;

/// A token sequence with a per-target loss weight: `weights[i]` scales the
/// loss of predicting `tokens[i + 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSequence {
    pub tokens: Vec<Token>,
    pub weights: Vec<f32>,
}

impl WeightedSequence {
    /// Every target counts, including the trailing EOS.
    pub fn full(text: &str, max_seq: usize) -> Self {
        let mut tokens = encode_with_bos(text);
        tokens.push(EOS);
        tokens.truncate(max_seq);
        let weights = vec![1.0; tokens.len() - 1];
        WeightedSequence { tokens, weights }
    }

    pub fn target_count(&self) -> f64 {
        self.weights.iter().map(|&w| w as f64).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Fraction of the corpus held out for evaluation (at least one sequence
    /// when the corpus has more than one).
    pub holdout_frac: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        LmTrainConfig {
            epochs: 3,
            lr: 3e-3,
            batch: 16,
            holdout_frac: 0.1,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean training loss per epoch (nats per weighted target).
    pub epoch_losses: Vec<f64>,
    /// Held-out loss before training and after each epoch.
    pub heldout_losses: Vec<f64>,
    pub steps: usize,
}

impl TrainLog {
    pub fn initial_heldout(&self) -> Option<f64> {
        self.heldout_losses.first().copied()
    }

    pub fn final_heldout(&self) -> Option<f64> {
        self.heldout_losses.last().copied()
    }
}

/// Weighted negative log-likelihood of one sequence; when `grad` is given the
/// gradient is accumulated into it. Returns `(nll_sum, weight_sum)`.
pub fn sequence_nll<S: Scalar>(
    lm: &TinyLm<S>,
    seq: &WeightedSequence,
    grad: Option<&mut [S]>,
) -> (f64, f64) {
    let first = match seq.weights.iter().position(|&w| w != 0.0) {
        Some(i) => i,
        None => return (0.0, 0.0),
    };
    let trace = lm.forward(&seq.tokens);
    let cache = lm.head(&trace, first);
    let lps = lm.target_logprobs(&trace, &cache);
    let weights = &seq.weights[first..];
    let nll: f64 = lps
        .iter()
        .zip(weights)
        .map(|(lp, &w)| -lp.as_f64() * w as f64)
        .sum();
    if let Some(grad) = grad {
        let coeffs: Vec<S> = weights.iter().map(|&w| S::of(-(w as f64))).collect();
        let dx2 = lm.head_backward(&trace, &cache, &coeffs, grad);
        lm.backward(&trace, &dx2, grad);
    }
    (nll, seq.target_count())
}

/// Mean loss per weighted target over a set of sequences.
pub fn mean_nll<S: Scalar>(lm: &TinyLm<S>, data: &[WeightedSequence]) -> f64 {
    let parts: Vec<(f64, f64)> = data.par_iter().map(|s| sequence_nll(lm, s, None)).collect();
    let (nll, n) = parts
        .iter()
        .fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    if n > 0.0 {
        nll / n
    } else {
        0.0
    }
}

/// Gradient of the mean weighted NLL over a batch. Per-example gradients are
/// computed in parallel and summed in batch order.
pub fn batch_gradient<S: Scalar>(lm: &TinyLm<S>, batch: &[&WeightedSequence]) -> (f64, Vec<S>) {
    let parts: Vec<(f64, f64, Vec<S>)> = batch
        .par_iter()
        .map(|s| {
            let mut g = vec![S::zero(); lm.num_params()];
            let (nll, n) = sequence_nll(lm, s, Some(&mut g));
            (nll, n, g)
        })
        .collect();
    let mut grad = vec![S::zero(); lm.num_params()];
    let (mut nll, mut n) = (0.0, 0.0);
    for (l, c, g) in parts {
        nll += l;
        n += c;
        for (a, b) in grad.iter_mut().zip(g) {
            *a = *a + b;
        }
    }
    if n > 0.0 {
        let inv = S::of(1.0 / n);
        for g in grad.iter_mut() {
            *g = *g * inv;
        }
        nll /= n;
    }
    (nll, grad)
}

/// Optimize the weighted NLL of `train`, evaluating `heldout` before training
/// and after every epoch.
pub fn fit<S: Scalar>(
    lm: &mut TinyLm<S>,
    train: &[WeightedSequence],
    heldout: &[WeightedSequence],
    cfg: &LmTrainConfig,
    stage: &'static str,
) -> Result<TrainLog> {
    let mut log = TrainLog::default();
    if !heldout.is_empty() {
        log.heldout_losses.push(mean_nll(lm, heldout));
    }
    if cfg.epochs == 0 || train.is_empty() {
        return Ok(log);
    }
    let mut opt = Adam::new(lm.num_params(), AdamConfig::default());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut last_finite = None;
    for epoch in 0..cfg.epochs {
        let mut rng = rng_for(cfg.seed, &seed_path![stage, epoch]);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let batch: Vec<&WeightedSequence> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, mut grad) = batch_gradient(lm, &batch);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    stage,
                    last_finite_loss: last_finite,
                });
            }
            last_finite = Some(loss);
            clip_grad_norm(&mut grad, cfg.grad_clip);
            opt.step(lm.params_mut(), &grad, cfg.lr);
            total += loss;
            batches += 1;
            log.steps += 1;
        }
        log.epoch_losses.push(total / batches.max(1) as f64);
        if !heldout.is_empty() {
            let h = mean_nll(lm, heldout);
            log::debug!(
                "{stage}: epoch {epoch} train {:.4} heldout {h:.4}",
                total / batches as f64
            );
            log.heldout_losses.push(h);
        }
    }
    Ok(log)
}

/// Pre-train on raw text: every string becomes `BOS text EOS`.
pub fn train_lm<S: Scalar>(
    lm: &mut TinyLm<S>,
    corpus: &[String],
    cfg: &LmTrainConfig,
) -> Result<TrainLog> {
    if corpus.is_empty() {
        return Err(Error::Invalid("training corpus is empty".into()));
    }
    let max_seq = lm.config().max_seq;
    let seqs: Vec<WeightedSequence> = corpus
        .iter()
        .map(|t| WeightedSequence::full(t, max_seq))
        .collect();
    let (train, heldout) = split_holdout(seqs, cfg.holdout_frac, cfg.seed);
    fit(lm, &train, &heldout, cfg, "train_lm")
}

/// Deterministic holdout split. With a single item it is used for both sides.
pub fn split_holdout<T: Clone>(mut items: Vec<T>, frac: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    if items.len() <= 1 {
        return (items.clone(), items);
    }
    items.shuffle(&mut rng_for(seed, &seed_path!["holdout"]));
    let n_hold = ((items.len() as f64 * frac).round() as usize).clamp(1, items.len() - 1);
    let heldout = items.split_off(items.len() - n_hold);
    (items, heldout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genbackend::tinylm::LmConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> LmConfig {
        LmConfig {
            embed_dim: 16,
            hidden_dim: 32,
            max_seq: 48,
        }
    }

    #[test]
    fn memorizes_repeated_string() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut lm: TinyLm<f32> = TinyLm::new(cfg(), &mut rng);
        let corpus = vec!["the quick brown fox jumps".to_string(); 8];
        let tc = LmTrainConfig {
            epochs: 60,
            lr: 1e-2,
            batch: 4,
            ..LmTrainConfig::default()
        };
        let log = train_lm(&mut lm, &corpus, &tc).unwrap();
        let fin = log.final_heldout().unwrap();
        assert!(fin < 0.1, "held-out loss {fin}");
        assert!(fin < log.initial_heldout().unwrap());
    }

    #[test]
    fn zero_epochs_leave_parameters_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut lm: TinyLm<f32> = TinyLm::new(cfg(), &mut rng);
        let before = lm.clone();
        let tc = LmTrainConfig {
            epochs: 0,
            ..LmTrainConfig::default()
        };
        train_lm(&mut lm, &["abc".to_string(), "def".to_string()], &tc).unwrap();
        assert_eq!(lm, before);
    }

    #[test]
    fn initial_loss_on_random_bytes_is_uniform_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lm: TinyLm<f64> = TinyLm::new(cfg(), &mut rng);
        let data: Vec<WeightedSequence> = (0..8)
            .map(|_| {
                let tokens: Vec<Token> = std::iter::once(super::super::tinylm::BOS)
                    .chain((0..30).map(|_| rng.gen_range(0..256u16)))
                    .collect();
                let weights = vec![1.0; tokens.len() - 1];
                WeightedSequence { tokens, weights }
            })
            .collect();
        let loss = mean_nll(&lm, &data);
        // ln 259 with the three special tokens; ln 256 ~ 5.545.
        assert!((loss - 256f64.ln()).abs() < 0.02, "{loss}");
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut lm: TinyLm<f32> = TinyLm::new(cfg(), &mut rng);
        assert!(train_lm(&mut lm, &[], &LmTrainConfig::default()).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut lm: TinyLm<f32> = TinyLm::new(cfg(), &mut rng);
        lm.params_mut()[0] = f32::NAN;
        let mut seq = WeightedSequence::full("abc", 48);
        seq.tokens[1] = 0; // embedding row 0 carries the NaN
        let err = fit(&mut lm, &[seq], &[], &LmTrainConfig::default(), "t").unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
    }

    #[test]
    fn holdout_split_is_disjoint_and_deterministic() {
        let items: Vec<u32> = (0..20).collect();
        let (a, b) = split_holdout(items.clone(), 0.1, 1);
        assert_eq!(b.len(), 2);
        assert_eq!(a.len(), 18);
        assert!(b.iter().all(|x| !a.contains(x)));
        assert_eq!(split_holdout(items, 0.1, 1), (a, b));
    }
}
