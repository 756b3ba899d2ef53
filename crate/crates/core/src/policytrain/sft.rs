//! Supervised fine-tuning on demonstrations, with the loss restricted to
//! assistant turns.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genbackend::lm_train::{fit, split_holdout, LmTrainConfig, TrainLog, WeightedSequence};
use crate::genbackend::tinylm::{TinyLm, Token, BOS, EOS};
use crate::scalar::Scalar;
use crate::types::{Conversation, Demonstration, Speaker, TURN_SEPARATOR};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub epochs: usize,
    /// Learning rate quoted for a model of width `reference_width`.
    pub lr: f64,
    pub reference_width: usize,
    pub batch: usize,
    pub max_seq: usize,
    pub holdout_frac: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl SftConfig {
    pub fn full_scale() -> Self {
        SftConfig {
            epochs: 3,
            lr: 2e-5,
            reference_width: 4096,
            batch: 128,
            max_seq: 512,
            holdout_frac: 0.1,
            grad_clip: 1.0,
            seed: 0,
        }
    }

    pub fn effective_lr(&self, embed_dim: usize) -> f64 {
        self.lr * self.reference_width as f64 / embed_dim.max(1) as f64
    }
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            batch: 16,
            max_seq: 256,
            ..SftConfig::full_scale()
        }
    }
}

/// `BOS Human: q\n\nAssistant: a ... EOS` with weight 1 on the targets that
/// are assistant-turn bytes or the final EOS, 0 elsewhere.
pub fn demo_sequence(conv: &Conversation, max_seq: usize) -> WeightedSequence {
    let mut tokens: Vec<Token> = vec![BOS];
    // Weight of each token as a prediction target.
    let mut target_weight: Vec<f32> = vec![0.0];
    for (i, turn) in conv.turns().iter().enumerate() {
        let mut push = |bytes: &[u8], w: f32| {
            for &b in bytes {
                tokens.push(b as Token);
                target_weight.push(w);
            }
        };
        if i > 0 {
            push(TURN_SEPARATOR.as_bytes(), 0.0);
        }
        push(turn.speaker().prefix().as_bytes(), 0.0);
        let w = if turn.speaker() == Speaker::Assistant {
            1.0
        } else {
            0.0
        };
        push(turn.text().as_bytes(), w);
    }
    tokens.push(EOS);
    target_weight.push(1.0);
    tokens.truncate(max_seq.max(2));
    target_weight.truncate(tokens.len());
    WeightedSequence {
        weights: target_weight[1..].to_vec(),
        tokens,
    }
}

/// Fine-tune `policy` on the demonstrations; returns the per-epoch log,
/// including held-out loss before training and after every epoch.
pub fn train_sft<S: Scalar>(
    policy: &mut TinyLm<S>,
    demos: &[Demonstration],
    cfg: &SftConfig,
) -> Result<TrainLog> {
    if demos.is_empty() {
        return Err(Error::Invalid("no demonstrations to fine-tune on".into()));
    }
    let max_seq = cfg.max_seq.min(policy.config().max_seq);
    let seqs: Vec<WeightedSequence> = demos
        .iter()
        .map(|d| demo_sequence(d.conversation(), max_seq))
        .collect();
    let (train, heldout) = split_holdout(seqs, cfg.holdout_frac, cfg.seed);
    let lm_cfg = LmTrainConfig {
        epochs: cfg.epochs,
        lr: cfg.effective_lr(policy.config().embed_dim),
        batch: cfg.batch,
        holdout_frac: cfg.holdout_frac,
        grad_clip: cfg.grad_clip,
        seed: cfg.seed,
    };
    fit(policy, &train, &heldout, &lm_cfg, "train-sft")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genbackend::tinylm::decode;
    use crate::types::Turn;

    #[test]
    fn only_assistant_bytes_and_eos_are_targets() {
        let conv = Conversation::new(vec![
            Turn::human("hi").unwrap(),
            Turn::assistant("yo").unwrap(),
            Turn::human("more").unwrap(),
            Turn::assistant("ok").unwrap(),
        ])
        .unwrap();
        let seq = demo_sequence(&conv, 512);
        assert_eq!(seq.weights.len(), seq.tokens.len() - 1);
        let targets: Vec<Token> = seq.tokens[1..]
            .iter()
            .zip(&seq.weights)
            .filter(|(_, &w)| w > 0.0)
            .map(|(&t, _)| t)
            .collect();
        assert_eq!(targets.len(), 5);
        assert_eq!(decode(&targets), "yook");
        assert_eq!(*targets.last().unwrap(), EOS);
        assert_eq!(
            decode(&seq.tokens),
            "Human: hi\n\nAssistant: yo\n\nHuman: more\n\nAssistant: ok"
        );
    }

    #[test]
    fn truncation_keeps_lengths_consistent() {
        let conv = Conversation::new(vec![
            Turn::human("hello there").unwrap(),
            Turn::assistant("general").unwrap(),
        ])
        .unwrap();
        let seq = demo_sequence(&conv, 10);
        assert_eq!(seq.tokens.len(), 10);
        assert_eq!(seq.weights.len(), 9);
        assert!(seq.weights.iter().all(|&w| w == 0.0));
    }
}
