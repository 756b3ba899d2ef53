//! Reward model: a TinyLM backbone with a linear head on a pooled state,
//! trained with the ranked preference loss `-log sigmoid(r(x, y_c) - r(x, y_r))`.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genbackend::checkpoint::{Checkpoint, CheckpointKind};
use crate::genbackend::tinylm::{TinyLm, Token, BOS};
use crate::optim::{Adam, AdamConfig};
use crate::rng::rng_for;
use crate::scalar::{log_sigmoid, sigmoid, Scalar};
use crate::seed_path;
use crate::types::{ComparisonPair, ASSISTANT_PREFIX, HUMAN_PREFIX, TURN_SEPARATOR};

/// Anything that assigns a scalar quality to a response in context.
///
/// `context` is either a bare query or a rendered transcript ending with the
/// latest human turn (`"Human: ...\n\nAssistant: ...\n\nHuman: ..."`).
pub trait Scorer: Sync {
    fn score(&self, context: &str, response: &str) -> f64;
}

impl<T: Scorer + ?Sized> Scorer for &T {
    fn score(&self, context: &str, response: &str) -> f64 {
        (**self).score(context, response)
    }
}

/// Context rendered for scoring, ending with the open assistant prefix.
pub fn render_context(context: &str) -> String {
    let mut out = if context.starts_with(HUMAN_PREFIX) {
        context.to_string()
    } else {
        format!("{HUMAN_PREFIX}{context}")
    };
    out.push_str(TURN_SEPARATOR);
    out.push_str(ASSISTANT_PREFIX);
    out
}

/// Drop the oldest turn of a rendered transcript, if there is more than one.
fn drop_oldest_turn(text: &str) -> Option<&str> {
    [HUMAN_PREFIX, ASSISTANT_PREFIX]
        .iter()
        .filter_map(|p| text.find(&format!("{TURN_SEPARATOR}{p}")))
        .min()
        .map(|at| &text[at + TURN_SEPARATOR.len()..])
}

/// Byte tokens of `BOS context response`, at most `max_len` long. Oversized
/// inputs lose their oldest turns first (keeping the context within half the
/// budget), then the tail of the response.
pub fn encode_pair(context: &str, response: &str, max_len: usize) -> Vec<Token> {
    let budget = max_len.saturating_sub(1);
    let rendered = render_context(context);
    let mut ctx = rendered.as_str();
    if ctx.len() + response.len() > budget {
        while ctx.len() > budget / 2 {
            match drop_oldest_turn(ctx) {
                Some(rest) => ctx = rest,
                None => break,
            }
        }
        log::debug!("reward input truncated to {budget} bytes");
    }
    let ctx = ctx.as_bytes();
    let ctx = if ctx.len() > budget / 2 && ctx.len() + response.len() > budget {
        &ctx[ctx.len() - budget / 2..]
    } else {
        ctx
    };
    let resp = &response.as_bytes()[..response.len().min(budget - ctx.len())];
    let mut tokens = Vec::with_capacity(1 + ctx.len() + resp.len());
    tokens.push(BOS);
    tokens.extend(ctx.iter().chain(resp).map(|&b| b as Token));
    tokens
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    LastToken,
    Mean,
}

impl Pooling {
    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::LastToken => "last_token",
            Pooling::Mean => "mean",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "last_token" => Some(Pooling::LastToken),
            "mean" => Some(Pooling::Mean),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel<S> {
    backbone: TinyLm<S>,
    /// `embed_dim` weights followed by the bias.
    head: Vec<S>,
    pooling: Pooling,
    /// Longest token sequence scored; at most the backbone's `max_seq`.
    max_len: usize,
}

pub struct ScoredTrace<S> {
    trace: crate::genbackend::tinylm::Trace<S>,
    pooled: Vec<S>,
    pub score: S,
}

/// Gradient of a loss with respect to every reward-model parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct RmGrad<S> {
    pub backbone: Vec<S>,
    pub head: Vec<S>,
}

impl<S: Scalar> RmGrad<S> {
    fn zeros(rm: &RewardModel<S>) -> Self {
        RmGrad {
            backbone: vec![S::zero(); rm.backbone.num_params()],
            head: vec![S::zero(); rm.head.len()],
        }
    }

    fn add(&mut self, other: &RmGrad<S>) {
        for (a, &b) in self.backbone.iter_mut().zip(&other.backbone) {
            *a = *a + b;
        }
        for (a, &b) in self.head.iter_mut().zip(&other.head) {
            *a = *a + b;
        }
    }

    fn scale(&mut self, k: f64) {
        let k = S::of(k);
        for g in self.backbone.iter_mut().chain(self.head.iter_mut()) {
            *g = *g * k;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.backbone
            .iter()
            .chain(&self.head)
            .all(|g| g.is_finite())
    }
}

impl<S: Scalar> RewardModel<S> {
    /// Wrap a backbone with a zero head, so every initial score is 0.
    pub fn new(backbone: TinyLm<S>, pooling: Pooling) -> Self {
        let d = backbone.config().embed_dim;
        let max_len = backbone.config().max_seq;
        RewardModel {
            backbone,
            head: vec![S::zero(); d + 1],
            pooling,
            max_len,
        }
    }

    pub fn backbone(&self) -> &TinyLm<S> {
        &self.backbone
    }

    pub fn backbone_mut(&mut self) -> &mut TinyLm<S> {
        &mut self.backbone
    }

    pub fn head(&self) -> &[S] {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut [S] {
        &mut self.head
    }

    pub fn pooling(&self) -> Pooling {
        self.pooling
    }

    /// Add `c` to every score.
    pub fn shift_bias(&mut self, c: f64) {
        let b = self.head.last_mut().expect("head has a bias");
        *b = *b + S::of(c);
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn set_max_len(&mut self, max_len: usize) {
        self.max_len = max_len.clamp(2, self.backbone.config().max_seq);
    }

    pub fn encode(&self, context: &str, response: &str) -> Vec<Token> {
        encode_pair(context, response, self.max_len)
    }

    fn pooled(&self, x2: &[S], len: usize) -> Vec<S> {
        let d = self.backbone.config().embed_dim;
        match self.pooling {
            Pooling::LastToken => x2[(len - 1) * d..len * d].to_vec(),
            Pooling::Mean => {
                let mut out = vec![S::zero(); d];
                for row in x2.chunks_exact(d) {
                    for (o, &v) in out.iter_mut().zip(row) {
                        *o = *o + v;
                    }
                }
                let inv = S::of(1.0 / len as f64);
                out.iter_mut().for_each(|o| *o = *o * inv);
                out
            }
        }
    }

    fn head_value(&self, pooled: &[S]) -> S {
        let d = pooled.len();
        pooled
            .iter()
            .zip(&self.head[..d])
            .fold(self.head[d], |acc, (&p, &w)| acc + p * w)
    }

    pub fn score_tokens(&self, tokens: &[Token]) -> S {
        let trace = self.backbone.forward(tokens);
        self.head_value(&self.pooled(&trace.x2, tokens.len()))
    }

    /// Forward pass kept for a later [`RewardModel::accumulate_grad`].
    pub fn forward_scored(&self, tokens: &[Token]) -> ScoredTrace<S> {
        let trace = self.backbone.forward(tokens);
        let pooled = self.pooled(&trace.x2, tokens.len());
        let score = self.head_value(&pooled);
        ScoredTrace {
            trace,
            pooled,
            score,
        }
    }

    /// Add `coeff * d score / d params` to `grad`.
    pub fn accumulate_grad(&self, st: &ScoredTrace<S>, coeff: S, grad: &mut RmGrad<S>) {
        let d = self.backbone.config().embed_dim;
        let len = st.trace.len();
        for (g, &p) in grad.head.iter_mut().zip(&st.pooled) {
            *g = *g + coeff * p;
        }
        grad.head[d] = grad.head[d] + coeff;
        let mut dx2 = vec![S::zero(); len * d];
        match self.pooling {
            Pooling::LastToken => {
                for (o, &w) in dx2[(len - 1) * d..].iter_mut().zip(&self.head[..d]) {
                    *o = coeff * w;
                }
            }
            Pooling::Mean => {
                let k = coeff * S::of(1.0 / len as f64);
                for row in dx2.chunks_exact_mut(d) {
                    for (o, &w) in row.iter_mut().zip(&self.head[..d]) {
                        *o = k * w;
                    }
                }
            }
        }
        self.backbone.backward(&st.trace, &dx2, &mut grad.backbone);
    }

    pub fn cast<T: Scalar>(&self) -> RewardModel<T> {
        RewardModel {
            backbone: self.backbone.cast(),
            head: self.head.iter().map(|h| T::of(h.as_f64())).collect(),
            pooling: self.pooling,
            max_len: self.max_len,
        }
    }

    pub fn to_checkpoint(&self, role: &str) -> Checkpoint {
        let mut ck = Checkpoint::from_lm(CheckpointKind::RewardModel, &self.backbone);
        ck.head = self.head.iter().map(|h| h.as_f64() as f32).collect();
        ck.metadata.insert("role".into(), role.into());
        ck.metadata
            .insert("pooling".into(), self.pooling.as_str().into());
        ck.metadata
            .insert("max_len".into(), self.max_len.to_string());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> std::result::Result<Self, String> {
        if ck.kind != CheckpointKind::RewardModel {
            return Err(format!("expected a reward model, found {:?}", ck.kind));
        }
        let backbone = ck.lm::<S>().ok_or("backbone size mismatch")?;
        if ck.head.len() != backbone.config().embed_dim + 1 {
            return Err(format!("head has {} values", ck.head.len()));
        }
        let pooling = match ck.metadata.get("pooling") {
            Some(p) => Pooling::parse(p).ok_or_else(|| format!("unknown pooling `{p}`"))?,
            None => Pooling::LastToken,
        };
        let mut rm = RewardModel::new(backbone, pooling);
        rm.head = ck.head.iter().map(|&h| S::of(h as f64)).collect();
        if let Some(m) = ck.metadata.get("max_len") {
            rm.set_max_len(m.parse().map_err(|_| format!("bad max_len `{m}`"))?);
        }
        Ok(rm)
    }

    pub fn save(&self, path: impl AsRef<Path>, role: &str) -> Result<()> {
        self.to_checkpoint(role).save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let ck = Checkpoint::load(path)?;
        RewardModel::from_checkpoint(&ck).map_err(|message| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        })
    }
}

impl<S: Scalar> Scorer for RewardModel<S> {
    fn score(&self, context: &str, response: &str) -> f64 {
        self.score_tokens(&self.encode(context, response)).as_f64()
    }
}

/// Mean preference loss over `batch` and its gradient.
pub fn preference_loss<S: Scalar>(
    rm: &RewardModel<S>,
    batch: &[ComparisonPair],
) -> Result<(f64, RmGrad<S>)> {
    if batch.is_empty() {
        return Err(Error::Invalid("preference loss of an empty batch".into()));
    }
    let parts: Vec<(f64, RmGrad<S>)> = batch
        .par_iter()
        .map(|p| {
            let mut g = RmGrad::zeros(rm);
            let chosen = rm.forward_scored(&rm.encode(&p.query, &p.chosen));
            let rejected = rm.forward_scored(&rm.encode(&p.query, &p.rejected));
            let diff = chosen.score.as_f64() - rejected.score.as_f64();
            // d/d diff of -log sigmoid(diff)
            let k = -sigmoid(-diff);
            rm.accumulate_grad(&chosen, S::of(k), &mut g);
            rm.accumulate_grad(&rejected, S::of(-k), &mut g);
            (-log_sigmoid(diff), g)
        })
        .collect();
    let mut grad = RmGrad::zeros(rm);
    let mut loss = 0.0;
    for (i, (l, g)) in parts.iter().enumerate() {
        if !l.is_finite() {
            return Err(Error::NonFinite(format!(
                "preference loss of pair {i} (query `{}`) is {l}",
                batch[i].query_id
            )));
        }
        loss += l;
        grad.add(g);
    }
    let n = batch.len() as f64;
    grad.scale(1.0 / n);
    Ok((loss / n, grad))
}

/// Fraction of pairs scored strictly in favour of the chosen response.
pub fn pairwise_accuracy(scorer: &dyn Scorer, pairs: &[ComparisonPair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let correct = pairs
        .par_iter()
        .filter(|p| scorer.score(&p.query, &p.chosen) > scorer.score(&p.query, &p.rejected))
        .count();
    correct as f64 / pairs.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmTrainConfig {
    pub epochs: usize,
    /// Learning rate quoted for a backbone of width `reference_width`.
    pub lr: f64,
    /// The applied rate is `lr * reference_width / embed_dim`.
    pub reference_width: usize,
    pub batch: usize,
    pub max_seq: usize,
    pub valid_frac: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl RmTrainConfig {
    pub fn full_scale() -> Self {
        RmTrainConfig {
            epochs: 1,
            lr: 1e-5,
            reference_width: 4096,
            batch: 64,
            max_seq: 1024,
            valid_frac: 0.1,
            grad_clip: 1.0,
            seed: 0,
        }
    }

    pub fn effective_lr(&self, embed_dim: usize) -> f64 {
        self.lr * self.reference_width as f64 / embed_dim.max(1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.max_seq < 2 || self.lr.is_nan() || self.lr < 0.0 {
            return Err(Error::Config(
                "reward model training needs batch > 0, max_seq >= 2 and lr >= 0".into(),
            ));
        }
        Ok(())
    }
}

impl Default for RmTrainConfig {
    fn default() -> Self {
        RmTrainConfig {
            epochs: 2,
            batch: 16,
            max_seq: 256,
            ..RmTrainConfig::full_scale()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RmTrainLog {
    pub step_losses: Vec<f64>,
    pub epoch_valid_accuracy: Vec<f64>,
    pub initial_valid_accuracy: Option<f64>,
}

impl RmTrainLog {
    pub fn final_valid_accuracy(&self) -> Option<f64> {
        self.epoch_valid_accuracy
            .last()
            .copied()
            .or(self.initial_valid_accuracy)
    }
}

fn triple(p: &ComparisonPair) -> (&str, &str, &str) {
    (&p.query, &p.chosen, &p.rejected)
}

pub fn train_rm<S: Scalar>(
    rm: &mut RewardModel<S>,
    train: &[ComparisonPair],
    valid: &[ComparisonPair],
    cfg: &RmTrainConfig,
) -> Result<RmTrainLog> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("no comparison pairs to train on".into()));
    }
    let train_keys: HashSet<_> = train.iter().map(triple).collect();
    if let Some(p) = valid.iter().find(|p| train_keys.contains(&triple(p))) {
        return Err(Error::Precondition {
            stage: "train-rm".into(),
            message: format!("pair for query `{}` is in both train and valid", p.query_id),
        });
    }
    rm.set_max_len(cfg.max_seq);
    let lr = cfg.effective_lr(rm.backbone.config().embed_dim);
    let mut log = RmTrainLog::default();
    if !valid.is_empty() {
        log.initial_valid_accuracy = Some(pairwise_accuracy(rm, valid));
    }
    let mut opt_b = Adam::new(rm.backbone.num_params(), AdamConfig::default());
    let mut opt_h = Adam::new(rm.head.len(), AdamConfig::default());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut last_finite = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng_for(cfg.seed, &seed_path!["train-rm", epoch]));
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<ComparisonPair> = chunk.iter().map(|&i| train[i].clone()).collect();
            let (loss, mut grad) = match preference_loss(rm, &batch) {
                Ok(r) => r,
                Err(Error::NonFinite(m)) => {
                    log::error!("train-rm: {m}");
                    return Err(Error::Divergence {
                        stage: "train-rm",
                        last_finite_loss: last_finite,
                    });
                }
                Err(e) => return Err(e),
            };
            if !grad.is_finite() {
                return Err(Error::Divergence {
                    stage: "train-rm",
                    last_finite_loss: last_finite,
                });
            }
            last_finite = Some(loss);
            log.step_losses.push(loss);
            let norm_sq: f64 = grad
                .backbone
                .iter()
                .chain(&grad.head)
                .map(|g| g.as_f64() * g.as_f64())
                .sum();
            if norm_sq.sqrt() > cfg.grad_clip {
                grad.scale(cfg.grad_clip / norm_sq.sqrt());
            }
            opt_b.step(rm.backbone.params_mut(), &grad.backbone, lr);
            opt_h.step(&mut rm.head, &grad.head, lr);
        }
        if !valid.is_empty() {
            let acc = pairwise_accuracy(rm, valid);
            log::info!(
                "train-rm: epoch {epoch} loss {:.4} valid accuracy {acc:.3}",
                last_finite.unwrap_or(f64::NAN)
            );
            log.epoch_valid_accuracy.push(acc);
        }
    }
    Ok(log)
}

/// Train an auxiliary reward model on out-of-pipeline comparisons. The result
/// is tagged `asis` when saved through [`save_rm`].
pub fn train_asis_rm<S: Scalar>(
    backbone: TinyLm<S>,
    pairs: &[ComparisonPair],
    cfg: &RmTrainConfig,
) -> Result<(RewardModel<S>, RmTrainLog)> {
    if pairs.is_empty() {
        return Err(Error::Invalid(
            "as-is reward model needs comparison pairs".into(),
        ));
    }
    let (train, valid) = crate::genbackend::lm_train::split_holdout(
        pairs.to_vec(),
        cfg.valid_frac,
        crate::rng::derive_seed(cfg.seed, &seed_path!["asis-split"]),
    );
    let valid = disjoint_valid(&train, valid);
    let mut rm = RewardModel::new(backbone, Pooling::LastToken);
    let log = train_rm(&mut rm, &train, &valid, cfg)?;
    Ok((rm, log))
}

/// Remove validation pairs whose (query, chosen, rejected) also occur in train.
pub fn disjoint_valid(train: &[ComparisonPair], valid: Vec<ComparisonPair>) -> Vec<ComparisonPair> {
    let keys: HashSet<_> = train.iter().map(triple).collect();
    valid
        .into_iter()
        .filter(|p| !keys.contains(&triple(p)))
        .collect()
}

/// Checkpoint metadata identifying an RM's purpose.
pub fn role_of(ck: &Checkpoint) -> Option<&str> {
    ck.metadata.get("role").map(String::as_str)
}

pub fn save_rm<S: Scalar>(
    rm: &RewardModel<S>,
    path: impl AsRef<Path>,
    role: &str,
    extra: &BTreeMap<String, String>,
) -> Result<()> {
    let mut ck = rm.to_checkpoint(role);
    ck.metadata.extend(extra.clone());
    ck.save(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genbackend::tinylm::LmConfig;

    fn small() -> RewardModel<f64> {
        let mut rng = rng_for(3, &[]);
        let lm = TinyLm::new(
            LmConfig {
                embed_dim: 6,
                hidden_dim: 8,
                max_seq: 64,
            },
            &mut rng,
        );
        RewardModel::new(lm, Pooling::LastToken)
    }

    fn pair(c: &str, r: &str) -> ComparisonPair {
        ComparisonPair::new("q", "hi", c, r, "A", "B").unwrap()
    }

    #[test]
    fn zero_head_scores_zero_and_loss_is_ln2() {
        let rm = small();
        assert_eq!(rm.score("hi", "there"), 0.0);
        let (loss, _) = preference_loss(&rm, &[pair("a", "b"), pair("c", "d")]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn loss_at_unit_difference() {
        let mut rm = small();
        // Score is linear in the bias only when the pooled states are equal;
        // instead set the head so that chosen minus rejected is exactly 1.
        let d = rm.backbone.config().embed_dim;
        let tc = rm.encode("hi", "a");
        let tr = rm.encode("hi", "b");
        let pc = rm.pooled(&rm.backbone.forward(&tc).x2, tc.len());
        let pr = rm.pooled(&rm.backbone.forward(&tr).x2, tr.len());
        let delta: Vec<f64> = pc.iter().zip(&pr).map(|(a, b)| a - b).collect();
        let norm2: f64 = delta.iter().map(|x| x * x).sum();
        for (h, x) in rm.head[..d].iter_mut().zip(&delta) {
            *h = x / norm2;
        }
        let (loss, _) = preference_loss(&rm, &[pair("a", "b")]).unwrap();
        assert!((loss - 0.313_261_687_518_222_8).abs() < 1e-9, "{loss}");
    }

    #[test]
    fn encoding_fits_and_prefers_recent_turns() {
        let ctx = format!(
            "Human: {}\n\nAssistant: {}\n\nHuman: latest",
            "a".repeat(40),
            "b".repeat(40)
        );
        let toks = encode_pair(&ctx, &"y".repeat(100), 64);
        assert_eq!(toks.len(), 64);
        let text = crate::genbackend::tinylm::decode(&toks[1..]);
        assert!(text.starts_with("Human: latest\n\nAssistant: "), "{text}");
        let short = encode_pair("q", "r", 64);
        assert_eq!(
            crate::genbackend::tinylm::decode(&short[1..]),
            "Human: q\n\nAssistant: r"
        );
    }

    #[test]
    fn bias_shift_moves_scores_uniformly() {
        let mut rm = small();
        rm.head[0] = 0.7;
        let a = rm.score("hi", "x");
        rm.shift_bias(2.5);
        assert!((rm.score("hi", "x") - a - 2.5).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rm = small().cast::<f32>();
        rm.head[2] = 1.5;
        let ck = rm.to_checkpoint("asis");
        assert_eq!(role_of(&ck), Some("asis"));
        let back =
            RewardModel::<f32>::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap())
                .unwrap();
        assert_eq!(back, rm);
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        let mut rm = small();
        let p = pair("a", "b");
        let err = train_rm(
            &mut rm,
            std::slice::from_ref(&p),
            std::slice::from_ref(&p),
            &RmTrainConfig::default(),
        );
        assert!(matches!(err, Err(Error::Precondition { .. })));
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut rm = small();
        let before = rm.clone();
        let cfg = RmTrainConfig {
            lr: 0.0,
            ..RmTrainConfig::default()
        };
        train_rm(&mut rm, &[pair("a", "b"), pair("c", "d")], &[], &cfg).unwrap();
        assert_eq!(rm, before);
    }
}
