//! PPO against a reward model with a KL penalty toward the frozen starting
//! policy.
//!
//! Each episode's shaped reward is `-kl_coeff * (log pi - log rho)` per token
//! with the reward-model score added at the last token. Advantages come from
//! GAE with a linear value head on the policy's final hidden states; the head
//! reads those states detached, so only the surrogate moves the policy.

use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genbackend::sampling::apply_stop;
use crate::genbackend::tinylm::{decode, encode_with_bos, TinyLm, Token};
use crate::genbackend::{sample_tokens, SampleParams};
use crate::optim::{clip_grad_norm, cosine_lr, Adam, AdamConfig};
use crate::rm::{render_context, Scorer};
use crate::rng::{derive_seed, rng_for};
use crate::scalar::Scalar;
use crate::seed_path;
use crate::synthcmp::turn_stops;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMode {
    /// Penalty on every token, reward-model score on the last.
    PerToken,
    /// Whole-sequence penalty folded into the terminal reward.
    Sequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub episodes: usize,
    pub prompts: usize,
    pub batch: usize,
    pub minibatch: usize,
    pub inner_epochs: usize,
    pub rollout_max_tokens: usize,
    pub temperature: f64,
    pub clip_ratio: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub kl_coeff: f64,
    pub kl_mode: KlMode,
    /// Peak learning rate quoted for a model of width `reference_width`.
    pub lr: f64,
    pub lr_min: f64,
    pub reference_width: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub reward_normalization: bool,
    pub whiten_advantages: bool,
    pub value_loss_coeff: f64,
    pub value_lr: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl PpoConfig {
    pub fn full_scale() -> Self {
        PpoConfig {
            episodes: 80_000,
            prompts: 20_000,
            batch: 512,
            minibatch: 32,
            inner_epochs: 4,
            rollout_max_tokens: 128,
            temperature: 1.0,
            clip_ratio: 0.2,
            gamma: 1.0,
            gae_lambda: 0.95,
            kl_coeff: 0.05,
            kl_mode: KlMode::PerToken,
            lr: 1e-6,
            lr_min: 8e-7,
            reference_width: 4096,
            beta1: 0.9,
            beta2: 0.95,
            reward_normalization: false,
            whiten_advantages: true,
            value_loss_coeff: 0.5,
            value_lr: 1e-2,
            grad_clip: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("ppo: {m}")));
        if !(self.clip_ratio > 0.0 && self.clip_ratio < 1.0) {
            return bad("clip_ratio must lie in (0, 1)");
        }
        if self.kl_coeff < 0.0 {
            return bad("kl_coeff must be non-negative");
        }
        if self.minibatch == 0 || self.batch == 0 || !self.batch.is_multiple_of(self.minibatch) {
            return bad("minibatch must divide batch");
        }
        if self.rollout_max_tokens == 0 || self.temperature <= 0.0 {
            return bad("rollout_max_tokens and temperature must be positive");
        }
        if self.lr_min > self.lr {
            return bad("lr_min exceeds lr");
        }
        Ok(())
    }

    fn scaled(&self, lr: f64, embed_dim: usize) -> f64 {
        lr * self.reference_width as f64 / embed_dim.max(1) as f64
    }

    pub fn iterations(&self) -> usize {
        self.episodes / self.batch.max(1)
    }
}

/// Full-scale counts divided by 100 with their ratios kept; shorter rollouts.
impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            episodes: 800,
            prompts: 200,
            batch: 32,
            minibatch: 8,
            rollout_max_tokens: 48,
            ..PpoConfig::full_scale()
        }
    }
}

/// Linear value estimate on a final hidden state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueHead {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl ValueHead {
    pub fn zeros(dim: usize) -> Self {
        ValueHead {
            weights: vec![0.0; dim],
            bias: 0.0,
        }
    }

    pub fn predict<S: Scalar>(&self, state: &[S]) -> f64 {
        state
            .iter()
            .zip(&self.weights)
            .fold(self.bias, |acc, (s, w)| acc + s.as_f64() * w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub prompt: String,
    /// `BOS` plus the rendered prompt, ending with the open assistant prefix.
    pub prompt_tokens: Vec<Token>,
    pub response: Vec<Token>,
    pub response_text: String,
    /// Per-token log-probabilities under the policy at rollout time.
    pub logp: Vec<f64>,
    pub ref_logp: Vec<f64>,
    /// Reward-model score of the response, unnormalized.
    pub reward: f64,
    pub values: Vec<f64>,
}

impl Episode {
    /// Sequence KL estimate `sum_t log pi(y_t) - log rho(y_t)`.
    pub fn kl(&self) -> f64 {
        self.logp
            .iter()
            .zip(&self.ref_logp)
            .map(|(a, b)| a - b)
            .sum()
    }

    /// Per-token rewards fed to advantage estimation.
    pub fn shaped_rewards(&self, reward: f64, kl_coeff: f64, mode: KlMode) -> Vec<f64> {
        let n = self.response.len();
        let mut r: Vec<f64> = match mode {
            KlMode::PerToken => self
                .logp
                .iter()
                .zip(&self.ref_logp)
                .map(|(a, b)| -kl_coeff * (a - b))
                .collect(),
            KlMode::Sequence => {
                let mut r = vec![0.0; n];
                r[n - 1] = -kl_coeff * self.kl();
                r
            }
        };
        r[n - 1] += reward;
        r
    }

    fn full_tokens(&self) -> Vec<Token> {
        let mut t = self.prompt_tokens.clone();
        t.extend_from_slice(&self.response);
        t
    }
}

/// Target log-probabilities of the response tokens and the hidden states
/// that predict them.
fn response_logprobs<S: Scalar>(
    lm: &TinyLm<S>,
    full: &[Token],
    start: usize,
) -> (Vec<f64>, Vec<Vec<S>>) {
    let d = lm.config().embed_dim;
    let trace = lm.forward(full);
    let cache = lm.head(&trace, start);
    let lps = lm
        .target_logprobs(&trace, &cache)
        .iter()
        .map(|x| x.as_f64())
        .collect();
    let states = (start..full.len() - 1)
        .map(|i| trace.x2[i * d..(i + 1) * d].to_vec())
        .collect();
    (lps, states)
}

/// Keep BOS and the most recent prompt tokens so that a full rollout fits.
fn fit_prompt(prompt: &str, max_seq: usize, max_new: usize) -> Vec<Token> {
    let tokens = encode_with_bos(prompt);
    let room = max_seq.saturating_sub(max_new).max(2);
    if tokens.len() <= room {
        return tokens;
    }
    let mut out = vec![tokens[0]];
    out.extend_from_slice(&tokens[tokens.len() - (room - 1)..]);
    out
}

/// Sample one response per prompt; `seeds[i]` drives prompt `i`.
pub fn rollout<S: Scalar>(
    policy: &TinyLm<S>,
    reference: &TinyLm<S>,
    value: &ValueHead,
    scorer: &dyn Scorer,
    prompts: &[String],
    seeds: &[u64],
    cfg: &PpoConfig,
) -> Vec<Episode> {
    let max_seq = policy.config().max_seq;
    let max_new = cfg.rollout_max_tokens.min(max_seq - 2);
    prompts
        .par_iter()
        .zip(seeds)
        .filter_map(|(prompt, &seed)| {
            let prompt_tokens = fit_prompt(&render_context(prompt), max_seq, max_new);
            let params = SampleParams {
                max_tokens: max_new,
                temperature: cfg.temperature,
                top_p: 1.0,
            };
            let sample =
                sample_tokens(policy, &prompt_tokens, params, &[], &mut rng_for(seed, &[]));
            if sample.tokens.is_empty() {
                log::warn!("empty rollout for prompt `{prompt}`");
                return None;
            }
            let mut full = prompt_tokens.clone();
            full.extend_from_slice(&sample.tokens);
            let start = prompt_tokens.len() - 1;
            let (logp, states) = response_logprobs(policy, &full, start);
            let (ref_logp, _) = response_logprobs(reference, &full, start);
            let mut text = decode(&sample.tokens);
            apply_stop(&mut text, &turn_stops());
            let text = text.trim().to_string();
            let reward = scorer.score(prompt, &text);
            Some(Episode {
                prompt: prompt.clone(),
                prompt_tokens,
                values: states.iter().map(|s| value.predict(s)).collect(),
                response: sample.tokens,
                response_text: text,
                logp,
                ref_logp,
                reward,
            })
        })
        .collect()
}

/// An episode reduced to what the update needs.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedEpisode {
    pub tokens: Vec<Token>,
    /// Index of the state predicting the first response token.
    pub start: usize,
    pub old_logp: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// Generalized advantage estimates and returns for one reward sequence.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let next_v = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next_v - values[t];
        next_adv = delta + gamma * lambda * next_adv;
        adv[t] = next_adv;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Rewards actually fed to advantage estimation, one per episode.
pub fn episode_rewards(episodes: &[Episode], normalize: bool) -> Vec<f64> {
    let raw: Vec<f64> = episodes.iter().map(|e| e.reward).collect();
    if !normalize || raw.len() < 2 {
        return raw;
    }
    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let std = (raw.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    raw.iter().map(|r| (r - mean) / std.max(1e-8)).collect()
}

pub fn prepare(episodes: &[Episode], cfg: &PpoConfig) -> Vec<PreparedEpisode> {
    let rewards = episode_rewards(episodes, cfg.reward_normalization);
    let mut out: Vec<PreparedEpisode> = episodes
        .iter()
        .zip(rewards)
        .map(|(e, r)| {
            let shaped = e.shaped_rewards(r, cfg.kl_coeff, cfg.kl_mode);
            let (advantages, returns) = gae(&shaped, &e.values, cfg.gamma, cfg.gae_lambda);
            PreparedEpisode {
                tokens: e.full_tokens(),
                start: e.prompt_tokens.len() - 1,
                old_logp: e.logp.clone(),
                advantages,
                returns,
            }
        })
        .collect();
    if cfg.whiten_advantages {
        let all: Vec<f64> = out
            .iter()
            .flat_map(|p| p.advantages.iter().copied())
            .collect();
        let n = all.len().max(1) as f64;
        let mean = all.iter().sum::<f64>() / n;
        let std = (all.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        if std > 1e-8 {
            for p in out.iter_mut() {
                p.advantages.iter_mut().for_each(|a| *a = (*a - mean) / std);
            }
        }
    }
    out
}

/// Statistics of one call to [`ppo_update`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub clip_frac: f64,
    pub first_minibatch_clip_frac: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub steps: usize,
}

/// Optimizer state carried across updates.
pub struct PpoOptim {
    policy: Adam,
    value: Adam,
    steps: usize,
    total_steps: usize,
}

impl PpoOptim {
    pub fn new<S: Scalar>(policy: &TinyLm<S>, cfg: &PpoConfig) -> Self {
        let adam = AdamConfig {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            ..AdamConfig::default()
        };
        PpoOptim {
            policy: Adam::new(policy.num_params(), adam),
            value: Adam::new(policy.config().embed_dim + 1, adam),
            steps: 0,
            total_steps: (cfg.iterations() * cfg.inner_epochs * (cfg.batch / cfg.minibatch.max(1)))
                .max(1),
        }
    }

    pub fn current_lr<S: Scalar>(&self, policy: &TinyLm<S>, cfg: &PpoConfig) -> f64 {
        let d = policy.config().embed_dim;
        cosine_lr(
            cfg.scaled(cfg.lr, d),
            cfg.scaled(cfg.lr_min, d),
            self.steps,
            self.total_steps,
        )
    }
}

struct EpisodeGrad<S> {
    grad: Vec<S>,
    value_grad: Vec<f64>,
    policy_loss: f64,
    value_loss: f64,
    clipped: usize,
    tokens: usize,
}

fn episode_grad<S: Scalar>(
    policy: &TinyLm<S>,
    value: &ValueHead,
    ep: &PreparedEpisode,
    cfg: &PpoConfig,
) -> EpisodeGrad<S> {
    let d = policy.config().embed_dim;
    let trace = policy.forward(&ep.tokens);
    let cache = policy.head(&trace, ep.start);
    let new_logp = policy.target_logprobs(&trace, &cache);
    let eps = cfg.clip_ratio;
    let mut coeffs = Vec::with_capacity(new_logp.len());
    let (mut policy_loss, mut clipped) = (0.0, 0usize);
    for ((lp, &old), &a) in new_logp.iter().zip(&ep.old_logp).zip(&ep.advantages) {
        let ratio = (lp.as_f64() - old).exp();
        if (ratio - 1.0).abs() > eps {
            clipped += 1;
        }
        let unclipped = ratio * a;
        let clipped_obj = ratio.clamp(1.0 - eps, 1.0 + eps) * a;
        policy_loss -= unclipped.min(clipped_obj);
        // Gradient flows only through the unclipped branch when it is the minimum.
        let active = unclipped <= clipped_obj;
        coeffs.push(S::of(if active { -unclipped } else { 0.0 }));
    }
    let mut grad = vec![S::zero(); policy.num_params()];
    if coeffs.iter().any(|c| *c != S::zero()) {
        let dx2 = policy.head_backward(&trace, &cache, &coeffs, &mut grad);
        policy.backward(&trace, &dx2, &mut grad);
    }
    let mut value_grad = vec![0.0; d + 1];
    let mut value_loss = 0.0;
    for (r, &ret) in ep.returns.iter().enumerate() {
        let i = ep.start + r;
        let state = &trace.x2[i * d..(i + 1) * d];
        let err = value.predict(state) - ret;
        value_loss += 0.5 * err * err;
        for (g, s) in value_grad.iter_mut().zip(state) {
            *g += err * s.as_f64();
        }
        value_grad[d] += err;
    }
    EpisodeGrad {
        grad,
        value_grad,
        policy_loss,
        value_loss,
        clipped,
        tokens: new_logp.len(),
    }
}

/// `inner_epochs` passes of clipped-surrogate minibatch steps over `batch`.
/// Losses are averaged over the response tokens of each minibatch.
pub fn ppo_update<S: Scalar>(
    policy: &mut TinyLm<S>,
    value: &mut ValueHead,
    batch: &[PreparedEpisode],
    opt: &mut PpoOptim,
    cfg: &PpoConfig,
    shuffle_seed: u64,
) -> Result<UpdateStats> {
    let mut stats = UpdateStats::default();
    let (mut clipped_total, mut tokens_total) = (0usize, 0usize);
    let (mut pl_sum, mut vl_sum, mut mb_count) = (0.0, 0.0, 0usize);
    let mut order: Vec<usize> = (0..batch.len()).collect();
    for epoch in 0..cfg.inner_epochs {
        order.shuffle(&mut rng_for(
            shuffle_seed,
            &seed_path!["ppo-shuffle", epoch],
        ));
        for chunk in order.chunks(cfg.minibatch.max(1)) {
            let parts: Vec<EpisodeGrad<S>> = chunk
                .par_iter()
                .map(|&i| episode_grad(policy, value, &batch[i], cfg))
                .collect();
            let n_tok: usize = parts.iter().map(|p| p.tokens).sum();
            if n_tok == 0 {
                continue;
            }
            let inv = 1.0 / n_tok as f64;
            let mut grad = vec![S::zero(); policy.num_params()];
            let mut vgrad = vec![0.0; value.weights.len() + 1];
            let (mut pl, mut vl, mut clipped) = (0.0, 0.0, 0usize);
            for p in &parts {
                for (g, &x) in grad.iter_mut().zip(&p.grad) {
                    *g = *g + x;
                }
                for (g, x) in vgrad.iter_mut().zip(&p.value_grad) {
                    *g += x;
                }
                pl += p.policy_loss;
                vl += p.value_loss;
                clipped += p.clipped;
            }
            let (pl, vl) = (pl * inv, vl * inv);
            if !pl.is_finite() || !vl.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "ppo minibatch {mb_count}: policy loss {pl}, value loss {vl}, \
                     clip fraction so far {:.3}",
                    clipped_total as f64 / tokens_total.max(1) as f64
                )));
            }
            let k = S::of(inv);
            grad.iter_mut().for_each(|g| *g = *g * k);
            vgrad
                .iter_mut()
                .for_each(|g| *g *= inv * cfg.value_loss_coeff);
            clip_grad_norm(&mut grad, cfg.grad_clip);
            let lr = opt.current_lr(policy, cfg);
            opt.policy.step(policy.params_mut(), &grad, lr);
            let mut vparams: Vec<f64> = value.weights.clone();
            vparams.push(value.bias);
            opt.value.step(&mut vparams, &vgrad, cfg.value_lr);
            value.bias = vparams.pop().expect("bias");
            value.weights = vparams;
            opt.steps += 1;
            if mb_count == 0 {
                stats.first_minibatch_clip_frac = clipped as f64 / n_tok as f64;
            }
            mb_count += 1;
            clipped_total += clipped;
            tokens_total += n_tok;
            pl_sum += pl;
            vl_sum += vl;
        }
    }
    stats.steps = mb_count;
    if mb_count > 0 {
        stats.clip_frac = clipped_total as f64 / tokens_total as f64;
        stats.policy_loss = pl_sum / mb_count as f64;
        stats.value_loss = vl_sum / mb_count as f64;
    }
    Ok(stats)
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub step: usize,
    pub episodes: usize,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub clip_frac: f64,
    pub first_minibatch_clip_frac: f64,
    pub value_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RlsfLog {
    pub iterations: Vec<IterationMetrics>,
    pub episode_rewards: Vec<f64>,
    pub episode_kls: Vec<f64>,
}

/// Prompts for episode `e` cycle through a fresh permutation of the prompt
/// pool on every pass.
fn prompt_schedule(pool: usize, first: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    let mut pass = usize::MAX;
    let mut perm: Vec<usize> = Vec::new();
    for e in first..first + count {
        if e / pool != pass {
            pass = e / pool;
            perm = (0..pool).collect();
            perm.shuffle(&mut rng_for(seed, &seed_path!["ppo-prompts", pass]));
        }
        out.push(perm[e % pool]);
    }
    out
}

/// Optimize `policy` for `cfg.episodes` episodes. The starting policy is kept
/// frozen as the KL reference. When `metrics` is given, one JSON object per
/// iteration is written to it.
pub fn train_rlsf<S: Scalar>(
    policy: &mut TinyLm<S>,
    scorer: &dyn Scorer,
    prompts: &[String],
    cfg: &PpoConfig,
    mut metrics: Option<&mut dyn Write>,
) -> Result<RlsfLog> {
    cfg.validate()?;
    let mut log = RlsfLog::default();
    let iterations = cfg.iterations();
    if iterations == 0 {
        return Ok(log);
    }
    if prompts.is_empty() {
        return Err(Error::Invalid("no prompts for policy optimization".into()));
    }
    let pool = &prompts[..cfg.prompts.clamp(1, prompts.len())];
    if pool.len() < cfg.prompts {
        log::warn!(
            "ppo: {} prompts requested, {} available",
            cfg.prompts,
            pool.len()
        );
    }
    let reference = policy.clone();
    let mut value = ValueHead::zeros(policy.config().embed_dim);
    let mut opt = PpoOptim::new(policy, cfg);
    for it in 0..iterations {
        let idx = prompt_schedule(pool.len(), it * cfg.batch, cfg.batch, cfg.seed);
        let batch_prompts: Vec<String> = idx.iter().map(|&i| pool[i].clone()).collect();
        let seeds: Vec<u64> = (0..cfg.batch)
            .map(|i| derive_seed(cfg.seed, &seed_path!["rollout", it, i]))
            .collect();
        let episodes = rollout(
            policy,
            &reference,
            &value,
            scorer,
            &batch_prompts,
            &seeds,
            cfg,
        );
        if episodes.is_empty() {
            return Err(Error::Invalid(format!(
                "ppo iteration {it} produced no episodes"
            )));
        }
        let prepared = prepare(&episodes, cfg);
        let lr = opt.current_lr(policy, cfg);
        let stats = ppo_update(
            policy,
            &mut value,
            &prepared,
            &mut opt,
            cfg,
            derive_seed(cfg.seed, &seed_path!["update", it]),
        )?;
        let n = episodes.len() as f64;
        let m = IterationMetrics {
            step: it,
            episodes: episodes.len(),
            mean_reward: episodes.iter().map(|e| e.reward).sum::<f64>() / n,
            mean_kl: episodes.iter().map(Episode::kl).sum::<f64>() / n,
            clip_frac: stats.clip_frac,
            first_minibatch_clip_frac: stats.first_minibatch_clip_frac,
            value_loss: stats.value_loss,
            lr,
        };
        log::info!(
            "ppo {it}: reward {:.4} kl {:.4} clip {:.3} value loss {:.4}",
            m.mean_reward,
            m.mean_kl,
            m.clip_frac,
            m.value_loss
        );
        if let Some(w) = metrics.as_deref_mut() {
            let line = serde_json::to_string(&m).expect("metrics encode");
            writeln!(w, "{line}").map_err(|e| Error::io("metrics", e))?;
        }
        log.episode_rewards
            .extend(episodes.iter().map(|e| e.reward));
        log.episode_kls.extend(episodes.iter().map(Episode::kl));
        log.iterations.push(m);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gae_with_unit_lambda_is_reward_to_go_minus_value() {
        let r = [0.1, -0.2, 1.0];
        let v = [0.5, 0.3, 0.2];
        let (adv, ret) = gae(&r, &v, 1.0, 1.0);
        let togo = [0.9, 0.8, 1.0];
        for t in 0..3 {
            assert!((adv[t] - (togo[t] - v[t])).abs() < 1e-12);
            assert!((ret[t] - togo[t]).abs() < 1e-12);
        }
    }

    #[test]
    fn gae_with_zero_lambda_is_td_error() {
        let (adv, _) = gae(&[1.0, 2.0], &[0.5, 0.25], 1.0, 0.0);
        assert!((adv[0] - (1.0 + 0.25 - 0.5)).abs() < 1e-12);
        assert!((adv[1] - (2.0 - 0.25)).abs() < 1e-12);
    }

    fn episode() -> Episode {
        Episode {
            prompt: "p".into(),
            prompt_tokens: vec![256, 1],
            response: vec![2, 3, 4],
            response_text: String::new(),
            logp: vec![-1.0, -2.0, -0.5],
            ref_logp: vec![-1.5, -2.0, -0.25],
            reward: 0.7,
            values: vec![0.0; 3],
        }
    }

    #[test]
    fn shaping_modes_agree_in_total() {
        let e = episode();
        let per = e.shaped_rewards(e.reward, 0.05, KlMode::PerToken);
        let seq = e.shaped_rewards(e.reward, 0.05, KlMode::Sequence);
        assert!((per.iter().sum::<f64>() - seq.iter().sum::<f64>()).abs() < 1e-12);
        assert!((per[0] - -0.025).abs() < 1e-12);
        assert_eq!(
            e.shaped_rewards(e.reward, 0.0, KlMode::PerToken),
            vec![0.0, 0.0, 0.7]
        );
    }

    #[test]
    fn rewards_pass_through_unnormalized() {
        let eps = vec![
            episode(),
            Episode {
                reward: -3.25,
                ..episode()
            },
        ];
        assert_eq!(episode_rewards(&eps, false), vec![0.7, -3.25]);
        let norm = episode_rewards(&eps, true);
        assert!((norm[0] - 1.0).abs() < 1e-9 && (norm[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn schedule_covers_pool_each_pass() {
        let s = prompt_schedule(5, 0, 10, 1);
        let mut a = s[..5].to_vec();
        a.sort();
        assert_eq!(a, vec![0, 1, 2, 3, 4]);
        assert_eq!(prompt_schedule(5, 3, 4, 1), s[3..7].to_vec());
    }

    #[test]
    fn defaults_keep_full_scale_ratios() {
        let (p, d) = (PpoConfig::full_scale(), PpoConfig::default());
        p.validate().unwrap();
        d.validate().unwrap();
        assert_eq!(p.episodes / d.episodes, 100);
        assert_eq!(p.prompts / d.prompts, 100);
        assert_eq!(d.batch / d.minibatch, 4);
        assert_eq!(d.inner_epochs, 4);
    }
}
