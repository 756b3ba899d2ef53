//! Demonstration synthesis by self-play between an assistant-role and a
//! user-role generator, optionally choosing each assistant turn as the
//! best of `N` candidates under a reward model.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genbackend::{GenRequest, SharedBackend};
use crate::rm::Scorer;
use crate::rng::derive_seed;
use crate::seed_path;
use crate::synthcmp::{turn_stops, Reject};
use crate::toyworld::USER_END_MARKER;
use crate::types::{Conversation, DemoSource, Demonstration, Query, Turn, HUMAN_PREFIX};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub max_turns: usize,
    pub best_of_n: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: usize,
    /// A user turn beginning with any of these ends the conversation.
    pub stop_markers: Vec<String>,
    /// Extra attempts for an empty generation.
    pub retries: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            max_turns: 2,
            best_of_n: 4,
            temperature: 1.0,
            top_p: 0.9,
            max_tokens: 384,
            stop_markers: vec![USER_END_MARKER.into()],
            retries: 2,
            seed: 0,
        }
    }
}

/// Generators playing both sides of the conversation.
#[derive(Clone)]
pub struct Roles {
    pub assistant: SharedBackend,
    pub user: SharedBackend,
    pub assistant_preamble: String,
    pub user_preamble: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub score: Option<f64>,
}

/// Every candidate considered for one assistant turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub query_id: String,
    pub turn: usize,
    pub candidates: Vec<Candidate>,
    pub chosen: usize,
}

impl SimConfig {
    pub fn validate(&self, has_scorer: bool) -> Result<()> {
        if self.max_turns == 0 || self.best_of_n == 0 {
            return Err(Error::Config(
                "max_turns and best_of_n must be positive".into(),
            ));
        }
        if self.best_of_n > 1 && !has_scorer {
            return Err(Error::Config(format!(
                "best_of_n = {} needs a reward model to choose among candidates",
                self.best_of_n
            )));
        }
        Ok(())
    }
}

fn with_preamble(preamble: &str, body: String) -> String {
    if preamble.is_empty() {
        body
    } else {
        format!("{}\n\n{body}", preamble.trim_end())
    }
}

/// Generate with retries on empty output; `None` when every attempt is empty.
fn generate_nonempty(
    backend: &SharedBackend,
    prompt: &str,
    cfg: &SimConfig,
    stop: Vec<String>,
    seed: u64,
) -> Result<Option<String>> {
    for attempt in 0..=cfg.retries {
        let req = GenRequest {
            prompt: prompt.to_string(),
            max_tokens: cfg.max_tokens,
            temperature: cfg.temperature,
            top_p: cfg.top_p,
            n: 1,
            stop: stop.clone(),
            seed: if attempt == 0 {
                seed
            } else {
                derive_seed(seed, &seed_path!["retry", attempt])
            },
        };
        let text = backend.complete(&req)?;
        let text = text.trim();
        if !text.is_empty() {
            return Ok(Some(text.to_string()));
        }
    }
    Ok(None)
}

/// Index of the highest score, lowest index on ties.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Simulate one conversation. Returns `Ok(None)` when not even one assistant
/// turn could be produced.
///
/// Candidate `c` of turn `t` is sampled with a seed derived from
/// `(seed, query id, t, c)`, so the candidates for a smaller `N` are a prefix
/// of those for a larger one.
pub fn simulate_one(
    query: &Query,
    cfg: &SimConfig,
    roles: &Roles,
    scorer: Option<&dyn Scorer>,
    mut log: Option<&mut Vec<CandidateRecord>>,
) -> Result<Option<Demonstration>> {
    cfg.validate(scorer.is_some())?;
    let mut conv = Conversation::new(vec![Turn::human(&query.text)?])?;
    let mut rm_scores = Vec::new();
    for turn in 0..cfg.max_turns {
        let context = conv.render();
        let prompt = with_preamble(&roles.assistant_preamble, conv.render_for_assistant());
        let mut texts = Vec::with_capacity(cfg.best_of_n);
        for c in 0..cfg.best_of_n {
            let seed = derive_seed(cfg.seed, &seed_path!["assistant", &query.id, turn, c]);
            if let Some(t) = generate_nonempty(&roles.assistant, &prompt, cfg, turn_stops(), seed)?
            {
                texts.push(t);
            }
        }
        if texts.is_empty() {
            log::warn!("query `{}`: no assistant response at turn {turn}", query.id);
            if conv.assistant_turns() == 0 {
                return Ok(None);
            }
            conv.truncate(conv.len() - 1);
            break;
        }
        let scores: Option<Vec<f64>> =
            scorer.map(|s| texts.iter().map(|t| s.score(&context, t)).collect());
        let chosen = scores.as_deref().map_or(0, argmax_first);
        if let Some(s) = &scores {
            rm_scores.push(s[chosen]);
        }
        if let Some(log) = log.as_deref_mut() {
            log.push(CandidateRecord {
                query_id: query.id.clone(),
                turn,
                candidates: texts
                    .iter()
                    .enumerate()
                    .map(|(i, t)| Candidate {
                        text: t.clone(),
                        score: scores.as_ref().map(|s| s[i]),
                    })
                    .collect(),
                chosen,
            });
        }
        conv.push(Turn::assistant(texts.swap_remove(chosen))?)?;
        if turn + 1 == cfg.max_turns {
            break;
        }
        let user_prompt = with_preamble(
            &roles.user_preamble,
            format!("{}\n\n{HUMAN_PREFIX}", conv.render()),
        );
        let user_stops = vec![
            "\n\nAssistant:".into(),
            "\nAssistant:".into(),
            "\n\nHuman:".into(),
        ];
        let seed = derive_seed(cfg.seed, &seed_path!["user", &query.id, turn]);
        match generate_nonempty(&roles.user, &user_prompt, cfg, user_stops, seed)? {
            Some(t) if !cfg.stop_markers.iter().any(|m| t.starts_with(m.as_str())) => {
                conv.push(Turn::human(t)?)?;
            }
            _ => break,
        }
    }
    let (source, scores) = if scorer.is_some() {
        (DemoSource::Rmsp, Some(rm_scores))
    } else {
        (DemoSource::SelfPlay, None)
    };
    Demonstration::new(conv, source, scores).map(Some)
}

pub fn self_play(query: &Query, cfg: &SimConfig, roles: &Roles) -> Result<Option<Demonstration>> {
    simulate_one(query, cfg, roles, None, None)
}

pub fn rmsp(
    query: &Query,
    cfg: &SimConfig,
    roles: &Roles,
    scorer: &dyn Scorer,
) -> Result<Option<Demonstration>> {
    simulate_one(query, cfg, roles, Some(scorer), None)
}

pub struct DemoDataset {
    /// Demonstrations paired with the id of the query they start from.
    pub demos: Vec<(String, Demonstration)>,
    pub failures: Vec<Reject>,
    pub candidates: Vec<CandidateRecord>,
}

/// Simulate every query in parallel; results keep query order.
pub fn build_demo_dataset(
    queries: &[Query],
    cfg: &SimConfig,
    roles: &Roles,
    scorer: Option<&dyn Scorer>,
    log_candidates: bool,
) -> Result<DemoDataset> {
    cfg.validate(scorer.is_some())?;
    let results: Vec<(Result<Option<Demonstration>>, Vec<CandidateRecord>)> = queries
        .par_iter()
        .map(|q| {
            let mut log = Vec::new();
            let r = simulate_one(q, cfg, roles, scorer, log_candidates.then_some(&mut log));
            (r, log)
        })
        .collect();
    let mut out = DemoDataset {
        demos: Vec::new(),
        failures: Vec::new(),
        candidates: Vec::new(),
    };
    for (q, (r, log)) in queries.iter().zip(results) {
        match r {
            Ok(Some(d)) => out.demos.push((q.id.clone(), d)),
            Ok(None) => out.failures.push(Reject {
                query_id: q.id.clone(),
                reason: "no assistant response".into(),
            }),
            Err(e @ Error::Io { .. }) => return Err(e),
            Err(e) => out.failures.push(Reject {
                query_id: q.id.clone(),
                reason: e.to_string(),
            }),
        }
        out.candidates.extend(log);
    }
    log::info!(
        "simulate: {} demonstrations, {} failures",
        out.demos.len(),
        out.failures.len()
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax_first(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax_first(&[0.5]), 0);
    }

    #[test]
    fn scorer_presence_must_match_n() {
        let cfg = SimConfig::default();
        assert!(cfg.validate(false).is_err());
        cfg.validate(true).unwrap();
        let one = SimConfig {
            best_of_n: 1,
            ..SimConfig::default()
        };
        one.validate(false).unwrap();
        one.validate(true).unwrap();
    }
}
