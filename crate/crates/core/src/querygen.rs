//! Initial query mining: few-shot bootstrap generation with bad-word
//! filtering and Rouge-L deduplication.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genbackend::{Backend, GenRequest};
use crate::rng::{derive_seed, rng_for};
use crate::seed_path;
use crate::types::Query;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinerConfig {
    pub seed_queries: Vec<String>,
    pub static_shots: usize,
    pub dynamic_shots: usize,
    pub badwords: Vec<String>,
    pub rouge_threshold: f64,
    pub target_count: usize,
    /// Generation attempts allowed per requested query.
    pub budget_factor: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: usize,
    /// Generations issued per round; acceptance within a round is serial.
    pub round_size: usize,
    pub seed: u64,
}

impl Default for MinerConfig {
    fn default() -> Self {
        MinerConfig {
            seed_queries: Vec::new(),
            static_shots: 7,
            dynamic_shots: 3,
            badwords: ["image", "graph", "picture", "video"]
                .map(String::from)
                .to_vec(),
            rouge_threshold: 0.5,
            target_count: 100,
            budget_factor: 50,
            temperature: 1.2,
            top_p: 0.9,
            max_tokens: 64,
            round_size: 8,
            seed: 0,
        }
    }
}

impl MinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seed_queries.len() < 10 {
            return Err(Error::Config(format!(
                "query mining needs at least 10 seed queries, got {}",
                self.seed_queries.len()
            )));
        }
        if self.static_shots + self.dynamic_shots > self.seed_queries.len() {
            return Err(Error::Config(format!(
                "{} static + {} dynamic shots exceed the {} seed queries",
                self.static_shots,
                self.dynamic_shots,
                self.seed_queries.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.rouge_threshold) {
            return Err(Error::Config("rouge_threshold must lie in [0, 1]".into()));
        }
        if self.target_count == 0 || self.round_size == 0 || self.budget_factor == 0 {
            return Err(Error::Config(
                "target_count, round_size and budget_factor must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn lcs_f1(lcs: usize, cand: usize, reference: usize) -> f64 {
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / cand as f64;
    let r = lcs as f64 / reference as f64;
    2.0 * p * r / (p + r)
}

/// Rouge-L F-measure over lowercased whitespace tokens.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (tokens(candidate), tokens(reference));
    lcs_f1(lcs_len(&c, &r), c.len(), r.len())
}

/// Rouge-L over pre-tokenized sequences.
pub fn rouge_l_tokens<T: PartialEq>(candidate: &[T], reference: &[T]) -> f64 {
    lcs_f1(
        lcs_len(candidate, reference),
        candidate.len(),
        reference.len(),
    )
}

pub fn contains_badword(text: &str, badwords: &[String]) -> bool {
    let lower = text.to_lowercase();
    badwords
        .iter()
        .any(|w| !w.is_empty() && lower.contains(&w.to_lowercase()))
}

/// First line of a completion with list numbering ("12.", "3)", "-") removed.
pub fn extract_query(completion: &str) -> String {
    let line = completion.trim_start().lines().next().unwrap_or("").trim();
    let digits = line.trim_start_matches(|c: char| c.is_ascii_digit());
    let rest = match digits.strip_prefix(['.', ')', ':']) {
        Some(r) if digits.len() < line.len() => r,
        _ => line.trim_start_matches(['-', '*']),
    };
    rest.trim().to_string()
}

pub fn build_prompt(shots: &[&str]) -> String {
    let mut p = String::from("Come up with a series of diverse user queries.\n");
    for (i, s) in shots.iter().enumerate() {
        p.push_str(&format!("{}. {}\n", i + 1, s));
    }
    p.push_str(&format!("{}.", shots.len() + 1));
    p
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MiningStats {
    pub attempts: usize,
    pub accepted: usize,
    pub rejected_empty: usize,
    pub rejected_badword: usize,
    pub rejected_duplicate: usize,
}

pub enum Verdict {
    Accept,
    Empty,
    Badword,
    Duplicate,
}

/// Deduplicates against `pool` (seeds and accepted queries), whose token
/// sequences are cached alongside the text.
pub struct DedupPool {
    threshold: f64,
    entries: Vec<Vec<String>>,
}

impl DedupPool {
    pub fn new(threshold: f64) -> Self {
        DedupPool {
            threshold,
            entries: Vec::new(),
        }
    }

    pub fn insert(&mut self, text: &str) {
        self.entries.push(tokens(text));
    }

    /// Highest Rouge-L of `text` against the pool, both directions.
    pub fn max_similarity(&self, text: &str) -> f64 {
        let t = tokens(text);
        self.entries
            .iter()
            .map(|e| rouge_l_tokens(&t, e).max(rouge_l_tokens(e, &t)))
            .fold(0.0, f64::max)
    }

    pub fn admits(&self, text: &str) -> bool {
        self.max_similarity(text) <= self.threshold
    }
}

pub fn judge(text: &str, cfg: &MinerConfig, pool: &DedupPool) -> Verdict {
    if text.trim().is_empty() {
        Verdict::Empty
    } else if contains_badword(text, &cfg.badwords) {
        Verdict::Badword
    } else if !pool.admits(text) {
        Verdict::Duplicate
    } else {
        Verdict::Accept
    }
}

/// Mine `cfg.target_count` queries with ids `q00000`, `q00001`, ...
///
/// Each round issues `round_size` generations in parallel from prompts built
/// on the accepted set at the start of the round, then judges them one by one
/// in attempt order, so results do not depend on thread scheduling.
pub fn mine_queries(cfg: &MinerConfig, backend: &dyn Backend) -> Result<(Vec<Query>, MiningStats)> {
    cfg.validate()?;
    let mut pool = DedupPool::new(cfg.rouge_threshold);
    for s in &cfg.seed_queries {
        pool.insert(s);
    }
    let budget = cfg.budget_factor * cfg.target_count;
    let mut accepted: Vec<String> = Vec::new();
    let mut stats = MiningStats::default();
    let mut round = 0usize;
    while accepted.len() < cfg.target_count && stats.attempts < budget {
        let n = cfg.round_size.min(budget - stats.attempts);
        let requests: Vec<GenRequest> = (0..n)
            .map(|i| {
                let attempt = stats.attempts + i;
                let mut rng = rng_for(cfg.seed, &seed_path!["mine", "prompt", attempt]);
                let mut seeds: Vec<&str> = cfg.seed_queries.iter().map(String::as_str).collect();
                seeds.shuffle(&mut rng);
                let mut shots: Vec<&str> = seeds[..cfg.static_shots].to_vec();
                let mut leftover = seeds[cfg.static_shots..].iter();
                let dynamic: Vec<&str> = accepted
                    .choose_multiple(&mut rng, cfg.dynamic_shots)
                    .map(String::as_str)
                    .collect();
                shots.extend(&dynamic);
                for _ in dynamic.len()..cfg.dynamic_shots {
                    shots.extend(leftover.next());
                }
                GenRequest {
                    prompt: build_prompt(&shots),
                    max_tokens: cfg.max_tokens,
                    temperature: cfg.temperature,
                    top_p: cfg.top_p,
                    n: 1,
                    stop: vec!["\n".into()],
                    seed: derive_seed(cfg.seed, &seed_path!["mine", "gen", attempt]),
                }
            })
            .collect();
        let outputs = requests
            .par_iter()
            .map(|r| backend.complete(r))
            .collect::<Vec<_>>();
        for out in outputs {
            stats.attempts += 1;
            let text = extract_query(&out?);
            match judge(&text, cfg, &pool) {
                Verdict::Accept => {
                    pool.insert(&text);
                    accepted.push(text);
                    stats.accepted += 1;
                    if accepted.len() == cfg.target_count {
                        break;
                    }
                }
                Verdict::Empty => stats.rejected_empty += 1,
                Verdict::Badword => stats.rejected_badword += 1,
                Verdict::Duplicate => stats.rejected_duplicate += 1,
            }
        }
        round += 1;
        if round.is_multiple_of(50) {
            log::info!(
                "mining: {} accepted after {} attempts",
                accepted.len(),
                stats.attempts
            );
        }
    }
    let queries: Vec<Query> = accepted
        .into_iter()
        .enumerate()
        .map(|(i, t)| Query::new(format!("q{i:05}"), t))
        .collect();
    if queries.len() < cfg.target_count {
        return Err(Error::BudgetExhausted {
            attempts: stats.attempts,
            accepted: queries,
        });
    }
    Ok((queries, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l("a b c", "a b c"), 1.0);
        assert_eq!(rouge_l("a b", "c d"), 0.0);
        assert!((rouge_l("a b c d", "a c e") - 4.0 / 7.0).abs() < 1e-12);
        assert_eq!(rouge_l("", ""), 0.0);
        assert_eq!(rouge_l("A B", "a b"), 1.0);
    }

    #[test]
    fn extraction_strips_numbering() {
        assert_eq!(
            extract_query(" 11. What is rust?\n12. next"),
            "What is rust?"
        );
        assert_eq!(extract_query("3) tell me"), "tell me");
        assert_eq!(extract_query("- bullet"), "bullet");
        assert_eq!(extract_query("2024 budget plans"), "2024 budget plans");
        assert_eq!(extract_query("\n"), "");
    }

    #[test]
    fn badwords_are_case_insensitive_substrings() {
        let bw = MinerConfig::default().badwords;
        assert!(contains_badword("Describe this IMAGE", &bw));
        assert!(contains_badword("videos of cats", &bw));
        assert!(!contains_badword("tell me a story", &bw));
    }

    #[test]
    fn validation() {
        let mut cfg = MinerConfig::default();
        assert!(cfg.validate().is_err());
        cfg.seed_queries = (0..10).map(|i| format!("seed {i}")).collect();
        cfg.validate().unwrap();
        cfg.static_shots = 8;
        assert!(cfg.validate().is_err());
    }
}
