//! Synthetic comparisons: sample a lattice of generator configurations per
//! query, rank the responses by configuration, binarize, then post-validate
//! with the heuristic filter and agreement with an auxiliary reward model.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genbackend::{GenRequest, SharedBackend};
use crate::rm::Scorer;
use crate::rng::derive_seed;
use crate::seed_path;
use crate::types::{ComparisonPair, GeneratorConfig, Query, RankedResponseSet, HUMAN_PREFIX};

/// The five operating points A-E: capability and shots from the model size
/// and shot count, prompt quality 2 for the faithful prompt and 1 otherwise.
pub fn default_lattice() -> Vec<GeneratorConfig> {
    vec![
        GeneratorConfig::new("A", 3, 3, 2, 1),
        GeneratorConfig::new("B", 3, 5, 1, 2),
        GeneratorConfig::new("C", 2, 3, 1, 3),
        GeneratorConfig::new("D", 1, 3, 1, 4),
        GeneratorConfig::new("E", 1, 1, 1, 5),
    ]
}

/// One lattice point with the backend and prompt preamble that realize it.
#[derive(Clone)]
pub struct LatticeMember {
    pub config: GeneratorConfig,
    pub backend: SharedBackend,
    /// Prepended to the `Human:`/`Assistant:` transcript; may be empty.
    pub preamble: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            temperature: 1.0,
            top_p: 0.9,
            max_tokens: 384,
            seed: 0,
        }
    }
}

pub fn assistant_prompt(preamble: &str, query: &str) -> String {
    let mut p = String::new();
    if !preamble.is_empty() {
        p.push_str(preamble.trim_end());
        p.push_str("\n\n");
    }
    p.push_str(&format!("{HUMAN_PREFIX}{query}\n\nAssistant: "));
    p
}

/// Stop sequences that end an assistant turn.
pub fn turn_stops() -> Vec<String> {
    vec![
        "\n\nHuman:".into(),
        "\nHuman:".into(),
        "\n\nAssistant:".into(),
    ]
}

/// One response per configuration, ranked best first.
pub fn sample_lattice(
    query: &Query,
    members: &[LatticeMember],
    cfg: &SamplingConfig,
) -> Result<RankedResponseSet> {
    let items = members
        .iter()
        .map(|m| {
            let req = GenRequest {
                prompt: assistant_prompt(&m.preamble, &query.text),
                max_tokens: cfg.max_tokens,
                temperature: cfg.temperature,
                top_p: cfg.top_p,
                n: 1,
                stop: turn_stops(),
                seed: derive_seed(cfg.seed, &seed_path!["lattice", &query.id, &m.config.name]),
            };
            let text = m.backend.complete(&req)?;
            Ok((m.config.clone(), text.trim().to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    RankedResponseSet::new(query.clone(), items)
}

/// All `C(n, 2)` pairs `(y_i, y_j)`, `i < j`, in lexicographic index order,
/// minus pairs whose texts coincide. Returns the pairs and the dropped count.
pub fn binarize(set: &RankedResponseSet) -> (Vec<ComparisonPair>, usize) {
    let items = set.items();
    let mut pairs = Vec::with_capacity(items.len() * (items.len() - 1) / 2);
    let mut identical = 0;
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            let (better, worse) = (&items[i], &items[j]);
            if better.1 == worse.1 {
                identical += 1;
                continue;
            }
            pairs.push(
                ComparisonPair::from_ranked(
                    set.query(),
                    (&better.0, &better.1),
                    (&worse.0, &worse.1),
                )
                .expect("ranked set items are strictly ordered"),
            );
        }
    }
    if identical > 0 {
        log::debug!(
            "query `{}`: dropped {identical} pairs with identical responses",
            set.query().id
        );
    }
    (pairs, identical)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    BeginsWith,
    Contains,
    /// At the start or anywhere in the first sentence.
    FirstSentence,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Keyword {
    pub text: String,
    pub mode: MatchMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeuristicFilterConfig {
    pub keywords: Vec<Keyword>,
}

impl Default for HeuristicFilterConfig {
    fn default() -> Self {
        HeuristicFilterConfig {
            keywords: vec![
                Keyword {
                    text: "I don't know".into(),
                    mode: MatchMode::FirstSentence,
                },
                Keyword {
                    text: "well".into(),
                    mode: MatchMode::BeginsWith,
                },
            ],
        }
    }
}

fn normalize(s: &str) -> String {
    s.trim().replace('\u{2019}', "'").to_lowercase()
}

/// `text` starts with `kw` as a whole word ("well," but not "wellington").
fn starts_with_word(text: &str, kw: &str) -> bool {
    text.starts_with(kw)
        && text[kw.len()..]
            .chars()
            .next()
            .is_none_or(|c| !c.is_alphanumeric())
}

impl HeuristicFilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.keywords.is_empty() || self.keywords.iter().any(|k| k.text.trim().is_empty()) {
            return Err(Error::Config(
                "heuristic filter needs at least one non-empty keyword".into(),
            ));
        }
        Ok(())
    }

    pub fn is_bad(&self, response: &str) -> bool {
        let text = normalize(response);
        let first_sentence = text.split(['.', '!', '?', '\n']).next().unwrap_or("");
        self.keywords.iter().any(|k| {
            let kw = normalize(&k.text);
            match k.mode {
                MatchMode::BeginsWith => starts_with_word(&text, &kw),
                MatchMode::Contains => text.contains(&kw),
                MatchMode::FirstSentence => {
                    starts_with_word(&text, &kw) || first_sentence.contains(&kw)
                }
            }
        })
    }
}

/// Mean and population standard deviation of response lengths in characters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub mean: f64,
    pub std: f64,
}

impl LengthStats {
    pub fn of_lengths(lengths: &[usize]) -> Self {
        let n = lengths.len().max(1) as f64;
        let mean = lengths.iter().sum::<usize>() as f64 / n;
        let var = lengths
            .iter()
            .map(|&l| (l as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        LengthStats {
            mean,
            std: var.sqrt(),
        }
    }

    pub fn of_set(set: &RankedResponseSet) -> Self {
        let lengths: Vec<usize> = set.responses().map(char_len).collect();
        LengthStats::of_lengths(&lengths)
    }

    /// `M - S/2`.
    pub fn threshold(&self) -> f64 {
        self.mean - self.std / 2.0
    }

    /// The length rule: chosen is longer than rejected or than `M - S/2`.
    pub fn admits(&self, chosen_len: usize, rejected_len: usize) -> bool {
        chosen_len > rejected_len || chosen_len as f64 > self.threshold()
    }
}

pub fn char_len(s: &str) -> usize {
    s.chars().count()
}

/// Drop pairs whose chosen response hits a bad keyword, then pairs failing the
/// length rule. Pairs whose rejected response alone is bad are kept.
pub fn heuristic_filter(
    pairs: Vec<ComparisonPair>,
    stats: &LengthStats,
    hf: &HeuristicFilterConfig,
) -> Vec<ComparisonPair> {
    pairs
        .into_iter()
        .filter(|p| !hf.is_bad(&p.chosen))
        .filter(|p| stats.admits(char_len(&p.chosen), char_len(&p.rejected)))
        .collect()
}

/// Keep pairs the scorer strictly agrees with.
pub fn asis_filter(pairs: Vec<ComparisonPair>, scorer: &dyn Scorer) -> Vec<ComparisonPair> {
    let keep: Vec<bool> = pairs
        .par_iter()
        .map(|p| scorer.score(&p.query, &p.chosen) > scorer.score(&p.query, &p.rejected))
        .collect();
    pairs
        .into_iter()
        .zip(keep)
        .filter_map(|(p, k)| k.then_some(p))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub queries: usize,
    pub sets: usize,
    pub failed_queries: usize,
    pub pairs_binarized: usize,
    pub identical_dropped: usize,
    pub after_hf: usize,
    pub after_asis: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub query_id: String,
    pub reason: String,
}

pub struct ComparisonDataset {
    pub pairs: Vec<ComparisonPair>,
    pub counts: StageCounts,
    pub rejects: Vec<Reject>,
}

/// sample -> binarize -> heuristic filter -> as-is filter, per query in
/// parallel, merged in query order. `hf = None` or `asis = None` skips that
/// filter. Backend failures skip the query and are reported in `rejects`.
pub fn build_comparison_dataset(
    queries: &[Query],
    members: &[LatticeMember],
    hf: Option<&HeuristicFilterConfig>,
    asis: Option<&dyn Scorer>,
    sampling: &SamplingConfig,
) -> Result<ComparisonDataset> {
    let configs: Vec<GeneratorConfig> = members.iter().map(|m| m.config.clone()).collect();
    crate::types::validate_lattice(&configs)?;
    if let Some(hf) = hf {
        hf.validate()?;
    }
    // Pairs kept plus identical, binarized and post-HF counts, per query.
    type PerQuery = (Vec<ComparisonPair>, usize, usize, usize);
    let per_query: Vec<Result<PerQuery, String>> = queries
        .par_iter()
        .map(|q| {
            let set = sample_lattice(q, members, sampling).map_err(|e| e.to_string())?;
            let (pairs, identical) = binarize(&set);
            let binarized = pairs.len();
            let pairs = match hf {
                Some(hf) => heuristic_filter(pairs, &LengthStats::of_set(&set), hf),
                None => pairs,
            };
            let after_hf = pairs.len();
            Ok((pairs, identical, binarized, after_hf))
        })
        .collect();
    let mut counts = StageCounts {
        queries: queries.len(),
        ..StageCounts::default()
    };
    let mut rejects = Vec::new();
    let mut pairs = Vec::new();
    for (q, r) in queries.iter().zip(per_query) {
        match r {
            Ok((p, identical, binarized, after_hf)) => {
                counts.sets += 1;
                counts.identical_dropped += identical;
                counts.pairs_binarized += binarized;
                counts.after_hf += after_hf;
                pairs.extend(p);
            }
            Err(reason) => {
                log::warn!("query `{}` skipped: {reason}", q.id);
                counts.failed_queries += 1;
                rejects.push(Reject {
                    query_id: q.id.clone(),
                    reason,
                });
            }
        }
    }
    let pairs = match asis {
        Some(s) => asis_filter(pairs, s),
        None => pairs,
    };
    counts.after_asis = pairs.len();
    log::info!(
        "comparisons: {} sets, {} pairs binarized, {} after HF, {} after as-is",
        counts.sets,
        counts.pairs_binarized,
        counts.after_hf,
        counts.after_asis
    );
    Ok(ComparisonDataset {
        pairs,
        counts,
        rejects,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set_of(texts: &[&str]) -> RankedResponseSet {
        let items = texts
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let r = i as u32 + 1;
                (
                    GeneratorConfig::new(format!("y{r}"), 6 - r, 1, 1, r),
                    t.to_string(),
                )
            })
            .collect();
        RankedResponseSet::new(Query::new("q", "question"), items).unwrap()
    }

    #[test]
    fn default_lattice_is_consistent() {
        crate::types::validate_lattice(&default_lattice()).unwrap();
    }

    #[test]
    fn three_items_give_the_listed_pairs() {
        let (pairs, dropped) = binarize(&set_of(&["y1", "y2", "y3"]));
        let got: Vec<(&str, &str)> = pairs
            .iter()
            .map(|p| (p.chosen.as_str(), p.rejected.as_str()))
            .collect();
        assert_eq!(got, vec![("y1", "y2"), ("y1", "y3"), ("y2", "y3")]);
        assert_eq!(dropped, 0);
    }

    #[test]
    fn identical_texts_are_not_paired() {
        let (pairs, dropped) = binarize(&set_of(&["same", "same", "other"]));
        assert_eq!(pairs.len(), 2);
        assert_eq!(dropped, 1);
    }

    #[test]
    fn keyword_matching() {
        let hf = HeuristicFilterConfig::default();
        assert!(hf.is_bad("I don't know, but maybe."));
        assert!(hf.is_bad("Sure thing, i don\u{2019}t know the rest. More."));
        assert!(!hf.is_bad("Sure. I don't know the rest."));
        assert!(hf.is_bad("Well, it depends."));
        assert!(hf.is_bad("  WELL it depends."));
        assert!(!hf.is_bad("Wellington is a city."));
        assert!(!hf.is_bad("It works well."));
    }

    #[test]
    fn bad_rejected_is_kept() {
        let hf = HeuristicFilterConfig::default();
        let stats = LengthStats::of_lengths(&[10, 10]);
        let good = ComparisonPair::new("q", "x", "a fine answer", "Well, no", "A", "B").unwrap();
        let bad = ComparisonPair::new("q", "x", "Well, no", "a fine answer", "A", "B").unwrap();
        let kept = heuristic_filter(vec![good.clone(), bad], &stats, &hf);
        assert_eq!(kept, vec![good]);
    }
}
