//! A synthetic world with a computable quality oracle.
//!
//! Every topic owns `K` facts. Toy generators answer a query about a topic
//! with a sequence of items, each either one of the topic's facts or a vague
//! filler sentence, optionally opened by a hedge. Their parameters improve
//! monotonically with capability, shots and prompt quality, so the ranking
//! rule over generator configurations holds in expectation while individual
//! samples stay noisy.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, GenError, Result};
use crate::genbackend::sampling::apply_stop;
use crate::genbackend::{Backend, Completion, GenRequest, GenResponse};
use crate::rm::Scorer;
use crate::rng::{rng_for, StageRng};
use crate::seed_path;
use crate::types::{ComparisonPair, GeneratorConfig, Query, HUMAN_PREFIX};

pub const FACT_WEIGHT: f64 = 0.7;
pub const LENGTH_WEIGHT: f64 = 0.2;
pub const HEDGE_PENALTY: f64 = 0.3;

/// Openers that mark a hedged answer.
pub const HEDGES: [&str; 2] = ["Well, ", "I don't know. "];

/// Sentences that carry no topic knowledge; used as distractor items.
pub const FILLERS: [&str; 16] = [
    "That is hard to say now.",
    "Many people ask about it.",
    "It depends on the season.",
    "Opinions differ on this.",
    "There is more to learn.",
    "Some say it is unusual.",
    "It is a common question.",
    "Nobody is fully certain.",
    "It varies from place to place.",
    "This is often discussed.",
    "Few sources agree on it.",
    "It can be quite subtle.",
    "Much remains unclear here.",
    "It is worth a closer look.",
    "Experts rarely mention it.",
    "The answer is not simple.",
];

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const VERBS: [&str; 8] = [
    "keeps", "holds", "grows", "hides", "trades", "guards", "counts", "stores",
];
const ADJECTIVES: [&str; 12] = [
    "amber", "silver", "crimson", "hollow", "woven", "bitter", "ancient", "frozen", "copper",
    "velvet", "narrow", "golden",
];
const NOUNS: [&str; 12] = [
    "reeds", "stones", "lanterns", "ravens", "bridges", "drums", "orchards", "ships", "bells",
    "towers", "maps", "looms",
];

/// Query phrasings for the toy query miner; `{}` is replaced by the topic.
pub const QUERY_TEMPLATES: [&str; 12] = [
    "describe {}",
    "explain {}",
    "summarize {}",
    "discuss {}",
    "{} overview",
    "{} essentials",
    "introduce {}",
    "characterize {}",
    "profile {}",
    "outline {}",
    "{} basics",
    "portray {}",
];

/// Follow-up phrasings used by the toy user role.
pub const FOLLOW_UPS: [&str; 4] = [
    "Tell me more about {}.",
    "What else is known about {}?",
    "Any other facts on {}?",
    "Go on about {}.",
];

/// Emitted by the toy user role to end a conversation.
pub const USER_END_MARKER: &str = "[END]";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicEntry {
    pub name: String,
    pub facts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeTable {
    pub seed: u64,
    /// Response length (characters) at which the length term saturates.
    pub target_len: usize,
    pub topics: Vec<TopicEntry>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

fn topic_name(rng: &mut StageRng) -> String {
    (0..3)
        .flat_map(|_| {
            [
                CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char,
                VOWELS[rng.gen_range(0..VOWELS.len())] as char,
            ]
        })
        .collect()
}

fn fact_sentence(rng: &mut StageRng) -> String {
    format!(
        "It {} {} {} {}.",
        VERBS[rng.gen_range(0..VERBS.len())],
        rng.gen_range(2..100),
        ADJECTIVES[rng.gen_range(0..ADJECTIVES.len())],
        NOUNS[rng.gen_range(0..NOUNS.len())]
    )
}

impl KnowledgeTable {
    pub fn generate(n_topics: usize, facts_per_topic: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, &seed_path!["knowledge-table"]);
        let mut names = std::collections::HashSet::new();
        let mut facts_seen = std::collections::HashSet::new();
        let mut topics = Vec::with_capacity(n_topics);
        while topics.len() < n_topics {
            let name = topic_name(&mut rng);
            if !names.insert(name.clone()) {
                continue;
            }
            let mut facts = Vec::with_capacity(facts_per_topic);
            while facts.len() < facts_per_topic {
                let f = fact_sentence(&mut rng);
                if facts_seen.insert(f.clone()) {
                    facts.push(f);
                }
            }
            topics.push(TopicEntry { name, facts });
        }
        let mut table = KnowledgeTable {
            seed,
            target_len: 100,
            topics,
            index: HashMap::new(),
        };
        table.reindex();
        table
    }

    fn reindex(&mut self) {
        self.index = self
            .topics
            .iter()
            .enumerate()
            .map(|(i, t)| (t.name.clone(), i))
            .collect();
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for t in &self.topics {
            if t.facts.is_empty() {
                return Err(Error::Invalid(format!("topic `{}` has no facts", t.name)));
            }
            for f in &t.facts {
                if !seen.insert(f.as_str()) {
                    return Err(Error::Invalid(format!("duplicate fact `{f}`")));
                }
            }
        }
        if self.index.len() != self.topics.len() {
            return Err(Error::Invalid("duplicate topic names".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("table encodes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut table: KnowledgeTable = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        table.reindex();
        table.validate()?;
        Ok(table)
    }

    pub fn topic(&self, name: &str) -> Option<&TopicEntry> {
        self.index.get(name).map(|&i| &self.topics[i])
    }

    /// First word of `text` naming a topic.
    pub fn find_topic(&self, text: &str) -> Option<&TopicEntry> {
        text.split(|c: char| !c.is_ascii_alphanumeric())
            .filter(|w| !w.is_empty())
            .find_map(|w| self.topic(&w.to_ascii_lowercase()))
    }

    /// Topic of the most recent human turn in a transcript, else the last
    /// topic word anywhere in it.
    pub fn context_topic(&self, text: &str) -> Option<&TopicEntry> {
        let last_human = text
            .rfind(HUMAN_PREFIX)
            .map(|at| &text[at + HUMAN_PREFIX.len()..])
            .map(|rest| rest.split("\n\n").next().unwrap_or(rest));
        last_human.and_then(|t| self.find_topic(t)).or_else(|| {
            text.rsplit(|c: char| !c.is_ascii_alphanumeric())
                .find_map(|w| self.topic(&w.to_ascii_lowercase()))
        })
    }

    /// Topic of a query: its `topic` metadata if present, else the first
    /// topic word in its text.
    pub fn topic_of(&self, query: &Query) -> Result<&TopicEntry> {
        query
            .meta
            .get("topic")
            .and_then(|t| self.topic(t))
            .or_else(|| self.find_topic(&query.text))
            .ok_or_else(|| Error::Invalid(format!("query `{}` names no known topic", query.id)))
    }

    /// One query per topic, cycling through the templates; ids `toy-0000`...
    pub fn make_queries(&self, count: usize) -> Vec<Query> {
        (0..count)
            .map(|i| {
                let topic = &self.topics[i % self.topics.len()];
                let template = QUERY_TEMPLATES[(i / self.topics.len() + i) % QUERY_TEMPLATES.len()];
                Query::new(format!("toy-{i:04}"), template.replace("{}", &topic.name))
                    .with_meta("topic", &topic.name)
            })
            .collect()
    }
}

pub fn is_hedged(response: &str) -> bool {
    let lower = response.trim_start().to_lowercase();
    HEDGES.iter().any(|h| {
        lower.starts_with(
            h.trim_end()
                .trim_end_matches([',', '.'])
                .to_lowercase()
                .as_str(),
        )
    })
}

/// Fraction of the topic's facts that appear verbatim in `response`.
pub fn fact_coverage(topic: &TopicEntry, response: &str) -> f64 {
    let hits = topic
        .facts
        .iter()
        .filter(|f| response.contains(f.as_str()))
        .count();
    hits as f64 / topic.facts.len() as f64
}

/// Ground-truth quality in `[0, 1]`:
/// `0.7 * coverage + 0.2 * min(1, chars / target_len) - 0.3 * hedged`, clipped.
pub fn oracle_quality(query: &Query, response: &str, table: &KnowledgeTable) -> Result<f64> {
    let topic = table.topic_of(query)?;
    Ok(quality_for_topic(topic, response, table.target_len))
}

pub fn quality_for_topic(topic: &TopicEntry, response: &str, target_len: usize) -> f64 {
    let chars = response.chars().count() as f64;
    let length = (chars / target_len.max(1) as f64).min(1.0);
    let hedge = if is_hedged(response) { 1.0 } else { 0.0 };
    (FACT_WEIGHT * fact_coverage(topic, response) + LENGTH_WEIGHT * length - HEDGE_PENALTY * hedge)
        .clamp(0.0, 1.0)
}

/// Coefficients mapping lattice coordinates to generator behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyParams {
    pub fact_base: f64,
    pub fact_capability: f64,
    pub fact_shots: f64,
    pub fact_prompt: f64,
    pub hedge_base: f64,
    pub hedge_capability: f64,
    pub hedge_shots: f64,
    pub hedge_prompt: f64,
    /// Mean item count is `len_base + len_capability * cap + ...`.
    pub len_base: f64,
    pub len_capability: f64,
    pub len_shots: f64,
    pub len_prompt: f64,
    /// Probability of a truncated "generation failure" regardless of config.
    pub fail_prob: f64,
    /// Share of hedges that are the evasive "I don't know." rather than "Well,".
    pub idk_share: f64,
    /// Probability that a request is served by a generator of random ranks,
    /// which makes the lattice label wrong regardless of content.
    pub misroute_prob: f64,
}

impl Default for ToyParams {
    fn default() -> Self {
        ToyParams {
            fact_base: 0.0,
            fact_capability: 0.08,
            fact_shots: 0.025,
            fact_prompt: 0.15,
            hedge_base: 0.45,
            hedge_capability: 0.06,
            hedge_shots: 0.02,
            hedge_prompt: 0.08,
            len_base: 1.0,
            len_capability: 0.4,
            len_shots: 0.15,
            len_prompt: 0.5,
            fail_prob: 0.05,
            idk_share: 0.5,
            misroute_prob: 0.0,
        }
    }
}

impl ToyParams {
    /// Item count no longer depends on the configuration, so response length
    /// carries little information about quality.
    pub fn length_decorrelated() -> Self {
        ToyParams {
            len_base: 5.0,
            len_capability: 0.0,
            len_shots: 0.0,
            len_prompt: 0.0,
            ..ToyParams::default()
        }
    }

    /// Generators behind the out-of-pipeline comparison corpus. Answers have
    /// similar lengths and never fail or open with "I don't know".
    pub fn community() -> Self {
        ToyParams {
            fail_prob: 0.0,
            idk_share: 0.0,
            ..ToyParams::length_decorrelated()
        }
    }

    /// More hedging, more truncated failures and misrouted requests.
    pub fn noisy() -> Self {
        ToyParams {
            hedge_base: 0.6,
            fail_prob: 0.15,
            idk_share: 0.8,
            misroute_prob: 0.3,
            ..ToyParams::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyGenerator {
    pub capability: u32,
    pub shots: u32,
    pub prompt_quality: u32,
    pub p_fact: f64,
    pub p_hedge: f64,
    /// Mean number of items per response.
    pub length_mean: f64,
    pub fail_prob: f64,
    pub idk_share: f64,
    params: ToyParams,
}

impl ToyGenerator {
    pub fn new(capability: u32, shots: u32, prompt_quality: u32, params: &ToyParams) -> Self {
        let (c, s, q) = (capability as f64, shots as f64, prompt_quality as f64);
        let p = params;
        ToyGenerator {
            capability,
            shots,
            prompt_quality,
            p_fact: (p.fact_base + p.fact_capability * c + p.fact_shots * s + p.fact_prompt * q)
                .clamp(0.05, 0.95),
            p_hedge: (p.hedge_base
                - p.hedge_capability * c
                - p.hedge_shots * s
                - p.hedge_prompt * q)
                .clamp(0.0, 1.0),
            length_mean: (p.len_base + p.len_capability * c + p.len_shots * s + p.len_prompt * q)
                .max(1.0),
            fail_prob: p.fail_prob.clamp(0.0, 1.0),
            idk_share: p.idk_share.clamp(0.0, 1.0),
            params: *p,
        }
    }

    pub fn for_config(config: &GeneratorConfig, params: &ToyParams) -> Self {
        ToyGenerator::new(
            config.capability,
            config.shots,
            config.prompt_quality,
            params,
        )
    }

    /// Answer a question about `topic`.
    pub fn respond(&self, topic: &TopicEntry, rng: &mut impl Rng) -> String {
        if self.params.misroute_prob > 0.0 && rng.gen::<f64>() < self.params.misroute_prob {
            let params = ToyParams {
                misroute_prob: 0.0,
                ..self.params
            };
            let other = ToyGenerator::new(
                rng.gen_range(1..=3),
                rng.gen_range(1..=3),
                rng.gen_range(1..=3),
                &params,
            );
            return other.respond(topic, rng);
        }
        let failed = rng.gen::<f64>() < self.fail_prob;
        let hedged = rng.gen::<f64>() < self.p_hedge;
        let jitter: f64 = rng.gen_range(-1.0..1.0);
        let n_items = (self.length_mean + jitter).round().max(1.0) as usize;
        let mut facts: Vec<&str> = topic.facts.iter().map(String::as_str).collect();
        facts.shuffle(rng);
        let mut fillers: Vec<&str> = FILLERS.to_vec();
        fillers.shuffle(rng);
        let mut items = Vec::with_capacity(n_items);
        for _ in 0..n_items {
            let item = if rng.gen::<f64>() < self.p_fact {
                facts.pop().or_else(|| fillers.pop())
            } else {
                fillers.pop().or_else(|| facts.pop())
            };
            match item {
                Some(i) => items.push(i),
                None => break,
            }
        }
        let mut text = String::new();
        if hedged {
            let idk = rng.gen::<f64>() < self.idk_share;
            text.push_str(HEDGES[usize::from(idk)]);
        }
        text.push_str(&items.join(" "));
        if failed {
            let keep = rng.gen_range(4..14).min(text.len());
            let mut cut = keep;
            while !text.is_char_boundary(cut) {
                cut -= 1;
            }
            text.truncate(cut);
            let trimmed = text.trim_end().len();
            text.truncate(trimmed.max(1));
        }
        text
    }
}

pub fn toy_generate(
    gen: &ToyGenerator,
    query: &Query,
    table: &KnowledgeTable,
    seed: u64,
) -> Result<String> {
    let topic = table.topic_of(query)?;
    let mut rng = rng_for(seed, &seed_path!["toy-generate", &query.id]);
    Ok(gen.respond(topic, &mut rng))
}

/// The oracle as a [`Scorer`]; the topic is read from the context.
/// Contexts naming no known topic score 0.
pub struct OracleScorer {
    pub table: Arc<KnowledgeTable>,
}

impl Scorer for OracleScorer {
    fn score(&self, context: &str, response: &str) -> f64 {
        match self.table.context_topic(context) {
            Some(t) => quality_for_topic(t, response, self.table.target_len),
            None => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ToyRole {
    /// Answers the latest human turn.
    Assistant(ToyGenerator),
    /// Follows up on the conversation; ends it with probability `end_prob`.
    User { end_prob: f64 },
    /// Proposes new queries, ignoring the prompt.
    QueryMiner,
}

/// Toy generators behind the [`Backend`] interface.
///
/// Sampling knobs (temperature, top-p) are ignored; `max_tokens` caps the
/// response length in bytes and stop strings are honoured.
pub struct ToyBackend {
    name: String,
    table: Arc<KnowledgeTable>,
    role: ToyRole,
}

impl ToyBackend {
    pub fn new(name: impl Into<String>, table: Arc<KnowledgeTable>, role: ToyRole) -> Self {
        ToyBackend {
            name: name.into(),
            table,
            role,
        }
    }

    pub fn assistant(
        config: &GeneratorConfig,
        params: &ToyParams,
        table: Arc<KnowledgeTable>,
    ) -> Self {
        ToyBackend::new(
            format!("toy:{}", config.name),
            table,
            ToyRole::Assistant(ToyGenerator::for_config(config, params)),
        )
    }

    pub fn role(&self) -> ToyRole {
        self.role
    }

    fn one(&self, req: &GenRequest, rng: &mut StageRng) -> Result<String, GenError> {
        let table = &self.table;
        match self.role {
            ToyRole::QueryMiner => {
                let topic = &table.topics[rng.gen_range(0..table.topics.len())];
                let template = QUERY_TEMPLATES[rng.gen_range(0..QUERY_TEMPLATES.len())];
                Ok(template.replace("{}", &topic.name))
            }
            ToyRole::Assistant(gen) => {
                let topic = table.context_topic(&req.prompt).ok_or_else(|| {
                    GenError::Unsupported(format!("{}: prompt names no known topic", self.name))
                })?;
                Ok(gen.respond(topic, rng))
            }
            ToyRole::User { end_prob } => {
                if rng.gen::<f64>() < end_prob {
                    return Ok(USER_END_MARKER.to_string());
                }
                let topic = table.context_topic(&req.prompt).ok_or_else(|| {
                    GenError::Unsupported(format!("{}: prompt names no known topic", self.name))
                })?;
                let template = FOLLOW_UPS[rng.gen_range(0..FOLLOW_UPS.len())];
                Ok(template.replace("{}", &topic.name))
            }
        }
    }
}

impl Backend for ToyBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn generate(&self, req: &GenRequest) -> Result<GenResponse, GenError> {
        req.validate()?;
        let completions = (0..req.n)
            .map(|i| {
                let mut rng = rng_for(req.seed, &seed_path![i]);
                let mut text = self.one(req, &mut rng)?;
                if text.len() > req.max_tokens {
                    let mut cut = req.max_tokens;
                    while !text.is_char_boundary(cut) {
                        cut -= 1;
                    }
                    text.truncate(cut);
                }
                apply_stop(&mut text, &req.stop);
                Ok(Completion {
                    text,
                    token_logprobs: None,
                })
            })
            .collect::<Result<Vec<_>, GenError>>()?;
        Ok(GenResponse { completions })
    }
}

/// Oracle-labelled pairs from generators with random ranks, standing in for
/// an out-of-pipeline human preference corpus. Ties are skipped.
pub fn community_pairs(
    table: &KnowledgeTable,
    queries: &[Query],
    params: &ToyParams,
    seed: u64,
) -> Result<Vec<ComparisonPair>> {
    let mut out = Vec::with_capacity(queries.len());
    for q in queries {
        let topic = table.topic_of(q)?;
        let mut rng = rng_for(seed, &seed_path!["community", &q.id]);
        let draw = |rng: &mut StageRng| {
            let g = ToyGenerator::new(
                rng.gen_range(1..=3),
                rng.gen_range(1..=3),
                rng.gen_range(1..=3),
                params,
            );
            g.respond(topic, rng)
        };
        let (a, b) = (draw(&mut rng), draw(&mut rng));
        let (qa, qb) = (
            quality_for_topic(topic, &a, table.target_len),
            quality_for_topic(topic, &b, table.target_len),
        );
        if (qa - qb).abs() < 1e-12 || a.is_empty() || b.is_empty() {
            continue;
        }
        let (chosen, rejected) = if qa > qb { (a, b) } else { (b, a) };
        out.push(ComparisonPair::new(
            &q.id,
            &q.text,
            chosen,
            rejected,
            "community",
            "community",
        )?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> KnowledgeTable {
        KnowledgeTable::generate(20, 5, 42)
    }

    #[test]
    fn table_is_deterministic_and_distinct() {
        let a = table();
        assert_eq!(a, table());
        a.validate().unwrap();
        assert_eq!(a.topics.len(), 20);
        assert!(a.topics.iter().all(|t| t.facts.len() == 5));
        assert_ne!(a, KnowledgeTable::generate(20, 5, 43));
    }

    #[test]
    fn oracle_formula() {
        let t = table();
        let topic = &t.topics[0];
        let q = Query::new("q", format!("describe {}", topic.name));
        let all = topic.facts.join(" ");
        assert!(all.chars().count() >= t.target_len);
        assert!((oracle_quality(&q, &all, &t).unwrap() - 0.9).abs() < 1e-12);
        assert_eq!(oracle_quality(&q, "", &t).unwrap(), 0.0);

        let mut two = format!("{} {}", topic.facts[0], topic.facts[1]);
        while two.chars().count() < t.target_len {
            two.push_str(" Much remains unclear here.");
        }
        assert!((oracle_quality(&q, &two, &t).unwrap() - 0.48).abs() < 1e-12);

        let hedged = format!("Well, {two}");
        assert!((oracle_quality(&q, &hedged, &t).unwrap() - 0.18).abs() < 1e-12);
    }

    #[test]
    fn unknown_topic_is_an_error() {
        let t = table();
        assert!(oracle_quality(&Query::new("q", "describe nothing"), "x", &t).is_err());
    }

    #[test]
    fn topic_lookup_prefers_meta() {
        let t = table();
        let (a, b) = (&t.topics[0].name, &t.topics[1].name);
        let q = Query::new("q", format!("compare {a}")).with_meta("topic", b.as_str());
        assert_eq!(&t.topic_of(&q).unwrap().name, b);
        assert_eq!(
            &t.topic_of(&Query::new("q", format!("Compare {a}!")))
                .unwrap()
                .name,
            a
        );
    }

    #[test]
    fn forced_hedge_always_hedges() {
        let t = table();
        let params = ToyParams {
            hedge_base: 5.0,
            fail_prob: 0.0,
            ..ToyParams::default()
        };
        let g = ToyGenerator::new(3, 3, 3, &params);
        assert_eq!(g.p_hedge, 1.0);
        let mut rng = rng_for(1, &[]);
        for _ in 0..50 {
            assert!(is_hedged(&g.respond(&t.topics[3], &mut rng)));
        }
    }

    #[test]
    fn parameters_monotone_in_each_coordinate() {
        let p = ToyParams::default();
        let base = ToyGenerator::new(1, 1, 1, &p);
        for g in [
            ToyGenerator::new(2, 1, 1, &p),
            ToyGenerator::new(1, 2, 1, &p),
            ToyGenerator::new(1, 1, 2, &p),
        ] {
            assert!(g.p_fact > base.p_fact);
            assert!(g.p_hedge < base.p_hedge);
            assert!(g.length_mean > base.length_mean);
        }
        assert!(p.fact_prompt > p.fact_capability + p.fact_shots);
    }

    #[test]
    fn backend_answers_latest_topic_and_respects_limits() {
        let t = Arc::new(table());
        let cfg = GeneratorConfig::new("A", 3, 3, 2, 1);
        let b = ToyBackend::assistant(&cfg, &ToyParams::default(), t.clone());
        let topic = &t.topics[5];
        let mut req = GenRequest::new(format!(
            "Human: describe {}\n\nAssistant: ok\n\nHuman: more on {}\n\nAssistant: ",
            t.topics[1].name, topic.name
        ));
        req.n = 6;
        let resp = b.generate(&req).unwrap();
        assert_eq!(resp.completions.len(), 6);
        for c in resp.texts() {
            let other = &t.topics[1];
            assert!(other.facts.iter().all(|f| !c.contains(f.as_str())));
        }
        req.max_tokens = 5;
        assert!(b.generate(&req).unwrap().texts().all(|c| c.len() <= 5));
        let none = GenRequest::new("Human: hello\n\nAssistant: ");
        assert!(b.generate(&none).is_err());
    }

    #[test]
    fn query_miner_emits_template_queries() {
        let t = Arc::new(table());
        let b = ToyBackend::new("miner", t.clone(), ToyRole::QueryMiner);
        let mut req = GenRequest::new("anything");
        req.n = 10;
        for q in b.generate(&req).unwrap().texts() {
            assert!(t.find_topic(q).is_some(), "{q}");
        }
    }
}
