//! Records exchanged between pipeline stages.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HUMAN_PREFIX: &str = "Human: ";
pub const ASSISTANT_PREFIX: &str = "Assistant: ";
pub const TURN_SEPARATOR: &str = "\n\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Human,
    Assistant,
}

impl Speaker {
    pub fn prefix(self) -> &'static str {
        match self {
            Speaker::Human => HUMAN_PREFIX,
            Speaker::Assistant => ASSISTANT_PREFIX,
        }
    }

    pub fn other(self) -> Speaker {
        match self {
            Speaker::Human => Speaker::Assistant,
            Speaker::Assistant => Speaker::Human,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTurn")]
pub struct Turn {
    speaker: Speaker,
    text: String,
}

#[derive(Deserialize)]
struct RawTurn {
    speaker: Speaker,
    text: String,
}

impl TryFrom<RawTurn> for Turn {
    type Error = Error;
    fn try_from(raw: RawTurn) -> Result<Self> {
        Turn::new(raw.speaker, raw.text)
    }
}

impl Turn {
    pub fn new(speaker: Speaker, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::Invalid(format!("{speaker:?} turn text is empty")));
        }
        Ok(Turn { speaker, text })
    }

    pub fn human(text: impl Into<String>) -> Result<Self> {
        Turn::new(Speaker::Human, text)
    }

    pub fn assistant(text: impl Into<String>) -> Result<Self> {
        Turn::new(Speaker::Assistant, text)
    }

    pub fn speaker(&self) -> Speaker {
        self.speaker
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

/// Alternating human/assistant exchange, always opened by the human.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<Turn>", into = "Vec<Turn>")]
pub struct Conversation {
    turns: Vec<Turn>,
}

impl TryFrom<Vec<Turn>> for Conversation {
    type Error = Error;
    fn try_from(turns: Vec<Turn>) -> Result<Self> {
        Conversation::new(turns)
    }
}

impl From<Conversation> for Vec<Turn> {
    fn from(c: Conversation) -> Self {
        c.turns
    }
}

impl Conversation {
    pub fn new(turns: Vec<Turn>) -> Result<Self> {
        let mut expected = Speaker::Human;
        for (i, turn) in turns.iter().enumerate() {
            if turn.speaker != expected {
                return Err(Error::Invalid(format!(
                    "turn {i} is spoken by {:?}, expected {expected:?} (speakers must alternate starting with human)",
                    turn.speaker
                )));
            }
            expected = expected.other();
        }
        Ok(Conversation { turns })
    }

    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    /// Speaker expected for the next turn.
    pub fn next_speaker(&self) -> Speaker {
        self.turns
            .last()
            .map_or(Speaker::Human, |t| t.speaker.other())
    }

    pub fn push(&mut self, turn: Turn) -> Result<()> {
        if turn.speaker != self.next_speaker() {
            return Err(Error::Invalid(format!(
                "cannot append a {:?} turn after a {:?} turn",
                turn.speaker,
                self.turns.last().map(|t| t.speaker)
            )));
        }
        self.turns.push(turn);
        Ok(())
    }

    pub fn assistant_turns(&self) -> usize {
        self.turns
            .iter()
            .filter(|t| t.speaker == Speaker::Assistant)
            .count()
    }

    pub fn truncate(&mut self, len: usize) {
        self.turns.truncate(len);
    }

    /// Render with `Human:`/`Assistant:` prefixes, turns separated by a blank line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.turns.iter().enumerate() {
            if i > 0 {
                out.push_str(TURN_SEPARATOR);
            }
            out.push_str(t.speaker.prefix());
            out.push_str(&t.text);
        }
        out
    }

    /// Render the context followed by an open assistant prefix awaiting a reply.
    pub fn render_for_assistant(&self) -> String {
        let mut out = self.render();
        if !out.is_empty() {
            out.push_str(TURN_SEPARATOR);
        }
        out.push_str(ASSISTANT_PREFIX);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl Query {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Query {
            id: id.into(),
            text: text.into(),
            meta: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.meta.insert(key.into(), value.into());
        self
    }
}

/// A point in the (capability, shots, prompt quality) lattice.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub name: String,
    pub capability: u32,
    pub shots: u32,
    pub prompt_quality: u32,
    /// 1 is best.
    pub quality_rank: u32,
}

impl GeneratorConfig {
    pub fn new(
        name: impl Into<String>,
        capability: u32,
        shots: u32,
        prompt_quality: u32,
        quality_rank: u32,
    ) -> Self {
        GeneratorConfig {
            name: name.into(),
            capability,
            shots,
            prompt_quality,
            quality_rank,
        }
    }

    /// Componentwise dominance: at least as good everywhere and better somewhere.
    pub fn dominates(&self, other: &GeneratorConfig) -> bool {
        let ge = self.capability >= other.capability
            && self.shots >= other.shots
            && self.prompt_quality >= other.prompt_quality;
        let gt = self.capability > other.capability
            || self.shots > other.shots
            || self.prompt_quality > other.prompt_quality;
        ge && gt
    }

    fn check_fields(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Invalid("generator config has an empty name".into()));
        }
        if self.capability == 0 || self.prompt_quality == 0 || self.quality_rank == 0 {
            return Err(Error::Invalid(format!(
                "config `{}`: capability, prompt_quality and quality_rank must be positive",
                self.name
            )));
        }
        Ok(())
    }
}

impl fmt::Display for GeneratorConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}(cap={}, shots={}, pq={}, rank={})",
            self.name, self.capability, self.shots, self.prompt_quality, self.quality_rank
        )
    }
}

/// Check that a set of configs can be ranked together: distinct names and
/// ranks, and ranks that respect componentwise dominance.
pub fn validate_lattice(configs: &[GeneratorConfig]) -> Result<()> {
    for c in configs {
        c.check_fields()?;
    }
    for (i, a) in configs.iter().enumerate() {
        for b in &configs[i + 1..] {
            if a.name == b.name {
                return Err(Error::Invalid(format!(
                    "duplicate config name `{}`",
                    a.name
                )));
            }
            if a.quality_rank == b.quality_rank {
                return Err(Error::Invalid(format!(
                    "configs `{}` and `{}` share quality_rank {}",
                    a.name, b.name, a.quality_rank
                )));
            }
            let inconsistent = (a.dominates(b) && a.quality_rank > b.quality_rank)
                || (b.dominates(a) && b.quality_rank > a.quality_rank);
            if inconsistent {
                return Err(Error::Invalid(format!(
                    "quality ranks of {a} and {b} contradict componentwise dominance"
                )));
            }
        }
    }
    Ok(())
}

/// One query answered by several generators, best rank first.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedResponseSet {
    query: Query,
    items: Vec<(GeneratorConfig, String)>,
}

impl RankedResponseSet {
    pub fn new(query: Query, mut items: Vec<(GeneratorConfig, String)>) -> Result<Self> {
        if items.len() < 2 {
            return Err(Error::Invalid(format!(
                "ranked set for query `{}` needs at least 2 responses, got {}",
                query.id,
                items.len()
            )));
        }
        items.sort_by_key(|(c, _)| c.quality_rank);
        if items
            .windows(2)
            .any(|w| w[0].0.quality_rank == w[1].0.quality_rank)
        {
            return Err(Error::Invalid(format!(
                "ranked set for query `{}` has tied quality ranks",
                query.id
            )));
        }
        Ok(RankedResponseSet { query, items })
    }

    pub fn query(&self) -> &Query {
        &self.query
    }

    pub fn items(&self) -> &[(GeneratorConfig, String)] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn responses(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|(_, r)| r.as_str())
    }
}

/// A (chosen, rejected) pair for one query, mirroring a `comparisons.jsonl` line.
///
/// Generators are referenced by name; rank ordering is checked where pairs are
/// built from a [`RankedResponseSet`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPair")]
pub struct ComparisonPair {
    pub query_id: String,
    pub query: String,
    pub chosen: String,
    pub rejected: String,
    pub chosen_config: String,
    pub rejected_config: String,
}

#[derive(Deserialize)]
struct RawPair {
    query_id: String,
    query: String,
    chosen: String,
    rejected: String,
    chosen_config: String,
    rejected_config: String,
}

impl TryFrom<RawPair> for ComparisonPair {
    type Error = Error;
    fn try_from(r: RawPair) -> Result<Self> {
        ComparisonPair::new(
            r.query_id,
            r.query,
            r.chosen,
            r.rejected,
            r.chosen_config,
            r.rejected_config,
        )
    }
}

impl ComparisonPair {
    pub fn new(
        query_id: impl Into<String>,
        query: impl Into<String>,
        chosen: impl Into<String>,
        rejected: impl Into<String>,
        chosen_config: impl Into<String>,
        rejected_config: impl Into<String>,
    ) -> Result<Self> {
        let pair = ComparisonPair {
            query_id: query_id.into(),
            query: query.into(),
            chosen: chosen.into(),
            rejected: rejected.into(),
            chosen_config: chosen_config.into(),
            rejected_config: rejected_config.into(),
        };
        if pair.chosen == pair.rejected {
            return Err(Error::Invalid(format!(
                "pair for query `{}` has identical chosen and rejected responses",
                pair.query_id
            )));
        }
        Ok(pair)
    }

    /// Build a pair from two ranked items; the better-ranked one is chosen.
    pub fn from_ranked(
        query: &Query,
        better: (&GeneratorConfig, &str),
        worse: (&GeneratorConfig, &str),
    ) -> Result<Self> {
        if better.0.quality_rank >= worse.0.quality_rank {
            return Err(Error::Invalid(format!(
                "chosen config {} does not outrank rejected config {}",
                better.0, worse.0
            )));
        }
        ComparisonPair::new(
            &query.id,
            &query.text,
            better.1,
            worse.1,
            &better.0.name,
            &worse.0.name,
        )
    }

    /// The same pair with the preference reversed.
    pub fn swapped(&self) -> ComparisonPair {
        ComparisonPair {
            query_id: self.query_id.clone(),
            query: self.query.clone(),
            chosen: self.rejected.clone(),
            rejected: self.chosen.clone(),
            chosen_config: self.rejected_config.clone(),
            rejected_config: self.chosen_config.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoSource {
    SelfPlay,
    Rmsp,
    External,
}

/// A simulated conversation ending on an assistant turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDemo", into = "RawDemo")]
pub struct Demonstration {
    conversation: Conversation,
    source: DemoSource,
    rm_scores: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct RawDemo {
    turns: Conversation,
    source: DemoSource,
    rm_scores: Option<Vec<f64>>,
}

impl TryFrom<RawDemo> for Demonstration {
    type Error = Error;
    fn try_from(r: RawDemo) -> Result<Self> {
        Demonstration::new(r.turns, r.source, r.rm_scores)
    }
}

impl From<Demonstration> for RawDemo {
    fn from(d: Demonstration) -> Self {
        RawDemo {
            turns: d.conversation,
            source: d.source,
            rm_scores: d.rm_scores,
        }
    }
}

impl Demonstration {
    pub fn new(
        conversation: Conversation,
        source: DemoSource,
        rm_scores: Option<Vec<f64>>,
    ) -> Result<Self> {
        if conversation.len() < 2 {
            return Err(Error::Invalid(format!(
                "demonstration needs at least 2 turns, got {}",
                conversation.len()
            )));
        }
        if conversation.next_speaker() != Speaker::Human {
            return Err(Error::Invalid(
                "demonstration must end with an assistant turn".into(),
            ));
        }
        if let Some(scores) = &rm_scores {
            if scores.len() != conversation.assistant_turns() {
                return Err(Error::Invalid(format!(
                    "{} rm scores for {} assistant turns",
                    scores.len(),
                    conversation.assistant_turns()
                )));
            }
        }
        Ok(Demonstration {
            conversation,
            source,
            rm_scores,
        })
    }

    pub fn conversation(&self) -> &Conversation {
        &self.conversation
    }

    pub fn source(&self) -> DemoSource {
        self.source
    }

    pub fn rm_scores(&self) -> Option<&[f64]> {
        self.rm_scores.as_deref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(texts: &[&str]) -> Result<Conversation> {
        let mut speaker = Speaker::Human;
        let turns = texts
            .iter()
            .map(|t| {
                let turn = Turn::new(speaker, *t);
                speaker = speaker.other();
                turn
            })
            .collect::<Result<Vec<_>>>()?;
        Conversation::new(turns)
    }

    #[test]
    fn turn_rejects_blank_text() {
        assert!(Turn::human("   \n").is_err());
        assert!(Turn::assistant("ok").is_ok());
    }

    #[test]
    fn conversation_requires_alternation_from_human() {
        assert!(conv(&["hi", "hello", "more?", "sure"]).is_ok());
        let bad = vec![Turn::assistant("x").unwrap(), Turn::human("y").unwrap()];
        assert!(Conversation::new(bad).is_err());
        let doubled = vec![Turn::human("x").unwrap(), Turn::human("y").unwrap()];
        assert!(Conversation::new(doubled).is_err());
        let mut c = conv(&["hi"]).unwrap();
        assert!(c.push(Turn::human("again").unwrap()).is_err());
        assert!(c.push(Turn::assistant("hello").unwrap()).is_ok());
    }

    #[test]
    fn render_uses_prefixes() {
        let c = conv(&["What is rust?", "A language."]).unwrap();
        assert_eq!(c.render(), "Human: What is rust?\n\nAssistant: A language.");
        let open = conv(&["What is rust?"]).unwrap();
        assert_eq!(
            open.render_for_assistant(),
            "Human: What is rust?\n\nAssistant: "
        );
    }

    #[test]
    fn demonstration_must_end_with_assistant() {
        assert!(Demonstration::new(conv(&["q"]).unwrap(), DemoSource::SelfPlay, None).is_err());
        assert!(
            Demonstration::new(conv(&["q", "a", "q2"]).unwrap(), DemoSource::SelfPlay, None)
                .is_err()
        );
        assert!(Demonstration::new(
            conv(&["q", "a"]).unwrap(),
            DemoSource::Rmsp,
            Some(vec![0.5])
        )
        .is_ok());
        assert!(
            Demonstration::new(conv(&["q", "a"]).unwrap(), DemoSource::Rmsp, Some(vec![])).is_err()
        );
    }

    #[test]
    fn lattice_validation() {
        let a = GeneratorConfig::new("A", 3, 3, 2, 1);
        let b = GeneratorConfig::new("B", 3, 5, 1, 2);
        let e = GeneratorConfig::new("E", 1, 1, 1, 3);
        assert!(validate_lattice(&[a.clone(), b.clone(), e.clone()]).is_ok());
        let tie = GeneratorConfig::new("T", 2, 2, 1, 2);
        assert!(validate_lattice(&[a.clone(), b.clone(), tie]).is_err());
        let inverted = GeneratorConfig::new("E", 1, 1, 1, 1);
        let top = GeneratorConfig::new("A", 3, 3, 2, 2);
        assert!(validate_lattice(&[top, inverted]).is_err());
    }

    #[test]
    fn ranked_set_sorts_and_rejects_ties() {
        let q = Query::new("q1", "x");
        let items = vec![
            (GeneratorConfig::new("E", 1, 1, 1, 3), "e".to_string()),
            (GeneratorConfig::new("A", 3, 3, 2, 1), "a".to_string()),
        ];
        let set = RankedResponseSet::new(q.clone(), items).unwrap();
        assert_eq!(set.items()[0].0.name, "A");
        let single = vec![(GeneratorConfig::new("A", 3, 3, 2, 1), "a".to_string())];
        assert!(RankedResponseSet::new(q, single).is_err());
    }

    #[test]
    fn pair_invariants() {
        let q = Query::new("q", "x");
        let a = GeneratorConfig::new("A", 3, 3, 2, 1);
        let e = GeneratorConfig::new("E", 1, 1, 1, 5);
        assert!(ComparisonPair::from_ranked(&q, (&a, "good"), (&e, "bad")).is_ok());
        assert!(ComparisonPair::from_ranked(&q, (&e, "bad"), (&a, "good")).is_err());
        assert!(ComparisonPair::from_ranked(&q, (&a, "same"), (&e, "same")).is_err());
    }
}
