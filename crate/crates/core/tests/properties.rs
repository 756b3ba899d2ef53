use proptest::prelude::*;

use synthfeed::dataset::{deserialize_dataset, serialize_dataset};
use synthfeed::querygen::{rouge_l, rouge_l_tokens};
use synthfeed::rm::Scorer;
use synthfeed::synthcmp::{asis_filter, heuristic_filter, HeuristicFilterConfig, LengthStats};
use synthfeed::toyworld::{is_hedged, quality_for_topic, KnowledgeTable, HEDGES};
use synthfeed::types::{ComparisonPair, Query};

/// Textbook exponential LCS, for short inputs only.
fn lcs_oracle(a: &[u8], b: &[u8]) -> usize {
    match (a.split_first(), b.split_first()) {
        (Some((x, ra)), Some((y, rb))) => {
            if x == y {
                1 + lcs_oracle(ra, rb)
            } else {
                lcs_oracle(ra, b).max(lcs_oracle(a, rb))
            }
        }
        _ => 0,
    }
}

fn words() -> impl Strategy<Value = String> {
    prop::collection::vec("[a-h]{1,6}", 0..12).prop_map(|w| w.join(" "))
}

fn pair_strategy() -> impl Strategy<Value = ComparisonPair> {
    ("[a-z ]{1,30}", "[a-z ,.]{1,60}", "[A-Z][a-z ,.]{0,60}")
        .prop_map(|(q, c, r)| ComparisonPair::new("id", q, c, r, "A", "B").unwrap())
}

struct ByLength;

impl Scorer for ByLength {
    fn score(&self, _: &str, response: &str) -> f64 {
        (response.len() % 7) as f64
    }
}

proptest! {
    #[test]
    fn rouge_matches_exponential_lcs(a in prop::collection::vec(0u8..4, 0..9), b in prop::collection::vec(0u8..4, 0..9)) {
        let lcs = lcs_oracle(&a, &b) as f64;
        let want = if lcs == 0.0 {
            0.0
        } else {
            let (p, r) = (lcs / a.len() as f64, lcs / b.len() as f64);
            2.0 * p * r / (p + r)
        };
        prop_assert_eq!(rouge_l_tokens(&a, &b), want);
        prop_assert_eq!(rouge_l_tokens(&a, &b), rouge_l_tokens(&b, &a));
    }

    #[test]
    fn rouge_is_bounded_and_reflexive(a in words(), b in words()) {
        let s = rouge_l(&a, &b);
        prop_assert!((0.0..=1.0).contains(&s));
        if !a.trim().is_empty() {
            prop_assert_eq!(rouge_l(&a, &a), 1.0);
            prop_assert_eq!(rouge_l(&a.to_uppercase(), &a), 1.0);
        }
    }

    #[test]
    fn hedging_strictly_lowers_quality(topic in 0usize..10, facts in prop::collection::vec(0usize..5, 0..5), tail in words(), idk in any::<bool>()) {
        let table = KnowledgeTable::generate(10, 5, 3);
        let t = &table.topics[topic];
        let mut parts: Vec<&str> = facts.iter().map(|&i| t.facts[i].as_str()).collect();
        parts.push(&tail);
        let plain = parts.join(" ").trim().to_string();
        prop_assume!(!is_hedged(&plain));
        let hedged = format!("{}{plain}", HEDGES[usize::from(idk)]);
        prop_assert!(is_hedged(&hedged));
        let (q0, q1) = (
            quality_for_topic(t, &plain, table.target_len),
            quality_for_topic(t, &hedged, table.target_len),
        );
        prop_assert!(q1 <= q0);
        if q0 > 0.0 {
            prop_assert!(q1 < q0, "{q1} !< {q0}");
        }
    }

    #[test]
    fn filters_are_contractive_and_idempotent(pairs in prop::collection::vec(pair_strategy(), 0..20), lens in prop::collection::vec(1usize..120, 2..6)) {
        let stats = LengthStats::of_lengths(&lens);
        let hf = HeuristicFilterConfig::default();
        let once = heuristic_filter(pairs.clone(), &stats, &hf);
        let mut rest = pairs.iter();
        prop_assert!(once.iter().all(|p| rest.any(|q| q == p)), "not an ordered subset");
        prop_assert_eq!(heuristic_filter(once.clone(), &stats, &hf), once);

        let kept = asis_filter(pairs.clone(), &ByLength);
        prop_assert!(kept.len() <= pairs.len());
        prop_assert!(kept.iter().all(|p| ByLength.score(&p.query, &p.chosen) > ByLength.score(&p.query, &p.rejected)));
        prop_assert_eq!(asis_filter(kept.clone(), &ByLength), kept);
    }

    #[test]
    fn comparison_records_round_trip(pairs in prop::collection::vec(pair_strategy(), 0..10)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        serialize_dataset(&pairs, &path).unwrap();
        let back: Vec<ComparisonPair> = deserialize_dataset(&path).unwrap();
        prop_assert_eq!(back, pairs);
    }

    #[test]
    fn query_records_round_trip(texts in prop::collection::vec("[^\n]{1,40}", 1..10)) {
        let queries: Vec<Query> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| Query::new(format!("q{i}"), t.clone()).with_meta("topic", "x"))
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("queries.jsonl");
        serialize_dataset(&queries, &path).unwrap();
        let back: Vec<Query> = deserialize_dataset(&path).unwrap();
        prop_assert_eq!(back, queries);
    }
}
