//! JSONL dataset files: one record per line, UTF-8.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::types::{ComparisonPair, Demonstration, Query};

/// A record type stored in a JSONL dataset file.
pub trait Record: Serialize + DeserializeOwned {
    const KIND: &'static str;

    /// Identity that must be unique within one file, if the kind has one.
    fn unique_key(&self) -> Option<&str> {
        None
    }
}

impl Record for Query {
    const KIND: &'static str = "query";
    fn unique_key(&self) -> Option<&str> {
        Some(&self.id)
    }
}

impl Record for ComparisonPair {
    const KIND: &'static str = "comparison";
}

impl Record for Demonstration {
    const KIND: &'static str = "demonstration";
}

pub fn serialize_dataset<R: Record>(records: &[R], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::Invalid(format!("cannot encode {} record: {e}", R::KIND)))?;
        out.write_all(line.as_bytes())
            .and_then(|_| out.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn deserialize_dataset<R: Record>(path: impl AsRef<Path>) -> Result<Vec<R>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_lines(BufReader::new(file), path)
}

fn parse_lines<R: Record>(reader: impl BufRead, path: &Path) -> Result<Vec<R>> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        // BufRead::lines strips "\n" and "\r\n" alike.
        if line.trim().is_empty() {
            continue;
        }
        let record: R = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: format!("invalid {} record: {e}", R::KIND),
        })?;
        if let Some(key) = record.unique_key() {
            if !seen.insert(key.to_string()) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: format!("duplicate {} id `{key}`", R::KIND),
                });
            }
        }
        records.push(record);
    }
    Ok(records)
}

/// Read a plain text file with one entry per non-blank line.
pub fn read_lines(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// Convert HH-RLHF style records (`{"chosen": "...", "rejected": "..."}`, each a
/// full `Human:`/`Assistant:` transcript) into comparison pairs.
///
/// The shared prefix up to the last `Assistant:` marker becomes the query and
/// the final assistant replies become the two responses.
pub fn convert_hh_rlhf(path: impl AsRef<Path>) -> Result<Vec<ComparisonPair>> {
    #[derive(serde::Deserialize)]
    struct HhRecord {
        chosen: String,
        rejected: String,
    }
    const MARKER: &str = "\n\nAssistant:";
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let rec: HhRecord = serde_json::from_str(&line)
            .map_err(|e| parse_err(format!("invalid HH record: {e}")))?;
        let split = |s: &str| -> Option<(String, String)> {
            let at = s.rfind(MARKER)?;
            let context = s[..at]
                .trim()
                .trim_start_matches("Human:")
                .trim()
                .to_string();
            let reply = s[at + MARKER.len()..].trim().to_string();
            Some((context, reply))
        };
        let (Some((ctx, chosen)), Some((_, rejected))) = (split(&rec.chosen), split(&rec.rejected))
        else {
            return Err(parse_err("record lacks an `Assistant:` turn".into()));
        };
        if chosen == rejected {
            log::debug!(
                "{}:{}: identical responses skipped",
                path.display(),
                idx + 1
            );
            continue;
        }
        let pair = ComparisonPair::new(
            format!("hh-{}", idx + 1),
            ctx,
            chosen,
            rejected,
            "external",
            "external",
        )
        .map_err(|e| parse_err(e.to_string()))?;
        out.push(pair);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Conversation, DemoSource, Turn};

    fn pair() -> ComparisonPair {
        ComparisonPair::new(
            "q1",
            "describe velmora.",
            "it keeps 4 reeds.",
            "well, hm.",
            "A",
            "E",
        )
        .unwrap()
    }

    #[test]
    fn empty_dataset_is_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.jsonl");
        serialize_dataset::<Query>(&[], &p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap().len(), 0);
        assert!(deserialize_dataset::<Query>(&p).unwrap().is_empty());
    }

    #[test]
    fn comparison_line_uses_external_field_names() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        serialize_dataset(&[pair()], &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 1);
        let v: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            [
                "chosen",
                "chosen_config",
                "query",
                "query_id",
                "rejected",
                "rejected_config"
            ]
        );
        assert_eq!(
            deserialize_dataset::<ComparisonPair>(&p).unwrap(),
            vec![pair()]
        );
    }

    #[test]
    fn missing_field_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        let good = serde_json::to_string(&pair()).unwrap();
        let bad = r#"{"query_id":"q2","query":"x","rejected":"r","chosen_config":"A","rejected_config":"B"}"#;
        std::fs::write(&p, format!("{good}\n{bad}\n")).unwrap();
        let err = deserialize_dataset::<ComparisonPair>(&p).unwrap_err();
        match err {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("chosen"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invariant_violation_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        let same = r#"{"query_id":"q","query":"x","chosen":"r","rejected":"r","chosen_config":"A","rejected_config":"B"}"#;
        std::fs::write(&p, same).unwrap();
        let err = deserialize_dataset::<ComparisonPair>(&p).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
        assert!(err.to_string().contains("identical"));

        let alternation = r#"{"turns":[{"speaker":"assistant","text":"a"},{"speaker":"human","text":"b"}],"source":"rmsp","rm_scores":null}"#;
        std::fs::write(&p, alternation).unwrap();
        let err = deserialize_dataset::<Demonstration>(&p).unwrap_err();
        assert!(err.to_string().contains("alternate"), "{err}");
    }

    #[test]
    fn duplicate_query_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.jsonl");
        std::fs::write(
            &p,
            "{\"id\":\"a\",\"text\":\"x\",\"meta\":{}}\n{\"id\":\"a\",\"text\":\"y\",\"meta\":{}}\n",
        )
        .unwrap();
        let err = deserialize_dataset::<Query>(&p).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn crlf_and_lf_parse_identically() {
        let dir = tempfile::tempdir().unwrap();
        let demo = Demonstration::new(
            Conversation::new(vec![
                Turn::human("hi").unwrap(),
                Turn::assistant("hello").unwrap(),
            ])
            .unwrap(),
            DemoSource::Rmsp,
            Some(vec![0.25]),
        )
        .unwrap();
        let line = serde_json::to_string(&demo).unwrap();
        let lf = dir.path().join("lf.jsonl");
        let crlf = dir.path().join("crlf.jsonl");
        std::fs::write(&lf, format!("{line}\n{line}\n")).unwrap();
        std::fs::write(&crlf, format!("{line}\r\n{line}\r\n")).unwrap();
        let a = deserialize_dataset::<Demonstration>(&lf).unwrap();
        let b = deserialize_dataset::<Demonstration>(&crlf).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, vec![demo.clone(), demo]);
    }

    #[test]
    fn demonstration_schema() {
        let demo = Demonstration::new(
            Conversation::new(vec![
                Turn::human("hi").unwrap(),
                Turn::assistant("yo").unwrap(),
            ])
            .unwrap(),
            DemoSource::SelfPlay,
            None,
        )
        .unwrap();
        let v = serde_json::to_value(&demo).unwrap();
        assert_eq!(
            v,
            serde_json::json!({
                "turns": [{"speaker": "human", "text": "hi"}, {"speaker": "assistant", "text": "yo"}],
                "source": "self_play",
                "rm_scores": null
            })
        );
    }

    #[test]
    fn io_error_names_path() {
        let err = deserialize_dataset::<Query>("/nonexistent/dir/q.jsonl").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/q.jsonl"));
        let err = serialize_dataset::<Query>(&[], "/nonexistent/dir/q.jsonl").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/q.jsonl"));
    }

    #[test]
    fn hh_rlhf_conversion() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("hh.jsonl");
        let rec = serde_json::json!({
            "chosen": "\n\nHuman: How do I bake bread?\n\nAssistant: Mix flour, water, yeast and salt.",
            "rejected": "\n\nHuman: How do I bake bread?\n\nAssistant: No idea."
        });
        std::fs::write(&p, format!("{rec}\n")).unwrap();
        let pairs = convert_hh_rlhf(&p).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].query, "How do I bake bread?");
        assert_eq!(pairs[0].chosen, "Mix flour, water, yeast and salt.");
        assert_eq!(pairs[0].rejected, "No idea.");
    }
}
