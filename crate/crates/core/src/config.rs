//! Run configuration.
//!
//! Every knob has a dotted key (`ppo.kl_coeff`, `toyworld.params.hedge_base`).
//! Config files hold one `key = value` per line with `#` comments; values
//! are JSON when they parse as JSON and plain strings otherwise.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::genbackend::tinylm::LmConfig;
use crate::policytrain::ppo::PpoConfig;
use crate::policytrain::sft::SftConfig;
use crate::querygen::MinerConfig;
use crate::rm::RmTrainConfig;
use crate::simulate::SimConfig;
use crate::synthcmp::{HeuristicFilterConfig, SamplingConfig};
use crate::toyworld::ToyParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyworldSection {
    pub topics: usize,
    pub facts_per_topic: usize,
    pub table_seed: u64,
    pub params: ToyParams,
    /// Probability that the toy user ends the conversation after a reply.
    pub user_end_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareSection {
    pub sampling: SamplingConfig,
    pub hf: HeuristicFilterConfig,
    pub use_hf: bool,
    pub use_asis: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub rm: LmConfig,
    /// Backbone of the as-is reward model.
    pub asis: LmConfig,
    pub policy: LmConfig,
    pub pooling: String,
    pub init_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsisSection {
    /// Queries used to draw the out-of-pipeline comparison corpus.
    pub queries: usize,
    /// Generators behind that corpus.
    pub params: ToyParams,
    pub train: RmTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSection {
    #[serde(flatten)]
    pub sim: SimConfig,
    /// Lattice member playing the assistant.
    pub assistant: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub valid_queries: usize,
    pub bon_queries: usize,
    pub bon_ns: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub toyworld: ToyworldSection,
    pub mine: MinerConfig,
    pub compare: CompareSection,
    pub model: ModelSection,
    pub asis: AsisSection,
    pub rm: RmTrainConfig,
    pub simulate: SimulateSection,
    pub sft: SftConfig,
    pub ppo: PpoConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            toyworld: ToyworldSection {
                topics: 30,
                facts_per_topic: 5,
                table_seed: 7,
                params: ToyParams::default(),
                user_end_prob: 0.3,
            },
            mine: MinerConfig {
                target_count: 300,
                ..MinerConfig::default()
            },
            compare: CompareSection {
                sampling: SamplingConfig::default(),
                hf: HeuristicFilterConfig::default(),
                use_hf: true,
                use_asis: true,
            },
            model: ModelSection {
                rm: LmConfig {
                    embed_dim: 16,
                    hidden_dim: 32,
                    max_seq: 192,
                },
                asis: LmConfig {
                    embed_dim: 32,
                    hidden_dim: 64,
                    max_seq: 192,
                },
                policy: LmConfig {
                    embed_dim: 32,
                    hidden_dim: 64,
                    max_seq: 192,
                },
                pooling: "last_token".into(),
                init_seed: 5,
            },
            asis: AsisSection {
                queries: 3000,
                params: ToyParams::community(),
                train: RmTrainConfig {
                    epochs: 3,
                    max_seq: 192,
                    ..RmTrainConfig::default()
                },
            },
            rm: RmTrainConfig {
                max_seq: 192,
                ..RmTrainConfig::default()
            },
            simulate: SimulateSection {
                sim: SimConfig::default(),
                assistant: "C".into(),
            },
            sft: SftConfig {
                max_seq: 192,
                ..SftConfig::default()
            },
            ppo: PpoConfig::default(),
            eval: EvalSection {
                valid_queries: 100,
                bon_queries: 200,
                bon_ns: vec![1, 2, 4, 8],
            },
        }
    }
}

impl RunConfig {
    /// Small enough for the end-to-end demo to finish in about a minute on
    /// one core.
    pub fn demo() -> Self {
        let mut c = RunConfig::default();
        c.toyworld.topics = 20;
        c.mine.target_count = 120;
        c.asis.queries = 1500;
        c.asis.train.epochs = 2;
        c.ppo.episodes = 320;
        // Ten iterations against a small reward model drift far from the
        // reference at the full rate.
        c.ppo.lr = 3e-7;
        c.ppo.lr_min = 3e-7;
        c.eval.valid_queries = 60;
        c.eval.bon_queries = 60;
        c.eval.bon_ns = vec![1, 2, 4];
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(RunConfig::default()),
            "demo" => Ok(RunConfig::demo()),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }

    /// Set one dotted key. The key must already exist.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut tree = serde_json::to_value(&*self).expect("config encodes");
        let mut slot = &mut tree;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        let raw = raw.trim();
        *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        *self = serde_json::from_value(tree)
            .map_err(|e| Error::Config(format!("bad value `{raw}` for `{key}`: {e}")))?;
        Ok(())
    }

    /// Apply `key=value` overrides in order.
    pub fn apply_overrides<'a>(&mut self, items: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for item in items {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message: "expected `key = value`".into(),
            })?;
            self.set(k.trim(), v).map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, base: RunConfig) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = base;
        cfg.apply_text(&text, path)?;
        Ok(cfg)
    }

    /// Flatten to `key = value` lines, the inverse of [`RunConfig::apply_text`].
    pub fn to_text(&self) -> String {
        fn walk(prefix: &str, v: &Value, out: &mut String) {
            match v {
                Value::Object(map) => {
                    for (k, v) in map {
                        let key = if prefix.is_empty() {
                            k.clone()
                        } else {
                            format!("{prefix}.{k}")
                        };
                        walk(&key, v, out);
                    }
                }
                other => {
                    out.push_str(&format!("{prefix} = {other}\n"));
                }
            }
        }
        let mut out = String::new();
        walk(
            "",
            &serde_json::to_value(self).expect("config encodes"),
            &mut out,
        );
        out
    }

    /// Propagate the run seed into every stage that has not been given its
    /// own non-zero seed.
    pub fn seeded(mut self) -> Self {
        let s = self.seed;
        for slot in [
            &mut self.mine.seed,
            &mut self.compare.sampling.seed,
            &mut self.rm.seed,
            &mut self.asis.train.seed,
            &mut self.simulate.sim.seed,
            &mut self.sft.seed,
            &mut self.ppo.seed,
        ] {
            if *slot == 0 {
                *slot = s;
            }
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_keys_override_nested_fields() {
        let mut c = RunConfig::default();
        c.apply_overrides([
            "ppo.kl_coeff=0",
            "toyworld.params.hedge_base = 0.6",
            "ppo.kl_mode=sequence",
        ])
        .unwrap();
        assert_eq!(c.ppo.kl_coeff, 0.0);
        assert_eq!(c.toyworld.params.hedge_base, 0.6);
        assert_eq!(c.ppo.kl_mode, crate::policytrain::ppo::KlMode::Sequence);
        c.set("mine.badwords", r#"["chart"]"#).unwrap();
        assert_eq!(c.mine.badwords, vec!["chart".to_string()]);
        c.set("simulate.best_of_n", "8").unwrap();
        assert_eq!(c.simulate.sim.best_of_n, 8);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let mut c = RunConfig::default();
        assert!(c.set("ppo.nonsense", "1").is_err());
        assert!(c.set("ppo.batch", "many").is_err());
        assert!(c.apply_overrides(["novalue"]).is_err());
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::demo();
        c.seed = 42;
        let text = c.to_text();
        let mut back = RunConfig::default();
        back.apply_text(&text, Path::new("x")).unwrap();
        assert_eq!(back, c);
        let err = back.apply_text("# fine\nbroken line\n", Path::new("cfg"));
        assert!(matches!(err, Err(Error::Parse { line: 2, .. })));
    }
}
