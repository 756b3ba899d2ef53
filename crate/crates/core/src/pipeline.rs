//! Stage-by-stage orchestration over a toy world: every stage reads and
//! writes files in one output directory, so any stage can be rerun alone.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{deserialize_dataset, serialize_dataset};
use crate::error::{Error, Result};
use crate::evalharness::{
    bon_sweep, demo_oracle_quality, oracle_labeled_pairs, ppo_curve_report, rm_accuracy_report,
    EvalReport,
};
use crate::genbackend::checkpoint::{Checkpoint, CheckpointKind};
use crate::genbackend::tinylm::TinyLm;
use crate::genbackend::{SharedBackend, TinyLmBackend};
use crate::policytrain::ppo::train_rlsf;
use crate::policytrain::sft::train_sft;
use crate::querygen::{mine_queries, MinerConfig};
use crate::rm::{save_rm, train_asis_rm, train_rm, Pooling, RewardModel, Scorer};
use crate::rng::{derive_seed, rng_for};
use crate::seed_path;
use crate::simulate::{build_demo_dataset, Roles};
use crate::synthcmp::{build_comparison_dataset, default_lattice, LatticeMember, SamplingConfig};
use crate::toyworld::{community_pairs, KnowledgeTable, OracleScorer, ToyBackend, ToyRole};
use crate::types::{ComparisonPair, Demonstration, Query};

use crate::Lm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Toyworld,
    Mine,
    Asis,
    Compare,
    TrainRm,
    Simulate,
    Sft,
    Ppo,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Toyworld,
        Stage::Mine,
        Stage::Asis,
        Stage::Compare,
        Stage::TrainRm,
        Stage::Simulate,
        Stage::Sft,
        Stage::Ppo,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Toyworld => "toyworld",
            Stage::Mine => "mine-queries",
            Stage::Asis => "train-asis",
            Stage::Compare => "gen-comparisons",
            Stage::TrainRm => "train-rm",
            Stage::Simulate => "simulate",
            Stage::Sft => "train-sft",
            Stage::Ppo => "train-ppo",
            Stage::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.name() == s)
    }

    /// Files the stage reads, relative to the run directory.
    pub fn inputs(self) -> &'static [&'static str] {
        match self {
            Stage::Toyworld => &[],
            Stage::Mine => &["table.json"],
            Stage::Asis => &["table.json"],
            Stage::Compare => &["table.json", "queries.jsonl", "asis.ckpt"],
            Stage::TrainRm => &["comparisons.jsonl"],
            Stage::Simulate => &["table.json", "queries.jsonl", "rm.ckpt"],
            Stage::Sft => &["demos.jsonl"],
            Stage::Ppo => &["queries.jsonl", "sft.ckpt", "rm.ckpt"],
            Stage::Eval => &[
                "table.json",
                "rm.ckpt",
                "sft.ckpt",
                "ppo.ckpt",
                "metrics.jsonl",
            ],
        }
    }

    pub fn outputs(self) -> &'static [&'static str] {
        match self {
            Stage::Toyworld => &["table.json"],
            Stage::Mine => &["queries.jsonl", "mine_stats.json"],
            Stage::Asis => &["community.jsonl", "asis.ckpt"],
            Stage::Compare => &["comparisons.jsonl", "compare_counts.json"],
            Stage::TrainRm => &["rm.ckpt", "rm_log.json"],
            Stage::Simulate => &["demos.jsonl", "simulate_failures.json"],
            Stage::Sft => &["base.ckpt", "sft.ckpt", "sft_log.json"],
            Stage::Ppo => &["ppo.ckpt", "metrics.jsonl"],
            Stage::Eval => &["reports"],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub fingerprint: String,
}

/// Ordered stages with their declared files and the fingerprint of the
/// configuration each one sees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    // Kept out of the file so reruns in other directories stay byte-identical.
    #[serde(skip)]
    pub run_dir: PathBuf,
    pub config: RunConfig,
    pub stages: Vec<StageRecord>,
}

fn stage_config(cfg: &RunConfig, stage: Stage) -> serde_json::Value {
    use serde_json::json;
    match stage {
        Stage::Toyworld => json!([
            cfg.toyworld.topics,
            cfg.toyworld.facts_per_topic,
            cfg.toyworld.table_seed
        ]),
        Stage::Mine => json!(cfg.mine),
        Stage::Asis => json!([cfg.asis, cfg.toyworld, cfg.model.rm]),
        Stage::Compare => json!([cfg.compare, cfg.toyworld.params]),
        Stage::TrainRm => json!([cfg.rm, cfg.model.rm, cfg.model.pooling]),
        Stage::Simulate => json!([cfg.simulate, cfg.toyworld]),
        Stage::Sft => json!([cfg.sft, cfg.model.policy, cfg.model.init_seed]),
        Stage::Ppo => json!(cfg.ppo),
        Stage::Eval => json!([cfg.eval, cfg.compare.sampling, cfg.simulate]),
    }
}

impl PipelineManifest {
    pub fn new(run_dir: impl Into<PathBuf>, config: RunConfig) -> Self {
        let config = config.seeded();
        let stages = Stage::ALL
            .iter()
            .map(|&stage| StageRecord {
                stage,
                inputs: stage.inputs().iter().map(|s| s.to_string()).collect(),
                outputs: stage.outputs().iter().map(|s| s.to_string()).collect(),
                fingerprint: crate::evalharness::fingerprint(&stage_config(&config, stage)),
            })
            .collect();
        PipelineManifest {
            run_dir: run_dir.into(),
            config,
            stages,
        }
    }

    /// Keep stages from `first` onwards.
    pub fn starting_at(mut self, first: Stage) -> Self {
        self.stages.retain(|s| s.stage >= first);
        self
    }

    pub fn only(mut self, stage: Stage) -> Self {
        self.stages.retain(|s| s.stage == stage);
        self
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.run_dir.join(file)
    }

    fn check_inputs(&self, rec: &StageRecord) -> Result<()> {
        let missing: Vec<String> = rec
            .inputs
            .iter()
            .filter(|i| *i != "asis.ckpt" || self.config.compare.use_asis)
            .map(|i| self.path(i))
            .filter(|p| !p.exists())
            .map(|p| p.display().to_string())
            .collect();
        if missing.is_empty() {
            return Ok(());
        }
        Err(Error::Precondition {
            stage: rec.stage.name().to_string(),
            message: format!("missing input {}", missing.join(", ")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub fingerprint: String,
    pub counts: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub completed: Vec<StageSummary>,
    pub failed_stage: Option<String>,
    pub failure: Option<String>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut body = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Invalid(format!("cannot encode {}: {e}", path.display())))?;
    body.push('\n');
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn load_lm(path: &Path, kind: CheckpointKind) -> Result<Lm> {
    let ck = Checkpoint::load(path)?.expect_kind(kind, path)?;
    ck.lm().ok_or_else(|| Error::Checkpoint {
        path: path.to_path_buf(),
        message: "parameter count does not match the stored shape".into(),
    })
}

pub fn lattice_members(table: &Arc<KnowledgeTable>, cfg: &RunConfig) -> Vec<LatticeMember> {
    default_lattice()
        .iter()
        .map(|c| LatticeMember {
            config: c.clone(),
            backend: Arc::new(ToyBackend::assistant(
                c,
                &cfg.toyworld.params,
                table.clone(),
            )) as SharedBackend,
            preamble: String::new(),
        })
        .collect()
}

pub fn toy_roles(table: &Arc<KnowledgeTable>, cfg: &RunConfig) -> Result<Roles> {
    let lattice = default_lattice();
    let member = lattice
        .iter()
        .find(|c| c.name == cfg.simulate.assistant)
        .ok_or_else(|| {
            Error::Config(format!(
                "no lattice member named `{}`",
                cfg.simulate.assistant
            ))
        })?;
    Ok(Roles {
        assistant: Arc::new(ToyBackend::assistant(
            member,
            &cfg.toyworld.params,
            table.clone(),
        )),
        user: Arc::new(ToyBackend::new(
            "toy:user",
            table.clone(),
            ToyRole::User {
                end_prob: cfg.toyworld.user_end_prob,
            },
        )),
        assistant_preamble: String::new(),
        user_preamble: String::new(),
    })
}

fn pooling(cfg: &RunConfig) -> Result<Pooling> {
    Pooling::parse(&cfg.model.pooling)
        .ok_or_else(|| Error::Config(format!("unknown pooling `{}`", cfg.model.pooling)))
}

fn fresh_lm(cfg: &crate::genbackend::tinylm::LmConfig, seed: u64, label: &str) -> Lm {
    TinyLm::new(*cfg, &mut rng_for(seed, &seed_path!["init", label]))
}

/// Run one stage; returns the counts recorded in the run summary.
pub fn run_stage(m: &PipelineManifest, stage: Stage) -> Result<BTreeMap<String, f64>> {
    let cfg = &m.config;
    let mut counts = BTreeMap::new();
    let table = || -> Result<Arc<KnowledgeTable>> {
        Ok(Arc::new(KnowledgeTable::load(m.path("table.json"))?))
    };
    match stage {
        Stage::Toyworld => {
            let t = &cfg.toyworld;
            let table = KnowledgeTable::generate(t.topics, t.facts_per_topic, t.table_seed);
            table.save(m.path("table.json"))?;
            counts.insert("topics".into(), table.topics.len() as f64);
        }
        Stage::Mine => {
            let table = table()?;
            let seeds: Vec<String> = table.make_queries(12).into_iter().map(|q| q.text).collect();
            let miner = MinerConfig {
                seed_queries: seeds,
                ..cfg.mine.clone()
            };
            let backend = ToyBackend::new("toy:miner", table, ToyRole::QueryMiner);
            let (queries, stats) = mine_queries(&miner, &backend)?;
            serialize_dataset(&queries, m.path("queries.jsonl"))?;
            write_json(&m.path("mine_stats.json"), &stats)?;
            counts.insert("queries".into(), queries.len() as f64);
        }
        Stage::Asis => {
            let table = table()?;
            let queries = table.make_queries(cfg.asis.queries);
            let seed = derive_seed(cfg.seed, &seed_path!["community"]);
            let pairs = community_pairs(&table, &queries, &cfg.asis.params, seed)?;
            serialize_dataset(&pairs, m.path("community.jsonl"))?;
            let (rm, log) = train_asis_rm(
                fresh_lm(&cfg.model.asis, cfg.model.init_seed, "asis"),
                &pairs,
                &cfg.asis.train,
            )?;
            save_rm(&rm, m.path("asis.ckpt"), "asis", &BTreeMap::new())?;
            counts.insert("pairs".into(), pairs.len() as f64);
            if let Some(a) = log.final_valid_accuracy() {
                counts.insert("valid_accuracy".into(), a);
            }
        }
        Stage::Compare => {
            let table = table()?;
            let queries: Vec<Query> = deserialize_dataset(m.path("queries.jsonl"))?;
            let members = lattice_members(&table, cfg);
            let asis = if cfg.compare.use_asis {
                Some(RewardModel::<f32>::load(m.path("asis.ckpt"))?)
            } else {
                None
            };
            let hf = cfg.compare.use_hf.then_some(&cfg.compare.hf);
            let ds = build_comparison_dataset(
                &queries,
                &members,
                hf,
                asis.as_ref().map(|a| a as &dyn Scorer),
                &cfg.compare.sampling,
            )?;
            serialize_dataset(&ds.pairs, m.path("comparisons.jsonl"))?;
            write_json(&m.path("compare_counts.json"), &(&ds.counts, &ds.rejects))?;
            counts.insert("pairs".into(), ds.pairs.len() as f64);
        }
        Stage::TrainRm => {
            let pairs: Vec<ComparisonPair> = deserialize_dataset(m.path("comparisons.jsonl"))?;
            let (train, valid) = crate::genbackend::lm_train::split_holdout(
                pairs,
                cfg.rm.valid_frac,
                derive_seed(cfg.rm.seed, &seed_path!["rm-split"]),
            );
            let valid = crate::rm::disjoint_valid(&train, valid);
            let mut rm = RewardModel::new(
                fresh_lm(&cfg.model.rm, cfg.model.init_seed, "rm"),
                pooling(cfg)?,
            );
            let log = train_rm(&mut rm, &train, &valid, &cfg.rm)?;
            save_rm(&rm, m.path("rm.ckpt"), "main", &BTreeMap::new())?;
            write_json(&m.path("rm_log.json"), &log)?;
            counts.insert("train_pairs".into(), train.len() as f64);
            if let Some(a) = log.final_valid_accuracy() {
                counts.insert("valid_accuracy".into(), a);
            }
        }
        Stage::Simulate => {
            let table = table()?;
            let rm = RewardModel::<f32>::load(m.path("rm.ckpt"))?;
            let queries: Vec<Query> = deserialize_dataset(m.path("queries.jsonl"))?;
            let roles = toy_roles(&table, cfg)?;
            let scorer = (cfg.simulate.sim.best_of_n > 1).then_some(&rm as &dyn Scorer);
            let ds = build_demo_dataset(&queries, &cfg.simulate.sim, &roles, scorer, false)?;
            let demos: Vec<Demonstration> = ds.demos.into_iter().map(|(_, d)| d).collect();
            serialize_dataset(&demos, m.path("demos.jsonl"))?;
            write_json(&m.path("simulate_failures.json"), &ds.failures)?;
            counts.insert("demos".into(), demos.len() as f64);
            counts.insert("failures".into(), ds.failures.len() as f64);
        }
        Stage::Sft => {
            let demos: Vec<Demonstration> = deserialize_dataset(m.path("demos.jsonl"))?;
            let mut policy = fresh_lm(&cfg.model.policy, cfg.model.init_seed, "policy");
            Checkpoint::from_lm(CheckpointKind::LanguageModel, &policy)
                .save(m.path("base.ckpt"))?;
            let log = train_sft(&mut policy, &demos, &cfg.sft)?;
            Checkpoint::from_lm(CheckpointKind::Policy, &policy).save(m.path("sft.ckpt"))?;
            write_json(&m.path("sft_log.json"), &log)?;
            if let Some(l) = log.final_heldout() {
                counts.insert("heldout_loss".into(), l);
            }
        }
        Stage::Ppo => {
            let mut policy = load_lm(&m.path("sft.ckpt"), CheckpointKind::Policy)?;
            let rm = RewardModel::<f32>::load(m.path("rm.ckpt"))?;
            let queries: Vec<Query> = deserialize_dataset(m.path("queries.jsonl"))?;
            let prompts: Vec<String> = queries.into_iter().map(|q| q.text).collect();
            let path = m.path("metrics.jsonl");
            let mut file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let log = train_rlsf(&mut policy, &rm, &prompts, &cfg.ppo, Some(&mut file))?;
            Checkpoint::from_lm(CheckpointKind::Policy, &policy).save(m.path("ppo.ckpt"))?;
            counts.insert("episodes".into(), log.episode_rewards.len() as f64);
            if let Some(last) = log.iterations.last() {
                counts.insert("final_mean_kl".into(), last.mean_kl);
            }
        }
        Stage::Eval => {
            let reports = run_eval(m, &table()?)?;
            let dir = m.path("reports");
            for r in &reports {
                r.save(&dir)?;
                for (k, v) in &r.metrics {
                    counts.insert(format!("{}.{k}", r.name), v.value);
                }
            }
        }
    }
    Ok(counts)
}

/// Mean oracle quality of a policy's single-turn answers to `queries`.
pub fn policy_oracle_quality(
    policy: &Lm,
    queries: &[Query],
    oracle: &dyn Scorer,
    sampling: &SamplingConfig,
    max_tokens: usize,
) -> Result<f64> {
    let backend = TinyLmBackend::new("policy", Arc::new(policy.clone()));
    let roles = Roles {
        assistant: Arc::new(backend),
        user: Arc::new(ToyBackend::new(
            "unused",
            Arc::new(KnowledgeTable::generate(1, 1, 0)),
            ToyRole::User { end_prob: 1.0 },
        )),
        assistant_preamble: String::new(),
        user_preamble: String::new(),
    };
    let sim = crate::simulate::SimConfig {
        max_turns: 1,
        best_of_n: 1,
        temperature: sampling.temperature,
        top_p: sampling.top_p,
        max_tokens,
        seed: sampling.seed,
        ..crate::simulate::SimConfig::default()
    };
    let ds = build_demo_dataset(queries, &sim, &roles, None, false)?;
    // Queries with no usable answer count as quality 0.
    let total: f64 = ds
        .demos
        .iter()
        .map(|(_, d)| demo_oracle_quality(d, oracle))
        .sum();
    Ok(total / queries.len().max(1) as f64)
}

fn run_eval(m: &PipelineManifest, table: &Arc<KnowledgeTable>) -> Result<Vec<EvalReport>> {
    let cfg = &m.config;
    let oracle = OracleScorer {
        table: table.clone(),
    };
    let rm = RewardModel::<f32>::load(m.path("rm.ckpt"))?;
    // Held-out queries: fresh ids, so they never coincide with mined ones.
    let held_out: Vec<Query> = table
        .make_queries(cfg.eval.valid_queries)
        .into_iter()
        .map(|q| Query {
            id: format!("eval-{}", q.id),
            ..q
        })
        .collect();
    let sampling = SamplingConfig {
        seed: derive_seed(cfg.seed, &seed_path!["eval"]),
        ..cfg.compare.sampling
    };
    let members = lattice_members(table, cfg);
    let pairs = oracle_labeled_pairs(&held_out, &members, &oracle, &sampling)?;
    let mut reports = vec![rm_accuracy_report(&rm, &pairs, cfg.seed)?];
    reports.push(ppo_curve_report(m.path("metrics.jsonl"))?);
    let roles = toy_roles(table, cfg)?;
    let bon_q: Vec<Query> = held_out
        .iter()
        .take(cfg.eval.bon_queries)
        .cloned()
        .collect();
    let sim = crate::simulate::SimConfig {
        seed: derive_seed(cfg.seed, &seed_path!["eval-bon"]),
        ..cfg.simulate.sim.clone()
    };
    reports.push(bon_sweep(&bon_q, &roles, &sim, &rm, &oracle, &cfg.eval.bon_ns)?.report);
    let sft = load_lm(&m.path("sft.ckpt"), CheckpointKind::Policy)?;
    let ppo = load_lm(&m.path("ppo.ckpt"), CheckpointKind::Policy)?;
    let mut pq = EvalReport::new(
        "policy-quality",
        &(cfg.ppo.rollout_max_tokens, &sampling),
        cfg.seed,
    );
    for (name, lm) in [("sft", &sft), ("ppo", &ppo)] {
        let q = policy_oracle_quality(
            lm,
            &held_out,
            &oracle,
            &sampling,
            cfg.ppo.rollout_max_tokens,
        )?;
        pq.insert(format!("{name}_oracle"), q, held_out.len());
    }
    reports.push(pq);
    Ok(reports)
}

/// Execute the manifest's stages in order, stopping at the first failure.
/// `summary.json` and `manifest.json` are written either way.
pub fn run_pipeline(m: &PipelineManifest) -> Result<RunSummary> {
    std::fs::create_dir_all(&m.run_dir).map_err(|e| Error::io(&m.run_dir, e))?;
    write_json(&m.path("manifest.json"), m)?;
    let mut summary = RunSummary::default();
    let mut outcome = Ok(());
    for rec in &m.stages {
        log::info!("stage {}", rec.stage.name());
        let result = m.check_inputs(rec).and_then(|_| run_stage(m, rec.stage));
        match result {
            Ok(counts) => summary.completed.push(StageSummary {
                stage: rec.stage.name().to_string(),
                fingerprint: rec.fingerprint.clone(),
                counts,
            }),
            Err(e) => {
                summary.failed_stage = Some(rec.stage.name().to_string());
                summary.failure = Some(e.to_string());
                outcome = Err(e);
                break;
            }
        }
    }
    write_json(&m.path("summary.json"), &summary)?;
    outcome.map(|_| summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip_and_order() {
        for s in Stage::ALL {
            assert_eq!(Stage::parse(s.name()), Some(s));
        }
        assert!(Stage::Toyworld < Stage::Eval);
    }

    #[test]
    fn every_input_is_produced_upstream() {
        for (i, s) in Stage::ALL.iter().enumerate() {
            for input in s.inputs() {
                assert!(
                    Stage::ALL[..i].iter().any(|u| u.outputs().contains(input)),
                    "{input} of {} has no producer",
                    s.name()
                );
            }
        }
    }

    #[test]
    fn simulate_without_rm_is_a_precondition_error() {
        let dir = tempfile::tempdir().unwrap();
        let m = PipelineManifest::new(dir.path(), RunConfig::demo()).starting_at(Stage::Simulate);
        match run_pipeline(&m) {
            Err(Error::Precondition { stage, .. }) => assert_eq!(stage, "simulate"),
            other => panic!("unexpected {other:?}"),
        }
        let summary: RunSummary = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("summary.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(summary.failed_stage.as_deref(), Some("simulate"));
    }
}
