use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use synthfeed::config::RunConfig;
use synthfeed::dataset::{convert_hh_rlhf, deserialize_dataset, read_lines, serialize_dataset};
use synthfeed::evalharness::{
    ablation_run, bon_sweep, mc_eval, ppo_curve_report, rm_accuracy_report, AblationSetup, Arm,
    EvalReport, McItem,
};
use synthfeed::genbackend::checkpoint::{Checkpoint, CheckpointKind};
use synthfeed::genbackend::http::{HttpBackend, HttpConfig};
use synthfeed::genbackend::{SharedBackend, TinyLmBackend};
use synthfeed::pipeline::{lattice_members, run_pipeline, toy_roles, PipelineManifest, Stage};
use synthfeed::policytrain::ppo::train_rlsf;
use synthfeed::policytrain::sft::train_sft;
use synthfeed::querygen::{mine_queries, MinerConfig};
use synthfeed::rm::{save_rm, train_asis_rm, train_rm, Pooling, RewardModel, Scorer};
use synthfeed::rng::rng_for;
use synthfeed::simulate::{build_demo_dataset, Roles};
use synthfeed::synthcmp::{build_comparison_dataset, LatticeMember};
use synthfeed::toyworld::{community_pairs, KnowledgeTable, OracleScorer, ToyBackend, ToyRole};
use synthfeed::types::{ComparisonPair, Demonstration, GeneratorConfig, Query};
use synthfeed::Lm;

#[derive(Parser)]
#[command(
    name = "synthfeed",
    version,
    about = "Alignment learning from synthetic feedback"
)]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true, env = "SYNTHFEED_CONFIG")]
    config: Option<PathBuf>,
    /// Base configuration: `default` or `demo`.
    #[arg(
        long,
        global = true,
        env = "SYNTHFEED_PRESET",
        default_value = "default"
    )]
    preset: String,
    /// Override one config key, e.g. `--set ppo.kl_coeff=0`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, global = true, env = "SYNTHFEED_SEED")]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "SYNTHFEED_JOBS")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a toy knowledge table.
    Toyworld {
        #[command(subcommand)]
        action: ToyworldCmd,
    },
    /// Mine diverse queries by few-shot prompting.
    MineQueries(MineArgs),
    /// Sample the generator lattice and emit post-validated comparisons.
    GenComparisons(CompareArgs),
    /// Train a reward model on comparisons.
    TrainRm(TrainRmArgs),
    /// Synthesize demonstrations by (reward-guided) self-play.
    Simulate(SimulateArgs),
    /// Supervised fine-tuning on demonstrations.
    TrainSft(SftArgs),
    /// PPO against a reward model.
    TrainPpo(PpoArgs),
    /// Evaluation reports.
    Eval {
        #[command(subcommand)]
        action: EvalCmd,
    },
    /// Run pipeline stages from the configuration into one directory.
    Run(RunArgs),
    /// The whole pipeline on a small toy world.
    DemoE2e(RunArgs),
}

#[derive(Subcommand)]
enum ToyworldCmd {
    Init {
        #[arg(long, default_value_t = 50)]
        topics: usize,
        #[arg(long, default_value_t = 5)]
        facts_per_topic: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Where generations come from.
#[derive(Args, Clone)]
struct BackendArgs {
    /// `toy` (needs --table), `lm:PATH` for a checkpoint, or an http(s) URL.
    #[arg(long, default_value = "toy")]
    backend: String,
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Args)]
struct MineArgs {
    /// One seed query per line.
    #[arg(long)]
    seeds: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    queries: PathBuf,
    /// JSON list of generator configurations; the default lattice otherwise.
    #[arg(long)]
    configs: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    no_hf: bool,
    #[arg(long)]
    no_asis: bool,
    #[arg(long)]
    asis_model: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct TrainRmArgs {
    #[arg(long, required_unless_present = "community_table")]
    data: Option<PathBuf>,
    #[arg(long)]
    valid_frac: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Tag the model as an as-is filter.
    #[arg(long)]
    asis: bool,
    /// Read `{"chosen", "rejected"}` transcripts instead of comparison records.
    #[arg(long)]
    hh_rlhf: bool,
    /// Train on toy out-of-pipeline pairs drawn from this table instead of --data.
    #[arg(long, conflicts_with = "data")]
    community_table: Option<PathBuf>,
    /// Initialize from this language model instead of a fresh one.
    #[arg(long)]
    base: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    rm: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    turns: Option<usize>,
    /// Write every considered candidate here.
    #[arg(long)]
    candidates: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct SftArgs {
    #[arg(long)]
    demos: PathBuf,
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PpoArgs {
    #[arg(long)]
    policy: PathBuf,
    #[arg(long)]
    rm: PathBuf,
    /// Queries (`.jsonl`) or one prompt per line.
    #[arg(long)]
    prompts: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    metrics: PathBuf,
}

#[derive(Subcommand)]
enum EvalCmd {
    RmAccuracy {
        #[arg(long)]
        rm: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    Ablation {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        asis_model: Option<PathBuf>,
        /// Comma-separated subset of full,no_hf,no_asis.
        #[arg(long, default_value = "full,no_hf,no_asis")]
        arms: String,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    BonSweep {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        rm: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        ns: Vec<usize>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    Mc {
        #[arg(long)]
        policy: PathBuf,
        /// JSONL of {prompt, options, answer_index}.
        #[arg(long)]
        items: PathBuf,
        #[arg(long)]
        raw: bool,
    },
    PpoCurve {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    out: PathBuf,
    /// First stage to run.
    #[arg(long)]
    from: Option<String>,
    /// Run a single stage.
    #[arg(long)]
    only: Option<String>,
}

fn load_config(cli: &Cli, preset: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::preset(preset)?;
    if let Some(path) = &cli.config {
        cfg = RunConfig::load(path, cfg)?;
    }
    cfg.apply_overrides(cli.overrides.iter().map(String::as_str))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg.seeded())
}

fn load_table(path: Option<&Path>) -> Result<Arc<KnowledgeTable>> {
    let path = path.context("--table is required for the toy backend")?;
    Ok(Arc::new(KnowledgeTable::load(path)?))
}

fn load_lm(path: &Path) -> Result<Lm> {
    let ck = Checkpoint::load(path)?;
    ck.lm().with_context(|| {
        format!(
            "{}: parameter count does not match its shape",
            path.display()
        )
    })
}

fn backend(args: &BackendArgs, role: ToyRole) -> Result<SharedBackend> {
    let spec = args.backend.as_str();
    if spec == "toy" {
        return Ok(Arc::new(ToyBackend::new(
            "toy",
            load_table(args.table.as_deref())?,
            role,
        )));
    }
    if let Some(path) = spec.strip_prefix("lm:") {
        return Ok(Arc::new(TinyLmBackend::new(
            spec,
            Arc::new(load_lm(Path::new(path))?),
        )));
    }
    if spec.starts_with("http://") || spec.starts_with("https://") {
        let cfg = HttpConfig {
            base_url: spec.to_string(),
            ..HttpConfig::default()
        };
        return Ok(Arc::new(HttpBackend::new(spec, cfg)?));
    }
    bail!("unknown backend `{spec}`")
}

fn read_queries(path: &Path) -> Result<Vec<Query>> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        return Ok(deserialize_dataset(path)?);
    }
    Ok(read_lines(path)?
        .into_iter()
        .enumerate()
        .map(|(i, t)| Query::new(format!("q{i:05}"), t))
        .collect())
}

fn emit(report: &EvalReport, out_dir: Option<&Path>) -> Result<()> {
    print!("{}", report.to_table());
    if let Some(dir) = out_dir {
        report.save(dir)?;
    }
    Ok(())
}

fn fresh(cfg: &synthfeed::genbackend::tinylm::LmConfig, seed: u64) -> Lm {
    Lm::new(*cfg, &mut rng_for(seed, &[]))
}

fn pooling(cfg: &RunConfig) -> Result<Pooling> {
    Pooling::parse(&cfg.model.pooling)
        .with_context(|| format!("unknown pooling `{}`", cfg.model.pooling))
}

fn run(cli: Cli) -> Result<()> {
    let preset = if matches!(cli.command, Command::DemoE2e(_)) && cli.preset == "default" {
        "demo".to_string()
    } else {
        cli.preset.clone()
    };
    let cfg = load_config(&cli, &preset)?;
    match cli.command {
        Command::Toyworld {
            action:
                ToyworldCmd::Init {
                    topics,
                    facts_per_topic,
                    out,
                },
        } => {
            let table = KnowledgeTable::generate(topics, facts_per_topic, cfg.toyworld.table_seed);
            table.save(&out)?;
            println!("{} topics written to {}", table.topics.len(), out.display());
        }
        Command::MineQueries(a) => {
            let miner = MinerConfig {
                seed_queries: read_lines(&a.seeds)?,
                target_count: a.count,
                ..cfg.mine.clone()
            };
            let b = backend(&a.backend, ToyRole::QueryMiner)?;
            let (queries, stats) = mine_queries(&miner, b.as_ref())?;
            serialize_dataset(&queries, &a.out)?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
        Command::GenComparisons(a) => {
            let queries = read_queries(&a.queries)?;
            let members: Vec<LatticeMember> = match &a.configs {
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .with_context(|| format!("reading {}", path.display()))?;
                    let configs: Vec<GeneratorConfig> = serde_json::from_str(&text)?;
                    let table = load_table(a.backend.table.as_deref()).ok();
                    configs
                        .into_iter()
                        .map(|c| {
                            let b: SharedBackend = match (&table, a.backend.backend.as_str()) {
                                (Some(t), "toy") => Arc::new(ToyBackend::assistant(
                                    &c,
                                    &cfg.toyworld.params,
                                    t.clone(),
                                )),
                                _ => backend(&a.backend, ToyRole::QueryMiner)?,
                            };
                            Ok(LatticeMember {
                                config: c,
                                backend: b,
                                preamble: String::new(),
                            })
                        })
                        .collect::<Result<_>>()?
                }
                None => lattice_members(&load_table(a.backend.table.as_deref())?, &cfg),
            };
            let asis = match (&a.asis_model, a.no_asis) {
                (Some(p), false) => Some(RewardModel::<f32>::load(p)?),
                (None, false) => {
                    log::warn!("no --asis-model given; skipping the as-is filter");
                    None
                }
                _ => None,
            };
            let hf = (!a.no_hf).then_some(&cfg.compare.hf);
            let ds = build_comparison_dataset(
                &queries,
                &members,
                hf,
                asis.as_ref().map(|m| m as &dyn Scorer),
                &cfg.compare.sampling,
            )?;
            serialize_dataset(&ds.pairs, &a.out)?;
            println!("{}", serde_json::to_string_pretty(&ds.counts)?);
        }
        Command::TrainRm(a) => {
            let mut rm_cfg = if a.asis { cfg.asis.train } else { cfg.rm };
            if let Some(f) = a.valid_frac {
                rm_cfg.valid_frac = f;
            }
            let pairs: Vec<ComparisonPair> = if let Some(t) = &a.community_table {
                let table = KnowledgeTable::load(t)?;
                let qs = table.make_queries(cfg.asis.queries);
                community_pairs(&table, &qs, &cfg.asis.params, cfg.seed)?
            } else {
                let data = a.data.as_ref().context("--data is required")?;
                if a.hh_rlhf {
                    convert_hh_rlhf(data)?
                } else {
                    deserialize_dataset(data)?
                }
            };
            let backbone = match &a.base {
                Some(p) => load_lm(p)?,
                None if a.asis => fresh(&cfg.model.asis, cfg.model.init_seed),
                None => fresh(&cfg.model.rm, cfg.model.init_seed),
            };
            let (rm, log, role) = if a.asis {
                let (rm, log) = train_asis_rm(backbone, &pairs, &rm_cfg)?;
                (rm, log, "asis")
            } else {
                let (train, valid) = synthfeed::genbackend::lm_train::split_holdout(
                    pairs,
                    rm_cfg.valid_frac,
                    rm_cfg.seed,
                );
                let valid = synthfeed::rm::disjoint_valid(&train, valid);
                let mut rm = RewardModel::new(backbone, pooling(&cfg)?);
                let log = train_rm(&mut rm, &train, &valid, &rm_cfg)?;
                (rm, log, "main")
            };
            save_rm(&rm, &a.out, role, &BTreeMap::new())?;
            println!(
                "{}",
                serde_json::to_string_pretty(&log.epoch_valid_accuracy)?
            );
        }
        Command::Simulate(a) => {
            let mut sim = cfg.simulate.sim.clone();
            if let Some(n) = a.n {
                sim.best_of_n = n;
            }
            if let Some(t) = a.turns {
                sim.max_turns = t;
            }
            let queries = read_queries(&a.queries)?;
            let roles = if a.backend.backend == "toy" {
                toy_roles(&load_table(a.backend.table.as_deref())?, &cfg)?
            } else {
                let b = backend(&a.backend, ToyRole::QueryMiner)?;
                Roles {
                    assistant: b.clone(),
                    user: b,
                    assistant_preamble: String::new(),
                    user_preamble: String::new(),
                }
            };
            let rm = a.rm.as_deref().map(RewardModel::<f32>::load).transpose()?;
            if sim.best_of_n > 1 && rm.is_none() {
                bail!(synthfeed::Error::Precondition {
                    stage: "simulate".into(),
                    message: format!("best_of_n = {} needs --rm", sim.best_of_n),
                });
            }
            let ds = build_demo_dataset(
                &queries,
                &sim,
                &roles,
                rm.as_ref().map(|m| m as &dyn Scorer),
                a.candidates.is_some(),
            )?;
            let demos: Vec<Demonstration> = ds.demos.into_iter().map(|(_, d)| d).collect();
            serialize_dataset(&demos, &a.out)?;
            if let Some(path) = &a.candidates {
                let lines: Vec<String> = ds
                    .candidates
                    .iter()
                    .map(serde_json::to_string)
                    .collect::<std::result::Result<_, _>>()?;
                std::fs::write(path, lines.join("\n") + "\n")?;
            }
            println!(
                "{} demonstrations, {} failures",
                demos.len(),
                ds.failures.len()
            );
        }
        Command::TrainSft(a) => {
            let demos: Vec<Demonstration> = deserialize_dataset(&a.demos)?;
            let mut policy = match &a.base {
                Some(p) => load_lm(p)?,
                None => fresh(&cfg.model.policy, cfg.model.init_seed),
            };
            let log = train_sft(&mut policy, &demos, &cfg.sft)?;
            Checkpoint::from_lm(CheckpointKind::Policy, &policy).save(&a.out)?;
            println!("{}", serde_json::to_string_pretty(&log)?);
        }
        Command::TrainPpo(a) => {
            let mut policy = load_lm(&a.policy)?;
            let rm = RewardModel::<f32>::load(&a.rm)?;
            let prompts: Vec<String> = read_queries(&a.prompts)?
                .into_iter()
                .map(|q| q.text)
                .collect();
            let mut file = std::fs::File::create(&a.metrics)
                .with_context(|| format!("creating {}", a.metrics.display()))?;
            let log = train_rlsf(&mut policy, &rm, &prompts, &cfg.ppo, Some(&mut file))?;
            Checkpoint::from_lm(CheckpointKind::Policy, &policy).save(&a.out)?;
            println!("{} episodes", log.episode_rewards.len());
        }
        Command::Eval { action } => eval(action, &cfg)?,
        Command::Run(a) | Command::DemoE2e(a) => {
            let mut m = PipelineManifest::new(&a.out, cfg);
            if let Some(s) = &a.from {
                m = m.starting_at(Stage::parse(s).with_context(|| format!("unknown stage `{s}`"))?);
            }
            if let Some(s) = &a.only {
                m = m.only(Stage::parse(s).with_context(|| format!("unknown stage `{s}`"))?);
            }
            let summary = run_pipeline(&m)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            let reports = a.out.join("reports");
            if reports.exists() {
                let mut names: Vec<PathBuf> = std::fs::read_dir(&reports)?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|x| x == "txt"))
                    .collect();
                names.sort();
                for p in names {
                    print!("{}", std::fs::read_to_string(p)?);
                }
            }
        }
    }
    Ok(())
}

fn eval(action: EvalCmd, cfg: &RunConfig) -> Result<()> {
    match action {
        EvalCmd::RmAccuracy { rm, data, out_dir } => {
            let rm = RewardModel::<f32>::load(&rm)?;
            let pairs: Vec<ComparisonPair> = deserialize_dataset(&data)?;
            emit(
                &rm_accuracy_report(&rm, &pairs, cfg.seed)?,
                out_dir.as_deref(),
            )
        }
        EvalCmd::Ablation {
            table,
            queries,
            asis_model,
            arms,
            out_dir,
        } => {
            let table = Arc::new(KnowledgeTable::load(&table)?);
            let queries = read_queries(&queries)?;
            let arms: Vec<Arm> = arms
                .split(',')
                .map(|s| Arm::parse(s.trim()).with_context(|| format!("unknown arm `{s}`")))
                .collect::<Result<_>>()?;
            let asis = asis_model
                .as_deref()
                .map(RewardModel::<f32>::load)
                .transpose()?;
            let oracle = OracleScorer {
                table: table.clone(),
            };
            let members = lattice_members(&table, cfg);
            let cut = queries.len() * 4 / 5;
            let setup = AblationSetup {
                train_queries: &queries[..cut],
                valid_queries: &queries[cut..],
                members: &members,
                hf: cfg.compare.hf.clone(),
                asis: asis.as_ref().map(|m| m as &dyn Scorer),
                oracle: &oracle,
                sampling: cfg.compare.sampling.clone(),
                rm_backbone: fresh(&cfg.model.rm, cfg.model.init_seed),
                pooling: pooling(cfg)?,
                rm: cfg.rm,
            };
            emit(&ablation_run(&setup, &arms)?, out_dir.as_deref())
        }
        EvalCmd::BonSweep {
            table,
            queries,
            rm,
            ns,
            out_dir,
        } => {
            let table = Arc::new(KnowledgeTable::load(&table)?);
            let queries = read_queries(&queries)?;
            let rm = RewardModel::<f32>::load(&rm)?;
            let oracle = OracleScorer {
                table: table.clone(),
            };
            let roles = toy_roles(&table, cfg)?;
            let sweep = bon_sweep(&queries, &roles, &cfg.simulate.sim, &rm, &oracle, &ns)?;
            emit(&sweep.report, out_dir.as_deref())
        }
        EvalCmd::Mc { policy, items, raw } => {
            let lm = load_lm(&policy)?;
            let text = std::fs::read_to_string(&items)?;
            let items: Vec<McItem> = text
                .lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(i, l)| {
                    serde_json::from_str(l)
                        .with_context(|| format!("{}:{}", items.display(), i + 1))
                })
                .collect::<Result<_>>()?;
            let acc = mc_eval(&lm, &items, !raw)?;
            println!("accuracy {acc:.4} over {} items", items.len());
            Ok(())
        }
        EvalCmd::PpoCurve { metrics, out_dir } => {
            emit(&ppo_curve_report(&metrics)?, out_dir.as_deref())
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
        {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
