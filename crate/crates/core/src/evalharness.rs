//! Measurements: pairwise accuracy with baselines, post-validation
//! ablations, best-of-N sweeps, likelihood-based multiple choice and PPO
//! learning curves.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genbackend::tinylm::{encode, encode_with_bos, TinyLm, Token};
use crate::policytrain::ppo::IterationMetrics;
use crate::rm::{pairwise_accuracy, train_rm, Pooling, RewardModel, RmTrainConfig, Scorer};
use crate::rng::{derive_seed, rng_for};
use crate::scalar::Scalar;
use crate::seed_path;
use crate::simulate::{build_demo_dataset, Roles, SimConfig};
use crate::synthcmp::{
    binarize, build_comparison_dataset, char_len, sample_lattice, HeuristicFilterConfig,
    LatticeMember, SamplingConfig,
};
use crate::types::{ComparisonPair, Conversation, Demonstration, Query, Speaker};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub value: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub metrics: BTreeMap<String, Metric>,
    pub config_fingerprint: String,
    pub seed: u64,
}

/// Stable hex digest of a serializable configuration.
pub fn fingerprint<T: Serialize + ?Sized>(config: &T) -> String {
    let json = serde_json::to_string(config).unwrap_or_default();
    format!("{:016x}", derive_seed(0, &seed_path![json.as_str()]))
}

impl EvalReport {
    pub fn new<T: Serialize + ?Sized>(name: impl Into<String>, config: &T, seed: u64) -> Self {
        EvalReport {
            name: name.into(),
            metrics: BTreeMap::new(),
            config_fingerprint: fingerprint(config),
            seed,
        }
    }

    pub fn insert(&mut self, key: impl Into<String>, value: f64, n: usize) {
        self.metrics.insert(key.into(), Metric { value, n });
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).map(|m| m.value)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report encodes")
    }

    pub fn to_table(&self) -> String {
        let width = self
            .metrics
            .keys()
            .map(String::len)
            .max()
            .unwrap_or(6)
            .max(6);
        let mut out = format!(
            "{} (seed {}, config {})\n",
            self.name, self.seed, self.config_fingerprint
        );
        let _ = writeln!(out, "{:<width$}  {:>12}  {:>8}", "metric", "value", "n");
        for (k, m) in &self.metrics {
            let _ = writeln!(out, "{k:<width$}  {:>12.4}  {:>8}", m.value, m.n);
        }
        out
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (ext, body) in [("json", self.to_json()), ("txt", self.to_table())] {
            let path = dir.join(format!("{}.{ext}", self.name));
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Random,
    Lengthy,
}

/// Random is 0.5 analytically; lengthy counts pairs whose chosen response
/// has strictly more characters.
pub fn baseline_accuracy(pairs: &[ComparisonPair], kind: BaselineKind) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Invalid(
            "baseline accuracy of an empty pair set".into(),
        ));
    }
    Ok(match kind {
        BaselineKind::Random => 0.5,
        BaselineKind::Lengthy => {
            let longer = pairs
                .iter()
                .filter(|p| char_len(&p.chosen) > char_len(&p.rejected))
                .count();
            longer as f64 / pairs.len() as f64
        }
    })
}

pub fn rm_accuracy_report(
    scorer: &dyn Scorer,
    pairs: &[ComparisonPair],
    seed: u64,
) -> Result<EvalReport> {
    let mut r = EvalReport::new("rm-accuracy", &pairs.len(), seed);
    let n = pairs.len();
    r.insert("accuracy", pairwise_accuracy(scorer, pairs), n);
    r.insert(
        "random_baseline",
        baseline_accuracy(pairs, BaselineKind::Random)?,
        n,
    );
    r.insert(
        "lengthy_baseline",
        baseline_accuracy(pairs, BaselineKind::Lengthy)?,
        n,
    );
    Ok(r)
}

/// Every lattice pair for each query, ordered by `oracle` instead of by the
/// lattice. Oracle ties are skipped.
pub fn oracle_labeled_pairs(
    queries: &[Query],
    members: &[LatticeMember],
    oracle: &dyn Scorer,
    sampling: &SamplingConfig,
) -> Result<Vec<ComparisonPair>> {
    let per_query: Vec<Result<Vec<ComparisonPair>>> = queries
        .par_iter()
        .map(|q| {
            let set = sample_lattice(q, members, sampling)?;
            let (pairs, _) = binarize(&set);
            let mut out = Vec::with_capacity(pairs.len());
            for p in pairs {
                let (a, b) = (
                    oracle.score(&q.text, &p.chosen),
                    oracle.score(&q.text, &p.rejected),
                );
                if a > b {
                    out.push(p);
                } else if b > a {
                    out.push(p.swapped());
                }
            }
            Ok(out)
        })
        .collect();
    let mut out = Vec::new();
    for r in per_query {
        out.extend(r?);
    }
    Ok(out)
}

/// One dataset variant in the post-validation ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Full,
    NoHf,
    NoAsis,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Full, Arm::NoHf, Arm::NoAsis];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Full => "full",
            Arm::NoHf => "no_hf",
            Arm::NoAsis => "no_asis",
        }
    }

    pub fn parse(s: &str) -> Option<Arm> {
        Arm::ALL.into_iter().find(|a| a.as_str() == s)
    }
}

pub struct AblationSetup<'a> {
    pub train_queries: &'a [Query],
    pub valid_queries: &'a [Query],
    pub members: &'a [LatticeMember],
    pub hf: HeuristicFilterConfig,
    pub asis: Option<&'a dyn Scorer>,
    /// Labels the validation pairs.
    pub oracle: &'a dyn Scorer,
    pub sampling: SamplingConfig,
    pub rm_backbone: TinyLm<f32>,
    pub pooling: Pooling,
    pub rm: RmTrainConfig,
}

/// Train one reward model per arm and report its accuracy on a common
/// oracle-labelled validation set, next to the lengthy baseline.
pub fn ablation_run(setup: &AblationSetup<'_>, arms: &[Arm]) -> Result<EvalReport> {
    let valid_sampling = SamplingConfig {
        seed: derive_seed(setup.sampling.seed, &seed_path!["ablation-valid"]),
        ..setup.sampling
    };
    let valid = oracle_labeled_pairs(
        setup.valid_queries,
        setup.members,
        setup.oracle,
        &valid_sampling,
    )?;
    if valid.is_empty() {
        return Err(Error::Invalid("ablation validation set is empty".into()));
    }
    let mut report = EvalReport::new(
        "ablation",
        &(arms, &setup.rm, setup.pooling.as_str()),
        setup.sampling.seed,
    );
    report.insert(
        "lengthy_baseline",
        baseline_accuracy(&valid, BaselineKind::Lengthy)?,
        valid.len(),
    );
    let mut arms = arms.to_vec();
    arms.sort();
    arms.dedup();
    for arm in arms {
        let hf = (arm != Arm::NoHf).then_some(&setup.hf);
        let asis = if arm == Arm::NoAsis { None } else { setup.asis };
        let ds = build_comparison_dataset(
            setup.train_queries,
            setup.members,
            hf,
            asis,
            &setup.sampling,
        )?;
        if ds.pairs.is_empty() {
            return Err(Error::Invalid(format!(
                "arm {} produced no pairs",
                arm.as_str()
            )));
        }
        let mut rm = RewardModel::new(setup.rm_backbone.clone(), setup.pooling);
        train_rm(&mut rm, &ds.pairs, &[], &setup.rm)?;
        let acc = pairwise_accuracy(&rm, &valid);
        log::info!(
            "ablation {}: {} pairs, accuracy {acc:.4}",
            arm.as_str(),
            ds.pairs.len()
        );
        report.insert(format!("accuracy_{}", arm.as_str()), acc, valid.len());
        report.insert(
            format!("pairs_{}", arm.as_str()),
            ds.pairs.len() as f64,
            ds.pairs.len(),
        );
    }
    Ok(report)
}

/// Mean oracle score of a demonstration's assistant turns, each judged in the
/// context that preceded it.
pub fn demo_oracle_quality(demo: &Demonstration, oracle: &dyn Scorer) -> f64 {
    let turns = demo.conversation().turns();
    let mut total = 0.0;
    let mut n = 0usize;
    for (i, t) in turns.iter().enumerate() {
        if t.speaker() != Speaker::Assistant {
            continue;
        }
        let context = Conversation::new(turns[..i].to_vec())
            .map(|c| c.render())
            .unwrap_or_default();
        total += oracle.score(&context, t.text());
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BonRow {
    pub n: usize,
    /// Mean reward-model score of the first assistant turn.
    pub mean_rm_first_turn: f64,
    /// Mean over all assistant turns.
    pub mean_rm: f64,
    pub mean_oracle: f64,
    pub demos: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BonSweep {
    pub rows: Vec<BonRow>,
    /// `per_query[k][q]`: oracle quality of query `q` at `ns[k]`, when simulated.
    pub per_query: Vec<Vec<Option<f64>>>,
    pub report: EvalReport,
}

impl BonSweep {
    /// Paired differences of row `hi` minus row `lo` over queries present in both.
    pub fn paired(&self, hi: usize, lo: usize) -> Vec<f64> {
        self.per_query[hi]
            .iter()
            .zip(&self.per_query[lo])
            .filter_map(|(a, b)| Some((*a)? - (*b)?))
            .collect()
    }
}

/// Simulate every query at each `N` with the same seeds. Candidates are
/// nested across `N`, so the first-turn score is non-decreasing in `N`.
pub fn bon_sweep(
    queries: &[Query],
    roles: &Roles,
    base: &SimConfig,
    rm: &dyn Scorer,
    oracle: &dyn Scorer,
    ns: &[usize],
) -> Result<BonSweep> {
    let mut report = EvalReport::new("bon-sweep", &(base, ns), base.seed);
    let mut rows = Vec::with_capacity(ns.len());
    let mut per_query = Vec::with_capacity(ns.len());
    for &n in ns {
        let cfg = SimConfig {
            best_of_n: n,
            ..base.clone()
        };
        let ds = build_demo_dataset(queries, &cfg, roles, Some(rm), false)?;
        let by_id: BTreeMap<&str, &Demonstration> =
            ds.demos.iter().map(|(id, d)| (id.as_str(), d)).collect();
        let qualities: Vec<Option<f64>> = queries
            .iter()
            .map(|q| {
                by_id
                    .get(q.id.as_str())
                    .map(|d| demo_oracle_quality(d, oracle))
            })
            .collect();
        let demos: Vec<&Demonstration> = ds.demos.iter().map(|(_, d)| d).collect();
        let count = demos.len().max(1) as f64;
        let first: f64 = demos
            .iter()
            .map(|d| {
                d.rm_scores()
                    .and_then(|s| s.first().copied())
                    .unwrap_or(0.0)
            })
            .sum::<f64>()
            / count;
        let all: f64 = demos
            .iter()
            .map(|d| {
                let s = d.rm_scores().unwrap_or(&[]);
                s.iter().sum::<f64>() / s.len().max(1) as f64
            })
            .sum::<f64>()
            / count;
        let oracle_mean = qualities.iter().flatten().sum::<f64>() / count;
        report.insert(format!("n{n}_rm_first_turn"), first, demos.len());
        report.insert(format!("n{n}_rm"), all, demos.len());
        report.insert(format!("n{n}_oracle"), oracle_mean, demos.len());
        rows.push(BonRow {
            n,
            mean_rm_first_turn: first,
            mean_rm: all,
            mean_oracle: oracle_mean,
            demos: demos.len(),
        });
        per_query.push(qualities);
    }
    Ok(BonSweep {
        rows,
        per_query,
        report,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub positive: usize,
    pub negative: usize,
    /// `P(X >= positive)` for `X ~ Binomial(positive + negative, 1/2)`.
    pub p_value: f64,
}

/// Exact one-sided sign test that the differences are positive. Zeros are
/// dropped.
pub fn sign_test(diffs: &[f64]) -> SignTest {
    let positive = diffs.iter().filter(|d| **d > 0.0).count();
    let negative = diffs.iter().filter(|d| **d < 0.0).count();
    let n = positive + negative;
    if n == 0 {
        return SignTest {
            positive,
            negative,
            p_value: 1.0,
        };
    }
    // log pmf by the ratio recurrence, then log-sum-exp over the upper tail.
    let mut lpmf = Vec::with_capacity(n + 1);
    let mut l = -(n as f64) * std::f64::consts::LN_2;
    for k in 0..=n {
        lpmf.push(l);
        if k < n {
            l += ((n - k) as f64 / (k + 1) as f64).ln();
        }
    }
    let tail = &lpmf[positive..];
    let m = tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let p = m.exp() * tail.iter().map(|x| (x - m).exp()).sum::<f64>();
    SignTest {
        positive,
        negative,
        p_value: p.min(1.0),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McItem {
    pub prompt: String,
    pub options: Vec<String>,
    pub answer_index: usize,
}

impl McItem {
    pub fn validate(&self) -> Result<()> {
        if self.answer_index >= self.options.len() {
            return Err(Error::Invalid(format!(
                "answer index {} out of range for {} options",
                self.answer_index,
                self.options.len()
            )));
        }
        Ok(())
    }
}

fn option_logprob<S: Scalar>(lm: &TinyLm<S>, prompt: &str, option: &str) -> (f64, usize) {
    let cont = encode(option);
    let max_seq = lm.config().max_seq;
    let mut tokens: Vec<Token> = encode_with_bos(prompt);
    // Keep BOS, the option and as much of the prompt's tail as fits.
    let room = max_seq.saturating_sub(cont.len()).max(2);
    if tokens.len() > room {
        let tail = tokens.split_off(tokens.len() - (room - 1));
        tokens.truncate(1);
        tokens.extend(tail);
    }
    let start = tokens.len() - 1;
    tokens.extend(&cont);
    tokens.truncate(max_seq);
    let scored = tokens.len() - 1 - start;
    (lm.log_prob_tokens(&tokens, start).as_f64(), scored)
}

/// Option scores for one item; per-token means when `normalize`.
pub fn mc_scores<S: Scalar>(lm: &TinyLm<S>, item: &McItem, normalize: bool) -> Vec<f64> {
    item.options
        .iter()
        .map(|o| {
            let (lp, n) = option_logprob(lm, &item.prompt, o);
            if normalize {
                lp / n.max(1) as f64
            } else {
                lp
            }
        })
        .collect()
}

/// Fraction of items whose highest-scoring option (lowest index on ties) is
/// the answer.
pub fn mc_eval<S: Scalar>(lm: &TinyLm<S>, items: &[McItem], normalize: bool) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Invalid("no multiple-choice items".into()));
    }
    for it in items {
        it.validate()?;
    }
    let correct: usize = items
        .par_iter()
        .map(|it| {
            let scores = mc_scores(lm, it, normalize);
            usize::from(crate::simulate::argmax_first(&scores) == it.answer_index)
        })
        .sum();
    Ok(correct as f64 / items.len() as f64)
}

/// Parse a metrics file written by PPO training.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<IterationMetrics>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let m: IterationMetrics = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(m);
    }
    Ok(out)
}

/// First- and last-decile mean reward (episode weighted), final KL and the
/// largest clip fraction.
pub fn ppo_curve(metrics: &[IterationMetrics]) -> Result<EvalReport> {
    if metrics.is_empty() {
        return Err(Error::Invalid("metrics contain no iterations".into()));
    }
    let k = metrics.len().div_ceil(10);
    let mean = |ms: &[IterationMetrics]| {
        let n: usize = ms.iter().map(|m| m.episodes).sum();
        let s: f64 = ms.iter().map(|m| m.mean_reward * m.episodes as f64).sum();
        (s / n.max(1) as f64, n)
    };
    let (first, n_first) = mean(&metrics[..k]);
    let (last, n_last) = mean(&metrics[metrics.len() - k..]);
    let fin = metrics.last().expect("non-empty");
    let mut r = EvalReport::new("ppo-curve", &metrics.len(), 0);
    r.insert("first_decile_reward", first, n_first);
    r.insert("last_decile_reward", last, n_last);
    r.insert("final_mean_kl", fin.mean_kl, fin.episodes);
    r.insert(
        "max_clip_frac",
        metrics.iter().map(|m| m.clip_frac).fold(0.0, f64::max),
        metrics.len(),
    );
    Ok(r)
}

pub fn ppo_curve_report(path: impl AsRef<Path>) -> Result<EvalReport> {
    ppo_curve(&read_metrics(path)?)
}

/// Per-episode decile means of a reward series.
pub fn decile_gain(rewards: &[f64]) -> Option<(f64, f64, f64)> {
    let k = rewards.len() / 10;
    if k == 0 {
        return None;
    }
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let m = mean(rewards);
    let sd = (rewards.iter().map(|r| (r - m).powi(2)).sum::<f64>() / rewards.len() as f64).sqrt();
    Some((mean(&rewards[..k]), mean(&rewards[rewards.len() - k..]), sd))
}

/// Random two-option items whose options are drawn from the same alphabet;
/// used to check that an untrained model is at chance.
pub fn balanced_random_items(count: usize, seed: u64) -> Vec<McItem> {
    use rand::Rng;
    let mut rng = rng_for(seed, &seed_path!["mc-random"]);
    (0..count)
        .map(|_| {
            let word = |rng: &mut crate::rng::StageRng| -> String {
                (0..4).map(|_| rng.gen_range(b'a'..=b'z') as char).collect()
            };
            McItem {
                prompt: format!("Pick: {}", word(&mut rng)),
                options: vec![word(&mut rng), word(&mut rng)],
                answer_index: rng.gen_range(0..2),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(c: &str, r: &str) -> ComparisonPair {
        ComparisonPair::new("q", "query", c, r, "A", "B").unwrap()
    }

    #[test]
    fn baselines() {
        let pairs = vec![pair("longer one", "short"), pair("tiny", "much longer")];
        assert_eq!(
            baseline_accuracy(&pairs, BaselineKind::Random).unwrap(),
            0.5
        );
        assert_eq!(
            baseline_accuracy(&pairs, BaselineKind::Lengthy).unwrap(),
            0.5
        );
        assert_eq!(
            baseline_accuracy(&pairs[..1], BaselineKind::Lengthy).unwrap(),
            1.0
        );
        // Equal lengths count against the baseline.
        assert_eq!(
            baseline_accuracy(&[pair("abc", "xyz")], BaselineKind::Lengthy).unwrap(),
            0.0
        );
        assert!(baseline_accuracy(&[], BaselineKind::Random).is_err());
    }

    #[test]
    fn sign_test_small_cases() {
        let t = sign_test(&[1.0, 1.0, 1.0]);
        assert!((t.p_value - 0.125).abs() < 1e-12);
        let t = sign_test(&[1.0, -1.0, 0.0]);
        assert_eq!((t.positive, t.negative), (1, 1));
        assert!((t.p_value - 0.75).abs() < 1e-12);
        assert_eq!(sign_test(&[0.0]).p_value, 1.0);
        let many = vec![1.0; 2000];
        let p = sign_test(&many).p_value;
        assert!(p.is_finite() && p < 1e-300);
    }

    #[test]
    fn curve_report_deciles() {
        let ms: Vec<IterationMetrics> = (0..20)
            .map(|i| IterationMetrics {
                step: i,
                episodes: 4,
                mean_reward: i as f64,
                mean_kl: 0.1 * i as f64,
                clip_frac: if i == 7 { 0.3 } else { 0.01 },
                first_minibatch_clip_frac: 0.0,
                value_loss: 0.0,
                lr: 1e-3,
            })
            .collect();
        let r = ppo_curve(&ms).unwrap();
        assert_eq!(r.get("first_decile_reward"), Some(0.5));
        assert_eq!(r.get("last_decile_reward"), Some(18.5));
        assert_eq!(r.get("max_clip_frac"), Some(0.3));
        assert!(ppo_curve(&[]).is_err());
    }

    #[test]
    fn malformed_metrics_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        std::fs::write(&p, "\n{\"oops\": 1}\n").unwrap();
        match read_metrics(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        std::fs::write(&p, "").unwrap();
        assert!(ppo_curve_report(&p).is_err());
    }

    #[test]
    fn single_option_items_are_always_right() {
        use crate::genbackend::tinylm::LmConfig;
        let lm: TinyLm<f32> = TinyLm::new(
            LmConfig {
                embed_dim: 8,
                hidden_dim: 16,
                max_seq: 32,
            },
            &mut rng_for(1, &[]),
        );
        let items = vec![McItem {
            prompt: "x".repeat(100),
            options: vec!["only".into()],
            answer_index: 0,
        }];
        assert_eq!(mc_eval(&lm, &items, true).unwrap(), 1.0);
        let bad = McItem {
            answer_index: 1,
            ..items[0].clone()
        };
        assert!(mc_eval(&lm, &[bad], false).is_err());
    }
}
