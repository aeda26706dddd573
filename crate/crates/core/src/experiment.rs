//! End-to-end runs: pretext pretraining, data generation and partitioning,
//! federated training, evaluation and artifacts. Presets encode the ablation
//! grids.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, Dtype};
use crate::client::{BcdMode, Frozen, PromptMode};
use crate::config::{KeyInit, PartitionKind, RunConfig};
use crate::data::{self, ClientShard, DomainTransform, MixtureSpec, Pool, Sample};
use crate::encoder::{pretrain_backbone, BackboneWeights, PretextSample};
use crate::error::{Error, Result};
use crate::metrics::{self, Accuracies, Congruence, RoundReport};
use crate::rng::{rng_for, seed_for};
use crate::selection::KeyBank;
use crate::server::{self, EvalSets, GlobalState};

const BACKBONE_TAG: u64 = 0xBB;
const DATA_TAG: u64 = 0xDA;
const PARTITION_TAG: u64 = 0x9A;
const SPLIT_TAG: u64 = 0x5B;
const STATE_TAG: u64 = 0x57;
const ORACLE_TAG: u64 = 0x0C;

/// Random Gaussian blobs labelled by blob index.
pub fn pretext_data(cfg: &RunConfig) -> Vec<PretextSample> {
    let p = &cfg.pretrain;
    let dim = cfg.encoder.raw_dim();
    let mut rng = rng_for(seed_for(cfg.seed, &[BACKBONE_TAG]), &[1]);
    let centers: Vec<Vec<f64>> = (0..p.clusters)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = v.iter().map(|x: &f64| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x * p.radius / n).collect()
        })
        .collect();
    let mut out = Vec::with_capacity(p.clusters * p.per_cluster);
    for (label, c) in centers.iter().enumerate() {
        for _ in 0..p.per_cluster {
            let x = c
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + p.sigma * z
                })
                .collect();
            out.push(PretextSample { x, label });
        }
    }
    out
}

fn backbone_key(cfg: &RunConfig) -> String {
    let text = format!(
        "{}\n{}\nseed={}",
        toml::to_string(&cfg.encoder).expect("encoder config serializes"),
        toml::to_string(&cfg.pretrain).expect("pretrain config serializes"),
        cfg.seed
    );
    hex::encode(Sha256::digest(text.as_bytes()))[..16].to_string()
}

/// Pretrained backbone rounded to `f32`, loaded from `cache_dir` when a
/// backbone for the same encoder, pretext settings and seed exists.
pub fn pretrain(cfg: &RunConfig, cache_dir: Option<&Path>) -> Result<(BackboneWeights, f64)> {
    let stem = cache_dir
        .filter(|_| cfg.pretrain.cache)
        .map(|d| d.join(format!("backbone-{}", backbone_key(cfg))));
    if let Some(stem) = stem.as_ref().filter(|s| s.with_extension("json").exists()) {
        let ck = checkpoint::load(stem)?;
        let mut w = BackboneWeights::init(&cfg.encoder, 0)?;
        ck.restore_into(w.named_tensors_mut())?;
        let acc = ck.manifest.extra.get("pretext_accuracy").and_then(|v| v.as_f64()).unwrap_or(0.0);
        return Ok((w, acc));
    }
    let p = &cfg.pretrain;
    let data = pretext_data(cfg);
    let (mut w, acc) = pretrain_backbone(
        &cfg.encoder,
        &data,
        p.steps,
        p.lr,
        p.batch_size,
        seed_for(cfg.seed, &[BACKBONE_TAG]),
    )?;
    for (_, t) in w.named_tensors_mut() {
        checkpoint::round_to_f32(t);
    }
    if let Some(stem) = stem {
        let extra = serde_json::json!({ "pretext_accuracy": acc });
        checkpoint::save(&stem, w.named_tensors(), Dtype::F32, &cfg.echo(), cfg.seed, extra)?;
    }
    Ok((w, acc))
}

pub fn mixture_spec(cfg: &RunConfig) -> Result<MixtureSpec> {
    let d = &cfg.data;
    MixtureSpec::orthogonal_groups(
        d.groups,
        d.classes,
        cfg.encoder.raw_dim(),
        d.radius,
        d.class_spread,
        d.sigma,
        d.per_cell,
        &d.membership_lists(),
        seed_for(cfg.seed, &[DATA_TAG]),
    )
}

pub fn build_pool(cfg: &RunConfig) -> Result<Pool> {
    data::gen_mixture(&mixture_spec(cfg)?, seed_for(cfg.seed, &[DATA_TAG, 1]))
}

pub fn partition(cfg: &RunConfig, pool: &Pool) -> Result<Vec<ClientShard>> {
    let p = &cfg.partition;
    let m = cfg.federation.clients;
    let seed = seed_for(cfg.seed, &[PARTITION_TAG]);
    match p.kind {
        PartitionKind::Pathological => data::pathological_partition(pool, m, p.s, seed),
        PartitionKind::Mixture => data::mixture_partition(pool, m, p.concentration, seed),
        PartitionKind::Domain => {
            let transforms: Vec<DomainTransform> = (0..m)
                .map(|i| DomainTransform::random(pool.dim, p.domain_jitter, p.domain_shift, seed_for(seed, &[i as u64])))
                .collect();
            data::domain_partition(pool, m, &transforms, seed)
        }
    }
}

/// Federated view of a partition: per-client train/test and the pooled test set.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: Vec<Vec<Sample>>,
    pub tests: Vec<Vec<Sample>>,
}

impl Split {
    pub fn from_shards(shards: &[ClientShard], test_frac: f64, seed: u64) -> Self {
        let (train, tests) = shards
            .iter()
            .map(|s| {
                let (a, b) = s.split(test_frac, seed_for(seed, &[SPLIT_TAG]));
                (a.samples, b.samples)
            })
            .unzip();
        Self { train, tests }
    }

    pub fn global_test(&self) -> Vec<Sample> {
        self.tests.concat()
    }

    pub fn train_pool(&self) -> Vec<Sample> {
        self.train.concat()
    }

    pub fn eval_sets(&self) -> EvalSets {
        EvalSets {
            client_tests: self.tests.clone(),
            global_test: self.global_test(),
        }
    }
}

/// Everything a run needs before training starts.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub backbone: BackboneWeights,
    pub pretext_accuracy: f64,
    pub pool: Pool,
    pub shards: Vec<ClientShard>,
    pub split: Split,
}

pub fn prepare(cfg: &RunConfig, cache_dir: Option<&Path>) -> Result<Prepared> {
    cfg.validate()?;
    let (backbone, pretext_accuracy) = pretrain(cfg, cache_dir)?;
    let pool = build_pool(cfg)?;
    let shards = partition(cfg, &pool)?;
    let split = Split::from_shards(&shards, cfg.data.test_frac, cfg.seed);
    if split.train.iter().any(|t| t.is_empty()) || split.tests.iter().any(|t| t.is_empty()) {
        return Err(Error::Config(
            "a client ended up with an empty train or test split; raise data.per_cell".into(),
        ));
    }
    Ok(Prepared {
        backbone,
        pretext_accuracy,
        pool,
        shards,
        split,
    })
}

fn routing_features(frozen: Frozen<'_>, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
    use rayon::prelude::*;
    samples.par_iter().map(|s| frozen.routing_feature(&s.x)).collect()
}

/// Initial global state; `KeyInit::Collapsed` replaces every key with a copy
/// of key 0, so plain routing ties everywhere.
pub fn initial_state(cfg: &RunConfig) -> Result<GlobalState> {
    let f = &cfg.federation;
    let mut state = GlobalState::init(&cfg.encoder, f.groups, cfg.data.classes, seed_for(cfg.seed, &[STATE_TAG]))?;
    state.seed = cfg.seed;
    if cfg.ablation.key_init == KeyInit::Collapsed {
        state.bank = KeyBank::from_keys(vec![state.bank.keys[0].clone(); f.groups]);
    }
    Ok(state)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub seed: u64,
    pub bcd_mode: BcdMode,
    pub prompts: PromptMode,
    pub rounds: usize,
    pub accuracy: Accuracies,
    pub congruence: Option<Congruence>,
    /// Share of training samples routed to each key at inference.
    pub routed_fraction: Vec<f64>,
    pub state_hash: String,
    pub backbone_hash: String,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub state: GlobalState,
    pub reports: Vec<RoundReport>,
    pub summary: Summary,
    pub backbone_hash_before: String,
    pub backbone_hash_after: String,
}

/// Congruence of inference routing with a cosine k-means oracle on the
/// training features, using ground-truth groups as the purity labels.
pub fn score_routing(
    cfg: &RunConfig,
    state: &GlobalState,
    frozen: Frozen<'_>,
    samples: &[Sample],
) -> Result<(Vec<f64>, Option<Congruence>)> {
    let feats = routing_features(frozen, samples)?;
    let routed = feats
        .iter()
        .map(|f| crate::selection::select(f, &state.bank.keys))
        .collect::<Result<Vec<_>>>()?;
    let mut fraction = vec![0.0; state.bank.num_groups()];
    for &g in &routed {
        fraction[g] += 1.0 / routed.len() as f64;
    }
    let congruence = if cfg.metrics.congruence {
        let oracle = metrics::kmeans_oracle(
            &feats,
            cfg.federation.groups,
            cfg.metrics.kmeans_iters,
            seed_for(cfg.seed, &[ORACLE_TAG]),
        )?;
        let truth: Vec<usize> = samples.iter().map(|s| s.group).collect();
        Some(metrics::congruence(&routed, &oracle, &truth, cfg.metrics.overlap)?)
    } else {
        None
    };
    Ok((fraction, congruence))
}

/// Trains from scratch on prepared data and scores the result.
pub fn run_prepared(cfg: &RunConfig, prep: &Prepared) -> Result<RunOutcome> {
    let frozen = Frozen {
        cfg: &cfg.encoder,
        backbone: &prep.backbone,
    };
    let before = prep.backbone.hash();
    let init = initial_state(cfg)?;
    let (state, reports) = server::run_training(
        frozen,
        init,
        &prep.split.train,
        &prep.split.eval_sets(),
        &cfg.server_hyper(),
        &cfg.local_hyper(),
    )?;
    finish(cfg, prep, state, reports, before)
}

/// Final metrics for `state` on prepared data.
pub fn evaluate(cfg: &RunConfig, prep: &Prepared, state: &GlobalState) -> Result<Summary> {
    let frozen = Frozen {
        cfg: &cfg.encoder,
        backbone: &prep.backbone,
    };
    let eval = prep.split.eval_sets();
    let accuracy = metrics::accuracies(state, frozen, cfg.ablation.prompts, &eval.client_tests, &eval.global_test)?;
    let (routed_fraction, congruence) = score_routing(cfg, state, frozen, &prep.split.train_pool())?;
    Ok(Summary {
        name: cfg.name.clone(),
        seed: cfg.seed,
        bcd_mode: cfg.ablation.bcd_mode,
        prompts: cfg.ablation.prompts,
        rounds: state.round,
        accuracy,
        congruence,
        routed_fraction,
        state_hash: state.hash(),
        backbone_hash: prep.backbone.hash(),
    })
}

fn finish(
    cfg: &RunConfig,
    prep: &Prepared,
    state: GlobalState,
    mut reports: Vec<RoundReport>,
    before: String,
) -> Result<RunOutcome> {
    let summary = evaluate(cfg, prep, &state)?;
    if let Some(last) = reports.last_mut() {
        last.congruence = summary.congruence.map(|c| c.score);
    }
    if summary.backbone_hash != before {
        return Err(Error::Invariant("backbone changed during training".into()));
    }
    Ok(RunOutcome {
        backbone_hash_after: summary.backbone_hash.clone(),
        summary,
        state,
        reports,
        backbone_hash_before: before,
    })
}

/// Continues a saved state up to `cfg.federation.rounds`.
pub fn resume_prepared(cfg: &RunConfig, prep: &Prepared, state: GlobalState) -> Result<RunOutcome> {
    let frozen = Frozen {
        cfg: &cfg.encoder,
        backbone: &prep.backbone,
    };
    let before = prep.backbone.hash();
    let (state, reports) = server::run_training(
        frozen,
        state,
        &prep.split.train,
        &prep.split.eval_sets(),
        &cfg.server_hyper(),
        &cfg.local_hyper(),
    )?;
    finish(cfg, prep, state, reports, before)
}

fn fmt_f(v: f64) -> String {
    format!("{v}")
}

fn echo_comment(cfg: &RunConfig) -> String {
    cfg.echo().lines().map(|l| format!("# {l}\n")).collect()
}

pub const SUMMARY_HEADER: &str =
    "name,seed,bcd_mode,prompts,rounds,global_acc,mean_local_acc,worst_local_acc,congruence,routed_fraction,state_hash";

pub fn summary_row(s: &Summary) -> String {
    format!(
        "{},{},{:?},{:?},{},{},{},{},{},{},{}",
        s.name,
        s.seed,
        s.bcd_mode,
        s.prompts,
        s.rounds,
        fmt_f(s.accuracy.global),
        fmt_f(s.accuracy.mean_local),
        fmt_f(s.accuracy.worst_local),
        s.congruence.map(|c| fmt_f(c.score)).unwrap_or_default(),
        s.routed_fraction.iter().map(|v| fmt_f(*v)).collect::<Vec<_>>().join(";"),
        s.state_hash
    )
}

pub fn summary_csv(cfg: &RunConfig, summaries: &[Summary]) -> String {
    let mut out = echo_comment(cfg);
    out.push_str(SUMMARY_HEADER);
    out.push('\n');
    for s in summaries {
        out.push_str(&summary_row(s));
        out.push('\n');
    }
    out
}

/// One JSON object per line: the config echo first, then every round.
pub fn round_log(cfg: &RunConfig, reports: &[RoundReport]) -> Result<String> {
    let mut out = serde_json::to_string(&serde_json::json!({ "config": cfg.echo() }))
        .map_err(|e| Error::format("round log", e.to_string()))?;
    out.push('\n');
    for r in reports {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::format("round log", e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn run_dir(cfg: &RunConfig, out_root: &Path) -> PathBuf {
    out_root.join(&cfg.name)
}

/// Full run with artifacts under `<out_root>/<name>/`: config echo, state
/// checkpoint, round log and summary CSV.
pub fn cmd_run(cfg: &RunConfig, out_root: &Path) -> Result<RunOutcome> {
    let prep = prepare(cfg, Some(&out_root.join("cache")))?;
    let outcome = run_prepared(cfg, &prep)?;
    write_artifacts(cfg, out_root, &outcome)?;
    Ok(outcome)
}

pub fn write_artifacts(cfg: &RunConfig, out_root: &Path, outcome: &RunOutcome) -> Result<()> {
    let dir = run_dir(cfg, out_root);
    write(&dir.join("config.toml"), &cfg.echo())?;
    outcome.state.save(&dir.join("state"), &cfg.echo())?;
    write(&dir.join("rounds.jsonl"), &round_log(cfg, &outcome.reports)?)?;
    write(&dir.join("summary.csv"), &summary_csv(cfg, std::slice::from_ref(&outcome.summary)))
}

/// Label-skew toy: 4 groups of 2 classes each, pathological partition with
/// `s = 2` over 20 clients, half of each shard held out for testing.
pub fn label_skew_toy(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        name: format!("label_skew_s{seed}"),
        seed,
        ..RunConfig::default()
    };
    cfg.data.groups = 4;
    cfg.data.classes = 8;
    cfg.data.per_cell = 96;
    cfg.data.test_frac = 0.5;
    cfg.partition.kind = PartitionKind::Pathological;
    cfg.partition.s = 2;
    cfg.federation.clients = 20;
    cfg.federation.rounds = 30;
    cfg
}

/// Four well-separated Gaussian groups, one class each, mixed across clients.
pub fn mixture_toy(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        name: format!("mixture_s{seed}"),
        seed,
        ..RunConfig::default()
    };
    cfg.data.groups = 4;
    cfg.data.classes = 4;
    cfg.data.per_cell = 100;
    cfg.partition.kind = PartitionKind::Mixture;
    cfg.partition.concentration = 0.5;
    cfg.federation.clients = 20;
    cfg.federation.rounds = 30;
    cfg
}

/// The five prompt/optimization settings compared in the prompt ablation.
pub fn table3_configs(base: &RunConfig) -> Vec<(&'static str, RunConfig)> {
    let with = |label: &'static str, prompts: PromptMode, mode: BcdMode| {
        let mut c = base.clone();
        c.name = format!("{}_{label}", base.name);
        c.ablation.prompts = prompts;
        c.ablation.bcd_mode = mode;
        (label, c)
    };
    vec![
        with("shared_only", PromptMode::SharedOnly, BcdMode::Bcd),
        with("group_only", PromptMode::GroupOnly, BcdMode::Bcd),
        with("joint", PromptMode::Both, BcdMode::Joint),
        with("bcd_inv", PromptMode::Both, BcdMode::BcdInv),
        with("bcd", PromptMode::Both, BcdMode::Bcd),
    ]
}

/// Momentum on (`alpha_k = 0.5`) versus off (`alpha_k = 0`).
pub fn fig2_configs(base: &RunConfig) -> Vec<(&'static str, RunConfig)> {
    [("alpha_k_0", 0.0), ("alpha_k_0.5", 0.5)]
        .into_iter()
        .map(|(label, a)| {
            let mut c = base.clone();
            c.name = format!("{}_{label}", base.name);
            c.federation.alpha_k = a;
            (label, c)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Table3Toy,
    Fig2Toy,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table3_toy" => Ok(Preset::Table3Toy),
            "fig2_toy" => Ok(Preset::Fig2Toy),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected table3_toy or fig2_toy)"
            ))),
        }
    }
}

/// Runs a preset grid for every seed and writes a comparison CSV.
/// Returns the CSV path and every run's summary and per-round counts.
pub fn run_preset(
    preset: Preset,
    base: &RunConfig,
    seeds: &[u64],
    out_root: &Path,
) -> Result<(PathBuf, Vec<(String, Summary, Vec<Vec<u64>>)>)> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let mut seeded = base.clone();
        seeded.seed = seed;
        let grid = match preset {
            Preset::Table3Toy => table3_configs(&seeded),
            Preset::Fig2Toy => fig2_configs(&seeded),
        };
        let prep = prepare(&seeded, Some(&out_root.join("cache")))?;
        for (label, cfg) in grid {
            let out = run_prepared(&cfg, &prep)?;
            let counts: Vec<Vec<u64>> = out.reports.iter().map(|r| r.group_counts.clone()).collect();
            rows.push((label.to_string(), out.summary, counts));
        }
    }
    let mut csv = echo_comment(base);
    let path = match preset {
        Preset::Table3Toy => {
            csv.push_str("config,seed,global_acc,mean_local_acc,worst_local_acc\n");
            for (label, s, _) in &rows {
                let a = s.accuracy;
                let _ = writeln!(csv, "{label},{},{},{},{}", s.seed, a.global, a.mean_local, a.worst_local);
            }
            out_root.join(&base.name).join("table3.csv")
        }
        Preset::Fig2Toy => {
            let g = base.federation.groups;
            csv.push_str("config,seed,round");
            for j in 0..g {
                let _ = write!(csv, ",group{j}");
            }
            csv.push('\n');
            for (label, s, counts) in &rows {
                for (t, c) in counts.iter().enumerate() {
                    let cells: Vec<String> = c.iter().map(|v| v.to_string()).collect();
                    let _ = writeln!(csv, "{label},{},{},{}", s.seed, t + 1, cells.join(","));
                }
            }
            out_root.join(&base.name).join("fig2_counts.csv")
        }
    };
    write(&path, &csv)?;
    Ok((path, rows))
}
