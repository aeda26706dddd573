use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use promptfed::config::{parse_config, RunConfig};
use promptfed::data;
use promptfed::experiment::{self, Preset};
use promptfed::gradcheck::{self, Corruption};
use promptfed::metrics;
use promptfed::server::GlobalState;
use promptfed::Error;

#[derive(Parser)]
#[command(name = "promptfed", version, about = "Shared/group prompt tuning in a simulated federation")]
struct Cli {
    /// Root directory for run artifacts and the backbone cache.
    #[arg(long, env = "PROMPTFED_OUT", default_value = "runs", global = true)]
    out: PathBuf,

    /// Worker threads for client rounds (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,

    /// Override a config value, e.g. `--set federation.rounds=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain (or load the cached) frozen backbone.
    Pretrain(ConfigArgs),
    /// Generate the data pool and dump one shard file per client.
    Partition(ConfigArgs),
    /// Full federated run, or a named ablation preset.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// table3_toy or fig2_toy.
        #[arg(long)]
        preset: Option<String>,
        /// Seeds for a preset, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
    /// Evaluate a saved global state.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint stem; defaults to `<out>/<name>/state`.
        #[arg(long)]
        state: Option<PathBuf>,
    },
    /// Finite-difference check of every trainable gradient on the toy encoder.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        prompt_len: usize,
        #[arg(long, default_value_t = gradcheck::DEFAULT_TOLERANCE)]
        tolerance: f64,
        /// Scale one block's analytic gradient, `BLOCK=FACTOR` (negative control).
        #[arg(long)]
        corrupt: Option<String>,
    },
    /// Summarize a finished run directory.
    Report {
        /// Run directory containing rounds.jsonl and summary.csv.
        run: PathBuf,
        /// Rounds at the end of the log used for selection stability.
        #[arg(long, default_value_t = 10)]
        last: usize,
    },
}

/// Signals a failed check that is not a library error.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn load_config(args: &ConfigArgs, threads: Option<usize>) -> anyhow::Result<RunConfig> {
    let base = match &args.config {
        Some(path) => parse_config(path)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&args.sets)?;
    if let Some(t) = threads {
        cfg.federation.threads = t;
    }
    Ok(cfg)
}

fn print_accuracy(s: &experiment::Summary) {
    let a = s.accuracy;
    println!(
        "global_acc={:.4} mean_local_acc={:.4} worst_local_acc={:.4}",
        a.global, a.mean_local, a.worst_local
    );
    if let Some(c) = s.congruence {
        println!("congruence={:.4} (overlap {:.4}, kmeans purity {:.4})", c.score, c.acc_overlap, c.q_kmeans);
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cache = cli.out.join("cache");
    match cli.command {
        Command::Pretrain(args) => {
            let cfg = load_config(&args, cli.threads)?;
            let (w, acc) = experiment::pretrain(&cfg, Some(&cache))?;
            println!("pretext_accuracy={acc:.4}");
            println!("backbone_hash={}", w.hash());
        }
        Command::Partition(args) => {
            let cfg = load_config(&args, cli.threads)?;
            let pool = experiment::build_pool(&cfg)?;
            let shards = experiment::partition(&cfg, &pool)?;
            let dir = experiment::run_dir(&cfg, &cli.out).join("shards");
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            for shard in &shards {
                data::write_shard(&dir.join(format!("client_{:03}.shard", shard.client_id)), shard)?;
                println!(
                    "client {:>3}: {:>4} samples, groups {:?}",
                    shard.client_id,
                    shard.len(),
                    shard.group_counts()
                );
            }
            println!(
                "wrote {} shards to {} (label TV distance {:.4})",
                shards.len(),
                dir.display(),
                data::label_tv_distance(&shards, cfg.data.classes)
            );
        }
        Command::Train { cfg: args, preset, seeds } => match preset {
            Some(name) => {
                let preset: Preset = name.parse()?;
                let mut base = match (&args.config, preset) {
                    (Some(_), _) => load_config(&args, cli.threads)?,
                    (None, Preset::Table3Toy) => experiment::label_skew_toy(0).with_overrides(&args.sets)?,
                    (None, Preset::Fig2Toy) => experiment::mixture_toy(0).with_overrides(&args.sets)?,
                };
                if let Some(t) = cli.threads {
                    base.federation.threads = t;
                }
                base.name = name.clone();
                let (path, rows) = experiment::run_preset(preset, &base, &seeds, &cli.out)?;
                for (label, s, _) in &rows {
                    let a = s.accuracy;
                    println!(
                        "{label:<12} seed {:>2}: global {:.4} mean_local {:.4} worst_local {:.4}",
                        s.seed, a.global, a.mean_local, a.worst_local
                    );
                }
                println!("wrote {}", path.display());
            }
            None => {
                let cfg = load_config(&args, cli.threads)?;
                let outcome = experiment::cmd_run(&cfg, &cli.out)?;
                print_accuracy(&outcome.summary);
                println!("artifacts in {}", experiment::run_dir(&cfg, &cli.out).display());
            }
        },
        Command::Eval { cfg: args, state } => {
            let cfg = load_config(&args, cli.threads)?;
            let stem = state.unwrap_or_else(|| experiment::run_dir(&cfg, &cli.out).join("state"));
            let prep = experiment::prepare(&cfg, Some(&cache))?;
            let state = GlobalState::load(&stem, &cfg.encoder)?;
            let summary = experiment::evaluate(&cfg, &prep, &state)?;
            println!("round={}", summary.rounds);
            print_accuracy(&summary);
        }
        Command::Gradcheck {
            seed,
            prompt_len,
            tolerance,
            corrupt,
        } => {
            let corruption = corrupt
                .map(|c| -> anyhow::Result<Corruption> {
                    let (block, factor) = c.split_once('=').context("--corrupt expects BLOCK=FACTOR")?;
                    Ok(Corruption {
                        block: block.to_string(),
                        factor: factor.parse().context("corruption factor")?,
                    })
                })
                .transpose()?;
            let cfg = promptfed::encoder::EncoderConfig {
                prompt_len,
                ..gradcheck::toy_encoder()
            };
            let report = gradcheck::cmd_gradcheck(&cfg, seed, tolerance, corruption.as_ref())?;
            print!("{}", report.render());
            if !report.passed() {
                return Err(CheckFailed("gradient check failed".into()).into());
            }
        }
        Command::Report { run, last } => report(&run, last)?,
    }
    Ok(())
}

fn report(dir: &Path, last: usize) -> anyhow::Result<()> {
    let log = dir.join("rounds.jsonl");
    let text = fs::read_to_string(&log).with_context(|| format!("reading {}", log.display()))?;
    let mut counts: Vec<Vec<u64>> = Vec::new();
    let mut final_acc = None;
    for (i, line) in text.lines().enumerate().skip(1) {
        let v: serde_json::Value =
            serde_json::from_str(line).with_context(|| format!("{}:{}", log.display(), i + 1))?;
        let round: Vec<u64> = v["group_counts"]
            .as_array()
            .map(|a| a.iter().filter_map(|x| x.as_u64()).collect())
            .unwrap_or_default();
        counts.push(round);
        if !v["accuracy"].is_null() {
            final_acc = Some(v["accuracy"].clone());
        }
    }
    if counts.is_empty() {
        bail!("{} holds no rounds", log.display());
    }
    println!("rounds={}", counts.len());
    if let Some(a) = final_acc {
        println!("final accuracy {a}");
    }
    let tail = &counts[counts.len().saturating_sub(last)..];
    if tail.len() >= 2 {
        let stats = metrics::selection_stability(tail)?;
        let total: f64 = stats.iter().map(|s| s.1).sum();
        for (g, (mean, std)) in stats.iter().enumerate() {
            println!("group {g}: mean {mean:.2} std {std:.2}");
        }
        println!("summed std over last {} rounds: {total:.3}", tail.len());
    }
    let summary = dir.join("summary.csv");
    if let Ok(csv) = fs::read_to_string(&summary) {
        for line in csv.lines().filter(|l| !l.starts_with('#')) {
            println!("{line}");
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<CheckFailed>().is_some() {
        return 2;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Invariant(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
