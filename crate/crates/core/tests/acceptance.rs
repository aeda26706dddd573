//! End-to-end acceptance checks, one printed line per criterion.
//!
//! Correctness criteria (1, 2, 3, 4, 9) are asserted. The directional
//! criteria (5, 6, 7, 8, 10) are printed as PASS or FAIL and only asserted
//! when `PROMPTFED_STRICT_ACCEPTANCE=1` is set.

use std::fmt::Write as _;
use std::io::Write as _;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use promptfed::client::{self, Broadcast, ClientRoundResult, Frozen};
use promptfed::config::{KeyInit, RunConfig};
use promptfed::data::{self, Sample};
use promptfed::encoder::{EncoderConfig, PromptSet};
use promptfed::experiment::{self, Prepared, RunOutcome};
use promptfed::gradcheck::{self, Corruption};
use promptfed::metrics;
use promptfed::numerics::Tensor;
use promptfed::rng::client_seed;
use promptfed::server::{self, GlobalState};
use promptfed::hash_tensors;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Line {
    id: usize,
    title: &'static str,
    passed: bool,
    detail: String,
    asserted: bool,
}

#[derive(Default)]
struct Board {
    lines: Vec<Line>,
}

impl Board {
    fn record(&mut self, id: usize, title: &'static str, passed: bool, asserted: bool, detail: String) {
        say(&format!(
            "criterion {id} [{title}]: {} ({detail})",
            if passed { "PASS" } else { "FAIL" }
        ));
        self.lines.push(Line {
            id,
            title,
            passed,
            detail,
            asserted,
        });
    }
}

/// Writes straight to stdout so the lines show even when the harness
/// captures output.
fn say(line: &str) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").unwrap();
    out.flush().unwrap();
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", parts.join(", "))
}

fn frozen<'a>(cfg: &'a RunConfig, prep: &'a Prepared) -> Frozen<'a> {
    Frozen {
        cfg: &cfg.encoder,
        backbone: &prep.backbone,
    }
}

fn criterion_1(board: &mut Board) {
    let started = Instant::now();
    let base = gradcheck::toy_encoder();
    let long = EncoderConfig {
        prompt_len: 2,
        ..base.clone()
    };
    let a = gradcheck::cmd_gradcheck(&base, 0, gradcheck::DEFAULT_TOLERANCE, None).unwrap();
    let b = gradcheck::cmd_gradcheck(&long, 1, gradcheck::DEFAULT_TOLERANCE, None).unwrap();
    let corrupt = Corruption {
        block: "key".into(),
        factor: 1.01,
    };
    let c = gradcheck::cmd_gradcheck(&base, 0, gradcheck::DEFAULT_TOLERANCE, Some(&corrupt)).unwrap();
    let worst = a.blocks.iter().chain(&b.blocks).map(|r| r.max_rel_err).fold(0.0, f64::max);
    let elapsed = started.elapsed();
    let passed = a.passed() && b.passed() && !c.passed() && elapsed < Duration::from_secs(30);
    board.record(
        1,
        "gradient fidelity",
        passed,
        true,
        format!(
            "{} blocks, worst rel err {worst:.2e}, corrupted key gradient caught: {}, {}",
            a.blocks.len() + b.blocks.len(),
            !c.passed(),
            secs(elapsed)
        ),
    );
}

fn random_prompts(enc: &EncoderConfig, groups: usize, classes: usize, rng: &mut ChaCha8Rng) -> PromptSet {
    let mut p = PromptSet::init(enc, groups, classes, rng.random()).unwrap();
    for (_, t) in p.named_tensors_mut() {
        let shape = t.shape().to_vec();
        *t = Tensor::randn(&shape, 1.0, rng);
    }
    p
}

fn random_result(enc: &EncoderConfig, groups: usize, rng: &mut ChaCha8Rng) -> ClientRoundResult {
    let counts: Vec<u64> = (0..groups)
        .map(|_| if rng.random_bool(0.3) { 0 } else { rng.random_range(1..50) })
        .collect();
    ClientRoundResult {
        client_id: rng.random_range(0..100),
        prompts: random_prompts(enc, groups, 3, rng),
        keys: (0..groups).map(|_| Tensor::randn(&[enc.dim], 1.0, rng)).collect(),
        group_counts: counts,
        num_samples: rng.random_range(1..200),
        epoch_losses: vec![],
        call_log: vec![],
    }
}

fn close(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= 1e-12 * (1.0 + y.abs()))
}

fn prompts_close(a: &PromptSet, b: &PromptSet) -> bool {
    let (na, nb) = (a.named_tensors(), b.named_tensors());
    na.len() == nb.len() && na.iter().zip(&nb).all(|((x, s), (y, t))| x == y && close(s, t))
}

fn algebra_case(enc: &EncoderConfig, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = rng.random_range(1..5);
    let n = rng.random_range(1..6);
    let results: Vec<ClientRoundResult> = (0..n).map(|_| random_result(enc, groups, &mut rng)).collect();

    let w = server::client_weights(&results).map_err(|e| e.to_string())?;
    if (w.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
        return Err("client weights do not sum to 1".into());
    }
    for kw in server::key_weights(&results, groups).into_iter().flatten() {
        if (kw.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err("key weights do not sum to 1".into());
        }
    }

    let agg = server::aggregate_params(&results).map_err(|e| e.to_string())?;
    let mut manual = results[0].prompts.clone();
    for (name, t) in manual.named_tensors_mut() {
        let mut acc = Tensor::zeros(t.shape());
        for (r, wi) in results.iter().zip(&w) {
            let src = r.prompts.named_tensors().into_iter().find(|(m, _)| *m == name).unwrap().1;
            acc.axpy(*wi, src).unwrap();
        }
        *t = acc;
    }
    if !prompts_close(&agg, &manual) {
        return Err("aggregate_params is not the sample-weighted mean".into());
    }

    let single = &results[..1];
    if !prompts_close(&server::aggregate_params(single).unwrap(), &results[0].prompts) {
        return Err("single-client aggregate_params is not the identity".into());
    }
    let previous: Vec<Tensor> = (0..groups).map(|_| Tensor::randn(&[enc.dim], 1.0, &mut rng)).collect();
    let keys = server::aggregate_keys(single, &previous).unwrap();
    for g in 0..groups {
        let want = if results[0].group_counts[g] > 0 { &results[0].keys[g] } else { &previous[g] };
        if !close(&keys[g], want) {
            return Err(format!("single-client aggregate_keys wrong for group {g}"));
        }
    }

    let all_keys = server::aggregate_keys(&results, &previous).unwrap();
    for g in 0..groups {
        let total: u64 = results.iter().map(|r| r.group_counts[g]).sum();
        if total == 0 && !close(&all_keys[g], &previous[g]) {
            return Err(format!("zero-count group {g} did not keep its previous key"));
        }
        if total > 0 {
            let mut acc = Tensor::zeros(&[enc.dim]);
            for r in &results {
                acc.axpy(r.group_counts[g] as f64 / total as f64, &r.keys[g]).unwrap();
            }
            if !close(&all_keys[g], &acc) {
                return Err(format!("key {g} is not the count-weighted mean"));
            }
        }
    }

    let mut state = GlobalState::init(enc, groups, 3, seed).unwrap();
    let before = state.bank.counts.clone();
    let round = server::accumulate_counts(&mut state.bank, &results);
    let q_sum: f64 = state.bank.q.iter().sum();
    if (q_sum - 1.0).abs() > 1e-12 {
        return Err(format!("q sums to {q_sum}"));
    }
    for g in 0..groups {
        let want: u64 = results.iter().map(|r| r.group_counts[g]).sum();
        if round[g] != want || state.bank.counts[g] != before[g] + want {
            return Err("accumulated counts are wrong".into());
        }
    }

    let first_keys = results[0].keys.clone();
    let first_groups = results[0].prompts.groups.clone();
    let fresh_keys = results[n - 1].keys.clone();
    let fresh_groups = results[n - 1].prompts.groups.clone();
    for (alpha, expect_keys, expect_groups) in [(1.0, &first_keys, &first_groups), (0.0, &fresh_keys, &fresh_groups)] {
        let mut s = state.clone();
        server::apply_momentum(&mut s, first_keys.clone(), first_groups.clone(), alpha, alpha).unwrap();
        server::apply_momentum(&mut s, fresh_keys.clone(), fresh_groups.clone(), alpha, alpha).unwrap();
        let keys_ok = s.bank.keys.iter().zip(expect_keys).all(|(a, b)| close(a, b));
        let groups_ok = s.prompts.groups.iter().zip(expect_groups).all(|(a, b)| {
            a.len() == b.len() && a.iter().zip(b).all(|((la, ta), (lb, tb))| la == lb && close(ta, tb))
        });
        if !keys_ok || !groups_ok {
            return Err(format!("momentum endpoint alpha={alpha} is wrong"));
        }
    }
    Ok(())
}

fn criterion_3(board: &mut Board) {
    let started = Instant::now();
    let enc = gradcheck::toy_encoder();
    let cases = 200;
    let failures: Vec<String> = (0..cases)
        .filter_map(|s| algebra_case(&enc, s).err().map(|e| format!("case {s}: {e}")))
        .collect();
    let elapsed = started.elapsed();
    let passed = failures.is_empty() && elapsed < Duration::from_secs(5);
    board.record(
        3,
        "aggregation algebra",
        passed,
        true,
        format!(
            "{}/{cases} randomized cases pass, {}{}",
            cases - failures.len() as u64,
            secs(elapsed),
            failures.first().map(|f| format!(", first failure {f}")).unwrap_or_default()
        ),
    );
}

fn criterion_4(board: &mut Board, cache: &Path) {
    let started = Instant::now();
    let mut cfg = experiment::mixture_toy(7);
    cfg.name = "degenerate".into();
    cfg.data.per_cell = 20;
    cfg.federation.clients = 1;
    cfg.federation.gamma = 1.0;
    cfg.federation.groups = 1;
    cfg.federation.alpha_k = 0.0;
    cfg.federation.alpha_g = 0.0;
    cfg.federation.rounds = 3;
    cfg.federation.epochs = 2;
    cfg.metrics.congruence = false;
    cfg.validate().unwrap();
    let prep = experiment::prepare(&cfg, Some(cache)).unwrap();
    let outcome = experiment::run_prepared(&cfg, &prep).unwrap();

    let state = experiment::initial_state(&cfg).unwrap();
    let mut bc = Broadcast {
        prompts: state.prompts.clone(),
        keys: state.bank.keys.clone(),
        q: vec![1.0],
    };
    for t in 0..cfg.federation.rounds {
        let r = client::local_round(
            frozen(&cfg, &prep),
            &bc,
            0,
            &prep.split.train[0],
            &cfg.local_hyper(),
            client_seed(state.seed, t, 0),
        )
        .unwrap();
        bc = Broadcast {
            prompts: r.prompts,
            keys: r.keys,
            q: vec![1.0],
        };
    }
    let hash = |p: &PromptSet, keys: &[Tensor]| {
        let mut items = p.named_tensors();
        items.extend(keys.iter().enumerate().map(|(g, k)| (format!("key{g}"), k)));
        hash_tensors(items.into_iter())
    };
    let federated = hash(&outcome.state.prompts, &outcome.state.bank.keys);
    let sequential = hash(&bc.prompts, &bc.keys);
    let elapsed = started.elapsed();
    board.record(
        4,
        "single-client degeneracy",
        federated == sequential && elapsed < Duration::from_secs(60),
        true,
        format!(
            "federated {} vs sequential {}, {}",
            &federated[..12],
            &sequential[..12],
            secs(elapsed)
        ),
    );
}

struct MixtureRuns {
    prep: Vec<(RunConfig, Prepared)>,
    calibrated: Vec<RunOutcome>,
    uncalibrated: Vec<RunOutcome>,
    no_momentum: Vec<RunOutcome>,
    elapsed: Duration,
}

fn mixture_runs(cache: &Path) -> MixtureRuns {
    let started = Instant::now();
    let mut prep = Vec::new();
    let mut calibrated = Vec::new();
    let mut uncalibrated = Vec::new();
    for seed in SEEDS {
        let cfg = experiment::mixture_toy(seed);
        let p = experiment::prepare(&cfg, Some(cache)).unwrap();
        calibrated.push(experiment::run_prepared(&cfg, &p).unwrap());
        let mut adv = cfg.clone();
        adv.ablation.key_init = KeyInit::Collapsed;
        adv.ablation.disable_q_calibration = true;
        adv.ablation.disable_momentum = true;
        uncalibrated.push(experiment::run_prepared(&adv, &p).unwrap());
        prep.push((cfg, p));
    }
    let elapsed = started.elapsed();
    let no_momentum = prep
        .iter()
        .map(|(cfg, p)| {
            let mut c = cfg.clone();
            c.federation.alpha_k = 0.0;
            experiment::run_prepared(&c, p).unwrap()
        })
        .collect();
    MixtureRuns {
        prep,
        calibrated,
        uncalibrated,
        no_momentum,
        elapsed,
    }
}

fn criterion_5(board: &mut Board, runs: &MixtureRuns) {
    let groups = runs.calibrated[0].summary.routed_fraction.len();
    let per_group: Vec<f64> = (0..groups)
        .map(|g| mean(&runs.calibrated.iter().map(|r| r.summary.routed_fraction[g]).collect::<Vec<_>>()))
        .collect();
    let congruence = mean(
        &runs
            .calibrated
            .iter()
            .map(|r| r.summary.congruence.map(|c| c.score).unwrap_or(0.0))
            .collect::<Vec<_>>(),
    );
    let top: Vec<f64> = runs
        .uncalibrated
        .iter()
        .map(|r| r.summary.routed_fraction.iter().copied().fold(0.0, f64::max))
        .collect();
    let calibrated_ok = per_group.iter().all(|&f| f >= 0.10) && congruence >= 0.85;
    let collapsed_ok = top.iter().all(|&f| f >= 1.0 - 1e-12);
    board.record(
        5,
        "anti-collapse",
        calibrated_ok && collapsed_ok && runs.elapsed < Duration::from_secs(300),
        false,
        format!(
            "calibrated per-group share {} congruence {congruence:.3}; uncalibrated top-group share per seed {} (mean {:.3}); {}",
            fmt_vec(&per_group),
            fmt_vec(&top),
            mean(&top),
            secs(runs.elapsed)
        ),
    );
}

fn summed_std(outcome: &RunOutcome) -> f64 {
    let counts: Vec<Vec<u64>> = outcome.reports.iter().map(|r| r.group_counts.clone()).collect();
    let tail = &counts[counts.len().saturating_sub(10)..];
    metrics::selection_stability(tail).unwrap().iter().map(|s| s.1).sum()
}

fn criterion_7(board: &mut Board, runs: &MixtureRuns) {
    let with: Vec<f64> = runs.calibrated.iter().map(summed_std).collect();
    let without: Vec<f64> = runs.no_momentum.iter().map(summed_std).collect();
    board.record(
        7,
        "selection stability",
        mean(&with) < mean(&without),
        false,
        format!(
            "summed std alpha_k=0.5 {:.2} vs alpha_k=0 {:.2}; per seed {} vs {}",
            mean(&with),
            mean(&without),
            fmt_vec(&with),
            fmt_vec(&without)
        ),
    );
}

fn criterion_8(board: &mut Board, runs: &MixtureRuns) {
    let started = Instant::now();
    let mut shares = Vec::new();
    let mut low = Vec::new();
    for ((cfg, prep), outcome) in runs.prep.iter().zip(&runs.calibrated) {
        let fz = frozen(cfg, prep);
        let train = prep.split.train_pool();
        let routed = server::route_all(&outcome.state, fz, &train).unwrap();
        let groups = cfg.data.groups;
        let keys = cfg.federation.groups;
        let mut votes = vec![vec![0usize; keys]; groups];
        for (s, &k) in train.iter().zip(&routed) {
            votes[s.group][k] += 1;
        }
        let spec = experiment::mixture_spec(cfg).unwrap();
        let fresh = data::gen_mixture(&spec, cfg.seed ^ 0xABCD_EF01).unwrap();
        for g in 0..groups {
            let mapped = (0..keys).max_by_key(|&k| (votes[g][k], std::cmp::Reverse(k))).unwrap();
            let client: Vec<Sample> = fresh.samples.iter().filter(|s| s.group == g).take(50).cloned().collect();
            let hits = client
                .iter()
                .filter(|s| client::infer_group(fz, &outcome.state.bank.keys, &s.x).unwrap() == mapped)
                .count();
            let share = hits as f64 / client.len() as f64;
            if share < 0.90 {
                low.push(format!("seed {} group {g} {share:.2}", cfg.seed));
            }
            shares.push(share);
        }
    }
    let elapsed = started.elapsed();
    let worst = shares.iter().copied().fold(1.0, f64::min);
    board.record(
        8,
        "out-of-federation routing",
        worst >= 0.90 && elapsed < Duration::from_secs(60),
        false,
        format!(
            "held-out single-group clients over 5 seeds x 4 groups: mean share {:.3}, worst {worst:.3}, below 0.90 [{}], {}",
            mean(&shares),
            low.join(", "),
            secs(elapsed)
        ),
    );
}

fn criterion_10(board: &mut Board, runs: &MixtureRuns) {
    let started = Instant::now();
    let mut rows = Vec::new();
    let mut all = true;
    for (cfg, prep) in &runs.prep {
        let fz = frozen(cfg, prep);
        let groups = cfg.data.groups;
        let mut by_group: Vec<Vec<metrics::Labelled>> = vec![Vec::new(); groups];
        for s in prep.split.train_pool() {
            by_group[s.group].push((fz.routing_feature(&s.x).unwrap(), s.label));
        }
        let halves: Vec<(Vec<metrics::Labelled>, Vec<metrics::Labelled>)> = by_group
            .into_iter()
            .map(|v| {
                let (a, b): (Vec<_>, Vec<_>) = v.into_iter().enumerate().partition(|(i, _)| i % 2 == 0);
                (a.into_iter().map(|x| x.1).collect(), b.into_iter().map(|x| x.1).collect())
            })
            .collect();
        let hyp = metrics::random_hypotheses(cfg.encoder.dim, cfg.data.classes, 64, cfg.seed);
        let within: Vec<f64> = halves
            .iter()
            .map(|(a, b)| metrics::empirical_discrepancy(a, b, &hyp).unwrap())
            .collect();
        let mut cross = Vec::new();
        for g in 0..groups {
            for h in g + 1..groups {
                cross.push(metrics::empirical_discrepancy(&halves[g].0, &halves[h].1, &hyp).unwrap());
            }
        }
        let (w, c) = (mean(&within), mean(&cross));
        all &= w < c;
        rows.push(format!("{w:.3}<{c:.3}"));
    }
    let elapsed = started.elapsed();
    board.record(
        10,
        "discrepancy direction",
        all && elapsed < Duration::from_secs(60),
        false,
        format!("within vs cross per seed [{}], {}", rows.join(", "), secs(elapsed)),
    );
}

fn criterion_2_and_6(board: &mut Board, cache: &Path, mixture: &MixtureRuns) {
    let started = Instant::now();
    let labels = ["bcd", "joint", "bcd_inv", "shared_only"];
    let mut worst: Vec<Vec<f64>> = vec![Vec::new(); labels.len()];
    let mut hashes_ok = true;
    let mut runs = 0;
    for seed in SEEDS {
        let base = experiment::label_skew_toy(seed);
        let prep = experiment::prepare(&base, Some(cache)).unwrap();
        for (label, cfg) in experiment::table3_configs(&base) {
            let Some(slot) = labels.iter().position(|l| *l == label) else {
                continue;
            };
            let out = experiment::run_prepared(&cfg, &prep).unwrap();
            hashes_ok &= out.backbone_hash_before == out.backbone_hash_after;
            runs += 1;
            worst[slot].push(out.summary.accuracy.worst_local);
        }
    }
    for out in mixture.calibrated.iter().chain(&mixture.uncalibrated).chain(&mixture.no_momentum) {
        hashes_ok &= out.backbone_hash_before == out.backbone_hash_after;
        runs += 1;
    }
    let elapsed = started.elapsed();
    board.record(
        2,
        "frozen backbone",
        hashes_ok,
        true,
        format!("backbone hash unchanged across {runs} thirty-round runs"),
    );

    let m: Vec<f64> = worst.iter().map(|v| mean(v)).collect();
    let diff = |a: usize, b: usize| -> Vec<f64> { worst[a].iter().zip(&worst[b]).map(|(x, y)| x - y).collect() };
    let (bcd_joint, bcd_shared) = (diff(0, 1), diff(0, 3));
    let p_joint = metrics::sign_test(&bcd_joint);
    let p_shared = metrics::sign_test(&bcd_shared);
    let gap_joint = m[0] - m[1];
    let gap_shared = m[0] - m[3];
    let passed = gap_joint >= 0.03
        && p_joint < 0.1
        && m[1] >= m[2]
        && gap_shared >= 0.03
        && p_shared < 0.1
        && elapsed < Duration::from_secs(900);
    let mut detail = String::from("mean worst-local");
    for (l, v) in labels.iter().zip(&m) {
        write!(detail, " {l} {v:.3}").unwrap();
    }
    write!(
        detail,
        "; bcd-joint {:+.3} (p={p_joint:.3}), bcd-shared_only {:+.3} (p={p_shared:.3}), joint-bcd_inv {:+.3}; per seed",
        gap_joint,
        gap_shared,
        m[1] - m[2]
    )
    .unwrap();
    for (l, v) in labels.iter().zip(&worst) {
        write!(detail, " {l} {}", fmt_vec(v)).unwrap();
    }
    write!(detail, "; {}", secs(elapsed)).unwrap();
    board.record(6, "block-coordinate ordering", passed, false, detail);
}

fn criterion_9(board: &mut Board, root: &Path) {
    let started = Instant::now();
    let mut csvs = Vec::new();
    for (i, threads) in [1usize, 1, 8, 8].into_iter().enumerate() {
        let mut cfg = experiment::mixture_toy(11);
        cfg.name = "determinism".into();
        cfg.federation.threads = threads;
        let out = root.join(format!("run{i}"));
        let cache = root.join("cache");
        fs::create_dir_all(&out).unwrap();
        let prep = experiment::prepare(&cfg, Some(&cache)).unwrap();
        let outcome = experiment::run_prepared(&cfg, &prep).unwrap();
        experiment::write_artifacts(&cfg, &out, &outcome).unwrap();
        csvs.push(fs::read(experiment::run_dir(&cfg, &out).join("summary.csv")).unwrap());
    }
    let elapsed = started.elapsed();
    let identical = csvs.windows(2).all(|w| w[0] == w[1]);
    board.record(
        9,
        "determinism",
        identical && elapsed < Duration::from_secs(600),
        true,
        format!(
            "summary.csv byte-identical over 2 runs at 1 thread and 2 at 8 threads: {identical}, {}",
            secs(elapsed)
        ),
    );
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = tmp.path().join("cache");
    let mut board = Board::default();

    criterion_1(&mut board);
    criterion_3(&mut board);
    criterion_4(&mut board, &cache);
    let mixture = mixture_runs(&cache);
    criterion_5(&mut board, &mixture);
    criterion_7(&mut board, &mixture);
    criterion_8(&mut board, &mixture);
    criterion_10(&mut board, &mixture);
    criterion_2_and_6(&mut board, &cache, &mixture);
    criterion_9(&mut board, &tmp.path().join("determinism"));

    board.lines.sort_by_key(|l| l.id);
    say("\nacceptance summary");
    for l in &board.lines {
        say(&format!(
            "criterion {:>2} {:<28} {}",
            l.id,
            l.title,
            if l.passed { "PASS" } else { "FAIL" }
        ));
    }
    let strict = std::env::var("PROMPTFED_STRICT_ACCEPTANCE").is_ok_and(|v| v == "1");
    let broken: Vec<String> = board
        .lines
        .iter()
        .filter(|l| !l.passed && (l.asserted || strict))
        .map(|l| format!("criterion {}: {}", l.id, l.detail))
        .collect();
    assert!(broken.is_empty(), "{}", broken.join("\n"));
}
