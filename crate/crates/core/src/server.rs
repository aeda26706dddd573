//! Round orchestration: client sampling, weighted aggregation, count
//! accumulation, momentum, broadcast, and global inference.

use std::path::Path;
use std::time::Instant;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Dtype};
use crate::client::{self, Broadcast, ClientRoundResult, Frozen, LocalHyper, PromptMode};
use crate::data::Sample;
use crate::encoder::{self, EncoderConfig, LayerPrompts, PromptSet};
use crate::error::{Error, Result};
use crate::metrics::{self, RoundReport};
use crate::numerics::Tensor;
use crate::rng::{client_seed, rng_for, seed_for};
use crate::selection::{self, momentum_merge, update_q, KeyBank};

const WEIGHT_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerHyper {
    pub clients: usize,
    pub gamma: f64,
    pub rounds: usize,
    pub alpha_k: f64,
    pub alpha_g: f64,
    /// Worker threads for client rounds; 0 uses the global rayon pool.
    pub threads: usize,
    /// Re-verify conservation and frozen-backbone invariants every round.
    pub check_invariants: bool,
}

impl Default for ServerHyper {
    fn default() -> Self {
        Self {
            clients: 20,
            gamma: 1.0,
            rounds: 30,
            alpha_k: 0.5,
            alpha_g: 0.5,
            threads: 0,
            check_invariants: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalState {
    /// Broadcast prompts; group prompts equal the momentum shadows once set.
    pub prompts: PromptSet,
    pub bank: KeyBank,
    /// Rounds completed so far.
    pub round: usize,
    pub seed: u64,
}

impl GlobalState {
    pub fn init(cfg: &EncoderConfig, groups: usize, classes: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            prompts: PromptSet::init(cfg, groups, classes, seed_for(seed, &[0x9A0]))?,
            bank: KeyBank::init(groups, cfg.dim, seed_for(seed, &[0x4E7]))?,
            round: 0,
            seed,
        })
    }

    pub fn broadcast(&self) -> Broadcast {
        Broadcast {
            prompts: self.prompts.clone(),
            keys: self.bank.keys.clone(),
            q: self.bank.q.clone(),
        }
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.prompts.named_tensors();
        out.extend(self.bank.keys.iter().enumerate().map(|(g, k)| (format!("key{g}"), k)));
        if let Some(sk) = &self.bank.shadow_keys {
            out.extend(sk.iter().enumerate().map(|(g, k)| (format!("shadow.key{g}"), k)));
        }
        if let Some(sp) = &self.bank.shadow_group_prompts {
            for (g, layers) in sp.iter().enumerate() {
                out.extend(layers.iter().map(|(l, t)| (format!("shadow.group{g}.{l}"), t)));
            }
        }
        out
    }

    /// Hash of every trainable tensor plus counts.
    pub fn hash(&self) -> String {
        let counts = Tensor::vector(self.bank.counts.iter().map(|&c| c as f64).collect());
        let mut items = self.named_tensors();
        items.push(("counts".into(), &counts));
        crate::hash_tensors(items.into_iter())
    }

    pub fn check(&self) -> Result<()> {
        self.bank.check()?;
        if self.prompts.num_groups() != self.bank.num_groups() {
            return Err(Error::Invariant("group prompts and keys disagree on G".into()));
        }
        if self.round > 0 && (self.bank.shadow_keys.is_none() || self.bank.shadow_group_prompts.is_none()) {
            return Err(Error::Invariant("momentum shadows missing after round 0".into()));
        }
        Ok(())
    }

    /// Writes the full state as an `f64` checkpoint.
    pub fn save(&self, stem: &Path, config_echo: &str) -> Result<()> {
        let extra = serde_json::json!({
            "round": self.round,
            "counts": self.bank.counts,
            "q": self.bank.q,
            "groups": self.prompts.num_groups(),
            "classes": self.prompts.num_classes(),
            "has_shadows": self.bank.shadow_keys.is_some(),
        });
        checkpoint::save(stem, self.named_tensors(), Dtype::F64, config_echo, self.seed, extra)?;
        Ok(())
    }

    pub fn load(stem: &Path, cfg: &EncoderConfig) -> Result<Self> {
        let ck = checkpoint::load(stem)?;
        let extra = &ck.manifest.extra;
        let field = |k: &str| {
            extra
                .get(k)
                .cloned()
                .ok_or_else(|| Error::format("state manifest", format!("missing field {k:?}")))
        };
        let parse = |k: &str, v: serde_json::Value| -> Result<usize> {
            serde_json::from_value(v).map_err(|e| Error::format("state manifest", format!("{k}: {e}")))
        };
        let groups = parse("groups", field("groups")?)?;
        let classes = parse("classes", field("classes")?)?;
        let round = parse("round", field("round")?)?;
        let counts: Vec<u64> = serde_json::from_value(field("counts")?)
            .map_err(|e| Error::format("state manifest", format!("counts: {e}")))?;
        let has_shadows: bool = serde_json::from_value(field("has_shadows")?)
            .map_err(|e| Error::format("state manifest", format!("has_shadows: {e}")))?;

        let mut state = Self::init(cfg, groups, classes, ck.manifest.seed)?;
        state.round = round;
        ck.restore_into(state.prompts.named_tensors_mut())?;
        for (g, k) in state.bank.keys.iter_mut().enumerate() {
            *k = ck.get(&format!("key{g}"))?.clone();
        }
        if has_shadows {
            let keys = (0..groups)
                .map(|g| ck.get(&format!("shadow.key{g}")).cloned())
                .collect::<Result<Vec<_>>>()?;
            let mut prompts = state.prompts.groups.clone();
            for (g, layers) in prompts.iter_mut().enumerate() {
                for (l, t) in layers.iter_mut() {
                    *t = ck.get(&format!("shadow.group{g}.{l}"))?.clone();
                }
            }
            state.bank.shadow_keys = Some(keys);
            state.bank.shadow_group_prompts = Some(prompts);
        }
        if counts.len() != groups {
            return Err(Error::format("state manifest", "counts length differs from G"));
        }
        state.bank.q = update_q(&counts);
        state.bank.counts = counts;
        state.check()?;
        Ok(state)
    }
}

/// `m = max(1, round(gamma * M))` distinct clients, ascending.
pub fn sample_clients<R: Rng + ?Sized>(clients: usize, gamma: f64, rng: &mut R) -> Result<Vec<usize>> {
    let m = participants(clients, gamma)?;
    let mut picked = index::sample(rng, clients, m).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

pub fn participants(clients: usize, gamma: f64) -> Result<usize> {
    if clients == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Config(format!("participation ratio gamma={gamma} must lie in (0, 1]")));
    }
    let m = (gamma * clients as f64).round() as usize;
    if m == 0 {
        return Err(Error::Config(format!("gamma={gamma} with M={clients} selects no clients")));
    }
    Ok(m.min(clients))
}

/// `sum_i w_i x_i`, accumulated in input order starting from the first term.
fn weighted_sum(items: &[(f64, &Tensor)]) -> Result<Tensor> {
    let (w0, first) = items.first().ok_or(Error::Empty("aggregation inputs"))?;
    let mut acc = first.map(|v| w0 * v);
    for (w, t) in &items[1..] {
        if !t.same_shape(first) {
            return Err(Error::shape("aggregate", format!("{:?} vs {:?}", t.shape(), first.shape())));
        }
        acc.axpy(*w, t)?;
    }
    Ok(acc)
}

fn weighted_layers(items: &[(f64, &LayerPrompts)]) -> Result<LayerPrompts> {
    let (_, first) = items.first().ok_or(Error::Empty("aggregation inputs"))?;
    let mut out = LayerPrompts::new();
    for l in first.keys() {
        let terms = items
            .iter()
            .map(|(w, layers)| {
                layers
                    .get(l)
                    .map(|t| (*w, t))
                    .ok_or_else(|| Error::shape("aggregate", format!("client lacks prompt layer {l}")))
            })
            .collect::<Result<Vec<_>>>()?;
        out.insert(*l, weighted_sum(&terms)?);
    }
    Ok(out)
}

/// `alpha_i = N_i / sum_j N_j`.
pub fn client_weights(results: &[ClientRoundResult]) -> Result<Vec<f64>> {
    let total: usize = results.iter().map(|r| r.num_samples).sum();
    if results.is_empty() {
        return Err(Error::Empty("client results"));
    }
    if total == 0 {
        return Err(Error::Degenerate("participating clients hold no samples".into()));
    }
    Ok(results.iter().map(|r| r.num_samples as f64 / total as f64).collect())
}

/// Sample-weighted mean of shared prompts, head and group prompts.
pub fn aggregate_params(results: &[ClientRoundResult]) -> Result<PromptSet> {
    let w = client_weights(results)?;
    let first = &results[0].prompts;
    let groups = first.num_groups();
    if results.iter().any(|r| r.prompts.num_groups() != groups) {
        return Err(Error::shape("aggregate_params", "clients disagree on group count"));
    }
    let shared = weighted_layers(&w.iter().zip(results).map(|(&a, r)| (a, &r.prompts.shared)).collect::<Vec<_>>())?;
    let group_prompts = (0..groups)
        .map(|g| weighted_layers(&w.iter().zip(results).map(|(&a, r)| (a, &r.prompts.groups[g])).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    let head_w = weighted_sum(&w.iter().zip(results).map(|(&a, r)| (a, &r.prompts.head_w)).collect::<Vec<_>>())?;
    let head_b = weighted_sum(&w.iter().zip(results).map(|(&a, r)| (a, &r.prompts.head_b)).collect::<Vec<_>>())?;
    Ok(PromptSet {
        shared,
        groups: group_prompts,
        head_w,
        head_b,
    })
}

/// Per-group weights `N_g^i / sum_j N_g^j`; `None` for a group nobody selected.
pub fn key_weights(results: &[ClientRoundResult], groups: usize) -> Vec<Option<Vec<f64>>> {
    (0..groups)
        .map(|g| {
            let total: u64 = results.iter().map(|r| r.group_counts.get(g).copied().unwrap_or(0)).sum();
            (total > 0).then(|| results.iter().map(|r| r.group_counts[g] as f64 / total as f64).collect())
        })
        .collect()
}

/// Count-weighted key mean; unselected groups keep `previous`.
pub fn aggregate_keys(results: &[ClientRoundResult], previous: &[Tensor]) -> Result<Vec<Tensor>> {
    if results.is_empty() {
        return Err(Error::Empty("client results"));
    }
    let groups = previous.len();
    if results.iter().any(|r| r.keys.len() != groups || r.group_counts.len() != groups) {
        return Err(Error::shape("aggregate_keys", "clients disagree on group count"));
    }
    key_weights(results, groups)
        .into_iter()
        .enumerate()
        .map(|(g, w)| match w {
            None => Ok(previous[g].clone()),
            Some(w) => {
                let terms: Vec<(f64, &Tensor)> = w
                    .iter()
                    .zip(results)
                    .filter(|(&a, _)| a > 0.0)
                    .map(|(&a, r)| (a, &r.keys[g]))
                    .collect();
                weighted_sum(&terms)
            }
        })
        .collect()
}

/// `v += round counts`, `q = update_q(v)`. Returns this round's counts.
pub fn accumulate_counts(bank: &mut KeyBank, results: &[ClientRoundResult]) -> Vec<u64> {
    let mut round = vec![0u64; bank.num_groups()];
    for r in results {
        round.iter_mut().zip(&r.group_counts).for_each(|(a, b)| *a += b);
    }
    if round.iter().any(|&c| c > 0) {
        bank.counts.iter_mut().zip(&round).for_each(|(v, c)| *v += c);
        bank.q = update_q(&bank.counts);
    }
    round
}

/// Folds the fresh aggregate into the shadows and makes the shadows the
/// broadcast keys and group prompts. The first call initializes the shadows.
pub fn apply_momentum(
    state: &mut GlobalState,
    fresh_keys: Vec<Tensor>,
    fresh_groups: Vec<LayerPrompts>,
    alpha_k: f64,
    alpha_g: f64,
) -> Result<()> {
    let keys = match &state.bank.shadow_keys {
        None => fresh_keys,
        Some(shadow) => shadow
            .iter()
            .zip(&fresh_keys)
            .map(|(s, f)| momentum_merge(s, f, alpha_k))
            .collect::<Result<Vec<_>>>()?,
    };
    let groups = match &state.bank.shadow_group_prompts {
        None => fresh_groups,
        Some(shadow) => shadow
            .iter()
            .zip(&fresh_groups)
            .map(|(s, f)| {
                s.iter()
                    .map(|(l, t)| {
                        let fresh = f
                            .get(l)
                            .ok_or_else(|| Error::shape("apply_momentum", format!("missing group layer {l}")))?;
                        Ok((*l, momentum_merge(t, fresh, alpha_g)?))
                    })
                    .collect::<Result<LayerPrompts>>()
            })
            .collect::<Result<Vec<_>>>()?,
    };
    state.bank.keys = keys.clone();
    state.bank.shadow_keys = Some(keys);
    state.prompts.groups = groups.clone();
    state.bank.shadow_group_prompts = Some(groups);
    Ok(())
}

/// Predicted class and routed group for one sample (plain routing).
pub fn infer(state: &GlobalState, frozen: Frozen<'_>, mode: PromptMode, x: &[f64]) -> Result<(usize, usize)> {
    let g = client::infer_group(frozen, &state.bank.keys, x)?;
    let route = frozen.inference_route(mode, g);
    let class = encoder::predict(frozen.cfg, frozen.backbone, &state.prompts, &route, x)?;
    Ok((class, g))
}

/// Test data scored after every round.
#[derive(Clone, Debug, Default)]
pub struct EvalSets {
    pub client_tests: Vec<Vec<Sample>>,
    pub global_test: Vec<Sample>,
}

fn check_round(
    state: &GlobalState,
    results: &[ClientRoundResult],
    frozen: Frozen<'_>,
    backbone_hash: &str,
) -> Result<()> {
    let w = client_weights(results)?;
    if (w.iter().sum::<f64>() - 1.0).abs() > WEIGHT_TOL {
        return Err(Error::Invariant("client aggregation weights do not sum to 1".into()));
    }
    for kw in key_weights(results, state.bank.num_groups()).into_iter().flatten() {
        if (kw.iter().sum::<f64>() - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::Invariant("key aggregation weights do not sum to 1".into()));
        }
    }
    state.check()?;
    if frozen.backbone.hash() != backbone_hash {
        return Err(Error::Invariant("backbone changed during training".into()));
    }
    Ok(())
}

/// Runs rounds `state.round..hyper.rounds`, returning one report per round.
pub fn run_training(
    frozen: Frozen<'_>,
    mut state: GlobalState,
    train: &[Vec<Sample>],
    eval: &EvalSets,
    hyper: &ServerHyper,
    local: &LocalHyper,
) -> Result<(GlobalState, Vec<RoundReport>)> {
    if train.len() != hyper.clients {
        return Err(Error::Config(format!(
            "{} client datasets for M={}",
            train.len(),
            hyper.clients
        )));
    }
    participants(hyper.clients, hyper.gamma)?;
    let pool = (hyper.threads > 0)
        .then(|| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(hyper.threads)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))
        })
        .transpose()?;
    let backbone_hash = frozen.backbone.hash();
    let mut reports = Vec::new();

    while state.round < hyper.rounds {
        let t = state.round;
        let started = Instant::now();
        let picked = sample_clients(hyper.clients, hyper.gamma, &mut rng_for(state.seed, &[0x5A3, t as u64]))?;
        let broadcast = state.broadcast();
        let work = || {
            picked
                .par_iter()
                .map(|&i| client::local_round(frozen, &broadcast, i, &train[i], local, client_seed(state.seed, t, i)))
                .collect::<Result<Vec<_>>>()
        };
        let results = match &pool {
            Some(p) => p.install(work),
            None => work(),
        }?;

        let agg = aggregate_params(&results)?;
        let fresh_keys = aggregate_keys(&results, &state.bank.keys)?;
        let round_counts = accumulate_counts(&mut state.bank, &results);
        state.prompts.shared = agg.shared;
        state.prompts.head_w = agg.head_w;
        state.prompts.head_b = agg.head_b;
        apply_momentum(&mut state, fresh_keys, agg.groups, hyper.alpha_k, hyper.alpha_g)?;
        state.round += 1;
        if hyper.check_invariants {
            check_round(&state, &results, frozen, &backbone_hash)?;
        }

        let acc = if eval.global_test.is_empty() {
            None
        } else {
            Some(metrics::accuracies(&state, frozen, local.prompts, &eval.client_tests, &eval.global_test)?)
        };
        reports.push(RoundReport {
            round: state.round,
            accuracy: acc,
            group_counts: round_counts,
            client_histograms: results.iter().map(|r| (r.client_id, r.group_counts.clone())).collect(),
            congruence: None,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok((state, reports))
}

/// Inference routing of every sample under the current keys.
pub fn route_all(state: &GlobalState, frozen: Frozen<'_>, samples: &[Sample]) -> Result<Vec<usize>> {
    samples
        .par_iter()
        .map(|s| selection::select(&frozen.routing_feature(&s.x)?, &state.bank.keys))
        .collect()
}
