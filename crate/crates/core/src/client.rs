//! Local training by block coordinate descent.
//!
//! Block I fits shared prompts and head with the group slot disabled and a
//! cls-only head input. Block II freezes the shared prompts and fits the routed
//! group prompt, head and key. The server only ever sees the returned
//! [`ClientRoundResult`].

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::encoder::{self, BackboneWeights, EncoderConfig, HeadPool, PromptGrads, PromptSet, Route, Trainable};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::selection;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BcdMode {
    #[default]
    Bcd,
    BcdInv,
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    SharedOnly,
    GroupOnly,
    #[default]
    Both,
}

impl PromptMode {
    pub fn uses_shared(self) -> bool {
        matches!(self, PromptMode::SharedOnly | PromptMode::Both)
    }

    pub fn uses_group(self) -> bool {
        matches!(self, PromptMode::GroupOnly | PromptMode::Both)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalHyper {
    /// Epochs per block.
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub mode: BcdMode,
    pub prompts: PromptMode,
    /// Route with `q`-calibrated scores during training.
    pub calibrate: bool,
    pub cache_features: bool,
}

impl Default for LocalHyper {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 0.05,
            batch_size: 8,
            mode: BcdMode::Bcd,
            prompts: PromptMode::Both,
            calibrate: true,
            cache_features: true,
        }
    }
}

/// Frozen inputs shared by every client in a round.
#[derive(Clone, Copy)]
pub struct Frozen<'a> {
    pub cfg: &'a EncoderConfig,
    pub backbone: &'a BackboneWeights,
}

impl Frozen<'_> {
    /// Routing feature: plain cls output at the configured select layer.
    pub fn routing_feature(&self, x: &[f64]) -> Result<Vec<f64>> {
        encoder::forward_plain(self.cfg, self.backbone, x, self.cfg.select_layer)
    }

    /// Route used for group-prompted passes under `mode`.
    pub fn group_route(&self, mode: PromptMode, g: usize) -> Route {
        Route::with_group(mode.uses_shared(), g, self.cfg.head_pool)
    }

    /// Route used at inference for a sample assigned to group `g`.
    pub fn inference_route(&self, mode: PromptMode, g: usize) -> Route {
        if mode.uses_group() {
            self.group_route(mode, g)
        } else {
            Route::shared_only()
        }
    }
}

/// What a client receives at the start of a round.
#[derive(Clone, Debug, PartialEq)]
pub struct Broadcast {
    pub prompts: PromptSet,
    pub keys: Vec<Tensor>,
    pub q: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    Shared,
    Group,
    Joint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientRoundResult {
    pub client_id: usize,
    pub prompts: PromptSet,
    pub keys: Vec<Tensor>,
    /// Group selections made while training group prompts.
    pub group_counts: Vec<u64>,
    pub num_samples: usize,
    /// Mean loss of every epoch, in execution order.
    pub epoch_losses: Vec<f64>,
    pub call_log: Vec<BlockKind>,
}

impl ClientRoundResult {
    pub fn hash(&self) -> String {
        let mut items: Vec<(String, &Tensor)> = self.prompts.named_tensors();
        items.extend(self.keys.iter().enumerate().map(|(g, k)| (format!("key{g}"), k)));
        let counts = Tensor::vector(self.group_counts.iter().map(|&c| c as f64).collect());
        items.push(("counts".into(), &counts));
        crate::hash_tensors(items.into_iter())
    }
}

struct BlockSpec<'q> {
    shared: bool,
    group: bool,
    trainable: Trainable,
    train_keys: bool,
    pool: HeadPool,
    q: Option<&'q [f64]>,
}

struct BlockOutcome {
    epoch_losses: Vec<f64>,
    counts: Vec<u64>,
}

/// Mutable local copy of the trainable state.
pub struct LocalState {
    pub prompts: PromptSet,
    pub keys: Vec<Tensor>,
}

fn apply(prompts: &mut PromptSet, grads: &PromptGrads, step: f64) -> Result<()> {
    for (l, g) in &grads.shared {
        prompts
            .shared
            .get_mut(l)
            .ok_or_else(|| Error::Invariant(format!("no shared prompt at layer {l}")))?
            .axpy(step, g)?;
    }
    if let Some(g) = &grads.head_w {
        prompts.head_w.axpy(step, g)?;
    }
    if let Some(g) = &grads.head_b {
        prompts.head_b.axpy(step, g)?;
    }
    Ok(())
}

fn run_block(
    frozen: Frozen<'_>,
    state: &mut LocalState,
    data: &[Sample],
    features: &mut FeatureCache,
    spec: &BlockSpec<'_>,
    hyper: &LocalHyper,
    rng: &mut ChaCha8Rng,
) -> Result<BlockOutcome> {
    let groups = state.keys.len();
    let routing_keys = state.keys.clone();
    let mut counts = vec![0u64; groups];
    let mut epoch_losses = Vec::with_capacity(hyper.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let bs = hyper.batch_size.max(1);

    for _ in 0..hyper.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for batch in order.chunks(bs) {
            let mut grads = PromptGrads::default();
            // per-group (prompt grads, key grads)
            let mut group_grads: Vec<Option<PromptGrads>> = vec![None; groups];
            let mut key_grads: Vec<Option<Tensor>> = vec![None; groups];
            for &i in batch {
                let s = &data[i];
                let route = if spec.group {
                    let f = features.get(frozen, i, &s.x)?;
                    let g = selection::route(f, &routing_keys, spec.q)?;
                    counts[g] += 1;
                    if spec.train_keys {
                        let (loss, grad) = selection::key_loss_at(f, &state.keys[g])?;
                        total += loss;
                        match &mut key_grads[g] {
                            Some(acc) => acc.axpy(1.0, &grad)?,
                            slot => *slot = Some(grad),
                        }
                    }
                    Route::with_group(spec.shared, g, spec.pool)
                } else {
                    Route::shared_only()
                };
                let (loss, mut g) =
                    encoder::loss_and_grads(frozen.cfg, frozen.backbone, &state.prompts, &route, spec.trainable, &s.x, s.label)?;
                total += loss;
                if let Some(k) = route.group {
                    let group_part = PromptGrads {
                        group: std::mem::take(&mut g.group),
                        ..PromptGrads::default()
                    };
                    match &mut group_grads[k] {
                        Some(acc) => acc.accumulate(group_part)?,
                        slot => *slot = Some(group_part),
                    }
                }
                grads.accumulate(g)?;
            }
            let step = -hyper.lr / batch.len() as f64;
            apply(&mut state.prompts, &grads, step)?;
            for (k, gg) in group_grads.into_iter().enumerate() {
                let Some(gg) = gg else { continue };
                for (l, t) in &gg.group {
                    state.prompts.groups[k]
                        .get_mut(l)
                        .ok_or_else(|| Error::Invariant(format!("no group prompt at layer {l}")))?
                        .axpy(step, t)?;
                }
            }
            for (k, kg) in key_grads.into_iter().enumerate() {
                if let Some(kg) = kg {
                    state.keys[k].axpy(step, &kg)?;
                }
            }
        }
        epoch_losses.push(total / data.len() as f64);
    }
    Ok(BlockOutcome { epoch_losses, counts })
}

/// Routing features for one shard; computed lazily, optionally kept for the round.
pub struct FeatureCache {
    enabled: bool,
    slots: Vec<Option<Vec<f64>>>,
    scratch: Vec<f64>,
}

impl FeatureCache {
    pub fn new(len: usize, enabled: bool) -> Self {
        Self {
            enabled,
            slots: vec![None; len],
            scratch: Vec::new(),
        }
    }

    fn get(&mut self, frozen: Frozen<'_>, i: usize, x: &[f64]) -> Result<&[f64]> {
        if !self.enabled {
            self.scratch = frozen.routing_feature(x)?;
            return Ok(&self.scratch);
        }
        if self.slots[i].is_none() {
            self.slots[i] = Some(frozen.routing_feature(x)?);
        }
        Ok(self.slots[i].as_deref().expect("filled above"))
    }
}

fn check_data(data: &[Sample]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Empty("client dataset"));
    }
    Ok(())
}

/// Shared prompts and head only; group slots inactive, cls-only head input.
pub fn train_block_one(
    frozen: Frozen<'_>,
    state: &mut LocalState,
    data: &[Sample],
    hyper: &LocalHyper,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    check_data(data)?;
    let spec = BlockSpec {
        shared: true,
        group: false,
        trainable: Trainable {
            shared: true,
            group: false,
            head: true,
        },
        train_keys: false,
        pool: HeadPool::ClsOnly,
        q: None,
    };
    let mut cache = FeatureCache::new(data.len(), false);
    Ok(run_block(frozen, state, data, &mut cache, &spec, hyper, rng)?.epoch_losses)
}

/// Group prompts, head and keys with shared prompts frozen. Returns epoch
/// losses and per-group selection counts.
pub fn train_block_two(
    frozen: Frozen<'_>,
    state: &mut LocalState,
    data: &[Sample],
    q: &[f64],
    hyper: &LocalHyper,
    features: &mut FeatureCache,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, Vec<u64>)> {
    check_data(data)?;
    let spec = BlockSpec {
        shared: hyper.prompts.uses_shared(),
        group: true,
        trainable: Trainable {
            shared: false,
            group: true,
            head: true,
        },
        train_keys: true,
        pool: frozen.cfg.head_pool,
        q: hyper.calibrate.then_some(q),
    };
    let out = run_block(frozen, state, data, features, &spec, hyper, rng)?;
    Ok((out.epoch_losses, out.counts))
}

fn train_joint(
    frozen: Frozen<'_>,
    state: &mut LocalState,
    data: &[Sample],
    q: &[f64],
    hyper: &LocalHyper,
    features: &mut FeatureCache,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, Vec<u64>)> {
    check_data(data)?;
    let spec = BlockSpec {
        shared: hyper.prompts.uses_shared(),
        group: true,
        trainable: Trainable::ALL,
        train_keys: true,
        pool: frozen.cfg.head_pool,
        q: hyper.calibrate.then_some(q),
    };
    let out = run_block(frozen, state, data, features, &spec, hyper, rng)?;
    Ok((out.epoch_losses, out.counts))
}

/// Blocks to execute, in order, for a mode.
pub fn schedule(hyper: &LocalHyper) -> Vec<BlockKind> {
    match (hyper.prompts, hyper.mode) {
        (PromptMode::SharedOnly, _) => vec![BlockKind::Shared],
        (PromptMode::GroupOnly, _) => vec![BlockKind::Group],
        (PromptMode::Both, BcdMode::Bcd) => vec![BlockKind::Shared, BlockKind::Group],
        (PromptMode::Both, BcdMode::BcdInv) => vec![BlockKind::Group, BlockKind::Shared],
        (PromptMode::Both, BcdMode::Joint) => vec![BlockKind::Joint],
    }
}

/// One client's work for a communication round.
pub fn local_round(
    frozen: Frozen<'_>,
    global: &Broadcast,
    client_id: usize,
    data: &[Sample],
    hyper: &LocalHyper,
    seed: u64,
) -> Result<ClientRoundResult> {
    check_data(data)?;
    if global.keys.len() != global.prompts.num_groups() || global.q.len() != global.keys.len() {
        return Err(Error::Invariant("broadcast keys, q and group prompts disagree".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = LocalState {
        prompts: global.prompts.clone(),
        keys: global.keys.clone(),
    };
    let mut counts = vec![0u64; global.keys.len()];
    let mut losses = Vec::new();
    let mut features = FeatureCache::new(data.len(), hyper.cache_features);
    let log = schedule(hyper);
    for block in &log {
        let (l, c) = match block {
            BlockKind::Shared => (train_block_one(frozen, &mut state, data, hyper, &mut rng)?, None),
            BlockKind::Group => {
                let (l, c) = train_block_two(frozen, &mut state, data, &global.q, hyper, &mut features, &mut rng)?;
                (l, Some(c))
            }
            BlockKind::Joint => {
                let (l, c) = train_joint(frozen, &mut state, data, &global.q, hyper, &mut features, &mut rng)?;
                (l, Some(c))
            }
        };
        losses.extend(l);
        if let Some(c) = c {
            counts.iter_mut().zip(c).for_each(|(a, b)| *a += b);
        }
    }
    Ok(ClientRoundResult {
        client_id,
        prompts: state.prompts,
        keys: state.keys,
        group_counts: counts,
        num_samples: data.len(),
        epoch_losses: losses,
        call_log: log,
    })
}

/// Group index used at inference: plain cosine argmax.
pub fn infer_group(frozen: Frozen<'_>, keys: &[Tensor], x: &[f64]) -> Result<usize> {
    selection::select(&frozen.routing_feature(x)?, keys)
}
