//! Frozen pre-LN transformer encoder with shared and group prompt slots.
//!
//! Token layout inside every layer is `[cls | group slot | shared slot | patches]`.
//! At a layer listed in `shared_layers` the shared slot is rebuilt from that
//! layer's own prompt tensor; at a layer in `group_layers` the group slot is
//! rebuilt from the routed group's prompt tensor. Elsewhere slot outputs flow
//! through as ordinary tokens.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{kernels, Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::rng::seed_for;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadPool {
    ClsOnly,
    #[default]
    ClsPlusGroupAvg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub n_tokens: usize,
    pub patch_dim: usize,
    pub mlp_ratio: usize,
    /// 1-based layer indices receiving fresh shared prompts.
    pub shared_layers: Vec<usize>,
    /// 1-based layer indices receiving fresh group prompts.
    pub group_layers: Vec<usize>,
    pub prompt_len: usize,
    /// Layer whose plain cls output is the routing feature.
    pub select_layer: usize,
    /// Head input while group prompts are active.
    pub head_pool: HeadPool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            dim: 16,
            heads: 2,
            n_tokens: 4,
            patch_dim: 4,
            mlp_ratio: 2,
            shared_layers: vec![1, 2],
            group_layers: vec![3, 4],
            prompt_len: 1,
            select_layer: 4,
            head_pool: HeadPool::ClsPlusGroupAvg,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.dim == 0 || self.n_tokens == 0 || self.patch_dim == 0 {
            return bad("layers, dim, n_tokens and patch_dim must be positive".into());
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} is not divisible by heads {}", self.dim, self.heads));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        if self.prompt_len == 0 {
            return bad("prompt_len must be at least 1".into());
        }
        if self.select_layer == 0 || self.select_layer > self.layers {
            return bad(format!(
                "select_layer {} outside 1..={}",
                self.select_layer, self.layers
            ));
        }
        for (name, set) in [("shared_layers", &self.shared_layers), ("group_layers", &self.group_layers)] {
            if let Some(&l) = set.iter().find(|&&l| l == 0 || l > self.layers) {
                return bad(format!("{name} contains layer {l} outside 1..={}", self.layers));
            }
            let mut sorted = set.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != set.len() {
                return bad(format!("{name} has duplicate entries"));
            }
        }
        if let (Some(max_s), Some(min_g)) = (
            self.shared_layers.iter().max(),
            self.group_layers.iter().min(),
        ) {
            if max_s >= min_g {
                return bad(format!(
                    "shared layers must all precede group layers (max shared {max_s}, min group {min_g})"
                ));
            }
        }
        Ok(())
    }

    pub fn raw_dim(&self) -> usize {
        self.n_tokens * self.patch_dim
    }

    fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Sequence length entering 1-based layer `u` for the given slot usage.
    pub fn sequence_len(&self, u: usize, route: &Route) -> usize {
        let shared = route.shared && self.shared_layers.iter().any(|&l| l <= u);
        let group = route.group.is_some() && self.group_layers.iter().any(|&l| l <= u);
        1 + self.n_tokens + self.prompt_len * (shared as usize + group as usize)
    }
}

/// Which prompt slots are active for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Route {
    pub shared: bool,
    pub group: Option<usize>,
    pub pool: HeadPool,
}

impl Route {
    pub const PLAIN: Route = Route {
        shared: false,
        group: None,
        pool: HeadPool::ClsOnly,
    };

    pub fn shared_only() -> Self {
        Route {
            shared: true,
            group: None,
            pool: HeadPool::ClsOnly,
        }
    }

    pub fn with_group(shared: bool, g: usize, pool: HeadPool) -> Self {
        Route {
            shared,
            group: Some(g),
            pool,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl LayerWeights {
    fn init(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.dim;
        let h = cfg.hidden();
        let s_d = 1.0 / (d as f64).sqrt();
        let s_h = 1.0 / (h as f64).sqrt();
        Self {
            ln1_gamma: Tensor::filled(&[1, d], 1.0),
            ln1_beta: Tensor::zeros(&[1, d]),
            wq: Tensor::randn(&[d, d], s_d, rng),
            bq: Tensor::zeros(&[1, d]),
            wk: Tensor::randn(&[d, d], s_d, rng),
            bk: Tensor::zeros(&[1, d]),
            wv: Tensor::randn(&[d, d], s_d, rng),
            bv: Tensor::zeros(&[1, d]),
            wo: Tensor::randn(&[d, d], s_d, rng),
            bo: Tensor::zeros(&[1, d]),
            ln2_gamma: Tensor::filled(&[1, d], 1.0),
            ln2_beta: Tensor::zeros(&[1, d]),
            w1: Tensor::randn(&[d, h], s_d, rng),
            b1: Tensor::zeros(&[1, h]),
            w2: Tensor::randn(&[h, d], s_h, rng),
            b2: Tensor::zeros(&[1, d]),
        }
    }

    fn named(&self) -> [(&'static str, &Tensor); 16] {
        [
            ("ln1_gamma", &self.ln1_gamma),
            ("ln1_beta", &self.ln1_beta),
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln2_gamma", &self.ln2_gamma),
            ("ln2_beta", &self.ln2_beta),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Tensor); 16] {
        [
            ("ln1_gamma", &mut self.ln1_gamma),
            ("ln1_beta", &mut self.ln1_beta),
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
            ("ln2_gamma", &mut self.ln2_gamma),
            ("ln2_beta", &mut self.ln2_beta),
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }
}

/// Frozen transformer weights. Nothing in federated training mutates these.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneWeights {
    pub patch_w: Tensor,
    /// One bias row per patch position; doubles as the positional embedding.
    pub patch_b: Tensor,
    pub cls: Tensor,
    pub layers: Vec<LayerWeights>,
}

impl BackboneWeights {
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed_for(seed, &[0xBAC0]));
        let d = cfg.dim;
        Ok(Self {
            patch_w: Tensor::randn(&[cfg.patch_dim, d], 1.0 / (cfg.patch_dim as f64).sqrt(), &mut rng),
            patch_b: Tensor::randn(&[cfg.n_tokens, d], 0.1, &mut rng),
            cls: Tensor::randn(&[1, d], 0.1, &mut rng),
            layers: (0..cfg.layers).map(|_| LayerWeights::init(cfg, &mut rng)).collect(),
        })
    }

    /// `(name, tensor)` pairs in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("patch_w".to_string(), &self.patch_w),
            ("patch_b".to_string(), &self.patch_b),
            ("cls".to_string(), &self.cls),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.named().into_iter().map(|(n, t)| (format!("layer{}.{n}", i + 1), t)));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("patch_w".to_string(), &mut self.patch_w),
            ("patch_b".to_string(), &mut self.patch_b),
            ("cls".to_string(), &mut self.cls),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.extend(
                l.named_mut()
                    .into_iter()
                    .map(|(n, t)| (format!("layer{}.{n}", i + 1), t)),
            );
        }
        out
    }

    pub fn hash(&self) -> String {
        crate::hash_tensors(self.named_tensors().into_iter())
    }
}

pub type LayerPrompts = BTreeMap<usize, Tensor>;

/// Trainable parameters: shared prompts, group prompts and the linear head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub shared: LayerPrompts,
    pub groups: Vec<LayerPrompts>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl PromptSet {
    pub fn init(cfg: &EncoderConfig, groups: usize, classes: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if groups == 0 {
            return Err(Error::Config("group count must be at least 1".into()));
        }
        if classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        let shape = [cfg.prompt_len, cfg.dim];
        let mut rng = ChaCha8Rng::seed_from_u64(seed_for(seed, &[0x9207]));
        let shared = cfg
            .shared_layers
            .iter()
            .map(|&l| (l, Tensor::randn(&shape, 0.1, &mut rng)))
            .collect();
        let groups = (0..groups)
            .map(|_| {
                cfg.group_layers
                    .iter()
                    .map(|&l| (l, Tensor::randn(&shape, 0.1, &mut rng)))
                    .collect()
            })
            .collect();
        Ok(Self {
            shared,
            groups,
            head_w: Tensor::zeros(&[cfg.dim, classes]),
            head_b: Tensor::zeros(&[1, classes]),
        })
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn num_classes(&self) -> usize {
        self.head_w.cols()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .shared
            .iter()
            .map(|(l, t)| (format!("shared.{l}"), t))
            .collect();
        for (g, layers) in self.groups.iter().enumerate() {
            out.extend(layers.iter().map(|(l, t)| (format!("group{g}.{l}"), t)));
        }
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = self
            .shared
            .iter_mut()
            .map(|(l, t)| (format!("shared.{l}"), t))
            .collect();
        for (g, layers) in self.groups.iter_mut().enumerate() {
            out.extend(layers.iter_mut().map(|(l, t)| (format!("group{g}.{l}"), t)));
        }
        out.push(("head.w".into(), &mut self.head_w));
        out.push(("head.b".into(), &mut self.head_b));
        out
    }

    pub fn check_against(&self, cfg: &EncoderConfig) -> Result<()> {
        let shape = [cfg.prompt_len, cfg.dim];
        let keys_ok = |m: &LayerPrompts, layers: &[usize]| {
            m.len() == layers.len() && layers.iter().all(|l| m.get(l).is_some_and(|t| t.shape() == shape))
        };
        if !keys_ok(&self.shared, &cfg.shared_layers) {
            return Err(Error::shape("prompt set", "shared prompts do not match config"));
        }
        if self.groups.is_empty() || !self.groups.iter().all(|g| keys_ok(g, &cfg.group_layers)) {
            return Err(Error::shape("prompt set", "group prompts do not match config"));
        }
        if self.head_w.shape() != [cfg.dim, self.num_classes()] || self.head_b.numel() != self.num_classes() {
            return Err(Error::shape("prompt set", "head does not match config"));
        }
        Ok(())
    }
}

/// Tape handles for backbone weights.
pub struct BackboneVars {
    patch_w: Var,
    patch_b: Var,
    cls: Var,
    layers: Vec<[Var; 16]>,
}

impl BackboneVars {
    pub fn register<'w>(tape: &mut Tape<'w>, w: &'w BackboneWeights, trainable: bool) -> Self {
        let patch_w = tape.leaf(&w.patch_w, trainable);
        let patch_b = tape.leaf(&w.patch_b, trainable);
        let cls = tape.leaf(&w.cls, trainable);
        let layers = w
            .layers
            .iter()
            .map(|l| l.named().map(|(_, t)| tape.leaf(t, trainable)))
            .collect();
        Self {
            patch_w,
            patch_b,
            cls,
            layers,
        }
    }

    /// Vars in the same order as [`BackboneWeights::named_tensors`].
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.patch_w, self.patch_b, self.cls];
        for l in &self.layers {
            v.extend_from_slice(l);
        }
        v
    }
}

/// Tape handles for the prompt parameters used by one forward pass.
#[derive(Default)]
pub struct PromptVars {
    pub shared: BTreeMap<usize, Var>,
    pub group: BTreeMap<usize, Var>,
    pub head_w: Option<Var>,
    pub head_b: Option<Var>,
}

/// Which prompt blocks are trainable in a pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Trainable {
    pub shared: bool,
    pub group: bool,
    pub head: bool,
}

impl Trainable {
    pub const NONE: Trainable = Trainable {
        shared: false,
        group: false,
        head: false,
    };
    pub const ALL: Trainable = Trainable {
        shared: true,
        group: true,
        head: true,
    };
}

impl PromptVars {
    pub fn register<'w>(
        tape: &mut Tape<'w>,
        prompts: &'w PromptSet,
        route: &Route,
        trainable: Trainable,
    ) -> Result<Self> {
        let mut vars = PromptVars::default();
        if route.shared {
            for (&l, t) in &prompts.shared {
                vars.shared.insert(l, tape.leaf(t, trainable.shared));
            }
        }
        if let Some(g) = route.group {
            let layers = prompts.groups.get(g).ok_or(Error::Index {
                what: "group prompt",
                index: g,
                len: prompts.groups.len(),
            })?;
            for (&l, t) in layers {
                vars.group.insert(l, tape.leaf(t, trainable.group));
            }
        }
        vars.head_w = Some(tape.leaf(&prompts.head_w, trainable.head));
        vars.head_b = Some(tape.leaf(&prompts.head_b, trainable.head));
        Ok(vars)
    }
}

/// Patch embedding plus cls row: `[n_tokens + 1, d]`, cls first.
pub fn embed(cfg: &EncoderConfig, w: &BackboneWeights, sample: &[f64]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bb = BackboneVars::register(&mut tape, w, false);
    let v = embed_on_tape(&mut tape, cfg, &bb, sample)?;
    Ok(tape.value(v).clone())
}

fn embed_on_tape(tape: &mut Tape<'_>, cfg: &EncoderConfig, bb: &BackboneVars, sample: &[f64]) -> Result<Var> {
    if sample.len() != cfg.raw_dim() {
        return Err(Error::shape(
            "embed",
            format!("sample has {} values, encoder expects {}", sample.len(), cfg.raw_dim()),
        ));
    }
    let patches = tape.constant(Tensor::new(vec![cfg.n_tokens, cfg.patch_dim], sample.to_vec())?);
    let proj = tape.matmul(patches, bb.patch_w)?;
    let tokens = tape.add(proj, bb.patch_b)?;
    tape.concat_rows(&[bb.cls, tokens])
}

fn linear(tape: &mut Tape<'_>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn block(tape: &mut Tape<'_>, cfg: &EncoderConfig, lw: &[Var; 16], x: Var) -> Result<Var> {
    let [ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2] = *lw;
    let h = tape.layer_norm_rows(x, ln1_g, ln1_b, LAYER_NORM_EPS)?;
    let q = linear(tape, h, wq, bq)?;
    let k = linear(tape, h, wk, bk)?;
    let v = linear(tape, h, wv, bv)?;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for i in 0..cfg.heads {
        let (lo, hi) = (i * dh, (i + 1) * dh);
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let vh = tape.slice_cols(v, lo, hi)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scores);
        heads.push(tape.matmul(attn, vh)?);
    }
    let merged = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    let attn_out = linear(tape, merged, wo, bo)?;
    let x = tape.add(x, attn_out)?;

    let h = tape.layer_norm_rows(x, ln2_g, ln2_b, LAYER_NORM_EPS)?;
    let h = linear(tape, h, w1, b1)?;
    let h = tape.gelu(h);
    let h = linear(tape, h, w2, b2)?;
    tape.add(x, h)
}

/// Result of a recorded forward pass.
pub struct Forward {
    /// Head input, `[1, d]`.
    pub feature: Var,
    /// Sequence length entering each layer, index 0 = layer 1.
    pub seq_lens: Vec<usize>,
}

/// Runs layers `1..=upto` with the slots selected by `route`.
pub fn forward_on_tape(
    tape: &mut Tape<'_>,
    cfg: &EncoderConfig,
    bb: &BackboneVars,
    pv: &PromptVars,
    sample: &[f64],
    route: &Route,
    upto: usize,
) -> Result<Forward> {
    if upto == 0 || upto > cfg.layers {
        return Err(Error::Index {
            what: "encoder layer",
            index: upto,
            len: cfg.layers,
        });
    }
    let x0 = embed_on_tape(tape, cfg, bb, sample)?;
    let mut cls = tape.slice_rows(x0, 0, 1)?;
    let mut patches = tape.slice_rows(x0, 1, 1 + cfg.n_tokens)?;
    let mut shared_slot: Option<Var> = None;
    let mut group_slot: Option<Var> = None;
    let p = cfg.prompt_len;
    let mut seq_lens = Vec::with_capacity(upto);

    for u in 1..=upto {
        if route.shared && cfg.shared_layers.contains(&u) {
            if let Some(&fresh) = pv.shared.get(&u) {
                shared_slot = Some(fresh);
            }
        }
        if route.group.is_some() && cfg.group_layers.contains(&u) {
            if let Some(&fresh) = pv.group.get(&u) {
                group_slot = Some(fresh);
            }
        }
        let mut parts = vec![cls];
        parts.extend(group_slot);
        parts.extend(shared_slot);
        parts.push(patches);
        let x = tape.concat_rows(&parts)?;
        seq_lens.push(tape.value(x).rows());

        let y = block(tape, cfg, &bb.layers[u - 1], x)?;
        let mut row = 0;
        cls = tape.slice_rows(y, row, row + 1)?;
        row += 1;
        if group_slot.is_some() {
            group_slot = Some(tape.slice_rows(y, row, row + p)?);
            row += p;
        }
        if shared_slot.is_some() {
            shared_slot = Some(tape.slice_rows(y, row, row + p)?);
            row += p;
        }
        patches = tape.slice_rows(y, row, row + cfg.n_tokens)?;
    }

    let feature = match (route.pool, group_slot) {
        (HeadPool::ClsPlusGroupAvg, Some(gs)) => {
            let stacked = tape.concat_rows(&[cls, gs])?;
            tape.mean_rows(stacked)
        }
        _ => cls,
    };
    Ok(Forward { feature, seq_lens })
}

pub fn head_on_tape(tape: &mut Tape<'_>, pv: &PromptVars, feature: Var) -> Result<Var> {
    let (w, b) = pv
        .head_w
        .zip(pv.head_b)
        .ok_or_else(|| Error::Invariant("head weights were not registered".into()))?;
    linear(tape, feature, w, b)
}

/// Plain cls feature after `upto_layer` layers, no prompts inserted.
pub fn forward_plain(cfg: &EncoderConfig, w: &BackboneWeights, sample: &[f64], upto_layer: usize) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bb = BackboneVars::register(&mut tape, w, false);
    let fwd = forward_on_tape(&mut tape, cfg, &bb, &PromptVars::default(), sample, &Route::PLAIN, upto_layer)?;
    Ok(tape.value(fwd.feature).data().to_vec())
}

/// Head-input feature with the prompts chosen by `route`.
pub fn forward_prompted(
    cfg: &EncoderConfig,
    w: &BackboneWeights,
    prompts: &PromptSet,
    route: &Route,
    sample: &[f64],
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bb = BackboneVars::register(&mut tape, w, false);
    let pv = PromptVars::register(&mut tape, prompts, route, Trainable::NONE)?;
    let fwd = forward_on_tape(&mut tape, cfg, &bb, &pv, sample, route, cfg.layers)?;
    Ok(tape.value(fwd.feature).data().to_vec())
}

pub fn classify(prompts: &PromptSet, feature: &[f64]) -> Result<Vec<f64>> {
    let x = Tensor::row_vector(feature.to_vec());
    let mut z = kernels::matmul(&x, &prompts.head_w)?;
    z.axpy(1.0, &prompts.head_b)?;
    Ok(z.into_data())
}

pub fn predict(
    cfg: &EncoderConfig,
    w: &BackboneWeights,
    prompts: &PromptSet,
    route: &Route,
    sample: &[f64],
) -> Result<usize> {
    let feature = forward_prompted(cfg, w, prompts, route, sample)?;
    Ok(argmax(&classify(prompts, &feature)?))
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Gradients of one sample's cross-entropy with respect to prompt blocks.
#[derive(Clone, Debug, Default)]
pub struct PromptGrads {
    pub shared: LayerPrompts,
    pub group: LayerPrompts,
    pub head_w: Option<Tensor>,
    pub head_b: Option<Tensor>,
}

impl PromptGrads {
    /// `self += other`.
    pub fn accumulate(&mut self, other: PromptGrads) -> Result<()> {
        fn merge(into: &mut LayerPrompts, from: LayerPrompts) -> Result<()> {
            for (l, t) in from {
                match into.get_mut(&l) {
                    Some(acc) => acc.axpy(1.0, &t)?,
                    None => {
                        into.insert(l, t);
                    }
                }
            }
            Ok(())
        }
        fn merge_opt(into: &mut Option<Tensor>, from: Option<Tensor>) -> Result<()> {
            match (into.as_mut(), from) {
                (Some(acc), Some(t)) => acc.axpy(1.0, &t),
                (None, Some(t)) => {
                    *into = Some(t);
                    Ok(())
                }
                _ => Ok(()),
            }
        }
        merge(&mut self.shared, other.shared)?;
        merge(&mut self.group, other.group)?;
        merge_opt(&mut self.head_w, other.head_w)?;
        merge_opt(&mut self.head_b, other.head_b)
    }
}

/// Loss value and prompt gradients for one labelled sample.
pub fn loss_and_grads(
    cfg: &EncoderConfig,
    w: &BackboneWeights,
    prompts: &PromptSet,
    route: &Route,
    trainable: Trainable,
    sample: &[f64],
    label: usize,
) -> Result<(f64, PromptGrads)> {
    let mut tape = Tape::new();
    let bb = BackboneVars::register(&mut tape, w, false);
    let pv = PromptVars::register(&mut tape, prompts, route, trainable)?;
    let fwd = forward_on_tape(&mut tape, cfg, &bb, &pv, sample, route, cfg.layers)?;
    let logits = head_on_tape(&mut tape, &pv, fwd.feature)?;
    let loss = tape.cross_entropy(logits, label)?;
    let loss_value = tape.value(loss).data()[0];
    let mut grads = tape.backward(loss)?;

    let mut out = PromptGrads::default();
    let mut collect = |vars: &BTreeMap<usize, Var>, into: &mut LayerPrompts| {
        for (&l, &v) in vars {
            if let Some(g) = grads.take(v) {
                into.insert(l, g);
            }
        }
    };
    collect(&pv.shared, &mut out.shared);
    collect(&pv.group, &mut out.group);
    out.head_w = pv.head_w.and_then(|v| grads.take(v));
    out.head_b = pv.head_b.and_then(|v| grads.take(v));
    if !grads.is_empty() {
        return Err(Error::Invariant("gradient reached a frozen leaf".into()));
    }
    Ok((loss_value, out))
}

/// Labelled sample for central pretraining.
#[derive(Clone, Debug)]
pub struct PretextSample {
    pub x: Vec<f64>,
    pub label: usize,
}

/// Trains encoder and a throwaway head on a pretext task, returns the encoder.
pub fn pretrain_backbone(
    cfg: &EncoderConfig,
    data: &[PretextSample],
    steps: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<(BackboneWeights, f64)> {
    use rand::Rng;
    if data.is_empty() {
        return Err(Error::Empty("pretext dataset"));
    }
    let mut weights = BackboneWeights::init(cfg, seed)?;
    if steps == 0 {
        let acc = pretext_accuracy(cfg, &weights, None, data)?;
        return Ok((weights, acc));
    }
    let classes = data.iter().map(|s| s.label).max().unwrap_or(0) + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for(seed, &[0x7E47]));
    let mut head_w = Tensor::randn(&[cfg.dim, classes], 0.1, &mut rng);
    let mut head_b = Tensor::zeros(&[1, classes]);
    let bs = batch_size.max(1);

    for _ in 0..steps {
        let batch: Vec<&PretextSample> = (0..bs).map(|_| &data[rng.random_range(0..data.len())]).collect();
        let mut acc: Option<Vec<Tensor>> = None;
        for s in batch {
            let mut tape = Tape::new();
            let bb = BackboneVars::register(&mut tape, &weights, true);
            let hw = tape.param(&head_w);
            let hb = tape.param(&head_b);
            let fwd = forward_on_tape(&mut tape, cfg, &bb, &PromptVars::default(), &s.x, &Route::PLAIN, cfg.layers)?;
            let z = linear(&mut tape, fwd.feature, hw, hb)?;
            let loss = tape.cross_entropy(z, s.label)?;
            let mut grads = tape.backward(loss)?;
            let mut vars = bb.all();
            vars.push(hw);
            vars.push(hb);
            let g: Vec<Tensor> = vars
                .iter()
                .map(|&v| grads.take(v).ok_or_else(|| Error::Invariant("missing backbone gradient".into())))
                .collect::<Result<_>>()?;
            match acc.as_mut() {
                None => acc = Some(g),
                Some(a) => {
                    for (x, y) in a.iter_mut().zip(&g) {
                        x.axpy(1.0, y)?;
                    }
                }
            }
        }
        let acc = acc.expect("batch is non-empty");
        let step = -lr / bs as f64;
        let n = acc.len();
        for ((_, t), g) in weights.named_tensors_mut().into_iter().zip(&acc[..n - 2]) {
            t.axpy(step, g)?;
        }
        head_w.axpy(step, &acc[n - 2])?;
        head_b.axpy(step, &acc[n - 1])?;
    }
    let acc = pretext_accuracy(cfg, &weights, Some((&head_w, &head_b)), data)?;
    Ok((weights, acc))
}

fn pretext_accuracy(
    cfg: &EncoderConfig,
    w: &BackboneWeights,
    head: Option<(&Tensor, &Tensor)>,
    data: &[PretextSample],
) -> Result<f64> {
    let Some((hw, hb)) = head else { return Ok(0.0) };
    let mut correct = 0;
    for s in data {
        let f = forward_plain(cfg, w, &s.x, cfg.layers)?;
        let mut z = kernels::matmul(&Tensor::row_vector(f), hw)?;
        z.axpy(1.0, hb)?;
        correct += (argmax(z.data()) == s.label) as usize;
    }
    Ok(correct as f64 / data.len() as f64)
}
