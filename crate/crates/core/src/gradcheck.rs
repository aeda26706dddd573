//! Finite-difference verification of every trainable gradient: shared
//! prompts, group prompts, head and keys.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoder::{self, BackboneWeights, EncoderConfig, HeadPool, PromptGrads, PromptSet, Route, Trainable};
use crate::error::Result;
use crate::numerics::{finite_difference, max_rel_error, Tensor};
use crate::rng::seed_for;
use crate::selection::{key_loss, KeyBank};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-6;

/// Two-layer, width-8 encoder used for gradient checks.
pub fn toy_encoder() -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        dim: 8,
        heads: 2,
        n_tokens: 3,
        patch_dim: 2,
        mlp_ratio: 2,
        shared_layers: vec![1],
        group_layers: vec![2],
        prompt_len: 1,
        select_layer: 2,
        head_pool: HeadPool::ClsPlusGroupAvg,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockResult {
    pub block: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub blocks: Vec<BlockResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        !self.blocks.is_empty() && self.blocks.iter().all(|b| b.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for b in &self.blocks {
            out.push_str(&format!(
                "{:<16} max_rel_err={:.3e} {}\n",
                b.block,
                b.max_rel_err,
                if b.passed { "ok" } else { "FAIL" }
            ));
        }
        out.push_str(if self.passed() { "gradcheck passed\n" } else { "gradcheck FAILED\n" });
        out
    }
}

/// Scales the analytic gradient of one named block before comparison. Used
/// as a negative control: a wrong backward pass must be caught.
#[derive(Clone, Debug, PartialEq)]
pub struct Corruption {
    pub block: String,
    pub factor: f64,
}

fn named_grads(grads: &PromptGrads) -> Vec<(String, &Tensor)> {
    let mut out: Vec<(String, &Tensor)> = grads.shared.iter().map(|(l, t)| (format!("shared.{l}"), t)).collect();
    out.extend(grads.group.iter().map(|(l, t)| (format!("group.{l}"), t)));
    out.extend(grads.head_w.iter().map(|t| ("head.w".to_string(), t)));
    out.extend(grads.head_b.iter().map(|t| ("head.b".to_string(), t)));
    out
}

fn tensor_of<'a>(p: &'a mut PromptSet, name: &str, g: usize) -> &'a mut Tensor {
    let (kind, layer) = name.split_once('.').expect("block names are kind.layer");
    match kind {
        "shared" => p.shared.get_mut(&layer.parse::<usize>().expect("layer index")).expect("shared layer"),
        "group" => p.groups[g].get_mut(&layer.parse::<usize>().expect("layer index")).expect("group layer"),
        _ if layer == "w" => &mut p.head_w,
        _ => &mut p.head_b,
    }
}

/// Runs the suite on `cfg`, returning per-block maximum relative errors.
pub fn cmd_gradcheck(
    cfg: &EncoderConfig,
    seed: u64,
    tolerance: f64,
    corruption: Option<&Corruption>,
) -> Result<GradcheckReport> {
    cfg.validate()?;
    let classes = 3;
    let groups = 2;
    let backbone = BackboneWeights::init(cfg, seed)?;
    let mut prompts = PromptSet::init(cfg, groups, classes, seed_for(seed, &[1]))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for(seed, &[2]));
    prompts.head_w = Tensor::randn(&[cfg.dim, classes], 0.5, &mut rng);
    prompts.head_b = Tensor::randn(&[1, classes], 0.5, &mut rng);
    let x: Vec<f64> = Tensor::randn(&[cfg.raw_dim()], 1.0, &mut rng).into_data();
    let label = 1;
    let g = 1;

    let mut blocks = Vec::new();
    let mut record = |block: String, analytic: &Tensor, numeric: &Tensor| {
        let analytic = match corruption.filter(|c| c.block == block) {
            Some(c) => analytic.map(|v| v * c.factor),
            None => analytic.clone(),
        };
        let err = max_rel_error(&analytic, numeric, FLOOR);
        blocks.push(BlockResult {
            passed: err < tolerance,
            block,
            max_rel_err: err,
        });
    };

    let routes = [
        ("", Route::with_group(true, g, cfg.head_pool)),
        ("blockI:", Route::shared_only()),
    ];
    for (prefix, route) in routes {
        let (_, grads) = encoder::loss_and_grads(cfg, &backbone, &prompts, &route, Trainable::ALL, &x, label)?;
        for (name, analytic) in named_grads(&grads) {
            let base = tensor_of(&mut prompts, &name, g).clone();
            let mut probe = prompts.clone();
            let numeric = finite_difference(&base, STEP, |t| {
                *tensor_of(&mut probe, &name, g) = t.clone();
                encoder::loss_and_grads(cfg, &backbone, &probe, &route, Trainable::NONE, &x, label)
                    .map(|(l, _)| l)
                    .unwrap_or(f64::NAN)
            });
            record(format!("{prefix}{name}"), analytic, &numeric);
        }
    }

    let bank = KeyBank::init(groups, cfg.dim, seed_for(seed, &[3]))?;
    let feature = encoder::forward_plain(cfg, &backbone, &x, cfg.select_layer)?;
    let kl = key_loss(&feature, &bank.keys, Some(&bank.q))?;
    let numeric = finite_difference(&bank.keys[kl.group], STEP, |k| {
        let mut keys = bank.keys.clone();
        keys[kl.group] = k.clone();
        -crate::numerics::kernels::cosine_slices(&feature, keys[kl.group].data()).unwrap_or(f64::NAN)
    });
    record("key".into(), &kl.grad, &numeric);

    Ok(GradcheckReport { tolerance, blocks })
}
