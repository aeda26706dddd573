//! Run configuration: TOML with every section optional and unknown keys
//! rejected. [`RunConfig::echo`] writes a TOML document that parses back to an
//! equal config.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::client::{BcdMode, LocalHyper, PromptMode};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::metrics::OverlapWeighting;
use crate::server::{participants, ServerHyper};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub data: DataConfig,
    pub partition: PartitionConfig,
    pub pretrain: PretrainConfig,
    pub federation: FederationConfig,
    pub ablation: AblationConfig,
    pub metrics: MetricsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            seed: 0,
            encoder: EncoderConfig::default(),
            data: DataConfig::default(),
            partition: PartitionConfig::default(),
            pretrain: PretrainConfig::default(),
            federation: FederationConfig::default(),
            ablation: AblationConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Membership {
    /// Every group holds every class.
    All,
    /// Classes split into contiguous blocks, one block per group.
    Blocks,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Ground-truth mixture components.
    pub groups: usize,
    pub classes: usize,
    pub membership: Membership,
    /// Samples per non-empty (group, class) cell.
    pub per_cell: usize,
    /// Distance of each group center from the origin.
    pub radius: f64,
    /// Offset of class means around their group center.
    pub class_spread: f64,
    pub sigma: f64,
    /// Fraction of each client shard held out for testing.
    pub test_frac: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            groups: 4,
            classes: 8,
            membership: Membership::Blocks,
            per_cell: 60,
            radius: 6.0,
            class_spread: 2.0,
            sigma: 0.5,
            test_frac: 0.25,
        }
    }
}

impl DataConfig {
    pub fn membership_lists(&self) -> Vec<Vec<usize>> {
        match self.membership {
            Membership::All => (0..self.groups).map(|_| (0..self.classes).collect()).collect(),
            Membership::Blocks => (0..self.groups)
                .map(|g| (0..self.classes).filter(|c| c * self.groups / self.classes == g).collect())
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Pathological,
    Mixture,
    Domain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionConfig {
    pub kind: PartitionKind,
    /// Classes per client (pathological).
    pub s: usize,
    /// Dirichlet concentration over groups (mixture).
    pub concentration: f64,
    /// Off-diagonal noise of each domain's linear map (domain).
    pub domain_jitter: f64,
    /// Norm of each domain's shift (domain).
    pub domain_shift: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            kind: PartitionKind::Pathological,
            s: 2,
            concentration: 0.5,
            domain_jitter: 0.1,
            domain_shift: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Pretext set: `clusters` random Gaussian blobs, `per_cluster` samples each.
    pub clusters: usize,
    pub per_cluster: usize,
    pub radius: f64,
    pub sigma: f64,
    /// Reuse a backbone already pretrained under the same settings.
    pub cache: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 0.05,
            batch_size: 16,
            clusters: 16,
            per_cluster: 32,
            radius: 6.0,
            sigma: 1.0,
            cache: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    /// Learnable groups G (keys and group prompts).
    pub groups: usize,
    pub clients: usize,
    pub gamma: f64,
    pub rounds: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub alpha_k: f64,
    pub alpha_g: f64,
    /// Execution setting only; left out of the echo so artifacts do not depend on it.
    #[serde(skip_serializing)]
    pub threads: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            groups: 4,
            clients: 20,
            gamma: 1.0,
            rounds: 30,
            epochs: 5,
            lr: 0.05,
            batch_size: 8,
            alpha_k: 0.5,
            alpha_g: 0.5,
            threads: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KeyInit {
    #[default]
    Random,
    /// Every key a copy of the first random key.
    Collapsed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub disable_q_calibration: bool,
    pub disable_momentum: bool,
    pub bcd_mode: BcdMode,
    pub prompts: PromptMode,
    pub key_init: KeyInit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Score congruence against the k-means oracle after training.
    pub congruence: bool,
    pub overlap: OverlapWeighting,
    pub kmeans_iters: usize,
    /// Re-verify conservation and frozen-backbone invariants every round.
    pub check_invariants: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            congruence: true,
            overlap: OverlapWeighting::Mass,
            kmeans_iters: 50,
            check_invariants: true,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn echo(&self) -> String {
        toml::to_string(self).expect("run config is always representable as TOML")
    }

    /// Applies `section.key=value` assignments (TOML values) and revalidates.
    pub fn with_overrides(&self, sets: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(&self.echo()).map_err(|e| Error::Config(e.to_string()))?;
        for set in sets {
            let (path, raw) = set
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {set:?} is not of the form key=value")))?;
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .or_else(|_| toml::from_str::<toml::Table>(&format!("v = {raw:?}")))
                .map_err(|e| Error::Config(format!("override {set:?}: {e}")))?
                .remove("v")
                .expect("parsed table has the key");
            let keys: Vec<&str> = path.trim().split('.').collect();
            let (last, parents) = keys.split_last().expect("split yields at least one part");
            let mut cursor = &mut table;
            for k in parents {
                cursor = cursor
                    .entry(k.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("override {set:?}: {k} is not a section")))?;
            }
            cursor.insert(last.to_string(), value);
        }
        Self::parse(&toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.encoder.validate()?;
        let f = &self.federation;
        let d = &self.data;
        participants(f.clients, f.gamma)?;
        if f.groups == 0 {
            return bad("federation.groups must be at least 1".into());
        }
        if f.batch_size == 0 {
            return bad("federation.batch_size must be at least 1".into());
        }
        if !(f.lr >= 0.0 && f.lr.is_finite()) {
            return bad(format!("federation.lr = {} must be a finite non-negative number", f.lr));
        }
        for (k, a) in [("alpha_k", f.alpha_k), ("alpha_g", f.alpha_g)] {
            if !(0.0..=1.0).contains(&a) {
                return bad(format!("federation.{k} = {a} outside [0, 1]"));
            }
        }
        match self.ablation.prompts {
            PromptMode::GroupOnly | PromptMode::Both if self.encoder.group_layers.is_empty() => {
                return bad(format!(
                    "ablation.prompts = {:?} needs group prompts but encoder.group_layers is empty",
                    self.ablation.prompts
                ))
            }
            PromptMode::SharedOnly | PromptMode::Both if self.encoder.shared_layers.is_empty() => {
                return bad(format!(
                    "ablation.prompts = {:?} needs shared prompts but encoder.shared_layers is empty",
                    self.ablation.prompts
                ))
            }
            _ => {}
        }
        if d.groups == 0 || d.classes == 0 || d.per_cell == 0 {
            return bad("data.groups, data.classes and data.per_cell must be positive".into());
        }
        if d.groups > self.encoder.raw_dim() {
            return bad(format!(
                "data.groups = {} exceeds the raw sample dimension {}",
                d.groups,
                self.encoder.raw_dim()
            ));
        }
        if d.membership == Membership::Blocks && d.classes < d.groups {
            return bad(format!(
                "block membership needs at least one class per group (C = {}, groups = {})",
                d.classes, d.groups
            ));
        }
        if !(d.sigma > 0.0) {
            return bad(format!("data.sigma = {} must be positive", d.sigma));
        }
        if !(0.0..1.0).contains(&d.test_frac) {
            return bad(format!("data.test_frac = {} outside [0, 1)", d.test_frac));
        }
        let p = &self.partition;
        match p.kind {
            PartitionKind::Pathological => {
                if p.s == 0 || p.s > d.classes {
                    return bad(format!(
                        "partition.s = {} must lie in 1..=C where C = {}",
                        p.s, d.classes
                    ));
                }
                if p.s * f.clients < d.classes {
                    return bad(format!(
                        "partition.s = {} over M = {} clients cannot cover C = {} classes",
                        p.s, f.clients, d.classes
                    ));
                }
            }
            PartitionKind::Mixture => {
                if !(p.concentration > 0.0) {
                    return bad(format!("partition.concentration = {} must be positive", p.concentration));
                }
            }
            PartitionKind::Domain => {
                if p.domain_jitter < 0.0 || p.domain_shift < 0.0 {
                    return bad("partition.domain_jitter and domain_shift must be non-negative".into());
                }
            }
        }
        let pt = &self.pretrain;
        if pt.steps > 0 && (pt.clusters < 2 || pt.per_cluster == 0 || pt.batch_size == 0) {
            return bad("pretrain needs at least 2 clusters, samples and a positive batch size".into());
        }
        if self.metrics.congruence && f.groups > d.groups * d.classes * d.per_cell {
            return bad("more groups than samples for the k-means oracle".into());
        }
        Ok(())
    }

    pub fn local_hyper(&self) -> LocalHyper {
        let f = &self.federation;
        LocalHyper {
            epochs: f.epochs,
            lr: f.lr,
            batch_size: f.batch_size,
            mode: self.ablation.bcd_mode,
            prompts: self.ablation.prompts,
            calibrate: !self.ablation.disable_q_calibration,
            cache_features: true,
        }
    }

    pub fn server_hyper(&self) -> ServerHyper {
        let f = &self.federation;
        let (alpha_k, alpha_g) = if self.ablation.disable_momentum {
            (0.0, 0.0)
        } else {
            (f.alpha_k, f.alpha_g)
        };
        ServerHyper {
            clients: f.clients,
            gamma: f.gamma,
            rounds: f.rounds,
            alpha_k,
            alpha_g,
            threads: f.threads,
            check_invariants: self.metrics.check_invariants,
        }
    }
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::parse(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}
