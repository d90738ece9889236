//! Parameter layout of the full model.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::corpus::Taxonomy;
use crate::error::{Error, Result};
use crate::nn::{gaussian, Gru, Mlp, ParamId, ParamStore};
use crate::temporal::TimeEncoder;

/// Components that can be switched off for ablation studies. `true` means
/// the component is removed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    /// Mutual influence: company messages ignore the codes' memories and
    /// leaf messages ignore the company's memory.
    pub mi: bool,
    /// Static information fusion: static embeddings are dropped from the
    /// fused representations.
    pub sif: bool,
    /// Hierarchical message passing: taxonomy node memories are never
    /// written and leaf messages carry no parent slot.
    pub hmp: bool,
    /// Time interval encoding: every encoding is replaced by zeros.
    pub tie: bool,
}

impl Ablations {
    pub const NONE: Ablations = Ablations {
        mi: false,
        sif: false,
        hmp: false,
        tie: false,
    };

    pub fn is_empty(&self) -> bool {
        *self == Self::NONE
    }

    pub fn names(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        for (on, name) in [(self.mi, "mi"), (self.sif, "sif"), (self.hmp, "hmp"), (self.tie, "tie")] {
            if on {
                out.push(name);
            }
        }
        out
    }
}

impl FromStr for Ablations {
    type Err = Error;

    /// Parses a comma separated list such as `mi,tie`. Empty input and
    /// `none` disable nothing.
    fn from_str(s: &str) -> Result<Self> {
        let mut a = Ablations::NONE;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "mi" => a.mi = true,
                "sif" => a.sif = true,
                "hmp" => a.hmp = true,
                "tie" => a.tie = true,
                "none" => {}
                other => return Err(Error::Config(format!("unknown ablation `{other}` (expected mi, sif, hmp, tie)"))),
            }
        }
        Ok(a)
    }
}

impl fmt::Display for Ablations {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names = self.names();
        if names.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&names.join(","))
        }
    }
}

/// How several messages addressed to one entity within a batch combine.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    /// Keep only the message of the latest item (the last one on ties).
    Latest,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub aggregation: Aggregation,
    pub ablations: Ablations,
    /// Standard deviation of the initial static embeddings.
    pub static_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 64,
            aggregation: Aggregation::Mean,
            ablations: Ablations::NONE,
            static_init_std: 0.1,
        }
    }
}

/// All trainable parameters plus the handles that locate them.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub taxonomy: Arc<Taxonomy>,
    pub companies: usize,
    pub store: ParamStore,
    pub time: TimeEncoder,
    pub company_msg: Mlp,
    pub leaf_msg: Mlp,
    /// Node message encoders for levels `1..L-1` (index `l - 1`); empty
    /// when hierarchical passing is off.
    pub node_msg: Vec<Mlp>,
    pub company_gru: Gru,
    pub leaf_gru: Gru,
    pub node_gru: Vec<Gru>,
    pub static_company: ParamId,
    pub static_leaf: ParamId,
    pub company_gate: ParamId,
    pub leaf_gate: ParamId,
    /// `1 x L`; entry `l - 1` weights level `l`, the last one the leaves.
    pub level_weights: ParamId,
    pub history_head: Mlp,
    pub company_head: Mlp,
    pub output_head: Mlp,
}

impl Model {
    pub fn new(config: ModelConfig, taxonomy: Arc<Taxonomy>, companies: usize, seed: u64) -> Result<Self> {
        let d = config.hidden_dim;
        if d < 2 || d % 2 != 0 {
            return Err(Error::Config(format!("hidden_dim must be even and at least 2, got {d}")));
        }
        if companies == 0 {
            return Err(Error::Config("model needs at least one company".into()));
        }
        let depth = taxonomy.depth();
        let n = taxonomy.leaf_count();
        let hierarchical = !config.ablations.hmp && depth >= 2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let time = TimeEncoder::new(&mut store, "time", d);
        let company_msg = Mlp::new(&mut store, "company_msg", 3 * d, d, d, &mut rng);
        let leaf_in = if hierarchical { 4 * d } else { 3 * d };
        let leaf_msg = Mlp::new(&mut store, "leaf_msg", leaf_in, d, d, &mut rng);
        let company_gru = Gru::new(&mut store, "company_gru", d, d, &mut rng);
        let leaf_gru = Gru::new(&mut store, "leaf_gru", d, d, &mut rng);
        let mut node_msg = Vec::new();
        let mut node_gru = Vec::new();
        if hierarchical {
            for l in 1..depth {
                let adjacent = if l == 1 { d } else { 2 * d };
                node_msg.push(Mlp::new(&mut store, &format!("node_msg{l}"), adjacent + 2 * d, d, d, &mut rng));
                node_gru.push(Gru::new(&mut store, &format!("node_gru{l}"), d, d, &mut rng));
            }
        }
        let std = config.static_init_std;
        let static_company = store.add("static_company", gaussian(companies, d, std, &mut rng));
        let static_leaf = store.add("static_leaf", gaussian(n, d, std, &mut rng));
        let company_gate = store.add("company_gate", Tensor::zeros(companies, 1));
        let leaf_gate = store.add("leaf_gate", Tensor::zeros(n, 1));
        let level_weights = store.add("level_weights", Tensor::filled(1, depth, 1.0));
        let history_head = Mlp::new(&mut store, "history_head", d, d, d, &mut rng);
        let company_head = Mlp::new(&mut store, "company_head", d, d, d, &mut rng);
        let output_head = Mlp::new(&mut store, "output_head", d, d, 1, &mut rng);
        Ok(Model {
            config,
            taxonomy,
            companies,
            store,
            time,
            company_msg,
            leaf_msg,
            node_msg,
            company_gru,
            leaf_gru,
            node_gru,
            static_company,
            static_leaf,
            company_gate,
            leaf_gate,
            level_weights,
            history_head,
            company_head,
            output_head,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.hidden_dim
    }

    pub fn depth(&self) -> usize {
        self.taxonomy.depth()
    }

    pub fn leaves(&self) -> usize {
        self.taxonomy.leaf_count()
    }

    pub fn ablations(&self) -> Ablations {
        self.config.ablations
    }

    /// Whether node memories take part in message passing.
    pub fn hierarchical(&self) -> bool {
        !self.node_msg.is_empty()
    }

    /// Parameters grouped by the component they belong to (the part of the
    /// name before the first dot).
    pub fn param_groups(&self) -> Vec<(String, Vec<ParamId>)> {
        let mut groups: Vec<(String, Vec<ParamId>)> = Vec::new();
        for id in self.store.ids() {
            let name = self.store.name(id);
            let group = name.split('.').next().unwrap_or(name).to_string();
            match groups.iter_mut().find(|(g, _)| *g == group) {
                Some((_, ids)) => ids.push(id),
                None => groups.push((group, vec![id])),
            }
        }
        groups
    }
}
