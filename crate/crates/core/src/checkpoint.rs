//! Versioned, self-contained checkpoints written atomically.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::corpus::{Dataset, Taxonomy};
use crate::error::{Error, Result};
use crate::memory::MemoryState;
use crate::model::Model;
use crate::nn::Adam;
use crate::trainer::{TrainConfig, TrainState};

pub const FORMAT: &str = "patrend-checkpoint";
pub const VERSION: u32 = 1;

/// SHA-256 of the canonical JSON form of `config`.
pub fn config_hash(config: &TrainConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Memory of one entity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityMemory {
    /// `company`, `leaf` or `node`.
    pub kind: String,
    pub id: String,
    pub last_seen: f64,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: Vec<NamedTensor>,
    pub second: Vec<NamedTensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub config: TrainConfig,
    pub epoch: usize,
    pub best_epoch: usize,
    /// `null` before any validation ran.
    pub best_metric: Option<f64>,
    pub origin: f64,
    pub companies: Vec<String>,
    /// Taxonomy as `id,parent,level` CSV.
    pub taxonomy: String,
    pub params: Vec<NamedTensor>,
    pub memory: Vec<EntityMemory>,
    pub optimizer: OptimizerState,
}

fn named(model: &Model, per_param: impl Fn(usize) -> Vec<f64>) -> Vec<NamedTensor> {
    model
        .store
        .ids()
        .enumerate()
        .map(|(i, id)| {
            let t = model.store.get(id);
            NamedTensor {
                name: model.store.name(id).to_string(),
                rows: t.rows(),
                cols: t.cols(),
                data: per_param(i),
            }
        })
        .collect()
}

fn memory_entries(model: &Model, companies: &[String], mem: &MemoryState) -> Vec<EntityMemory> {
    let tax = &model.taxonomy;
    let mut out = Vec::new();
    for (c, id) in companies.iter().enumerate() {
        out.push(EntityMemory {
            kind: "company".into(),
            id: id.clone(),
            last_seen: mem.company_seen[c],
            values: mem.company.row(c).to_vec(),
        });
    }
    for j in 0..tax.leaf_count() {
        out.push(EntityMemory {
            kind: "leaf".into(),
            id: tax.leaf_id(j).to_string(),
            last_seen: mem.leaf_seen[j],
            values: mem.leaf.row(j).to_vec(),
        });
    }
    for (i, t) in mem.nodes.iter().enumerate() {
        for s in 0..t.rows() {
            out.push(EntityMemory {
                kind: "node".into(),
                id: tax.node_id(i + 1, s).to_string(),
                last_seen: mem.node_seen[i][s],
                values: t.row(s).to_vec(),
            });
        }
    }
    out
}

impl Checkpoint {
    /// Snapshot of the best parameters and the memories that go with them.
    pub fn from_state(state: &TrainState, config: &TrainConfig, dataset: &Dataset) -> Self {
        let model = state.best_model();
        let opt = &state.optimizer;
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            config_hash: config_hash(config),
            config: config.clone(),
            epoch: state.epoch,
            best_epoch: state.best_epoch,
            best_metric: state.best_metric.is_finite().then_some(state.best_metric),
            origin: dataset.origin,
            companies: dataset.company_ids.clone(),
            taxonomy: model.taxonomy.to_csv(),
            params: named(&model, |i| model.store.get(crate::nn::ParamId(i)).data().to_vec()),
            memory: memory_entries(&model, &dataset.company_ids, &state.best_memory),
            optimizer: OptimizerState {
                lr: opt.lr,
                beta1: opt.beta1,
                beta2: opt.beta2,
                eps: opt.eps,
                step: opt.step,
                first: named(&model, |i| opt.first[i].clone()),
                second: named(&model, |i| opt.second[i].clone()),
            },
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;
        if ck.format != FORMAT {
            return Err(Error::Checkpoint(format!("not a checkpoint (format `{}`)", ck.format)));
        }
        if ck.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {VERSION})",
                ck.version
            )));
        }
        if ck.config_hash != config_hash(&ck.config) {
            return Err(Error::Checkpoint("configuration does not match its recorded hash".into()));
        }
        Ok(ck)
    }

    /// Writes to a temporary file next to `path` and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_json().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn taxonomy(&self) -> Result<Taxonomy> {
        Taxonomy::parse(&self.taxonomy)
    }

    /// Rebuilds the model with the stored parameters.
    pub fn model(&self) -> Result<Model> {
        let tax = Arc::new(self.taxonomy()?);
        let mut model = Model::new(self.config.model_config(), tax, self.companies.len(), self.config.seed)?;
        if model.store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, the model has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for p in &self.params {
            let id = model
                .store
                .find(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", p.name)))?;
            if model.store.get(id).shape() != (p.rows, p.cols) || p.data.len() != p.rows * p.cols {
                return Err(Error::Checkpoint(format!("parameter {} has the wrong shape", p.name)));
            }
            model.store.set(id, Tensor::from_vec(p.rows, p.cols, p.data.clone()));
        }
        Ok(model)
    }

    pub fn memory(&self, model: &Model) -> Result<MemoryState> {
        let mut mem = MemoryState::for_model(model, self.origin);
        let tax = &model.taxonomy;
        for e in &self.memory {
            let (row, seen): (&mut [f64], &mut f64) = match e.kind.as_str() {
                "company" => {
                    let c = self
                        .companies
                        .iter()
                        .position(|x| *x == e.id)
                        .ok_or_else(|| Error::Checkpoint(format!("unknown company {}", e.id)))?;
                    (mem.company.row_mut(c), &mut mem.company_seen[c])
                }
                "leaf" | "node" => {
                    let (level, idx) = tax
                        .locate(&e.id)
                        .ok_or_else(|| Error::Checkpoint(format!("unknown code {}", e.id)))?;
                    if level == tax.depth() {
                        (mem.leaf.row_mut(idx), &mut mem.leaf_seen[idx])
                    } else {
                        (mem.nodes[level - 1].row_mut(idx), &mut mem.node_seen[level - 1][idx])
                    }
                }
                other => return Err(Error::Checkpoint(format!("unknown entity kind {other}"))),
            };
            if row.len() != e.values.len() {
                return Err(Error::Checkpoint(format!("memory of {} has the wrong width", e.id)));
            }
            row.copy_from_slice(&e.values);
            *seen = e.last_seen;
        }
        Ok(mem)
    }

    pub fn optimizer(&self) -> Adam {
        let o = &self.optimizer;
        Adam {
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            step: o.step,
            first: o.first.iter().map(|t| t.data.clone()).collect(),
            second: o.second.iter().map(|t| t.data.clone()).collect(),
        }
    }
}

/// Write-then-rename so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synthesize, SynthConfig};
    use crate::trainer::fit;

    fn trained() -> (Dataset, TrainConfig, TrainState) {
        let ds = synthesize(
            &SynthConfig {
                companies: 3,
                branching: vec![2, 2],
                events_per_company_year: 3,
                ..Default::default()
            },
            1,
        )
        .unwrap()
        .dataset;
        let cfg = TrainConfig {
            hidden_dim: 4,
            max_epochs: 1,
            batch_size: 5,
            ..Default::default()
        };
        let state = fit(&ds, &cfg).unwrap();
        (ds, cfg, state)
    }

    #[test]
    fn round_trip_is_exact() {
        let (ds, cfg, state) = trained();
        let ck = Checkpoint::from_state(&state, &cfg, &ds);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let model = back.model().unwrap();
        let best = state.best_model();
        for id in best.store.ids() {
            assert_eq!(best.store.get(id), model.store.get(id));
        }
        assert_eq!(back.memory(&model).unwrap(), state.best_memory);
        assert_eq!(back.optimizer().first, state.optimizer.first);
    }

    #[test]
    fn tampering_is_detected() {
        let (ds, cfg, state) = trained();
        let mut ck = Checkpoint::from_state(&state, &cfg, &ds);
        ck.config.hidden_dim = 8;
        assert!(matches!(Checkpoint::from_json(&ck.to_json()), Err(Error::Checkpoint(_))));
        let mut ck = Checkpoint::from_state(&state, &cfg, &ds);
        ck.version = 99;
        assert!(matches!(Checkpoint::from_json(&ck.to_json()), Err(Error::Checkpoint(_))));
        assert!(matches!(Checkpoint::from_json("{}"), Err(Error::Checkpoint(_))));
    }
}
