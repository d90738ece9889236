//! Tab-separated embedding export for external projection tools.
//!
//! Each line is `entity_type, entity_id, timestamp, v_1 .. v_d`. Memory
//! rows carry the entity's last update time; static and preference rows
//! carry the snapshot time.

use std::fmt::Write as _;

use crate::corpus::{split_events, Dataset};
use crate::fusion::company_preference;
use crate::memory::MemoryState;
use crate::model::Model;
use crate::replay::replay;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub entity_type: &'static str,
    pub entity_id: String,
    pub timestamp: f64,
    pub values: Vec<f64>,
}

impl EmbeddingRow {
    pub fn to_tsv(&self) -> String {
        let mut line = format!("{}\t{}\t{}", self.entity_type, self.entity_id, self.timestamp);
        for v in &self.values {
            write!(line, "\t{v}").expect("writing to a string");
        }
        line
    }

    pub fn parse_tsv(line: &str) -> Option<(String, String, f64, Vec<f64>)> {
        let mut fields = line.split('\t');
        let kind = fields.next()?.to_string();
        let id = fields.next()?.to_string();
        let t = fields.next()?.parse().ok()?;
        let values = fields.map(|f| f.parse().ok()).collect::<Option<Vec<f64>>>()?;
        Some((kind, id, t, values))
    }
}

/// Memories, static embeddings and company preferences at time `at`.
pub fn snapshot(model: &Model, company_ids: &[String], mem: &MemoryState, at: f64) -> Vec<EmbeddingRow> {
    let tax = &model.taxonomy;
    let mut rows = Vec::new();
    let static_company = model.store.get(model.static_company);
    let static_leaf = model.store.get(model.static_leaf);
    for (c, id) in company_ids.iter().enumerate() {
        rows.push(EmbeddingRow {
            entity_type: "company_memory",
            entity_id: id.clone(),
            timestamp: mem.company_seen[c],
            values: mem.company.row(c).to_vec(),
        });
        rows.push(EmbeddingRow {
            entity_type: "company_static",
            entity_id: id.clone(),
            timestamp: at,
            values: static_company.row(c).to_vec(),
        });
        rows.push(EmbeddingRow {
            entity_type: "company_preference",
            entity_id: id.clone(),
            timestamp: at,
            values: company_preference(model, c, mem),
        });
    }
    for j in 0..tax.leaf_count() {
        let id = tax.leaf_id(j).to_string();
        rows.push(EmbeddingRow {
            entity_type: "leaf_memory",
            entity_id: id.clone(),
            timestamp: mem.leaf_seen[j],
            values: mem.leaf.row(j).to_vec(),
        });
        rows.push(EmbeddingRow {
            entity_type: "leaf_static",
            entity_id: id,
            timestamp: at,
            values: static_leaf.row(j).to_vec(),
        });
    }
    for (i, t) in mem.nodes.iter().enumerate() {
        for s in 0..t.rows() {
            rows.push(EmbeddingRow {
                entity_type: "node_memory",
                entity_id: tax.node_id(i + 1, s).to_string(),
                timestamp: mem.node_seen[i][s],
                values: t.row(s).to_vec(),
            });
        }
    }
    rows
}

/// Company memories and preferences after replaying up to each of `times`
/// in turn (sorted ascending), for plotting how companies move.
pub fn trajectory(model: &Model, dataset: &Dataset, times: &[f64], batch_size: usize) -> Vec<EmbeddingRow> {
    let mut times = times.to_vec();
    times.sort_by(f64::total_cmp);
    let mut mem = MemoryState::for_model(model, dataset.origin);
    let mut done = dataset.origin;
    let mut rows = Vec::new();
    for &t in &times {
        if t > done {
            let items = split_events(dataset.events_between(done, t));
            replay(model, &mut mem, None, &items, batch_size);
            done = t;
        }
        for (c, id) in dataset.company_ids.iter().enumerate() {
            rows.push(EmbeddingRow {
                entity_type: "company_memory",
                entity_id: id.clone(),
                timestamp: t,
                values: mem.company.row(c).to_vec(),
            });
            rows.push(EmbeddingRow {
                entity_type: "company_preference",
                entity_id: id.clone(),
                timestamp: t,
                values: company_preference(model, c, &mem),
            });
        }
    }
    rows
}

pub fn to_tsv(rows: &[EmbeddingRow]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&r.to_tsv());
        out.push('\n');
    }
    out
}
