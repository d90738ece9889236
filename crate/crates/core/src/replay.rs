//! Batched, two-phase memory updates over chronologically ordered items.
//!
//! Every message in a batch is encoded against the memories as they were
//! before the batch; messages addressed to one entity are aggregated and
//! the recurrent cells are applied once per entity, in ascending id order.

use std::collections::BTreeMap;

use crate::autodiff::{Graph, Var};
use crate::corpus::{EventItem, Taxonomy};
use crate::fusion::InteractionHistory;
use crate::hierarchy::node_messages;
use crate::memory::{
    aggregate_rows, company_messages, leaf_messages, parent_rows, rows_of, update_rows, CompanyRow, LeafRow,
    MemoryState,
};
use crate::model::Model;
use crate::nn::Bound;

/// Distinct targets of one kind, each with the message rows addressed to
/// it and the latest event time among them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TargetGroups {
    pub targets: Vec<usize>,
    pub rows: Vec<Vec<usize>>,
    pub times: Vec<f64>,
}

impl TargetGroups {
    fn build(keys: impl Iterator<Item = (usize, f64)>) -> Self {
        let mut map: BTreeMap<usize, (Vec<usize>, f64)> = BTreeMap::new();
        for (row, (target, t)) in keys.enumerate() {
            let e = map.entry(target).or_insert((Vec::new(), f64::NEG_INFINITY));
            e.0.push(row);
            e.1 = e.1.max(t);
        }
        let mut out = TargetGroups::default();
        for (target, (rows, t)) in map {
            out.targets.push(target);
            out.rows.push(rows);
            out.times.push(t);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn position(&self, target: usize) -> Option<usize> {
        self.targets.binary_search(&target).ok()
    }
}

/// Who receives which messages in one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPlan {
    pub companies: TargetGroups,
    /// `(item row, leaf)` for every code of every item.
    pub pairs: Vec<(usize, usize)>,
    pub pair_times: Vec<f64>,
    pub leaves: TargetGroups,
    /// Node targets per level `1..L-1` (index `l - 1`); empty without
    /// hierarchical passing.
    pub levels: Vec<TargetGroups>,
}

impl BatchPlan {
    pub fn new(items: &[EventItem], taxonomy: &Taxonomy, hierarchical: bool) -> Self {
        let companies = TargetGroups::build(items.iter().map(|it| (it.company, it.timestamp)));
        let pairs: Vec<(usize, usize)> = items
            .iter()
            .enumerate()
            .flat_map(|(k, it)| it.codes.iter().map(move |&j| (k, j)))
            .collect();
        let pair_times: Vec<f64> = pairs.iter().map(|&(k, _)| items[k].timestamp).collect();
        let leaves = TargetGroups::build(pairs.iter().zip(&pair_times).map(|(&(_, j), &t)| (j, t)));
        let levels = if hierarchical {
            (1..taxonomy.depth())
                .map(|l| {
                    TargetGroups::build(pairs.iter().zip(&pair_times).map(|(&(_, j), &t)| (taxonomy.ancestor(j, l), t)))
                })
                .collect()
        } else {
            Vec::new()
        };
        BatchPlan {
            companies,
            pairs,
            pair_times,
            leaves,
            levels,
        }
    }
}

/// New memory rows recorded on a graph, not yet written back.
#[derive(Clone, Debug)]
pub struct BatchUpdate {
    pub plan: BatchPlan,
    /// One row per `plan.companies.targets` entry.
    pub company: Var,
    pub leaf: Var,
    pub nodes: Vec<Var>,
}

pub(crate) fn node_stage(model: &Model, g: &mut Graph, p: &Bound, mem: &MemoryState, plan: &BatchPlan) -> Vec<Var> {
    let rows: Vec<(usize, f64)> = plan.pairs.iter().zip(&plan.pair_times).map(|(&(_, j), &t)| (j, t)).collect();
    plan.levels
        .iter()
        .enumerate()
        .map(|(i, groups)| {
            let level = i + 1;
            let msgs = node_messages(model, g, p, mem, level, &rows);
            let agg = aggregate_rows(g, msgs, groups.rows.clone(), model.config.aggregation);
            let prev = rows_of(&mem.nodes[i], groups.targets.iter().copied());
            update_rows(g, p, &model.node_gru[i], agg, prev)
        })
        .collect()
}

pub(crate) fn write_nodes(g: &Graph, plan: &BatchPlan, nodes: &[Var], mem: &mut MemoryState) {
    for (i, (groups, &v)) in plan.levels.iter().zip(nodes).enumerate() {
        let values = g.value(v);
        for (k, &s) in groups.targets.iter().enumerate() {
            mem.nodes[i].row_mut(s).copy_from_slice(values.row(k));
            mem.node_seen[i][s] = groups.times[k];
        }
    }
}

/// Encodes and updates every entity touched by `items`.
pub fn encode_batch(model: &Model, g: &mut Graph, p: &Bound, mem: &MemoryState, items: &[EventItem]) -> BatchUpdate {
    assert!(!items.is_empty(), "empty batch");
    let plan = BatchPlan::new(items, &model.taxonomy, model.hierarchical());
    let how = model.config.aggregation;

    let crows: Vec<CompanyRow> = items.iter().map(|it| (it.company, it.codes.as_slice(), it.timestamp)).collect();
    let msgs = company_messages(model, g, p, mem, &crows);
    let agg = aggregate_rows(g, msgs, plan.companies.rows.clone(), how);
    let prev = rows_of(&mem.company, plan.companies.targets.iter().copied());
    let company = update_rows(g, p, &model.company_gru, agg, prev);

    let lrows: Vec<LeafRow> = plan
        .pairs
        .iter()
        .zip(&plan.pair_times)
        .map(|(&(k, j), &t)| (items[k].company, j, t))
        .collect();
    let parents = model
        .hierarchical()
        .then(|| parent_rows(model, mem, plan.pairs.iter().map(|&(_, j)| j)));
    let msgs = leaf_messages(model, g, p, mem, &lrows, parents);
    let agg = aggregate_rows(g, msgs, plan.leaves.rows.clone(), how);
    let prev = rows_of(&mem.leaf, plan.leaves.targets.iter().copied());
    let leaf = update_rows(g, p, &model.leaf_gru, agg, prev);

    let nodes = node_stage(model, g, p, mem, &plan);
    BatchUpdate {
        plan,
        company,
        leaf,
        nodes,
    }
}

/// Writes the new rows of `update` into `mem`.
pub fn apply_update(g: &Graph, update: &BatchUpdate, mem: &mut MemoryState) {
    let plan = &update.plan;
    let values = g.value(update.company);
    for (k, &c) in plan.companies.targets.iter().enumerate() {
        mem.company.row_mut(c).copy_from_slice(values.row(k));
        mem.company_seen[c] = plan.companies.times[k];
    }
    let values = g.value(update.leaf);
    for (k, &j) in plan.leaves.targets.iter().enumerate() {
        mem.leaf.row_mut(j).copy_from_slice(values.row(k));
        mem.leaf_seen[j] = plan.leaves.times[k];
    }
    write_nodes(g, plan, &update.nodes, mem);
}

/// Forward-only replay of `items` in consecutive batches of `batch_size`.
pub fn replay(
    model: &Model,
    mem: &mut MemoryState,
    mut history: Option<&mut InteractionHistory>,
    items: &[EventItem],
    batch_size: usize,
) {
    assert!(batch_size >= 1, "batch size must be positive");
    for chunk in items.chunks(batch_size) {
        let mut g = Graph::new();
        let p = model.store.bind(&mut g);
        let update = encode_batch(model, &mut g, &p, mem, chunk);
        apply_update(&g, &update, mem);
        if let Some(h) = history.as_deref_mut() {
            h.record(chunk);
        }
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::corpus::regular_taxonomy;
    use crate::hierarchy::{encode_node_message, update_node};
    use crate::memory::{aggregate_messages, encode_company_message, encode_leaf_message, update_company, update_leaf};
    use crate::model::{Aggregation, ModelConfig};

    fn setup(ablations: &str) -> Model {
        let tax = Arc::new(regular_taxonomy(&[2, 2, 2]).unwrap());
        let cfg = ModelConfig {
            hidden_dim: 4,
            ablations: ablations.parse().unwrap(),
            ..Default::default()
        };
        Model::new(cfg, tax, 3, 2).unwrap()
    }

    fn items() -> Vec<EventItem> {
        let it = |id: &str, c: usize, codes: &[usize], t: f64| EventItem {
            patent_id: id.into(),
            company: c,
            codes: codes.to_vec(),
            timestamp: t,
        };
        vec![
            it("a", 0, &[0, 3], 86_400.0),
            it("b", 2, &[3], 2.0 * 86_400.0),
            it("b", 0, &[3], 2.0 * 86_400.0),
            it("c", 1, &[5, 6, 7], 5.0 * 86_400.0),
        ]
    }

    #[test]
    fn plan_groups_targets() {
        let m = setup("");
        let plan = BatchPlan::new(&items(), &m.taxonomy, true);
        assert_eq!(plan.companies.targets, vec![0, 1, 2]);
        assert_eq!(plan.companies.rows, vec![vec![0, 2], vec![3], vec![1]]);
        assert_eq!(plan.companies.times[0], 2.0 * 86_400.0);
        assert_eq!(plan.leaves.targets, vec![0, 3, 5, 6, 7]);
        assert_eq!(plan.leaves.rows[1], vec![1, 2, 3]);
        assert_eq!(plan.levels.len(), 2);
        assert_eq!(plan.levels[0].targets, vec![0, 1]);
        assert_eq!(plan.levels[1].targets, vec![0, 1, 2, 3]);
    }

    /// The batch engine equals the per-entity operations applied two-phase.
    #[test]
    fn batch_matches_entity_operations() {
        for ablations in ["", "hmp", "mi,tie"] {
            let m = setup(ablations);
            let mut mem = MemoryState::for_model(&m, 0.0);
            // warm up so memories differ from zero
            replay(&m, &mut mem, None, &items(), 2);
            let batch: Vec<EventItem> = items()
                .into_iter()
                .map(|mut it| {
                    it.timestamp += 10.0 * 86_400.0;
                    it
                })
                .collect();

            let mut engine = mem.clone();
            replay(&m, &mut engine, None, &batch, batch.len());

            let pre = mem.clone();
            let mut manual = mem.clone();
            let plan = BatchPlan::new(&batch, &m.taxonomy, m.hierarchical());
            for (k, &c) in plan.companies.targets.iter().enumerate() {
                let msgs: Vec<_> = plan.companies.rows[k]
                    .iter()
                    .map(|&r| encode_company_message(&m, &batch[r], &pre))
                    .collect();
                assert_eq!(msgs[0].target, c);
                update_company(&m, &aggregate_messages(&msgs, Aggregation::Mean), &mut manual);
            }
            for (k, &j) in plan.leaves.targets.iter().enumerate() {
                let msgs: Vec<_> = plan.leaves.rows[k]
                    .iter()
                    .map(|&r| {
                        let item = &batch[plan.pairs[r].0];
                        let parent = m.hierarchical().then(|| pre.node(2, m.taxonomy.ancestor(j, 2)).to_vec());
                        encode_leaf_message(&m, item, j, parent.as_deref(), &pre)
                    })
                    .collect();
                update_leaf(&m, &aggregate_messages(&msgs, Aggregation::Mean), &mut manual);
            }
            for (i, groups) in plan.levels.iter().enumerate() {
                let level = i + 1;
                for (k, &s) in groups.targets.iter().enumerate() {
                    let msgs: Vec<_> = groups.rows[k]
                        .iter()
                        .map(|&r| encode_node_message(&m, level, s, plan.pairs[r].1, plan.pair_times[r], &pre))
                        .collect();
                    update_node(&m, level, &aggregate_messages(&msgs, Aggregation::Mean), &mut manual);
                }
            }
            assert!(engine.company.max_abs_diff(&manual.company) < 1e-13, "{ablations}");
            assert!(engine.leaf.max_abs_diff(&manual.leaf) < 1e-13, "{ablations}");
            for (a, b) in engine.nodes.iter().zip(&manual.nodes) {
                assert!(a.max_abs_diff(b) < 1e-13, "{ablations}");
            }
            assert_eq!(engine.company_seen, manual.company_seen);
            assert_eq!(engine.leaf_seen, manual.leaf_seen);
            assert_eq!(engine.node_seen, manual.node_seen);
        }
    }

    #[test]
    fn locality() {
        let m = setup("");
        let mut mem = MemoryState::for_model(&m, 0.0);
        replay(&m, &mut mem, None, &items(), 4);
        let before = mem.clone();
        let item = EventItem {
            patent_id: "z".into(),
            company: 1,
            codes: vec![4],
            timestamp: 30.0 * 86_400.0,
        };
        replay(&m, &mut mem, None, std::slice::from_ref(&item), 1);
        let chain = m.taxonomy.ancestors(4).to_vec();
        for c in 0..3 {
            assert_eq!(mem.company.row(c) == before.company.row(c), c != 1);
        }
        for j in 0..8 {
            assert_eq!(mem.leaf.row(j) == before.leaf.row(j), j != 4);
        }
        for (i, t) in mem.nodes.iter().enumerate() {
            for s in 0..t.rows() {
                assert_eq!(t.row(s) == before.nodes[i].row(s), s != chain[i]);
            }
        }
    }

    #[test]
    fn hmp_ablation_leaves_nodes_zero() {
        let m = setup("hmp");
        let mut mem = MemoryState::for_model(&m, 0.0);
        replay(&m, &mut mem, None, &items(), 1);
        assert!(mem.nodes.iter().all(|t| t.data().iter().all(|&x| x == 0.0)));
        assert!(mem.leaf.data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn zero_params_keep_memories_zero() {
        let mut m = setup("");
        m.store.zero_all();
        let mut mem = MemoryState::for_model(&m, 0.0);
        replay(&m, &mut mem, None, &items(), 3);
        assert!(mem.company.data().iter().chain(mem.leaf.data()).all(|&x| x == 0.0));
        assert!(mem.nodes.iter().all(|t| t.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn replay_is_deterministic() {
        let m = setup("");
        let mut a = MemoryState::for_model(&m, 0.0);
        let mut b = MemoryState::for_model(&m, 0.0);
        replay(&m, &mut a, None, &items(), 2);
        replay(&m, &mut b, None, &items(), 2);
        assert_eq!(a, b);
    }
}
