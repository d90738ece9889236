//! Company and leaf memories: message encoding and recurrent updates.
//!
//! The row-batched functions here are what the replay engine records on
//! its tape; the per-entity operations wrap them on a one-row graph.

use std::sync::Arc;

use crate::autodiff::{Graph, Tensor, Var};
use crate::corpus::time::SECONDS_PER_DAY;
use crate::corpus::{EventItem, Taxonomy};
use crate::model::{Aggregation, Model};
use crate::nn::{Bound, Gru};

/// Memories of every entity plus the time each was last written.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryState {
    pub company: Tensor,
    pub leaf: Tensor,
    /// Node memories for levels `1..L-1`, index `l - 1`.
    pub nodes: Vec<Tensor>,
    pub company_seen: Vec<f64>,
    pub leaf_seen: Vec<f64>,
    pub node_seen: Vec<Vec<f64>>,
}

impl MemoryState {
    /// Zero memories; every entity counts as last seen at `origin`.
    pub fn new(companies: usize, taxonomy: &Taxonomy, dim: usize, origin: f64) -> Self {
        let n = taxonomy.leaf_count();
        let levels = 1..taxonomy.depth();
        MemoryState {
            company: Tensor::zeros(companies, dim),
            leaf: Tensor::zeros(n, dim),
            nodes: levels.clone().map(|l| Tensor::zeros(taxonomy.level_size(l), dim)).collect(),
            company_seen: vec![origin; companies],
            leaf_seen: vec![origin; n],
            node_seen: levels.map(|l| vec![origin; taxonomy.level_size(l)]).collect(),
        }
    }

    pub fn for_model(model: &Model, origin: f64) -> Self {
        Self::new(model.companies, &model.taxonomy, model.dim(), origin)
    }

    pub fn dim(&self) -> usize {
        self.company.cols()
    }

    /// Memory of node `idx` at taxonomy level `level` (`1..L-1`).
    pub fn node(&self, level: usize, idx: usize) -> &[f64] {
        self.nodes[level - 1].row(idx)
    }

    pub fn is_finite(&self) -> bool {
        self.company.is_finite() && self.leaf.is_finite() && self.nodes.iter().all(Tensor::is_finite)
    }
}

/// An encoded message addressed to one entity.
#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub target: usize,
    pub payload: Vec<f64>,
    pub event_time: f64,
}

pub(crate) fn elapsed_days(now: f64, last: f64) -> f64 {
    (now - last) / SECONDS_PER_DAY
}

pub(crate) fn rows_of(source: &Tensor, rows: impl IntoIterator<Item = usize>) -> Tensor {
    let d = source.cols();
    let data: Vec<f64> = rows.into_iter().flat_map(|r| source.row(r).iter().copied()).collect();
    Tensor::from_vec(data.len() / d.max(1), d, data)
}

/// Mean of leaf memories over each row's code set.
pub(crate) fn integrated_rows(mem: &MemoryState, code_sets: &[&[usize]]) -> Tensor {
    let d = mem.dim();
    let mut out = Tensor::zeros(code_sets.len(), d);
    for (r, codes) in code_sets.iter().enumerate() {
        assert!(!codes.is_empty(), "code set must be nonempty");
        let k = 1.0 / codes.len() as f64;
        let row = out.row_mut(r);
        for &j in *codes {
            for (o, &x) in row.iter_mut().zip(mem.leaf.row(j)) {
                *o += x;
            }
        }
        row.iter_mut().for_each(|o| *o *= k);
    }
    out
}

/// One row to encode for a company: `(company, codes of the item, time)`.
pub(crate) type CompanyRow<'a> = (usize, &'a [usize], f64);
/// One row to encode for a leaf: `(company, leaf, time)`.
pub(crate) type LeafRow = (usize, usize, f64);

/// Company messages, one per row, against the memories in `mem`.
pub(crate) fn company_messages(model: &Model, g: &mut Graph, p: &Bound, mem: &MemoryState, rows: &[CompanyRow]) -> Var {
    let d = model.dim();
    let ablate = model.ablations();
    let codes = if ablate.mi {
        Tensor::zeros(rows.len(), d)
    } else {
        integrated_rows(mem, &rows.iter().map(|r| r.1).collect::<Vec<_>>())
    };
    let own = rows_of(&mem.company, rows.iter().map(|r| r.0));
    let dt: Vec<f64> = rows.iter().map(|&(c, _, t)| elapsed_days(t, mem.company_seen[c])).collect();
    let codes = g.constant(codes);
    let own = g.constant(own);
    let te = model.time.forward(g, p, &dt, ablate.tie);
    let x = g.concat(&[codes, own, te]);
    model.company_msg.forward(g, p, x, None)
}

/// Leaf messages, one per row. `parents` holds the level `L-1` memory for
/// every row and must be present exactly when the model is hierarchical.
pub(crate) fn leaf_messages(
    model: &Model,
    g: &mut Graph,
    p: &Bound,
    mem: &MemoryState,
    rows: &[LeafRow],
    parents: Option<Tensor>,
) -> Var {
    let d = model.dim();
    let ablate = model.ablations();
    assert_eq!(parents.is_some(), model.hierarchical(), "parent slot must match the hierarchy setting");
    let company = if ablate.mi {
        Tensor::zeros(rows.len(), d)
    } else {
        rows_of(&mem.company, rows.iter().map(|r| r.0))
    };
    let own = rows_of(&mem.leaf, rows.iter().map(|r| r.1));
    let dt: Vec<f64> = rows.iter().map(|&(_, j, t)| elapsed_days(t, mem.leaf_seen[j])).collect();
    let company = g.constant(company);
    let own = g.constant(own);
    let te = model.time.forward(g, p, &dt, ablate.tie);
    let mut parts = vec![company, own, te];
    if let Some(par) = parents {
        assert_eq!(par.shape(), (rows.len(), d), "parent rows shape");
        parts.push(g.constant(par));
    }
    let x = g.concat(&parts);
    model.leaf_msg.forward(g, p, x, None)
}

/// Parent (level `L-1`) memories for each leaf.
pub(crate) fn parent_rows(model: &Model, mem: &MemoryState, leaves: impl IntoIterator<Item = usize>) -> Tensor {
    let top = model.depth() - 1;
    rows_of(&mem.nodes[top - 1], leaves.into_iter().map(|j| model.taxonomy.ancestor(j, top)))
}

/// Combines the message rows addressed to each target. `groups[k]` lists
/// the rows for target `k` in item order.
pub(crate) fn aggregate_rows(g: &mut Graph, messages: Var, groups: Vec<Vec<usize>>, how: Aggregation) -> Var {
    match how {
        Aggregation::Mean => g.group_mean(messages, groups),
        Aggregation::Latest => {
            let last = groups.iter().map(|rows| *rows.last().expect("nonempty group")).collect();
            g.gather(messages, last)
        }
    }
}

/// Recurrent update of the given memory rows with aggregated messages.
pub(crate) fn update_rows(g: &mut Graph, p: &Bound, gru: &Gru, messages: Var, previous: Tensor) -> Var {
    let h = g.constant(previous);
    gru.forward(g, p, messages, h)
}

fn single_row(g: &Graph, v: Var) -> Vec<f64> {
    g.value(v).row(0).to_vec()
}

/// Mean of the codes' current leaf memories.
pub fn integrate_codes(codes: &[usize], mem: &MemoryState) -> Vec<f64> {
    integrated_rows(mem, &[codes]).into_vec()
}

/// Encodes the company side of an item against the current memories.
pub fn encode_company_message(model: &Model, item: &EventItem, mem: &MemoryState) -> Message {
    let mut g = Graph::new();
    let p = model.store.bind(&mut g);
    let out = company_messages(model, &mut g, &p, mem, &[(item.company, &item.codes, item.timestamp)]);
    Message {
        target: item.company,
        payload: single_row(&g, out),
        event_time: item.timestamp,
    }
}

/// Encodes the message for one of the item's codes. `parent` is the
/// memory of the leaf's level `L-1` ancestor; pass `None` when the model
/// has hierarchical passing disabled.
pub fn encode_leaf_message(
    model: &Model,
    item: &EventItem,
    leaf: usize,
    parent: Option<&[f64]>,
    mem: &MemoryState,
) -> Message {
    assert!(item.codes.contains(&leaf), "leaf {leaf} is not a code of item {}", item.patent_id);
    let mut g = Graph::new();
    let p = model.store.bind(&mut g);
    let parents = parent.map(|v| Tensor::row_vector(v.to_vec()));
    let out = leaf_messages(model, &mut g, &p, mem, &[(item.company, leaf, item.timestamp)], parents);
    Message {
        target: leaf,
        payload: single_row(&g, out),
        event_time: item.timestamp,
    }
}

/// Combines messages addressed to one entity.
pub fn aggregate_messages(msgs: &[Message], how: Aggregation) -> Message {
    assert!(!msgs.is_empty(), "nothing to aggregate");
    let target = msgs[0].target;
    assert!(msgs.iter().all(|m| m.target == target), "messages address different targets");
    let d = msgs[0].payload.len();
    let rows: Vec<&[f64]> = msgs.iter().map(|m| m.payload.as_slice()).collect();
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&rows, d));
    let out = aggregate_rows(&mut g, x, vec![(0..msgs.len()).collect()], how);
    Message {
        target,
        payload: single_row(&g, out),
        event_time: msgs.iter().map(|m| m.event_time).fold(f64::NEG_INFINITY, f64::max),
    }
}

fn apply_single(gru: &Gru, model: &Model, msg: &Message, memory: &mut Tensor, seen: &mut [f64]) {
    let mut g = Graph::new();
    let p = model.store.bind(&mut g);
    let x = g.constant_shared(Arc::new(Tensor::row_vector(msg.payload.clone())));
    let out = update_rows(&mut g, &p, gru, x, rows_of(memory, [msg.target]));
    memory.row_mut(msg.target).copy_from_slice(g.value(out).row(0));
    seen[msg.target] = msg.event_time;
}

pub fn update_company(model: &Model, msg: &Message, mem: &mut MemoryState) {
    apply_single(&model.company_gru, model, msg, &mut mem.company, &mut mem.company_seen);
}

pub fn update_leaf(model: &Model, msg: &Message, mem: &mut MemoryState) {
    apply_single(&model.leaf_gru, model, msg, &mut mem.leaf, &mut mem.leaf_seen);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::regular_taxonomy;
    use crate::model::ModelConfig;

    fn model(d: usize, ablations: &str) -> Model {
        let tax = Arc::new(regular_taxonomy(&[2, 2, 2]).unwrap());
        let cfg = ModelConfig {
            hidden_dim: d,
            ablations: ablations.parse().unwrap(),
            ..Default::default()
        };
        Model::new(cfg, tax, 3, 11).unwrap()
    }

    fn item(company: usize, codes: &[usize], t: f64) -> EventItem {
        EventItem {
            patent_id: "p".into(),
            company,
            codes: codes.to_vec(),
            timestamp: t,
        }
    }

    #[test]
    fn integrate_codes_examples() {
        let m = model(2, "");
        let mut mem = MemoryState::for_model(&m, 0.0);
        assert_eq!(integrate_codes(&[0, 3], &mem), vec![0.0, 0.0]);
        mem.leaf.row_mut(1).copy_from_slice(&[1.5, -2.0]);
        mem.leaf.row_mut(2).copy_from_slice(&[-1.5, 2.0]);
        assert_eq!(integrate_codes(&[1], &mem), vec![1.5, -2.0]);
        assert_eq!(integrate_codes(&[1, 2], &mem), vec![0.0, 0.0]);
    }

    #[test]
    #[should_panic(expected = "nonempty")]
    fn integrate_empty_codes_panics() {
        let m = model(2, "");
        integrate_codes(&[], &MemoryState::for_model(&m, 0.0));
    }

    // two affine layers evaluated by hand with d = 2 (input width 6)
    fn hand_mlp(x: &[f64], w1: &[f64], b1: &[f64], w2: &[f64], b2: &[f64], inp: usize, hid: usize, out: usize) -> Vec<f64> {
        let h: Vec<f64> = (0..hid)
            .map(|k| (b1[k] + (0..inp).map(|i| x[i] * w1[i * hid + k]).sum::<f64>()).max(0.0))
            .collect();
        (0..out).map(|o| b2[o] + (0..hid).map(|k| h[k] * w2[k * out + o]).sum::<f64>()).collect()
    }

    #[test]
    fn company_message_matches_hand_evaluation() {
        let mut m = model(2, "");
        let w1: Vec<f64> = (0..12).map(|i| (i as f64 - 5.0) * 0.1).collect();
        let w2 = vec![0.3, -0.7, 1.1, 0.4];
        m.store.set(m.company_msg.w1, Tensor::from_vec(6, 2, w1.clone()));
        m.store.set(m.company_msg.b1, Tensor::row_vector(vec![0.05, -0.02]));
        m.store.set(m.company_msg.w2, Tensor::from_vec(2, 2, w2.clone()));
        m.store.set(m.company_msg.b2, Tensor::row_vector(vec![0.01, 0.02]));
        let mut mem = MemoryState::for_model(&m, 0.0);
        mem.leaf.row_mut(0).copy_from_slice(&[1.0, 2.0]);
        mem.leaf.row_mut(1).copy_from_slice(&[3.0, -2.0]);
        mem.company.row_mut(1).copy_from_slice(&[0.5, -0.25]);
        let t = 2.0 * SECONDS_PER_DAY;
        let msg = encode_company_message(&m, &item(1, &[0, 1], t), &mem);
        let te = m.time.params(&m.store).encode_interval(2.0);
        let x = [2.0, 0.0, 0.5, -0.25, te[0], te[1]];
        let want = hand_mlp(&x, &w1, &[0.05, -0.02], &w2, &[0.01, 0.02], 6, 2, 2);
        assert_eq!(msg.target, 1);
        for (a, b) in msg.payload.iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn mi_ablation_ignores_code_memories() {
        let m = model(4, "mi");
        let mut mem = MemoryState::for_model(&m, 0.0);
        let it = item(0, &[2], 86_400.0);
        let before = encode_company_message(&m, &it, &mem);
        mem.leaf.row_mut(2).iter_mut().for_each(|x| *x = 3.0);
        assert_eq!(before, encode_company_message(&m, &it, &mem));
        mem.company.row_mut(0).iter_mut().for_each(|x| *x = 1.0);
        assert_ne!(before, encode_company_message(&m, &it, &mem));

        let mut fresh = MemoryState::for_model(&m, 0.0);
        let leaf_before = encode_leaf_message(&m, &it, 2, Some(&[0.0; 4]), &fresh);
        fresh.company.row_mut(0).iter_mut().for_each(|x| *x = 1.0);
        assert_eq!(leaf_before, encode_leaf_message(&m, &it, 2, Some(&[0.0; 4]), &fresh));
    }

    #[test]
    fn fresh_leaf_message_is_time_only() {
        let mut m = model(2, "hmp");
        let mem = MemoryState::for_model(&m, 0.0);
        let w1: Vec<f64> = (0..12).map(|i| 0.1 * i as f64).collect();
        m.store.set(m.leaf_msg.w1, Tensor::from_vec(6, 2, w1.clone()));
        let w2 = m.store.get(m.leaf_msg.w2).data().to_vec();
        let msg = encode_leaf_message(&m, &item(0, &[3], 0.0), 3, None, &mem);
        let x = [0.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let want = hand_mlp(&x, &w1, &[0.0, 0.0], &w2, &[0.0, 0.0], 6, 2, 2);
        assert_eq!(msg.payload, want);
    }

    #[test]
    fn aggregation_examples() {
        let msg = |p: Vec<f64>, t: f64| Message {
            target: 4,
            payload: p,
            event_time: t,
        };
        let a = msg(vec![1.0, -2.0], 5.0);
        assert_eq!(aggregate_messages(&[a.clone()], Aggregation::Mean), a);
        assert_eq!(aggregate_messages(&[a.clone(), a.clone()], Aggregation::Mean).payload, a.payload);
        let b = msg(vec![-1.0, 2.0], 7.0);
        let mean = aggregate_messages(&[a.clone(), b.clone()], Aggregation::Mean);
        assert_eq!(mean.payload, vec![0.0, 0.0]);
        assert_eq!(mean.event_time, 7.0);
        assert_eq!(aggregate_messages(&[a, b.clone()], Aggregation::Latest).payload, b.payload);
    }

    #[test]
    fn zero_update_is_a_fixed_point() {
        let mut m = model(4, "");
        for id in m.store.ids().collect::<Vec<_>>() {
            if m.store.name(id).starts_with("company_gru.b") {
                let shape = m.store.get(id).shape();
                m.store.set(id, Tensor::zeros(shape.0, shape.1));
            }
        }
        let mut mem = MemoryState::for_model(&m, 0.0);
        let msg = Message {
            target: 2,
            payload: vec![0.0; 4],
            event_time: 9.0,
        };
        update_company(&m, &msg, &mut mem);
        assert_eq!(mem.company.row(2), &[0.0; 4]);
        assert_eq!(mem.company_seen, vec![0.0, 0.0, 9.0]);
    }

    #[test]
    fn scalar_update_matches_closed_form() {
        let tax = Arc::new(regular_taxonomy(&[1, 2]).unwrap());
        let mut m = Model::new(
            ModelConfig {
                hidden_dim: 2,
                ..Default::default()
            },
            tax,
            1,
            0,
        )
        .unwrap();
        // a diagonal cell acts as two independent scalar cells
        let set = |m: &mut Model, name: &str, v: f64| {
            let id = m.store.find(&format!("leaf_gru.{name}")).unwrap();
            let t = if name.starts_with('w') {
                Tensor::from_vec(2, 2, vec![v, 0.0, 0.0, v])
            } else {
                Tensor::row_vector(vec![v, v])
            };
            m.store.set(id, t);
        };
        for (name, v) in [
            ("w_ir", 0.5),
            ("w_iz", -0.3),
            ("w_in", 0.8),
            ("w_hr", 0.2),
            ("w_hz", 0.7),
            ("w_hn", -0.4),
            ("b_ir", 0.1),
            ("b_iz", 0.0),
            ("b_in", -0.2),
            ("b_hr", 0.0),
            ("b_hz", 0.05),
            ("b_hn", 0.3),
        ] {
            set(&mut m, name, v);
        }
        let mut mem = MemoryState::for_model(&m, 0.0);
        mem.leaf.row_mut(1).copy_from_slice(&[0.6, 0.6]);
        let (x, h) = (1.2f64, 0.6f64);
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let r = sig(0.5 * x + 0.1 + 0.2 * h);
        let z = sig(-0.3 * x + 0.7 * h + 0.05);
        let n = (0.8 * x - 0.2 + r * (-0.4 * h + 0.3)).tanh();
        let want = (1.0 - z) * n + z * h;
        update_leaf(
            &m,
            &Message {
                target: 1,
                payload: vec![x, x],
                event_time: 3.0,
            },
            &mut mem,
        );
        assert!((mem.leaf.get(1, 0) - want).abs() < 1e-15);
        assert!((mem.leaf.get(1, 1) - want).abs() < 1e-15);
        assert_eq!(mem.leaf.row(0), &[0.0, 0.0]);
    }
}
