//! Message passing along the taxonomy: every node on a triggering leaf's
//! ancestor chain receives a message built from its parent and from the
//! child on that chain.

use crate::autodiff::{Graph, Tensor, Var};
use crate::corpus::EventItem;
use crate::memory::{elapsed_days, rows_of, update_rows, MemoryState, Message};
use crate::model::Model;
use crate::nn::Bound;
use crate::replay::BatchPlan;

/// Parent memory (absent at level 1) followed by the memory of the child
/// on the leaf's chain (the leaf itself at level `L-1`).
pub(crate) fn adjacent_rows(model: &Model, mem: &MemoryState, level: usize, leaves: &[usize]) -> Tensor {
    let tax = &model.taxonomy;
    let depth = tax.depth();
    let child = if level + 1 == depth {
        rows_of(&mem.leaf, leaves.iter().copied())
    } else {
        rows_of(&mem.nodes[level], leaves.iter().map(|&j| tax.ancestor(j, level + 1)))
    };
    if level == 1 {
        return child;
    }
    let parent = rows_of(&mem.nodes[level - 2], leaves.iter().map(|&j| tax.ancestor(j, level - 1)));
    let d = mem.dim();
    let mut out = Tensor::zeros(leaves.len(), 2 * d);
    for r in 0..leaves.len() {
        out.row_mut(r)[..d].copy_from_slice(parent.row(r));
        out.row_mut(r)[d..].copy_from_slice(child.row(r));
    }
    out
}

/// Messages for the level-`level` ancestors of the given `(leaf, time)`
/// rows.
pub(crate) fn node_messages(
    model: &Model,
    g: &mut Graph,
    p: &Bound,
    mem: &MemoryState,
    level: usize,
    rows: &[(usize, f64)],
) -> Var {
    assert!(model.hierarchical(), "node messages need hierarchical passing");
    assert!(level >= 1 && level < model.depth(), "level {level} has no node memory");
    let tax = &model.taxonomy;
    let leaves: Vec<usize> = rows.iter().map(|r| r.0).collect();
    let nodes: Vec<usize> = leaves.iter().map(|&j| tax.ancestor(j, level)).collect();
    let seen = &mem.node_seen[level - 1];
    let dt: Vec<f64> = rows.iter().zip(&nodes).map(|(&(_, t), &s)| elapsed_days(t, seen[s])).collect();
    let adjacent = g.constant(adjacent_rows(model, mem, level, &leaves));
    let own = g.constant(rows_of(&mem.nodes[level - 1], nodes.iter().copied()));
    let te = model.time.forward(g, p, &dt, model.ablations().tie);
    let x = g.concat(&[adjacent, own, te]);
    model.node_msg[level - 1].forward(g, p, x, None)
}

fn check_on_chain(model: &Model, level: usize, node: usize, leaf: usize) {
    assert!(
        level >= 1 && level < model.depth() && model.taxonomy.ancestor(leaf, level) == node,
        "node {node} at level {level} is not on the chain of leaf {leaf}"
    );
}

/// Adjacent-level memories feeding the message of `node` (at `level`)
/// triggered through `leaf`.
pub fn gather_adjacent(model: &Model, level: usize, node: usize, leaf: usize, mem: &MemoryState) -> Vec<f64> {
    check_on_chain(model, level, node, leaf);
    adjacent_rows(model, mem, level, &[leaf]).into_vec()
}

pub fn encode_node_message(model: &Model, level: usize, node: usize, leaf: usize, time: f64, mem: &MemoryState) -> Message {
    check_on_chain(model, level, node, leaf);
    let mut g = Graph::new();
    let p = model.store.bind(&mut g);
    let out = node_messages(model, &mut g, &p, mem, level, &[(leaf, time)]);
    Message {
        target: node,
        payload: g.value(out).row(0).to_vec(),
        event_time: time,
    }
}

pub fn update_node(model: &Model, level: usize, msg: &Message, mem: &mut MemoryState) {
    let mut g = Graph::new();
    let p = model.store.bind(&mut g);
    let x = g.constant(Tensor::row_vector(msg.payload.clone()));
    let prev = rows_of(&mem.nodes[level - 1], [msg.target]);
    let out = update_rows(&mut g, &p, &model.node_gru[level - 1], x, prev);
    mem.nodes[level - 1].row_mut(msg.target).copy_from_slice(g.value(out).row(0));
    mem.node_seen[level - 1][msg.target] = msg.event_time;
}

/// Updates every ancestor of the item's codes. All levels read the
/// memories as they were before the call; ancestors shared by several
/// codes receive the aggregate of their messages.
pub fn propagate_event(model: &Model, item: &EventItem, mem: &mut MemoryState) {
    if !model.hierarchical() {
        return;
    }
    let plan = BatchPlan::new(std::slice::from_ref(item), &model.taxonomy, true);
    let mut g = Graph::new();
    let p = model.store.bind(&mut g);
    let updates = crate::replay::node_stage(model, &mut g, &p, mem, &plan);
    crate::replay::write_nodes(&g, &plan, &updates, mem);
}
