//! Fusing static, dynamic and hierarchical representations into
//! per-company probabilities over all leaves.

use std::collections::BTreeSet;
use std::sync::Arc;

use crate::autodiff::{Graph, Tensor, Var};
use crate::corpus::EventItem;
use crate::memory::MemoryState;
use crate::model::Model;
use crate::nn::{Bound, Dropout};

/// Codes each company has interacted with so far, and the codes of the
/// batch currently being scored.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionHistory {
    seen: Vec<BTreeSet<usize>>,
    current: Vec<BTreeSet<usize>>,
    touched: Vec<usize>,
}

impl InteractionHistory {
    pub fn new(companies: usize) -> Self {
        InteractionHistory {
            seen: vec![BTreeSet::new(); companies],
            current: vec![BTreeSet::new(); companies],
            touched: Vec::new(),
        }
    }

    /// Adds the items to the history without marking them current.
    pub fn record(&mut self, items: &[EventItem]) {
        for it in items {
            self.seen[it.company].extend(it.codes.iter().copied());
        }
    }

    /// Marks `items` as the current batch and adds them to the history.
    pub fn begin_batch(&mut self, items: &[EventItem]) {
        self.clear_current();
        for it in items {
            self.current[it.company].extend(it.codes.iter().copied());
            self.touched.push(it.company);
        }
        self.record(items);
    }

    pub fn clear_current(&mut self) {
        for c in self.touched.drain(..) {
            self.current[c].clear();
        }
    }

    pub fn codes(&self, company: usize) -> &BTreeSet<usize> {
        &self.seen[company]
    }

    pub fn has_interacted(&self, company: usize, leaf: usize) -> bool {
        self.seen[company].contains(&leaf)
    }

    pub fn in_current(&self, company: usize, leaf: usize) -> bool {
        self.current[company].contains(&leaf)
    }

    /// Indicator of past interaction for every leaf.
    pub fn interacted_mask(&self, company: usize, leaves: usize) -> Vec<f64> {
        mask(&self.seen[company], leaves)
    }

    /// Indicator of membership in the current batch for every leaf.
    pub fn current_mask(&self, company: usize, leaves: usize) -> Vec<f64> {
        mask(&self.current[company], leaves)
    }
}

fn mask(set: &BTreeSet<usize>, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    for &j in set {
        v[j] = 1.0;
    }
    v
}

/// Which of the three representations a leaf receives for a company.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    /// Code of the current batch: updated memory.
    Current,
    /// Interacted before: historical memory through the perceptron.
    Historical,
    /// Never interacted: static embedding only.
    Cold,
}

pub fn branch_of(interacted: bool, current: bool) -> Branch {
    match (interacted, current) {
        (true, true) => Branch::Current,
        (true, false) => Branch::Historical,
        (false, false) => Branch::Cold,
        (false, true) => panic!("a current code is always part of the history"),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BranchCounts {
    pub current: usize,
    pub historical: usize,
    pub cold: usize,
}

impl BranchCounts {
    pub fn total(&self) -> usize {
        self.current + self.historical + self.cold
    }

    fn add(&mut self, b: Branch) {
        match b {
            Branch::Current => self.current += 1,
            Branch::Historical => self.historical += 1,
            Branch::Cold => self.cold += 1,
        }
    }
}

/// Per-leaf quantities shared by every company scored against the same
/// memories.
#[derive(Clone, Debug)]
pub(crate) struct LeafContext {
    pub leaf: Var,
    pub history: Var,
    pub gate: Var,
    pub hierarchy: Var,
}

impl LeafContext {
    pub fn new(model: &Model, g: &mut Graph, p: &Bound, leaf: Var, nodes: &[Var], dropout: &mut Option<Dropout>) -> Self {
        let tax = &model.taxonomy;
        let n = tax.leaf_count();
        let history = model.history_head.forward(g, p, leaf, dropout.as_mut());
        let gate = g.sigmoid(p.var(model.leaf_gate));
        let lambda = p.var(model.level_weights);
        let mut hierarchy = g.constant(Tensor::zeros(n, model.dim()));
        for (i, &node) in nodes.iter().enumerate() {
            let level = i + 1;
            let rows = (0..n).map(|j| tax.ancestor(j, level)).collect();
            let s = g.gather(node, rows);
            let s = g.scale_by(s, lambda, i);
            hierarchy = g.add(hierarchy, s);
        }
        LeafContext {
            leaf,
            history,
            gate,
            hierarchy,
        }
    }

    /// Copies the values onto another graph as constants.
    pub fn detach_into(&self, src: &Graph, dst: &mut Graph) -> Self {
        let mut copy = |v: Var| dst.constant_shared(Arc::new(src.value(v).clone()));
        LeafContext {
            leaf: copy(self.leaf),
            history: copy(self.history),
            gate: copy(self.gate),
            hierarchy: copy(self.hierarchy),
        }
    }
}

/// Company representation from its (post-update) memory row `memory`.
pub(crate) fn company_preference_var(
    model: &Model,
    g: &mut Graph,
    p: &Bound,
    company: usize,
    memory: Var,
    dropout: &mut Option<Dropout>,
) -> Var {
    let gate = g.gather(p.var(model.company_gate), vec![company]);
    let gate = g.sigmoid(gate);
    let mut mixed = g.mul_col(memory, gate);
    if !model.ablations().sif {
        let stat = g.gather(p.var(model.static_company), vec![company]);
        let keep = g.affine(gate, -1.0, 1.0);
        let stat = g.mul_col(stat, keep);
        mixed = g.add(mixed, stat);
    }
    model.company_head.forward(g, p, mixed, dropout.as_mut())
}

/// Leaf representations for one company given its interaction and
/// current-batch indicators.
pub(crate) fn code_representation_var(
    model: &Model,
    g: &mut Graph,
    p: &Bound,
    ctx: &LeafContext,
    interacted: &[f64],
    current: &[f64],
) -> Var {
    let n = interacted.len();
    let cur: Vec<f64> = interacted.iter().zip(current).map(|(b, c)| b * c).collect();
    let hist: Vec<f64> = interacted.iter().zip(current).map(|(b, c)| b * (1.0 - c)).collect();
    let beta = g.constant(Tensor::column(interacted.to_vec()));
    let cur = g.constant(Tensor::column(cur));
    let hist = g.constant(Tensor::column(hist));
    let w_cur = g.mul(cur, ctx.gate);
    let w_hist = g.mul(hist, ctx.gate);
    let t_cur = g.mul_col(ctx.leaf, w_cur);
    let t_hist = g.mul_col(ctx.history, w_hist);
    let mut z = g.add(t_cur, t_hist);
    if !model.ablations().sif {
        let active = g.mul(beta, ctx.gate);
        let keep = g.affine(active, -1.0, 1.0);
        let stat = g.mul_col(p.var(model.static_leaf), keep);
        z = g.add(stat, z);
    }
    debug_assert_eq!(g.shape(z).0, n);
    z
}

pub(crate) fn hierarchical_mix_var(model: &Model, g: &mut Graph, p: &Bound, ctx: &LeafContext, z: Var) -> Var {
    let lambda = p.var(model.level_weights);
    let own = g.scale_by(z, lambda, model.depth() - 1);
    g.add(own, ctx.hierarchy)
}

/// Logits (`n x 1`) for one company.
#[allow(clippy::too_many_arguments)]
pub(crate) fn company_logits(
    model: &Model,
    g: &mut Graph,
    p: &Bound,
    ctx: &LeafContext,
    company: usize,
    memory: Var,
    interacted: &[f64],
    current: &[f64],
    dropout: &mut Option<Dropout>,
) -> Var {
    let zu = company_preference_var(model, g, p, company, memory, dropout);
    let zv = code_representation_var(model, g, p, ctx, interacted, current);
    let c = hierarchical_mix_var(model, g, p, ctx, zv);
    let x = g.add_row(c, zu);
    model.output_head.forward(g, p, x, dropout.as_mut())
}

struct Scorer {
    graph: Graph,
    ctx: LeafContext,
}

impl Scorer {
    fn new(model: &Model, mem: &MemoryState) -> Self {
        let mut g = Graph::new();
        let p = model.store.bind(&mut g);
        let leaf = g.constant(mem.leaf.clone());
        let nodes: Vec<Var> = mem.nodes.iter().map(|t| g.constant(t.clone())).collect();
        let ctx = LeafContext::new(model, &mut g, &p, leaf, &nodes, &mut None);
        Scorer { graph: g, ctx }
    }

    fn logits(&self, model: &Model, mem: &MemoryState, history: &InteractionHistory, company: usize) -> Vec<f64> {
        let n = model.leaves();
        let mut g = Graph::new();
        let p = model.store.bind(&mut g);
        let ctx = self.ctx.detach_into(&self.graph, &mut g);
        let memory = g.constant(Tensor::row_vector(mem.company.row(company).to_vec()));
        let beta = history.interacted_mask(company, n);
        let gamma = history.current_mask(company, n);
        let out = company_logits(model, &mut g, &p, &ctx, company, memory, &beta, &gamma, &mut None);
        g.value(out).data().to_vec()
    }
}

/// Logits over all leaves for each listed company, scored against the
/// current memories and history.
pub fn score_logits(model: &Model, mem: &MemoryState, history: &InteractionHistory, companies: &[usize]) -> Vec<Vec<f64>> {
    let scorer = Scorer::new(model, mem);
    companies.iter().map(|&c| scorer.logits(model, mem, history, c)).collect()
}

/// Probabilities over all leaves for one company.
pub fn score(model: &Model, company: usize, mem: &MemoryState, history: &InteractionHistory) -> Vec<f64> {
    score_logits(model, mem, history, &[company])
        .pop()
        .expect("one company")
        .into_iter()
        .map(crate::autodiff::logistic)
        .collect()
}

pub fn company_preference(model: &Model, company: usize, mem: &MemoryState) -> Vec<f64> {
    let mut g = Graph::new();
    let p = model.store.bind(&mut g);
    let memory = g.constant(Tensor::row_vector(mem.company.row(company).to_vec()));
    let out = company_preference_var(model, &mut g, &p, company, memory, &mut None);
    g.value(out).data().to_vec()
}

/// Leaf representations of every leaf for `company`, with per-branch
/// counts.
pub fn code_representations(
    model: &Model,
    company: usize,
    mem: &MemoryState,
    history: &InteractionHistory,
) -> (Tensor, BranchCounts) {
    let n = model.leaves();
    let mut counts = BranchCounts::default();
    for j in 0..n {
        counts.add(branch_of(history.has_interacted(company, j), history.in_current(company, j)));
    }
    let mut g = Graph::new();
    let p = model.store.bind(&mut g);
    let leaf = g.constant(mem.leaf.clone());
    let nodes: Vec<Var> = mem.nodes.iter().map(|t| g.constant(t.clone())).collect();
    let ctx = LeafContext::new(model, &mut g, &p, leaf, &nodes, &mut None);
    let beta = history.interacted_mask(company, n);
    let gamma = history.current_mask(company, n);
    let z = code_representation_var(model, &mut g, &p, &ctx, &beta, &gamma);
    (g.value(z).clone(), counts)
}

pub fn code_representation(
    model: &Model,
    leaf: usize,
    company: usize,
    mem: &MemoryState,
    history: &InteractionHistory,
) -> Vec<f64> {
    code_representations(model, company, mem, history).0.row(leaf).to_vec()
}

/// `lambda_L * z + sum_l lambda_l * s_l` over the leaf's ancestors.
pub fn hierarchical_mix(model: &Model, leaf: usize, z: &[f64], mem: &MemoryState) -> Vec<f64> {
    let mut g = Graph::new();
    let p = model.store.bind(&mut g);
    let leaf_mem = g.constant(mem.leaf.clone());
    let nodes: Vec<Var> = mem.nodes.iter().map(|t| g.constant(t.clone())).collect();
    let ctx = LeafContext::new(model, &mut g, &p, leaf_mem, &nodes, &mut None);
    let mut zs = Tensor::zeros(model.leaves(), model.dim());
    zs.row_mut(leaf).copy_from_slice(z);
    let zs = g.constant(zs);
    let out = hierarchical_mix_var(model, &mut g, &p, &ctx, zs);
    g.value(out).row(leaf).to_vec()
}
