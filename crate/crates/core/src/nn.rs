//! Trainable building blocks: a named parameter store, two-layer
//! perceptrons, gated recurrent cells and the Adam optimizer.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    /// Position in the store, matching the order of gradient vectors.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct ParamEntry {
    name: String,
    value: Arc<Tensor>,
}

/// Flat, ordered collection of named tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

/// Parameters of a store placed on a graph as tracked inputs.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Collects per-parameter gradients in store order (`None` where the
    /// loss does not depend on a parameter).
    pub fn gradients(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| grads.get(v).cloned()).collect()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry {
            name,
            value: Arc::new(value),
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(self.get(id).shape(), value.shape(), "shape change for {}", self.name(id));
        self.entries[id.0].value = Arc::new(value);
    }

    pub fn bind(&self, graph: &mut Graph) -> Bound {
        Bound {
            vars: self.entries.iter().map(|e| graph.input(e.value.clone())).collect(),
        }
    }

    pub fn total_size(&self) -> usize {
        self.entries.iter().map(|e| e.value.data().len()).sum()
    }

    /// Sets every parameter to zero.
    pub fn zero_all(&mut self) {
        for e in &mut self.entries {
            let (r, c) = e.value.shape();
            e.value = Arc::new(Tensor::zeros(r, c));
        }
    }
}

/// Glorot-uniform initialised matrix.
pub fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::from_vec(rows, cols, data)
}

/// Normal(0, std) matrix.
pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0, std).expect("finite std");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Tensor::from_vec(rows, cols, data)
}

/// Inverted dropout applied to hidden activations during training.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn apply(&mut self, graph: &mut Graph, x: Var) -> Var {
        if self.rate <= 0.0 {
            return x;
        }
        let (r, c) = graph.shape(x);
        let keep = 1.0 - self.rate;
        let mask = (0..r * c)
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = graph.constant(Tensor::from_vec(r, c, mask));
        graph.mul(x, mask)
    }
}

/// Two affine layers with a ReLU between them and a linear output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Mlp {
            w1: store.add(format!("{prefix}.w1"), glorot(input, hidden, rng)),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(1, hidden)),
            w2: store.add(format!("{prefix}.w2"), glorot(hidden, output, rng)),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(1, output)),
        }
    }

    pub fn input_dim(&self, store: &ParamStore) -> usize {
        store.get(self.w1).rows()
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, dropout: Option<&mut Dropout>) -> Var {
        let h = g.matmul(x, p.var(self.w1));
        let h = g.add_row(h, p.var(self.b1));
        let mut h = g.relu(h);
        if let Some(d) = dropout {
            h = d.apply(g, h);
        }
        let o = g.matmul(h, p.var(self.w2));
        g.add_row(o, p.var(self.b2))
    }
}

/// Gated recurrent cell, `h' = (1 - z) * n + z * h`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Gru {
    pub w_ir: ParamId,
    pub w_iz: ParamId,
    pub w_in: ParamId,
    pub w_hr: ParamId,
    pub w_hz: ParamId,
    pub w_hn: ParamId,
    pub b_ir: ParamId,
    pub b_iz: ParamId,
    pub b_in: ParamId,
    pub b_hr: ParamId,
    pub b_hz: ParamId,
    pub b_hn: ParamId,
}

impl Gru {
    pub fn new(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut w = |name: &str, rows: usize| store.add(format!("{prefix}.{name}"), glorot(rows, hidden, rng));
        let (w_ir, w_iz, w_in) = (w("w_ir", input), w("w_iz", input), w("w_in", input));
        let (w_hr, w_hz, w_hn) = (w("w_hr", hidden), w("w_hz", hidden), w("w_hn", hidden));
        let mut b = |name: &str| store.add(format!("{prefix}.{name}"), Tensor::zeros(1, hidden));
        Gru {
            w_ir,
            w_iz,
            w_in,
            w_hr,
            w_hz,
            w_hn,
            b_ir: b("b_ir"),
            b_iz: b("b_iz"),
            b_in: b("b_in"),
            b_hr: b("b_hr"),
            b_hz: b("b_hz"),
            b_hn: b("b_hn"),
        }
    }

    fn affine(g: &mut Graph, p: &Bound, x: Var, w: ParamId, b: ParamId) -> Var {
        let y = g.matmul(x, p.var(w));
        g.add_row(y, p.var(b))
    }

    /// One step for a batch of rows: `x` is `r x input`, `h` is `r x hidden`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, h: Var) -> Var {
        let ir = Self::affine(g, p, x, self.w_ir, self.b_ir);
        let hr = Self::affine(g, p, h, self.w_hr, self.b_hr);
        let r = g.add(ir, hr);
        let r = g.sigmoid(r);
        let iz = Self::affine(g, p, x, self.w_iz, self.b_iz);
        let hz = Self::affine(g, p, h, self.w_hz, self.b_hz);
        let z = g.add(iz, hz);
        let z = g.sigmoid(z);
        let inn = Self::affine(g, p, x, self.w_in, self.b_in);
        let hn = Self::affine(g, p, h, self.w_hn, self.b_hn);
        let gated = g.mul(r, hn);
        let n = g.add(inn, gated);
        let n = g.tanh(n);
        // (1 - z) * n + z * h = n + z * (h - n)
        let diff = g.sub(h, n);
        let zd = g.mul(z, diff);
        g.add(n, zd)
    }
}

/// Adaptive-moment optimizer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).data().len()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Applies one update. Parameters without a gradient are skipped.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        assert_eq!(grads.len(), store.len());
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for id in store.ids().collect::<Vec<_>>() {
            let m = &mut self.first[id.0];
            let v = &mut self.second[id.0];
            let Some(g) = &grads[id.0] else { continue };
            let p = store.get_mut(id);
            for (((w, mi), vi), &gi) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *w -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn single_gru(values: &[(&str, f64)]) -> (ParamStore, Gru) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gru = Gru::new(&mut store, "gru", 1, 1, &mut rng);
        store.zero_all();
        for (name, v) in values {
            let id = store.find(&format!("gru.{name}")).unwrap();
            store.set(id, Tensor::scalar(*v));
        }
        (store, gru)
    }

    fn step(store: &ParamStore, gru: &Gru, x: f64, h: f64) -> f64 {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xv = g.constant(Tensor::scalar(x));
        let hv = g.constant(Tensor::scalar(h));
        let out = gru.forward(&mut g, &p, xv, hv);
        g.value(out).data()[0]
    }

    #[test]
    fn gru_zero_fixed_point() {
        let (store, gru) = single_gru(&[]);
        assert_eq!(step(&store, &gru, 0.0, 0.0), 0.0);
    }

    #[test]
    fn scalar_gru_matches_hand_arithmetic() {
        let (store, gru) = single_gru(&[
            ("w_ir", 0.5),
            ("w_hr", -0.3),
            ("b_ir", 0.1),
            ("w_iz", 0.2),
            ("w_hz", 0.4),
            ("b_hz", -0.2),
            ("w_in", 1.5),
            ("w_hn", 0.7),
            ("b_hn", 0.05),
            ("b_in", -0.1),
        ]);
        let (x, h) = (0.8_f64, -0.6_f64);
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let r = sig(0.5 * x + 0.1 - 0.3 * h);
        let z = sig(0.2 * x + 0.4 * h - 0.2);
        let n = (1.5 * x - 0.1 + r * (0.7 * h + 0.05)).tanh();
        let expected = (1.0 - z) * n + z * h;
        assert!((step(&store, &gru, x, h) - expected).abs() < 1e-15);
    }

    #[test]
    fn mlp_hand_evaluation() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&mut store, "m", 2, 2, 1, &mut rng);
        store.set(mlp.w1, Tensor::from_vec(2, 2, vec![1.0, -1.0, 2.0, 0.5]));
        store.set(mlp.b1, Tensor::row_vector(vec![0.1, -3.0]));
        store.set(mlp.w2, Tensor::from_vec(2, 1, vec![2.0, 7.0]));
        store.set(mlp.b2, Tensor::scalar(0.25));
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Tensor::row_vector(vec![0.5, 1.0]));
        let y = mlp.forward(&mut g, &p, x, None);
        // hidden = relu([0.5 + 2 + 0.1, -0.5 + 0.5 - 3]) = [2.6, 0]
        assert!((g.value(y).data()[0] - (2.6 * 2.0 + 0.25)).abs() < 1e-12);
    }

    #[test]
    fn adam_zero_lr_leaves_params() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(1.5));
        let mut adam = Adam::new(&store, 0.0);
        adam.step(&mut store, &[Some(Tensor::scalar(3.0))]);
        assert_eq!(store.get(id).data(), &[1.5]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(1.0));
        let mut adam = Adam::new(&store, 0.1);
        adam.step(&mut store, &[Some(Tensor::scalar(2.0))]);
        assert!((store.get(id).data()[0] - 0.9).abs() < 1e-6);
    }
}
