//! Trainable sinusoidal encoding of elapsed time.
//!
//! An interval `dt` maps to `sqrt(2 / d_T) * [cos(w_1 dt + b_1), sin(w_1 dt + b_1), ...]`,
//! so every encoding has unit Euclidean norm. Intervals are measured in
//! days.

use std::sync::Arc;

use crate::autodiff::{Graph, Tensor, Var};
use crate::nn::{Bound, ParamId, ParamStore};

/// Log-spaced initial frequencies `10^(-r * 9 / (d_T / 2))`.
pub fn initial_frequencies(dim: usize) -> Vec<f64> {
    let half = dim / 2;
    (0..half).map(|r| 10f64.powf(-(r as f64) * 9.0 / half as f64)).collect()
}

/// Records the encoding of a column of intervals on `g`.
pub fn encode_on_graph(g: &mut Graph, freqs: Var, phases: Var, intervals: &[f64]) -> Var {
    let half = g.shape(freqs).1;
    let dt = g.constant(Tensor::column(intervals.to_vec()));
    let phase = g.matmul(dt, freqs);
    let phase = g.add_row(phase, phases);
    let c = g.cos(phase);
    let s = g.sin(phase);
    let enc = g.interleave(c, s);
    g.scale(enc, (1.0 / half as f64).sqrt())
}

/// Plain parameter values of a time encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeEncoderParams {
    pub frequencies: Vec<f64>,
    pub phases: Vec<f64>,
}

impl TimeEncoderParams {
    pub fn new(frequencies: Vec<f64>, phases: Vec<f64>) -> Self {
        assert_eq!(frequencies.len(), phases.len(), "one phase per frequency");
        assert!(!frequencies.is_empty(), "time encoding needs at least one frequency");
        TimeEncoderParams { frequencies, phases }
    }

    pub fn initial(dim: usize) -> Self {
        assert!(dim >= 2 && dim % 2 == 0, "time dimension must be even and positive");
        Self::new(initial_frequencies(dim), vec![0.0; dim / 2])
    }

    pub fn dim(&self) -> usize {
        self.frequencies.len() * 2
    }

    /// Encodes a non-negative interval.
    ///
    /// Panics on negative input, which indicates events replayed out of
    /// order.
    pub fn encode_interval(&self, dt: f64) -> Vec<f64> {
        assert!(dt >= 0.0, "negative time interval {dt}: events replayed out of order");
        let mut g = Graph::new();
        let w = g.constant(Tensor::row_vector(self.frequencies.clone()));
        let b = g.constant(Tensor::row_vector(self.phases.clone()));
        let out = encode_on_graph(&mut g, w, b, &[dt]);
        g.value(out).data().to_vec()
    }
}

/// Time encoder living in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimeEncoder {
    pub frequencies: ParamId,
    pub phases: ParamId,
    pub dim: usize,
}

impl TimeEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        let init = TimeEncoderParams::initial(dim);
        TimeEncoder {
            frequencies: store.add(format!("{prefix}.w"), Tensor::row_vector(init.frequencies)),
            phases: store.add(format!("{prefix}.b"), Tensor::row_vector(init.phases)),
            dim,
        }
    }

    pub fn params(&self, store: &ParamStore) -> TimeEncoderParams {
        TimeEncoderParams::new(
            store.get(self.frequencies).data().to_vec(),
            store.get(self.phases).data().to_vec(),
        )
    }

    /// Encodes a batch of intervals (rows). With `disabled`, returns zeros
    /// that carry no dependence on the encoder parameters.
    pub fn forward(&self, g: &mut Graph, p: &Bound, intervals: &[f64], disabled: bool) -> Var {
        if let Some(&bad) = intervals.iter().find(|&&dt| dt < 0.0) {
            panic!("negative time interval {bad}: events replayed out of order");
        }
        if disabled {
            return g.constant_shared(Arc::new(Tensor::zeros(intervals.len(), self.dim)));
        }
        encode_on_graph(g, p.var(self.frequencies), p.var(self.phases), intervals)
    }
}

#[cfg(test)]
mod tests {
    use std::f64::consts::{FRAC_1_SQRT_2, PI};

    use super::*;

    #[test]
    fn zero_interval_zero_params() {
        let p = TimeEncoderParams::new(vec![0.0, 0.0], vec![0.0, 0.0]);
        let v = p.encode_interval(0.0);
        assert_eq!(v.len(), 4);
        for (a, b) in v.iter().zip([FRAC_1_SQRT_2, 0.0, FRAC_1_SQRT_2, 0.0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn quarter_period() {
        let p = TimeEncoderParams::new(vec![PI / 2.0], vec![0.0]);
        let v = p.encode_interval(1.0);
        assert!(v[0].abs() < 1e-15);
        assert!((v[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn unit_norm_at_init() {
        let p = TimeEncoderParams::initial(16);
        for dt in [0.0, 0.5, 3.0, 365.0, 1e5] {
            let n: f64 = p.encode_interval(dt).iter().map(|x| x * x).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_spaced_frequencies() {
        let f = initial_frequencies(6);
        assert_eq!(f.len(), 3);
        assert_eq!(f[0], 1.0);
        assert!((f[1] - 1e-3).abs() < 1e-18);
        assert!((f[2] - 1e-6).abs() < 1e-21);
    }

    #[test]
    #[should_panic(expected = "negative time interval")]
    fn negative_interval_panics() {
        TimeEncoderParams::initial(4).encode_interval(-1.0);
    }
}
