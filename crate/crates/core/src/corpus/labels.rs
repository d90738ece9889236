//! Ground-truth label windows.

use std::collections::BTreeSet;

use super::events::{Dataset, Event};

/// Codes a company applies for in `(anchor_time, anchor_time + window]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelWindow {
    pub company: usize,
    pub anchor_time: f64,
    pub window: f64,
    pub positives: BTreeSet<usize>,
}

impl LabelWindow {
    /// Dense `{0,1}^n` target vector.
    pub fn dense(&self, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        for &j in &self.positives {
            v[j] = 1.0;
        }
        v
    }
}

/// Per-company event timelines for fast window queries.
#[derive(Clone, Debug)]
pub struct LabelIndex {
    /// `timelines[c]` is `(timestamp, event index)` in time order.
    timelines: Vec<Vec<(f64, usize)>>,
    codes: Vec<Vec<usize>>,
}

impl LabelIndex {
    pub fn new(company_count: usize, events: &[Event]) -> Self {
        let mut timelines = vec![Vec::new(); company_count];
        for (k, e) in events.iter().enumerate() {
            for &c in &e.companies {
                timelines[c].push((e.timestamp, k));
            }
        }
        LabelIndex {
            timelines,
            codes: events.iter().map(|e| e.codes.clone()).collect(),
        }
    }

    /// Union of codes over the company's events with `lo < t <= hi`.
    pub fn positives_in(&self, company: usize, lo: f64, hi: f64) -> BTreeSet<usize> {
        let tl = &self.timelines[company];
        let start = tl.partition_point(|&(t, _)| t <= lo);
        tl[start..]
            .iter()
            .take_while(|&&(t, _)| t <= hi)
            .flat_map(|&(_, k)| self.codes[k].iter().copied())
            .collect()
    }

    /// Union of codes over the company's events with `start <= t < end`.
    pub fn positives_in_span(&self, company: usize, start: f64, end: f64) -> BTreeSet<usize> {
        let tl = &self.timelines[company];
        let a = tl.partition_point(|&(t, _)| t < start);
        tl[a..]
            .iter()
            .take_while(|&&(t, _)| t < end)
            .flat_map(|&(_, k)| self.codes[k].iter().copied())
            .collect()
    }

    pub fn window(&self, company: usize, anchor_time: f64, window: f64) -> LabelWindow {
        LabelWindow {
            company,
            anchor_time,
            window,
            positives: self.positives_in(company, anchor_time, anchor_time + window),
        }
    }
}

/// One label window per `(company, anchor)` pair.
pub fn build_labels(dataset: &Dataset, anchors: &[(usize, f64)], window: f64) -> Vec<LabelWindow> {
    let index = LabelIndex::new(dataset.company_count(), &dataset.events);
    anchors.iter().map(|&(c, t)| index.window(c, t, window)).collect()
}
