//! Ranking metrics, frequency baselines and the evaluation protocol.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{split_events, Dataset, Event, LabelIndex, Taxonomy};
use crate::error::{Error, Result};
use crate::fusion::{score_logits, InteractionHistory};
use crate::memory::MemoryState;
use crate::model::Model;
use crate::replay::replay;

pub const DEFAULT_KS: [usize; 4] = [10, 20, 30, 40];

/// Indices sorted by descending score; ties by ascending index.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Scores of one company with the head of its ranking.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedPrediction {
    pub company: usize,
    pub scores: Vec<f64>,
    pub topk: Vec<usize>,
}

impl RankedPrediction {
    pub fn new(company: usize, scores: Vec<f64>, k_max: usize) -> Self {
        let mut topk = rank_descending(&scores);
        topk.truncate(k_max);
        RankedPrediction { company, scores, topk }
    }

    fn head(&self, k: usize) -> &[usize] {
        assert!(
            k <= self.topk.len() || self.topk.len() == self.scores.len(),
            "K = {k} exceeds the {} ranked entries",
            self.topk.len()
        );
        &self.topk[..k.min(self.topk.len())]
    }

    fn hits(&self, truth: &BTreeSet<usize>, k: usize) -> usize {
        self.head(k).iter().filter(|j| truth.contains(j)).count()
    }
}

/// `None` when `truth` is empty (such companies are left out of averages).
pub fn recall_at_k(pred: &RankedPrediction, truth: &BTreeSet<usize>, k: usize) -> Option<f64> {
    if truth.is_empty() {
        return None;
    }
    Some(pred.hits(truth, k) as f64 / truth.len() as f64)
}

pub fn ndcg_at_k(pred: &RankedPrediction, truth: &BTreeSet<usize>, k: usize) -> Option<f64> {
    if truth.is_empty() {
        return None;
    }
    let dcg: f64 = pred
        .head(k)
        .iter()
        .enumerate()
        .filter(|(_, j)| truth.contains(j))
        .map(|(r, _)| 1.0 / ((r + 2) as f64).log2())
        .sum();
    let ideal: f64 = (0..k.min(truth.len())).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
    Some(dcg / ideal)
}

/// Share of companies with at least one hit in their top `k`. Companies
/// with empty truth are skipped.
pub fn phr_at_k(preds: &[RankedPrediction], truths: &[BTreeSet<usize>], k: usize) -> Result<f64> {
    assert_eq!(preds.len(), truths.len(), "predictions and truths must align");
    let mut hit = 0usize;
    let mut n = 0usize;
    for (p, t) in preds.iter().zip(truths) {
        if t.is_empty() {
            continue;
        }
        n += 1;
        if p.hits(t, k) > 0 {
            hit += 1;
        }
    }
    if n == 0 {
        return Err(Error::Data("no company has a nonempty truth set".into()));
    }
    Ok(hit as f64 / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Span {
    Val,
    Test,
}

impl FromStr for Span {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "val" | "validation" => Ok(Span::Val),
            "test" => Ok(Span::Test),
            other => Err(Error::Config(format!("unknown span `{other}` (expected val or test)"))),
        }
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Span::Val => "val",
            Span::Test => "test",
        })
    }
}

/// Which ranking metric a single number refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Recall,
    Ndcg,
    Phr,
}

/// A metric at a cutoff, written like `recall@10`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MetricAt {
    pub kind: MetricKind,
    pub k: usize,
}

impl Default for MetricAt {
    fn default() -> Self {
        MetricAt {
            kind: MetricKind::Recall,
            k: 10,
        }
    }
}

impl FromStr for MetricAt {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("metric `{s}` is not of the form recall@K, ndcg@K or phr@K"));
        let (name, k) = s.split_once('@').ok_or_else(bad)?;
        let kind = match name.trim().to_ascii_lowercase().as_str() {
            "recall" => MetricKind::Recall,
            "ndcg" => MetricKind::Ndcg,
            "phr" => MetricKind::Phr,
            _ => return Err(bad()),
        };
        let k: usize = k.trim().parse().map_err(|_| bad())?;
        if k == 0 {
            return Err(bad());
        }
        Ok(MetricAt { kind, k })
    }
}

impl fmt::Display for MetricAt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.kind {
            MetricKind::Recall => "recall",
            MetricKind::Ndcg => "ndcg",
            MetricKind::Phr => "phr",
        };
        write!(f, "{name}@{}", self.k)
    }
}

impl Serialize for MetricAt {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MetricAt {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub span: String,
    #[serde(rename = "Ks")]
    pub ks: Vec<usize>,
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub phr: BTreeMap<usize, f64>,
    #[serde(rename = "N")]
    pub n: usize,
}

impl MetricReport {
    pub fn compute(span: &str, preds: &[RankedPrediction], truths: &[BTreeSet<usize>], ks: &[usize]) -> Result<Self> {
        assert_eq!(preds.len(), truths.len(), "predictions and truths must align");
        let kept: Vec<usize> = (0..truths.len()).filter(|&i| !truths[i].is_empty()).collect();
        if kept.is_empty() {
            return Err(Error::Data(format!("no company has codes in the {span} span")));
        }
        let mean = |f: &dyn Fn(usize) -> f64| kept.iter().map(|&i| f(i)).sum::<f64>() / kept.len() as f64;
        let mut report = MetricReport {
            span: span.to_string(),
            ks: ks.to_vec(),
            recall: BTreeMap::new(),
            ndcg: BTreeMap::new(),
            phr: BTreeMap::new(),
            n: kept.len(),
        };
        for &k in ks {
            report
                .recall
                .insert(k, mean(&|i| recall_at_k(&preds[i], &truths[i], k).expect("nonempty")));
            report.ndcg.insert(k, mean(&|i| ndcg_at_k(&preds[i], &truths[i], k).expect("nonempty")));
            report.phr.insert(k, phr_at_k(preds, truths, k)?);
        }
        Ok(report)
    }

    pub fn get(&self, metric: MetricAt) -> Option<f64> {
        let table = match metric.kind {
            MetricKind::Recall => &self.recall,
            MetricKind::Ndcg => &self.ndcg,
            MetricKind::Phr => &self.phr,
        };
        table.get(&metric.k).copied()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("span,k,recall,ndcg,phr,n\n");
        for &k in &self.ks {
            out.push_str(&format!(
                "{},{k},{},{},{},{}\n",
                self.span, self.recall[&k], self.ndcg[&k], self.phr[&k], self.n
            ));
        }
        out
    }
}

fn patent_counts<'a>(events: impl IntoIterator<Item = &'a Event>, n: usize) -> Vec<u64> {
    let mut counts = vec![0u64; n];
    for e in events {
        for &j in &e.codes {
            counts[j] += 1;
        }
    }
    counts
}

/// Global frequency ranking shared by every company.
#[derive(Clone, Debug, PartialEq)]
pub struct TopBaseline {
    pub counts: Vec<u64>,
    k_max: usize,
}

impl TopBaseline {
    pub fn predict(&self, company: usize) -> RankedPrediction {
        RankedPrediction::new(company, self.counts.iter().map(|&c| c as f64).collect(), self.k_max)
    }
}

/// Code frequencies over `events`, counting each patent once per code.
pub fn baseline_top(events: &[Event], leaves: usize, k_max: usize) -> TopBaseline {
    TopBaseline {
        counts: patent_counts(events, leaves),
        k_max,
    }
}

/// Ranks by the company's own code frequencies, then by global frequency.
/// A company without events gets the global ranking.
pub fn baseline_personal_top(events: &[Event], company: usize, leaves: usize, k_max: usize) -> RankedPrediction {
    let global = patent_counts(events, leaves);
    let own = patent_counts(events.iter().filter(|e| e.companies.contains(&company)), leaves);
    personal_prediction(company, &global, &own, k_max)
}

fn personal_prediction(company: usize, global: &[u64], own: &[u64], k_max: usize) -> RankedPrediction {
    let base = global.iter().copied().max().unwrap_or(0) as f64 + 1.0;
    let scores = global
        .iter()
        .zip(own)
        .map(|(&g, &o)| o as f64 * base + g as f64)
        .collect();
    RankedPrediction::new(company, scores, k_max)
}

/// Per-company frequency rankings for every company at once.
pub fn personal_top_all(events: &[Event], companies: usize, leaves: usize, k_max: usize) -> Vec<RankedPrediction> {
    let global = patent_counts(events, leaves);
    let mut own: Vec<BTreeMap<usize, u64>> = vec![BTreeMap::new(); companies];
    for e in events {
        for &c in &e.companies {
            for &j in &e.codes {
                *own[c].entry(j).or_insert(0) += 1;
            }
        }
    }
    own.iter()
        .enumerate()
        .map(|(c, counts)| {
            let mut dense = vec![0u64; leaves];
            for (&j, &k) in counts {
                dense[j] = k;
            }
            personal_prediction(c, &global, &dense, k_max)
        })
        .collect()
}

/// Max-pools leaf scores onto level-`level` ancestors.
pub fn pool_to_level(taxonomy: &Taxonomy, scores: &[f64], level: usize) -> Vec<f64> {
    if level == taxonomy.depth() {
        return scores.to_vec();
    }
    let mut out = vec![f64::NEG_INFINITY; taxonomy.level_size(level)];
    for (j, &s) in scores.iter().enumerate() {
        let a = taxonomy.ancestor(j, level);
        if s > out[a] {
            out[a] = s;
        }
    }
    out
}

pub fn truth_to_level(taxonomy: &Taxonomy, truth: &BTreeSet<usize>, level: usize) -> BTreeSet<usize> {
    if level == taxonomy.depth() {
        return truth.clone();
    }
    truth.iter().map(|&j| taxonomy.ancestor(j, level)).collect()
}

/// Time boundaries of one evaluation: memories and baselines see events
/// before `history_end`; truth comes from `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpanBounds {
    pub history_end: f64,
    pub start: f64,
    pub end: f64,
}

pub fn span_bounds(dataset: &Dataset, span: Span, warmup: bool) -> Result<SpanBounds> {
    let s = dataset.splits()?;
    Ok(match span {
        Span::Val => SpanBounds {
            history_end: s.train_end,
            start: s.train_end,
            end: s.val_end,
        },
        Span::Test => SpanBounds {
            history_end: if warmup { s.val_end } else { s.train_end },
            start: s.val_end,
            end: s.test_end,
        },
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub span: Span,
    pub ks: Vec<usize>,
    pub warmup: bool,
    /// Taxonomy level to evaluate at; `None` means the leaves.
    pub level: Option<usize>,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            span: Span::Val,
            ks: DEFAULT_KS.to_vec(),
            warmup: true,
            level: None,
            batch_size: 200,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Predictor<'a> {
    Model(&'a Model),
    Top,
    PersonalTop,
}

/// Memories and interaction history after replaying every event before
/// `end` from zero.
pub fn replay_until(model: &Model, dataset: &Dataset, end: f64, batch_size: usize) -> (MemoryState, InteractionHistory) {
    let mut mem = MemoryState::for_model(model, dataset.origin);
    let mut history = InteractionHistory::new(model.companies);
    let items = split_events(dataset.events_before(end));
    replay(model, &mut mem, Some(&mut history), &items, batch_size);
    (mem, history)
}

/// Leaf scores for every company after the replay up to `end`.
pub fn all_scores(predictor: Predictor, dataset: &Dataset, end: f64, batch_size: usize) -> Vec<Vec<f64>> {
    let m = dataset.company_count();
    let n = dataset.leaf_count();
    let companies: Vec<usize> = (0..m).collect();
    match predictor {
        Predictor::Model(model) => {
            let (mem, history) = replay_until(model, dataset, end, batch_size);
            score_logits(model, &mem, &history, &companies)
        }
        Predictor::Top => {
            let top = baseline_top(dataset.events_before(end), n, n);
            companies.iter().map(|&c| top.predict(c).scores).collect()
        }
        Predictor::PersonalTop => personal_top_all(dataset.events_before(end), m, n, 1)
            .into_iter()
            .map(|p| p.scores)
            .collect(),
    }
}

/// Runs the evaluation protocol for one span.
pub fn evaluate(predictor: Predictor, dataset: &Dataset, opts: &EvalOptions) -> Result<MetricReport> {
    if opts.ks.is_empty() || opts.ks.contains(&0) {
        return Err(Error::Config("cutoffs must be positive and nonempty".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let tax = &dataset.taxonomy;
    let level = opts.level.unwrap_or(tax.depth());
    if level == 0 || level > tax.depth() {
        return Err(Error::Config(format!("level {level} outside 1..={}", tax.depth())));
    }
    let bounds = span_bounds(dataset, opts.span, opts.warmup)?;
    if dataset.events_between(bounds.start, bounds.end).is_empty() {
        return Err(Error::Data(format!("the {} span has no events", opts.span)));
    }
    let index = LabelIndex::new(dataset.company_count(), &dataset.events);
    let k_max = *opts.ks.iter().max().expect("nonempty");
    let scores = all_scores(predictor, dataset, bounds.history_end, opts.batch_size);
    let mut preds = Vec::with_capacity(scores.len());
    let mut truths = Vec::with_capacity(scores.len());
    for (c, s) in scores.into_iter().enumerate() {
        let truth = index.positives_in_span(c, bounds.start, bounds.end);
        truths.push(truth_to_level(tax, &truth, level));
        preds.push(RankedPrediction::new(c, pool_to_level(tax, &s, level), k_max));
    }
    let label = match opts.level {
        Some(l) if l != tax.depth() => format!("{}@level{l}", opts.span),
        _ => opts.span.to_string(),
    };
    MetricReport::compute(&label, &preds, &truths, &opts.ks)
}
