//! Chronological mini-batch training with early stopping.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::corpus::time::SECONDS_PER_DAY;
use crate::corpus::{split_events, Dataset, EventItem, LabelIndex};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, EvalOptions, MetricAt, MetricReport, Predictor, Span};
use crate::fusion::{company_logits, InteractionHistory, LeafContext};
use crate::memory::MemoryState;
use crate::model::{Ablations, Aggregation, Model, ModelConfig};
use crate::nn::{Adam, Dropout, ParamStore};
use crate::replay::{apply_update, encode_batch, BatchUpdate};

/// Probability clamp of the cross-entropy.
pub const LOSS_EPS: f64 = 1e-7;

const DROPOUT_STREAM: u64 = 1;
const NEGATIVE_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    /// Length of the label window in days.
    pub window_days: f64,
    pub ablations: Ablations,
    pub aggregation: Aggregation,
    /// Keep memories from one epoch to the next instead of starting each
    /// epoch from zero.
    pub persist_memory: bool,
    /// Sample this many negatives per positive instead of summing the loss
    /// over every leaf.
    pub negatives_per_positive: Option<usize>,
    /// Validation metric used for model selection and early stopping.
    pub selection_metric: MetricAt,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 200,
            learning_rate: 1e-4,
            max_epochs: 300,
            patience: 10,
            hidden_dim: 64,
            dropout: 0.1,
            window_days: 365.0,
            ablations: Ablations::NONE,
            aggregation: Aggregation::Mean,
            persist_memory: false,
            negatives_per_positive: None,
            selection_metric: MetricAt::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.window_days > 0.0 && self.window_days.is_finite()) {
            return bad("window_days must be positive");
        }
        if self.hidden_dim < 2 || self.hidden_dim % 2 != 0 {
            return bad("hidden_dim must be even and at least 2");
        }
        if self.negatives_per_positive == Some(0) {
            return bad("negatives_per_positive must be positive when set");
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            hidden_dim: self.hidden_dim,
            aggregation: self.aggregation,
            ablations: self.ablations,
            ..Default::default()
        }
    }

    pub fn window_seconds(&self) -> f64 {
        self.window_days * SECONDS_PER_DAY
    }
}

/// Summed binary cross-entropy of probabilities against `{0,1}` labels,
/// with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn loss(scores: &[f64], labels: &[f64]) -> f64 {
    assert_eq!(scores.len(), labels.len(), "scores and labels must align");
    let logits: Vec<f64> = scores.iter().map(|&p| (p / (1.0 - p)).ln()).collect();
    let mut g = Graph::new();
    let x = g.constant(Tensor::column(logits));
    let l = g.bce_with_logits(x, Arc::new(labels.to_vec()), LOSS_EPS);
    g.value(l).data()[0]
}

/// What a batch's loss is computed against.
#[derive(Clone, Copy, Debug)]
pub struct LabelSource<'a> {
    pub index: &'a LabelIndex,
    pub window: f64,
    pub negatives_per_positive: Option<usize>,
}

/// Records one batch: memory updates, scores of the batch's companies and
/// their summed loss. `history` must already contain the batch.
pub(crate) fn record_batch(
    model: &Model,
    g: &mut Graph,
    p: &crate::nn::Bound,
    mem: &MemoryState,
    history: &InteractionHistory,
    items: &[EventItem],
    labels: LabelSource,
    dropout: &mut Option<Dropout>,
    negative_rng: &mut ChaCha8Rng,
) -> (Var, usize, BatchUpdate) {
    let n = model.leaves();
    let update = encode_batch(model, g, p, mem, items);
    let plan = &update.plan;
    let base = g.constant(mem.leaf.clone());
    let leaf = g.replace_rows(base, update.leaf, plan.leaves.targets.clone());
    let mut nodes: Vec<Var> = mem.nodes.iter().map(|t| g.constant(t.clone())).collect();
    for (i, groups) in plan.levels.iter().enumerate() {
        nodes[i] = g.replace_rows(nodes[i], update.nodes[i], groups.targets.clone());
    }
    let ctx = LeafContext::new(model, g, p, leaf, &nodes, dropout);
    let mut total: Option<Var> = None;
    let mut elements = 0;
    for (k, &c) in plan.companies.targets.iter().enumerate() {
        let memory = g.gather(update.company, vec![k]);
        let beta = history.interacted_mask(c, n);
        let gamma = history.current_mask(c, n);
        let logits = company_logits(model, g, p, &ctx, c, memory, &beta, &gamma, dropout);
        let window = labels.index.window(c, plan.companies.times[k], labels.window);
        let dense = window.dense(n);
        let (logits, targets) = match labels.negatives_per_positive {
            None => (logits, dense),
            Some(ratio) => {
                let negatives: Vec<usize> = (0..n).filter(|j| !window.positives.contains(j)).collect();
                let want = (ratio * window.positives.len().max(1)).min(negatives.len());
                let mut rows: Vec<usize> = window.positives.iter().copied().collect();
                let mut picked: Vec<usize> =
                    sample(negative_rng, negatives.len(), want).into_iter().map(|i| negatives[i]).collect();
                picked.sort_unstable();
                rows.extend(picked);
                let targets = rows.iter().map(|&j| dense[j]).collect();
                (g.gather(logits, rows), targets)
            }
        };
        elements += targets.len();
        let l = g.bce_with_logits(logits, Arc::new(targets), LOSS_EPS);
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l),
        });
    }
    (total.expect("a batch has at least one company"), elements, update)
}

/// Loss and per-parameter gradients of one batch, without touching the
/// parameters or `mem`. Dropout is off.
pub fn batch_gradients(
    model: &Model,
    mem: &MemoryState,
    history: &InteractionHistory,
    items: &[EventItem],
    labels: LabelSource,
) -> (f64, Vec<Option<Tensor>>) {
    let mut history = history.clone();
    history.begin_batch(items);
    let mut g = Graph::new();
    let p = model.store.bind(&mut g);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (loss, _, _) = record_batch(model, &mut g, &p, mem, &history, items, labels, &mut None, &mut rng);
    let grads = g.backward(loss);
    (g.value(loss).data()[0], p.gradients(&grads))
}

/// Loss of one batch (no gradients, no dropout).
pub fn batch_loss(
    model: &Model,
    mem: &MemoryState,
    history: &InteractionHistory,
    items: &[EventItem],
    labels: LabelSource,
) -> f64 {
    let mut history = history.clone();
    history.begin_batch(items);
    let mut g = Graph::new();
    let p = model.store.bind(&mut g);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (loss, _, _) = record_batch(model, &mut g, &p, mem, &history, items, labels, &mut None, &mut rng);
    g.value(loss).data()[0]
}

/// Everything that changes while training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: Adam,
    pub epoch: usize,
    pub best_epoch: usize,
    pub best_metric: f64,
    /// Parameters of the best epoch so far.
    pub best_params: ParamStore,
    /// Memories at the end of the best epoch's training pass.
    pub best_memory: MemoryState,
    pub memory: MemoryState,
    pub history: InteractionHistory,
    pub log: Vec<EpochLog>,
    dropout_rng: ChaCha8Rng,
    negative_rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(dataset: &Dataset, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model_config(), dataset.taxonomy.clone(), dataset.company_count(), config.seed)?;
        let optimizer = Adam::new(&model.store, config.learning_rate);
        let memory = MemoryState::for_model(&model, dataset.origin);
        Ok(TrainState {
            optimizer,
            epoch: 0,
            best_epoch: 0,
            best_metric: f64::NEG_INFINITY,
            best_params: model.store.clone(),
            best_memory: memory.clone(),
            history: InteractionHistory::new(model.companies),
            memory,
            model,
            log: Vec::new(),
            dropout_rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(DROPOUT_STREAM)),
            negative_rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(NEGATIVE_STREAM)),
        })
    }

    /// The model with the best parameters.
    pub fn best_model(&self) -> Model {
        Model {
            store: self.best_params.clone(),
            ..self.model.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(rename = "val_recall@10")]
    pub val_recall_at_10: f64,
    pub wall_seconds: f64,
}

/// Training items (events strictly before the end of the training span).
pub fn training_items(dataset: &Dataset) -> Result<Vec<EventItem>> {
    let s = dataset.splits()?;
    let items = split_events(dataset.events_before(s.train_end));
    if items.is_empty() {
        return Err(Error::Data("the training span has no events".into()));
    }
    Ok(items)
}

/// One pass over `items`; returns the mean per-element loss.
pub fn train_epoch(
    state: &mut TrainState,
    items: &[EventItem],
    labels: &LabelIndex,
    config: &TrainConfig,
) -> Result<f64> {
    let mut total = 0.0;
    let mut elements = 0usize;
    let source = LabelSource {
        index: labels,
        window: config.window_seconds(),
        negatives_per_positive: config.negatives_per_positive,
    };
    for chunk in items.chunks(config.batch_size) {
        state.history.begin_batch(chunk);
        let mut g = Graph::new();
        let p = state.model.store.bind(&mut g);
        let mut dropout = (config.dropout > 0.0).then(|| Dropout {
            rate: config.dropout,
            rng: &mut state.dropout_rng,
        });
        let (loss, count, update) = record_batch(
            &state.model,
            &mut g,
            &p,
            &state.memory,
            &state.history,
            chunk,
            source,
            &mut dropout,
            &mut state.negative_rng,
        );
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            let ids: Vec<&str> = chunk.iter().map(|it| it.patent_id.as_str()).collect();
            return Err(Error::Numeric(format!(
                "non-finite loss {value} in epoch {} on a batch of {} items from {} to {} (patents {:?})",
                state.epoch + 1,
                chunk.len(),
                chunk[0].timestamp,
                chunk[chunk.len() - 1].timestamp,
                ids
            )));
        }
        let grads = g.backward(loss);
        let grads = p.gradients(&grads);
        apply_update(&g, &update, &mut state.memory);
        drop(g);
        state.optimizer.step(&mut state.model.store, &grads);
        total += value;
        elements += count;
    }
    state.history.clear_current();
    Ok(total / elements.max(1) as f64)
}

/// Validation report of the current parameters.
pub fn validate(model: &Model, dataset: &Dataset, config: &TrainConfig) -> Result<MetricReport> {
    let mut ks = vec![10, config.selection_metric.k];
    ks.sort_unstable();
    ks.dedup();
    let opts = EvalOptions {
        span: Span::Val,
        ks,
        warmup: true,
        level: None,
        batch_size: config.batch_size,
    };
    evaluate(Predictor::Model(model), dataset, &opts)
}

/// Trains with early stopping on the validation span. `on_epoch` sees
/// each epoch's log line as it is produced.
pub fn fit_with(dataset: &Dataset, config: &TrainConfig, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainState> {
    let mut state = TrainState::new(dataset, config)?;
    if config.max_epochs == 0 {
        return Ok(state);
    }
    let s = dataset.splits()?;
    let items = training_items(dataset)?;
    let labels = LabelIndex::new(dataset.company_count(), dataset.events_before(s.train_end));
    let mut stale = 0;
    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        if config.persist_memory {
            // memory vectors carry over; elapsed times restart with the replay
            let origin = dataset.origin;
            state.memory.company_seen.iter_mut().for_each(|t| *t = origin);
            state.memory.leaf_seen.iter_mut().for_each(|t| *t = origin);
            state.memory.node_seen.iter_mut().flatten().for_each(|t| *t = origin);
        } else {
            state.memory = MemoryState::for_model(&state.model, dataset.origin);
            state.history = InteractionHistory::new(state.model.companies);
        }
        let train_loss = train_epoch(&mut state, &items, &labels, config)?;
        state.epoch = epoch;
        let report = validate(&state.model, dataset, config)?;
        let metric = report.get(config.selection_metric).expect("selection metric evaluated");
        let entry = EpochLog {
            epoch,
            train_loss,
            val_recall_at_10: report.recall[&10],
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        state.log.push(entry);
        if metric > state.best_metric {
            state.best_metric = metric;
            state.best_epoch = epoch;
            state.best_params = state.model.store.clone();
            state.best_memory = state.memory.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    Ok(state)
}

pub fn fit(dataset: &Dataset, config: &TrainConfig) -> Result<TrainState> {
    fit_with(dataset, config, |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synthesize, SynthConfig};

    #[test]
    fn loss_examples() {
        let n = 7;
        let half = loss(&vec![0.5; n], &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
        assert!((half - n as f64 * 2f64.ln()).abs() < 1e-12);
        let exact = loss(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]);
        assert!(exact < 1e-6);
        let v = loss(&[0.9, 0.1], &[1.0, 0.0]);
        assert!((v + 2.0 * 0.9f64.ln()).abs() < 1e-12);
        assert!((v - 0.2107).abs() < 1e-4);
        // clamping keeps the worst case finite
        let worst = loss(&[0.0, 1.0], &[1.0, 0.0]);
        assert!((worst + 2.0 * 1e-7f64.ln()).abs() < 1e-6);
    }

    fn small() -> Dataset {
        let cfg = SynthConfig {
            companies: 4,
            branching: vec![2, 2, 2],
            events_per_company_year: 4,
            ..Default::default()
        };
        synthesize(&cfg, 3).unwrap().dataset
    }

    fn config() -> TrainConfig {
        TrainConfig {
            hidden_dim: 4,
            batch_size: 8,
            dropout: 0.0,
            learning_rate: 1e-3,
            max_epochs: 2,
            ..Default::default()
        }
    }

    #[test]
    fn full_batch_means_one_step_per_epoch() {
        let ds = small();
        let mut cfg = config();
        let items = training_items(&ds).unwrap();
        cfg.batch_size = items.len();
        let mut state = TrainState::new(&ds, &cfg).unwrap();
        let labels = LabelIndex::new(ds.company_count(), ds.events_before(ds.splits().unwrap().train_end));
        train_epoch(&mut state, &items, &labels, &cfg).unwrap();
        assert_eq!(state.optimizer.step, 1);
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let ds = small();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..config()
        };
        let mut state = TrainState::new(&ds, &cfg).unwrap();
        let before = state.model.store.clone();
        let items = training_items(&ds).unwrap();
        let labels = LabelIndex::new(ds.company_count(), ds.events_before(ds.splits().unwrap().train_end));
        train_epoch(&mut state, &items, &labels, &cfg).unwrap();
        for id in before.ids() {
            assert_eq!(before.get(id), state.model.store.get(id));
        }
    }

    #[test]
    fn zero_epochs_returns_initial_state() {
        let ds = small();
        let cfg = TrainConfig {
            max_epochs: 0,
            ..config()
        };
        let state = fit(&ds, &cfg).unwrap();
        let fresh = TrainState::new(&ds, &cfg).unwrap();
        assert_eq!(state.epoch, 0);
        for id in fresh.model.store.ids() {
            assert_eq!(fresh.model.store.get(id), state.best_params.get(id));
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let ds = small();
        let cfg = TrainConfig {
            dropout: 0.2,
            negatives_per_positive: Some(2),
            ..config()
        };
        let a = fit(&ds, &cfg).unwrap();
        let b = fit(&ds, &cfg).unwrap();
        let strip = |s: &TrainState| s.log.iter().map(|e| (e.train_loss, e.val_recall_at_10)).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
        assert_eq!(a.best_epoch, b.best_epoch);
    }

    #[test]
    fn persisted_memory_trains() {
        let ds = small();
        let cfg = TrainConfig {
            persist_memory: true,
            ..config()
        };
        let s = fit(&ds, &cfg).unwrap();
        assert!(s.log.iter().all(|e| e.train_loss.is_finite()));
    }

    #[test]
    fn all_ablations_still_train() {
        let ds = small();
        let cfg = TrainConfig {
            ablations: "mi,sif,hmp,tie".parse().unwrap(),
            ..config()
        };
        let s = fit(&ds, &cfg).unwrap();
        assert_eq!(s.log.len(), 2);
        assert!(s.log.iter().all(|e| e.train_loss.is_finite()));
    }

    #[test]
    fn invalid_config() {
        for cfg in [
            TrainConfig {
                batch_size: 0,
                ..config()
            },
            TrainConfig {
                patience: 0,
                ..config()
            },
            TrainConfig {
                dropout: 1.0,
                ..config()
            },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }
}
