//! Synthetic corpora with planted, slowly drifting company preferences.
//!
//! Every company is assigned a handful of subtrees (nodes one level above
//! the leaves) and a private weighting of the leaves inside them. Each year
//! the company focuses on one of its subtrees; with probability `drift` the
//! focus rotates to the next subtree at the start of a year. Subtree choice
//! per event follows `exp(-concentration * rank)`, so the current focus
//! dominates as `concentration` grows and is used exclusively in the limit.
//! A uniform noise draw with probability `noise / (1 + concentration)`
//! keeps the global code distribution from being degenerate.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use super::events::{Dataset, Event, Splits};
use super::taxonomy::{Taxonomy, TaxonomyRecord};
use super::time::year_start;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub companies: usize,
    /// Children per node, level by level; the first entry is the number of
    /// level-1 roots.
    pub branching: Vec<usize>,
    pub start_year: i32,
    pub years: usize,
    pub events_per_company_year: usize,
    pub subtrees_per_company: usize,
    pub concentration: f64,
    pub drift: f64,
    pub noise: f64,
    pub co_applicant_prob: f64,
    pub max_codes_per_event: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            companies: 20,
            branching: vec![2, 5, 5],
            start_year: 2010,
            years: 5,
            events_per_company_year: 20,
            subtrees_per_company: 3,
            concentration: 2.0,
            drift: 0.5,
            noise: 0.1,
            co_applicant_prob: 0.1,
            max_codes_per_event: 3,
        }
    }
}

/// Planted preferences of one company, for diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompanyPreference {
    pub company: String,
    /// Subtree ids in the company's base ranking.
    pub subtrees: Vec<String>,
    /// Focused subtree id per simulated year.
    pub focus_by_year: Vec<(i32, String)>,
    /// `(leaf id, weight)` within the company's subtrees.
    pub leaf_weights: Vec<(String, f64)>,
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub dataset: Dataset,
    pub preferences: Vec<CompanyPreference>,
}

fn pad(n: usize) -> usize {
    n.saturating_sub(1).to_string().len()
}

/// Builds the regular taxonomy described by `branching`.
pub fn regular_taxonomy(branching: &[usize]) -> Result<Taxonomy> {
    if branching.is_empty() || branching.contains(&0) {
        return Err(Error::Config(format!("branching {branching:?} yields no leaves")));
    }
    let mut records = Vec::new();
    let mut frontier: Vec<String> = Vec::new();
    for (l, &b) in branching.iter().enumerate() {
        let w = pad(b);
        let mut next = Vec::new();
        if l == 0 {
            for i in 0..b {
                let id = format!("C{i:0w$}");
                records.push(TaxonomyRecord {
                    id: id.clone(),
                    parent: None,
                    level: 1,
                });
                next.push(id);
            }
        } else {
            for p in &frontier {
                for i in 0..b {
                    let id = format!("{p}-{i:0w$}");
                    records.push(TaxonomyRecord {
                        id: id.clone(),
                        parent: Some(p.clone()),
                        level: l + 1,
                    });
                    next.push(id);
                }
            }
        }
        frontier = next;
    }
    Taxonomy::from_records(&records)
}

fn weighted_index(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if x < w {
            return i;
        }
        x -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Generates a corpus deterministically from `seed`.
pub fn synthesize(config: &SynthConfig, seed: u64) -> Result<SynthOutput> {
    if config.branching.len() < 2 {
        return Err(Error::Config("synthetic taxonomy needs at least two levels".into()));
    }
    if config.years < 3 {
        return Err(Error::Config("need at least three years for train/validation/test".into()));
    }
    if config.companies == 0 || config.events_per_company_year == 0 || config.max_codes_per_event == 0 {
        return Err(Error::Config("companies, events per year and codes per event must be positive".into()));
    }
    if config.subtrees_per_company == 0 {
        return Err(Error::Config("subtrees_per_company must be positive".into()));
    }
    if !(0.0..=1.0).contains(&config.drift) || !(0.0..=1.0).contains(&config.co_applicant_prob) {
        return Err(Error::Config("drift and co_applicant_prob are probabilities".into()));
    }
    if config.concentration < 0.0 || config.noise < 0.0 {
        return Err(Error::Config("concentration and noise must be non-negative".into()));
    }
    let taxonomy = Arc::new(regular_taxonomy(&config.branching)?);
    let depth = taxonomy.depth();
    let n = taxonomy.leaf_count();
    let sub_level = depth - 1;
    let n_sub = taxonomy.level_size(sub_level);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_sub];
    for j in 0..n {
        members[taxonomy.ancestor(j, sub_level)].push(j);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = config.subtrees_per_company.min(n_sub);
    let rank_weights: Vec<f64> = (0..k)
        .map(|r| {
            if config.concentration.is_infinite() {
                if r == 0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                (-config.concentration * r as f64).exp()
            }
        })
        .collect();
    let noise = if config.concentration.is_infinite() {
        0.0
    } else {
        (config.noise / (1.0 + config.concentration)).min(1.0)
    };
    let cw = pad(config.companies);
    let company_ids: Vec<String> = (0..config.companies).map(|c| format!("co{c:0cw$}")).collect();

    let mut raw: Vec<(f64, Vec<usize>, Vec<usize>)> = Vec::new();
    let mut preferences = Vec::with_capacity(config.companies);
    for (c, cid) in company_ids.iter().enumerate() {
        let mut subtrees: Vec<usize> = (0..n_sub).collect();
        subtrees.shuffle(&mut rng);
        subtrees.truncate(k);
        let mut leaf_w = vec![0.0; n];
        for &s in &subtrees {
            for &j in &members[s] {
                let w: f64 = Exp1.sample(&mut rng);
                leaf_w[j] = w + 0.05;
            }
        }
        let mut offset = 0usize;
        let mut focus_by_year = Vec::new();
        for y in 0..config.years {
            if y > 0 && rng.random::<f64>() < config.drift {
                offset = (offset + 1) % k;
            }
            let year = config.start_year + y as i32;
            let ranking: Vec<usize> = (0..k).map(|r| subtrees[(offset + r) % k]).collect();
            focus_by_year.push((year, taxonomy.node_id(sub_level, ranking[0]).to_string()));
            let (lo, hi) = (year_start(year), year_start(year + 1));
            for _ in 0..config.events_per_company_year {
                let t = (lo + rng.random::<f64>() * (hi - lo)).floor().max(1.0);
                let count = rng.random_range(1..=config.max_codes_per_event);
                let mut codes = BTreeSet::new();
                if rng.random::<f64>() < noise {
                    while codes.len() < count.min(n) {
                        codes.insert(rng.random_range(0..n));
                    }
                } else {
                    let s = ranking[weighted_index(&rank_weights, &mut rng)];
                    let pool = &members[s];
                    let mut w: Vec<f64> = pool.iter().map(|&j| leaf_w[j]).collect();
                    for _ in 0..count.min(pool.len()) {
                        let i = weighted_index(&w, &mut rng);
                        codes.insert(pool[i]);
                        w[i] = 0.0;
                    }
                }
                let mut companies = vec![c];
                if config.companies > 1 && rng.random::<f64>() < config.co_applicant_prob {
                    let mut other = rng.random_range(0..config.companies - 1);
                    if other >= c {
                        other += 1;
                    }
                    companies.push(other);
                    companies.sort_unstable();
                }
                raw.push((t, companies, codes.into_iter().collect()));
            }
        }
        let mut leaf_weights: Vec<(String, f64)> = (0..n)
            .filter(|&j| leaf_w[j] > 0.0)
            .map(|j| (taxonomy.leaf_id(j).to_string(), leaf_w[j]))
            .collect();
        leaf_weights.sort_by(|a, b| a.0.cmp(&b.0));
        preferences.push(CompanyPreference {
            company: cid.clone(),
            subtrees: subtrees.iter().map(|&s| taxonomy.node_id(sub_level, s).to_string()).collect(),
            focus_by_year,
            leaf_weights,
        });
    }
    raw.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)).then_with(|| a.2.cmp(&b.2)));
    let width = pad(raw.len()).max(6);
    let events = raw
        .into_iter()
        .enumerate()
        .map(|(i, (timestamp, companies, codes))| Event {
            patent_id: format!("P{i:0width$}"),
            companies,
            codes,
            timestamp,
        })
        .collect();
    let end = config.start_year + config.years as i32;
    let splits = Splits::new(year_start(end - 2), year_start(end - 1), year_start(end))?;
    let mut dataset = Dataset::new(events, company_ids, taxonomy).with_splits(splits);
    dataset.origin = year_start(config.start_year);
    Ok(SynthOutput { dataset, preferences })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_count_is_product_of_branching() {
        let cfg = SynthConfig {
            companies: 20,
            branching: vec![2, 5, 5],
            ..Default::default()
        };
        let out = synthesize(&cfg, 1).unwrap();
        assert_eq!(out.dataset.leaf_count(), 50);
        assert_eq!(out.dataset.taxonomy.depth(), 3);
        assert_eq!(out.dataset.company_count(), 20);
        assert_eq!(out.dataset.events.len(), 20 * 5 * 20);
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = SynthConfig::default();
        let a = synthesize(&cfg, 7).unwrap();
        let b = synthesize(&cfg, 7).unwrap();
        assert_eq!(a.dataset.events, b.dataset.events);
        assert_eq!(a.preferences, b.preferences);
        let c = synthesize(&cfg, 8).unwrap();
        assert_ne!(a.dataset.events, c.dataset.events);
    }

    #[test]
    fn infinite_concentration_uses_only_the_focus_subtree() {
        let cfg = SynthConfig {
            concentration: f64::INFINITY,
            ..Default::default()
        };
        let out = synthesize(&cfg, 3).unwrap();
        let ds = &out.dataset;
        let tax = &ds.taxonomy;
        for e in &ds.events {
            let year = super::super::time::year_of(e.timestamp);
            // the first listed company is the one whose preferences drew the codes
            // unless a co-applicant was added; check that some applicant's focus matches
            let ok = e.companies.iter().any(|&c| {
                let focus = &out.preferences[c].focus_by_year.iter().find(|(y, _)| *y == year).unwrap().1;
                e.codes.iter().all(|&j| tax.ancestor_chain(j).last().unwrap() == focus)
            });
            assert!(ok, "event {} strays from the focus subtree", e.patent_id);
        }
    }

    #[test]
    fn zero_branching_is_a_config_error() {
        let cfg = SynthConfig {
            branching: vec![2, 0, 5],
            ..Default::default()
        };
        assert!(matches!(synthesize(&cfg, 0), Err(Error::Config(_))));
    }
}
