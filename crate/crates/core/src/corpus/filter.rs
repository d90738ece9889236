//! Company filtering against the split boundaries.

use serde::{Deserialize, Serialize};

use super::events::{Dataset, Event};
use super::time::one_year_before;
use crate::error::{Error, Result};

/// How the recent-activity requirement combines the last training year,
/// the validation year and the test year.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecencyRule {
    /// Active in every one of the three years.
    #[default]
    All,
    /// Active in at least one of the three years.
    Any,
}

/// Keeps companies with history before the last training year and recent
/// activity per `rule`. Events lose dropped co-applicants; events left
/// without any company are removed. Company indices are renumbered.
pub fn filter_companies(dataset: &Dataset, rule: RecencyRule) -> Result<Dataset> {
    let s = dataset.splits()?;
    let last_train_year = one_year_before(s.train_end);
    let m = dataset.company_count();
    let mut history = vec![false; m];
    let mut windows = vec![[false; 3]; m];
    for e in &dataset.events {
        let t = e.timestamp;
        let slot = if t < last_train_year {
            None
        } else if t < s.train_end {
            Some(0)
        } else if t < s.val_end {
            Some(1)
        } else if t < s.test_end {
            Some(2)
        } else {
            continue;
        };
        for &c in &e.companies {
            match slot {
                None => history[c] = true,
                Some(k) => windows[c][k] = true,
            }
        }
    }
    let keep: Vec<bool> = (0..m)
        .map(|c| {
            let recent = match rule {
                RecencyRule::All => windows[c].iter().all(|&b| b),
                RecencyRule::Any => windows[c].iter().any(|&b| b),
            };
            history[c] && recent
        })
        .collect();
    let mut remap = vec![usize::MAX; m];
    let mut company_ids = Vec::new();
    for c in 0..m {
        if keep[c] {
            remap[c] = company_ids.len();
            company_ids.push(dataset.company_ids[c].clone());
        }
    }
    if company_ids.is_empty() {
        return Err(Error::Data(
            "no company survives filtering; loosen the split boundaries or use the `any` recency rule".into(),
        ));
    }
    let events: Vec<Event> = dataset
        .events
        .iter()
        .filter_map(|e| {
            let companies: Vec<usize> = e.companies.iter().filter(|&&c| keep[c]).map(|&c| remap[c]).collect();
            (!companies.is_empty()).then(|| Event {
                companies,
                ..e.clone()
            })
        })
        .collect();
    Ok(Dataset {
        events,
        company_ids,
        taxonomy: dataset.taxonomy.clone(),
        splits: dataset.splits,
        origin: dataset.origin,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::corpus::events::{EventRecord, Splits};
    use crate::corpus::taxonomy::Taxonomy;
    use crate::corpus::time::year_start;

    fn dataset(activity: &[(&str, &[i32])]) -> Dataset {
        let tax = Arc::new(Taxonomy::parse("r,,1\na,r,2\n").unwrap());
        let mut records = Vec::new();
        for (company, years) in activity {
            for y in *years {
                records.push(EventRecord {
                    patent_id: format!("{company}-{y}"),
                    companies: vec![company.to_string()],
                    codes: vec!["a".into()],
                    timestamp: year_start(*y) + 1000.0,
                });
            }
        }
        records.push(EventRecord {
            patent_id: "joint".into(),
            companies: vec!["steady".into(), "late".into()],
            codes: vec!["a".into()],
            timestamp: year_start(2016) + 5.0,
        });
        Dataset::from_records(records, tax)
            .unwrap()
            .with_splits(Splits::new(year_start(2017), year_start(2018), year_start(2019)).unwrap())
    }

    #[test]
    fn applies_history_and_recency_rules() {
        let ds = dataset(&[
            ("steady", &[2012, 2013, 2014, 2015, 2016, 2017, 2018]),
            ("late", &[2017, 2018]),
            ("gap", &[2012, 2016, 2017]),
            ("newcomer", &[2017, 2018]),
        ]);
        let out = filter_companies(&ds, RecencyRule::All).unwrap();
        assert_eq!(out.company_ids, vec!["steady"]);
        // the joint event survives with only the kept co-applicant
        let joint = out.events.iter().find(|e| e.patent_id == "joint").unwrap();
        assert_eq!(joint.companies, vec![0]);
        assert!(out.events.iter().all(|e| !e.patent_id.starts_with("gap")));

        let any = filter_companies(&ds, RecencyRule::Any).unwrap();
        assert_eq!(any.company_ids, vec!["gap", "steady"]);
    }

    #[test]
    fn idempotent() {
        let ds = dataset(&[("steady", &[2012, 2016, 2017, 2018]), ("gap", &[2012, 2017])]);
        let once = filter_companies(&ds, RecencyRule::All).unwrap();
        let twice = filter_companies(&once, RecencyRule::All).unwrap();
        assert_eq!(once.company_ids, twice.company_ids);
        assert_eq!(once.events, twice.events);
    }

    #[test]
    fn empty_result_is_an_error() {
        let ds = dataset(&[("late", &[2017, 2018])]);
        assert!(matches!(filter_companies(&ds, RecencyRule::All), Err(Error::Data(_))));
    }
}
