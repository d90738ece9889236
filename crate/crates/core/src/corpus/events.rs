//! Patent application events and the chronologically ordered dataset.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::taxonomy::Taxonomy;
use crate::error::{Error, Result};

/// One patent application: co-applicants, lowest-level codes, time.
#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    pub patent_id: String,
    /// Company indices into [`Dataset::company_ids`], sorted and unique.
    pub companies: Vec<usize>,
    /// Leaf indices into the taxonomy, sorted and unique.
    pub codes: Vec<usize>,
    pub timestamp: f64,
}

/// One company's view of an event.
#[derive(Clone, Debug, PartialEq)]
pub struct EventItem {
    pub patent_id: String,
    pub company: usize,
    pub codes: Vec<usize>,
    pub timestamp: f64,
}

/// On-disk JSONL record.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EventRecord {
    pub patent_id: String,
    pub companies: Vec<String>,
    pub codes: Vec<String>,
    pub timestamp: f64,
}

/// Split boundaries. Training covers `t < train_end`, validation
/// `train_end <= t < val_end`, testing `val_end <= t < test_end`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train_end: f64,
    pub val_end: f64,
    pub test_end: f64,
}

impl Splits {
    pub fn new(train_end: f64, val_end: f64, test_end: f64) -> Result<Self> {
        if !(train_end < val_end && val_end < test_end) {
            return Err(Error::Config(format!(
                "split boundaries must be strictly increasing (got {train_end}, {val_end}, {test_end})"
            )));
        }
        Ok(Splits {
            train_end,
            val_end,
            test_end,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Train,
    Val,
    Test,
    Outside,
}

/// Chronological event list over a fixed company set and taxonomy.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub events: Vec<Event>,
    pub company_ids: Vec<String>,
    pub taxonomy: Arc<Taxonomy>,
    pub splits: Option<Splits>,
    /// Reference time for first interactions.
    pub origin: f64,
}

fn event_order(a: &Event, b: &Event) -> std::cmp::Ordering {
    a.timestamp
        .total_cmp(&b.timestamp)
        .then_with(|| a.patent_id.cmp(&b.patent_id))
}

impl Dataset {
    /// Builds a dataset from already-indexed events, sorting them.
    pub fn new(mut events: Vec<Event>, company_ids: Vec<String>, taxonomy: Arc<Taxonomy>) -> Self {
        events.sort_by(event_order);
        let origin = events.first().map(|e| e.timestamp).unwrap_or(0.0);
        Dataset {
            events,
            company_ids,
            taxonomy,
            splits: None,
            origin,
        }
    }

    /// Builds a dataset from raw records, validating every invariant.
    pub fn from_records(records: Vec<EventRecord>, taxonomy: Arc<Taxonomy>) -> Result<Self> {
        let path = Path::new("<memory>");
        let companies: BTreeSet<String> = records.iter().flat_map(|r| r.companies.iter().cloned()).collect();
        let company_ids: Vec<String> = companies.into_iter().collect();
        let events = records
            .into_iter()
            .enumerate()
            .map(|(i, r)| index_record(r, &company_ids, &taxonomy, path, i + 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(events, company_ids, taxonomy))
    }

    pub fn with_splits(mut self, splits: Splits) -> Self {
        self.splits = Some(splits);
        self
    }

    pub fn company_count(&self) -> usize {
        self.company_ids.len()
    }

    pub fn leaf_count(&self) -> usize {
        self.taxonomy.leaf_count()
    }

    pub fn company_index(&self, id: &str) -> Option<usize> {
        self.company_ids.binary_search_by(|c| c.as_str().cmp(id)).ok()
    }

    pub fn splits(&self) -> Result<Splits> {
        self.splits
            .ok_or_else(|| Error::Config("dataset has no split boundaries (train_end/val_end/test_end)".into()))
    }

    pub fn part_of(&self, t: f64) -> Result<SplitPart> {
        let s = self.splits()?;
        Ok(if t < s.train_end {
            SplitPart::Train
        } else if t < s.val_end {
            SplitPart::Val
        } else if t < s.test_end {
            SplitPart::Test
        } else {
            SplitPart::Outside
        })
    }

    /// Events with `timestamp < end`, as a prefix slice.
    pub fn events_before(&self, end: f64) -> &[Event] {
        let n = self.events.partition_point(|e| e.timestamp < end);
        &self.events[..n]
    }

    /// Events with `start <= timestamp < end`.
    pub fn events_between(&self, start: f64, end: f64) -> &[Event] {
        let a = self.events.partition_point(|e| e.timestamp < start);
        let b = self.events.partition_point(|e| e.timestamp < end);
        &self.events[a..b.max(a)]
    }

    pub fn to_records(&self) -> Vec<EventRecord> {
        self.events
            .iter()
            .map(|e| EventRecord {
                patent_id: e.patent_id.clone(),
                companies: e.companies.iter().map(|&c| self.company_ids[c].clone()).collect(),
                codes: e.codes.iter().map(|&j| self.taxonomy.leaf_id(j).to_string()).collect(),
                timestamp: e.timestamp,
            })
            .collect()
    }

    /// Writes the event log as JSONL.
    pub fn write_events(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for r in self.to_records() {
            let line = serde_json::to_string(&r).expect("records serialize");
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn index_record(r: EventRecord, company_ids: &[String], tax: &Taxonomy, path: &Path, line: usize) -> Result<Event> {
    let parse_err = |message: &str| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.to_string(),
    };
    if r.companies.is_empty() {
        return Err(parse_err("event has no companies"));
    }
    if r.codes.is_empty() {
        return Err(parse_err("event has no codes"));
    }
    if !(r.timestamp > 0.0 && r.timestamp.is_finite()) {
        return Err(parse_err("timestamp must be a positive finite number"));
    }
    let mut companies: Vec<usize> = r
        .companies
        .iter()
        .map(|c| company_ids.binary_search(c).expect("company table covers all records"))
        .collect();
    companies.sort_unstable();
    companies.dedup();
    let mut codes = Vec::with_capacity(r.codes.len());
    for c in &r.codes {
        match tax.leaf_index(c) {
            Some(j) => codes.push(j),
            None => {
                return Err(Error::UnknownCode {
                    path: path.to_path_buf(),
                    line,
                    code: c.clone(),
                })
            }
        }
    }
    codes.sort_unstable();
    codes.dedup();
    Ok(Event {
        patent_id: r.patent_id,
        companies,
        codes,
        timestamp: r.timestamp,
    })
}

/// Reads a JSONL event log, one `{patent_id, companies, codes, timestamp}`
/// record per line. Blank lines are skipped.
pub fn load_events(path: impl AsRef<Path>, taxonomy: Arc<Taxonomy>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut lines = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EventRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        records.push(rec);
        lines.push(n + 1);
    }
    let companies: BTreeSet<&String> = records.iter().flat_map(|r| r.companies.iter()).collect();
    let company_ids: Vec<String> = companies.into_iter().cloned().collect();
    let events = records
        .into_iter()
        .zip(lines)
        .map(|(r, line)| index_record(r, &company_ids, &taxonomy, path, line))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(events, company_ids, taxonomy))
}

/// Splits every event into one item per co-applicant, preserving event
/// order; items of one event are ordered by company index.
pub fn split_events(events: &[Event]) -> Vec<EventItem> {
    events
        .iter()
        .flat_map(|e| {
            e.companies.iter().map(move |&company| EventItem {
                patent_id: e.patent_id.clone(),
                company,
                codes: e.codes.clone(),
                timestamp: e.timestamp,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tax() -> Arc<Taxonomy> {
        Arc::new(Taxonomy::parse("r,,1\na,r,2\nb,r,2\nc,r,2\n").unwrap())
    }

    fn rec(id: &str, companies: &[&str], codes: &[&str], t: f64) -> EventRecord {
        EventRecord {
            patent_id: id.into(),
            companies: companies.iter().map(|s| s.to_string()).collect(),
            codes: codes.iter().map(|s| s.to_string()).collect(),
            timestamp: t,
        }
    }

    #[test]
    fn sorted_by_time_then_patent_id() {
        let ds = Dataset::from_records(
            vec![rec("p3", &["x"], &["a"], 5.0), rec("p2", &["x"], &["b"], 2.0), rec("p1", &["y"], &["c"], 2.0)],
            tax(),
        )
        .unwrap();
        let order: Vec<_> = ds.events.iter().map(|e| e.patent_id.as_str()).collect();
        assert_eq!(order, vec!["p1", "p2", "p3"]);
    }

    #[test]
    fn empty_codes_rejected() {
        let err = Dataset::from_records(vec![rec("p", &["x"], &[], 1.0)], tax()).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn unknown_code_rejected() {
        let err = Dataset::from_records(vec![rec("p", &["x"], &["r"], 1.0)], tax()).unwrap_err();
        assert!(matches!(err, Error::UnknownCode { .. }));
    }

    #[test]
    fn three_companies_three_items() {
        let ds = Dataset::from_records(vec![rec("p", &["u3", "u1", "u2"], &["a", "b"], 1.0)], tax()).unwrap();
        let items = split_events(&ds.events);
        assert_eq!(items.len(), 3);
        for (k, it) in items.iter().enumerate() {
            assert_eq!(it.company, k);
            assert_eq!(ds.company_ids[it.company], format!("u{}", k + 1));
            assert_eq!(it.codes, vec![0, 1]);
            assert_eq!(it.timestamp, 1.0);
        }
    }

    #[test]
    fn items_follow_event_order() {
        let ds = Dataset::from_records(
            vec![rec("p1", &["u1", "u2"], &["a"], 1.0), rec("p2", &["u1"], &["b"], 2.0)],
            tax(),
        )
        .unwrap();
        let items = split_events(&ds.events);
        let ids: Vec<_> = items.iter().map(|i| (i.patent_id.as_str(), i.company)).collect();
        assert_eq!(ids, vec![("p1", 0), ("p1", 1), ("p2", 0)]);
        assert_eq!(split_events(&ds.events[1..]).len(), 1);
    }

    #[test]
    fn load_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        std::fs::write(
            &p,
            "{\"patent_id\":\"p\",\"companies\":[\"x\"],\"codes\":[\"a\"],\"timestamp\":1}\n\nnot json\n",
        )
        .unwrap();
        match load_events(&p, tax()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
    }
}
