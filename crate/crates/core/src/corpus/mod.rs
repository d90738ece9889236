//! Data model, ingestion, filtering, labels and synthetic corpora.

pub mod events;
pub mod filter;
pub mod labels;
pub mod synth;
pub mod taxonomy;
pub mod time;

pub use events::{load_events, split_events, Dataset, Event, EventItem, EventRecord, SplitPart, Splits};
pub use filter::{filter_companies, RecencyRule};
pub use labels::{build_labels, LabelIndex, LabelWindow};
pub use synth::{regular_taxonomy, synthesize, CompanyPreference, SynthConfig, SynthOutput};
pub use taxonomy::{load_taxonomy, Taxonomy, TaxonomyRecord};
