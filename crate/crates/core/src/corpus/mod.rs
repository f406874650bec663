//! Session corpora: event-log ingestion, preprocessing with time-based
//! splits, prefix augmentation, synthetic factor-structured generation, and
//! a binary cache format.

mod cache;
mod ingest;
mod preprocess;
mod synth;

pub use cache::{decode as decode_cache, encode as encode_cache, read_cache, write_cache, CORPUS_MAGIC};
pub use ingest::{ingest, Column, EventLogFormat, IngestReport};
pub use preprocess::{filter_sessions, preprocess, FilteredSession, PreprocessConfig, TimeSplit};
pub use synth::{synthesize, synthesize_sessions, SynthSession, SynthSpec};

use std::collections::HashMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("zero parseable events in {0}")]
    NoEvents(PathBuf),
    #[error("column `{0}` not found in header")]
    MissingColumn(String),
    #[error("event log has no header but columns were given by name")]
    NamedColumnsWithoutHeader,
    #[error("empty corpus after filtering")]
    EmptyCorpus,
    #[error("no events to preprocess")]
    NoInput,
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("invalid corpus cache: {0}")]
    InvalidCache(String),
    #[error("truncated corpus cache")]
    TruncatedCache,
}

/// One interaction from a raw log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawEvent {
    pub session_id: String,
    pub item_id: String,
    pub timestamp: i64,
}

/// Item sequence in interaction order; entries index into a [`Vocabulary`].
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Session {
    pub items: Vec<usize>,
}

impl Session {
    pub fn new(items: Vec<usize>) -> Self {
        Self { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn last(&self) -> Option<usize> {
        self.items.last().copied()
    }
}

/// A (prefix, next item) training or test case. `origin` identifies the
/// source session so that prefixes of one session can be told apart from
/// genuinely different sessions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub prefix: Session,
    pub target: usize,
    pub origin: usize,
}

/// Dense bidirectional item-id mapping.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_ids(ids: Vec<String>) -> Result<Self, CorpusError> {
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(CorpusError::InvalidCache(format!("duplicate item id `{id}`")));
            }
        }
        Ok(Self { ids, index })
    }

    /// Index of `id`, inserting it at the end when unseen.
    pub fn intern(&mut self, id: &str) -> usize {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        self.ids.push(id.to_string());
        self.index.insert(id.to_string(), self.ids.len() - 1);
        self.ids.len() - 1
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, index: usize) -> Option<&str> {
        self.ids.get(index).map(String::as_str)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub interactions: usize,
    pub train_sessions: usize,
    pub test_sessions: usize,
    pub items: usize,
    pub avg_length: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionCorpus {
    pub vocabulary: Vocabulary,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub stats: CorpusStats,
}

impl SessionCorpus {
    pub fn num_items(&self) -> usize {
        self.vocabulary.len()
    }
}

/// Every proper prefix of `items` paired with the item that follows it.
pub fn prefix_examples(items: &[usize], origin: usize) -> Vec<Example> {
    (1..items.len())
        .map(|i| Example {
            prefix: Session::new(items[..i].to_vec()),
            target: items[i],
            origin,
        })
        .collect()
}

/// The `(long, short)` strata of a test set: prefixes with length at least
/// `threshold` are long.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Strata {
    pub long: Vec<Example>,
    pub short: Vec<Example>,
}

pub const DEFAULT_LONG_THRESHOLD: usize = 5;

pub fn is_long(prefix_len: usize, threshold: usize) -> bool {
    prefix_len >= threshold
}

pub fn stratify_by_length(examples: &[Example], threshold: usize) -> Strata {
    let (long, short) = examples
        .iter()
        .cloned()
        .partition(|e| is_long(e.prefix.len(), threshold));
    Strata { long, short }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(len: usize) -> Example {
        Example {
            prefix: Session::new(vec![0; len]),
            target: 0,
            origin: len,
        }
    }

    #[test]
    fn prefix_rule() {
        let pairs = prefix_examples(&[10, 11, 12], 3);
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].prefix.items, vec![10]);
        assert_eq!(pairs[0].target, 11);
        assert_eq!(pairs[1].prefix.items, vec![10, 11]);
        assert_eq!(pairs[1].target, 12);
        assert!(pairs.iter().all(|p| p.origin == 3));
    }

    #[test]
    fn strata_split_at_threshold() {
        let set = vec![ex(2), ex(5), ex(7)];
        let s = stratify_by_length(&set, DEFAULT_LONG_THRESHOLD);
        assert_eq!(s.short.iter().map(|e| e.prefix.len()).collect::<Vec<_>>(), vec![2]);
        assert_eq!(s.long.iter().map(|e| e.prefix.len()).collect::<Vec<_>>(), vec![5, 7]);
        assert_eq!(s.long.len() + s.short.len(), set.len());
    }

    #[test]
    fn all_short_gives_empty_long_stratum() {
        let set: Vec<Example> = (1..=4).map(ex).collect();
        let s = stratify_by_length(&set, 5);
        assert!(s.long.is_empty());
        assert_eq!(s.short.len(), 4);
    }

    #[test]
    fn vocabulary_is_dense() {
        let mut v = Vocabulary::default();
        assert_eq!(v.intern("a"), 0);
        assert_eq!(v.intern("b"), 1);
        assert_eq!(v.intern("a"), 0);
        assert_eq!(v.id(1), Some("b"));
        assert!(Vocabulary::from_ids(vec!["x".into(), "x".into()]).is_err());
    }
}
