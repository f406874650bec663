use std::collections::{HashMap, HashSet};

use indexmap::IndexMap;

use super::{prefix_examples, CorpusError, CorpusStats, RawEvent, SessionCorpus, Vocabulary};

/// Sessions whose last event lies within `window_secs` of the newest
/// session end are held out for testing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimeSplit {
    pub window_secs: i64,
}

impl TimeSplit {
    pub const LAST_DAY: TimeSplit = TimeSplit { window_secs: 86_400 };
    pub const LAST_WEEK: TimeSplit = TimeSplit { window_secs: 7 * 86_400 };
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessConfig {
    pub min_support: usize,
    pub split: TimeSplit,
    /// Keep only the most recent fraction of sessions, applied before any
    /// filtering.
    pub subsample_recent: Option<f64>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            min_support: 5,
            split: TimeSplit::LAST_WEEK,
            subsample_recent: None,
        }
    }
}

/// A session that survived filtering, still in raw-id form.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FilteredSession {
    pub session_id: String,
    pub items: Vec<String>,
    pub timestamps: Vec<i64>,
    pub is_test: bool,
}

impl FilteredSession {
    fn last_time(&self) -> i64 {
        *self.timestamps.last().expect("sessions are never empty")
    }

    pub fn to_events(&self) -> impl Iterator<Item = RawEvent> + '_ {
        self.items.iter().zip(&self.timestamps).map(|(i, &t)| RawEvent {
            session_id: self.session_id.clone(),
            item_id: i.clone(),
            timestamp: t,
        })
    }
}

fn group_sessions(events: &[RawEvent]) -> Vec<FilteredSession> {
    let mut grouped: IndexMap<&str, Vec<(i64, usize, &str)>> = IndexMap::new();
    for (seq, e) in events.iter().enumerate() {
        grouped
            .entry(e.session_id.as_str())
            .or_default()
            .push((e.timestamp, seq, e.item_id.as_str()));
    }
    grouped
        .into_iter()
        .map(|(sid, mut evs)| {
            evs.sort_by_key(|&(t, seq, _)| (t, seq));
            FilteredSession {
                session_id: sid.to_string(),
                items: evs.iter().map(|e| e.2.to_string()).collect(),
                timestamps: evs.iter().map(|e| e.0).collect(),
                is_test: false,
            }
        })
        .collect()
}

fn subsample_recent(sessions: Vec<FilteredSession>, fraction: f64) -> Vec<FilteredSession> {
    let keep = ((sessions.len() as f64) * fraction.clamp(0.0, 1.0)).ceil() as usize;
    let mut order: Vec<usize> = (0..sessions.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse((sessions[i].last_time(), i)));
    let kept: HashSet<usize> = order.into_iter().take(keep).collect();
    sessions
        .into_iter()
        .enumerate()
        .filter(|(i, _)| kept.contains(i))
        .map(|(_, s)| s)
        .collect()
}

fn retain_items(session: &mut FilteredSession, keep: impl Fn(&str) -> bool) -> usize {
    let before = session.items.len();
    let (items, stamps): (Vec<String>, Vec<i64>) = session
        .items
        .drain(..)
        .zip(session.timestamps.drain(..))
        .filter(|(i, _)| keep(i))
        .unzip();
    session.items = items;
    session.timestamps = stamps;
    before - session.items.len()
}

/// Frequency filter, length filter, time split and test-vocabulary
/// restriction, repeated until none of them removes anything.
pub fn filter_sessions(events: &[RawEvent], cfg: &PreprocessConfig) -> Result<Vec<FilteredSession>, CorpusError> {
    if events.is_empty() {
        return Err(CorpusError::NoInput);
    }
    let mut sessions = group_sessions(events);
    if let Some(fraction) = cfg.subsample_recent {
        sessions = subsample_recent(sessions, fraction);
    }

    loop {
        let mut removed = 0;

        let mut counts: HashMap<String, usize> = HashMap::new();
        for s in &sessions {
            for i in &s.items {
                *counts.entry(i.clone()).or_default() += 1;
            }
        }
        for s in &mut sessions {
            removed += retain_items(s, |i| counts[i] >= cfg.min_support);
        }
        let before = sessions.len();
        sessions.retain(|s| s.items.len() >= 2);
        removed += before - sessions.len();

        let Some(newest) = sessions.iter().map(FilteredSession::last_time).max() else {
            break;
        };
        let cutoff = newest.saturating_sub(cfg.split.window_secs);
        for s in &mut sessions {
            s.is_test = s.last_time() > cutoff;
        }
        let train_items: HashSet<String> = sessions
            .iter()
            .filter(|s| !s.is_test)
            .flat_map(|s| s.items.iter().cloned())
            .collect();
        for s in sessions.iter_mut().filter(|s| s.is_test) {
            removed += retain_items(s, |i| train_items.contains(i));
        }

        if removed == 0 {
            break;
        }
    }

    if !sessions.iter().any(|s| !s.is_test) {
        return Err(CorpusError::EmptyCorpus);
    }
    Ok(sessions)
}

/// Filter raw events and expand every surviving session into
/// (prefix, next item) examples.
pub fn preprocess(events: &[RawEvent], cfg: &PreprocessConfig) -> Result<SessionCorpus, CorpusError> {
    let sessions = filter_sessions(events, cfg)?;
    let mut vocabulary = Vocabulary::default();
    for s in sessions.iter().filter(|s| !s.is_test) {
        for i in &s.items {
            vocabulary.intern(i);
        }
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut interactions = 0;
    for (origin, s) in sessions.iter().enumerate() {
        let items: Vec<usize> = s
            .items
            .iter()
            .map(|i| vocabulary.get(i).expect("test items are restricted to the train vocabulary"))
            .collect();
        interactions += items.len();
        let pairs = prefix_examples(&items, origin);
        if s.is_test {
            test.extend(pairs);
        } else {
            train.extend(pairs);
        }
    }
    let test_sessions = sessions.iter().filter(|s| s.is_test).count();
    let stats = CorpusStats {
        interactions,
        train_sessions: sessions.len() - test_sessions,
        test_sessions,
        items: vocabulary.len(),
        avg_length: interactions as f64 / sessions.len() as f64,
    };
    Ok(SessionCorpus {
        vocabulary,
        train,
        test,
        stats,
    })
}
