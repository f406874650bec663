use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{prefix_examples, CorpusError, CorpusStats, SessionCorpus, Vocabulary};

/// Parameters of a synthetic corpus whose items are tuples of latent factor
/// values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_factors: usize,
    pub values_per_factor: usize,
    pub num_sessions: usize,
    /// Inclusive bounds on session length.
    pub session_length_range: (usize, usize),
    /// Fraction of sessions that keep one factor value fixed throughout.
    pub stability_mix: f64,
    /// The frozen factor of a stable session; drawn per session when `None`.
    pub frozen_factor: Option<usize>,
    /// Probability that a non-frozen factor jumps to a uniform random value
    /// instead of following its successor map.
    pub transition_noise: f64,
    /// Trailing fraction of sessions (in generation order) held out as test.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_factors: 2,
            values_per_factor: 5,
            num_sessions: 200,
            session_length_range: (4, 8),
            stability_mix: 0.5,
            frozen_factor: None,
            transition_noise: 0.0,
            test_fraction: 0.2,
            seed: 1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::InvalidSpec(m.to_string()));
        let (lo, hi) = self.session_length_range;
        if self.num_factors == 0 || self.values_per_factor == 0 || self.num_sessions == 0 {
            return bad("counts must be positive");
        }
        if lo < 2 || hi < lo {
            return bad("session length range must satisfy 2 <= min <= max");
        }
        if !(0.0..=1.0).contains(&self.stability_mix) {
            return bad("stability_mix must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.transition_noise) {
            return bad("transition_noise must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad("test_fraction must lie in [0, 1)");
        }
        if self.frozen_factor.is_some_and(|f| f >= self.num_factors) {
            return bad("frozen_factor out of range");
        }
        Ok(())
    }
}

/// One generated session as factor tuples, with its ground-truth stable
/// factor if any.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthSession {
    pub tuples: Vec<Vec<usize>>,
    pub frozen_factor: Option<usize>,
}

/// A single random cycle over `0..n`, so no value maps to itself when n > 1.
fn successor_cycle(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut next = vec![0; n];
    for w in 0..n {
        next[order[w]] = order[(w + 1) % n];
    }
    next
}

/// Factor-wise Markov walks: every factor follows its own successor cycle,
/// except the frozen factor of a stable session.
pub fn synthesize_sessions(spec: &SynthSpec) -> Result<Vec<SynthSession>, CorpusError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let successors: Vec<Vec<usize>> = (0..spec.num_factors)
        .map(|_| successor_cycle(spec.values_per_factor, &mut rng))
        .collect();
    let (lo, hi) = spec.session_length_range;

    let mut sessions = Vec::with_capacity(spec.num_sessions);
    for _ in 0..spec.num_sessions {
        let len = rng.random_range(lo..=hi);
        let frozen = if rng.random_bool(spec.stability_mix) {
            Some(
                spec.frozen_factor
                    .unwrap_or_else(|| rng.random_range(0..spec.num_factors)),
            )
        } else {
            None
        };
        let mut current: Vec<usize> = (0..spec.num_factors)
            .map(|_| rng.random_range(0..spec.values_per_factor))
            .collect();
        let mut tuples = Vec::with_capacity(len);
        tuples.push(current.clone());
        for _ in 1..len {
            for (t, value) in current.iter_mut().enumerate() {
                if frozen == Some(t) {
                    continue;
                }
                *value = if spec.transition_noise > 0.0 && rng.random_bool(spec.transition_noise) {
                    rng.random_range(0..spec.values_per_factor)
                } else {
                    successors[t][*value]
                };
            }
            tuples.push(current.clone());
        }
        sessions.push(SynthSession {
            tuples,
            frozen_factor: frozen,
        });
    }
    Ok(sessions)
}

fn tuple_id(tuple: &[usize]) -> String {
    let parts: Vec<String> = tuple.iter().map(usize::to_string).collect();
    format!("v{}", parts.join("-"))
}

/// Generate a corpus; the trailing `test_fraction` of sessions is held out.
pub fn synthesize(spec: &SynthSpec) -> Result<SessionCorpus, CorpusError> {
    let sessions = synthesize_sessions(spec)?;
    let num_test = ((sessions.len() as f64) * spec.test_fraction).floor() as usize;
    let num_train = sessions.len() - num_test;

    let mut vocabulary = Vocabulary::default();
    for s in &sessions[..num_train] {
        for t in &s.tuples {
            vocabulary.intern(&tuple_id(t));
        }
    }
    let known: HashSet<String> = vocabulary.ids().iter().cloned().collect();

    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut interactions = 0;
    let mut test_sessions = 0;
    for (origin, s) in sessions.iter().enumerate() {
        let items: Vec<usize> = s
            .tuples
            .iter()
            .map(|t| tuple_id(t))
            .filter(|id| known.contains(id))
            .map(|id| vocabulary.get(&id).expect("known id"))
            .collect();
        if items.len() < 2 {
            continue;
        }
        interactions += items.len();
        let pairs = prefix_examples(&items, origin);
        if origin < num_train {
            train.extend(pairs);
        } else {
            test_sessions += 1;
            test.extend(pairs);
        }
    }
    let total_sessions = num_train + test_sessions;
    let stats = CorpusStats {
        interactions,
        train_sessions: num_train,
        test_sessions,
        items: vocabulary.len(),
        avg_length: interactions as f64 / total_sessions as f64,
    };
    Ok(SessionCorpus {
        vocabulary,
        train,
        test,
        stats,
    })
}
