use serde::{Deserialize, Serialize};

use crate::corpus::{is_long, DEFAULT_LONG_THRESHOLD};

/// 1-based rank of `target`; ties go to the lower item index.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < target))
        .count()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stratum {
    #[default]
    All,
    Long,
    Short,
}

impl Stratum {
    pub const ALL: [Stratum; 3] = [Stratum::All, Stratum::Long, Stratum::Short];

    pub fn name(self) -> &'static str {
        match self {
            Stratum::All => "all",
            Stratum::Long => "long",
            Stratum::Short => "short",
        }
    }

    pub fn contains(self, prefix_len: usize) -> bool {
        match self {
            Stratum::All => true,
            Stratum::Long => is_long(prefix_len, DEFAULT_LONG_THRESHOLD),
            Stratum::Short => !is_long(prefix_len, DEFAULT_LONG_THRESHOLD),
        }
    }
}

/// P@K and M@K over one set of ranks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub cutoff: usize,
    pub precision: f64,
    pub mrr: f64,
    pub cases: usize,
}

pub fn metric_at(ranks: &[usize], cutoff: usize) -> Metric {
    let cases = ranks.len();
    if cases == 0 {
        return Metric {
            cutoff,
            precision: 0.0,
            mrr: 0.0,
            cases,
        };
    }
    let hits = ranks.iter().filter(|&&r| r <= cutoff).count();
    let rr: f64 = ranks.iter().filter(|&&r| r <= cutoff).fold(0.0, |acc, &r| acc + 1.0 / r as f64);
    Metric {
        cutoff,
        precision: hits as f64 / cases as f64,
        mrr: rr / cases as f64,
        cases,
    }
}

/// Ranks of a test set with the prefix length of every case.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankSet {
    pub ranks: Vec<usize>,
    pub prefix_lens: Vec<usize>,
}

impl RankSet {
    pub fn push(&mut self, rank: usize, prefix_len: usize) {
        self.ranks.push(rank);
        self.prefix_lens.push(prefix_len);
    }

    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }

    pub fn stratum(&self, s: Stratum) -> Vec<usize> {
        self.ranks
            .iter()
            .zip(&self.prefix_lens)
            .filter(|&(_, &len)| s.contains(len))
            .map(|(&r, _)| r)
            .collect()
    }

    pub fn metric(&self, s: Stratum, cutoff: usize) -> Metric {
        metric_at(&self.stratum(s), cutoff)
    }
}

/// One row of the metrics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub variant: String,
    pub k: usize,
    #[serde(rename = "K")]
    pub cutoff: usize,
    #[serde(rename = "P")]
    pub precision: f64,
    #[serde(rename = "M")]
    pub mrr: f64,
    pub stratum: Stratum,
}

pub fn metric_rows(variant: &str, k: usize, ranks: &RankSet, cutoffs: &[usize]) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for &cutoff in cutoffs {
        for s in Stratum::ALL {
            let m = ranks.metric(s, cutoff);
            rows.push(MetricRow {
                variant: variant.to_string(),
                k,
                cutoff,
                precision: m.precision,
                mrr: m.mrr,
                stratum: s,
            });
        }
    }
    rows
}

/// CSV with header `variant,k,K,P,M,stratum`.
pub fn metrics_csv(rows: &[MetricRow]) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_enumerated_ranks() {
        let m = metric_at(&[1, 3, 25], 20);
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.mrr - (1.0 + 1.0 / 3.0) / 3.0).abs() < 1e-12);
        let top = metric_at(&[1, 1, 1], 10);
        assert_eq!((top.precision, top.mrr), (1.0, 1.0));
    }

    #[test]
    fn ties_favour_lower_index() {
        let s = [0.5, 0.9, 0.5, 0.5];
        assert_eq!(rank_of(&s, 1), 1);
        assert_eq!(rank_of(&s, 0), 2);
        assert_eq!(rank_of(&s, 2), 3);
        assert_eq!(rank_of(&s, 3), 4);
    }

    #[test]
    fn csv_layout() {
        let mut ranks = RankSet::default();
        ranks.push(1, 2);
        ranks.push(30, 6);
        let rows = metric_rows("full", 5, &ranks, &[10, 20]);
        assert_eq!(rows.len(), 6);
        let text = metrics_csv(&rows).unwrap();
        assert!(text.starts_with("variant,k,K,P,M,stratum\n"));
        assert!(text.contains("full,5,10,0.5,0.5,all"));
        assert!(text.contains("full,5,20,0.0,0.0,long"));
        assert!(text.contains("full,5,20,1.0,1.0,short"));
    }
}
