//! Factor-wise convolution over the stability-weighted inter-session graph.

use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffError, Graph, Tensor, Var};
use crate::disentangle::{Activation, FactorEmbedding};
use crate::graphbuild::{InterSessionGraphSet, NORM_EPS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowNorm {
    #[default]
    L2,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterConvConfig {
    pub layers: usize,
    pub activation: Activation,
    pub normalization: RowNorm,
}

impl Default for InterConvConfig {
    fn default() -> Self {
        Self {
            layers: 1,
            activation: Activation::Identity,
            normalization: RowNorm::L2,
        }
    }
}

fn normalize(row: &mut [f64], norm: RowNorm) {
    if norm == RowNorm::None {
        return;
    }
    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > NORM_EPS {
        row.iter_mut().for_each(|v| *v /= n);
    }
}

/// `H <- Norm(act(A H) + H)` per factor for `cfg.layers` layers; row `i`
/// of `A` holds the weights anchor `i` gives its neighbours.
pub fn inter_convolve(
    graphs: &InterSessionGraphSet,
    session_factors: &[FactorEmbedding],
    cfg: &InterConvConfig,
) -> Result<Vec<FactorEmbedding>, DiffError> {
    if cfg.layers == 0 {
        return Err(DiffError::InvalidArgument("at least one layer"));
    }
    let m = session_factors.len();
    let k = graphs.k();
    if session_factors.iter().any(|f| f.k() != k) {
        return Err(DiffError::InvalidArgument("factor count differs from graph set"));
    }
    let mut per_factor: Vec<Vec<Vec<f64>>> = Vec::with_capacity(k);
    for (t, adj) in graphs.adjacency.iter().enumerate() {
        if adj.shape() != [m, m] || !adj.is_finite() {
            return Err(DiffError::InvalidArgument("adjacency must be finite and M x M"));
        }
        let mut h: Vec<Vec<f64>> = session_factors.iter().map(|f| f.factor(t).to_vec()).collect();
        for _ in 0..cfg.layers {
            let next: Vec<Vec<f64>> = (0..m)
                .map(|i| {
                    let mut row: Vec<f64> = (0..h[i].len())
                        .map(|c| {
                            let agg: f64 = (0..m).map(|j| adj.get(i, j) * h[j][c]).sum();
                            cfg.activation.apply(agg) + h[i][c]
                        })
                        .collect();
                    normalize(&mut row, cfg.normalization);
                    row
                })
                .collect();
            if next.iter().flatten().any(|v| !v.is_finite()) {
                return Err(DiffError::NonFinite { op: "inter_convolve" });
            }
            h = next;
        }
        per_factor.push(h);
    }
    (0..m)
        .map(|i| FactorEmbedding::new(per_factor.iter().map(|h| h[i].clone()).collect()))
        .collect()
}

/// Recorded convolution of one factor channel: `adjacency` is `M x M`,
/// `h` is `M x d_f`.
pub fn inter_convolve_var(g: &mut Graph, adjacency: Var, h: Var, cfg: &InterConvConfig) -> Result<Var, DiffError> {
    if cfg.layers == 0 {
        return Err(DiffError::InvalidArgument("at least one layer"));
    }
    let mut h = h;
    for _ in 0..cfg.layers {
        let agg = g.matmul(adjacency, h)?;
        let act = cfg.activation.apply_var(g, agg)?;
        let sum = g.add(act, h)?;
        h = match cfg.normalization {
            RowNorm::L2 => g.normalize_rows(sum, NORM_EPS)?,
            RowNorm::None => sum,
        };
    }
    Ok(h)
}

/// Convenience for tests and diagnostics: wrap per-factor plain matrices.
pub fn graph_set(adjacency: Vec<Tensor>) -> InterSessionGraphSet {
    InterSessionGraphSet { adjacency }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: Vec<f64>) -> FactorEmbedding {
        FactorEmbedding::new(vec![v]).unwrap()
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn isolated_session_keeps_its_direction() {
        let set = graph_set(vec![Tensor::zeros(1, 1)]);
        let out = inter_convolve(&set, &[one(vec![3.0, 4.0])], &InterConvConfig::default()).unwrap();
        assert_eq!(out[0].factor(0), &[0.6, 0.8]);

        let two = InterConvConfig {
            layers: 2,
            ..InterConvConfig::default()
        };
        let again = inter_convolve(&set, &[one(vec![3.0, 4.0])], &two).unwrap();
        for (a, b) in again[0].factor(0).iter().zip(out[0].factor(0)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn two_session_expansion() {
        let w = 0.3;
        let set = graph_set(vec![Tensor::from_rows(&[vec![0.0, w], vec![w, 0.0]]).unwrap()]);
        let cfg = InterConvConfig {
            normalization: RowNorm::None,
            ..InterConvConfig::default()
        };
        let (a, b) = (vec![1.0, 2.0], vec![-0.5, 0.25]);
        let out = inter_convolve(&set, &[one(a.clone()), one(b.clone())], &cfg).unwrap();
        for c in 0..2 {
            assert!((out[0].factor(0)[c] - (w * b[c] + a[c])).abs() < 1e-15);
            assert!((out[1].factor(0)[c] - (w * a[c] + b[c])).abs() < 1e-15);
        }
        let normed = inter_convolve(&set, &[one(a), one(b)], &InterConvConfig::default()).unwrap();
        assert!(normed.iter().all(|f| (norm(f.factor(0)) - 1.0).abs() < 1e-12));
    }

    #[test]
    fn one_layer_reaches_only_direct_neighbours() {
        // path 0 - 1 - 2
        let adj = Tensor::from_rows(&[vec![0.0, 0.5, 0.0], vec![0.5, 0.0, 0.5], vec![0.0, 0.5, 0.0]]).unwrap();
        let set = graph_set(vec![adj]);
        let base = [one(vec![1.0, 0.0]), one(vec![0.0, 1.0]), one(vec![1.0, 1.0])];
        let mut moved = base.clone();
        moved[2] = one(vec![-2.0, 5.0]);
        let cfg = InterConvConfig::default();
        let x = inter_convolve(&set, &base, &cfg).unwrap();
        let y = inter_convolve(&set, &moved, &cfg).unwrap();
        assert_eq!(x[0], y[0]);
        assert_ne!(x[1], y[1]);

        let deeper = InterConvConfig { layers: 2, ..cfg };
        let x = inter_convolve(&set, &base, &deeper).unwrap();
        let y = inter_convolve(&set, &moved, &deeper).unwrap();
        assert_ne!(x[0], y[0]);
    }

    #[test]
    fn tape_matches_plain() {
        let adj = Tensor::from_rows(&[vec![0.0, 0.2, 0.7], vec![0.1, 0.0, 0.0], vec![0.4, 0.0, 0.0]]).unwrap();
        let h = Tensor::from_fn(3, 2, |r, c| (r as f64 + 1.0) * if c == 0 { 1.0 } else { -0.3 });
        let cfg = InterConvConfig {
            layers: 2,
            activation: Activation::Sigmoid,
            normalization: RowNorm::L2,
        };
        let plain = inter_convolve(
            &graph_set(vec![adj.clone()]),
            &(0..3).map(|r| one(h.row_slice(r).to_vec())).collect::<Vec<_>>(),
            &cfg,
        )
        .unwrap();
        let mut g = Graph::new();
        let (a, hv) = (g.leaf(adj).unwrap(), g.leaf(h).unwrap());
        let out = inter_convolve_var(&mut g, a, hv, &cfg).unwrap();
        for (r, f) in plain.iter().enumerate() {
            for (x, y) in g.value(out).row_slice(r).iter().zip(f.factor(0)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_non_finite_adjacency() {
        let set = graph_set(vec![Tensor::from_rows(&[vec![f64::NAN]]).unwrap()]);
        assert!(inter_convolve(&set, &[one(vec![1.0])], &InterConvConfig::default()).is_err());
    }
}
