//! Intra-session item graphs, the batch inter-session graph with factor-wise
//! cosine weights, interest units and stability profiles.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::corpus::Session;
use crate::diffcore::{DiffError, Graph, Tensor, Var};
use crate::disentangle::{drl_project, DrlParams, FactorEmbedding};

/// Norm below which a vector is treated as zero by the cosine helpers.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct IntraSessionGraph {
    /// Distinct items in first-occurrence order.
    pub nodes: Vec<usize>,
    /// Node index of every session position.
    pub alias: Vec<usize>,
    /// Distinct directed edges `(from, to)` as node indices.
    pub edges: Vec<(usize, usize)>,
    /// `a_in[w][u] = 1 / indeg(w)` for every edge `u -> w`.
    pub a_in: Tensor,
    /// `a_out[u][w] = 1 / outdeg(u)` for every edge `u -> w`.
    pub a_out: Tensor,
}

impl IntraSessionGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

pub fn build_intra_graph(s: &Session) -> Result<IntraSessionGraph, DiffError> {
    if s.is_empty() {
        return Err(DiffError::InvalidArgument("empty session"));
    }
    let mut nodes = Vec::new();
    let mut alias = Vec::with_capacity(s.len());
    for &item in &s.items {
        let idx = match nodes.iter().position(|&n| n == item) {
            Some(i) => i,
            None => {
                nodes.push(item);
                nodes.len() - 1
            }
        };
        alias.push(idx);
    }
    let mut edges = Vec::new();
    let mut seen = HashSet::new();
    for w in alias.windows(2) {
        if seen.insert((w[0], w[1])) {
            edges.push((w[0], w[1]));
        }
    }
    let n = nodes.len();
    let mut out_deg = vec![0usize; n];
    let mut in_deg = vec![0usize; n];
    for &(u, w) in &edges {
        out_deg[u] += 1;
        in_deg[w] += 1;
    }
    let mut a_in = Tensor::zeros(n, n);
    let mut a_out = Tensor::zeros(n, n);
    for &(u, w) in &edges {
        a_out.set(u, w, 1.0 / out_deg[u] as f64);
        a_in.set(w, u, 1.0 / in_deg[w] as f64);
    }
    Ok(IntraSessionGraph {
        nodes,
        alias,
        edges,
        a_in,
        a_out,
    })
}

/// Symmetric session incidence of one batch; the diagonal is always false.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InterIncidence {
    m: usize,
    linked: Vec<bool>,
}

impl InterIncidence {
    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    pub fn linked(&self, i: usize, j: usize) -> bool {
        self.linked[i * self.m + j]
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.m)
            .flat_map(|i| ((i + 1)..self.m).map(move |j| (i, j)))
            .filter(|&(i, j)| self.linked(i, j))
            .collect()
    }

    /// 0/1 matrix of linked pairs; also the initial edge weights.
    pub fn mask(&self) -> Tensor {
        Tensor::from_fn(self.m, self.m, |i, j| if self.linked(i, j) { 1.0 } else { 0.0 })
    }
}

/// Sessions are linked when their item sets intersect.
pub fn build_inter_base(sessions: &[Session]) -> InterIncidence {
    let origins: Vec<usize> = (0..sessions.len()).collect();
    build_inter_base_by_origin(sessions, &origins)
}

/// Like [`build_inter_base`], but never links two prefixes of the same
/// source session.
pub fn build_inter_base_by_origin(sessions: &[Session], origins: &[usize]) -> InterIncidence {
    assert_eq!(sessions.len(), origins.len(), "one origin per session");
    let m = sessions.len();
    let sets: Vec<HashSet<usize>> = sessions.iter().map(|s| s.items.iter().copied().collect()).collect();
    let mut linked = vec![false; m * m];
    for i in 0..m {
        for j in (i + 1)..m {
            if origins[i] != origins[j] && !sets[i].is_disjoint(&sets[j]) {
                linked[i * m + j] = true;
                linked[j * m + i] = true;
            }
        }
    }
    InterIncidence { m, linked }
}

/// Cosine similarity; zero when either vector is (numerically) zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na <= NORM_EPS || nb <= NORM_EPS {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Clamped cosine weights on linked pairs of vectors.
pub fn similarity_weights(base: &InterIncidence, vectors: &[&[f64]]) -> Result<Tensor, DiffError> {
    if vectors.len() != base.len() {
        return Err(DiffError::InvalidArgument("one vector per batch session"));
    }
    Ok(Tensor::from_fn(base.len(), base.len(), |i, j| {
        if base.linked(i, j) {
            cosine(vectors[i], vectors[j]).max(0.0)
        } else {
            0.0
        }
    }))
}

/// One `M x M` weight matrix per factor.
pub fn factor_similarity_weights(
    base: &InterIncidence,
    session_factors: &[FactorEmbedding],
) -> Result<Vec<Tensor>, DiffError> {
    let k = session_factors.first().map_or(0, FactorEmbedding::k);
    (0..k)
        .map(|t| {
            let vs: Vec<&[f64]> = session_factors.iter().map(|f| f.factor(t)).collect();
            similarity_weights(base, &vs)
        })
        .collect()
}

/// Embeddings of every prefix mean of `s`, one per position.
pub fn interest_units(s: &Session, item_table: &Tensor, drl: &DrlParams) -> Result<Vec<FactorEmbedding>, DiffError> {
    if s.is_empty() {
        return Err(DiffError::InvalidArgument("empty session"));
    }
    let d = item_table.cols();
    let mut running = vec![0.0; d];
    let mut units = Vec::with_capacity(s.len());
    for (i, &item) in s.items.iter().enumerate() {
        if item >= item_table.rows() {
            return Err(DiffError::OutOfRange {
                op: "interest_units",
                index: item,
                extent: item_table.rows(),
            });
        }
        for (r, v) in running.iter_mut().zip(item_table.row_slice(item)) {
            *r += v;
        }
        let mean: Vec<f64> = running.iter().map(|v| v / (i + 1) as f64).collect();
        units.push(drl_project(&mean, drl)?);
    }
    Ok(units)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityProfile {
    /// `D^t`: summed cosine over ordered pairs of distinct units.
    pub divergence: Vec<f64>,
    /// Softmax of `divergence` across factors.
    pub instability: Vec<f64>,
}

/// How the stability profile enters the edge weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StabilityReading {
    /// `sqrt(a * softmax_t(D)_t)`
    #[default]
    Normalized,
    /// `sqrt(a * max(D_t, 0))`
    Raw,
}

impl std::str::FromStr for StabilityReading {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "normalized" => Ok(Self::Normalized),
            "raw" => Ok(Self::Raw),
            other => Err(format!("unknown stability reading `{other}`")),
        }
    }
}

pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn stability(units: &[FactorEmbedding]) -> Result<StabilityProfile, DiffError> {
    let Some(first) = units.first() else {
        return Err(DiffError::InvalidArgument("stability needs at least one unit"));
    };
    let k = first.k();
    let divergence: Vec<f64> = (0..k)
        .map(|t| {
            let mut total = 0.0;
            for (i, a) in units.iter().enumerate() {
                for (j, b) in units.iter().enumerate() {
                    if i != j {
                        total += cosine(a.factor(t), b.factor(t));
                    }
                }
            }
            total
        })
        .collect();
    let instability = softmax(&divergence);
    Ok(StabilityProfile {
        divergence,
        instability,
    })
}

/// Rescale one anchor's per-factor rows: `a <- sqrt(a * w_t)`.
pub fn apply_stability(rows: &[Vec<f64>], profile: &StabilityProfile, reading: StabilityReading) -> Vec<Vec<f64>> {
    rows.iter()
        .enumerate()
        .map(|(t, row)| {
            let w = match reading {
                StabilityReading::Normalized => profile.instability[t],
                StabilityReading::Raw => profile.divergence[t].max(0.0),
            };
            row.iter().map(|&a| (a * w).max(0.0).sqrt()).collect()
        })
        .collect()
}

/// Per-factor `M x M` adjacencies; row `i` holds the weights anchor `i` uses.
#[derive(Clone, Debug, PartialEq)]
pub struct InterSessionGraphSet {
    pub adjacency: Vec<Tensor>,
}

impl InterSessionGraphSet {
    pub fn k(&self) -> usize {
        self.adjacency.len()
    }

    /// Apply each anchor's own stability profile to its rows.
    pub fn stability_weighted(
        weights: &[Tensor],
        profiles: &[StabilityProfile],
        reading: StabilityReading,
    ) -> Result<Self, DiffError> {
        let m = profiles.len();
        if weights.iter().any(|w| w.shape() != [m, m]) {
            return Err(DiffError::InvalidArgument("one profile per batch session"));
        }
        let mut adjacency: Vec<Tensor> = weights.to_vec();
        for (i, profile) in profiles.iter().enumerate() {
            let rows: Vec<Vec<f64>> = weights.iter().map(|w| w.row_slice(i).to_vec()).collect();
            for (t, row) in apply_stability(&rows, profile, reading).into_iter().enumerate() {
                for (j, v) in row.into_iter().enumerate() {
                    adjacency[t].set(i, j, v);
                }
            }
        }
        Ok(Self { adjacency })
    }
}

/// Row-wise cosine matrix of `x`.
pub fn cosine_matrix_var(g: &mut Graph, x: Var) -> Result<Var, DiffError> {
    let n = g.normalize_rows(x, NORM_EPS)?;
    let nt = g.transpose(n)?;
    g.matmul(n, nt)
}

/// Divergence `D` (`m x 1`) of one factor from stacked unit rows
/// (`p x d_f`) whose session is given by `segments`, using
/// `sum_{i != j} u_i . u_j = |sum u|^2 - sum |u|^2` on normalized rows.
pub fn divergence_var(g: &mut Graph, units: Var, segments: &[usize], m: usize) -> Result<Var, DiffError> {
    let u = g.normalize_rows(units, NORM_EPS)?;
    let total = g.segment_sum(u, segments, m)?;
    let sq_total = g.square(total)?;
    let cross_and_self = g.sum(sq_total, Some(1))?;
    let sq = g.square(u)?;
    let self_terms = g.sum(sq, Some(1))?;
    let self_terms = g.segment_sum(self_terms, segments, m)?;
    g.sub(cross_and_self, self_terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disentangle::Activation;
    use proptest::prelude::*;

    fn edges_as_items(g: &IntraSessionGraph) -> Vec<(usize, usize)> {
        g.edges.iter().map(|&(u, w)| (g.nodes[u], g.nodes[w])).collect()
    }

    #[test]
    fn intra_graph_of_worked_session() {
        let g = build_intra_graph(&Session::new(vec![1, 2, 3, 4, 2])).unwrap();
        assert_eq!(g.nodes, vec![1, 2, 3, 4]);
        assert_eq!(g.alias, vec![0, 1, 2, 3, 1]);
        assert_eq!(edges_as_items(&g), vec![(1, 2), (2, 3), (3, 4), (4, 2)]);
        // v2 has two incoming edges (from v1 and v4)
        assert_eq!(g.a_in.get(1, 0), 0.5);
        assert_eq!(g.a_in.get(1, 3), 0.5);
    }

    #[test]
    fn intra_graph_small_cases() {
        let single = build_intra_graph(&Session::new(vec![7])).unwrap();
        assert_eq!(single.nodes, vec![7]);
        assert!(single.edges.is_empty());
        assert_eq!(single.a_in.data(), &[0.0]);

        let g = build_intra_graph(&Session::new(vec![0, 1, 0, 1])).unwrap();
        assert_eq!(edges_as_items(&g), vec![(0, 1), (1, 0)]);
        assert_eq!(g.a_out.row_slice(0).iter().sum::<f64>(), 1.0);
        assert_eq!(g.a_out.get(0, 1), 1.0);
        assert!(build_intra_graph(&Session::new(vec![])).is_err());
    }

    #[test]
    fn inter_base_links_shared_items() {
        let s = [Session::new(vec![0, 1]), Session::new(vec![1, 2]), Session::new(vec![3])];
        let base = build_inter_base(&s);
        assert_eq!(base.edges(), vec![(0, 1)]);
        assert!(!base.linked(2, 0) && !base.linked(0, 0));
        assert_eq!(base.mask().get(1, 0), 1.0);

        let same = vec![Session::new(vec![4, 5]); 3];
        assert_eq!(build_inter_base(&same).edges(), vec![(0, 1), (0, 2), (1, 2)]);
        assert!(build_inter_base_by_origin(&same, &[0, 0, 1]).edges() == vec![(0, 2), (1, 2)]);
        assert!(build_inter_base(&same[..1]).edges().is_empty());
    }

    #[test]
    fn similarity_examples() {
        assert!((cosine(&[1.0, 0.0], &[1.0, 1.0]) - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 2.0]), 0.0);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
        let s = vec![Session::new(vec![0]); 2];
        let base = build_inter_base(&s);
        let f = |a: f64, b: f64| FactorEmbedding::new(vec![vec![a, b], vec![-a, b]]).unwrap();
        let w = factor_similarity_weights(&base, &[f(1.0, 0.0), f(-1.0, 0.0)]).unwrap();
        assert_eq!(w.len(), 2);
        // opposite directions clamp to zero on both factors
        assert_eq!(w[0].get(0, 1), 0.0);
        let w = factor_similarity_weights(&base, &[f(1.0, 0.0), f(1.0, 1.0)]).unwrap();
        assert!((w[0].get(0, 1) - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(w[0].get(0, 0), 0.0);
    }

    fn drl(d: usize, k: usize, seed: u64) -> DrlParams {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let b = Tensor::from_fn(1, d, |_, _| rng.random_range(-0.1..0.1));
        DrlParams::from_stacked(&w, &b, k, Activation::Sigmoid).unwrap()
    }

    #[test]
    fn interest_unit_expansion() {
        let table = Tensor::from_fn(3, 4, |r, c| (r as f64 - 1.0) * (c as f64 + 0.5));
        let p = drl(4, 2, 3);
        let units = interest_units(&Session::new(vec![0, 2]), &table, &p).unwrap();
        assert_eq!(units.len(), 2);
        assert_eq!(units[0], drl_project(table.row_slice(0), &p).unwrap());
        let mean: Vec<f64> = (0..4).map(|c| (table.get(0, c) + table.get(2, c)) / 2.0).collect();
        assert_eq!(units[1], drl_project(&mean, &p).unwrap());
        let constant = interest_units(&Session::new(vec![1, 1, 1]), &table, &p).unwrap();
        assert!(constant.iter().all(|u| u == &constant[0]));
    }

    #[test]
    fn stability_examples() {
        let unit = FactorEmbedding::new(vec![vec![1.0, 0.5]; 4]).unwrap();
        let p = stability(&[unit.clone()]).unwrap();
        assert_eq!(p.divergence, vec![0.0; 4]);
        assert!(p.instability.iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let n = 5;
        let c = FactorEmbedding::new(vec![vec![1.0, 2.0], vec![0.3, -0.1]]).unwrap();
        let p = stability(&vec![c; n]).unwrap();
        for d in &p.divergence {
            assert!((d - (n * (n - 1)) as f64).abs() < 1e-9);
        }
        assert!((p.instability[0] - 0.5).abs() < 1e-12);

        let soft = softmax(&[2.0, 0.0]);
        assert!((soft[0] - 0.8808).abs() < 1e-4 && (soft[1] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn stability_weighting_examples() {
        let profile = |inst: Vec<f64>| StabilityProfile {
            divergence: vec![0.0; inst.len()],
            instability: inst,
        };
        let out = apply_stability(&[vec![0.64, 0.0]], &profile(vec![0.25]), StabilityReading::Normalized);
        assert!((out[0][0] - 0.4).abs() < 1e-12);
        assert_eq!(out[0][1], 0.0);

        let iota = softmax(&[2.0, 0.0]);
        let out = apply_stability(&[vec![0.5], vec![0.5]], &profile(iota), StabilityReading::Normalized);
        assert!((out[0][0] - 0.6636).abs() < 1e-4);
        assert!((out[1][0] - 0.2441).abs() < 1e-4);

        let raw = StabilityProfile {
            divergence: vec![4.0, -1.0],
            instability: vec![0.5, 0.5],
        };
        let out = apply_stability(&[vec![0.25], vec![0.25]], &raw, StabilityReading::Raw);
        assert_eq!(out, vec![vec![1.0], vec![0.0]]);
    }

    #[test]
    fn anchors_get_asymmetric_rows_when_profiles_differ() {
        let w = vec![Tensor::from_rows(&[vec![0.0, 0.5], vec![0.5, 0.0]]).unwrap()];
        let a = StabilityProfile {
            divergence: vec![0.0],
            instability: vec![0.9],
        };
        let b = StabilityProfile {
            divergence: vec![0.0],
            instability: vec![0.1],
        };
        let set = InterSessionGraphSet::stability_weighted(&w, &[a, b], StabilityReading::Normalized).unwrap();
        assert_ne!(set.adjacency[0].get(0, 1), set.adjacency[0].get(1, 0));
    }

    #[test]
    fn tape_divergence_matches_plain() {
        let table = Tensor::from_fn(6, 4, |r, c| ((r * 7 + c * 3) % 5) as f64 - 2.0);
        let p = drl(4, 2, 8);
        let sessions = [Session::new(vec![0, 3, 5]), Session::new(vec![2]), Session::new(vec![1, 1, 4, 0])];
        let mut rows = Vec::new();
        let mut segments = Vec::new();
        let mut plain = Vec::new();
        for (si, s) in sessions.iter().enumerate() {
            let units = interest_units(s, &table, &p).unwrap();
            plain.push(stability(&units).unwrap());
            for u in units {
                rows.push(u.factor(1).to_vec());
                segments.push(si);
            }
        }
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_rows(&rows).unwrap()).unwrap();
        let d = divergence_var(&mut g, x, &segments, 3).unwrap();
        for (si, prof) in plain.iter().enumerate() {
            assert!((g.value(d).get(si, 0) - prof.divergence[1]).abs() < 1e-12);
        }

        let m = g.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap()).unwrap();
        let cos = cosine_matrix_var(&mut g, m).unwrap();
        assert!((g.value(cos).get(0, 1) - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(g.value(cos).get(2, 0), 0.0);
    }

    fn arb_session(n: usize) -> impl Strategy<Value = Session> {
        prop::collection::vec(0..n, 1..8).prop_map(Session::new)
    }

    proptest! {
        #[test]
        fn intra_graph_invariants(s in arb_session(6)) {
            let g = build_intra_graph(&s).unwrap();
            let distinct: HashSet<usize> = s.items.iter().copied().collect();
            prop_assert_eq!(g.nodes.len(), distinct.len());
            prop_assert!(g.alias.iter().all(|&a| a < g.nodes.len()));
            for w in s.items.windows(2) {
                prop_assert!(edges_as_items(&g).contains(&(w[0], w[1])));
            }
            for adj in [&g.a_in, &g.a_out] {
                for r in 0..adj.rows() {
                    let sum: f64 = adj.row_slice(r).iter().sum();
                    prop_assert!(sum == 0.0 || (sum - 1.0).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn incidence_is_symmetric(ss in prop::collection::vec(arb_session(5), 1..7)) {
            let base = build_inter_base(&ss);
            for i in 0..ss.len() {
                prop_assert!(!base.linked(i, i));
                for j in 0..ss.len() {
                    prop_assert_eq!(base.linked(i, j), base.linked(j, i));
                }
            }
        }

        #[test]
        fn profile_and_weight_bounds(
            raw in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 6), 1..6),
            a in 0.0f64..1.0,
        ) {
            let units: Vec<FactorEmbedding> =
                raw.iter().map(|r| FactorEmbedding::from_concat(r, 3).unwrap()).collect();
            let p = stability(&units).unwrap();
            prop_assert!((p.instability.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.instability.iter().all(|&v| v > 0.0 && v <= 1.0));
            let rows = vec![vec![a]; 3];
            for row in apply_stability(&rows, &p, StabilityReading::Normalized) {
                prop_assert!((0.0..=1.0).contains(&row[0]));
            }
        }
    }
}
