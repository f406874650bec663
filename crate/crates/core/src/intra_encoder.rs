//! Per-factor gated propagation over intra-session graphs and the soft
//! attention read-out of each session.
//!
//! Parameter bundles are generic over their storage so the same layout is
//! used for plain tensors and for values recorded on a [`Graph`]. All
//! products use row vectors: a node state is a `1 x d_f` row and a layer
//! computes `h W + b`.

use std::rc::Rc;

use crate::corpus::Session;
use crate::diffcore::{DiffError, Graph, SparseMatrix, Tensor, Var};
use crate::disentangle::FactorEmbedding;
use crate::graphbuild::{build_intra_graph, IntraSessionGraph};

/// GGNN weights of one factor channel. Gate blocks are ordered
/// (reset, update, candidate).
#[derive(Clone, Debug, PartialEq)]
pub struct GgnnChannel<T> {
    /// `d_f x d_f`
    pub w_in: T,
    /// `1 x d_f`
    pub b_in: T,
    pub w_out: T,
    pub b_out: T,
    /// `2 d_f x 3 d_f`
    pub w_ih: T,
    /// `1 x 3 d_f`
    pub b_ih: T,
    /// `d_f x 3 d_f`
    pub w_hh: T,
    pub b_hh: T,
}

impl<T> GgnnChannel<T> {
    pub const FIELDS: [&'static str; 8] = ["w_in", "b_in", "w_out", "b_out", "w_ih", "b_ih", "w_hh", "b_hh"];

    pub fn shapes(d_f: usize) -> [(usize, usize); 8] {
        [
            (d_f, d_f),
            (1, d_f),
            (d_f, d_f),
            (1, d_f),
            (2 * d_f, 3 * d_f),
            (1, 3 * d_f),
            (d_f, 3 * d_f),
            (1, 3 * d_f),
        ]
    }

    /// Build from a fallible per-field constructor, called in [`Self::FIELDS`] order.
    pub fn try_from_fn<E>(mut f: impl FnMut(&'static str) -> Result<T, E>) -> Result<Self, E> {
        Ok(Self {
            w_in: f("w_in")?,
            b_in: f("b_in")?,
            w_out: f("w_out")?,
            b_out: f("b_out")?,
            w_ih: f("w_ih")?,
            b_ih: f("b_ih")?,
            w_hh: f("w_hh")?,
            b_hh: f("b_hh")?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GgnnParams {
    pub channels: Vec<GgnnChannel<Tensor>>,
    pub steps: usize,
}

/// Attention weights of one factor channel.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionChannel<T> {
    /// `d_f x 1`
    pub q: T,
    /// `d_f x d_f`, applied to every position
    pub w1: T,
    /// `d_f x d_f`, applied to the last position
    pub w2: T,
    /// `2 d_f x d_f`, applied to `[local, global]`
    pub w3: T,
}

impl<T> AttentionChannel<T> {
    pub const FIELDS: [&'static str; 4] = ["q", "w1", "w2", "w3"];

    pub fn shapes(d_f: usize) -> [(usize, usize); 4] {
        [(d_f, 1), (d_f, d_f), (d_f, d_f), (2 * d_f, d_f)]
    }

    pub fn try_from_fn<E>(mut f: impl FnMut(&'static str) -> Result<T, E>) -> Result<Self, E> {
        Ok(Self {
            q: f("q")?,
            w1: f("w1")?,
            w2: f("w2")?,
            w3: f("w3")?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub channels: Vec<AttentionChannel<Tensor>>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn add_bias(x: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_fn(x.rows(), x.cols(), |r, c| x.get(r, c) + b.get(0, c))
}

fn hcat(a: &Tensor, b: &Tensor) -> Tensor {
    let ca = a.cols();
    Tensor::from_fn(a.rows(), ca + b.cols(), |r, c| if c < ca { a.get(r, c) } else { b.get(r, c - ca) })
}

/// One gated update of the node states `h` (`n x d_f`).
pub fn ggnn_step(graph: &IntraSessionGraph, h: &Tensor, ch: &GgnnChannel<Tensor>) -> Result<Tensor, DiffError> {
    let d_f = h.cols();
    let msg_in = graph.a_in.matmul(&add_bias(&h.matmul(&ch.w_in)?, &ch.b_in))?;
    let msg_out = graph.a_out.matmul(&add_bias(&h.matmul(&ch.w_out)?, &ch.b_out))?;
    let gi = add_bias(&hcat(&msg_in, &msg_out).matmul(&ch.w_ih)?, &ch.b_ih);
    let gh = add_bias(&h.matmul(&ch.w_hh)?, &ch.b_hh);
    Ok(Tensor::from_fn(h.rows(), d_f, |r, c| {
        let reset = sigmoid(gi.get(r, c) + gh.get(r, c));
        let update = sigmoid(gi.get(r, d_f + c) + gh.get(r, d_f + c));
        let cand = (gi.get(r, 2 * d_f + c) + reset * gh.get(r, 2 * d_f + c)).tanh();
        (1.0 - update) * cand + update * h.get(r, c)
    }))
}

/// Run every factor channel independently for `params.steps` steps.
pub fn ggnn_propagate(
    graph: &IntraSessionGraph,
    node_factors: &[FactorEmbedding],
    params: &GgnnParams,
) -> Result<Vec<FactorEmbedding>, DiffError> {
    if node_factors.len() != graph.len() {
        return Err(DiffError::InvalidArgument("one factor embedding per graph node"));
    }
    if params.steps == 0 {
        return Err(DiffError::InvalidArgument("at least one propagation step"));
    }
    let k = params.channels.len();
    let mut out: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(k); graph.len()];
    for (t, ch) in params.channels.iter().enumerate() {
        let rows: Vec<Vec<f64>> = node_factors.iter().map(|f| f.factor(t).to_vec()).collect();
        let mut h = Tensor::from_rows(&rows)?;
        for _ in 0..params.steps {
            h = ggnn_step(graph, &h, ch)?;
        }
        for (n, o) in out.iter_mut().enumerate() {
            o.push(h.row_slice(n).to_vec());
        }
    }
    out.into_iter().map(FactorEmbedding::new).collect()
}

/// Soft-attention session vector per factor: `W3 [local, global]`, where
/// global sums `alpha_i f_i` over every session position.
pub fn encode_session(
    graph: &IntraSessionGraph,
    propagated: &[FactorEmbedding],
    params: &AttentionParams,
) -> Result<Vec<Vec<f64>>, DiffError> {
    let last = *graph.alias.last().ok_or(DiffError::InvalidArgument("empty session"))?;
    params
        .channels
        .iter()
        .enumerate()
        .map(|(t, ch)| {
            let local = Tensor::row(propagated[last].factor(t));
            let last_proj = local.matmul(&ch.w2)?;
            let d_f = local.cols();
            let mut global = vec![0.0; d_f];
            for &node in &graph.alias {
                let f = Tensor::row(propagated[node].factor(t));
                let pre = f.matmul(&ch.w1)?;
                let gate = Tensor::from_fn(1, d_f, |_, c| sigmoid(pre.get(0, c) + last_proj.get(0, c)));
                let alpha = gate.matmul(&ch.q)?.item();
                for (g, v) in global.iter_mut().zip(f.data()) {
                    *g += alpha * v;
                }
            }
            let out = hcat(&local, &Tensor::row(&global)).matmul(&ch.w3)?;
            Ok(out.into_data())
        })
        .collect()
}

/// Block-diagonal layout of a batch of intra-session graphs.
#[derive(Clone, Debug)]
pub struct IntraBatch {
    /// Item index of every node, sessions laid out back to back.
    pub node_items: Vec<usize>,
    pub a_in: Rc<SparseMatrix>,
    pub a_out: Rc<SparseMatrix>,
    /// Global node index of every session position.
    pub position_nodes: Vec<usize>,
    /// Session of every position.
    pub position_sessions: Vec<usize>,
    /// Global node index of each session's last item.
    pub last_nodes: Vec<usize>,
    pub sessions: usize,
}

impl IntraBatch {
    pub fn new(sessions: &[Session]) -> Result<Self, DiffError> {
        if sessions.is_empty() {
            return Err(DiffError::InvalidArgument("empty batch"));
        }
        let mut node_items = Vec::new();
        let mut in_triplets = Vec::new();
        let mut out_triplets = Vec::new();
        let mut position_nodes = Vec::new();
        let mut position_sessions = Vec::new();
        let mut last_nodes = Vec::with_capacity(sessions.len());
        for (si, s) in sessions.iter().enumerate() {
            let g = build_intra_graph(s)?;
            let base = node_items.len();
            for &(u, w) in &g.edges {
                in_triplets.push((base + w, base + u, g.a_in.get(w, u)));
                out_triplets.push((base + u, base + w, g.a_out.get(u, w)));
            }
            position_nodes.extend(g.alias.iter().map(|a| base + a));
            position_sessions.extend(std::iter::repeat_n(si, g.alias.len()));
            last_nodes.push(base + g.alias[g.alias.len() - 1]);
            node_items.extend(g.nodes);
        }
        let n = node_items.len();
        Ok(Self {
            node_items,
            a_in: Rc::new(SparseMatrix::from_triplets(n, n, &in_triplets)),
            a_out: Rc::new(SparseMatrix::from_triplets(n, n, &out_triplets)),
            position_nodes,
            position_sessions,
            last_nodes,
            sessions: sessions.len(),
        })
    }
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var, DiffError> {
    let y = g.matmul(x, w)?;
    let (r, c) = g.value(y).dims()?;
    let b = g.broadcast(b, r, c)?;
    g.add(y, b)
}

/// Recorded [`ggnn_step`] over a whole batch.
pub fn ggnn_step_var(g: &mut Graph, batch: &IntraBatch, h: Var, ch: &GgnnChannel<Var>) -> Result<Var, DiffError> {
    let d_f = g.value(h).cols();
    let pin = linear(g, h, ch.w_in, ch.b_in)?;
    let msg_in = g.sparse_matmul(Rc::clone(&batch.a_in), pin)?;
    let pout = linear(g, h, ch.w_out, ch.b_out)?;
    let msg_out = g.sparse_matmul(Rc::clone(&batch.a_out), pout)?;
    let msgs = g.concat(&[msg_in, msg_out], 1)?;
    let gi = linear(g, msgs, ch.w_ih, ch.b_ih)?;
    let gh = linear(g, h, ch.w_hh, ch.b_hh)?;
    let split = |g: &mut Graph, x: Var, i: usize| g.slice(x, 1, i * d_f, d_f);
    let (i_r, i_z, i_n) = (split(g, gi, 0)?, split(g, gi, 1)?, split(g, gi, 2)?);
    let (h_r, h_z, h_n) = (split(g, gh, 0)?, split(g, gh, 1)?, split(g, gh, 2)?);
    let reset = g.add(i_r, h_r)?;
    let reset = g.sigmoid(reset)?;
    let update = g.add(i_z, h_z)?;
    let update = g.sigmoid(update)?;
    let gated = g.mul(reset, h_n)?;
    let cand = g.add(i_n, gated)?;
    let cand = g.tanh(cand)?;
    // (1 - z) n + z h  =  n + z (h - n)
    let diff = g.sub(h, cand)?;
    let keep = g.mul(update, diff)?;
    g.add(cand, keep)
}

pub fn ggnn_propagate_var(
    g: &mut Graph,
    batch: &IntraBatch,
    h: Var,
    ch: &GgnnChannel<Var>,
    steps: usize,
) -> Result<Var, DiffError> {
    if steps == 0 {
        return Err(DiffError::InvalidArgument("at least one propagation step"));
    }
    let mut h = h;
    for _ in 0..steps {
        h = ggnn_step_var(g, batch, h, ch)?;
    }
    Ok(h)
}

/// Recorded [`encode_session`] for every session of the batch (`M x d_f`).
pub fn encode_batch_var(g: &mut Graph, batch: &IntraBatch, nodes: Var, ch: &AttentionChannel<Var>) -> Result<Var, DiffError> {
    let positions = g.gather_rows(nodes, &batch.position_nodes)?;
    let local = g.gather_rows(nodes, &batch.last_nodes)?;
    let last_proj = g.matmul(local, ch.w2)?;
    let last_proj = g.gather_rows(last_proj, &batch.position_sessions)?;
    let pos_proj = g.matmul(positions, ch.w1)?;
    let pre = g.add(pos_proj, last_proj)?;
    let gate = g.sigmoid(pre)?;
    let alpha = g.matmul(gate, ch.q)?;
    let (p, d_f) = g.value(positions).dims()?;
    let alpha = g.broadcast(alpha, p, d_f)?;
    let weighted = g.mul(alpha, positions)?;
    let global = g.segment_sum(weighted, &batch.position_sessions, batch.sessions)?;
    let both = g.concat(&[local, global], 1)?;
    g.matmul(both, ch.w3)
}
