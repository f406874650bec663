//! Contrastive view agreement, fusion gating, scoring and the loss terms.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffError, Graph, Tensor, Var};

/// Floor applied inside every logarithm of the prediction loss.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta1: 0.01,
            beta2: 0.005,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Discriminator {
    /// `H(a, b) = a . b`
    #[default]
    Dot,
    /// `H(a, b) = a W b^T` with a learned square `W`.
    Bilinear,
}

impl std::str::FromStr for Discriminator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dot" => Ok(Self::Dot),
            "bilinear" => Ok(Self::Bilinear),
            other => Err(format!("unknown discriminator `{other}`")),
        }
    }
}

/// How the negative pair enters the contrastive loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContrastiveForm {
    /// `-sum_i [log sigmoid(pos_i) + log(1 - sigmoid(neg_i))]`
    #[default]
    Bce,
    /// `-sum_i [log sigmoid(pos_i) - log sigmoid(neg_i)]`; unbounded below.
    Difference,
}

impl std::str::FromStr for ContrastiveForm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bce" => Ok(Self::Bce),
            "difference" => Ok(Self::Difference),
            other => Err(format!("unknown contrastive form `{other}`")),
        }
    }
}

/// Row and column permutations that corrupt the local view.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corruption {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

impl Corruption {
    pub fn new(m: usize, cols: usize, seed: u64) -> Result<Self, DiffError> {
        if m < 2 {
            return Err(DiffError::InvalidArgument("contrastive loss needs at least 2 sessions"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r: Vec<usize> = (0..m).collect();
        r.shuffle(&mut rng);
        let mut c: Vec<usize> = (0..cols).collect();
        c.shuffle(&mut rng);
        Ok(Self { rows: r, cols: c })
    }

    /// `out[i][c] = x[rows[i]][cols[c]]`
    pub fn apply(&self, x: &Tensor) -> Tensor {
        Tensor::from_fn(x.rows(), x.cols(), |i, c| x.get(self.rows[i], self.cols[c]))
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn pair_scores(a: &Tensor, b: &Tensor, bilinear: Option<&Tensor>) -> Result<Vec<f64>, DiffError> {
    let a = match bilinear {
        Some(w) => a.matmul(w)?,
        None => a.clone(),
    };
    Ok((0..a.rows())
        .map(|i| a.row_slice(i).iter().zip(b.row_slice(i)).map(|(x, y)| x * y).sum())
        .collect())
}

/// Agreement of `(g_i, l_i)` against `(l_i, l~_i)`, where `l~` is the local
/// view shuffled by rows and then by columns; see [`ContrastiveForm`].
pub fn contrastive_loss(
    global_views: &Tensor,
    local_views: &Tensor,
    seed: u64,
    bilinear: Option<&Tensor>,
    form: ContrastiveForm,
) -> Result<f64, DiffError> {
    if global_views.shape() != local_views.shape() {
        return Err(DiffError::ShapeMismatch {
            op: "contrastive_loss",
            left: global_views.shape().to_vec(),
            right: local_views.shape().to_vec(),
        });
    }
    let corruption = Corruption::new(local_views.rows(), local_views.cols(), seed)?;
    contrastive_loss_with(global_views, local_views, &corruption.apply(local_views), bilinear, form)
}

/// [`contrastive_loss`] with an explicit negative view.
pub fn contrastive_loss_with(
    global_views: &Tensor,
    local_views: &Tensor,
    corrupted: &Tensor,
    bilinear: Option<&Tensor>,
    form: ContrastiveForm,
) -> Result<f64, DiffError> {
    let pos = pair_scores(global_views, local_views, bilinear)?;
    let neg = pair_scores(local_views, corrupted, bilinear)?;
    Ok(-pos
        .iter()
        .zip(&neg)
        .map(|(&p, &n)| match form {
            // log(1 - sigmoid(n)) = log sigmoid(-n)
            ContrastiveForm::Bce => log_sigmoid(p) + log_sigmoid(-n),
            ContrastiveForm::Difference => log_sigmoid(p) - log_sigmoid(n),
        })
        .sum::<f64>())
}

fn pair_scores_var(g: &mut Graph, a: Var, b: Var, bilinear: Option<Var>) -> Result<Var, DiffError> {
    let a = match bilinear {
        Some(w) => g.matmul(a, w)?,
        None => a,
    };
    let prod = g.mul(a, b)?;
    g.sum(prod, Some(1))
}

pub fn contrastive_loss_var(
    g: &mut Graph,
    global_views: Var,
    local_views: Var,
    corruption: &Corruption,
    bilinear: Option<Var>,
    form: ContrastiveForm,
) -> Result<Var, DiffError> {
    let shuffled = g.gather_rows(local_views, &corruption.rows)?;
    let shuffled = g.transpose(shuffled)?;
    let shuffled = g.gather_rows(shuffled, &corruption.cols)?;
    let corrupted = g.transpose(shuffled)?;
    let pos = pair_scores_var(g, global_views, local_views, bilinear)?;
    let neg = pair_scores_var(g, local_views, corrupted, bilinear)?;
    let lp = g.log_sigmoid(pos)?;
    let per_session = match form {
        ContrastiveForm::Bce => {
            let flipped = g.scale(neg, -1.0)?;
            let ln = g.log_sigmoid(flipped)?;
            let both = g.add(lp, ln)?;
            g.scale(both, -1.0)?
        }
        ContrastiveForm::Difference => {
            let ln = g.log_sigmoid(neg)?;
            g.sub(ln, lp)?
        }
    };
    g.sum(per_session, None)
}

/// `zeta = sigmoid(g W1 + l W2)`, `out = zeta * g + (1 - zeta) * l`.
pub fn fuse(global: &[f64], local: &[f64], w1: &Tensor, w2: &Tensor) -> Result<Vec<f64>, DiffError> {
    if global.len() != local.len() {
        return Err(DiffError::InvalidArgument("fusion inputs differ in length"));
    }
    let pre_g = Tensor::row(global).matmul(w1)?;
    let pre_l = Tensor::row(local).matmul(w2)?;
    Ok((0..global.len())
        .map(|c| {
            let zeta = 1.0 / (1.0 + (-(pre_g.get(0, c) + pre_l.get(0, c))).exp());
            zeta * global[c] + (1.0 - zeta) * local[c]
        })
        .collect())
}

/// Row-wise [`fuse`] of `M x d_f` views.
pub fn fuse_var(g: &mut Graph, global: Var, local: Var, w1: Var, w2: Var) -> Result<Var, DiffError> {
    let a = g.matmul(global, w1)?;
    let b = g.matmul(local, w2)?;
    let pre = g.add(a, b)?;
    let zeta = g.sigmoid(pre)?;
    let diff = g.sub(global, local)?;
    let gated = g.mul(zeta, diff)?;
    g.add(local, gated)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector {
    pub scores: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Score every candidate by the summed per-factor inner products; the
/// fused session vector and candidate rows are factor-concatenated.
pub fn score(session: &[f64], item_factors: &Tensor) -> Result<ScoreVector, DiffError> {
    if item_factors.cols() != session.len() {
        return Err(DiffError::ShapeMismatch {
            op: "score",
            left: vec![session.len()],
            right: item_factors.shape().to_vec(),
        });
    }
    let scores: Vec<f64> = (0..item_factors.rows())
        .map(|v| item_factors.row_slice(v).iter().zip(session).map(|(a, b)| a * b).sum())
        .collect();
    let probs = crate::graphbuild::softmax(&scores);
    Ok(ScoreVector { scores, probs })
}

/// `-sum_i [y_i log p_i + (1 - y_i) log(1 - p_i)]` with one-hot `y`.
pub fn prediction_loss(probs: &[f64], target: usize) -> Result<f64, DiffError> {
    if target >= probs.len() {
        return Err(DiffError::OutOfRange {
            op: "prediction_loss",
            index: target,
            extent: probs.len(),
        });
    }
    Ok(-probs
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            if i == target {
                p.max(LOG_FLOOR).ln()
            } else {
                (1.0 - p).max(LOG_FLOOR).ln()
            }
        })
        .sum::<f64>())
}

/// Batch mean of [`prediction_loss`] over softmax rows `probs` (`M x N`).
pub fn prediction_loss_var(g: &mut Graph, probs: Var, targets: &[usize]) -> Result<Var, DiffError> {
    let (m, n) = g.value(probs).dims()?;
    if targets.len() != m {
        return Err(DiffError::InvalidArgument("one target per batch row"));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
        return Err(DiffError::OutOfRange {
            op: "prediction_loss",
            index: bad,
            extent: n,
        });
    }
    let y = Tensor::from_fn(m, n, |r, c| if targets[r] == c { 1.0 } else { 0.0 });
    let not_y = y.map(|v| 1.0 - v);
    let y = g.leaf(y)?;
    let not_y = g.leaf(not_y)?;
    let log_p = g.log_clamped(probs, LOG_FLOOR)?;
    let q = g.affine(probs, -1.0, 1.0)?;
    let log_q = g.log_clamped(q, LOG_FLOOR)?;
    let hit = g.mul(y, log_p)?;
    let miss = g.mul(not_y, log_q)?;
    let both = g.add(hit, miss)?;
    let total = g.sum(both, None)?;
    g.scale(total, -1.0 / m as f64)
}

pub fn total_loss(lp: f64, ld: f64, lc: f64, w: &LossWeights) -> Result<f64, DiffError> {
    for (name, v) in [("L_p", lp), ("L_d", ld), ("L_c", lc)] {
        if !v.is_finite() {
            return Err(DiffError::NonFinite { op: name });
        }
    }
    Ok(lp + w.beta1 * ld + w.beta2 * lc)
}
