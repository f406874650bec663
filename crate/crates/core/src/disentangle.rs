//! Factor-level re-embedding and the distance-correlation independence loss.

use serde::{Deserialize, Serialize};

use crate::corpus::Session;
use crate::diffcore::{DiffError, Graph, Tensor, Var};

/// Dimension of one factor embedding, `floor(d / k)`.
pub fn factor_dim(d: usize, k: usize) -> Result<usize, DiffError> {
    if k == 0 || d < k {
        return Err(DiffError::InvalidArgument("need d >= k >= 1"));
    }
    Ok(d / k)
}

/// Variance floor below which distance correlation is defined as zero.
pub const DVAR_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Sigmoid,
    Tanh,
    Identity,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
        }
    }

    pub fn apply_var(self, g: &mut Graph, x: Var) -> Result<Var, DiffError> {
        match self {
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Tanh => g.tanh(x),
            Activation::Identity => Ok(x),
            Activation::Relu => g.relu(x),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sigmoid" => Ok(Self::Sigmoid),
            "tanh" => Ok(Self::Tanh),
            "identity" => Ok(Self::Identity),
            "relu" => Ok(Self::Relu),
            other => Err(format!("unknown activation `{other}`")),
        }
    }
}

/// `k` factor embeddings of equal length `d_f`.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorEmbedding {
    factors: Vec<Vec<f64>>,
}

impl FactorEmbedding {
    pub fn new(factors: Vec<Vec<f64>>) -> Result<Self, DiffError> {
        let d_f = factors.first().map_or(0, Vec::len);
        if d_f == 0 || factors.iter().any(|f| f.len() != d_f) {
            return Err(DiffError::Ragged);
        }
        Ok(Self { factors })
    }

    /// Split a concatenated `k * d_f` vector.
    pub fn from_concat(values: &[f64], k: usize) -> Result<Self, DiffError> {
        if k == 0 || values.len() % k != 0 {
            return Err(DiffError::InvalidArgument("length is not a multiple of k"));
        }
        Self::new(values.chunks(values.len() / k).map(<[f64]>::to_vec).collect())
    }

    pub fn k(&self) -> usize {
        self.factors.len()
    }

    pub fn d_f(&self) -> usize {
        self.factors[0].len()
    }

    pub fn factor(&self, t: usize) -> &[f64] {
        &self.factors[t]
    }

    pub fn factors(&self) -> &[Vec<f64>] {
        &self.factors
    }

    pub fn concat(&self) -> Vec<f64> {
        self.factors.concat()
    }
}

/// Per-factor projections `W_t` (`d x d_f`) and biases `b_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct DrlParams {
    weights: Vec<Tensor>,
    biases: Vec<Vec<f64>>,
    pub activation: Activation,
}

impl DrlParams {
    pub fn new(weights: Vec<Tensor>, biases: Vec<Vec<f64>>, activation: Activation) -> Result<Self, DiffError> {
        let Some(first) = weights.first() else {
            return Err(DiffError::InvalidArgument("at least one factor"));
        };
        let (d, d_f) = first.dims()?;
        if weights.len() != biases.len()
            || weights.iter().any(|w| w.shape() != [d, d_f])
            || biases.iter().any(|b| b.len() != d_f)
        {
            return Err(DiffError::InvalidArgument("inconsistent factor projection shapes"));
        }
        Ok(Self {
            weights,
            biases,
            activation,
        })
    }

    /// Split a stacked `d x (k*d_f)` weight and `1 x (k*d_f)` bias.
    pub fn from_stacked(weight: &Tensor, bias: &Tensor, k: usize, activation: Activation) -> Result<Self, DiffError> {
        let (d, width) = weight.dims()?;
        if k == 0 || width % k != 0 || bias.shape() != [1, width] {
            return Err(DiffError::InvalidArgument("stacked projection does not split into k factors"));
        }
        let d_f = width / k;
        let weights = (0..k)
            .map(|t| Tensor::from_fn(d, d_f, |r, c| weight.get(r, t * d_f + c)))
            .collect();
        let biases = (0..k).map(|t| bias.data()[t * d_f..(t + 1) * d_f].to_vec()).collect();
        Self::new(weights, biases, activation)
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn d_f(&self) -> usize {
        self.weights[0].cols()
    }
}

/// `f^t = act(c^T W_t) + b_t` for every factor.
pub fn drl_project(c: &[f64], params: &DrlParams) -> Result<FactorEmbedding, DiffError> {
    if c.len() != params.input_dim() {
        return Err(DiffError::ShapeMismatch {
            op: "drl_project",
            left: vec![c.len()],
            right: vec![params.input_dim(), params.d_f()],
        });
    }
    let factors = params
        .weights
        .iter()
        .zip(&params.biases)
        .map(|(w, b)| {
            (0..w.cols())
                .map(|j| {
                    let pre: f64 = c.iter().enumerate().map(|(i, &ci)| ci * w.get(i, j)).sum();
                    params.activation.apply(pre) + b[j]
                })
                .collect()
        })
        .collect();
    FactorEmbedding::new(factors)
}

/// Row-wise projection of an `r x d` value with stacked parameters.
pub fn drl_project_var(g: &mut Graph, x: Var, weight: Var, bias: Var, activation: Activation) -> Result<Var, DiffError> {
    let pre = g.matmul(x, weight)?;
    let act = activation.apply_var(g, pre)?;
    let (r, c) = g.value(act).dims()?;
    let b = g.broadcast(bias, r, c)?;
    g.add(act, b)
}

/// Mean of the session's item embeddings, counting repeats.
pub fn session_init_embedding(s: &Session, item_table: &Tensor) -> Result<Vec<f64>, DiffError> {
    if s.is_empty() {
        return Err(DiffError::InvalidArgument("empty session"));
    }
    let d = item_table.cols();
    let mut out = vec![0.0; d];
    for &i in &s.items {
        if i >= item_table.rows() {
            return Err(DiffError::OutOfRange {
                op: "session_init_embedding",
                index: i,
                extent: item_table.rows(),
            });
        }
        for (o, v) in out.iter_mut().zip(item_table.row_slice(i)) {
            *o += v;
        }
    }
    let n = s.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

fn centered_distances(x: &Tensor) -> Tensor {
    let m = x.rows();
    let mut dist = Tensor::zeros(m, m);
    for i in 0..m {
        for j in (i + 1)..m {
            let d = x
                .row_slice(i)
                .iter()
                .zip(x.row_slice(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            dist.set(i, j, d);
            dist.set(j, i, d);
        }
    }
    let row_means: Vec<f64> = (0..m).map(|i| dist.row_slice(i).iter().sum::<f64>() / m as f64).collect();
    let col_means: Vec<f64> = (0..m).map(|j| (0..m).map(|i| dist.get(i, j)).sum::<f64>() / m as f64).collect();
    let grand: f64 = dist.data().iter().sum::<f64>() / (m * m) as f64;
    Tensor::from_fn(m, m, |i, j| dist.get(i, j) - row_means[i] - col_means[j] + grand)
}

fn mean_product(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>() / a.len() as f64
}

/// Sample distance correlation between the rows of `x` and `y`.
pub fn dcor(x: &Tensor, y: &Tensor) -> Result<f64, DiffError> {
    let m = x.rows();
    if m < 2 {
        return Err(DiffError::InvalidArgument("distance correlation needs at least 2 samples"));
    }
    if y.rows() != m {
        return Err(DiffError::ShapeMismatch {
            op: "dcor",
            left: x.shape().to_vec(),
            right: y.shape().to_vec(),
        });
    }
    let a = centered_distances(x);
    let b = centered_distances(y);
    let var_x = mean_product(&a, &a);
    let var_y = mean_product(&b, &b);
    if var_x.sqrt() < DVAR_FLOOR || var_y.sqrt() < DVAR_FLOOR {
        return Ok(0.0);
    }
    let cov = mean_product(&a, &b).max(0.0);
    Ok((cov / (var_x * var_y).sqrt()).sqrt())
}

/// `sum_t sum_{j != t} dCor(F^t, F^j)` over one batch of items.
pub fn dcor_loss(batch_factors: &[FactorEmbedding]) -> Result<f64, DiffError> {
    if batch_factors.len() < 2 {
        return Err(DiffError::InvalidArgument("distance correlation needs at least 2 samples"));
    }
    let k = batch_factors[0].k();
    let stacks: Vec<Tensor> = (0..k)
        .map(|t| {
            Tensor::from_rows(&batch_factors.iter().map(|f| f.factor(t).to_vec()).collect::<Vec<_>>())
        })
        .collect::<Result<_, _>>()?;
    let mut total = 0.0;
    for t in 0..k {
        for j in (t + 1)..k {
            total += 2.0 * dcor(&stacks[t], &stacks[j])?;
        }
    }
    Ok(total)
}

/// Double-centered pairwise distance matrix and its `dVar^2`.
fn centered_var(g: &mut Graph, x: Var) -> Result<(Var, Var), DiffError> {
    let d = g.pairwise_distances(x)?;
    let m = g.value(d).rows();
    let rm = g.mean(d, Some(1))?;
    let cm = g.mean(d, Some(0))?;
    let gm = g.mean(d, None)?;
    let rm = g.broadcast(rm, m, m)?;
    let cm = g.broadcast(cm, m, m)?;
    let gm = g.broadcast(gm, m, m)?;
    let a = g.sub(d, rm)?;
    let a = g.sub(a, cm)?;
    let a = g.add(a, gm)?;
    let sq = g.mul(a, a)?;
    let var = g.mean(sq, None)?;
    Ok((a, var))
}

/// Differentiable [`dcor_loss`] over the rows of `factors` (`m x k*d_f`).
/// Pairs under the variance floor contribute a constant zero.
pub fn dcor_loss_var(g: &mut Graph, factors: Var, k: usize) -> Result<Option<Var>, DiffError> {
    let (m, width) = g.value(factors).dims()?;
    if m < 2 {
        return Err(DiffError::InvalidArgument("distance correlation needs at least 2 samples"));
    }
    if k < 2 {
        return Ok(None);
    }
    let d_f = width / k;
    let mut centered = Vec::with_capacity(k);
    for t in 0..k {
        let x = g.slice(factors, 1, t * d_f, d_f)?;
        centered.push(centered_var(g, x)?);
    }
    let mut terms = Vec::new();
    for t in 0..k {
        for j in (t + 1)..k {
            let (a, va) = centered[t];
            let (b, vb) = centered[j];
            let (vx, vy) = (g.value(va).item(), g.value(vb).item());
            if vx.sqrt() < DVAR_FLOOR || vy.sqrt() < DVAR_FLOOR {
                continue;
            }
            let prod = g.mul(a, b)?;
            let cov = g.mean(prod, None)?;
            let cov = g.relu(cov)?;
            let vv = g.mul(va, vb)?;
            let denom = g.sqrt(vv)?;
            let ratio = g.div(cov, denom)?;
            let dc = g.sqrt(ratio)?;
            terms.push(dc);
        }
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let stacked = g.concat(&terms, 1)?;
    let sum = g.sum(stacked, None)?;
    Ok(Some(g.scale(sum, 2.0)?))
}
