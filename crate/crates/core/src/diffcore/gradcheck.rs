use serde::Serialize;

use super::{Bindings, DiffError, Graph, ParamStore, Var};

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub elements: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub loss: f64,
    pub epsilon: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn entry(&self, name: &str) -> Option<&GradCheckEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

fn evaluate<F, E>(loss_fn: &F, params: &ParamStore) -> Result<(f64, Graph, Bindings, Var), E>
where
    F: Fn(&mut Graph, &Bindings) -> Result<Var, E>,
    E: From<DiffError>,
{
    let mut g = Graph::new();
    let binds = params.bind(&mut g)?;
    let loss = loss_fn(&mut g, &binds)?;
    let value = g.value(loss);
    if value.shape() != [1, 1] {
        return Err(DiffError::NonScalarLoss(value.shape().to_vec()).into());
    }
    let v = value.item();
    if !v.is_finite() {
        return Err(DiffError::NonFiniteLoss.into());
    }
    Ok((v, g, binds, loss))
}

/// Gradients smaller than this are compared on absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Compare reverse-mode gradients against the fourth-order central
/// difference `(f(x-2e) - 8f(x-e) + 8f(x+e) - f(x+2e)) / 12e` for every
/// element of every parameter.
///
/// Relative error uses the denominator
/// `max(|analytic|, |numeric|, REL_ERROR_FLOOR)`.
pub fn grad_check<F, E>(loss_fn: F, params: &ParamStore, epsilon: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &Bindings) -> Result<Var, E>,
    E: From<DiffError>,
{
    let (loss, g, binds, loss_var) = evaluate(&loss_fn, params)?;
    let mut grads = g.backward(loss_var)?;
    let analytic = binds.gradients(&mut grads, params)?;
    drop(g);

    let mut probe = params.clone();
    let mut entries = Vec::with_capacity(params.len());
    for (name, value) in params.iter() {
        let a = &analytic[name];
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for i in 0..value.len() {
            let original = value.data()[i];
            let mut at = |step: f64| -> Result<f64, E> {
                probe.values_mut(name)?[i] = original + step * epsilon;
                Ok(evaluate(&loss_fn, &probe)?.0)
            };
            let (m2, m1, p1, p2) = (at(-2.0)?, at(-1.0)?, at(1.0)?, at(2.0)?);
            probe.values_mut(name)?[i] = original;

            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * epsilon);
            let exact = a.data()[i];
            let abs = (exact - numeric).abs();
            let denom = exact.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(abs / denom);
        }
        entries.push(GradCheckEntry {
            name: name.to_string(),
            elements: value.len(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    Ok(GradCheckReport {
        loss,
        epsilon,
        entries,
    })
}
