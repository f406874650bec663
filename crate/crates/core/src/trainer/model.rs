use std::collections::BTreeSet;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::Example;
use crate::diffcore::{Bindings, DiffError, Graph, ParamStore, SparseMatrix, Tensor, Var};
use crate::disentangle::{dcor_loss_var, drl_project_var, DrlParams};
use crate::graphbuild::{build_inter_base_by_origin, cosine_matrix_var, divergence_var, StabilityReading};
use crate::inter_encoder::inter_convolve_var;
use crate::intra_encoder::{
    encode_batch_var, ggnn_propagate_var, AttentionChannel, AttentionParams, GgnnChannel, GgnnParams, IntraBatch,
};
use crate::objective::{contrastive_loss_var, fuse_var, prediction_loss_var, Corruption, Discriminator};

use super::{TrainConfig, TrainError, Variant};

pub const ITEM_EMBEDDING: &str = "item_embedding";
pub const BILINEAR: &str = "cl.bilinear";

/// Where a factor projection is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DrlSite {
    Item,
    /// Sessions and interest units.
    Session,
}

pub fn drl_names(cfg: &TrainConfig, site: DrlSite) -> (String, String) {
    let prefix = match (cfg.drl_tied, site) {
        (true, _) => "drl",
        (false, DrlSite::Item) => "drl.item",
        (false, DrlSite::Session) => "drl.session",
    };
    (format!("{prefix}.weight"), format!("{prefix}.bias"))
}

pub fn ggnn_name(t: usize, field: &str) -> String {
    format!("ggnn.{t}.{field}")
}

pub fn attention_name(t: usize, field: &str) -> String {
    format!("attn.{t}.{field}")
}

pub fn fusion_names(t: usize) -> (String, String) {
    (format!("fuse.{t}.w1"), format!("fuse.{t}.w2"))
}

/// Parameter names and shapes in registration order.
pub fn parameter_layout(cfg: &TrainConfig, num_items: usize) -> Vec<(String, (usize, usize))> {
    let (d, k, d_f) = (cfg.d, cfg.k, cfg.d_f());
    let mut out = vec![(ITEM_EMBEDDING.to_string(), (num_items, d))];
    let sites: &[DrlSite] = if cfg.drl_tied {
        &[DrlSite::Item]
    } else {
        &[DrlSite::Item, DrlSite::Session]
    };
    for &site in sites {
        let (w, b) = drl_names(cfg, site);
        out.push((w, (d, k * d_f)));
        out.push((b, (1, k * d_f)));
    }
    for t in 0..k {
        for (field, shape) in GgnnChannel::<()>::FIELDS.iter().zip(GgnnChannel::<()>::shapes(d_f)) {
            out.push((ggnn_name(t, field), shape));
        }
        for (field, shape) in AttentionChannel::<()>::FIELDS.iter().zip(AttentionChannel::<()>::shapes(d_f)) {
            out.push((attention_name(t, field), shape));
        }
        let (w1, w2) = fusion_names(t);
        out.push((w1, (d_f, d_f)));
        out.push((w2, (d_f, d_f)));
    }
    if cfg.discriminator == Discriminator::Bilinear {
        out.push((BILINEAR.to_string(), (k * d_f, k * d_f)));
    }
    out
}

/// Learned state plus the configuration it was built for.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: TrainConfig,
    pub num_items: usize,
    pub params: ParamStore,
}

/// Recorded outputs of one forward pass.
pub struct Forward {
    /// `M x N` candidate scores.
    pub logits: Var,
    pub probs: Var,
    /// Per-factor `M x M` inter-session adjacency.
    pub adjacency: Vec<Var>,
    pub losses: Option<LossVars>,
}

pub struct LossVars {
    pub total: Var,
    pub prediction: Var,
    pub disentangle: Option<Var>,
    /// Contrastive sum divided by the batch size.
    pub contrastive: Option<Var>,
}

fn stage<T>(component: &'static str, r: Result<T, DiffError>) -> Result<T, TrainError> {
    r.map_err(|source| TrainError::Forward { component, source })
}

impl Model {
    /// Every parameter drawn from `U(-1/sqrt(d), 1/sqrt(d))`.
    pub fn init(cfg: &TrainConfig, num_items: usize) -> Result<Self, TrainError> {
        cfg.validate()?;
        if num_items < 2 {
            return Err(TrainError::Config("need at least 2 items".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let stdv = 1.0 / (cfg.d as f64).sqrt();
        let mut params = ParamStore::new();
        for (name, (r, c)) in parameter_layout(cfg, num_items) {
            let value = Tensor::from_fn(r, c, |_, _| rng.random_range(-stdv..stdv));
            params.register(name, value)?;
        }
        Ok(Self {
            config: cfg.clone(),
            num_items,
            params,
        })
    }

    /// Rebuild around existing parameters, checking the layout.
    pub fn from_params(cfg: &TrainConfig, num_items: usize, params: ParamStore) -> Result<Self, TrainError> {
        cfg.validate()?;
        let layout = parameter_layout(cfg, num_items);
        if layout.len() != params.len() {
            return Err(TrainError::Config("parameter count does not match configuration".into()));
        }
        for ((name, (r, c)), (have, t)) in layout.iter().zip(params.iter()) {
            if name != have || t.shape() != [*r, *c] {
                return Err(TrainError::Config(format!("parameter `{have}` does not match layout entry `{name}`")));
            }
        }
        Ok(Self {
            config: cfg.clone(),
            num_items,
            params,
        })
    }

    /// Plain factor projection parameters for `site`.
    pub fn drl_params(&self, site: DrlSite) -> Result<DrlParams, TrainError> {
        let (w, b) = drl_names(&self.config, site);
        Ok(DrlParams::from_stacked(
            self.params.get(&w)?,
            self.params.get(&b)?,
            self.config.k,
            self.config.drl_activation,
        )?)
    }

    pub fn ggnn_params(&self) -> Result<GgnnParams, TrainError> {
        let channels = (0..self.config.k)
            .map(|t| GgnnChannel::try_from_fn(|f| self.params.get(&ggnn_name(t, f)).cloned()))
            .collect::<Result<_, _>>()?;
        Ok(GgnnParams {
            channels,
            steps: self.config.ggnn_steps,
        })
    }

    pub fn attention_params(&self) -> Result<AttentionParams, TrainError> {
        let channels = (0..self.config.k)
            .map(|t| AttentionChannel::try_from_fn(|f| self.params.get(&attention_name(t, f)).cloned()))
            .collect::<Result<_, _>>()?;
        Ok(AttentionParams { channels })
    }

    fn drl_var(&self, g: &mut Graph, b: &Bindings, x: Var, site: DrlSite) -> Result<Var, DiffError> {
        let (w, bias) = drl_names(&self.config, site);
        drl_project_var(g, x, b.var(&w)?, b.var(&bias)?, self.config.drl_activation)
    }

    /// Record the full model on `g` for one batch. Loss terms are built when
    /// `contrastive_seed` is given.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bindings,
        batch: &[Example],
        contrastive_seed: Option<u64>,
    ) -> Result<Forward, TrainError> {
        let cfg = &self.config;
        let (k, d_f, n) = (cfg.k, cfg.d_f(), self.num_items);
        let m = batch.len();
        if m == 0 {
            return Err(TrainError::Config("empty batch".into()));
        }
        for e in batch {
            if e.target >= n || e.prefix.items.iter().any(|&i| i >= n) || e.prefix.is_empty() {
                return Err(TrainError::VocabularyMismatch);
            }
        }
        let sessions: Vec<_> = batch.iter().map(|e| e.prefix.clone()).collect();
        let origins: Vec<usize> = batch.iter().map(|e| e.origin).collect();

        let table = stage("embedding", b.var(ITEM_EMBEDDING))?;
        let item_f = stage("disentangle", self.drl_var(g, b, table, DrlSite::Item))?;

        // intra-session view
        let intra = stage("intra_encoder", IntraBatch::new(&sessions))?;
        let local = stage("intra_encoder", (|| {
            let nodes = g.gather_rows(item_f, &intra.node_items)?;
            let mut out = Vec::with_capacity(k);
            for t in 0..k {
                let gg = GgnnChannel::try_from_fn(|f| b.var(&ggnn_name(t, f)))?;
                let at = AttentionChannel::try_from_fn(|f| b.var(&attention_name(t, f)))?;
                let h = g.slice(nodes, 1, t * d_f, d_f)?;
                let h = ggnn_propagate_var(g, &intra, h, &gg, cfg.ggnn_steps)?;
                out.push(encode_batch_var(g, &intra, h, &at)?);
            }
            Ok(out)
        })())?;

        // session and interest-unit factors
        let mut session_mean = Vec::new();
        let mut unit_mean = Vec::new();
        for (i, s) in sessions.iter().enumerate() {
            let w = 1.0 / s.len() as f64;
            session_mean.extend(s.items.iter().map(|&it| (i, it, w)));
        }
        let mut p = 0;
        for s in &sessions {
            for j in 0..s.len() {
                let w = 1.0 / (j + 1) as f64;
                unit_mean.extend(s.items[..=j].iter().map(|&it| (p, it, w)));
                p += 1;
            }
        }
        let session_f = stage("disentangle", (|| {
            let sm = Rc::new(SparseMatrix::from_triplets(m, n, &session_mean));
            let c = g.sparse_matmul(sm, table)?;
            self.drl_var(g, b, c, DrlSite::Session)
        })())?;

        let stability_weights = if cfg.variant == Variant::NoStability {
            None
        } else {
            Some(stage("stability", (|| {
                let um = Rc::new(SparseMatrix::from_triplets(p, n, &unit_mean));
                let u = g.sparse_matmul(um, table)?;
                let units = self.drl_var(g, b, u, DrlSite::Session)?;
                let mut ds = Vec::with_capacity(k);
                for t in 0..k {
                    let ut = g.slice(units, 1, t * d_f, d_f)?;
                    ds.push(divergence_var(g, ut, &intra.position_sessions, m)?);
                }
                let d = g.concat(&ds, 1)?;
                match cfg.stability_reading {
                    StabilityReading::Normalized => g.softmax(d, 1),
                    StabilityReading::Raw => g.relu(d),
                }
            })())?)
        };

        // inter-session graph and view
        let base = build_inter_base_by_origin(&sessions, &origins);
        let (adjacency, global) = stage("graphbuild", (|| {
            let mask = g.leaf(base.mask())?;
            let holistic = if cfg.variant == Variant::NoFactor {
                let cos = cosine_matrix_var(g, session_f)?;
                let cos = g.relu(cos)?;
                Some(g.mul(cos, mask)?)
            } else {
                None
            };
            let mut adjacency = Vec::with_capacity(k);
            let mut global = Vec::with_capacity(k);
            for t in 0..k {
                let ht = g.slice(session_f, 1, t * d_f, d_f)?;
                let mut a = match holistic {
                    Some(a) => a,
                    None => {
                        let cos = cosine_matrix_var(g, ht)?;
                        let cos = g.relu(cos)?;
                        g.mul(cos, mask)?
                    }
                };
                if let Some(w) = stability_weights {
                    let wt = g.slice(w, 1, t, 1)?;
                    let wt = g.broadcast(wt, m, m)?;
                    let scaled = g.mul(a, wt)?;
                    a = g.sqrt(scaled)?;
                }
                adjacency.push(a);
                global.push(inter_convolve_var(g, a, ht, &cfg.inter_conv())?);
            }
            Ok((adjacency, global))
        })())?;

        let (logits, probs) = stage("objective", (|| {
            let mut fused = Vec::with_capacity(k);
            for t in 0..k {
                let (w1, w2) = fusion_names(t);
                fused.push(fuse_var(g, global[t], local[t], b.var(&w1)?, b.var(&w2)?)?);
            }
            let fused = g.concat(&fused, 1)?;
            let items_t = g.transpose(item_f)?;
            let logits = g.matmul(fused, items_t)?;
            let probs = g.softmax(logits, 1)?;
            Ok((logits, probs))
        })())?;

        let losses = match contrastive_seed {
            None => None,
            Some(seed) => Some(self.losses(g, b, batch, item_f, probs, &global, &local, seed)?),
        };
        Ok(Forward {
            logits,
            probs,
            adjacency,
            losses,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn losses(
        &self,
        g: &mut Graph,
        b: &Bindings,
        batch: &[Example],
        item_f: Var,
        probs: Var,
        global: &[Var],
        local: &[Var],
        seed: u64,
    ) -> Result<LossVars, TrainError> {
        let cfg = &self.config;
        let m = batch.len();
        let targets: Vec<usize> = batch.iter().map(|e| e.target).collect();
        let prediction = stage("prediction_loss", prediction_loss_var(g, probs, &targets))?;

        let items: BTreeSet<usize> = batch
            .iter()
            .flat_map(|e| e.prefix.items.iter().copied().chain([e.target]))
            .collect();
        let disentangle = if items.len() >= 2 && cfg.k >= 2 {
            let idx: Vec<usize> = items.into_iter().collect();
            stage("disentangle_loss", (|| {
                let rows = g.gather_rows(item_f, &idx)?;
                dcor_loss_var(g, rows, cfg.k)
            })())?
        } else {
            None
        };

        let contrastive = if m >= 2 {
            Some(stage("contrastive_loss", (|| {
                let gv = g.concat(global, 1)?;
                let lv = g.concat(local, 1)?;
                let cols = g.value(lv).cols();
                let corruption = Corruption::new(m, cols, seed)?;
                let bilinear = match cfg.discriminator {
                    Discriminator::Dot => None,
                    Discriminator::Bilinear => Some(b.var(BILINEAR)?),
                };
                let sum = contrastive_loss_var(g, gv, lv, &corruption, bilinear, cfg.contrastive_form)?;
                g.scale(sum, 1.0 / m as f64)
            })())?)
        } else {
            None
        };

        let total = stage("total_loss", (|| {
            let mut total = prediction;
            if let Some(ld) = disentangle {
                let t = g.scale(ld, cfg.beta1)?;
                total = g.add(total, t)?;
            }
            if let Some(lc) = contrastive {
                let t = g.scale(lc, cfg.beta2)?;
                total = g.add(total, t)?;
            }
            Ok(total)
        })())?;
        Ok(LossVars {
            total,
            prediction,
            disentangle,
            contrastive,
        })
    }
}
