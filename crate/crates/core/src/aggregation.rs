//! Regional scores, patch aggregation, the global branch, fusion and the
//! asymmetric loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[P_CLAMP, 1 − P_CLAMP]` before logs.
pub const P_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub gamma_plus: f64,
    pub gamma_minus: f64,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma_plus: 0.0,
            gamma_minus: 2.0,
            lambda: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gamma_plus", self.gamma_plus),
            ("gamma_minus", self.gamma_minus),
            ("lambda", self.lambda),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    #[default]
    Soft,
    Hard,
    Average,
}

/// Which prediction branches are trained and fused.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    #[serde(rename = "G")]
    Global,
    #[serde(rename = "R")]
    Regional,
    #[default]
    #[serde(rename = "G+R")]
    Both,
}

impl Branch {
    pub fn uses_global(self) -> bool {
        self != Branch::Regional
    }

    pub fn uses_regional(self) -> bool {
        self != Branch::Global
    }
}

/// `p_R[i][j] = X_fn[i] · T_fn[j]`, shape `M×C`.
pub fn regional_logits(x_fn: &Tensor, t_fn: &Tensor) -> Result<Tensor> {
    x_fn.matmul_t(t_fn)
}

#[derive(Clone, Copy, Debug)]
pub struct AggregateNodes {
    /// Pre-sigmoid aggregated logits, `1×C`.
    pub logits: NodeId,
    /// Patch importances `γ`, `M×C`, for the soft aggregator.
    pub gamma: Option<NodeId>,
}

/// Aggregates `M×C` regional logits over patches.
///
/// The soft aggregator takes `τ = exp(log_tau)`, so `log_tau` must be
/// supplied (a `1×1` node) for [`Aggregator::Soft`].
pub fn aggregate(g: &mut Graph, p_r: NodeId, agg: Aggregator, log_tau: Option<NodeId>) -> Result<AggregateNodes> {
    if g.shape(p_r).0 == 0 {
        return Err(Error::invalid("aggregation needs at least one patch"));
    }
    match agg {
        Aggregator::Soft => {
            let s = log_tau.ok_or_else(|| Error::invalid("soft aggregation needs a temperature"))?;
            let neg = g.scale(s, -1.0);
            let inv_tau = g.exp(neg);
            let pt = g.transpose(p_r);
            let z = g.mul_scalar(pt, inv_tau)?;
            let gamma_t = g.softmax_rows(z, 1.0)?;
            let w = g.mul(gamma_t, pt)?;
            let sum = g.row_sum(w);
            let logits = g.transpose(sum);
            let gamma = g.transpose(gamma_t);
            Ok(AggregateNodes {
                logits,
                gamma: Some(gamma),
            })
        }
        Aggregator::Hard => Ok(AggregateNodes {
            logits: g.col_max(p_r)?,
            gamma: None,
        }),
        Aggregator::Average => Ok(AggregateNodes {
            logits: g.col_mean(p_r),
            gamma: None,
        }),
    }
}

fn aggregate_values(p_r: &Tensor, agg: Aggregator, tau: f64) -> Result<(Vec<f64>, Option<Tensor>)> {
    if agg == Aggregator::Soft && !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let mut g = Graph::inference();
    let p = g.constant(p_r.clone());
    let s = g.constant(Tensor::filled(1, 1, tau.ln()));
    let n = aggregate(&mut g, p, agg, Some(s))?;
    let probs = g.value(n.logits).map(crate::autodiff::sigmoid).into_data();
    Ok((probs, n.gamma.map(|id| g.value(id).clone())))
}

/// `γ = softmax over patches of p_R/τ`, `p̂_j = σ(Σᵢ γᵢⱼ p_Rᵢⱼ)`. Returns
/// `(p̂, γ)`.
pub fn soft_aggregate(p_r: &Tensor, tau: f64) -> Result<(Vec<f64>, Tensor)> {
    let (p, gamma) = aggregate_values(p_r, Aggregator::Soft, tau)?;
    Ok((p, gamma.expect("soft aggregation yields gamma")))
}

/// `σ(column max)`.
pub fn hard_aggregate(p_r: &Tensor) -> Result<Vec<f64>> {
    aggregate_values(p_r, Aggregator::Hard, 1.0).map(|r| r.0)
}

/// `σ(column mean)`.
pub fn average_aggregate(p_r: &Tensor) -> Result<Vec<f64>> {
    aggregate_values(p_r, Aggregator::Average, 1.0).map(|r| r.0)
}

/// `p_G = σ(x₀ T_gᵀ)`.
pub fn global_logits(g: &mut Graph, x0: NodeId, t_g: NodeId) -> Result<NodeId> {
    g.matmul_t(x0, t_g)
}

pub fn global_predict(x0: &Tensor, t_g: &Tensor) -> Result<Vec<f64>> {
    if x0.rows() != 1 {
        return Err(Error::shape("global feature must be a single row"));
    }
    Ok(x0.matmul_t(t_g)?.map(crate::autodiff::sigmoid).into_data())
}

fn check_labels(y: &[f64]) -> Result<()> {
    if let Some(v) = y.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid(format!("label {v} is not 0 or 1")));
    }
    Ok(())
}

/// Asymmetric loss of a `1×C` probability node against multi-hot `y`:
/// `−(1/C) Σ [y(1−p)^γ⁺ log p + (1−y) p^γ⁻ log(1−p)]`.
pub fn asymmetric_loss_node(g: &mut Graph, p: NodeId, y: &[f64], cfg: &LossConfig) -> Result<NodeId> {
    let c = y.len();
    if g.shape(p) != (1, c) || c == 0 {
        return Err(Error::shape(format!(
            "probabilities {:?} do not match {c} labels",
            g.shape(p)
        )));
    }
    check_labels(y)?;
    let yt = g.constant(Tensor::row_vector(y.to_vec()));
    let ny = g.constant(Tensor::row_vector(y.iter().map(|v| 1.0 - v).collect()));
    let pc = g.clamp(p, P_CLAMP, 1.0 - P_CLAMP);
    let qc = g.affine(pc, -1.0, 1.0);
    let log_p = g.log(pc);
    let log_q = g.log(qc);
    let pos = if cfg.gamma_plus == 0.0 {
        log_p
    } else {
        let w = g.powf(qc, cfg.gamma_plus);
        g.mul(w, log_p)?
    };
    let neg = if cfg.gamma_minus == 0.0 {
        log_q
    } else {
        let w = g.powf(pc, cfg.gamma_minus);
        g.mul(w, log_q)?
    };
    let pos = g.mul(pos, yt)?;
    let neg = g.mul(neg, ny)?;
    let both = g.add(pos, neg)?;
    let total = g.sum(both);
    Ok(g.scale(total, -1.0 / c as f64))
}

pub fn asymmetric_loss(p: &[f64], y: &[f64], cfg: &LossConfig) -> Result<f64> {
    if p.len() != y.len() {
        return Err(Error::shape("probabilities and labels differ in length"));
    }
    let mut g = Graph::inference();
    let pn = g.constant(Tensor::row_vector(p.to_vec()));
    let l = asymmetric_loss_node(&mut g, pn, y, cfg)?;
    Ok(g.scalar(l))
}

/// Branch probabilities and their fused score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub p_g: Option<Vec<f64>>,
    pub p_r: Option<Vec<f64>>,
    pub p: Vec<f64>,
}

impl Prediction {
    /// `p = (p_G + p̂_R)/2` when both branches are present, otherwise the
    /// single present branch.
    pub fn fuse(p_g: Option<Vec<f64>>, p_r: Option<Vec<f64>>) -> Result<Self> {
        let p = match (&p_g, &p_r) {
            (Some(a), Some(b)) => {
                if a.len() != b.len() {
                    return Err(Error::shape("branch predictions differ in length"));
                }
                a.iter().zip(b).map(|(x, y)| (x + y) / 2.0).collect()
            }
            (Some(a), None) | (None, Some(a)) => a.clone(),
            (None, None) => return Err(Error::DegenerateConfig("no prediction branch enabled".into())),
        };
        Ok(Self { p_g, p_r, p })
    }
}

/// `L = L_G + λ L_R`, with a missing branch contributing nothing.
pub fn total_loss(pred: &Prediction, y: &[f64], cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    let mut l = 0.0;
    if let Some(pg) = &pred.p_g {
        l += asymmetric_loss(pg, y, cfg)?;
    }
    if let Some(pr) = &pred.p_r {
        l += cfg.lambda * asymmetric_loss(pr, y, cfg)?;
    }
    Ok(l)
}
