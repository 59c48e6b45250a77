//! Training objectives: masked-token cross-entropy, number regression in
//! linear and log space, and the two ways of combining them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// `½·L1 + ½·L̃2`.
    #[default]
    Fixed,
    /// `L1/σ1² + L2/(2σ2²) + log σ1 + log σ2` with trainable σ.
    Uncertainty,
}

/// Scalar summary of one batch's objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L1")]
    pub l1: f64,
    #[serde(rename = "L2")]
    pub l2: f64,
    #[serde(rename = "L_tilde2")]
    pub l_tilde2: f64,
    pub combined: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub w1: f64,
    pub w2: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.l1,
            self.l2,
            self.l_tilde2,
            self.combined,
            self.sigma1,
            self.sigma2,
            self.w1,
            self.w2,
        ]
        .iter()
        .all(|x| x.is_finite())
    }
}

/// Mean (optionally class-weighted) cross-entropy of `targets` under
/// `logits` (one row per target).
pub fn mlm_loss(
    g: &mut Graph,
    logits: Var,
    targets: &[usize],
    class_weights: Option<&[f64]>,
) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::Data("no masked positions to score".into()));
    }
    g.cross_entropy(logits, targets, class_weights)
}

fn check_targets(g: &Graph, f2: Var, y2: &[f64]) -> Result<()> {
    if y2.is_empty() {
        return Err(Error::Data("no masked positions to score".into()));
    }
    let v = g.value(f2);
    if v.cols() != 1 || v.rows() != y2.len() {
        return Err(Error::shape("number loss", v.shape(), &[y2.len(), 1]));
    }
    Ok(())
}

/// Mean of `(y2 − f2)²`.
pub fn number_loss_mse(g: &mut Graph, f2: Var, y2: &[f64]) -> Result<Var> {
    check_targets(g, f2, y2)?;
    let y = g.constant(Tensor::from_rows(y2.len(), 1, y2.to_vec())?);
    let d = g.sub(f2, y)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Mean of `(ln(y2+1) − ln(f2+1))²`.
pub fn number_loss_logscaled(g: &mut Graph, f2: Var, y2: &[f64]) -> Result<Var> {
    check_targets(g, f2, y2)?;
    if let Some(bad) = y2.iter().find(|y| !(**y >= 0.0)) {
        return Err(Error::Domain(format!("number target {bad} is negative")));
    }
    let ly = g.constant(Tensor::from_rows(
        y2.len(),
        1,
        y2.iter().map(|y| y.ln_1p()).collect(),
    )?);
    let lf = g.log1p(f2)?;
    let d = g.sub(lf, ly)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

pub fn combined_fixed(l1: f64, l_tilde2: f64) -> f64 {
    0.5 * l1 + 0.5 * l_tilde2
}

pub fn combined_fixed_node(g: &mut Graph, l1: Var, l_tilde2: Var) -> Result<Var> {
    let s = g.add(l1, l_tilde2)?;
    Ok(g.scale(s, 0.5))
}

pub fn combined_uncertainty(l1: f64, l2: f64, sigma1: f64, sigma2: f64) -> Result<f64> {
    if !(sigma1 > 0.0) || !(sigma2 > 0.0) {
        return Err(Error::Domain(format!(
            "noise scales must be positive, got ({sigma1}, {sigma2})"
        )));
    }
    Ok(l1 / (sigma1 * sigma1) + l2 / (2.0 * sigma2 * sigma2) + sigma1.ln() + sigma2.ln())
}

/// Graph form over log-scales `s = log σ` (1×1 each):
/// `e^{−2 s1}·L1 + ½·e^{−2 s2}·L2 + s1 + s2`.
pub fn combined_uncertainty_node(
    g: &mut Graph,
    l1: Var,
    l2: Var,
    log_sigma1: Var,
    log_sigma2: Var,
) -> Result<Var> {
    let m1 = g.scale(log_sigma1, -2.0);
    let w1 = g.exp(m1);
    let m2 = g.scale(log_sigma2, -2.0);
    let w2 = g.exp(m2);
    let w2 = g.scale(w2, 0.5);
    let a = g.mul(w1, l1)?;
    let b = g.mul(w2, l2)?;
    let ab = g.add(a, b)?;
    let r = g.add(ab, log_sigma1)?;
    g.add(r, log_sigma2)
}

/// Noise scales at which the uncertainty objective is stationary for fixed
/// losses: `σ1² = 2·L1`, `σ2² = L2`.
pub fn stationary_sigmas(l1: f64, l2: f64) -> (f64, f64) {
    ((2.0 * l1).sqrt(), l2.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GradRatio {
    Value(f64),
    /// `f2 == y2`: both gradients vanish and the ratio is undefined.
    Degenerate,
}

impl GradRatio {
    pub fn value(self) -> Option<f64> {
        match self {
            GradRatio::Value(v) => Some(v),
            GradRatio::Degenerate => None,
        }
    }
}

/// `|∂L̃2/∂f2| / |∂L2/∂f2| = |ln((f2+1)/(y2+1)) / ((f2+1)(f2−y2))|`.
pub fn grad_ratio(f2: f64, y2: f64) -> Result<GradRatio> {
    if !(f2 > -1.0) || !(y2 > -1.0) {
        return Err(Error::Domain(format!(
            "grad_ratio needs f2, y2 > -1, got ({f2}, {y2})"
        )));
    }
    if f2 == y2 {
        return Ok(GradRatio::Degenerate);
    }
    let num = (f2 + 1.0).ln() - (y2 + 1.0).ln();
    Ok(GradRatio::Value((num / ((f2 + 1.0) * (f2 - y2))).abs()))
}

/// Value the ratio approaches as `f2 → y2`.
pub fn grad_ratio_limit(y2: f64) -> f64 {
    1.0 / ((y2 + 1.0) * (y2 + 1.0))
}
