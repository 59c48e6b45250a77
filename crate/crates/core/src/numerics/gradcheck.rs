//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Minimum number of coordinates compared per check.
pub const MIN_COORDS: usize = 64;

/// Denominator floor so near-zero gradients are compared absolutely.
const REL_FLOOR: f64 = 1e-3;

/// Result of comparing analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// `(param index, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// `(f(θ+ε) − f(θ−ε)) / 2ε` on a seeded random subset of at least
/// `MIN_COORDS` coordinates (all of them for small parameter sets).
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_with(f, params, eps, seed, |_, _, g| g)
}

/// Like [`grad_check`], but lets the caller tamper with the analytic gradient
/// of each coordinate before comparison (used to test the harness itself).
pub fn grad_check_with<F, T>(
    f: F,
    params: &[Tensor],
    eps: f64,
    seed: u64,
    tamper: T,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    T: Fn(usize, usize, f64) -> f64,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols()))
        })
        .collect();

    // Every parameter contributes at least a few coordinates so small
    // tensors (biases, gains) are never skipped.
    let total: usize = params.iter().map(Tensor::len).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<(usize, usize)> = Vec::new();
    for (pi, p) in params.iter().enumerate() {
        let share = (MIN_COORDS * p.len())
            .div_ceil(total.max(1))
            .max(4)
            .min(p.len());
        let mut idx = sample(&mut rng, p.len(), share).into_vec();
        idx.sort_unstable();
        picks.extend(idx.into_iter().map(|ci| (pi, ci)));
    }

    let eval = |shifted: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = shifted.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: picks.len(),
        worst: None,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, ci) in picks {
        let orig = work[pi].data()[ci];
        work[pi].data_mut()[ci] = orig + eps;
        let plus = eval(&work)?;
        work[pi].data_mut()[ci] = orig - eps;
        let minus = eval(&work)?;
        work[pi].data_mut()[ci] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = tamper(pi, ci, analytic[pi].data()[ci]);
        let err = relative_error(a, numeric);
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((pi, ci, a, numeric));
        }
    }
    Ok(report)
}
