//! Terminal value functions: the identity for regression, interval softmax
//! bounds for classification, and the logit-margin sufficient condition.

use nalgebra::DVector;

use crate::error::{BnnError, Result};
use crate::layerprop::mean_map;
use crate::model::{BnnModel, Task};
use crate::relax::{AffineRelaxation, BoxDomain, Interval};

/// Terminal choice for one DP run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Terminal {
    /// `V_K(z) = m_K(z)` on the whole space.
    Regression,
    /// Interval softmax on output pieces, `[0, 1]` on the complement.
    Softmax,
    /// 1 on output pieces, 0 on the complement; bounds `P[ζ_out ∈ main]`.
    Indicator,
}

impl Terminal {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Regression => Terminal::Regression,
            Task::Classification => Terminal::Softmax,
        }
    }
}

/// Which classes a classification query compares.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TerminalSpec {
    pub task: Task,
    pub target: Option<usize>,
    pub compare: Vec<usize>,
}

impl TerminalSpec {
    pub fn new(task: Task, target: Option<usize>, compare: Vec<usize>, n_out: usize) -> Result<Self> {
        if let Some(t) = target {
            if t >= n_out {
                return Err(BnnError::Domain(format!("class {t} out of range for {n_out} outputs")));
            }
        }
        if let Some(c) = compare.iter().find(|c| **c >= n_out) {
            return Err(BnnError::Domain(format!("class {c} out of range for {n_out} outputs")));
        }
        Ok(Self { task, target, compare })
    }
}

/// `V_K = m_K`, exact and valid on all of `z_K`-space.
pub fn terminal_regression(model: &BnnModel) -> AffineRelaxation {
    AffineRelaxation::exact(mean_map(model.layers.last().unwrap()))
}

fn log_sum_exp(v: impl Iterator<Item = f64>) -> f64 {
    let vals: Vec<f64> = v.collect();
    let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + vals.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const SOFTMAX_WIDEN: f64 = 4.0 * f64::EPSILON;

/// Per-class softmax bounds over a logit box.
pub fn softmax_box_bounds(b: &BoxDomain) -> Interval {
    let n = b.dim();
    let mut lo = DVector::zeros(n);
    let mut hi = DVector::zeros(n);
    for i in 0..n {
        let others_hi = log_sum_exp((0..n).filter(|l| *l != i).map(|l| b.hi[l]));
        let others_lo = log_sum_exp((0..n).filter(|l| *l != i).map(|l| b.lo[l]));
        let l = sigmoid(b.lo[i] - others_hi);
        let h = sigmoid(b.hi[i] - others_lo);
        lo[i] = (l * (1.0 - SOFTMAX_WIDEN)).max(0.0);
        hi[i] = (h * (1.0 + SOFTMAX_WIDEN)).min(1.0);
    }
    Interval { lo, hi }
}

/// Interval softmax on every piece; `None` marks the unbounded complement.
pub fn ibp_softmax(pieces: &[Option<BoxDomain>], n_out: usize) -> Vec<Interval> {
    pieces
        .iter()
        .map(|p| match p {
            Some(b) => softmax_box_bounds(b),
            None => Interval { lo: DVector::zeros(n_out), hi: DVector::from_element(n_out, 1.0) },
        })
        .collect()
}

/// Sufficient condition for `E[softmaxʲ − softmaxⁱ] ≤ 0` given that the
/// logits lie in `b` with probability at least `p_lo`.
pub fn logit_margin_check(b: &BoxDomain, p_lo: f64, i: usize, j: usize) -> Result<bool> {
    if !(p_lo > 0.0) {
        return Err(BnnError::Domain(format!("probability lower bound {p_lo} must be positive")));
    }
    if !b.is_bounded() {
        return Err(BnnError::Domain("logit box must be bounded".into()));
    }
    let p = p_lo.min(1.0);
    let m = b.hi.iter().copied().fold(b.lo[i], f64::max);
    let ej = (b.hi[j] - m).exp();
    let ei = (b.lo[i] - m).exp();
    let sum: f64 = b.hi.iter().map(|v| (v - m).exp()).sum();
    let slack = (1.0 / p - 1.0) * sum;
    let lhs = ej - ei + slack;
    Ok(lhs + 1e-12 * (ej + ei + slack) <= 0.0)
}
