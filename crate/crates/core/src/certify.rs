//! Expectation bounds over input boxes, γ-robustness, classification
//! decision invariance and maximum certified radius.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::decision::{logit_margin_check, Terminal};
use crate::dp::{backward, build_partitions, partition_levels, DpConfig, LayerPartition};
use crate::error::{BnnError, Result};
use crate::model::{BnnModel, Task};
use crate::relax::{affine_range_on_box, AffineRelaxation, BoxDomain};

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertifyOptions {
    pub dp: DpConfig,
    /// Regression threshold; `None` means any finite bound certifies.
    pub gamma: Option<f64>,
    /// Classification: fixes the class to defend instead of the centre argmax.
    pub class_override: Option<usize>,
    /// Use the logit-margin fast path when the full bounds do not separate.
    pub logit_fast_path: bool,
}

impl CertifyOptions {
    pub fn for_model(model: &BnnModel) -> Self {
        Self { dp: DpConfig::for_model(model), gamma: None, class_override: None, logit_fast_path: true }
    }
}

/// Certified input region: an ℓ∞ ball.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl Query {
    pub fn new(center: Vec<f64>, radius: f64) -> Result<Self> {
        if !(radius >= 0.0) || !radius.is_finite() {
            return Err(BnnError::Domain(format!("radius {radius} must be a finite nonnegative number")));
        }
        if center.iter().any(|v| !v.is_finite()) {
            return Err(BnnError::Domain("center must be finite".into()));
        }
        Ok(Self { center, radius })
    }

    pub fn as_box(&self) -> Result<BoxDomain> {
        BoxDomain::ball(&self.center, self.radius)
    }
}

/// Main-box summary of one partitioned layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionStats {
    pub level: usize,
    pub pieces: usize,
    pub main_width_mean: f64,
    pub main_width_max: f64,
}

impl PartitionStats {
    fn from(p: &LayerPartition) -> Self {
        let w: Vec<f64> = (0..p.main.dim()).map(|d| p.main.width(d)).collect();
        Self {
            level: p.level,
            pieces: p.pieces.len() + 1,
            main_width_mean: w.iter().sum::<f64>() / w.len().max(1) as f64,
            main_width_max: w.iter().copied().fold(0.0, f64::max),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Bounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub v0: AffineRelaxation,
    pub partitions: Vec<LayerPartition>,
}

impl Bounds {
    pub fn stats(&self) -> Vec<PartitionStats> {
        self.partitions.iter().map(PartitionStats::from).collect()
    }
}

fn range_over(v0: &AffineRelaxation, t: &BoxDomain) -> (DVector<f64>, DVector<f64>) {
    let lo = affine_range_on_box(&v0.lower.a, &v0.lower.b, t).lo;
    let hi = affine_range_on_box(&v0.upper.a, &v0.upper.b, t).hi;
    (lo, hi)
}

/// `[min_T V̌_0, max_T V̂_0]` for the model's task.
pub fn bound_expectation(model: &BnnModel, t: &BoxDomain, opts: &CertifyOptions) -> Result<Bounds> {
    bound_with_terminal(model, t, &opts.dp, Terminal::for_task(model.task))
}

pub fn bound_with_terminal(model: &BnnModel, t: &BoxDomain, cfg: &DpConfig, terminal: Terminal) -> Result<Bounds> {
    cfg.validate()?;
    if t.dim() != model.input_dim() {
        return Err(BnnError::Dimension(format!("input box dim {} but model input dim {}", t.dim(), model.input_dim())));
    }
    if !t.is_bounded() {
        return Err(BnnError::Domain("input box must be bounded".into()));
    }
    let partitions = build_partitions(model, t, cfg, partition_levels(model, terminal))?;
    let v0 = backward(model, t, &partitions, terminal)?;
    let (mut lower, mut upper) = range_over(&v0, t);
    if terminal != Terminal::Regression {
        lower.apply(|v| *v = v.clamp(0.0, 1.0));
        upper.apply(|v| *v = v.clamp(0.0, 1.0));
    }
    Ok(Bounds { lower, upper, v0, partitions })
}

/// `γ = π̂ − π̌` per output over the query ball.
pub fn gamma_robustness(model: &BnnModel, q: &Query, opts: &CertifyOptions) -> Result<DVector<f64>> {
    let b = bound_expectation(model, &q.as_box()?, opts)?;
    Ok((&b.upper - &b.lower).map(|v| v.max(0.0)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Robust,
    NotCertified,
}

/// How one competing class was ruled out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMethod {
    Bounds,
    LogitMargin,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairCheck {
    pub class: usize,
    pub method: PairMethod,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub task: Task,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub verdict: Verdict,
    pub reason: String,
    pub gamma: Vec<f64>,
    pub gamma_threshold: Option<f64>,
    pub predicted_class: Option<usize>,
    pub pairs: Vec<PairCheck>,
    /// Lower bound on the probability that the logits land in the output
    /// main box, when the logit-margin path ran.
    pub logit_box_mass: Option<f64>,
    pub partitions: Vec<PartitionStats>,
    /// Filled in by radius searches.
    pub max_certified_radius: Option<f64>,
    pub config: CertifyOptions,
    pub engine_version: String,
}

/// Class decided at the centre, or `None` when the class intervals overlap.
pub fn center_class(model: &BnnModel, center: &[f64], opts: &CertifyOptions) -> Result<Option<usize>> {
    let b = bound_expectation(model, &BoxDomain::point(center), opts)?;
    let n = b.lower.len();
    let best = (0..n).max_by(|&x, &y| b.lower[x].total_cmp(&b.lower[y]).then(y.cmp(&x))).unwrap();
    let clear = (0..n).filter(|&j| j != best).all(|j| b.lower[best] > b.upper[j]);
    Ok(clear.then_some(best))
}

fn classify_against(model: &BnnModel, t: &BoxDomain, cls: usize, opts: &CertifyOptions) -> Result<Certificate> {
    let bounds = bound_expectation(model, t, opts)?;
    let n = bounds.lower.len();
    let mut pairs = Vec::with_capacity(n.saturating_sub(1));
    let mut box_mass = None;
    for j in (0..n).filter(|&j| j != cls) {
        let method = if bounds.lower[cls] > bounds.upper[j] {
            PairMethod::Bounds
        } else if opts.logit_fast_path {
            let p = match box_mass {
                Some(p) => p,
                None => {
                    let v0 = backward(model, t, &bounds.partitions, Terminal::Indicator)?;
                    let p = range_over(&v0, t).0[0].clamp(0.0, 1.0);
                    box_mass = Some(p);
                    p
                }
            };
            let out_box = &bounds.partitions.last().expect("classification has an output partition").main;
            if p > 0.0 && logit_margin_check(out_box, p, cls, j)? {
                PairMethod::LogitMargin
            } else {
                PairMethod::Failed
            }
        } else {
            PairMethod::Failed
        };
        pairs.push(PairCheck { class: j, method });
    }
    let ok = pairs.iter().all(|p| p.method != PairMethod::Failed);
    let gamma = bounds.upper.iter().zip(bounds.lower.iter()).map(|(h, l)| (h - l).max(0.0)).collect();
    Ok(Certificate {
        task: Task::Classification,
        lower: bounds.lower.iter().copied().collect(),
        upper: bounds.upper.iter().copied().collect(),
        verdict: if ok { Verdict::Robust } else { Verdict::NotCertified },
        reason: if ok { "all competing classes ruled out".into() } else { "competing class not ruled out".into() },
        gamma,
        gamma_threshold: None,
        predicted_class: Some(cls),
        pairs,
        logit_box_mass: box_mass,
        partitions: bounds.stats(),
        max_certified_radius: None,
        config: opts.clone(),
        engine_version: ENGINE_VERSION.into(),
    })
}

/// Decision invariance of the expected-softmax argmax over the query ball.
pub fn check_classification_robust(model: &BnnModel, q: &Query, opts: &CertifyOptions) -> Result<Certificate> {
    let cls = match opts.class_override {
        Some(c) if c >= model.output_dim() => {
            return Err(BnnError::Domain(format!("class {c} out of range")));
        }
        Some(c) => Some(c),
        None => center_class(model, &q.center, opts)?,
    };
    let t = q.as_box()?;
    match cls {
        Some(c) => classify_against(model, &t, c, opts),
        None => {
            let bounds = bound_expectation(model, &t, opts)?;
            Ok(Certificate {
                task: Task::Classification,
                lower: bounds.lower.iter().copied().collect(),
                upper: bounds.upper.iter().copied().collect(),
                verdict: Verdict::NotCertified,
                reason: "ambiguous center".into(),
                gamma: (&bounds.upper - &bounds.lower).iter().map(|v| v.max(0.0)).collect(),
                gamma_threshold: None,
                predicted_class: None,
                pairs: Vec::new(),
                logit_box_mass: None,
                partitions: bounds.stats(),
                max_certified_radius: None,
                config: opts.clone(),
                engine_version: ENGINE_VERSION.into(),
            })
        }
    }
}

pub fn check_regression_robust(model: &BnnModel, q: &Query, opts: &CertifyOptions) -> Result<Certificate> {
    let bounds = bound_expectation(model, &q.as_box()?, opts)?;
    let gamma: Vec<f64> = bounds.upper.iter().zip(bounds.lower.iter()).map(|(h, l)| (h - l).max(0.0)).collect();
    let finite = gamma.iter().all(|g| g.is_finite());
    let ok = finite && opts.gamma.is_none_or(|thr| gamma.iter().all(|g| *g <= thr));
    let reason = match (finite, ok) {
        (false, _) => "unbounded expectation bounds".to_string(),
        (true, true) => "gamma within threshold".to_string(),
        (true, false) => "gamma exceeds threshold".to_string(),
    };
    Ok(Certificate {
        task: Task::Regression,
        lower: bounds.lower.iter().copied().collect(),
        upper: bounds.upper.iter().copied().collect(),
        verdict: if ok { Verdict::Robust } else { Verdict::NotCertified },
        reason,
        gamma,
        gamma_threshold: opts.gamma,
        predicted_class: None,
        pairs: Vec::new(),
        logit_box_mass: None,
        partitions: bounds.stats(),
        max_certified_radius: None,
        config: opts.clone(),
        engine_version: ENGINE_VERSION.into(),
    })
}

pub fn certify(model: &BnnModel, q: &Query, opts: &CertifyOptions) -> Result<Certificate> {
    if q.center.len() != model.input_dim() {
        return Err(BnnError::Dimension(format!(
            "center has dim {} but model input dim is {}",
            q.center.len(),
            model.input_dim()
        )));
    }
    match model.task {
        Task::Regression => check_regression_robust(model, q, opts),
        Task::Classification => check_classification_robust(model, q, opts),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadiusResult {
    pub radius: f64,
    pub class: Option<usize>,
    pub evaluations: usize,
    pub bracket: [f64; 2],
}

pub const RADIUS_CAP: f64 = 1.0;
const RADIUS_START: f64 = 1e-3;

/// Largest certified ℓ∞ radius up to `RADIUS_CAP`, to within `tol`.
pub fn max_certified_radius(model: &BnnModel, center: &[f64], tol: f64, opts: &CertifyOptions) -> Result<RadiusResult> {
    if !(tol > 0.0) {
        return Err(BnnError::Domain(format!("tolerance {tol} must be positive")));
    }
    let mut evals = 0usize;
    let mut cert = |r: f64, o: &CertifyOptions| -> Result<bool> {
        evals += 1;
        let q = Query::new(center.to_vec(), r)?;
        Ok(certify(model, &q, o)?.verdict == Verdict::Robust)
    };
    let mut fixed = opts.clone();
    let class = match model.task {
        Task::Classification => {
            let c = match opts.class_override {
                Some(c) => Some(c),
                None => center_class(model, center, opts)?,
            };
            if c.is_none() {
                return Ok(RadiusResult { radius: 0.0, class: None, evaluations: 1, bracket: [0.0, 0.0] });
            }
            fixed.class_override = c;
            c
        }
        Task::Regression => None,
    };
    if !cert(0.0, &fixed)? {
        return Ok(RadiusResult { radius: 0.0, class, evaluations: evals, bracket: [0.0, 0.0] });
    }
    let mut lo = 0.0;
    let mut hi = RADIUS_START.min(RADIUS_CAP);
    loop {
        if cert(hi, &fixed)? {
            lo = hi;
            if hi >= RADIUS_CAP {
                return Ok(RadiusResult { radius: RADIUS_CAP, class, evaluations: evals, bracket: [RADIUS_CAP, RADIUS_CAP] });
            }
            hi = (2.0 * hi).min(RADIUS_CAP);
        } else {
            break;
        }
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if cert(mid, &fixed)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(RadiusResult { radius: lo, class, evaluations: evals, bracket: [lo, hi] })
}
