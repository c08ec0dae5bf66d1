//! Scalar Gaussian special functions and closed-form truncated moments.
//!
//! Everything here works on a single Gaussian coordinate `ζ ~ N(μ, σ²)`.
//! The rectified mean `g(μ, σ) = E[max(ζ, 0)]` is the workhorse: it is
//! jointly convex and nondecreasing in `(μ, σ)`, which is what the interval
//! extensions in [`kernel_range`] rely on.
//!
//! `σ = 0` is always legal and evaluates to the degenerate (point-mass) limit.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{BnnError, Result};
use crate::relax::Bracket;

const FRAC_2_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;
/// 1/sqrt(2π)
pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Mean and standard deviation of a scalar Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussParam {
    pub mu: f64,
    pub sigma: f64,
}

impl GaussParam {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0) || !mu.is_finite() || !sigma.is_finite() {
            return Err(BnnError::Domain(format!(
                "invalid Gaussian parameters mu={mu}, sigma={sigma}"
            )));
        }
        Ok(Self { mu, sigma })
    }

    /// Unchecked constructor for hot paths where `sigma >= 0` is known.
    #[inline]
    pub(crate) fn raw(mu: f64, sigma: f64) -> Self {
        Self { mu, sigma }
    }
}

// ---------------------------------------------------------------------------
// erf / erfc / erfinv
// ---------------------------------------------------------------------------

const SERIES_CUTOFF: f64 = 2.5;

/// erf for x >= 0 via the all-positive series
/// erf(x) = 2/sqrt(pi) e^{-x^2} sum_n (2x^2)^n x / (2n+1)!!
fn erf_series(x: f64) -> f64 {
    let x2 = x * x;
    let two_x2 = 2.0 * x2;
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    loop {
        n += 1.0;
        term *= two_x2 / (2.0 * n + 1.0);
        sum += term;
        if term <= sum * 1e-17 {
            break;
        }
    }
    FRAC_2_SQRT_PI * (-x2).exp() * sum
}

/// erfc for x >= SERIES_CUTOFF via the Laplace continued fraction
/// (modified Lentz).
fn erfc_cf(x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    // erfc(x) = e^{-x^2}/sqrt(pi) * 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for k in 1..500 {
        let a = k as f64 * 0.5;
        d = x + a * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = x + a / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x * x).exp() / (f * PI.sqrt())
}

/// The error function, accurate to a few ulp in absolute terms.
pub fn erf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x < 0.0 {
        return -erf(-x);
    }
    if x < SERIES_CUTOFF {
        erf_series(x)
    } else if x < 27.0 {
        1.0 - erfc_cf(x)
    } else {
        1.0
    }
}

/// Complementary error function with good relative accuracy in the upper tail.
pub fn erfc(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x < SERIES_CUTOFF {
        1.0 - erf_series(x)
    } else if x < 27.3 {
        erfc_cf(x)
    } else {
        0.0
    }
}

/// Inverse error function on (-1, 1); returns ±∞ at ±1.
pub fn erfinv(p: f64) -> Result<f64> {
    if p.is_nan() || !(-1.0..=1.0).contains(&p) {
        return Err(BnnError::Domain(format!("erfinv argument {p} outside [-1, 1]")));
    }
    if p == 1.0 {
        return Ok(f64::INFINITY);
    }
    if p == -1.0 {
        return Ok(f64::NEG_INFINITY);
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    if p < 0.0 {
        return erfinv(-p).map(|x| -x);
    }
    // single-precision starting point (Giles), then Halley refinement
    let w = -((1.0 - p) * (1.0 + p)).ln();
    let mut x = if w < 5.0 {
        let w = w - 2.5;
        let mut q = 2.810_226_36e-08;
        q = 3.432_739_39e-07 + q * w;
        q = -3.523_387_7e-06 + q * w;
        q = -4.391_506_54e-06 + q * w;
        q = 0.000_218_580_87 + q * w;
        q = -0.001_253_725_03 + q * w;
        q = -0.004_177_681_64 + q * w;
        q = 0.246_640_727 + q * w;
        q = 1.501_409_41 + q * w;
        q * p
    } else {
        let w = w.sqrt() - 3.0;
        let mut q = -0.000_200_214_257;
        q = 0.000_100_950_558 + q * w;
        q = 0.001_349_343_22 + q * w;
        q = -0.003_673_428_44 + q * w;
        q = 0.005_739_507_73 + q * w;
        q = -0.007_622_461_3 + q * w;
        q = 0.009_438_870_47 + q * w;
        q = 1.001_674_06 + q * w;
        q = 2.832_976_82 + q * w;
        q * p
    };
    // Near 1 the residual is formed against erfc so that 1-p keeps its digits.
    let tail = p > 0.5;
    let q = 1.0 - p;
    for _ in 0..4 {
        let f = if tail { q - erfc(x) } else { erf(x) - p };
        let fp = FRAC_2_SQRT_PI * (-x * x).exp();
        if fp == 0.0 {
            break;
        }
        let step = f / fp;
        let next = x - step / (1.0 + x * step);
        if (next - x).abs() <= 1e-17 * x.abs() {
            x = next;
            break;
        }
        x = next;
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// rectified moments
// ---------------------------------------------------------------------------

/// Standard normal upper tail P[N(0,1) >= t].
#[inline]
fn upper_tail(t: f64) -> f64 {
    0.5 * erfc(t * FRAC_1_SQRT_2)
}

/// g(μ, σ) = E[max(ζ, 0)] for ζ ~ N(μ, σ²).
pub fn rect_mean(p: GaussParam) -> f64 {
    let GaussParam { mu, sigma } = p;
    if sigma == 0.0 {
        return mu.max(0.0);
    }
    let t = mu / (sigma * std::f64::consts::SQRT_2);
    0.5 * mu * erfc(-t) + sigma * INV_SQRT_2PI * (-t * t).exp()
}

/// (∂g/∂μ, ∂g/∂σ); undefined at σ = 0.
pub fn rect_mean_grad(p: GaussParam) -> Result<(f64, f64)> {
    if p.sigma <= 0.0 {
        return Err(BnnError::Domain(
            "rectified mean is not differentiable at sigma = 0".into(),
        ));
    }
    Ok(rect_mean_grad_unchecked(p))
}

#[inline]
pub(crate) fn rect_mean_grad_unchecked(p: GaussParam) -> (f64, f64) {
    let t = p.mu / (p.sigma * std::f64::consts::SQRT_2);
    (0.5 * erfc(-t), INV_SQRT_2PI * (-t * t).exp())
}

/// Analytic Hessian of g in (μ, σ), row-major [gμμ, gμσ, gσσ].
pub fn rect_mean_hessian(p: GaussParam) -> Result<[f64; 3]> {
    if p.sigma <= 0.0 {
        return Err(BnnError::Domain("Hessian undefined at sigma = 0".into()));
    }
    let GaussParam { mu, sigma } = p;
    let e = (-mu * mu / (2.0 * sigma * sigma)).exp() * INV_SQRT_2PI;
    Ok([e / sigma, -mu * e / (sigma * sigma), mu * mu * e / (sigma * sigma * sigma)])
}

/// P[ζ ∈ [a, b]] for a scalar Gaussian. At σ = 0 the point-mass limit is
/// used (a mass sitting exactly on an endpoint counts one half).
pub fn interval_prob(p: GaussParam, a: f64, b: f64) -> f64 {
    if !(a < b) {
        return 0.0;
    }
    let GaussParam { mu, sigma } = p;
    if sigma == 0.0 {
        return if a < mu && mu < b {
            1.0
        } else if mu == a || mu == b {
            0.5
        } else {
            0.0
        };
    }
    let alpha = (a - mu) / sigma;
    let beta = (b - mu) / sigma;
    let v = if alpha > 0.0 {
        upper_tail(alpha) - upper_tail(beta)
    } else if beta < 0.0 {
        upper_tail(-beta) - upper_tail(-alpha)
    } else {
        1.0 - upper_tail(-alpha) - upper_tail(beta)
    };
    v.clamp(0.0, 1.0)
}

/// P[ζ >= c].
pub fn upper_prob(p: GaussParam, c: f64) -> f64 {
    interval_prob(p, c, f64::INFINITY)
}

/// Probability that independent coordinates land in a (possibly unbounded) box.
pub fn box_prob(params: &[GaussParam], lo: &[f64], hi: &[f64]) -> f64 {
    debug_assert_eq!(params.len(), lo.len());
    debug_assert_eq!(params.len(), hi.len());
    params
        .iter()
        .zip(lo.iter().zip(hi))
        .map(|(p, (&a, &b))| interval_prob(*p, a, b))
        .product()
}

/// ∫_c^∞ z N(z; μ, σ²) dz for any c (c = -∞ gives μ, c = +∞ gives 0).
pub fn upper_first_moment(p: GaussParam, c: f64) -> f64 {
    if c == f64::INFINITY {
        return 0.0;
    }
    if c == f64::NEG_INFINITY {
        return p.mu;
    }
    let GaussParam { mu, sigma } = p;
    if sigma == 0.0 {
        return if mu > c {
            mu
        } else if mu == c {
            0.5 * mu
        } else {
            0.0
        };
    }
    let t = (c - mu) / (sigma * std::f64::consts::SQRT_2);
    0.5 * mu * erfc(t) + sigma * INV_SQRT_2PI * (-t * t).exp()
}

/// ∫_{max(a,0)}^∞ z N(z; μ, σ²) dz.
pub fn tail_relu_mass_exact(p: GaussParam, a: f64) -> f64 {
    upper_first_moment(p, a.max(0.0))
}

/// E[relu(ζ) 1{ζ ∈ [a, b]}] = ∫_{[a]⁺}^{[b]⁺} z N(z; μ, σ²) dz.
pub fn trunc_relu_mass(p: GaussParam, a: f64, b: f64) -> f64 {
    if !(a < b) {
        return 0.0;
    }
    let (lo, hi) = (a.max(0.0), b.max(0.0));
    if !(lo < hi) {
        return 0.0;
    }
    (upper_first_moment(p, lo) - upper_first_moment(p, hi)).max(0.0)
}

/// E[ζ 1{ζ ∈ [a, b]}] (identity activation).
pub fn trunc_id_mass(p: GaussParam, a: f64, b: f64) -> f64 {
    if !(a < b) {
        return 0.0;
    }
    upper_first_moment(p, a) - upper_first_moment(p, b)
}

/// Decomposed form of the upper first moment used by the relaxations:
/// ∫_c^∞ z N dz = g(μ - c, σ) + c · P[ζ >= c]  (finite c).
pub fn upper_first_moment_decomposed(p: GaussParam, c: f64) -> f64 {
    rect_mean(GaussParam::raw(p.mu - c, p.sigma)) + c * upper_prob(p, c)
}

/// Closed-form tail bounds ½[μ]⁻ ≤ ∫_{[a]⁺}^∞ relu(z) N dz ≤ ½[μ]⁺ + sqrt(s/2π)
/// (lower clamped at zero). Only provable when [a]⁺ ≥ μ; otherwise an error
/// tells the caller to use [`tail_relu_mass_exact`].
pub fn tail_relu_mass_bounds(p: GaussParam, a: f64) -> Result<Bracket> {
    let c = a.max(0.0);
    if c < p.mu {
        return Err(BnnError::Domain(format!(
            "tail bound side condition violated: [a]+ = {c} < mu = {}",
            p.mu
        )));
    }
    let lo = (0.5 * p.mu.min(0.0)).max(0.0);
    let hi = 0.5 * p.mu.max(0.0) + p.sigma * INV_SQRT_2PI;
    Ok(Bracket::new(lo, hi))
}

// ---------------------------------------------------------------------------
// interval extensions over (μ, σ) rectangles
// ---------------------------------------------------------------------------

/// Scalar kernels that can be interval-extended over a (μ, σ) rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kernel {
    /// P[ζ ∈ [a, b]]
    BoxProb1d,
    /// E[relu(ζ) 1{ζ ∈ [a, b]}]
    TruncReluMass,
    /// E[ζ 1{ζ ∈ [a, b]}]
    TruncIdMass,
    /// g(μ, σ); a and b ignored
    RectMean,
}

impl Kernel {
    pub fn eval(self, p: GaussParam, a: f64, b: f64) -> f64 {
        match self {
            Kernel::BoxProb1d => interval_prob(p, a, b),
            Kernel::TruncReluMass => trunc_relu_mass(p, a, b),
            Kernel::TruncIdMass => trunc_id_mass(p, a, b),
            Kernel::RectMean => rect_mean(p),
        }
    }
}

const PROB_WIDEN: f64 = 1e-12;

#[inline]
fn widen(lo: f64, hi: f64) -> Bracket {
    let slack_lo = 1e-12 * (1.0 + lo.abs());
    let slack_hi = 1e-12 * (1.0 + hi.abs());
    Bracket::new(lo - slack_lo, hi + slack_hi)
}

/// Sound enclosure of `kernel(μ, σ; a, b)` over μ ∈ `mu`, σ ∈ `sigma`.
pub fn kernel_range(kernel: Kernel, mu: Bracket, sigma: Bracket, a: f64, b: f64) -> Bracket {
    debug_assert!(sigma.lo >= 0.0);
    match kernel {
        Kernel::BoxProb1d => prob_range(a, b, mu, sigma),
        Kernel::RectMean => rect_mean_range(0.0, mu, sigma),
        Kernel::TruncReluMass => {
            if !(a < b) {
                return Bracket::point(0.0);
            }
            let (lo, hi) = (a.max(0.0), b.max(0.0));
            if !(lo < hi) {
                return Bracket::point(0.0);
            }
            let diff = upper_moment_range(lo, mu, sigma).sub(upper_moment_range(hi, mu, sigma));
            // lo·P ≤ mass ≤ hi·P on [lo, hi] ⊂ [0, ∞)
            let pr = prob_range(lo, hi, mu, sigma);
            let direct = Bracket::new(lo * pr.lo, if hi.is_finite() { hi * pr.hi } else { f64::INFINITY });
            diff.intersect(direct).intersect(Bracket::new(0.0, f64::INFINITY))
        }
        Kernel::TruncIdMass => {
            if !(a < b) {
                return Bracket::point(0.0);
            }
            let diff = upper_moment_range(a, mu, sigma).sub(upper_moment_range(b, mu, sigma));
            if a.is_finite() && b.is_finite() {
                let pr = prob_range(a, b, mu, sigma);
                diff.intersect(Bracket::new(a, b).mul_nonneg(pr))
            } else {
                diff
            }
        }
    }
}

/// g(μ - shift, σ) is nondecreasing in both μ and σ, so its range over the
/// rectangle is attained at the low and high corners.
pub fn rect_mean_range(shift: f64, mu: Bracket, sigma: Bracket) -> Bracket {
    let lo = rect_mean(GaussParam::raw(mu.lo - shift, sigma.lo));
    let hi = rect_mean(GaussParam::raw(mu.hi - shift, sigma.hi));
    widen(lo, hi)
}

/// Enclosure of ∫_c^∞ z N dz through its decomposition g(μ-c,σ) + c·P[ζ≥c].
pub fn upper_moment_range(c: f64, mu: Bracket, sigma: Bracket) -> Bracket {
    if c == f64::INFINITY {
        return Bracket::point(0.0);
    }
    if c == f64::NEG_INFINITY {
        return mu;
    }
    let g = rect_mean_range(c, mu, sigma);
    let q = prob_range(c, f64::INFINITY, mu, sigma);
    g.add(q.scale(c))
}

/// Limits of P[ζ ∈ [a,b]] as σ → 0⁺ at mean μ, conservatively resolved on
/// the endpoints: (lowest possible, highest possible).
fn point_mass_prob(mu: f64, a: f64, b: f64) -> (f64, f64) {
    if a < mu && mu < b {
        (1.0, 1.0)
    } else if mu == a || mu == b {
        (0.0, 1.0)
    } else {
        (0.0, 0.0)
    }
}

fn prob_at(mu: f64, sigma: f64, a: f64, b: f64) -> (f64, f64) {
    if sigma == 0.0 {
        point_mass_prob(mu, a, b)
    } else {
        let v = interval_prob(GaussParam::raw(mu, sigma), a, b);
        (v, v)
    }
}

/// Exact range of P[ζ ∈ [a,b]] over the rectangle.
///
/// The probability is symmetric and log-concave in μ about the midpoint of
/// [a,b], and quasi-concave in σ for fixed μ. Hence the minimum sits at a
/// corner, and the maximum at the clamped midpoint with σ at its
/// closed-form stationary point (clamped to the σ range).
pub fn prob_range(a: f64, b: f64, mu: Bracket, sigma: Bracket) -> Bracket {
    if !(a < b) {
        return Bracket::point(0.0);
    }
    let corners = [
        (mu.lo, sigma.lo),
        (mu.hi, sigma.lo),
        (mu.lo, sigma.hi),
        (mu.hi, sigma.hi),
    ];
    let mut lo = f64::INFINITY;
    for &(m, s) in &corners {
        lo = lo.min(prob_at(m, s, a, b).0);
    }
    let mid = if a.is_finite() && b.is_finite() {
        0.5 * (a + b)
    } else if a.is_finite() {
        f64::INFINITY
    } else if b.is_finite() {
        f64::NEG_INFINITY
    } else {
        0.0
    };
    let m_star = mid.clamp(mu.lo, mu.hi);
    let s_star = if a <= m_star && m_star <= b {
        sigma.lo
    } else {
        // distances to the near and far edges
        let (near, far) = if m_star < a { (a - m_star, b - m_star) } else { (m_star - b, m_star - a) };
        if far.is_infinite() {
            sigma.hi
        } else {
            let tau2 = 2.0 * (far / near).ln() / (far * far - near * near);
            let s = if tau2 > 0.0 { 1.0 / tau2.sqrt() } else { sigma.hi };
            s.clamp(sigma.lo, sigma.hi)
        }
    };
    let mut hi = prob_at(m_star, s_star, a, b).1;
    // guard the stationary-point evaluation with the σ endpoints as well
    hi = hi.max(prob_at(m_star, sigma.lo, a, b).1).max(prob_at(m_star, sigma.hi, a, b).1);
    Bracket::new((lo - PROB_WIDEN).max(0.0), (hi + PROB_WIDEN).min(1.0))
}
