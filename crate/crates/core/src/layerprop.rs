//! Per-node moment functions of a stochastic layer and their affine
//! relaxations over input boxes.
//!
//! For node `i` with augmented input `z̃ = (z, 1)`:
//! `m(z) = μᵢ·z̃`, `s(z) = z̃ᵀ Σᵢ z̃`, `r(z) = √s(z)`, and
//! `E[relu(ζᵢ)] = g(m(z), r(z))`.

use nalgebra::{DMatrix, DVector};

use crate::gauss::{rect_mean, rect_mean_grad_unchecked, GaussParam};
use crate::model::{Activation, LayerPosterior, NodeCov};
use crate::parallel;
use crate::relax::{AffineForm, AffineMap, AffineRelaxation, BoxDomain, Bracket, ScalarRelaxation};

const SLACK: f64 = 1e-12;
const DEGENERATE_S: f64 = 1e-24;

pub fn mean_form(layer: &LayerPosterior, i: usize) -> AffineForm {
    let n = layer.in_dim();
    AffineForm { coef: layer.mean.row(i).columns(0, n).transpose(), offset: layer.mean[(i, n)] }
}

/// Mean map of the whole layer as `A z + b`.
pub fn mean_map(layer: &LayerPosterior) -> AffineMap {
    let n = layer.in_dim();
    AffineMap { a: layer.mean.columns(0, n).into_owned(), b: layer.mean.column(n).into_owned() }
}

pub fn node_var(layer: &LayerPosterior, i: usize, z: &[f64]) -> f64 {
    layer.cov[i].quad_form(z)
}

/// `∇_z s(z) = 2 (Σ z̃)[..n]`.
pub fn node_var_grad(layer: &LayerPosterior, i: usize, z: &[f64]) -> DVector<f64> {
    let n = z.len();
    let at = |j: usize| if j < n { z[j] } else { 1.0 };
    match &layer.cov[i] {
        NodeCov::Diagonal(d) => DVector::from_fn(n, |j, _| 2.0 * d[j] * z[j]),
        NodeCov::Full(f) => DVector::from_fn(n, |r, _| {
            2.0 * (0..=n).map(|c| f.matrix[(r, c)] * at(c)).sum::<f64>()
        }),
    }
}

/// `(m(z), s(z))` for every node.
pub fn eval_moments(layer: &LayerPosterior, z: &[f64]) -> (DVector<f64>, DVector<f64>) {
    let m = mean_map(layer).eval(z);
    let s = DVector::from_fn(layer.out_dim(), |i, _| node_var(layer, i, z));
    (m, s)
}

/// Tangent lower and chord upper relaxation of `s` on a bounded box.
pub fn relax_s_on_box(layer: &LayerPosterior, i: usize, b: &BoxDomain) -> ScalarRelaxation {
    let n = layer.in_dim();
    let zc = b.center();
    let sc = node_var(layer, i, &zc);
    let grad = node_var_grad(layer, i, &zc);
    let (upper, scale) = match &layer.cov[i] {
        NodeCov::Diagonal(d) => {
            let mut coef = DVector::zeros(n);
            let mut offset = d[n];
            let mut scale = d[n].abs();
            for j in 0..n {
                if d[j] == 0.0 {
                    continue;
                }
                let (l, u) = (b.lo[j], b.hi[j]);
                coef[j] = d[j] * (l + u);
                offset -= d[j] * l * u;
                scale += d[j] * l.abs().max(u.abs()).powi(2);
            }
            (AffineForm { coef, offset }, scale)
        }
        NodeCov::Full(f) => {
            let mut coef = DVector::zeros(n);
            let mut offset = 0.0;
            let mut scale = 0.0;
            for dd in 0..=n {
                let lam = f.eigvals[dd];
                if lam == 0.0 {
                    continue;
                }
                let u = f.eigvecs.column(dd);
                let t = AffineForm { coef: u.rows(0, n).into_owned(), offset: u[n] };
                let tr = t.range_on(b);
                coef += &t.coef * (lam * (tr.lo + tr.hi));
                offset += lam * ((tr.lo + tr.hi) * t.offset - tr.lo * tr.hi);
                scale += lam * tr.lo.abs().max(tr.hi.abs()).powi(2);
            }
            (AffineForm { coef, offset }, scale)
        }
    };
    let slack = SLACK * (1.0 + scale);
    let lower = AffineForm { coef: grad.clone(), offset: sc - grad.dot(&DVector::from_vec(zc)) - slack };
    ScalarRelaxation { lower, upper: upper.shifted(slack) }
}

/// Everything the Gaussian-kernel relaxations need about one node on one box.
#[derive(Clone, Debug)]
pub struct NodeRelax {
    pub m: AffineForm,
    pub s: ScalarRelaxation,
    pub r: ScalarRelaxation,
    pub m_range: Bracket,
    pub r_range: Bracket,
    pub center: Vec<f64>,
    pub m_c: f64,
    pub s_c: f64,
    pub grad_r_c: Option<DVector<f64>>,
}

impl NodeRelax {
    pub fn new(layer: &LayerPosterior, i: usize, b: &BoxDomain) -> Self {
        let m = mean_form(layer, i);
        let center = b.center();
        let m_c = m.eval(&center);
        let m_range = m.range_on(b);
        if layer.cov[i].is_zero() {
            let zero = ScalarRelaxation::constant(layer.in_dim(), Bracket::point(0.0));
            return Self {
                m,
                s: zero.clone(),
                r: zero,
                m_range,
                r_range: Bracket::point(0.0),
                center,
                m_c,
                s_c: 0.0,
                grad_r_c: None,
            };
        }
        let s = relax_s_on_box(layer, i, b);
        let s_c = node_var(layer, i, &center);
        let s_max = s.upper.range_on(b).hi.max(0.0);
        let (r, grad_r_c) = if s_c > 1e-12 {
            let rc = s_c.sqrt();
            let upper = s.upper.scaled(0.5 / rc).shifted(0.5 * rc);
            let g = node_var_grad(layer, i, &center) * (0.5 / rc);
            let lower = AffineForm {
                coef: g.clone(),
                offset: rc - g.dot(&DVector::from_column_slice(&center)) - SLACK * (1.0 + rc),
            };
            (ScalarRelaxation { lower, upper }, Some(g))
        } else {
            let g = if s_c > DEGENERATE_S {
                Some(node_var_grad(layer, i, &center) * (0.5 / s_c.sqrt()))
            } else {
                None
            };
            (ScalarRelaxation::constant(layer.in_dim(), Bracket::new(0.0, s_max.sqrt())), g)
        };
        let r_lo = r.lower.range_on(b).lo.max(0.0);
        let r_hi = r.upper.range_on(b).hi.min(s_max.sqrt()).max(r_lo);
        Self { m, s, r, m_range, r_range: Bracket::new(r_lo, r_hi), center, m_c, s_c, grad_r_c }
    }

    /// Affine relaxation of `z ↦ g(m(z) − shift, r(z))` on the box this
    /// node was built for.
    pub fn relax_g(&self, shift: f64) -> ScalarRelaxation {
        let n = self.m.coef.len();
        let mu_c = self.m_c - shift;
        let lower = match (&self.grad_r_c, self.s_c > DEGENERATE_S) {
            (Some(gr), true) => {
                let rc = self.s_c.sqrt();
                let p = GaussParam::raw(mu_c, rc);
                let gc = rect_mean(p);
                let (gm, gs) = rect_mean_grad_unchecked(p);
                let coef = &self.m.coef * gm + gr * gs;
                let zc = DVector::from_column_slice(&self.center);
                AffineForm { offset: gc - coef.dot(&zc) - SLACK * (1.0 + gc.abs()), coef }
            }
            _ => {
                if mu_c > 0.0 {
                    self.m.shifted(-shift - SLACK * (1.0 + mu_c.abs()))
                } else {
                    AffineForm::constant(n, 0.0)
                }
            }
        };
        let mr = Bracket::new(self.m_range.lo - shift, self.m_range.hi - shift);
        let rr = self.r_range;
        let plane = g_upper_plane(mr, rr);
        let r_part = if plane.beta >= 0.0 { self.r.upper.scaled(plane.beta) } else { self.r.lower.scaled(plane.beta) };
        let upper = self
            .m
            .shifted(-shift)
            .scaled(plane.alpha)
            .add(&r_part)
            .shifted(plane.gamma + SLACK * (1.0 + plane.scale));
        ScalarRelaxation { lower, upper }
    }
}

/// Plane `α μ + β σ + γ ≥ g(μ, σ)` on a rectangle.
#[derive(Clone, Copy, Debug)]
pub struct GPlane {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub scale: f64,
}

/// Fits a plane through the three corners with the largest `g` and lifts it
/// by any deficit at the fourth; `g` convex makes it an upper bound on the
/// whole rectangle.
pub fn g_upper_plane(mu: Bracket, sigma: Bracket) -> GPlane {
    let g = |m: f64, s: f64| rect_mean(GaussParam::raw(m, s.max(0.0)));
    let (m0, m1, r0, r1) = (mu.lo, mu.hi, sigma.lo, sigma.hi);
    let g00 = g(m0, r0);
    let g10 = g(m1, r0);
    let g01 = g(m0, r1);
    let g11 = g(m1, r1);
    let dm = m1 - m0;
    let dr = r1 - r0;
    let (alpha, beta) = match (dm > 0.0, dr > 0.0) {
        (true, true) => ((g11 - g01) / dm, (g11 - g10) / dr),
        (true, false) => ((g11 - g01) / dm, 0.0),
        (false, true) => (0.0, (g11 - g10) / dr),
        (false, false) => (0.0, 0.0),
    };
    let mut gamma = g11 - alpha * m1 - beta * r1;
    let mut deficit: f64 = 0.0;
    for (m, r, v) in [(m0, r0, g00), (m1, r0, g10), (m0, r1, g01), (m1, r1, g11)] {
        deficit = deficit.max(v - (alpha * m + beta * r + gamma));
    }
    gamma += deficit;
    GPlane { alpha, beta, gamma, scale: g11.abs().max(g00.abs()) }
}

/// Affine relaxation of `z ↦ g(m(z), r(z))` for node `i` on box `b`.
pub fn relax_g_on_region(layer: &LayerPosterior, i: usize, b: &BoxDomain) -> ScalarRelaxation {
    NodeRelax::new(layer, i, b).relax_g(0.0)
}

/// Relaxation of `z ↦ r(z)` for node `i` on box `b`.
pub fn relax_r_on_box(layer: &LayerPosterior, i: usize, b: &BoxDomain) -> ScalarRelaxation {
    NodeRelax::new(layer, i, b).r
}

/// Node relaxations for a whole layer on one box.
pub fn layer_relax(layer: &LayerPosterior, b: &BoxDomain) -> Vec<NodeRelax> {
    parallel::map_range(layer.out_dim(), |i| NodeRelax::new(layer, i, b))
}

/// Relaxation of `z ↦ E[φ(ζ(z))]` on `b`.
pub fn expected_activation(layer: &LayerPosterior, b: &BoxDomain) -> AffineRelaxation {
    match layer.activation {
        Activation::Identity => AffineRelaxation::exact(mean_map(layer)),
        Activation::Relu => {
            let rows = parallel::map_range(layer.out_dim(), |i| relax_g_on_region(layer, i, b));
            AffineRelaxation::from_rows(&rows, layer.in_dim())
        }
    }
}

/// Pushes value bounds `V̌(y) ≤ V(y) ≤ V̂(y)` through relaxed arguments
/// `y ∈ [Y̌(z), Ŷ(z)]`.
pub fn compose_value(v: &AffineRelaxation, y: &AffineRelaxation) -> AffineRelaxation {
    let sat = |a: &DMatrix<f64>, b0: &DVector<f64>, lo: &AffineMap, hi: &AffineMap| {
        let ap = a.map(|x| x.max(0.0));
        let an = a.map(|x| x.min(0.0));
        AffineMap { a: &ap * &lo.a + &an * &hi.a, b: &ap * &lo.b + &an * &hi.b + b0 }
    };
    AffineRelaxation {
        lower: sat(&v.lower.a, &v.lower.b, &y.lower, &y.upper),
        upper: sat(&v.upper.a, &v.upper.b, &y.upper, &y.lower),
    }
}

/// Relaxation of `z ↦ E[V(φ(ζ(z)))]` on `b` when `V` is affine-relaxed on the
/// whole space.
pub fn prop_affine_value(v: &AffineRelaxation, layer: &LayerPosterior, b: &BoxDomain) -> AffineRelaxation {
    compose_value(v, &expected_activation(layer, b))
}
