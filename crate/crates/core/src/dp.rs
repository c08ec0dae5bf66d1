//! Backward dynamic program over layer-support partitions.
//!
//! Level `ℓ` value functions `V_ℓ(z_ℓ) = E[V_{ℓ+1}(φ_ℓ(ζ_{ℓ+1})) | z_ℓ]` are
//! relaxed piecewise: pre-activation space `ζ_ℓ` is split into a main box
//! (refined into sub-boxes) and its unbounded complement, and each bounded
//! piece carries an affine relaxation valid on `φ(piece)` in `z_ℓ`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::decision::{self, Terminal};
use crate::error::{BnnError, Result};
use crate::gauss::{erfinv, prob_range, upper_moment_range};
use crate::layerprop::{layer_relax, node_var, node_var_grad, prop_affine_value, NodeRelax};
use crate::model::{Activation, BnnModel, LayerPosterior};
use crate::parallel;
use crate::relax::{
    AffineForm, AffineMap, AffineRelaxation, BoxDomain, Bracket, Interval, PwaRelaxation, ScalarRelaxation,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxOrientation {
    /// Lowest lower quantile and highest upper quantile over the input box.
    Outer,
    /// Highest lower quantile and lowest upper quantile over the input box.
    Inner,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineStrategy {
    GreedyWidthStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub mass_epsilon: f64,
    /// Total piece count per partitioned layer, complement included. The
    /// last entry repeats for deeper layers.
    pub splits: Vec<usize>,
    pub orientation: BoxOrientation,
    pub refine: RefineStrategy,
}

impl DpConfig {
    pub fn default_epsilon(hidden_layers: usize) -> f64 {
        match hidden_layers {
            0 | 1 => 1e-2,
            2 => 1e-3,
            _ => 5e-4,
        }
    }

    pub fn for_model(model: &BnnModel) -> Self {
        Self {
            mass_epsilon: Self::default_epsilon(model.hidden_layers()),
            splits: vec![2],
            orientation: BoxOrientation::Outer,
            refine: RefineStrategy::GreedyWidthStd,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mass_epsilon > 0.0 && self.mass_epsilon < 1.0) {
            return Err(BnnError::Domain(format!("mass epsilon {} outside (0, 1)", self.mass_epsilon)));
        }
        if self.splits.iter().any(|n| *n < 1) {
            return Err(BnnError::Domain("piece counts must be at least 1".into()));
        }
        Ok(())
    }

    /// Piece count (complement included) for partitioned layer `level ≥ 1`.
    pub fn splits_for(&self, level: usize) -> usize {
        if self.splits.is_empty() {
            return 2;
        }
        self.splits[(level - 1).min(self.splits.len() - 1)]
    }
}

/// Partition of `ζ_ℓ`: main box, its tiling, and the implicit complement.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerPartition {
    pub level: usize,
    pub activation: Activation,
    pub main: BoxDomain,
    pub pieces: Vec<BoxDomain>,
    /// Posterior standard-deviation bound per coordinate.
    pub std: Vec<f64>,
}

impl LayerPartition {
    /// Validity region of piece `j` in `z_ℓ = φ(ζ_ℓ)`.
    pub fn image(&self, j: usize) -> BoxDomain {
        act_box(self.activation, &self.pieces[j])
    }
}

pub fn act_box(act: Activation, b: &BoxDomain) -> BoxDomain {
    match act {
        Activation::Relu => b.relu(),
        Activation::Identity => b.clone(),
    }
}

/// `|V(z)| ≤ α₀ + Σᵢ αᵢ |zᵢ|` per output, valid on the whole space.
#[derive(Clone, Debug, PartialEq)]
pub struct GrowthEnvelope {
    pub alpha0: DVector<f64>,
    pub alpha: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Complement {
    Constant(Interval),
    Envelope(GrowthEnvelope),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseValue {
    pub partition: LayerPartition,
    pub pieces: Vec<AffineRelaxation>,
    pub complement: Complement,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ValueRelaxation {
    /// Valid on the whole space.
    Affine(AffineRelaxation),
    Piecewise(PiecewiseValue),
}

impl ValueRelaxation {
    pub fn out_dim(&self) -> usize {
        match self {
            ValueRelaxation::Affine(r) => r.out_dim(),
            ValueRelaxation::Piecewise(p) => p.pieces.first().map_or(0, |r| r.out_dim()),
        }
    }

    /// Piece boxes in `z`-space with their relaxations; only constant
    /// complements are carried over.
    pub fn to_pwa(&self) -> Result<PwaRelaxation> {
        match self {
            ValueRelaxation::Affine(r) => PwaRelaxation::new(vec![(BoxDomain::whole(r.in_dim()), r.clone())], None),
            ValueRelaxation::Piecewise(p) => {
                let pieces = (0..p.pieces.len()).map(|j| (p.partition.image(j), p.pieces[j].clone())).collect();
                let comp = match &p.complement {
                    Complement::Constant(iv) => Some(iv.clone()),
                    Complement::Envelope(_) => None,
                };
                PwaRelaxation::new(pieces, comp)
            }
        }
    }
}

/// Envelopes for levels `0..=K`; level `ℓ` bounds `V_ℓ` as a function of `z_ℓ`.
pub fn growth_envelopes(model: &BnnModel) -> Vec<GrowthEnvelope> {
    let k = model.hidden_layers();
    let last = &model.layers[k];
    let n = last.in_dim();
    let mut env = vec![GrowthEnvelope {
        alpha0: last.mean.column(n).map(|v| v.abs()),
        alpha: last.mean.columns(0, n).map(|v| v.abs()),
    }];
    for l in (0..k).rev() {
        let layer = &model.layers[l];
        let c = match layer.activation {
            Activation::Relu => crate::gauss::INV_SQRT_2PI,
            Activation::Identity => (2.0 / std::f64::consts::PI).sqrt(),
        };
        let nin = layer.in_dim();
        // per node i: |m_i| + c·σ_i ≤ coef_i0 + Σ_j coef_ij |z_j|
        let diag: Vec<DVector<f64>> = layer.cov.iter().map(|cv| cv.variance_diag()).collect();
        let coef = DMatrix::from_fn(layer.out_dim(), nin + 1, |i, j| {
            layer.mean[(i, j)].abs() + c * diag[i][j].max(0.0).sqrt()
        });
        let prev = env.last().unwrap();
        let alpha0 = &prev.alpha0 + &prev.alpha * coef.column(nin);
        let alpha = &prev.alpha * coef.columns(0, nin);
        env.push(GrowthEnvelope { alpha0, alpha });
    }
    env.reverse();
    env
}

/// Floor on main-box half-widths, so point-mass nodes keep their mass.
const MIN_HALF_WIDTH: f64 = 1e-9;

/// Main box of layer output `ζ` given inputs in `z_prev`, plus a per-node
/// standard-deviation bound. With the outer orientation every `z ∈ z_prev`
/// puts mass at least `1 − ε` inside the box.
pub fn main_box(
    layer: &LayerPosterior,
    z_prev: &BoxDomain,
    eps: f64,
    orientation: BoxOrientation,
) -> Result<(BoxDomain, Vec<f64>)> {
    if !z_prev.is_bounded() {
        return Err(BnnError::Domain("main box needs a bounded input box".into()));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(BnnError::Domain(format!("mass epsilon {eps} outside (0, 1)")));
    }
    let n = layer.out_dim();
    let eta = (1.0 - eps).powf(1.0 / n as f64);
    let q = std::f64::consts::SQRT_2 * erfinv(eta)?;
    let rows = parallel::map_range(n, |i| {
        let nr = NodeRelax::new(layer, i, z_prev);
        let (lo, hi) = match orientation {
            BoxOrientation::Outer => (nr.m_range.lo - q * nr.r_range.hi, nr.m_range.hi + q * nr.r_range.hi),
            BoxOrientation::Inner => {
                let lo = -min_quantile_objective(layer, i, z_prev, -1.0, q);
                let hi = min_quantile_objective(layer, i, z_prev, 1.0, q);
                if lo <= hi {
                    (lo, hi)
                } else {
                    let mid = 0.5 * (lo + hi);
                    (mid, mid)
                }
            }
        };
        let pad = MIN_HALF_WIDTH * (1.0 + lo.abs().max(hi.abs()));
        (lo - pad, hi + pad, nr.r_range.hi)
    });
    let bx = BoxDomain::new(rows.iter().map(|r| r.0).collect(), rows.iter().map(|r| r.1).collect())?;
    Ok((bx, rows.iter().map(|r| r.2).collect()))
}

/// Projected-gradient minimisation of the convex `sign·m(z) + q·r(z)` over a
/// box. Used only by the inner orientation, which affects tightness but
/// never soundness.
fn min_quantile_objective(layer: &LayerPosterior, i: usize, b: &BoxDomain, sign: f64, q: f64) -> f64 {
    let n = layer.in_dim();
    let m = crate::layerprop::mean_form(layer, i);
    let f = |z: &[f64]| sign * m.eval(z) + q * node_var(layer, i, z).sqrt();
    let mut z = b.center();
    let mut best = f(&z);
    let diam: f64 = (0..n).map(|j| b.width(j)).fold(0.0, f64::max);
    if diam == 0.0 {
        return best;
    }
    let mut step = diam;
    for _ in 0..200 {
        let s = node_var(layer, i, &z);
        let mut g = &m.coef * sign;
        if s > 1e-24 {
            g += node_var_grad(layer, i, &z) * (0.5 * q / s.sqrt());
        }
        let gn = g.norm();
        if gn == 0.0 {
            break;
        }
        let cand: Vec<f64> = (0..n).map(|j| (z[j] - step * g[j] / gn).clamp(b.lo[j], b.hi[j])).collect();
        let v = f(&cand);
        if v < best {
            best = v;
            z = cand;
        } else {
            step *= 0.5;
            if step < 1e-12 * diam {
                break;
            }
        }
    }
    best
}

/// Greedy bisection of `main` into `n_pieces` boxes. Each step splits the
/// piece/dimension with the largest `width × weight` at its midpoint; ties
/// go to the lowest piece, then the lowest dimension.
pub fn refine(main: &BoxDomain, weights: &[f64], n_pieces: usize) -> Result<Vec<BoxDomain>> {
    if n_pieces < 1 {
        return Err(BnnError::Domain("refine needs at least one piece".into()));
    }
    if weights.len() != main.dim() {
        return Err(BnnError::Dimension("refine weights must match box dimension".into()));
    }
    let mut pieces = vec![main.clone()];
    while pieces.len() < n_pieces {
        let mut best: Option<(usize, usize, f64)> = None;
        for (p, b) in pieces.iter().enumerate() {
            for d in 0..b.dim() {
                let score = b.width(d) * weights[d];
                if score > 0.0 && best.is_none_or(|(_, _, s)| score > s) {
                    best = Some((p, d, score));
                }
            }
        }
        let Some((p, d, _)) = best else { break };
        let b = pieces.remove(p);
        let mid = 0.5 * (b.lo[d] + b.hi[d]);
        let mut left = b.clone();
        let mut right = b;
        left.hi[d] = mid;
        right.lo[d] = mid;
        pieces.insert(p, right);
        pieces.insert(p, left);
    }
    Ok(pieces)
}

/// Builds partitions for levels `1..=levels`.
pub fn build_partitions(model: &BnnModel, t: &BoxDomain, cfg: &DpConfig, levels: usize) -> Result<Vec<LayerPartition>> {
    let mut z_prev = t.clone();
    let mut out = Vec::with_capacity(levels);
    for level in 1..=levels {
        let layer = &model.layers[level - 1];
        let (main, std) = main_box(layer, &z_prev, cfg.mass_epsilon, cfg.orientation)?;
        let bounded = cfg.splits_for(level).saturating_sub(1).max(1);
        let weights: Vec<f64> = std.iter().map(|s| s.max(1e-300)).collect();
        let pieces = refine(&main, &weights, bounded)?;
        z_prev = act_box(layer.activation, &main);
        out.push(LayerPartition { level, activation: layer.activation, main, pieces, std });
    }
    Ok(out)
}

fn prefix_suffix(lo: &[f64], hi: &[f64]) -> Vec<Bracket> {
    let n = lo.len();
    let mut pl = vec![1.0; n + 1];
    let mut ph = vec![1.0; n + 1];
    for i in 0..n {
        pl[i + 1] = pl[i] * lo[i];
        ph[i + 1] = ph[i] * hi[i];
    }
    let mut sl = 1.0;
    let mut sh = 1.0;
    let mut out = vec![Bracket::point(1.0); n];
    for i in (0..n).rev() {
        out[i] = Bracket::new(pl[i] * sl, (ph[i] * sh).min(1.0));
        sl *= lo[i];
        sh *= hi[i];
    }
    out
}

/// Relaxation of `z ↦ E[ζ 1{ζ ≥ c}]`.
fn upper_moment_relax(node: &NodeRelax, c: f64) -> ScalarRelaxation {
    let n = node.m.coef.len();
    if c == f64::INFINITY {
        return ScalarRelaxation::constant(n, Bracket::point(0.0));
    }
    if c == f64::NEG_INFINITY {
        return ScalarRelaxation::exact(node.m.clone());
    }
    let q = prob_range(c, f64::INFINITY, node.m_range, node.r_range);
    node.relax_g(c).add_bracket(q.scale(c))
}

/// Relaxation of `z ↦ E[φ(ζ) 1{ζ ∈ [a, b]}]` on the node's box.
pub fn trunc_relax(node: &NodeRelax, act: Activation, a: f64, b: f64) -> ScalarRelaxation {
    let n = node.m.coef.len();
    let (lo, hi) = match act {
        Activation::Relu => (a.max(0.0), b.max(0.0)),
        Activation::Identity => (a, b),
    };
    if !(lo < hi) {
        return ScalarRelaxation::constant(n, Bracket::point(0.0));
    }
    let ua = upper_moment_relax(node, lo);
    let ub = upper_moment_relax(node, hi);
    let mut t = ua.add(&ub.neg());
    let pr = prob_range(lo, hi, node.m_range, node.r_range);
    let direct = match act {
        Activation::Relu => Bracket { lo: lo * pr.lo, hi: if hi.is_finite() { hi * pr.hi } else { f64::INFINITY } },
        Activation::Identity => {
            let l = if lo.is_finite() { (lo * pr.lo).min(lo * pr.hi) } else { f64::NEG_INFINITY };
            let h = if hi.is_finite() { (hi * pr.lo).max(hi * pr.hi) } else { f64::INFINITY };
            Bracket { lo: l, hi: h }
        }
    };
    let c = &node.center;
    if direct.lo.is_finite() && direct.lo > t.lower.eval(c) {
        t.lower = AffineForm::constant(n, direct.lo);
    }
    if direct.hi.is_finite() && direct.hi < t.upper.eval(c) {
        t.upper = AffineForm::constant(n, direct.hi);
    }
    t
}

/// Upper bound on `E[|φ(ζ)| 1{ζ ≥ c}]` over the rectangle.
fn upper_abs_moment(c: f64, mu: Bracket, sigma: Bracket) -> f64 {
    if c >= 0.0 {
        upper_moment_range(c, mu, sigma).hi.max(0.0)
    } else {
        (-c) * prob_range(c, 0.0, mu, sigma).hi + upper_moment_range(0.0, mu, sigma).hi.max(0.0)
    }
}

/// Upper bound on `E[|φ(ζ)| 1{ζ ∉ [a, b]}]`.
fn outside_abs_moment(act: Activation, a: f64, b: f64, mu: Bracket, sigma: Bracket) -> f64 {
    match act {
        Activation::Relu => {
            let below = if a > 0.0 { a * prob_range(0.0, a, mu, sigma).hi } else { 0.0 };
            below + upper_moment_range(b.max(0.0), mu, sigma).hi.max(0.0)
        }
        Activation::Identity => {
            let neg = Bracket::new(-mu.hi, -mu.lo);
            upper_abs_moment(b, mu, sigma) + upper_abs_moment(-a, neg, sigma)
        }
    }
}

/// min Σ c_k p_k s.t. p_k ∈ brackets, Σ p_k = 1. `None` if infeasible.
fn simplex_min(costs: &[f64], w: &[Bracket]) -> Option<f64> {
    let lo_sum: f64 = w.iter().map(|b| b.lo).sum();
    let hi_sum: f64 = w.iter().map(|b| b.hi).sum();
    if lo_sum > 1.0 + 1e-9 || hi_sum < 1.0 - 1e-9 {
        return None;
    }
    let mut order: Vec<usize> = (0..costs.len()).collect();
    order.sort_by(|&x, &y| costs[x].total_cmp(&costs[y]).then(x.cmp(&y)));
    let mut val: f64 = costs.iter().zip(w).map(|(c, b)| c * b.lo).sum();
    let mut rem = (1.0 - lo_sum).max(0.0);
    for k in order {
        if rem <= 0.0 {
            break;
        }
        let take = rem.min(w[k].hi - w[k].lo);
        val += costs[k] * take;
        rem -= take;
    }
    let scale: f64 = costs.iter().map(|c| c.abs()).sum();
    Some(val - 1e-12 * (1.0 + scale))
}

/// Relaxation of `z ↦ E[V(φ(ζ(z)))]` on `target`, where `ζ` is the output of
/// `layer` and `V` is relaxed in `φ(ζ)`.
pub fn bp_step(v: &ValueRelaxation, layer: &LayerPosterior, target: &BoxDomain) -> Result<AffineRelaxation> {
    if !target.is_bounded() {
        return Err(BnnError::Domain("bp target must be bounded".into()));
    }
    if target.dim() != layer.in_dim() {
        return Err(BnnError::Dimension(format!(
            "target dim {} but layer input dim {}",
            target.dim(),
            layer.in_dim()
        )));
    }
    match v {
        ValueRelaxation::Affine(r) => Ok(prop_affine_value(r, layer, target)),
        ValueRelaxation::Piecewise(p) => bp_piecewise(p, layer, target),
    }
}

fn bp_piecewise(pv: &PiecewiseValue, layer: &LayerPosterior, target: &BoxDomain) -> Result<AffineRelaxation> {
    let n = layer.out_dim();
    let nin = layer.in_dim();
    let act = layer.activation;
    let part = &pv.partition;
    if part.main.dim() != n {
        return Err(BnnError::Dimension("partition dim differs from layer output dim".into()));
    }
    let m = pv.pieces.first().map_or(0, |r| r.out_dim());
    let nodes = layer_relax(layer, target);
    let coord_prob = |l: usize, a: f64, b: f64| prob_range(a, b, nodes[l].m_range, nodes[l].r_range);

    let pm: Vec<Bracket> = (0..n).map(|l| coord_prob(l, part.main.lo[l], part.main.hi[l])).collect();
    let pm_lo: f64 = pm.iter().map(|b| b.lo).product();
    let pm_hi: f64 = pm.iter().map(|b| b.hi).product::<f64>().min(1.0);
    let pc = Bracket::new((1.0 - pm_hi).max(0.0), (1.0 - pm_lo).clamp(0.0, 1.0));

    let coord: Vec<Vec<Bracket>> = part
        .pieces
        .iter()
        .map(|b| (0..n).map(|l| coord_prob(l, b.lo[l], b.hi[l])).collect())
        .collect();
    let piece_p: Vec<Bracket> = coord
        .iter()
        .map(|c| {
            Bracket::new(c.iter().map(|b| b.lo).product(), c.iter().map(|b| b.hi).product::<f64>().min(1.0))
        })
        .collect();

    let all_const = pv.pieces.iter().all(|r| r.is_constant());
    if let (true, Complement::Constant(cc)) = (all_const, &pv.complement) {
        return Ok(constant_combination(pv, cc, &piece_p, pc, nin));
    }

    let mut lower = AffineMap::zeros(m, nin);
    let mut upper = AffineMap::zeros(m, nin);
    for (j, rel) in pv.pieces.iter().enumerate() {
        let p = piece_p[j];
        for o in 0..m {
            let bl = rel.lower.b[o];
            let bh = rel.upper.b[o];
            lower.b[o] += if bl >= 0.0 { bl * p.lo } else { bl * p.hi };
            upper.b[o] += if bh >= 0.0 { bh * p.hi } else { bh * p.lo };
        }
        if rel.is_constant() {
            continue;
        }
        let lo_v: Vec<f64> = coord[j].iter().map(|b| b.lo).collect();
        let hi_v: Vec<f64> = coord[j].iter().map(|b| b.hi).collect();
        let q = prefix_suffix(&lo_v, &hi_v);
        let bx = &part.pieces[j];
        let rows = parallel::map_range(n, |i| {
            let used = (0..m).any(|o| rel.lower.a[(o, i)] != 0.0 || rel.upper.a[(o, i)] != 0.0);
            if !used {
                return None;
            }
            let t = trunc_relax(&nodes[i], act, bx.lo[i], bx.hi[i]);
            Some(match act {
                Activation::Relu => ScalarRelaxation { lower: t.lower.scaled(q[i].lo), upper: t.upper.scaled(q[i].hi) },
                Activation::Identity => t.times_nonneg(q[i], target),
            })
        });
        for (i, e) in rows.iter().enumerate() {
            let Some(e) = e else { continue };
            for o in 0..m {
                let c = rel.lower.a[(o, i)];
                if c != 0.0 {
                    let f = if c > 0.0 { &e.lower } else { &e.upper };
                    for (x, fc) in f.coef.iter().enumerate() {
                        lower.a[(o, x)] += c * fc;
                    }
                    lower.b[o] += c * f.offset;
                }
                let c = rel.upper.a[(o, i)];
                if c != 0.0 {
                    let f = if c > 0.0 { &e.upper } else { &e.lower };
                    for (x, fc) in f.coef.iter().enumerate() {
                        upper.a[(o, x)] += c * fc;
                    }
                    upper.b[o] += c * f.offset;
                }
            }
        }
    }

    match &pv.complement {
        Complement::Constant(cc) => {
            for o in 0..m {
                let (cl, ch) = (cc.lo[o], cc.hi[o]);
                lower.b[o] += if cl >= 0.0 { cl * pc.lo } else { cl * pc.hi };
                upper.b[o] += if ch >= 0.0 { ch * pc.hi } else { ch * pc.lo };
            }
        }
        Complement::Envelope(env) => {
            let lo_v: Vec<f64> = pm.iter().map(|b| b.lo).collect();
            let hi_v: Vec<f64> = pm.iter().map(|b| b.hi).collect();
            let qm = prefix_suffix(&lo_v, &hi_v);
            let w: Vec<f64> = (0..n)
                .map(|i| {
                    let (a, b) = (part.main.lo[i], part.main.hi[i]);
                    let out = outside_abs_moment(act, a, b, nodes[i].m_range, nodes[i].r_range);
                    let inside = act.apply(a).abs().max(act.apply(b).abs()) * pm[i].hi;
                    out + inside * (1.0 - qm[i].lo).max(0.0)
                })
                .collect();
            for o in 0..m {
                let mut u = env.alpha0[o] * pc.hi;
                for i in 0..n {
                    let a = env.alpha[(o, i)];
                    if a != 0.0 {
                        u += a * w[i];
                    }
                }
                if !u.is_finite() {
                    return Err(BnnError::Unbounded(format!("complement contribution for output {o}")));
                }
                lower.b[o] -= u;
                upper.b[o] += u;
            }
        }
    }
    AffineRelaxation::new(lower, upper)
}

fn constant_combination(
    pv: &PiecewiseValue,
    cc: &Interval,
    piece_p: &[Bracket],
    pc: Bracket,
    nin: usize,
) -> AffineRelaxation {
    let m = cc.dim();
    let mut weights: Vec<Bracket> = piece_p.to_vec();
    weights.push(pc);
    let mut lo = DVector::zeros(m);
    let mut hi = DVector::zeros(m);
    for o in 0..m {
        let cl: Vec<f64> = pv.pieces.iter().map(|r| r.lower.b[o]).chain([cc.lo[o]]).collect();
        let ch: Vec<f64> = pv.pieces.iter().map(|r| r.upper.b[o]).chain([cc.hi[o]]).collect();
        let sat_lo: f64 = cl.iter().zip(&weights).map(|(c, w)| if *c >= 0.0 { c * w.lo } else { c * w.hi }).sum();
        let sat_hi: f64 = ch.iter().zip(&weights).map(|(c, w)| if *c >= 0.0 { c * w.hi } else { c * w.lo }).sum();
        let neg: Vec<f64> = ch.iter().map(|c| -c).collect();
        let l = simplex_min(&cl, &weights).map_or(sat_lo, |v| v.max(sat_lo));
        let h = simplex_min(&neg, &weights).map_or(sat_hi, |v| (-v).min(sat_hi));
        let floor = cl.iter().copied().fold(f64::INFINITY, f64::min);
        let ceil = ch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        lo[o] = l.max(floor);
        hi[o] = h.min(ceil).max(lo[o]);
    }
    AffineRelaxation::constant(nin, &Interval { lo, hi })
}

fn terminal_value(model: &BnnModel, terminal: Terminal, part: &LayerPartition) -> (PiecewiseValue, Interval) {
    let nout = model.output_dim();
    match terminal {
        Terminal::Softmax => {
            let boxes: Vec<Option<BoxDomain>> = part.pieces.iter().cloned().map(Some).collect();
            let ivs = decision::ibp_softmax(&boxes, nout);
            let pieces = ivs.iter().map(|iv| AffineRelaxation::constant(nout, iv)).collect();
            let hull = Interval { lo: DVector::zeros(nout), hi: DVector::from_element(nout, 1.0) };
            (PiecewiseValue { partition: part.clone(), pieces, complement: Complement::Constant(hull.clone()) }, hull)
        }
        Terminal::Indicator => {
            let one = Interval { lo: DVector::from_element(1, 1.0), hi: DVector::from_element(1, 1.0) };
            let zero = Interval { lo: DVector::zeros(1), hi: DVector::zeros(1) };
            let pieces = part.pieces.iter().map(|_| AffineRelaxation::constant(nout, &one)).collect();
            let hull = Interval { lo: DVector::zeros(1), hi: DVector::from_element(1, 1.0) };
            (PiecewiseValue { partition: part.clone(), pieces, complement: Complement::Constant(zero) }, hull)
        }
        Terminal::Regression => unreachable!("regression terminal is affine"),
    }
}

/// Number of partitioned levels for a terminal.
pub fn partition_levels(model: &BnnModel, terminal: Terminal) -> usize {
    let k = model.hidden_layers();
    match terminal {
        Terminal::Regression => k.saturating_sub(1),
        Terminal::Softmax | Terminal::Indicator => k + 1,
    }
}

#[derive(Clone, Debug)]
pub struct DpOutput {
    /// Relaxation of `V_0` on `T`.
    pub v0: AffineRelaxation,
    pub partitions: Vec<LayerPartition>,
}

/// Backward pass over prebuilt partitions.
pub fn backward(
    model: &BnnModel,
    t: &BoxDomain,
    partitions: &[LayerPartition],
    terminal: Terminal,
) -> Result<AffineRelaxation> {
    let k = model.hidden_layers();
    let (mut v, top, hull) = match terminal {
        Terminal::Regression => {
            if k == 0 {
                return Ok(decision::terminal_regression(model));
            }
            (ValueRelaxation::Affine(decision::terminal_regression(model)), k, None)
        }
        _ => {
            let part = partitions.last().ok_or_else(|| BnnError::Domain("missing output partition".into()))?;
            let (pv, hull) = terminal_value(model, terminal, part);
            (ValueRelaxation::Piecewise(pv), k + 1, Some(hull))
        }
    };
    let env = if hull.is_none() { growth_envelopes(model) } else { Vec::new() };
    for level in (0..top).rev() {
        let layer = &model.layers[level];
        if level == 0 {
            return bp_step(&v, layer, t);
        }
        let part = &partitions[level - 1];
        let targets: Vec<BoxDomain> = (0..part.pieces.len()).map(|j| part.image(j)).collect();
        let rels = parallel::map_slice(&targets, |tg| bp_step(&v, layer, tg));
        let pieces = rels.into_iter().collect::<Result<Vec<_>>>()?;
        let complement = match &hull {
            Some(h) => Complement::Constant(h.clone()),
            None => Complement::Envelope(env[level].clone()),
        };
        v = ValueRelaxation::Piecewise(PiecewiseValue { partition: part.clone(), pieces, complement });
    }
    unreachable!("loop returns at level 0")
}

/// Full dynamic program: partitions forward, relaxations backward.
pub fn run_dp(model: &BnnModel, t: &BoxDomain, cfg: &DpConfig, terminal: Terminal) -> Result<DpOutput> {
    cfg.validate()?;
    if t.dim() != model.input_dim() {
        return Err(BnnError::Dimension(format!("input box dim {} but model input dim {}", t.dim(), model.input_dim())));
    }
    if !t.is_bounded() {
        return Err(BnnError::Domain("input box must be bounded".into()));
    }
    let partitions = build_partitions(model, t, cfg, partition_levels(model, terminal))?;
    let v0 = backward(model, t, &partitions, terminal)?;
    Ok(DpOutput { v0, partitions })
}

/// Exact-cover check for a tiling of `main` by `pieces`: volumes add up and
/// interiors are pairwise disjoint.
pub fn tiles_exactly(main: &BoxDomain, pieces: &[BoxDomain]) -> bool {
    let inside = pieces
        .iter()
        .all(|p| (0..main.dim()).all(|d| p.lo[d] >= main.lo[d] && p.hi[d] <= main.hi[d]));
    let disjoint = (0..pieces.len()).all(|a| {
        (a + 1..pieces.len()).all(|b| (0..main.dim()).any(|d| pieces[a].hi[d] <= pieces[b].lo[d] || pieces[b].hi[d] <= pieces[a].lo[d]))
    });
    let vol: f64 = pieces.iter().map(|p| p.volume()).sum();
    let mv = main.volume();
    inside && disjoint && (vol - mv).abs() <= 1e-12 * mv.max(1e-300)
}
