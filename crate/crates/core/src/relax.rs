//! Interval and affine relaxation algebra.
//!
//! Saturation operators split a linear map `M` into `M⁺ = max(M, 0)` and
//! `M⁻ = min(M, 0)`; pushing an interval (or a pair of affine bounds)
//! through `M` then takes the lower end from `M⁺·lo + M⁻·hi` and the upper
//! end from `M⁺·hi + M⁻·lo`.
//!
//! Unbounded box sides are represented with IEEE infinities. Products of a
//! zero coefficient with an infinite side are treated as zero.

use nalgebra::{DMatrix, DVector};

use crate::error::{BnnError, Result};

/// Closed scalar interval `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bracket {
    pub lo: f64,
    pub hi: f64,
}

impl Bracket {
    pub fn new(lo: f64, hi: f64) -> Self {
        debug_assert!(!(lo > hi + 1e-9 * (1.0 + lo.abs().max(hi.abs()))), "bracket {lo} > {hi}");
        Self { lo: lo.min(hi), hi: hi.max(lo) }
    }

    pub fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn add(self, o: Bracket) -> Bracket {
        Bracket { lo: self.lo + o.lo, hi: self.hi + o.hi }
    }

    pub fn sub(self, o: Bracket) -> Bracket {
        Bracket { lo: self.lo - o.hi, hi: self.hi - o.lo }
    }

    pub fn scale(self, c: f64) -> Bracket {
        if c == 0.0 {
            Bracket::point(0.0)
        } else if c > 0.0 {
            Bracket { lo: c * self.lo, hi: c * self.hi }
        } else {
            Bracket { lo: c * self.hi, hi: c * self.lo }
        }
    }

    /// General interval product.
    pub fn mul(self, o: Bracket) -> Bracket {
        let p = [sat_mul(self.lo, o.lo), sat_mul(self.lo, o.hi), sat_mul(self.hi, o.lo), sat_mul(self.hi, o.hi)];
        Bracket {
            lo: p.iter().copied().fold(f64::INFINITY, f64::min),
            hi: p.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }

    /// Product with an interval known to be nonnegative.
    pub fn mul_nonneg(self, o: Bracket) -> Bracket {
        debug_assert!(o.lo >= 0.0);
        self.mul(o)
    }

    /// Intersection; if the two are disjoint (possible only through rounding
    /// noise between two valid enclosures) the tighter side wins.
    pub fn intersect(self, o: Bracket) -> Bracket {
        let lo = self.lo.max(o.lo);
        let hi = self.hi.min(o.hi);
        if lo <= hi {
            Bracket { lo, hi }
        } else {
            Bracket { lo: hi, hi: lo }
        }
    }

    pub fn hull(self, o: Bracket) -> Bracket {
        Bracket { lo: self.lo.min(o.lo), hi: self.hi.max(o.hi) }
    }
}

/// `a * b` with the convention `0 * ±∞ = 0`.
#[inline]
pub fn sat_mul(a: f64, b: f64) -> f64 {
    if a == 0.0 || b == 0.0 {
        0.0
    } else {
        a * b
    }
}

/// Vector interval `[lo, hi]` (componentwise).
#[derive(Clone, Debug, PartialEq)]
pub struct Interval {
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

const ORDER_SLACK: f64 = 1e-12;

impl Interval {
    /// Builds an interval, clamping inversions within 1e-12 slack.
    pub fn new(lo: DVector<f64>, hi: DVector<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(BnnError::Dimension(format!(
                "interval ends have lengths {} and {}",
                lo.len(),
                hi.len()
            )));
        }
        let mut lo = lo;
        let mut hi = hi;
        for i in 0..lo.len() {
            if lo[i] > hi[i] {
                if lo[i] - hi[i] <= ORDER_SLACK * (1.0 + lo[i].abs()) {
                    let m = 0.5 * (lo[i] + hi[i]);
                    lo[i] = m;
                    hi[i] = m;
                } else {
                    return Err(BnnError::Domain(format!(
                        "interval component {i} inverted: {} > {}",
                        lo[i], hi[i]
                    )));
                }
            }
        }
        Ok(Self { lo, hi })
    }

    pub fn point(v: DVector<f64>) -> Self {
        Self { lo: v.clone(), hi: v }
    }

    pub fn from_brackets(b: &[Bracket]) -> Self {
        Self {
            lo: DVector::from_iterator(b.len(), b.iter().map(|x| x.lo)),
            hi: DVector::from_iterator(b.len(), b.iter().map(|x| x.hi)),
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn get(&self, i: usize) -> Bracket {
        Bracket { lo: self.lo[i], hi: self.hi[i] }
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        x.iter().enumerate().all(|(i, &v)| self.lo[i] - tol <= v && v <= self.hi[i] + tol)
    }
}

/// Axis-aligned box; sides may be infinite.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(BnnError::Dimension(format!(
                "box ends have lengths {} and {}",
                lo.len(),
                hi.len()
            )));
        }
        for i in 0..lo.len() {
            if lo[i].is_nan() || hi[i].is_nan() || lo[i] > hi[i] {
                return Err(BnnError::Domain(format!("box side {i} is [{}, {}]", lo[i], hi[i])));
            }
        }
        Ok(Self { lo, hi })
    }

    /// ℓ∞ ball around `center`.
    pub fn ball(center: &[f64], radius: f64) -> Result<Self> {
        if !(radius >= 0.0) {
            return Err(BnnError::Domain(format!("radius {radius} must be nonnegative")));
        }
        Self::new(
            center.iter().map(|c| c - radius).collect(),
            center.iter().map(|c| c + radius).collect(),
        )
    }

    pub fn point(x: &[f64]) -> Self {
        Self { lo: x.to_vec(), hi: x.to_vec() }
    }

    pub fn whole(dim: usize) -> Self {
        Self { lo: vec![f64::NEG_INFINITY; dim], hi: vec![f64::INFINITY; dim] }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn is_bounded(&self) -> bool {
        self.lo.iter().chain(&self.hi).all(|v| v.is_finite())
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    pub fn width(&self, i: usize) -> f64 {
        self.hi[i] - self.lo[i]
    }

    pub fn side(&self, i: usize) -> Bracket {
        Bracket { lo: self.lo[i], hi: self.hi[i] }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().enumerate().all(|(i, &v)| self.lo[i] <= v && v <= self.hi[i])
    }

    /// Image under elementwise ReLU.
    pub fn relu(&self) -> BoxDomain {
        BoxDomain {
            lo: self.lo.iter().map(|v| v.max(0.0)).collect(),
            hi: self.hi.iter().map(|v| v.max(0.0)).collect(),
        }
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|i| self.width(i)).product()
    }
}

/// Scalar-valued affine function `x ↦ coef·x + offset`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineForm {
    pub coef: DVector<f64>,
    pub offset: f64,
}

impl AffineForm {
    pub fn constant(dim: usize, c: f64) -> Self {
        Self { coef: DVector::zeros(dim), offset: c }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.coef.iter().zip(x).map(|(a, b)| sat_mul(*a, *b)).sum::<f64>() + self.offset
    }

    pub fn range_on(&self, b: &BoxDomain) -> Bracket {
        let mut lo = self.offset;
        let mut hi = self.offset;
        for i in 0..self.coef.len() {
            let c = self.coef[i];
            if c == 0.0 {
                continue;
            }
            if c > 0.0 {
                lo += c * b.lo[i];
                hi += c * b.hi[i];
            } else {
                lo += c * b.hi[i];
                hi += c * b.lo[i];
            }
        }
        Bracket { lo, hi }
    }

    pub fn scaled(&self, s: f64) -> AffineForm {
        AffineForm { coef: &self.coef * s, offset: self.offset * s }
    }

    pub fn add(&self, o: &AffineForm) -> AffineForm {
        AffineForm { coef: &self.coef + &o.coef, offset: self.offset + o.offset }
    }

    pub fn shifted(&self, c: f64) -> AffineForm {
        AffineForm { coef: self.coef.clone(), offset: self.offset + c }
    }
}

/// Scalar function sandwiched between two affine forms.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarRelaxation {
    pub lower: AffineForm,
    pub upper: AffineForm,
}

impl ScalarRelaxation {
    pub fn exact(f: AffineForm) -> Self {
        Self { lower: f.clone(), upper: f }
    }

    pub fn constant(dim: usize, b: Bracket) -> Self {
        Self { lower: AffineForm::constant(dim, b.lo), upper: AffineForm::constant(dim, b.hi) }
    }

    /// Negation swaps the sides.
    pub fn neg(&self) -> Self {
        Self { lower: self.upper.scaled(-1.0), upper: self.lower.scaled(-1.0) }
    }

    pub fn add(&self, o: &ScalarRelaxation) -> Self {
        Self { lower: self.lower.add(&o.lower), upper: self.upper.add(&o.upper) }
    }

    pub fn add_bracket(&self, b: Bracket) -> Self {
        Self { lower: self.lower.shifted(b.lo), upper: self.upper.shifted(b.hi) }
    }

    /// Multiplies the relaxed quantity by an unknown factor `q ∈ [q.lo, q.hi]`
    /// with `q.lo ≥ 0`, staying affine. `domain` is where the relaxation holds.
    pub fn times_nonneg(&self, q: Bracket, domain: &BoxDomain) -> Self {
        debug_assert!(q.lo >= 0.0);
        if q.lo == q.hi {
            return Self { lower: self.lower.scaled(q.lo), upper: self.upper.scaled(q.lo) };
        }
        let lo_rng = self.lower.range_on(domain);
        let hi_rng = self.upper.range_on(domain);
        let lower = if lo_rng.lo >= 0.0 {
            self.lower.scaled(q.lo)
        } else if hi_rng.hi <= 0.0 {
            self.lower.scaled(q.hi)
        } else {
            let qc = q.mid();
            let h = 0.5 * q.width();
            let m = lo_rng.lo.abs().max(hi_rng.hi.abs());
            self.lower.scaled(qc).shifted(-h * m)
        };
        let upper = if hi_rng.hi <= 0.0 {
            self.upper.scaled(q.lo)
        } else if lo_rng.lo >= 0.0 {
            self.upper.scaled(q.hi)
        } else {
            let qc = q.mid();
            let h = 0.5 * q.width();
            let m = lo_rng.lo.abs().max(hi_rng.hi.abs());
            self.upper.scaled(qc).shifted(h * m)
        };
        Self { lower, upper }
    }
}

/// Vector-valued affine map `x ↦ A x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineMap {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl AffineMap {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self { a: DMatrix::zeros(out_dim, in_dim), b: DVector::zeros(out_dim) }
    }

    pub fn out_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn eval(&self, x: &[f64]) -> DVector<f64> {
        let xv = DVector::from_column_slice(x);
        &self.a * xv + &self.b
    }

    pub fn row(&self, i: usize) -> AffineForm {
        AffineForm { coef: self.a.row(i).transpose(), offset: self.b[i] }
    }

    pub fn from_rows(rows: &[AffineForm], in_dim: usize) -> Self {
        let mut a = DMatrix::zeros(rows.len(), in_dim);
        let mut b = DVector::zeros(rows.len());
        for (i, r) in rows.iter().enumerate() {
            a.row_mut(i).copy_from(&r.coef.transpose());
            b[i] = r.offset;
        }
        Self { a, b }
    }
}

/// Pair of affine maps sandwiching a vector-valued function on some domain.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineRelaxation {
    pub lower: AffineMap,
    pub upper: AffineMap,
}

impl AffineRelaxation {
    pub fn new(lower: AffineMap, upper: AffineMap) -> Result<Self> {
        if lower.a.shape() != upper.a.shape() || lower.b.len() != upper.b.len() {
            return Err(BnnError::Dimension("lower/upper relaxation shapes differ".into()));
        }
        Ok(Self { lower, upper })
    }

    pub fn exact(f: AffineMap) -> Self {
        Self { lower: f.clone(), upper: f }
    }

    pub fn constant(in_dim: usize, iv: &Interval) -> Self {
        let m = iv.dim();
        Self {
            lower: AffineMap { a: DMatrix::zeros(m, in_dim), b: iv.lo.clone() },
            upper: AffineMap { a: DMatrix::zeros(m, in_dim), b: iv.hi.clone() },
        }
    }

    pub fn out_dim(&self) -> usize {
        self.lower.out_dim()
    }

    pub fn in_dim(&self) -> usize {
        self.lower.in_dim()
    }

    pub fn is_constant(&self) -> bool {
        self.lower.a.iter().chain(self.upper.a.iter()).all(|v| *v == 0.0)
    }

    pub fn from_rows(rows: &[ScalarRelaxation], in_dim: usize) -> Self {
        let lo: Vec<AffineForm> = rows.iter().map(|r| r.lower.clone()).collect();
        let hi: Vec<AffineForm> = rows.iter().map(|r| r.upper.clone()).collect();
        Self { lower: AffineMap::from_rows(&lo, in_dim), upper: AffineMap::from_rows(&hi, in_dim) }
    }

    pub fn row(&self, i: usize) -> ScalarRelaxation {
        ScalarRelaxation { lower: self.lower.row(i), upper: self.upper.row(i) }
    }

    /// Evaluates both sides at `x`.
    pub fn eval(&self, x: &[f64]) -> (DVector<f64>, DVector<f64>) {
        (self.lower.eval(x), self.upper.eval(x))
    }

    /// Worst-case enclosure of the relaxed function over `b`.
    pub fn range_on(&self, b: &BoxDomain) -> Interval {
        let lo = affine_range_on_box(&self.lower.a, &self.lower.b, b);
        let hi = affine_range_on_box(&self.upper.a, &self.upper.b, b);
        Interval { lo: lo.lo, hi: hi.hi }
    }
}

/// Relaxations attached to the pieces of a box partition, plus an optional
/// constant relaxation valid on the complement of the union of pieces.
#[derive(Clone, Debug, PartialEq)]
pub struct PwaRelaxation {
    pub pieces: Vec<(BoxDomain, AffineRelaxation)>,
    pub complement: Option<Interval>,
}

impl PwaRelaxation {
    pub fn new(pieces: Vec<(BoxDomain, AffineRelaxation)>, complement: Option<Interval>) -> Result<Self> {
        if let Some(first) = pieces.first() {
            let (d, m) = (first.0.dim(), first.1.out_dim());
            for (b, r) in &pieces {
                if b.dim() != d || r.out_dim() != m {
                    return Err(BnnError::Dimension("inconsistent piece dimensions".into()));
                }
            }
            if let Some(c) = &complement {
                if c.dim() != m {
                    return Err(BnnError::Dimension("complement interval has wrong output dim".into()));
                }
            }
        }
        Ok(Self { pieces, complement })
    }

    /// Evaluates the relaxation bracket at `x`: the first piece containing
    /// `x`, else the complement.
    pub fn eval(&self, x: &[f64]) -> Option<(DVector<f64>, DVector<f64>)> {
        for (b, r) in &self.pieces {
            if b.contains(x) {
                return Some(r.eval(x));
            }
        }
        self.complement.as_ref().map(|c| (c.lo.clone(), c.hi.clone()))
    }
}

/// Elementwise max(M, 0).
pub fn pos_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| v.max(0.0))
}

/// Elementwise min(M, 0).
pub fn neg_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| v.min(0.0))
}

/// `M ⊗ [lo, hi]`.
pub fn linmap_interval(m: &DMatrix<f64>, iv: &Interval) -> Result<Interval> {
    if m.ncols() != iv.dim() {
        return Err(BnnError::Dimension(format!(
            "map has {} columns, interval has dim {}",
            m.ncols(),
            iv.dim()
        )));
    }
    let mut lo = DVector::zeros(m.nrows());
    let mut hi = DVector::zeros(m.nrows());
    for i in 0..m.nrows() {
        let (mut l, mut h) = (0.0, 0.0);
        for j in 0..m.ncols() {
            let c = m[(i, j)];
            if c > 0.0 {
                l += sat_mul(c, iv.lo[j]);
                h += sat_mul(c, iv.hi[j]);
            } else if c < 0.0 {
                l += sat_mul(c, iv.hi[j]);
                h += sat_mul(c, iv.lo[j]);
            }
        }
        lo[i] = l;
        hi[i] = h;
    }
    Ok(Interval { lo, hi })
}

/// Symbolic `M ⊗ [A_lo x + b_lo, A_hi x + b_hi]`.
pub fn linmap_affine(m: &DMatrix<f64>, r: &AffineRelaxation) -> Result<AffineRelaxation> {
    if m.ncols() != r.out_dim() {
        return Err(BnnError::Dimension(format!(
            "map has {} columns, relaxation has output dim {}",
            m.ncols(),
            r.out_dim()
        )));
    }
    let mp = pos_part(m);
    let mn = neg_part(m);
    let lower = AffineMap {
        a: &mp * &r.lower.a + &mn * &r.upper.a,
        b: &mp * &r.lower.b + &mn * &r.upper.b,
    };
    let upper = AffineMap {
        a: &mp * &r.upper.a + &mn * &r.lower.a,
        b: &mp * &r.upper.b + &mn * &r.lower.b,
    };
    Ok(AffineRelaxation { lower, upper })
}

/// Exact range of `A x + b` over a box, via saturation on centred
/// coordinates. Unbounded sides with a nonzero coefficient give ±∞.
pub fn affine_range_on_box(a: &DMatrix<f64>, b: &DVector<f64>, bx: &BoxDomain) -> Interval {
    let mut lo = DVector::zeros(a.nrows());
    let mut hi = DVector::zeros(a.nrows());
    let center: Vec<f64> = (0..bx.dim())
        .map(|j| if bx.lo[j].is_finite() && bx.hi[j].is_finite() { 0.5 * (bx.lo[j] + bx.hi[j]) } else { 0.0 })
        .collect();
    for i in 0..a.nrows() {
        let (mut l, mut h) = (b[i], b[i]);
        for j in 0..a.ncols() {
            let c = a[(i, j)];
            if c == 0.0 {
                continue;
            }
            if bx.lo[j].is_finite() && bx.hi[j].is_finite() {
                let mid = c * center[j];
                let rad = c.abs() * 0.5 * (bx.hi[j] - bx.lo[j]);
                l += mid - rad;
                h += mid + rad;
            } else if c > 0.0 {
                l += c * bx.lo[j];
                h += c * bx.hi[j];
            } else {
                l += c * bx.hi[j];
                h += c * bx.lo[j];
            }
        }
        lo[i] = l;
        hi[i] = h;
    }
    Interval { lo, hi }
}
