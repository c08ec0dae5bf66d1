//! Independent ground truth: Monte-Carlo expectations, adaptive
//! Gauss–Kronrod quadrature, and the soundness audit harness.
//!
//! Nothing here calls into the relaxation or DP code; the forward pass and
//! moment evaluation are reimplemented on top of the model type.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::certify::{bound_expectation, CertifyOptions};
use crate::error::{BnnError, Result};
use crate::model::{gen_model, Activation, BnnModel, CovKind, GenSpec, NodeCov, Task};
use crate::parallel;
use crate::relax::BoxDomain;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    Identity,
    Softmax,
}

impl Readout {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Regression => Readout::Identity,
            Task::Classification => Readout::Softmax,
        }
    }
}

/// How network outputs are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    /// Draw every weight row, then run the network.
    FullWeights,
    /// Draw each pre-activation from its exact conditional law
    /// `N(m(z), s(z))` given the previous layer. Same output distribution
    /// as `FullWeights` because node rows are independent.
    LocalReparam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
}

const CHUNK: usize = 4096;

fn chunk_rng(seed: u64, chunk: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk as u64);
    rng
}

fn augmented(z: &[f64]) -> impl Fn(usize) -> f64 + '_ {
    move |j| if j < z.len() { z[j] } else { 1.0 }
}

/// Plain forward pass on sampled weights.
fn forward_sampled<R: Rng>(model: &BnnModel, x: &[f64], rng: &mut R) -> Vec<f64> {
    let mut z = x.to_vec();
    for layer in &model.layers {
        let d = layer.mean.ncols();
        let mut out = vec![0.0; layer.out_dim()];
        for (i, o) in out.iter_mut().enumerate() {
            let zt = augmented(&z);
            let mut acc = 0.0;
            match &layer.cov[i] {
                NodeCov::Diagonal(v) => {
                    for j in 0..d {
                        let xi: f64 = rng.sample(StandardNormal);
                        acc += (layer.mean[(i, j)] + v[j].sqrt() * xi) * zt(j);
                    }
                }
                NodeCov::Full(f) => {
                    let xi: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                    for j in 0..d {
                        let mut w = layer.mean[(i, j)];
                        for c in 0..d {
                            w += f.factor[(j, c)] * xi[c];
                        }
                        acc += w * zt(j);
                    }
                }
            }
            *o = apply(layer.activation, acc);
        }
        z = out;
    }
    z
}

fn apply(act: Activation, v: f64) -> f64 {
    match act {
        Activation::Relu => {
            if v > 0.0 {
                v
            } else {
                0.0
            }
        }
        Activation::Identity => v,
    }
}

enum RowVar {
    Diagonal(Vec<f64>),
    Full(Vec<f64>),
}

struct PlanLayer {
    activation: Activation,
    d: usize,
    /// Row-major `out × d` means.
    mean: Vec<f64>,
    var: Vec<RowVar>,
}

/// Precomputed layout for the local-reparameterisation sampler. The first
/// layer sees a fixed input, so its pre-activation moments are computed once.
struct LocalPlan {
    first_act: Activation,
    first_mean: Vec<f64>,
    first_sd: Vec<f64>,
    rest: Vec<PlanLayer>,
}

impl LocalPlan {
    fn new(model: &BnnModel, x: &[f64]) -> Self {
        let first = &model.layers[0];
        let (m, s) = crate::layerprop::eval_moments(first, x);
        let rest = model.layers[1..]
            .iter()
            .map(|layer| {
                let d = layer.mean.ncols();
                let mut mean = Vec::with_capacity(layer.out_dim() * d);
                for i in 0..layer.out_dim() {
                    mean.extend((0..d).map(|j| layer.mean[(i, j)]));
                }
                let var = layer
                    .cov
                    .iter()
                    .map(|c| match c {
                        NodeCov::Diagonal(v) => RowVar::Diagonal(v.iter().copied().collect()),
                        NodeCov::Full(f) => RowVar::Full(f.matrix.transpose().iter().copied().collect()),
                    })
                    .collect();
                PlanLayer { activation: layer.activation, d, mean, var }
            })
            .collect();
        Self {
            first_act: first.activation,
            first_mean: m.iter().copied().collect(),
            first_sd: s.iter().map(|v| v.max(0.0).sqrt()).collect(),
            rest,
        }
    }

    /// Forward pass drawing pre-activations from their conditional Gaussians.
    fn sample<R: Rng>(&self, rng: &mut R, z: &mut Vec<f64>, out: &mut Vec<f64>) {
        z.clear();
        for (m, sd) in self.first_mean.iter().zip(&self.first_sd) {
            let xi: f64 = rng.sample(StandardNormal);
            z.push(apply(self.first_act, m + sd * xi));
        }
        for layer in &self.rest {
            let d = layer.d;
            z.push(1.0);
            out.clear();
            for (i, var) in layer.var.iter().enumerate() {
                let row = &layer.mean[i * d..(i + 1) * d];
                let m: f64 = row.iter().zip(z.iter()).map(|(w, v)| w * v).sum();
                let s = match var {
                    RowVar::Diagonal(v) => v.iter().zip(z.iter()).map(|(w, v)| w * v * v).sum::<f64>(),
                    RowVar::Full(f) => {
                        let mut s = 0.0;
                        for r in 0..d {
                            let fr = &f[r * d..(r + 1) * d];
                            s += z[r] * fr.iter().zip(z.iter()).map(|(a, b)| a * b).sum::<f64>();
                        }
                        s
                    }
                };
                let xi: f64 = rng.sample(StandardNormal);
                out.push(apply(layer.activation, m + s.max(0.0).sqrt() * xi));
            }
            std::mem::swap(z, out);
        }
    }
}

fn softmax_in_place(y: &mut [f64]) {
    let m = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in y.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in y.iter_mut() {
        *v /= sum;
    }
}

#[derive(Clone)]
struct Moments {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(dim: usize) -> Self {
        Self { n: 0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    fn push(&mut self, v: &[f64]) {
        self.n += 1;
        let nf = self.n as f64;
        for (k, x) in v.iter().enumerate() {
            let d = x - self.mean[k];
            self.mean[k] += d / nf;
            self.m2[k] += d * (x - self.mean[k]);
        }
    }

    fn merge(&mut self, o: &Moments) {
        if o.n == 0 {
            return;
        }
        let (na, nb) = (self.n as f64, o.n as f64);
        let n = na + nb;
        for k in 0..self.mean.len() {
            let d = o.mean[k] - self.mean[k];
            self.mean[k] += d * nb / n;
            self.m2[k] += o.m2[k] + d * d * na * nb / n;
        }
        self.n += o.n;
    }
}

/// Draws `n` outputs `h(f^w(x))` and reduces them chunk by chunk. Chunk `c`
/// uses stream `c` of a ChaCha8 generator keyed by `seed`, so the result does
/// not depend on the thread count.
pub fn mc_expectation_with(model: &BnnModel, x: &[f64], h: Readout, n: usize, seed: u64, sampler: Sampler) -> Result<McEstimate> {
    if x.len() != model.input_dim() {
        return Err(BnnError::Dimension(format!("input has dim {} but model expects {}", x.len(), model.input_dim())));
    }
    if n == 0 {
        return Err(BnnError::Domain("sample count must be positive".into()));
    }
    let dim = model.output_dim();
    let chunks = n.div_ceil(CHUNK);
    let plan = (sampler == Sampler::LocalReparam).then(|| LocalPlan::new(model, x));
    let parts = parallel::map_range(chunks, |c| {
        let mut rng = chunk_rng(seed, c);
        let count = CHUNK.min(n - c * CHUNK);
        let mut acc = Moments::new(dim);
        let (mut z, mut out) = (Vec::new(), Vec::new());
        for _ in 0..count {
            match &plan {
                None => z = forward_sampled(model, x, &mut rng),
                Some(p) => p.sample(&mut rng, &mut z, &mut out),
            }
            if h == Readout::Softmax {
                softmax_in_place(&mut z);
            }
            acc.push(&z);
        }
        acc
    });
    let mut total = Moments::new(dim);
    for p in &parts {
        total.merge(p);
    }
    let nf = total.n as f64;
    let std_err = total
        .m2
        .iter()
        .map(|m2| if total.n > 1 { (m2 / (nf - 1.0) / nf).max(0.0).sqrt() } else { 0.0 })
        .collect();
    Ok(McEstimate { mean: total.mean, std_err, samples: n, seed })
}

pub fn mc_expectation(model: &BnnModel, x: &[f64], h: Readout, n: usize, seed: u64) -> Result<McEstimate> {
    mc_expectation_with(model, x, h, n, seed, Sampler::LocalReparam)
}

/// Mean and standard error of `softmaxʲ − softmaxⁱ` from paired draws.
pub fn mc_pair_difference(model: &BnnModel, x: &[f64], i: usize, j: usize, n: usize, seed: u64) -> Result<(f64, f64)> {
    if x.len() != model.input_dim() {
        return Err(BnnError::Dimension(format!("input has dim {} but model expects {}", x.len(), model.input_dim())));
    }
    let plan = LocalPlan::new(model, x);
    let chunks = n.div_ceil(CHUNK);
    let parts = parallel::map_range(chunks, |c| {
        let mut rng = chunk_rng(seed, c);
        let count = CHUNK.min(n - c * CHUNK);
        let mut acc = Moments::new(1);
        let (mut z, mut out) = (Vec::new(), Vec::new());
        for _ in 0..count {
            plan.sample(&mut rng, &mut z, &mut out);
            softmax_in_place(&mut z);
            let p = &z;
            acc.push(&[p[j] - p[i]]);
        }
        acc
    });
    let mut total = Moments::new(1);
    for p in &parts {
        total.merge(p);
    }
    let nf = total.n as f64;
    Ok((total.mean[0], (total.m2[0] / (nf - 1.0) / nf).max(0.0).sqrt()))
}

/// Integrand weight for [`quad_kernel`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrand {
    One,
    Z,
    Relu,
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728_0,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = WGK[7] * fc;
    let mut g = WG[3] * fc;
    for j in 0..7 {
        let x = h * XGK[j];
        let s = f(c - x) + f(c + x);
        k += WGK[j] * s;
        if j % 2 == 1 {
            g += WG[j / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

/// Adaptive Gauss–Kronrod (7/15) integration on a finite interval.
pub fn integrate<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, abs_tol: f64) -> f64 {
    fn rec<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
        let (v, e) = gk15(f, a, b);
        if e <= tol || depth == 0 || (b - a).abs() < 1e-14 {
            return v;
        }
        let m = 0.5 * (a + b);
        rec(f, a, m, 0.5 * tol, depth - 1) + rec(f, m, b, 0.5 * tol, depth - 1)
    }
    if !(a < b) {
        return 0.0;
    }
    rec(f, a, b, abs_tol, 40)
}

const STD_CUT: f64 = 40.0;

/// `∫_a^b w(z) N(z; μ, σ²) dz` by quadrature in standardized coordinates.
pub fn quad_kernel(w: Integrand, mu: f64, sigma: f64, a: f64, b: f64) -> f64 {
    let weight = |z: f64| match w {
        Integrand::One => 1.0,
        Integrand::Z => z,
        Integrand::Relu => z.max(0.0),
    };
    if !(a < b) {
        return 0.0;
    }
    if sigma == 0.0 {
        return if a < mu && mu < b {
            weight(mu)
        } else if mu == a || mu == b {
            0.5 * weight(mu)
        } else {
            0.0
        };
    }
    let ta = ((a - mu) / sigma).max(-STD_CUT);
    let tb = ((b - mu) / sigma).min(STD_CUT);
    if !(ta < tb) {
        return 0.0;
    }
    let inv = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let f = |t: f64| weight(mu + sigma * t) * (-0.5 * t * t).exp() * inv;
    let mut cuts = vec![ta, tb, 0.0, -mu / sigma, -8.0, 8.0];
    cuts.retain(|c| *c >= ta && *c <= tb);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    cuts.windows(2).map(|w| integrate(&f, w[0], w[1], 1e-15)).sum()
}

/// Random model family for the audit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditFamily {
    pub hidden_min: usize,
    pub hidden_max: usize,
    pub width_min: usize,
    pub width_max: usize,
    /// Width cap for full-covariance trials.
    pub full_width_max: usize,
    pub input_dim_max: usize,
    pub radius_max: f64,
    pub mc_samples: usize,
    pub points_per_trial: usize,
    /// Every `classification_every`-th trial is a classifier (0 disables).
    pub classification_every: usize,
    pub var_scale: f64,
}

impl Default for AuditFamily {
    fn default() -> Self {
        Self {
            hidden_min: 1,
            hidden_max: 3,
            width_min: 16,
            width_max: 64,
            full_width_max: 32,
            input_dim_max: 4,
            radius_max: 0.1,
            mc_samples: 100_000,
            points_per_trial: 2,
            classification_every: 4,
            var_scale: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCheck {
    pub x: Vec<f64>,
    pub mc_mean: Vec<f64>,
    pub mc_std_err: Vec<f64>,
    pub violation: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub model_seed: u64,
    pub task: Task,
    pub widths: Vec<usize>,
    pub covariance: CovKind,
    pub center: Vec<f64>,
    pub radius: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub mean_gap: f64,
    pub points: Vec<PointCheck>,
    pub violations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialTiming {
    pub bound_ms: f64,
    pub mc_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub schema: String,
    pub seed: u64,
    pub margin_sigmas: f64,
    pub family: AuditFamily,
    pub trials: Vec<TrialRecord>,
    pub violations: usize,
    pub mean_gap: f64,
    pub timing: Vec<TrialTiming>,
}

impl AuditReport {
    /// JSON without the timing block; identical for identical inputs.
    pub fn canonical_json(&self) -> String {
        let mut c = self.clone();
        c.timing.clear();
        serde_json::to_string(&c).expect("report serializes")
    }
}

pub const AUDIT_MARGIN: f64 = 4.0;

/// Draws `trials` random models and boxes, bounds the expectation over each
/// box and checks MC estimates at sampled points against the bounds.
pub fn soundness_audit(family: &AuditFamily, trials: usize, seed: u64) -> Result<AuditReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(trials);
    let mut timing = Vec::with_capacity(trials);
    for t in 0..trials {
        let hidden = rng.random_range(family.hidden_min..=family.hidden_max);
        let full = t % 2 == 1;
        let wmax = if full { family.full_width_max.min(family.width_max) } else { family.width_max };
        let classify = family.classification_every > 0 && t % family.classification_every == family.classification_every - 1;
        let n_in = rng.random_range(1..=family.input_dim_max);
        let n_out = if classify { rng.random_range(2..=4) } else { rng.random_range(1..=2) };
        let mut widths = vec![n_in];
        for _ in 0..hidden {
            widths.push(rng.random_range(family.width_min..=wmax));
        }
        widths.push(n_out);
        let task = if classify { Task::Classification } else { Task::Regression };
        let mut spec = GenSpec::new(widths.clone(), task);
        spec.covariance = if full { CovKind::Full } else { CovKind::Diagonal };
        spec.var_scale = Some(family.var_scale);
        let model_seed: u64 = rng.random();
        let model = gen_model(&spec, model_seed)?;
        let center: Vec<f64> = (0..n_in).map(|_| rng.random_range(-1.0..1.0)).collect();
        let radius = rng.random_range(0.0..family.radius_max);
        let tbox = BoxDomain::ball(&center, radius)?;
        let t0 = Instant::now();
        let opts = CertifyOptions::for_model(&model);
        let bounds = bound_expectation(&model, &tbox, &opts)?;
        let bound_ms = t0.elapsed().as_secs_f64() * 1e3;
        let t1 = Instant::now();
        let mut points = Vec::with_capacity(family.points_per_trial);
        for p in 0..family.points_per_trial {
            let x: Vec<f64> = if p == 0 {
                center.clone()
            } else {
                (0..n_in)
                    .map(|d| {
                        let u: f64 = rng.random();
                        tbox.lo[d] + u * (tbox.hi[d] - tbox.lo[d])
                    })
                    .collect()
            };
            let est = mc_expectation(&model, &x, Readout::for_task(task), family.mc_samples, rng.random())?;
            let violation = (0..n_out).any(|o| {
                let m = AUDIT_MARGIN * est.std_err[o];
                est.mean[o] < bounds.lower[o] - m || est.mean[o] > bounds.upper[o] + m
            });
            points.push(PointCheck { x, mc_mean: est.mean, mc_std_err: est.std_err, violation });
        }
        let mc_ms = t1.elapsed().as_secs_f64() * 1e3;
        let violations = points.iter().filter(|p| p.violation).count();
        let mean_gap = (0..n_out).map(|o| bounds.upper[o] - bounds.lower[o]).sum::<f64>() / n_out as f64;
        records.push(TrialRecord {
            index: t,
            model_seed,
            task,
            widths,
            covariance: spec.covariance,
            center,
            radius,
            lower: bounds.lower.iter().copied().collect(),
            upper: bounds.upper.iter().copied().collect(),
            mean_gap,
            points,
            violations,
        });
        timing.push(TrialTiming { bound_ms, mc_ms });
    }
    let violations = records.iter().map(|r| r.violations).sum();
    let mean_gap = if records.is_empty() { 0.0 } else { records.iter().map(|r| r.mean_gap).sum::<f64>() / records.len() as f64 };
    Ok(AuditReport {
        schema: "bnn-dp-audit/v1".into(),
        seed,
        margin_sigmas: AUDIT_MARGIN,
        family: family.clone(),
        trials: records,
        violations,
        mean_gap,
        timing,
    })
}
