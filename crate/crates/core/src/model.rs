//! Fully connected BNN with a Gaussian posterior per output node.
//!
//! Layer `k` maps `z_k ↦ ζ_{k+1} = W_k (z_k, 1)` where row `i` of `W_k` is drawn
//! from `N(μ_{k,i}, Σ_{k,i})`. The layer's activation tag is applied to its own
//! output, so the last layer is always tagged `identity`.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{BnnError, Result};

pub const MODEL_FORMAT: &str = "bnn-dp-model/v1";
pub const PSD_TOL: f64 = -1e-10;
const SYM_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

impl Task {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "regression" => Some(Task::Regression),
            "classification" => Some(Task::Classification),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Regression => "regression",
            Task::Classification => "classification",
        }
    }
}

/// Covariance of one node's augmented weight row `(w, b)`.
#[derive(Clone, Debug, PartialEq)]
pub enum NodeCov {
    Diagonal(DVector<f64>),
    Full(FullCov),
}

/// Full covariance with its eigendecomposition cached at construction.
/// Eigenvalues inside the PSD tolerance are clamped to zero in the cache only.
#[derive(Clone, Debug, PartialEq)]
pub struct FullCov {
    pub matrix: DMatrix<f64>,
    pub eigvals: DVector<f64>,
    pub eigvecs: DMatrix<f64>,
    /// `U Λ^{1/2}`, a square root used for sampling.
    pub factor: DMatrix<f64>,
}

impl NodeCov {
    pub fn dim(&self) -> usize {
        match self {
            NodeCov::Diagonal(d) => d.len(),
            NodeCov::Full(f) => f.matrix.nrows(),
        }
    }

    /// `x̃ᵀ Σ x̃` for augmented `x̃ = (z, 1)`.
    pub fn quad_form(&self, z: &[f64]) -> f64 {
        let n = z.len();
        let at = |j: usize| if j < n { z[j] } else { 1.0 };
        let v = match self {
            NodeCov::Diagonal(d) => (0..d.len()).map(|j| d[j] * at(j) * at(j)).sum(),
            NodeCov::Full(f) => {
                let m = &f.matrix;
                let mut acc = 0.0;
                for r in 0..m.nrows() {
                    let mut row = 0.0;
                    for c in 0..m.ncols() {
                        row += m[(r, c)] * at(c);
                    }
                    acc += at(r) * row;
                }
                acc
            }
        };
        v.max(0.0)
    }

    pub fn variance_diag(&self) -> DVector<f64> {
        match self {
            NodeCov::Diagonal(d) => d.clone(),
            NodeCov::Full(f) => f.matrix.diagonal(),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            NodeCov::Diagonal(d) => d.iter().all(|v| *v == 0.0),
            NodeCov::Full(f) => f.matrix.iter().all(|v| *v == 0.0),
        }
    }
}

impl FullCov {
    fn new(matrix: DMatrix<f64>, layer: usize, node: usize) -> Result<Self> {
        let n = matrix.nrows();
        if matrix.ncols() != n {
            return Err(BnnError::Dimension(format!("layer {layer} node {node}: covariance is not square")));
        }
        let scale = matrix.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for r in 0..n {
            for c in 0..r {
                if (matrix[(r, c)] - matrix[(c, r)]).abs() > SYM_TOL * (1.0 + scale) {
                    return Err(BnnError::Domain(format!(
                        "layer {layer} node {node}: covariance not symmetric at ({r},{c})"
                    )));
                }
            }
        }
        let sym = (&matrix + matrix.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let min_eig = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        if min_eig < PSD_TOL {
            return Err(BnnError::NotPsd { layer, node, min_eig });
        }
        let eigvals = eig.eigenvalues.map(|v| v.max(0.0));
        let eigvecs = eig.eigenvectors;
        let mut factor = eigvecs.clone();
        for c in 0..n {
            let s = eigvals[c].sqrt();
            factor.column_mut(c).scale_mut(s);
        }
        Ok(Self { matrix, eigvals, eigvecs, factor })
    }
}

/// One stochastic affine layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerPosterior {
    /// `out_dim × (in_dim + 1)`; the last column holds bias means.
    pub mean: DMatrix<f64>,
    pub cov: Vec<NodeCov>,
    pub activation: Activation,
}

impl LayerPosterior {
    pub fn in_dim(&self) -> usize {
        self.mean.ncols() - 1
    }

    pub fn out_dim(&self) -> usize {
        self.mean.nrows()
    }

    pub fn is_diagonal(&self) -> bool {
        self.cov.iter().all(|c| matches!(c, NodeCov::Diagonal(_)))
    }

    /// Builds a layer with diagonal covariances, validating shapes.
    pub fn diagonal(mean: DMatrix<f64>, var: DMatrix<f64>, activation: Activation, layer: usize) -> Result<Self> {
        if mean.shape() != var.shape() {
            return Err(BnnError::Dimension(format!("layer {layer}: mean and variance shapes differ")));
        }
        let cov = (0..var.nrows()).map(|i| NodeCov::Diagonal(var.row(i).transpose())).collect();
        let l = Self { mean, cov, activation };
        l.validate(layer)?;
        Ok(l)
    }

    /// Builds a layer with full per-node covariances.
    pub fn full(mean: DMatrix<f64>, covs: Vec<DMatrix<f64>>, activation: Activation, layer: usize) -> Result<Self> {
        let cov = covs
            .into_iter()
            .enumerate()
            .map(|(i, m)| FullCov::new(m, layer, i).map(NodeCov::Full))
            .collect::<Result<Vec<_>>>()?;
        let l = Self { mean, cov, activation };
        l.validate(layer)?;
        Ok(l)
    }

    fn validate(&self, layer: usize) -> Result<()> {
        if self.mean.ncols() == 0 || self.mean.nrows() == 0 {
            return Err(BnnError::Dimension(format!("layer {layer}: empty mean matrix")));
        }
        if self.cov.len() != self.mean.nrows() {
            return Err(BnnError::Dimension(format!(
                "layer {layer}: {} mean rows but {} covariance blocks",
                self.mean.nrows(),
                self.cov.len()
            )));
        }
        for (i, c) in self.cov.iter().enumerate() {
            if c.dim() != self.mean.ncols() {
                return Err(BnnError::Dimension(format!(
                    "layer {layer} node {i}: covariance dim {} but row length {}",
                    c.dim(),
                    self.mean.ncols()
                )));
            }
            if let NodeCov::Diagonal(d) = c {
                if let Some(j) = d.iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
                    return Err(BnnError::Domain(format!(
                        "layer {layer} node {i}: variance entry {j} is {}",
                        d[j]
                    )));
                }
            }
        }
        if let Some(v) = self.mean.iter().find(|v| !v.is_finite()) {
            return Err(BnnError::Domain(format!("layer {layer}: non-finite mean {v}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnnModel {
    pub task: Task,
    pub layers: Vec<LayerPosterior>,
}

impl BnnModel {
    pub fn new(task: Task, layers: Vec<LayerPosterior>) -> Result<Self> {
        if layers.is_empty() {
            return Err(BnnError::Dimension("model has no layers".into()));
        }
        for (k, l) in layers.iter().enumerate() {
            l.validate(k)?;
        }
        for k in 1..layers.len() {
            if layers[k].in_dim() != layers[k - 1].out_dim() {
                return Err(BnnError::Dimension(format!(
                    "layer {k} expects input dim {} but layer {} outputs {}",
                    layers[k].in_dim(),
                    k - 1,
                    layers[k - 1].out_dim()
                )));
            }
        }
        if layers.last().unwrap().activation != Activation::Identity {
            return Err(BnnError::Domain("last layer activation must be identity".into()));
        }
        Ok(Self { task, layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    /// Number of hidden layers `K`.
    pub fn hidden_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(|l| l.out_dim()));
        w
    }

    pub fn is_deterministic(&self) -> bool {
        self.layers.iter().all(|l| l.cov.iter().all(|c| c.is_zero()))
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(s).map_err(|e| BnnError::Parse(e.to_string()))?;
        file.into_model()
    }

    pub fn to_json_string(&self) -> String {
        let file = ModelFile::from_model(self);
        let mut s = serde_json::to_string(&file).expect("model serializes");
        s.push('\n');
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Self::from_json_str(&s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }
}

pub fn load_model(path: impl AsRef<Path>) -> Result<BnnModel> {
    BnnModel::load(path)
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    task: String,
    layers: Vec<LayerFile>,
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    activation: String,
    mean: Vec<Vec<f64>>,
    covariance: CovFile,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", content = "values", rename_all = "lowercase")]
enum CovFile {
    Diagonal(Vec<Vec<f64>>),
    Full(Vec<Vec<Vec<f64>>>),
}

fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, |v| v.len());
    if r == 0 || c == 0 {
        return Err(BnnError::Dimension(format!("{what}: empty matrix")));
    }
    if let Some(i) = rows.iter().position(|row| row.len() != c) {
        return Err(BnnError::Dimension(format!("{what}: row {i} has length {} (expected {c})", rows[i].len())));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl ModelFile {
    fn into_model(self) -> Result<BnnModel> {
        if self.format != MODEL_FORMAT {
            return Err(BnnError::Parse(format!("unsupported format {:?}", self.format)));
        }
        let task = Task::parse(&self.task).ok_or_else(|| BnnError::Parse(format!("unknown task {:?}", self.task)))?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (k, lf) in self.layers.into_iter().enumerate() {
            let activation = Activation::parse(&lf.activation)
                .ok_or_else(|| BnnError::Parse(format!("layer {k}: unknown activation {:?}", lf.activation)))?;
            let mean = rows_to_matrix(&lf.mean, &format!("layer {k} mean"))?;
            let layer = match lf.covariance {
                CovFile::Diagonal(v) => {
                    if v.len() != mean.nrows() {
                        return Err(BnnError::Dimension(format!(
                            "layer {k}: {} mean rows but {} covariance blocks",
                            mean.nrows(),
                            v.len()
                        )));
                    }
                    let cov = v
                        .into_iter()
                        .map(|row| NodeCov::Diagonal(DVector::from_vec(row)))
                        .collect();
                    let l = LayerPosterior { mean, cov, activation };
                    l.validate(k)?;
                    l
                }
                CovFile::Full(blocks) => {
                    if blocks.len() != mean.nrows() {
                        return Err(BnnError::Dimension(format!(
                            "layer {k}: {} mean rows but {} covariance blocks",
                            mean.nrows(),
                            blocks.len()
                        )));
                    }
                    let mut covs = Vec::with_capacity(blocks.len());
                    for (i, b) in blocks.iter().enumerate() {
                        covs.push(rows_to_matrix(b, &format!("layer {k} node {i} covariance"))?);
                    }
                    LayerPosterior::full(mean, covs, activation, k)?
                }
            };
            layers.push(layer);
        }
        BnnModel::new(task, layers)
    }

    fn from_model(m: &BnnModel) -> Self {
        let layers = m
            .layers
            .iter()
            .map(|l| {
                let covariance = if l.is_diagonal() {
                    CovFile::Diagonal(
                        l.cov
                            .iter()
                            .map(|c| match c {
                                NodeCov::Diagonal(d) => d.iter().copied().collect(),
                                NodeCov::Full(_) => unreachable!(),
                            })
                            .collect(),
                    )
                } else {
                    CovFile::Full(
                        l.cov
                            .iter()
                            .map(|c| match c {
                                NodeCov::Full(f) => matrix_to_rows(&f.matrix),
                                NodeCov::Diagonal(d) => matrix_to_rows(&DMatrix::from_diagonal(d)),
                            })
                            .collect(),
                    )
                };
                LayerFile { activation: l.activation.name().to_string(), mean: matrix_to_rows(&l.mean), covariance }
            })
            .collect();
        ModelFile { format: MODEL_FORMAT.to_string(), task: m.task.name().to_string(), layers }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovKind {
    Diagonal,
    Full,
}

/// Random model family description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    /// `[n_0, n_1, …, n_{K+1}]`.
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub task: Task,
    pub scale: f64,
    /// Posterior standard-deviation scale; defaults to `scale`.
    pub var_scale: Option<f64>,
    pub covariance: CovKind,
}

impl GenSpec {
    pub fn new(widths: Vec<usize>, task: Task) -> Self {
        Self { widths, activation: Activation::Relu, task, scale: 1.0, var_scale: None, covariance: CovKind::Diagonal }
    }
}

/// Reproducible random model: means `~ N(0, scale²/fan_in)`, variances
/// `~ U(0, var_scale²/fan_in)`. Full covariances rescale a random correlation
/// matrix to those variances.
pub fn gen_model(spec: &GenSpec, seed: u64) -> Result<BnnModel> {
    if spec.widths.len() < 2 || spec.widths.iter().any(|w| *w == 0) {
        return Err(BnnError::Domain(format!("invalid widths {:?}", spec.widths)));
    }
    if !(spec.scale > 0.0) || !spec.scale.is_finite() {
        return Err(BnnError::Domain(format!("scale must be positive, got {}", spec.scale)));
    }
    let vs = spec.var_scale.unwrap_or(spec.scale);
    if !(vs >= 0.0) || !vs.is_finite() {
        return Err(BnnError::Domain(format!("var_scale must be nonnegative, got {vs}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nl = spec.widths.len() - 1;
    let mut layers = Vec::with_capacity(nl);
    for k in 0..nl {
        let (nin, nout) = (spec.widths[k], spec.widths[k + 1]);
        let fan_in = nin as f64;
        let sd = spec.scale / fan_in.sqrt();
        let vmax = vs * vs / fan_in;
        let mean = DMatrix::from_fn(nout, nin + 1, |_, _| sd * rng.sample::<f64, _>(StandardNormal));
        let unif = Uniform::new_inclusive(0.0, vmax).expect("valid range");
        let activation = if k + 1 == nl { Activation::Identity } else { spec.activation };
        let layer = match spec.covariance {
            CovKind::Diagonal => {
                let var = DMatrix::from_fn(nout, nin + 1, |_, _| unif.sample(&mut rng));
                LayerPosterior::diagonal(mean, var, activation, k)?
            }
            CovKind::Full => {
                let d = nin + 1;
                let mut covs = Vec::with_capacity(nout);
                for _ in 0..nout {
                    let var: Vec<f64> = (0..d).map(|_| unif.sample(&mut rng)).collect();
                    let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
                    let q = &a * a.transpose() + DMatrix::identity(d, d) * (d as f64);
                    let cov = DMatrix::from_fn(d, d, |r, c| {
                        let corr = q[(r, c)] / (q[(r, r)] * q[(c, c)]).sqrt();
                        let v = corr * (var[r] * var[c]).sqrt();
                        if r == c {
                            var[r]
                        } else {
                            v
                        }
                    });
                    let cov = DMatrix::from_fn(d, d, |r, c| if r <= c { cov[(r, c)] } else { cov[(c, r)] });
                    covs.push(cov);
                }
                LayerPosterior::full(mean, covs, activation, k)?
            }
        };
        layers.push(layer);
    }
    BnnModel::new(spec.task, layers)
}

/// One deterministic draw of all weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub weights: Vec<DMatrix<f64>>,
    pub activations: Vec<Activation>,
}

pub fn sample_weights_with<R: Rng + ?Sized>(model: &BnnModel, rng: &mut R) -> Network {
    let mut weights = Vec::with_capacity(model.layers.len());
    for l in &model.layers {
        let d = l.mean.ncols();
        let mut w = l.mean.clone();
        for (i, c) in l.cov.iter().enumerate() {
            match c {
                NodeCov::Diagonal(v) => {
                    for j in 0..d {
                        let xi: f64 = rng.sample(StandardNormal);
                        if v[j] > 0.0 {
                            w[(i, j)] += v[j].sqrt() * xi;
                        }
                    }
                }
                NodeCov::Full(f) => {
                    let xi = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                    let dw = &f.factor * xi;
                    for j in 0..d {
                        w[(i, j)] += dw[j];
                    }
                }
            }
        }
        weights.push(w);
    }
    Network { weights, activations: model.layers.iter().map(|l| l.activation).collect() }
}

pub fn sample_weights(model: &BnnModel, seed: u64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_weights_with(model, &mut rng)
}

pub fn mean_network(model: &BnnModel) -> Network {
    Network {
        weights: model.layers.iter().map(|l| l.mean.clone()).collect(),
        activations: model.layers.iter().map(|l| l.activation).collect(),
    }
}

pub fn forward(net: &Network, x: &[f64]) -> DVector<f64> {
    let mut z = DVector::from_column_slice(x);
    for (w, act) in net.weights.iter().zip(&net.activations) {
        let n = w.ncols() - 1;
        let mut out = w.column(n).into_owned();
        out.gemv(1.0, &w.columns(0, n), &z, 1.0);
        z = out.map(|v| act.apply(v));
    }
    z
}
