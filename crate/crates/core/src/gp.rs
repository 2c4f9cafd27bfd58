//! Gaussian-process regression with a squared-exponential ARD kernel.
//!
//! One independent GP is trained per strategy output `(s, h, ax, ay)`; all
//! share the same inputs `z = [x, vx, y, vy, θ_0 .. θ_N]`. Hyperparameters are
//! fitted by maximizing the log marginal likelihood in log space.

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::State;
use crate::environment::{EnvError, TubeEnvironment};
use crate::execution::Execution;

/// Names of the strategy outputs, in column order.
pub const OUTPUT_NAMES: [&str; 4] = ["s", "h", "ax", "ay"];
pub const N_OUTPUTS: usize = 4;

const JITTER_START: f64 = 1e-12;
const JITTER_MAX: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("kernel matrix is not positive definite even with jitter {0:e}")]
    Conditioning(f64),
    #[error("dataset needs at least {needed} rows, has {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("invalid hyperparameters: {0}")]
    Params(String),
    #[error("stored model is inconsistent: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Coordinates of the state part of a query vector.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryFrame {
    /// `[x, vx, y, vy]`.
    #[default]
    World,
    /// `[s, v·t, h, v·n]` with `t`, `n` the unit tangent and normal of the
    /// segment the position projects onto. Tube-relative, so it transfers
    /// between tubes that are placed differently in the plane.
    Frenet,
}

/// Query vector: the full state followed by `N + 1` forecast slopes.
pub fn query_vector(env: &TubeEnvironment, state: &State, n: usize, ds: f64) -> Result<Vec<f64>, EnvError> {
    query_vector_in(QueryFrame::World, env, state, n, ds)
}

pub fn query_vector_in(
    frame: QueryFrame,
    env: &TubeEnvironment,
    state: &State,
    n: usize,
    ds: f64,
) -> Result<Vec<f64>, EnvError> {
    let fc = env.forecast(state, n, ds)?;
    let mut z = Vec::with_capacity(4 + fc.theta.len());
    match frame {
        QueryFrame::World => z.extend_from_slice(&[state.x, state.vx, state.y, state.vy]),
        QueryFrame::Frenet => {
            let p = env.project_detailed(state.position())?;
            let (t, nv) = (env.tangent(p.segment), env.normal(p.segment));
            z.extend_from_slice(&[
                p.coord.s,
                state.vx * t[0] + state.vy * t[1],
                p.coord.h,
                state.vx * nv[0] + state.vy * nv[1],
            ]);
        }
    }
    z.extend_from_slice(&fc.theta);
    Ok(z)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StrategyDataset {
    pub frame: QueryFrame,
    pub z: Vec<Vec<f64>>,
    pub y: Vec<[f64; N_OUTPUTS]>,
}

impl StrategyDataset {
    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.z.first().map_or(0, Vec::len)
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        self.y.iter().map(|r| r[col]).collect()
    }

    /// Rows at evenly spaced indices, at most `max_rows` of them.
    pub fn subsample(&self, max_rows: usize) -> StrategyDataset {
        let idx = strided_indices(self.len(), max_rows);
        StrategyDataset {
            frame: self.frame,
            z: idx.iter().map(|&i| self.z[i].clone()).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }
}

fn strided_indices(n: usize, max_rows: usize) -> Vec<usize> {
    if n <= max_rows || max_rows == 0 {
        return (0..n).collect();
    }
    (0..max_rows).map(|k| (k * n) / max_rows).collect()
}

/// Training rows from stored executions. Row `j` pairs the query at step `j`
/// with the strategy state `(s, h)` and input at step `j + T`; the input at
/// `j + T = D` does not exist, so the last applied input is held.
pub fn build_dataset(
    executions: &[Execution],
    envs: &[TubeEnvironment],
    n: usize,
    t: usize,
    ds: f64,
) -> Result<StrategyDataset, GpError> {
    build_dataset_in(QueryFrame::World, executions, envs, n, t, ds)
}

pub fn build_dataset_in(
    frame: QueryFrame,
    executions: &[Execution],
    envs: &[TubeEnvironment],
    n: usize,
    t: usize,
    ds: f64,
) -> Result<StrategyDataset, GpError> {
    if executions.len() != envs.len() {
        return Err(GpError::Dimension { expected: executions.len(), got: envs.len() });
    }
    let mut out = StrategyDataset { frame, ..Default::default() };
    for (i, (ex, env)) in executions.iter().zip(envs).enumerate() {
        let d = ex.duration();
        if d < t || d == 0 {
            warn!("execution {i} has {d} steps, shorter than the strategy horizon {t}; skipped");
            continue;
        }
        for j in 0..=d - t {
            let z = query_vector_in(frame, env, &ex.states[j], n, ds)?;
            let f = env.project(ex.states[j + t].position())?;
            let u = ex.inputs[(j + t).min(d - 1)];
            out.z.push(z);
            out.y.push([f.s, f.h, u.ax, u.ay]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub sigma_f: f64,
    pub lengthscales: Vec<f64>,
    pub sigma_n: f64,
}

impl KernelParams {
    pub fn new(sigma_f: f64, lengthscales: Vec<f64>, sigma_n: f64) -> Result<Self, GpError> {
        let p = KernelParams { sigma_f, lengthscales, sigma_n };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), GpError> {
        if !(self.sigma_f > 0.0 && self.sigma_f.is_finite()) {
            return Err(GpError::Params(format!("sigma_f must be positive, got {}", self.sigma_f)));
        }
        if self.lengthscales.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(GpError::Params("lengthscales must be positive".into()));
        }
        if !(self.sigma_n >= 0.0 && self.sigma_n.is_finite()) {
            return Err(GpError::Params(format!("sigma_n must be non-negative, got {}", self.sigma_n)));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    #[cfg(test)]
    fn to_log(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim() + 2);
        v.push(self.sigma_f.ln());
        v.extend(self.lengthscales.iter().map(|l| l.ln()));
        v.push(self.sigma_n.ln());
        v
    }

    fn from_log(v: &[f64]) -> KernelParams {
        let d = v.len() - 2;
        KernelParams {
            sigma_f: v[0].exp(),
            lengthscales: v[1..=d].iter().map(|x| x.exp()).collect(),
            sigma_n: v[d + 1].exp(),
        }
    }
}

/// `σ_f² exp(-½ Σ_m ((z1_m - z2_m) / ℓ_m)²)`
pub fn kernel_eval(p: &KernelParams, z1: &[f64], z2: &[f64]) -> Result<f64, GpError> {
    if z1.len() != p.dim() || z2.len() != p.dim() {
        return Err(GpError::Dimension { expected: p.dim(), got: z1.len().max(z2.len()) });
    }
    Ok(kernel_unchecked(p, z1, z2))
}

#[inline]
fn kernel_unchecked(p: &KernelParams, z1: &[f64], z2: &[f64]) -> f64 {
    let mut r2 = 0.0;
    for m in 0..z1.len() {
        let d = (z1[m] - z2[m]) / p.lengthscales[m];
        r2 += d * d;
    }
    p.sigma_f * p.sigma_f * (-0.5 * r2).exp()
}

/// Cholesky of `K + (σ_n² + jitter) I`, escalating the jitter tenfold from
/// 1e-8 up to 1e-4 until the factorization succeeds.
fn factor(k: DMatrix<f64>, sigma_n: f64) -> Result<(Cholesky<f64, Dyn>, f64), GpError> {
    factor_from(k, sigma_n, JITTER_START)
}

fn factor_from(mut k: DMatrix<f64>, sigma_n: f64, start: f64) -> Result<(Cholesky<f64, Dyn>, f64), GpError> {
    let n = k.nrows();
    for i in 0..n {
        k[(i, i)] += sigma_n * sigma_n;
    }
    let mut jitter = start;
    loop {
        let mut kj = k.clone();
        for i in 0..n {
            kj[(i, i)] += jitter;
        }
        if let Some(ch) = Cholesky::new(kj) {
            return Ok((ch, jitter));
        }
        if jitter >= JITTER_MAX {
            return Err(GpError::Conditioning(jitter));
        }
        jitter *= 10.0;
    }
}

fn to_matrix(z: &[Vec<f64>]) -> Result<DMatrix<f64>, GpError> {
    let d = z.first().map_or(0, Vec::len);
    for row in z {
        if row.len() != d {
            return Err(GpError::Dimension { expected: d, got: row.len() });
        }
    }
    Ok(DMatrix::from_fn(z.len(), d, |i, j| z[i][j]))
}

/// Squared pairwise differences per input dimension, reused across
/// likelihood evaluations during fitting.
struct PairwiseSq {
    n: usize,
    per_dim: Vec<DMatrix<f64>>,
}

impl PairwiseSq {
    fn new(x: &DMatrix<f64>) -> Self {
        let n = x.nrows();
        let per_dim = (0..x.ncols())
            .map(|m| DMatrix::from_fn(n, n, |i, j| (x[(i, m)] - x[(j, m)]).powi(2)))
            .collect();
        PairwiseSq { n, per_dim }
    }

    /// Noise-free kernel matrix.
    fn kernel(&self, p: &KernelParams) -> DMatrix<f64> {
        let mut r2 = DMatrix::zeros(self.n, self.n);
        for (m, d) in self.per_dim.iter().enumerate() {
            let w = 1.0 / (p.lengthscales[m] * p.lengthscales[m]);
            r2.zip_apply(d, |a, b| *a += w * b);
        }
        let sf2 = p.sigma_f * p.sigma_f;
        r2.map(|v: f64| sf2 * (-0.5 * v).exp())
    }
}

/// Log marginal likelihood of output column `col` and its gradient with
/// respect to `[log σ_f, log ℓ_1 .. log ℓ_d, log σ_n]`. Inputs are used as given.
pub fn log_marginal_likelihood(p: &KernelParams, d: &StrategyDataset, col: usize) -> Result<(f64, Vec<f64>), GpError> {
    if d.is_empty() {
        return Err(GpError::TooFewRows { needed: 1, got: 0 });
    }
    if col >= N_OUTPUTS {
        return Err(GpError::Dimension { expected: N_OUTPUTS, got: col });
    }
    let x = to_matrix(&d.z)?;
    let y = DVector::from_vec(d.column(col));
    lml_matrix(p, &x, &y)
}

fn lml_matrix(p: &KernelParams, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<(f64, Vec<f64>), GpError> {
    if x.ncols() != p.dim() {
        return Err(GpError::Dimension { expected: p.dim(), got: x.ncols() });
    }
    p.validate()?;
    lml_pairwise(p, &PairwiseSq::new(x), y)
}

fn lml_pairwise(p: &KernelParams, pw: &PairwiseSq, y: &DVector<f64>) -> Result<(f64, Vec<f64>), GpError> {
    let n = pw.n;
    let kf = pw.kernel(p);
    let (ch, _) = factor(kf.clone(), p.sigma_n)?;
    let alpha = ch.solve(y);
    let log_det: f64 = ch.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
    let value = -0.5 * y.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

    // ∂L/∂θ = ½ tr(W ∂K/∂θ) with W = ααᵀ - K⁻¹
    let mut w = ch.inverse();
    w.neg_mut();
    w.ger(1.0, &alpha, &alpha, 1.0);
    let wk = w.component_mul(&kf);
    let mut grad = Vec::with_capacity(p.dim() + 2);
    grad.push(wk.sum());
    for (m, d) in pw.per_dim.iter().enumerate() {
        let l2 = p.lengthscales[m] * p.lengthscales[m];
        grad.push(0.5 * wk.dot(d) / l2);
    }
    grad.push(p.sigma_n * p.sigma_n * w.trace());
    Ok((value, grad))
}

/// Affine map applied to every input dimension before kernel evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Standardizer { mean: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    /// Zero mean and unit variance per column; constant columns keep scale 1.
    pub fn fit(z: &[Vec<f64>]) -> Self {
        let n = z.len().max(1) as f64;
        let d = z.first().map_or(0, Vec::len);
        let mut mean = vec![0.0; d];
        let mut scale = vec![1.0; d];
        for m in 0..d {
            mean[m] = z.iter().map(|r| r[m]).sum::<f64>() / n;
            let var = z.iter().map(|r| (r[m] - mean[m]).powi(2)).sum::<f64>() / n;
            if var.sqrt() > 1e-12 {
                scale[m] = var.sqrt();
            }
        }
        Standardizer { mean, scale }
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub restarts: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Rows used for the likelihood optimization.
    pub max_fit_rows: usize,
    /// Rows kept in the final posterior.
    pub max_train_rows: usize,
    pub standardize: bool,
    /// Lower bound on each lengthscale as a fraction of that input's range.
    pub min_lengthscale_frac: f64,
    /// Lower bound on `sigma_n` as a fraction of the output's std dev.
    pub min_noise_frac: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            restarts: 5,
            seed: 0,
            max_iter: 100,
            max_fit_rows: 250,
            max_train_rows: 600,
            standardize: true,
            min_lengthscale_frac: 1e-3,
            min_noise_frac: 1e-3,
        }
    }
}

impl FitConfig {
    /// Settings for the strategy GPs. Demonstration rows come in long, highly
    /// correlated runs from only a few tubes; without the floors the
    /// likelihood prefers lengthscales that memorize individual tube slopes.
    pub fn for_strategies() -> Self {
        FitConfig { min_lengthscale_frac: 0.3, min_noise_frac: 0.1, ..Default::default() }
    }
}

/// Trained single-output GP. Immutable after construction.
#[derive(Debug, Clone)]
pub struct GPModel {
    params: KernelParams,
    standardizer: Standardizer,
    /// Standardized training inputs, one per row.
    x: DMatrix<f64>,
    alpha: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
    trace: f64,
    residual_std: f64,
}

impl GPModel {
    /// Conditions the GP on `(z, y)` with fixed hyperparameters. `z` is in raw
    /// units; `standardizer` maps it into the kernel's coordinates.
    pub fn with_params(
        params: KernelParams,
        standardizer: Standardizer,
        z: &[Vec<f64>],
        y: &[f64],
    ) -> Result<Self, GpError> {
        params.validate()?;
        if z.is_empty() {
            return Err(GpError::TooFewRows { needed: 1, got: 0 });
        }
        if z.len() != y.len() {
            return Err(GpError::Dimension { expected: z.len(), got: y.len() });
        }
        if standardizer.mean.len() != params.dim() {
            return Err(GpError::Dimension { expected: params.dim(), got: standardizer.mean.len() });
        }
        let zs: Vec<Vec<f64>> = z.iter().map(|r| standardizer.apply(r)).collect();
        let x = to_matrix(&zs)?;
        if x.ncols() != params.dim() {
            return Err(GpError::Dimension { expected: params.dim(), got: x.ncols() });
        }
        let kf = PairwiseSq::new(&x).kernel(&params);
        let (chol, jitter) = factor(kf, params.sigma_n)?;
        let alpha = chol.solve(&DVector::from_column_slice(y));
        let trace = kernel_trace(&chol);
        let mut model = GPModel { params, standardizer, x, alpha, chol, jitter, trace, residual_std: 0.0 };
        model.residual_std = model.residual_std_on(z, y)?;
        Ok(model)
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn n_train(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    /// Standard deviation of `y - μ(z)` over the rows the residual was last computed on.
    pub fn residual_std(&self) -> f64 {
        self.residual_std
    }

    fn residual_std_on(&self, z: &[Vec<f64>], y: &[f64]) -> Result<f64, GpError> {
        let mut ss = 0.0;
        for (zi, yi) in z.iter().zip(y) {
            let (mu, _) = self.posterior(zi)?;
            ss += (yi - mu).powi(2);
        }
        Ok((ss / z.len().max(1) as f64).sqrt())
    }

    fn cross_kernel(&self, z: &[f64]) -> Result<DVector<f64>, GpError> {
        if z.len() != self.dim() {
            return Err(GpError::Dimension { expected: self.dim(), got: z.len() });
        }
        let zs = self.standardizer.apply(z);
        let n = self.x.nrows();
        let mut k = DVector::zeros(n);
        let mut row = vec![0.0; self.dim()];
        for i in 0..n {
            for (m, r) in row.iter_mut().enumerate() {
                *r = self.x[(i, m)];
            }
            k[i] = kernel_unchecked(&self.params, &row, &zs);
        }
        Ok(k)
    }

    /// Posterior mean and latent standard deviation at a raw query.
    pub fn posterior(&self, z: &[f64]) -> Result<(f64, f64), GpError> {
        let k = self.cross_kernel(z)?;
        let mu = k.dot(&self.alpha);
        let mut v = k;
        self.chol.l_dirty().solve_lower_triangular_mut(&mut v);
        let var = self.params.sigma_f * self.params.sigma_f - v.norm_squared();
        Ok((mu, var.max(0.0).sqrt()))
    }

    /// Posterior mean only (no triangular solve).
    pub fn mean(&self, z: &[f64]) -> Result<f64, GpError> {
        Ok(self.cross_kernel(z)?.dot(&self.alpha))
    }

    pub fn to_doc(&self) -> GpModelDoc {
        GpModelDoc {
            params: self.params.clone(),
            standardizer: self.standardizer.clone(),
            z_train: (0..self.x.nrows()).map(|i| self.x.row(i).iter().copied().collect()).collect(),
            alpha: self.alpha.iter().copied().collect(),
            jitter: self.jitter,
            trace_checksum: self.trace,
            residual_std: self.residual_std,
        }
    }

    /// Rebuilds the factorization from a stored document and checks it
    /// against the stored trace of the regularized kernel matrix.
    pub fn from_doc(doc: GpModelDoc) -> Result<Self, GpError> {
        doc.params.validate()?;
        if doc.z_train.len() != doc.alpha.len() || doc.z_train.is_empty() {
            return Err(GpError::Corrupt("z_train and alpha lengths differ".into()));
        }
        let x = to_matrix(&doc.z_train)?;
        if x.ncols() != doc.params.dim() || doc.standardizer.mean.len() != doc.params.dim() {
            return Err(GpError::Corrupt("dimension mismatch between inputs and parameters".into()));
        }
        let k = PairwiseSq::new(&x).kernel(&doc.params);
        let (chol, jitter) = factor_from(k, doc.params.sigma_n, doc.jitter)?;
        if jitter != doc.jitter {
            return Err(GpError::Corrupt(format!("factorization needed jitter {jitter:e}")));
        }
        let trace = kernel_trace(&chol);
        if (trace - doc.trace_checksum).abs() > 1e-6 * doc.trace_checksum.abs().max(1.0) {
            return Err(GpError::Corrupt(format!("trace {trace} does not match checksum {}", doc.trace_checksum)));
        }
        Ok(GPModel {
            params: doc.params,
            standardizer: doc.standardizer,
            x,
            alpha: DVector::from_vec(doc.alpha),
            chol,
            jitter: doc.jitter,
            trace: doc.trace_checksum,
            residual_std: doc.residual_std,
        })
    }
}

/// Trace of `L Lᵀ`, the regularized kernel matrix that was factored.
fn kernel_trace(ch: &Cholesky<f64, Dyn>) -> f64 {
    ch.l_dirty().lower_triangle().row_iter().map(|r| r.norm_squared()).sum()
}

/// Serialized form of a [`GPModel`]; inputs are stored already standardized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpModelDoc {
    pub params: KernelParams,
    pub standardizer: Standardizer,
    pub z_train: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    pub jitter: f64,
    pub trace_checksum: f64,
    pub residual_std: f64,
}

/// Fits the GP for output column `col`: hyperparameters by likelihood
/// maximization on a subsample, posterior on a (larger) subsample, and the
/// residual spread over all rows.
pub fn fit(d: &StrategyDataset, col: usize, cfg: &FitConfig) -> Result<GPModel, GpError> {
    if d.len() < 2 {
        return Err(GpError::TooFewRows { needed: 2, got: d.len() });
    }
    if col >= N_OUTPUTS {
        return Err(GpError::Dimension { expected: N_OUTPUTS, got: col });
    }
    let dim = d.dim();
    let standardizer = if cfg.standardize { Standardizer::fit(&d.z) } else { Standardizer::identity(dim) };
    let fit_rows = d.subsample(cfg.max_fit_rows);
    let xs: Vec<Vec<f64>> = fit_rows.z.iter().map(|r| standardizer.apply(r)).collect();
    let x = to_matrix(&xs)?;
    let y = DVector::from_vec(fit_rows.column(col));
    let seed = cfg.seed.wrapping_add(col as u64 * 0x9E37_79B9);
    let params = fit_hyperparameters(&x, &y, cfg, seed)?;

    let train = d.subsample(cfg.max_train_rows);
    let mut model = GPModel::with_params(params, standardizer, &train.z, &train.column(col))?;
    model.residual_std = model.residual_std_on(&d.z, &d.column(col))?;
    Ok(model)
}

/// Maximizes the log marginal likelihood over log-hyperparameters from
/// `restarts` initializations; the first is centred, the rest are drawn
/// log-uniformly in [1e-2, 1e2] times each input dimension's range.
pub fn fit_hyperparameters(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    cfg: &FitConfig,
    seed: u64,
) -> Result<KernelParams, GpError> {
    let (restarts, max_iter) = (cfg.restarts, cfg.max_iter);
    let n = x.nrows();
    let dim = x.ncols();
    if n < 2 {
        return Err(GpError::TooFewRows { needed: 2, got: n });
    }
    let y_scale = (y.norm_squared() / n as f64).sqrt().max(1e-6);
    let y_std = {
        let m = y.mean();
        (y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt()
    };
    let ranges: Vec<f64> = (0..dim)
        .map(|m| {
            let c = x.column(m);
            let r = c.max() - c.min();
            if r > 1e-9 { r } else { 1.0 }
        })
        .collect();

    let mut lo = Vec::with_capacity(dim + 2);
    let mut hi = Vec::with_capacity(dim + 2);
    lo.push((1e-3 * y_scale).ln());
    hi.push((1e3 * y_scale).ln());
    for r in &ranges {
        lo.push((cfg.min_lengthscale_frac * r).ln());
        hi.push((1e3 * r).ln());
    }
    lo.push((cfg.min_noise_frac * y_std).max(1e-6 * y_scale).ln());
    hi.push(y_scale.ln());

    let pw = PairwiseSq::new(x);
    let objective = |v: &[f64]| -> Option<(f64, Vec<f64>)> {
        let p = KernelParams::from_log(v);
        lml_pairwise(&p, &pw, y).ok().filter(|(f, _)| f.is_finite())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise0 = (0.1 * y_std).max(1e-3 * y_scale);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for r in 0..restarts.max(1) {
        let mut v0 = Vec::with_capacity(dim + 2);
        v0.push(y_scale.ln());
        for range in &ranges {
            let factor: f64 = if r == 0 { 1.0 } else { 10f64.powf(rng.gen_range(-2.0..=2.0)) };
            v0.push((factor * range).ln());
        }
        v0.push(noise0.ln());
        for (i, v) in v0.iter_mut().enumerate() {
            *v = v.clamp(lo[i], hi[i]);
        }
        let Some((x_opt, f_opt)) = maximize(&objective, v0, &lo, &hi, max_iter) else {
            continue;
        };
        if best.as_ref().is_none_or(|(bf, _)| f_opt > *bf) {
            best = Some((f_opt, x_opt));
        }
    }
    let (_, v) = best.ok_or(GpError::Conditioning(JITTER_MAX))?;
    Ok(KernelParams::from_log(&v))
}

/// Projected L-BFGS ascent with backtracking (Armijo) line search on a box.
fn maximize<F>(f: &F, x0: Vec<f64>, lo: &[f64], hi: &[f64], max_iter: usize) -> Option<(Vec<f64>, f64)>
where
    F: Fn(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    const MEMORY: usize = 8;
    let n = x0.len();
    let project = |x: &mut [f64]| {
        for i in 0..n {
            x[i] = x[i].clamp(lo[i], hi[i]);
        }
    };
    // work with the negated objective
    let eval = |x: &[f64]| f(x).map(|(v, g)| (-v, g.into_iter().map(|c| -c).collect::<Vec<_>>()));

    let mut x = x0;
    project(&mut x);
    let (mut fx, mut g) = eval(&x)?;
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut stalls = 0;

    for _ in 0..max_iter {
        // free variables: not pinned at a bound by the gradient
        let free: Vec<bool> =
            (0..n).map(|i| !((x[i] <= lo[i] && g[i] > 0.0) || (x[i] >= hi[i] && g[i] < 0.0))).collect();
        let pg_norm = (0..n).filter(|&i| free[i]).map(|i| g[i] * g[i]).sum::<f64>().sqrt();
        if pg_norm < 1e-6 {
            break;
        }

        let mut d: Vec<f64> = (0..n).map(|i| if free[i] { -g[i] } else { 0.0 }).collect();
        // two-loop recursion
        let m = s_hist.len();
        let mut alphas = vec![0.0; m];
        for k in (0..m).rev() {
            let rho = 1.0 / dotv(&y_hist[k], &s_hist[k]);
            alphas[k] = rho * dotv(&s_hist[k], &d);
            for i in 0..n {
                d[i] -= alphas[k] * y_hist[k][i];
            }
        }
        if let (Some(s), Some(yv)) = (s_hist.last(), y_hist.last()) {
            let gamma = dotv(s, yv) / dotv(yv, yv);
            d.iter_mut().for_each(|v| *v *= gamma);
        }
        for k in 0..m {
            let rho = 1.0 / dotv(&y_hist[k], &s_hist[k]);
            let beta = rho * dotv(&y_hist[k], &d);
            for i in 0..n {
                d[i] += s_hist[k][i] * (alphas[k] - beta);
            }
        }
        for i in 0..n {
            if !free[i] {
                d[i] = 0.0;
            }
        }
        if dotv(&d, &g) >= 0.0 {
            s_hist.clear();
            y_hist.clear();
            d = (0..n).map(|i| if free[i] { -g[i] } else { 0.0 }).collect();
        }

        let mut step = if s_hist.is_empty() { (1.0 / pg_norm).min(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..40 {
            let mut xn: Vec<f64> = (0..n).map(|i| x[i] + step * d[i]).collect();
            project(&mut xn);
            let dx: Vec<f64> = (0..n).map(|i| xn[i] - x[i]).collect();
            if let Some((fnew, gnew)) = eval(&xn) {
                if fnew <= fx + 1e-4 * dotv(&g, &dx) {
                    accepted = Some((xn, fnew, gnew, dx));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gnew, dx)) = accepted else {
            break;
        };
        let yv: Vec<f64> = (0..n).map(|i| gnew[i] - g[i]).collect();
        if dotv(&dx, &yv) > 1e-12 {
            if s_hist.len() == MEMORY {
                s_hist.remove(0);
                y_hist.remove(0);
            }
            s_hist.push(dx);
            y_hist.push(yv);
        }
        let improvement = fx - fnew;
        x = xn;
        fx = fnew;
        g = gnew;
        if improvement < 1e-9 * (1.0 + fx.abs()) {
            stalls += 1;
            if stalls >= 3 {
                break;
            }
        } else {
            stalls = 0;
        }
    }
    Some((x, -fx))
}

fn dotv(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The four strategy GPs sharing one query layout.
#[derive(Debug, Clone)]
pub struct StrategyModels {
    pub models: Vec<GPModel>,
    pub frame: QueryFrame,
    pub n: usize,
    pub ds: f64,
}

impl StrategyModels {
    pub fn fit(d: &StrategyDataset, n: usize, ds: f64, cfg: &FitConfig) -> Result<Self, GpError> {
        if d.dim() != 4 + n + 1 {
            return Err(GpError::Dimension { expected: 4 + n + 1, got: d.dim() });
        }
        let models = (0..N_OUTPUTS).map(|c| fit(d, c, cfg)).collect::<Result<Vec<_>, _>>()?;
        Ok(StrategyModels { models, frame: d.frame, n, ds })
    }

    pub fn query(&self, env: &TubeEnvironment, state: &State) -> Result<Vec<f64>, GpError> {
        Ok(query_vector_in(self.frame, env, state, self.n, self.ds)?)
    }

    /// `(μ, σ)` per output.
    pub fn posterior(&self, z: &[f64]) -> Result<[(f64, f64); N_OUTPUTS], GpError> {
        let mut out = [(0.0, 0.0); N_OUTPUTS];
        for (o, m) in out.iter_mut().zip(&self.models) {
            *o = m.posterior(z)?;
        }
        Ok(out)
    }

    pub fn residual_stds(&self) -> [f64; N_OUTPUTS] {
        let mut r = [0.0; N_OUTPUTS];
        for (o, m) in r.iter_mut().zip(&self.models) {
            *o = m.residual_std();
        }
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{Input, LinearModel};
    use crate::environment::TubeSegment;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_data(seed: u64, n: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let y = z.iter().map(|r| r.iter().map(|v| v.sin()).sum::<f64>() + rng.gen_range(-0.05..0.05)).collect();
        (z, y)
    }

    fn dataset(z: &[Vec<f64>], y: &[f64]) -> StrategyDataset {
        StrategyDataset { frame: QueryFrame::World, z: z.to_vec(), y: y.iter().map(|&v| [v, 0.0, 0.0, 0.0]).collect() }
    }

    #[test]
    fn kernel_values() {
        let p = KernelParams::new(1.0, vec![1.0, 1.0, 1.0], 0.0).unwrap();
        let a = [0.3, -1.0, 2.0];
        assert_eq!(kernel_eval(&p, &a, &a).unwrap(), 1.0);
        let e = kernel_eval(&p, &[0.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap();
        assert!((e - 0.606_530_659_712_633_4).abs() < 1e-15);
        let b = [1.0, 0.5, -0.5];
        assert_eq!(kernel_eval(&p, &a, &b).unwrap(), kernel_eval(&p, &b, &a).unwrap());
        assert!(kernel_eval(&p, &a, &[1.0]).is_err());
        assert!(KernelParams::new(0.0, vec![1.0], 0.0).is_err());
        assert!(KernelParams::new(1.0, vec![-1.0], 0.0).is_err());
    }

    #[test]
    fn single_point_likelihood_limit() {
        let p = KernelParams::new(1e-8, vec![1.0], 1.0).unwrap();
        let d = dataset(&[vec![0.0]], &[0.7]);
        let (v, _) = log_marginal_likelihood(&p, &d, 0).unwrap();
        let expected = -0.5 * 0.49 - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((v - expected).abs() < 1e-7, "{v} vs {expected}");
    }

    #[test]
    fn likelihood_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let (z, y) = random_data(seed, 30, 3);
            let d = dataset(&z, &y);
            let p = KernelParams::new(1.3, vec![0.8, 1.5, 2.2], 0.2).unwrap();
            let (_, g) = log_marginal_likelihood(&p, &d, 0).unwrap();
            let base = p.to_log();
            let h = 1e-5;
            for i in 0..base.len() {
                let mut up = base.clone();
                let mut dn = base.clone();
                up[i] += h;
                dn[i] -= h;
                let fu = log_marginal_likelihood(&KernelParams::from_log(&up), &d, 0).unwrap().0;
                let fd = log_marginal_likelihood(&KernelParams::from_log(&dn), &d, 0).unwrap().0;
                let num = (fu - fd) / (2.0 * h);
                let rel = (num - g[i]).abs() / num.abs().max(1e-6);
                assert!(rel < 1e-4, "seed {seed} param {i}: analytic {} vs fd {num}", g[i]);
            }
        }
    }

    #[test]
    fn duplicate_rows_are_handled() {
        let (z, y) = random_data(1, 10, 2);
        let mut zz = z.clone();
        zz.extend(z.iter().cloned());
        let mut yy = y.clone();
        yy.extend(y.iter().copied());
        let p = KernelParams::new(1.0, vec![1.0, 1.0], 0.1).unwrap();
        let a = log_marginal_likelihood(&p, &dataset(&z, &y), 0).unwrap().0;
        let b = log_marginal_likelihood(&p, &dataset(&zz, &yy), 0).unwrap().0;
        assert!(b.is_finite() && a != b);
        // noiseless duplicates still factor thanks to the jitter
        let p0 = KernelParams::new(1.0, vec![1.0, 1.0], 0.0).unwrap();
        assert!(GPModel::with_params(p0, Standardizer::identity(2), &zz, &yy).is_ok());
    }

    #[test]
    fn posterior_matches_dense_inverse() {
        let (z, y) = random_data(7, 20, 3);
        let p = KernelParams::new(1.1, vec![0.9, 1.4, 0.7], 0.05).unwrap();
        let m = GPModel::with_params(p.clone(), Standardizer::identity(3), &z, &y).unwrap();
        let n = z.len();
        let reg = p.sigma_n * p.sigma_n + m.jitter();
        let k = DMatrix::from_fn(n, n, |i, j| kernel_eval(&p, &z[i], &z[j]).unwrap() + if i == j { reg } else { 0.0 });
        let kinv = k.try_inverse().unwrap();
        let yv = DVector::from_vec(y.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let q: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.5..2.5)).collect();
            let kq = DVector::from_fn(n, |i, _| kernel_eval(&p, &z[i], &q).unwrap());
            let mu = (kq.transpose() * &kinv * &yv)[0];
            let var = kernel_eval(&p, &q, &q).unwrap() - (kq.transpose() * &kinv * &kq)[0];
            let (m_mu, m_sigma) = m.posterior(&q).unwrap();
            assert!((mu - m_mu).abs() < 1e-8);
            assert!((var.max(0.0) - m_sigma * m_sigma).abs() < 1e-8);
        }
    }

    #[test]
    fn noiseless_interpolation_and_prior_reversion() {
        let (z, y) = random_data(2, 15, 2);
        let p = KernelParams::new(1.0, vec![0.5, 0.5], 0.0).unwrap();
        let m = GPModel::with_params(p, Standardizer::identity(2), &z, &y).unwrap();
        for (zi, yi) in z.iter().zip(&y) {
            let (mu, s) = m.posterior(zi).unwrap();
            assert!((mu - yi).abs() < 1e-6);
            assert!(s < 1e-3);
        }
        let (mu, s) = m.posterior(&[100.0, 100.0]).unwrap();
        assert!(mu.abs() < 1e-9 && (s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn recovers_generating_hyperparameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 200;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.gen_range(0.0..6.0));
        let truth = KernelParams::new(1.0, vec![1.0, 1.0], 0.1).unwrap();
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![x[(i, 0)], x[(i, 1)]]).collect();
        let mut k = DMatrix::from_fn(n, n, |i, j| kernel_eval(&truth, &rows[i], &rows[j]).unwrap());
        for i in 0..n {
            k[(i, i)] += 0.01 + 1e-8;
        }
        let l = Cholesky::new(k).unwrap().unpack();
        let eps = DVector::from_fn(n, |_, _| {
            // Box-Muller
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        });
        let y = l * eps;
        let fitted = fit_hyperparameters(&x, &y, &FitConfig { restarts: 5, max_iter: 200, ..Default::default() }, 9).unwrap();
        let got = fitted.to_log();
        for (i, v) in got.iter().enumerate() {
            let want = truth.to_log()[i];
            assert!((v - want).abs() < 0.5, "log-param {i}: {v} vs {want}");
        }
    }

    #[test]
    fn fit_is_deterministic_and_handles_constants() {
        let (z, y) = random_data(5, 40, 2);
        let d = dataset(&z, &y);
        let cfg = FitConfig { restarts: 1, seed: 3, ..Default::default() };
        let a = fit(&d, 0, &cfg).unwrap();
        let b = fit(&d, 0, &cfg).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(a.to_doc(), b.to_doc());

        let c = dataset(&z, &vec![2.5; z.len()]);
        let m = fit(&c, 0, &FitConfig { restarts: 2, ..Default::default() }).unwrap();
        for q in [[0.0, 0.0], [1.0, -1.5], [-1.9, 1.9]] {
            assert!((m.mean(&q).unwrap() - 2.5).abs() < 1e-3);
        }
        assert!(fit(&dataset(&z[..1], &y[..1]), 0, &cfg).is_err());
    }

    #[test]
    fn json_round_trip_and_checksum() {
        let (z, y) = random_data(8, 25, 3);
        let m = fit(&dataset(&z, &y), 0, &FitConfig { restarts: 2, ..Default::default() }).unwrap();
        let text = serde_json::to_string(&m.to_doc()).unwrap();
        let back = GPModel::from_doc(serde_json::from_str(&text).unwrap()).unwrap();
        for q in &z {
            let (a, sa) = m.posterior(q).unwrap();
            let (b, sb) = back.posterior(q).unwrap();
            assert!((a - b).abs() < 1e-12 && (sa - sb).abs() < 1e-9);
        }
        let mut doc = m.to_doc();
        doc.trace_checksum *= 1.01;
        assert!(matches!(GPModel::from_doc(doc), Err(GpError::Corrupt(_))));
    }

    #[test]
    fn dataset_row_counts_and_columns() {
        let env = TubeEnvironment::new(vec![TubeSegment { length: 3.0, slope: 0.2 }], 1.0).unwrap();
        let model = LinearModel::default();
        let roll = |d: usize| {
            let mut states = vec![State::ZERO];
            let inputs: Vec<Input> = (0..d).map(|k| Input::new(0.9, 0.1 + 1e-3 * k as f64)).collect();
            for u in &inputs {
                states.push(model.step(states.last().unwrap(), u).unwrap());
            }
            Execution::new(states, inputs).unwrap()
        };
        let d = build_dataset(&[roll(5)], std::slice::from_ref(&env), 10, 5, 0.005).unwrap();
        assert_eq!(d.len(), 1);
        let d = build_dataset(&[roll(20), roll(30)], &[env.clone(), env.clone()], 10, 5, 0.005).unwrap();
        assert_eq!(d.len(), 16 + 26);
        assert_eq!(d.dim(), 15);
        let d = build_dataset(&[roll(3), roll(20)], &[env.clone(), env.clone()], 10, 5, 0.005).unwrap();
        assert_eq!(d.len(), 16);

        let ex = roll(20);
        let d = build_dataset(std::slice::from_ref(&ex), std::slice::from_ref(&env), 10, 5, 0.005).unwrap();
        for j in 0..d.len() {
            // independent projection onto the single straight segment
            let p = ex.states[j + 5];
            let norm = (1.0f64 + 0.04).sqrt();
            let s = (p.x + 0.2 * p.y) / norm;
            let h = (p.y - 0.2 * p.x) / norm;
            assert!((d.y[j][0] - s).abs() < 1e-12 && (d.y[j][1] - h).abs() < 1e-12);
            assert_eq!(&d.z[j][..4], &[ex.states[j].x, ex.states[j].vx, ex.states[j].y, ex.states[j].vy]);
        }
        // the input at step D is undefined; the last applied one is held
        assert_eq!(d.y[15][2], ex.inputs[19].ax);
        assert_eq!(d.y[14][3], ex.inputs[19].ay);
    }

    #[test]
    fn frenet_query_uses_tube_coordinates() {
        let env = TubeEnvironment::new(vec![TubeSegment { length: 3.0, slope: 0.2 }], 1.0).unwrap();
        let st = State::new(1.0, 0.5, 0.4, -0.3);
        let z = query_vector_in(QueryFrame::Frenet, &env, &st, 10, 0.005).unwrap();
        let norm = (1.0f64 + 0.04).sqrt();
        let want = [
            (st.x + 0.2 * st.y) / norm,
            (st.vx + 0.2 * st.vy) / norm,
            (st.y - 0.2 * st.x) / norm,
            (st.vy - 0.2 * st.vx) / norm,
        ];
        for (a, b) in z[..4].iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{z:?}");
        }
        assert_eq!(z[4..], query_vector(&env, &st, 10, 0.005).unwrap()[4..]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn variance_bounded_by_prior_and_monotone_in_data(seed in 0u64..10_000, n in 3usize..15) {
            let (z, y) = random_data(seed, n + 1, 2);
            let p = KernelParams::new(1.2, vec![0.7, 1.1], 0.0).unwrap();
            let small = GPModel::with_params(p.clone(), Standardizer::identity(2), &z[..n], &y[..n]).unwrap();
            let big = GPModel::with_params(p, Standardizer::identity(2), &z, &y).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
            for _ in 0..10 {
                let q = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
                let (_, s1) = small.posterior(&q).unwrap();
                let (_, s2) = big.posterior(&q).unwrap();
                prop_assert!(s1 * s1 <= 1.44 + 1e-9);
                prop_assert!(s2 * s2 <= s1 * s1 + 1e-9);
            }
        }

        #[test]
        fn kernel_matrices_factor(seed in 0u64..10_000, ls in 0.05f64..5.0) {
            let (z, _) = random_data(seed, 25, 3);
            let p = KernelParams::new(1.0, vec![ls; 3], 0.0).unwrap();
            let x = to_matrix(&z).unwrap();
            let k = PairwiseSq::new(&x).kernel(&p);
            prop_assert!(factor(k, 0.0).is_ok());
        }
    }
}
