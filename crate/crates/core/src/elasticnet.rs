//! ElasticNet linear regression by cyclic coordinate descent.
//!
//! Minimizes
//!
//! ```text
//! 1/(2N) |y - c - Xw|^2 + alpha * (l1_ratio * |w|_1 + (1 - l1_ratio)/2 * |w|^2)
//! ```
//!
//! Descent runs on centered (and by default standardized) features using
//! covariance updates: the Gram matrix `X'X/N` is formed once per training set
//! and shared by every target and every grid point evaluated on that set.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::dml::make_folds;
use crate::error::{Error, Result};
use crate::numerics::RngStream;

/// Regularization strengths searched by default.
pub const DEFAULT_ALPHA_GRID: [f64; 5] = [1e-2, 1e-1, 1.0, 10.0, 100.0];
/// Mixing ratios searched by default.
pub const DEFAULT_L1_GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElasticNetConfig {
    pub alpha: f64,
    pub l1_ratio: f64,
    pub max_sweeps: usize,
    /// Convergence threshold on the largest coefficient change in one sweep.
    pub tol: f64,
    /// Scale features to unit variance before descent. The penalty then acts
    /// on standardized coefficients.
    pub standardize: bool,
}

impl Default for ElasticNetConfig {
    fn default() -> Self {
        ElasticNetConfig {
            alpha: 1.0,
            l1_ratio: 0.5,
            max_sweeps: 1000,
            tol: 1e-6,
            standardize: true,
        }
    }
}

impl ElasticNetConfig {
    pub fn new(alpha: f64, l1_ratio: f64) -> Result<Self> {
        let cfg = ElasticNetConfig {
            alpha,
            l1_ratio,
            ..Default::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "alpha must be a finite non-negative number, got {}",
                self.alpha
            )));
        }
        if !(0.0..=1.0).contains(&self.l1_ratio) {
            return Err(Error::InvalidParameter(format!(
                "l1_ratio must lie in [0, 1], got {}",
                self.l1_ratio
            )));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        if self.max_sweeps == 0 {
            return Err(Error::InvalidParameter("max_sweeps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedLinearModel {
    pub intercept: f64,
    /// Coefficients on the original feature scale.
    pub coefficients: Vec<f64>,
    /// Objective value at the returned solution, in the coordinates the
    /// descent ran in.
    pub training_objective: f64,
    pub sweeps: usize,
    pub converged: bool,
}

impl FittedLinearModel {
    pub fn n_features(&self) -> usize {
        self.coefficients.len()
    }
}

/// Centered/scaled copy of a training design plus its Gram matrix.
pub(crate) struct PreparedDesign {
    n: usize,
    means: Array1<f64>,
    /// Column scale; 0 marks a constant column whose coefficient stays 0.
    scales: Array1<f64>,
    z: Array2<f64>,
    gram: Array2<f64>,
}

/// One regression target against a [`PreparedDesign`].
pub(crate) struct PreparedTarget {
    mean: f64,
    /// `Z'(y - mean)/N`
    xty: Array1<f64>,
    /// `|y - mean|^2 / N`
    yy: f64,
}

fn check_finite_matrix(x: ArrayView2<'_, f64>) -> Result<()> {
    if let Some(((i, j), v)) = x.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::InvalidData(format!(
            "non-finite covariate {v} at row {i}, column {j}"
        )));
    }
    Ok(())
}

fn check_finite_vector(y: ArrayView1<'_, f64>, what: &str) -> Result<()> {
    if let Some((i, v)) = y.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::InvalidData(format!("non-finite {what} {v} at row {i}")));
    }
    Ok(())
}

impl PreparedDesign {
    pub(crate) fn new(x: ArrayView2<'_, f64>, standardize: bool) -> Result<Self> {
        let (n, d) = x.dim();
        if n < 2 {
            return Err(Error::InvalidData(format!(
                "ElasticNet needs at least 2 samples, got {n}"
            )));
        }
        if d == 0 {
            return Err(Error::InvalidData("ElasticNet needs at least one feature".into()));
        }
        check_finite_matrix(x)?;
        let nf = n as f64;
        let means = x.mean_axis(Axis(0)).expect("n >= 2");
        let mut z = &x - &means.view().insert_axis(Axis(0));
        let mut scales = Array1::zeros(d);
        for (j, mut col) in z.axis_iter_mut(Axis(1)).enumerate() {
            let var = col.iter().map(|v| v * v).sum::<f64>() / nf;
            let sd = var.sqrt();
            // relative to the column magnitude so constant columns with
            // rounding noise are caught
            let magnitude = means[j].abs().max(1.0);
            if sd <= 1e-12 * magnitude {
                col.fill(0.0);
                continue;
            }
            if standardize {
                col.mapv_inplace(|v| v / sd);
                scales[j] = sd;
            } else {
                scales[j] = 1.0;
            }
        }
        let gram = z.t().dot(&z) / nf;
        Ok(PreparedDesign {
            n,
            means,
            scales,
            z,
            gram,
        })
    }

    pub(crate) fn target(&self, y: ArrayView1<'_, f64>) -> Result<PreparedTarget> {
        if y.len() != self.n {
            return Err(Error::Shape {
                expected: self.n,
                found: y.len(),
            });
        }
        check_finite_vector(y, "target")?;
        let nf = self.n as f64;
        let mean = y.sum() / nf;
        let yc = y.mapv(|v| v - mean);
        let xty = self.z.t().dot(&yc) / nf;
        let yy = yc.dot(&yc) / nf;
        Ok(PreparedTarget { mean, xty, yy })
    }

    /// Cyclic coordinate descent from zero. `trace` receives the objective
    /// after every sweep.
    pub(crate) fn solve(
        &self,
        target: &PreparedTarget,
        cfg: &ElasticNetConfig,
        mut trace: Option<&mut Vec<f64>>,
    ) -> FittedLinearModel {
        let d = self.gram.nrows();
        let l1 = cfg.alpha * cfg.l1_ratio;
        let l2 = cfg.alpha * (1.0 - cfg.l1_ratio);
        let mut w = Array1::<f64>::zeros(d);
        // negative gradient of the least-squares part: Z'y/N - G w
        let mut r = target.xty.clone();
        let mut sweeps = 0;
        let mut converged = false;
        while sweeps < cfg.max_sweeps {
            sweeps += 1;
            let mut max_change = 0.0f64;
            for j in 0..d {
                if self.scales[j] == 0.0 {
                    continue;
                }
                let gjj = self.gram[[j, j]];
                let old = w[j];
                let rho = r[j] + gjj * old;
                let new = soft_threshold(rho, l1) / (gjj + l2);
                let delta = new - old;
                if delta != 0.0 {
                    w[j] = new;
                    r.scaled_add(-delta, &self.gram.column(j));
                    max_change = max_change.max(delta.abs());
                }
            }
            if let Some(t) = trace.as_deref_mut() {
                t.push(objective_from_state(target, &w, &r, l1, l2));
            }
            if max_change < cfg.tol {
                converged = true;
                break;
            }
        }
        let training_objective = objective_from_state(target, &w, &r, l1, l2);

        let coefficients: Vec<f64> = w
            .iter()
            .zip(self.scales.iter())
            .map(|(&wj, &s)| if s == 0.0 { 0.0 } else { wj / s })
            .collect();
        let intercept = target.mean
            - coefficients
                .iter()
                .zip(self.means.iter())
                .map(|(c, m)| c * m)
                .sum::<f64>();
        FittedLinearModel {
            intercept,
            coefficients,
            training_objective,
            sweeps,
            converged,
        }
    }
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Objective from the maintained gradient: `|y - Zw|^2/(2N) = (yy - w'c - w'r)/2`.
fn objective_from_state(
    target: &PreparedTarget,
    w: &Array1<f64>,
    r: &Array1<f64>,
    l1: f64,
    l2: f64,
) -> f64 {
    let smooth = 0.5 * (target.yy - w.dot(&target.xty) - w.dot(r));
    let l1_norm: f64 = w.iter().map(|v| v.abs()).sum();
    let l2_sq = w.dot(w);
    smooth.max(0.0) + l1 * l1_norm + 0.5 * l2 * l2_sq
}

/// Fits an ElasticNet model.
pub fn fit(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    config: &ElasticNetConfig,
) -> Result<FittedLinearModel> {
    fit_traced(x, y, config).map(|(m, _)| m)
}

/// Like [`fit`] but also returns the objective after each sweep.
pub fn fit_traced(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    config: &ElasticNetConfig,
) -> Result<(FittedLinearModel, Vec<f64>)> {
    config.validate()?;
    let design = PreparedDesign::new(x, config.standardize)?;
    let target = design.target(y)?;
    let mut trace = Vec::new();
    let model = design.solve(&target, config, Some(&mut trace));
    Ok((model, trace))
}

pub fn predict(model: &FittedLinearModel, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    if x.ncols() != model.n_features() {
        return Err(Error::Shape {
            expected: model.n_features(),
            found: x.ncols(),
        });
    }
    let coef = ArrayView1::from(&model.coefficients[..]);
    Ok(x.dot(&coef) + model.intercept)
}

fn validate_grid(alpha_grid: &[f64], l1_grid: &[f64]) -> Result<()> {
    if alpha_grid.is_empty() || l1_grid.is_empty() {
        return Err(Error::InvalidParameter(
            "cross-validation grid must contain at least one alpha and one l1_ratio".into(),
        ));
    }
    for &a in alpha_grid {
        ElasticNetConfig::new(a, 0.5)?;
    }
    for &l in l1_grid {
        ElasticNetConfig::new(1.0, l)?;
    }
    Ok(())
}

/// Grid search by K-fold cross-validation. Returns the grid point with the
/// smallest pooled held-out mean squared error; ties go to the larger alpha,
/// then the larger l1_ratio.
pub fn cv_select(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    folds: usize,
    alpha_grid: &[f64],
    l1_grid: &[f64],
    stream: &mut RngStream,
) -> Result<ElasticNetConfig> {
    let base = ElasticNetConfig::default();
    let mut picks = cv_select_targets(x, &[y], folds, alpha_grid, l1_grid, &base, stream)?;
    Ok(picks.remove(0))
}

/// Pooled held-out mean squared error for each grid point, indexed as
/// `[alpha_index * l1_grid.len() + l1_index]`.
pub fn cv_errors(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    folds: usize,
    alpha_grid: &[f64],
    l1_grid: &[f64],
    base: &ElasticNetConfig,
    stream: &mut RngStream,
) -> Result<Vec<f64>> {
    let mut errs = cv_errors_targets(x, &[y], folds, alpha_grid, l1_grid, base, stream)?;
    Ok(errs.remove(0))
}

pub(crate) fn cv_select_targets(
    x: ArrayView2<'_, f64>,
    ys: &[ArrayView1<'_, f64>],
    folds: usize,
    alpha_grid: &[f64],
    l1_grid: &[f64],
    base: &ElasticNetConfig,
    stream: &mut RngStream,
) -> Result<Vec<ElasticNetConfig>> {
    let errors = cv_errors_targets(x, ys, folds, alpha_grid, l1_grid, base, stream)?;
    Ok(errors
        .iter()
        .map(|mse| {
            let (ai, li) = argmin_grid(mse, alpha_grid, l1_grid);
            ElasticNetConfig {
                alpha: alpha_grid[ai],
                l1_ratio: l1_grid[li],
                ..*base
            }
        })
        .collect())
}

fn argmin_grid(mse: &[f64], alpha_grid: &[f64], l1_grid: &[f64]) -> (usize, usize) {
    let nl = l1_grid.len();
    let mut best = (0, 0);
    let mut best_err = f64::INFINITY;
    for (ai, &a) in alpha_grid.iter().enumerate() {
        for (li, &l) in l1_grid.iter().enumerate() {
            let e = mse[ai * nl + li];
            let tie = (e - best_err).abs() <= 1e-12 * best_err.abs().max(1e-300);
            let stronger = (a, l) > (alpha_grid[best.0], l1_grid[best.1]);
            if (e < best_err && !tie) || (tie && stronger) || best_err.is_infinite() {
                best = (ai, li);
                best_err = e;
            }
        }
    }
    best
}

fn cv_errors_targets(
    x: ArrayView2<'_, f64>,
    ys: &[ArrayView1<'_, f64>],
    folds: usize,
    alpha_grid: &[f64],
    l1_grid: &[f64],
    base: &ElasticNetConfig,
    stream: &mut RngStream,
) -> Result<Vec<Vec<f64>>> {
    validate_grid(alpha_grid, l1_grid)?;
    base.validate()?;
    let n = x.nrows();
    if folds < 2 || n < folds {
        return Err(Error::InvalidParameter(format!(
            "cross-validation needs 2 <= folds <= N, got folds={folds}, N={n}"
        )));
    }
    for y in ys {
        if y.len() != n {
            return Err(Error::Shape {
                expected: n,
                found: y.len(),
            });
        }
    }
    let split = make_folds(n, folds, stream)?;
    let grid_len = alpha_grid.len() * l1_grid.len();
    let mut sse = vec![vec![0.0; grid_len]; ys.len()];
    for k in 0..folds {
        let (train, test) = split.train_test(k);
        let x_train = x.select(Axis(0), &train);
        let x_test = x.select(Axis(0), &test);
        let design = PreparedDesign::new(x_train.view(), base.standardize)?;
        for (t, y) in ys.iter().enumerate() {
            let y_train = y.select(Axis(0), &train);
            let y_test = y.select(Axis(0), &test);
            let target = design.target(y_train.view())?;
            for (ai, &alpha) in alpha_grid.iter().enumerate() {
                for (li, &l1_ratio) in l1_grid.iter().enumerate() {
                    let cfg = ElasticNetConfig {
                        alpha,
                        l1_ratio,
                        ..*base
                    };
                    let model = design.solve(&target, &cfg, None);
                    let pred = predict(&model, x_test.view())?;
                    let err: f64 = pred
                        .iter()
                        .zip(y_test.iter())
                        .map(|(p, v)| (p - v) * (p - v))
                        .sum();
                    sse[t][ai * l1_grid.len() + li] += err;
                }
            }
        }
    }
    Ok(sse
        .into_iter()
        .map(|v| v.into_iter().map(|e| e / n as f64).collect())
        .collect())
}

/// Cross-validates and then refits each target on all of `x`, sharing one
/// design preparation between the targets.
pub(crate) fn select_and_fit_targets(
    x: ArrayView2<'_, f64>,
    ys: &[ArrayView1<'_, f64>],
    folds: usize,
    alpha_grid: &[f64],
    l1_grid: &[f64],
    base: &ElasticNetConfig,
    stream: &mut RngStream,
) -> Result<Vec<FittedLinearModel>> {
    let configs = cv_select_targets(x, ys, folds, alpha_grid, l1_grid, base, stream)?;
    let design = PreparedDesign::new(x, base.standardize)?;
    ys.iter()
        .zip(configs.iter())
        .map(|(y, cfg)| {
            let target = design.target(*y)?;
            Ok(design.solve(&target, cfg, None))
        })
        .collect()
}
