//! Cross-fitted residualization and the ordinary residual-on-residual
//! estimator of the partially linear model `Y = theta*D + g(X) + U`,
//! `D = m(X) + V`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::elasticnet::{self, ElasticNetConfig, DEFAULT_ALPHA_GRID, DEFAULT_L1_GRID};
use crate::error::{Error, Result};
use crate::numerics::RngStream;

pub const DEFAULT_FOLDS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub d: Array1<f64>,
    pub y: Array1<f64>,
}

impl Dataset {
    pub fn new(x: Array2<f64>, d: Array1<f64>, y: Array1<f64>) -> Result<Self> {
        let n = x.nrows();
        if d.len() != n {
            return Err(Error::Shape {
                expected: n,
                found: d.len(),
            });
        }
        if y.len() != n {
            return Err(Error::Shape {
                expected: n,
                found: y.len(),
            });
        }
        if let Some(((i, j), _)) = x.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidData(format!(
                "non-finite covariate at row {i}, column {j}"
            )));
        }
        if let Some((i, _)) = d.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidData(format!("non-finite treatment at row {i}")));
        }
        if let Some((i, _)) = y.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidData(format!("non-finite outcome at row {i}")));
        }
        Ok(Dataset { x, d, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_covariates(&self) -> usize {
        self.x.ncols()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select(Axis(0), rows),
            d: self.d.select(Axis(0), rows),
            y: self.y.select(Axis(0), rows),
        }
    }
}

/// Assignment of samples to K folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub assignment: Vec<usize>,
    pub k: usize,
}

impl FoldSplit {
    pub fn from_assignment(assignment: Vec<usize>, k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidParameter(format!("need at least 2 folds, got {k}")));
        }
        let mut sizes = vec![0usize; k];
        for &f in &assignment {
            if f >= k {
                return Err(Error::InvalidParameter(format!("fold index {f} out of range 0..{k}")));
            }
            sizes[f] += 1;
        }
        if sizes.contains(&0) {
            return Err(Error::InvalidParameter("every fold must be non-empty".into()));
        }
        Ok(FoldSplit { assignment, k })
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.assignment {
            sizes[f] += 1;
        }
        sizes
    }

    /// Training (all other folds) and evaluation indices for fold `fold`, both
    /// in ascending sample order.
    pub fn train_test(&self, fold: usize) -> (Vec<usize>, Vec<usize>) {
        let mut train = Vec::with_capacity(self.len());
        let mut test = Vec::new();
        for (i, &f) in self.assignment.iter().enumerate() {
            if f == fold {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        (train, test)
    }
}

/// Balanced random partition of `0..n` into `k` folds.
pub fn make_folds(n: usize, k: usize, stream: &mut RngStream) -> Result<FoldSplit> {
    if k < 2 || k > n {
        return Err(Error::InvalidParameter(format!(
            "fold count must satisfy 2 <= k <= n, got k={k}, n={n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    stream.shuffle(&mut order);
    let mut assignment = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        assignment[i] = pos % k;
    }
    Ok(FoldSplit { assignment, k })
}

/// Outcome residuals `R = Y - h(X)` and treatment residuals `V = D - m(X)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSet {
    pub r_hat: Vec<f64>,
    pub v_hat: Vec<f64>,
}

impl ResidualSet {
    pub fn new(r_hat: Vec<f64>, v_hat: Vec<f64>) -> Result<Self> {
        if r_hat.len() != v_hat.len() {
            return Err(Error::Shape {
                expected: r_hat.len(),
                found: v_hat.len(),
            });
        }
        if r_hat.iter().chain(v_hat.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("residuals must be finite".into()));
        }
        Ok(ResidualSet { r_hat, v_hat })
    }

    pub fn len(&self) -> usize {
        self.r_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r_hat.is_empty()
    }

    pub(crate) fn pairs(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.r_hat.iter().copied().zip(self.v_hat.iter().copied())
    }
}

/// Fits the two nuisance regressions on a training split and predicts on an
/// evaluation split.
pub trait FirstStage {
    /// Returns `(h_hat(x_eval), m_hat(x_eval))`.
    fn fit_predict(
        &self,
        x_train: ArrayView2<'_, f64>,
        y_train: ArrayView1<'_, f64>,
        d_train: ArrayView1<'_, f64>,
        x_eval: ArrayView2<'_, f64>,
        stream: &mut RngStream,
    ) -> Result<(Array1<f64>, Array1<f64>)>;
}

/// ElasticNet nuisance models, hyperparameters chosen by grid-search CV on
/// each training split separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElasticNetGrid {
    pub alphas: Vec<f64>,
    pub l1_ratios: Vec<f64>,
    pub cv_folds: usize,
    pub base: ElasticNetConfig,
}

impl Default for ElasticNetGrid {
    fn default() -> Self {
        ElasticNetGrid {
            alphas: DEFAULT_ALPHA_GRID.to_vec(),
            l1_ratios: DEFAULT_L1_GRID.to_vec(),
            cv_folds: 5,
            base: ElasticNetConfig::default(),
        }
    }
}

impl ElasticNetGrid {
    /// A grid pinned to a single configuration, so no CV is needed.
    pub fn fixed(config: ElasticNetConfig) -> Self {
        ElasticNetGrid {
            alphas: vec![config.alpha],
            l1_ratios: vec![config.l1_ratio],
            cv_folds: 5,
            base: config,
        }
    }
}

impl FirstStage for ElasticNetGrid {
    fn fit_predict(
        &self,
        x_train: ArrayView2<'_, f64>,
        y_train: ArrayView1<'_, f64>,
        d_train: ArrayView1<'_, f64>,
        x_eval: ArrayView2<'_, f64>,
        stream: &mut RngStream,
    ) -> Result<(Array1<f64>, Array1<f64>)> {
        let models = if self.alphas.len() == 1 && self.l1_ratios.len() == 1 {
            let cfg = ElasticNetConfig {
                alpha: self.alphas[0],
                l1_ratio: self.l1_ratios[0],
                ..self.base
            };
            vec![
                elasticnet::fit(x_train, y_train, &cfg)?,
                elasticnet::fit(x_train, d_train, &cfg)?,
            ]
        } else {
            elasticnet::select_and_fit_targets(
                x_train,
                &[y_train, d_train],
                self.cv_folds,
                &self.alphas,
                &self.l1_ratios,
                &self.base,
                stream,
            )?
        };
        Ok((
            elasticnet::predict(&models[0], x_eval)?,
            elasticnet::predict(&models[1], x_eval)?,
        ))
    }
}

/// Cross-fitted residuals with the ElasticNet first stage.
pub fn cross_fit_residuals(
    data: &Dataset,
    folds: &FoldSplit,
    grid: &ElasticNetGrid,
    stream: &RngStream,
) -> Result<ResidualSet> {
    cross_fit_residuals_with(data, folds, grid, stream)
}

/// Cross-fitting with an arbitrary first stage. Fold `k` draws from
/// `stream.substream(k)`, so results do not depend on fold processing order.
pub fn cross_fit_residuals_with<F: FirstStage + ?Sized>(
    data: &Dataset,
    folds: &FoldSplit,
    learner: &F,
    stream: &RngStream,
) -> Result<ResidualSet> {
    let n = data.len();
    if folds.len() != n {
        return Err(Error::Shape {
            expected: n,
            found: folds.len(),
        });
    }
    let mut r_hat = vec![0.0; n];
    let mut v_hat = vec![0.0; n];
    for k in 0..folds.k {
        let (train, test) = folds.train_test(k);
        if train.is_empty() || test.is_empty() {
            return Err(Error::InvalidParameter(format!("fold {k} is empty")));
        }
        let train_set = data.select_rows(&train);
        let x_test = data.x.select(Axis(0), &test);
        let mut fold_stream = stream.substream(k as u64);
        let (h, m) = learner.fit_predict(
            train_set.x.view(),
            train_set.y.view(),
            train_set.d.view(),
            x_test.view(),
            &mut fold_stream,
        )?;
        for (pos, &i) in test.iter().enumerate() {
            r_hat[i] = data.y[i] - h[pos];
            v_hat[i] = data.d[i] - m[pos];
        }
    }
    ResidualSet::new(r_hat, v_hat)
}

/// Draws a `k`-fold split from `stream.substream(0)` and cross-fits with
/// `stream.substream(1)`.
pub fn residualize(data: &Dataset, k: usize, grid: &ElasticNetGrid, stream: &RngStream) -> Result<ResidualSet> {
    let folds = make_folds(data.len(), k, &mut stream.substream(0))?;
    cross_fit_residuals(data, &folds, grid, &stream.substream(1))
}

/// `sum(V R) / sum(V^2)`.
pub fn pooled_theta(res: &ResidualSet) -> Result<f64> {
    ratio_estimate(&res.r_hat, &res.v_hat)
}

pub(crate) fn ratio_estimate(r: &[f64], v: &[f64]) -> Result<f64> {
    let vv: f64 = v.iter().map(|x| x * x).sum();
    if !(vv > 0.0) {
        return Err(Error::DegenerateTreatment);
    }
    let vr: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
    Ok(vr / vv)
}

/// Empirical mean of the orthogonal moment `(R - theta V) V`.
pub fn orthogonal_moment(res: &ResidualSet, theta: f64) -> f64 {
    res.pairs().map(|(r, v)| (r - theta * v) * v).sum::<f64>() / res.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianResidualFit {
    pub loglik: f64,
    pub sigma_u: f64,
    pub sigma_v: f64,
}

/// Maximized joint log-likelihood of `R = theta V + W_u`, `V = W_v` with
/// independent zero-mean Gaussian noises.
pub fn gaussian_residual_loglik(res: &ResidualSet, theta: f64) -> Result<GaussianResidualFit> {
    let n = res.len();
    if n < 3 {
        return Err(Error::DegenerateData(format!(
            "need at least 3 residual pairs, got {n}"
        )));
    }
    let nf = n as f64;
    let su2 = res.pairs().map(|(r, v)| (r - theta * v).powi(2)).sum::<f64>() / nf;
    let sv2 = res.v_hat.iter().map(|v| v * v).sum::<f64>() / nf;
    let r_scale = (res.r_hat.iter().map(|r| r * r).sum::<f64>() / nf).sqrt();
    if !(sv2 > 0.0) {
        return Err(Error::DegenerateTreatment);
    }
    if su2.sqrt() <= 1e-12 * r_scale.max(f64::MIN_POSITIVE) {
        return Err(Error::DegenerateData(
            "outcome residuals are an exact multiple of treatment residuals".into(),
        ));
    }
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let loglik = -0.5 * nf * (ln2pi + su2.ln() + 1.0) - 0.5 * nf * (ln2pi + sv2.ln() + 1.0);
    Ok(GaussianResidualFit {
        loglik,
        sigma_u: su2.sqrt(),
        sigma_v: sv2.sqrt(),
    })
}
