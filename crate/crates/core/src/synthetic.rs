//! Synthetic partially linear data with structured noise.
//!
//! Covariates are i.i.d. standard normal; both nuisances are sparse linear
//! maps with standard-normal active coefficients. The noise terms follow one
//! of four structures: plain Gaussian, a centered exponential shock on the
//! outcome, a centered Bernoulli confounder loading on both noises, or
//! Laplace outcome noise (a structure neither latent model contains).

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::dml::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{draw, RngStream, Sampler};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    NoLatent,
    OutcomeLatent,
    Confounder,
    LaplaceMisspec,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [
        ScenarioKind::NoLatent,
        ScenarioKind::OutcomeLatent,
        ScenarioKind::Confounder,
        ScenarioKind::LaplaceMisspec,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::NoLatent => "no_latent",
            ScenarioKind::OutcomeLatent => "outcome_latent",
            ScenarioKind::Confounder => "confounder",
            ScenarioKind::LaplaceMisspec => "laplace_misspec",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioKind::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::NotFound {
                kind: "scenario kind",
                name: s.to_string(),
                valid: ScenarioKind::ALL.iter().map(|k| k.as_str().to_string()).collect(),
            })
    }
}

pub const DEFAULT_SPARSITY: f64 = 0.1;
/// Gives the Laplace noise unit variance.
pub const DEFAULT_LAPLACE_SCALE: f64 = std::f64::consts::FRAC_1_SQRT_2;
/// Range of the Bernoulli rate when it is left unspecified.
pub const RANDOM_Q_RANGE: (f64, f64) = (0.2, 0.8);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    /// Label carried into run results.
    pub name: String,
    pub kind: ScenarioKind,
    pub n: usize,
    pub d: usize,
    pub theta_true: f64,
    /// Fraction of nonzero nuisance coefficients.
    pub sparsity: f64,
    pub exp_mean: f64,
    pub a: f64,
    pub b: f64,
    /// Bernoulli rate; drawn per instance from [`RANDOM_Q_RANGE`] when `None`.
    pub q: Option<f64>,
    pub sigma_u: f64,
    pub sigma_v: f64,
    pub laplace_scale: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            name: ScenarioKind::NoLatent.as_str().to_string(),
            kind: ScenarioKind::NoLatent,
            n: 300,
            d: 100,
            theta_true: 1.0,
            sparsity: DEFAULT_SPARSITY,
            exp_mean: 5.0,
            a: 2.0,
            b: 2.0,
            q: None,
            sigma_u: 1.0,
            sigma_v: 0.5,
            laplace_scale: DEFAULT_LAPLACE_SCALE,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn new(kind: ScenarioKind) -> Self {
        ScenarioConfig {
            name: kind.as_str().to_string(),
            kind,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.n < 10 {
            return bad(format!("n must be at least 10, got {}", self.n));
        }
        if self.d < 1 {
            return bad("d must be at least 1".into());
        }
        if !self.theta_true.is_finite() {
            return bad("theta_true must be finite".into());
        }
        if !(0.0..=1.0).contains(&self.sparsity) {
            return bad(format!("sparsity must lie in [0, 1], got {}", self.sparsity));
        }
        if !(self.sigma_u >= 0.0 && self.sigma_u.is_finite()) {
            return bad(format!("sigma_u must be finite and >= 0, got {}", self.sigma_u));
        }
        if !(self.sigma_v >= 0.0 && self.sigma_v.is_finite()) {
            return bad(format!("sigma_v must be finite and >= 0, got {}", self.sigma_v));
        }
        match self.kind {
            ScenarioKind::OutcomeLatent if !(self.exp_mean > 0.0 && self.exp_mean.is_finite()) => {
                bad(format!("exp_mean must be positive, got {}", self.exp_mean))
            }
            ScenarioKind::Confounder => {
                if !(self.a.is_finite() && self.b.is_finite()) {
                    return bad("loadings a and b must be finite".into());
                }
                match self.q {
                    Some(q) if !(q > 0.0 && q < 1.0) => bad(format!("q must lie in (0, 1), got {q}")),
                    _ => Ok(()),
                }
            }
            ScenarioKind::LaplaceMisspec
                if !(self.laplace_scale > 0.0 && self.laplace_scale.is_finite()) =>
            {
                bad(format!("laplace_scale must be positive, got {}", self.laplace_scale))
            }
            _ => Ok(()),
        }
    }

    /// Number of nonzero coefficients in each nuisance.
    pub fn n_active(&self) -> usize {
        (self.sparsity * self.d as f64).round() as usize
    }
}

/// The generating quantities behind a [`GeneratedInstance`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub theta_true: f64,
    /// Bernoulli rate actually used (confounder scenario only).
    pub q: Option<f64>,
    /// Centered latent draws; empty when the scenario has no latent.
    pub z: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub coef_m: Vec<f64>,
    pub coef_g: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GeneratedInstance {
    pub config: ScenarioConfig,
    pub data: Dataset,
    pub truth: Truth,
}

impl GeneratedInstance {
    /// `m(X)` at the stored coefficients.
    pub fn m_true(&self) -> Array1<f64> {
        self.data.x.dot(&Array1::from(self.truth.coef_m.clone()))
    }

    /// `g(X)` at the stored coefficients.
    pub fn g_true(&self) -> Array1<f64> {
        self.data.x.dot(&Array1::from(self.truth.coef_g.clone()))
    }

    /// `E[Y | X] = theta m(X) + g(X)`.
    pub fn h_true(&self) -> Array1<f64> {
        let m = self.m_true();
        let g = self.g_true();
        m.mapv(|v| self.truth.theta_true * v) + g
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_dataset_csv(&self.data, path)
    }
}

const STREAM_X: u64 = 0;
const STREAM_COEF_M: u64 = 1;
const STREAM_COEF_G: u64 = 2;
const STREAM_NOISE_U: u64 = 3;
const STREAM_NOISE_V: u64 = 4;
const STREAM_LATENT: u64 = 5;
const STREAM_Q: u64 = 6;

fn sparse_coefficients(d: usize, active: usize, stream: &mut RngStream) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..d).collect();
    stream.shuffle(&mut idx);
    let mut coef = vec![0.0; d];
    let mut chosen = idx[..active.min(d)].to_vec();
    chosen.sort_unstable();
    for j in chosen {
        coef[j] = stream.standard_normal();
    }
    coef
}

fn scaled_normal(stream: &mut RngStream, sd: f64, n: usize) -> Result<Vec<f64>> {
    Ok(draw(stream, Sampler::StandardNormal, n)?
        .into_iter()
        .map(|e| sd * e)
        .collect())
}

pub fn generate(cfg: &ScenarioConfig) -> Result<GeneratedInstance> {
    cfg.validate()?;
    let (n, d) = (cfg.n, cfg.d);
    let root = RngStream::new(cfg.seed);

    let xs = draw(&mut root.substream(STREAM_X), Sampler::StandardNormal, n * d)?;
    let x = Array2::from_shape_vec((n, d), xs).expect("n * d draws");
    let active = cfg.n_active();
    let coef_m = sparse_coefficients(d, active, &mut root.substream(STREAM_COEF_M));
    let coef_g = sparse_coefficients(d, active, &mut root.substream(STREAM_COEF_G));

    let wu = scaled_normal(&mut root.substream(STREAM_NOISE_U), cfg.sigma_u, n)?;
    let wv = scaled_normal(&mut root.substream(STREAM_NOISE_V), cfg.sigma_v, n)?;
    let mut latent = root.substream(STREAM_LATENT);

    let (z, u, v, q) = match cfg.kind {
        ScenarioKind::NoLatent => (Vec::new(), wu, wv, None),
        ScenarioKind::OutcomeLatent => {
            let e = draw(&mut latent, Sampler::Exponential { mean: cfg.exp_mean }, n)?;
            let z: Vec<f64> = e.into_iter().map(|e| e - cfg.exp_mean).collect();
            let u = z.iter().zip(&wu).map(|(z, w)| z + w).collect();
            (z, u, wv, None)
        }
        ScenarioKind::Confounder => {
            let q = match cfg.q {
                Some(q) => q,
                None => root
                    .substream(STREAM_Q)
                    .uniform_range(RANDOM_Q_RANGE.0, RANDOM_Q_RANGE.1),
            };
            let bern = draw(&mut latent, Sampler::Bernoulli { p: q }, n)?;
            let z: Vec<f64> = bern.into_iter().map(|b| b - q).collect();
            let u = z.iter().zip(&wu).map(|(z, w)| cfg.a * z + w).collect();
            let v = z.iter().zip(&wv).map(|(z, w)| cfg.b * z + w).collect();
            (z, u, v, Some(q))
        }
        ScenarioKind::LaplaceMisspec => {
            let u = draw(&mut latent, Sampler::Laplace { scale: cfg.laplace_scale }, n)?;
            (Vec::new(), u, wv, None)
        }
    };

    let m = x.dot(&Array1::from(coef_m.clone()));
    let g = x.dot(&Array1::from(coef_g.clone()));
    let dvec: Array1<f64> = m.iter().zip(&v).map(|(m, v)| m + v).collect();
    let y: Array1<f64> = (0..n).map(|i| cfg.theta_true * dvec[i] + g[i] + u[i]).collect();

    let data = Dataset::new(x, dvec, y)?;
    Ok(GeneratedInstance {
        config: cfg.clone(),
        data,
        truth: Truth {
            theta_true: cfg.theta_true,
            q,
            z,
            u,
            v,
            coef_m,
            coef_g,
        },
    })
}

pub const PRESETS: [&str; 5] = [
    "figure2-outcome",
    "figure3-positive",
    "figure3-negative",
    "modelsel-none",
    "modelsel-laplace",
];

/// Benchmark configurations: N = 300, d = 100, theta = 1.
pub fn preset(name: &str) -> Result<ScenarioConfig> {
    let kind = match name {
        "figure2-outcome" => ScenarioKind::OutcomeLatent,
        "figure3-positive" | "figure3-negative" => ScenarioKind::Confounder,
        "modelsel-none" => ScenarioKind::NoLatent,
        "modelsel-laplace" => ScenarioKind::LaplaceMisspec,
        _ => {
            return Err(Error::NotFound {
                kind: "preset",
                name: name.to_string(),
                valid: PRESETS.iter().map(|s| s.to_string()).collect(),
            })
        }
    };
    let mut cfg = ScenarioConfig::new(kind);
    cfg.name = name.to_string();
    if name == "figure3-negative" {
        cfg.b = -2.0;
    }
    Ok(cfg)
}

/// Writes `y,d,x1..xd` with a header row. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn write_dataset_csv(data: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let mut header = String::from("y,d");
    for j in 1..=data.n_covariates() {
        header.push_str(&format!(",x{j}"));
    }
    writeln!(w, "{header}").map_err(io)?;
    let mut line = String::new();
    for i in 0..data.len() {
        line.clear();
        line.push_str(&format!("{},{}", data.y[i], data.d[i]));
        for v in data.x.row(i) {
            line.push_str(&format!(",{v}"));
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}
