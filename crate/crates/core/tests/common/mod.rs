//! Test oracles. The quadrature, elimination and search routines are
//! written independently of the crate's numerical kernels.
#![allow(dead_code)]

use std::f64::consts::PI;

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
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn kronrod<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
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

/// Adaptive Gauss-Kronrod (7/15) quadrature of `f` over `[a, b]`, with the
/// interval pre-split at `breaks`. Bisects the worst interval until the
/// summed error estimate falls below `rel` times the current value.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, breaks: &[f64], rel: f64) -> f64 {
    let mut pts = vec![a];
    pts.extend(breaks.iter().copied().filter(|&x| x > a && x < b));
    pts.push(b);
    pts.sort_by(f64::total_cmp);
    let mut parts: Vec<(f64, f64, f64, f64)> = pts
        .windows(2)
        .map(|w| {
            let (v, e) = kronrod(&f, w[0], w[1]);
            (w[0], w[1], v, e)
        })
        .collect();
    for _ in 0..5000 {
        let total: f64 = parts.iter().map(|p| p.2).sum();
        let err: f64 = parts.iter().map(|p| p.3).sum();
        if err <= rel * total.abs() || err <= 1e3 * f64::EPSILON * total.abs() {
            break;
        }
        let worst = (0..parts.len())
            .max_by(|&i, &j| parts[i].3.total_cmp(&parts[j].3))
            .unwrap();
        let (lo, hi, _, _) = parts.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        for (l, h) in [(lo, mid), (mid, hi)] {
            let (v, e) = kronrod(&f, l, h);
            parts.push((l, h, v, e));
        }
    }
    // Sum in a fixed order so the result does not depend on split history.
    parts.sort_by(|x, y| x.0.total_cmp(&y.0));
    parts.iter().map(|p| p.2).sum()
}

pub fn normal_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    (-0.5 * z * z).exp() / (sd * (2.0 * PI).sqrt())
}

/// `(E[X], E[X^2])` for `X ~ N(m, sigma^2)` restricted to `[0, inf)`, by
/// direct quadrature of the truncated density.
pub fn truncated_moments_quad(m: f64, sigma: f64) -> (f64, f64) {
    let mode = m.max(0.0);
    // Scale out the peak so tails far from zero do not underflow.
    let w = |x: f64| {
        let d = x - m;
        let d0 = mode - m;
        (-(d * d - d0 * d0) / (2.0 * sigma * sigma)).exp()
    };
    let hi = mode + 40.0 * sigma;
    let width = if m < 0.0 { sigma * sigma / -m } else { sigma };
    let breaks: Vec<f64> = (1..8).map(|k| mode + width * k as f64).collect();
    let i0 = integrate(w, 0.0, hi, &breaks, 1e-14);
    let i1 = integrate(|x| x * w(x), 0.0, hi, &breaks, 1e-14);
    let i2 = integrate(|x| x * x * w(x), 0.0, hi, &breaks, 1e-14);
    (i1 / i0, i2 / i0)
}

/// Log density of `S + G`, `S ~ Exp(rate)`, `G ~ N(mu, sigma^2)`, from the
/// convolution integral over `S`.
pub fn emg_log_density_quad(x: f64, mu: f64, sigma: f64, rate: f64) -> f64 {
    let g = |s: f64| {
        let d = x - mu - s;
        rate.ln() - rate * s - d * d / (2.0 * sigma * sigma) - (sigma * (2.0 * PI).sqrt()).ln()
    };
    let peak = (x - mu - rate * sigma * sigma).max(0.0);
    let top = g(peak);
    let width = sigma.min(1.0 / rate);
    let hi = peak + 40.0 * sigma + 40.0 / rate;
    let breaks: Vec<f64> = (-8..=8).map(|k| peak + width * k as f64).collect();
    top + integrate(|s| (g(s) - top).exp(), 0.0, hi, &breaks, 1e-14).ln()
}

/// Solves a dense linear system by Gaussian elimination with partial
/// pivoting.
pub fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Maximizes `f` on `[lo, hi]` by golden-section search, assuming
/// unimodality.
pub fn golden_max<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, iters: usize) -> f64 {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..iters {
        let a = hi - g * (hi - lo);
        let b = lo + g * (hi - lo);
        if f(a) >= f(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    0.5 * (lo + hi)
}

/// Minimal xorshift generator so fixtures do not depend on the crate's
/// streams.
pub struct XorShift(pub u64);

impl XorShift {
    pub fn next_f64(&mut self) -> f64 {
        self.0 ^= self.0 << 13;
        self.0 ^= self.0 >> 7;
        self.0 ^= self.0 << 17;
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64().max(1e-300);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
    }
}

/// Mean change of the orthogonal moment when the true nuisances are pushed
/// along smooth random directions by `s`: returns `Delta(s)` for each `s`,
/// averaged over `draws` directions.
pub fn perturbed_moment_changes(
    inst: &latent_dml_core::synthetic::GeneratedInstance,
    steps: &[f64],
    draws: usize,
    seed: u64,
) -> Vec<f64> {
    use latent_dml_core::dml::{orthogonal_moment, ResidualSet};
    let data = &inst.data;
    let theta = inst.truth.theta_true;
    let h0 = inst.h_true();
    let m0 = inst.m_true();
    let n = data.len();
    let d = data.n_covariates().min(5);
    let mut rng = XorShift(seed);
    let mut acc = vec![0.0; steps.len()];
    for _ in 0..draws {
        let ch: Vec<f64> = (0..=d).map(|_| rng.normal()).collect();
        let cm: Vec<f64> = (0..=d).map(|_| rng.normal()).collect();
        let xi = |c: &[f64], i: usize| c[0] + (0..d).map(|j| c[j + 1] * data.x[[i, j]].sin()).sum::<f64>();
        let xi_h: Vec<f64> = (0..n).map(|i| xi(&ch, i)).collect();
        let xi_m: Vec<f64> = (0..n).map(|i| xi(&cm, i)).collect();
        let at = |s: f64| {
            let r: Vec<f64> = (0..n).map(|i| data.y[i] - h0[i] - s * xi_h[i]).collect();
            let v: Vec<f64> = (0..n).map(|i| data.d[i] - m0[i] - s * xi_m[i]).collect();
            orthogonal_moment(&ResidualSet::new(r, v).unwrap(), theta)
        };
        let base = at(0.0);
        for (k, &s) in steps.iter().enumerate() {
            acc[k] += at(s) - base;
        }
    }
    acc.iter().map(|a| a / draws as f64).collect()
}
