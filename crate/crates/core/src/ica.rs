//! Orthogonal separation of the mode rows by symmetric FastICA.
//!
//! Samples are the `J` columns of the `K x J` input; each row is one signal.
//! The returned `G` is orthogonal, so `G * B'` keeps the rows white and
//! mutually orthogonal.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::sign_flip_needed;

/// `E[log cosh(x)]` for a standard normal `x`.
const GAUSSIAN_LOGCOSH: f64 = 0.374_567_207_491_438;
/// `E[x^4 / 4]` for a standard normal `x`.
const GAUSSIAN_QUARTIC: f64 = 0.75;
/// Whiteness error beyond which centered rows are re-whitened internally.
const WHITENESS_SLACK: f64 = 1e-3;
/// Rows whose contrast deviates from the Gaussian value by fewer standard
/// errors than this are treated as indistinguishable from Gaussian noise.
pub const IDENTIFIABILITY_Z: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Contrast {
    /// `G(u) = log cosh u`, `g(u) = tanh u`.
    LogCosh,
    /// `G(u) = u^4 / 4`, `g(u) = u^3`.
    Cubic,
}

impl Contrast {
    fn value(self, u: f64) -> f64 {
        match self {
            Contrast::LogCosh => {
                let a = u.abs();
                a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
            }
            Contrast::Cubic => 0.25 * u.powi(4),
        }
    }

    fn gaussian_value(self) -> f64 {
        match self {
            Contrast::LogCosh => GAUSSIAN_LOGCOSH,
            Contrast::Cubic => GAUSSIAN_QUARTIC,
        }
    }

    /// `(g(u), g'(u))`.
    fn derivatives(self, u: f64) -> (f64, f64) {
        match self {
            Contrast::LogCosh => {
                let t = u.tanh();
                (t, 1.0 - t * t)
            }
            Contrast::Cubic => (u * u * u, 3.0 * u * u),
        }
    }
}

impl fmt::Display for Contrast {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Contrast::LogCosh => "logcosh",
            Contrast::Cubic => "cubic",
        })
    }
}

impl FromStr for Contrast {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "logcosh" => Ok(Contrast::LogCosh),
            "cubic" => Ok(Contrast::Cubic),
            other => Err(format!("unknown contrast '{other}', expected logcosh or cubic")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcaConfig {
    pub contrast: Contrast,
    pub tol: f64,
    pub max_iters: usize,
    /// Subtract the per-row mean before separating.
    pub centering: bool,
}

impl Default for IcaConfig {
    fn default() -> Self {
        Self {
            contrast: Contrast::LogCosh,
            tol: 1e-8,
            max_iters: 1000,
            centering: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcaDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    /// `1 - min |diag(G_t G_{t-1}^T)|` at the last iteration.
    pub final_change: f64,
    /// False when every initial source looks Gaussian; `G = I` is returned.
    pub identifiable: bool,
    /// Largest contrast z-score over the initial sources.
    pub identifiability_score: f64,
    /// `max |(1/J) X X^T - I|` of the (centered) input.
    pub whiteness_error: f64,
    pub rewhitened: bool,
    /// `|U - polar(U)|_F` of the unmixing matrix when re-whitening was needed.
    pub polar_residual: f64,
}

/// `(A A^T)^{-1/2} A`.
fn symmetric_decorrelation(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(inverse_sqrt(&(a * a.transpose()))? * a)
}

fn inverse_sqrt(c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(c.clone());
    let max = eig.eigenvalues.max().max(0.0);
    if eig.eigenvalues.iter().any(|&l| l <= 1e-12 * max) || max == 0.0 {
        return Err(Error::InvalidInput("rows are linearly dependent".into()));
    }
    let scale = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|l| 1.0 / l.sqrt()));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&scale) * eig.eigenvectors.transpose())
}

fn polar_factor(a: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = a.clone().svd(true, true);
    svd.u.expect("u requested") * svd.v_t.expect("v_t requested")
}

/// Initial unmixing matrix: `I` with `0.01 * sin(p + 2q)` added to entry
/// `(p, q)` (0-based), then orthogonalized.
pub fn initial_unmixing(k: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(k, k, |p, q| {
        let base = if p == q { 1.0 } else { 0.0 };
        base + 0.01 * ((p + 2 * q) as f64).sin()
    });
    symmetric_decorrelation(&a).expect("perturbed identity is nonsingular")
}

/// Largest contrast z-score over the rows of `y`.
/// Largest per-row z-statistic of `mean G(y) - E[G(gaussian)]`.
///
/// The standard error uses the residual of `G(y)` after regressing out
/// `y^2 - 1`, since whitening pins the sample variance and removes that
/// share of the spread.
fn identifiability_score(y: &DMatrix<f64>, contrast: Contrast) -> f64 {
    let j = y.ncols() as f64;
    let e0 = contrast.gaussian_value();
    y.row_iter()
        .map(|row| {
            let vals: Vec<f64> = row.iter().map(|&u| contrast.value(u)).collect();
            let q: Vec<f64> = row.iter().map(|&u| u * u - 1.0).collect();
            let mean = vals.iter().sum::<f64>() / j;
            let qm = q.iter().sum::<f64>() / j;
            let sqq: f64 = q.iter().map(|v| (v - qm).powi(2)).sum();
            let svq: f64 = vals.iter().zip(&q).map(|(v, w)| (v - mean) * (w - qm)).sum();
            let beta = if sqq > 0.0 { svq / sqq } else { 0.0 };
            let var = vals
                .iter()
                .zip(&q)
                .map(|(v, w)| (v - mean - beta * (w - qm)).powi(2))
                .sum::<f64>()
                / (j - 2.0).max(1.0);
            let se = (var / j).sqrt();
            if se > 0.0 {
                (mean - e0).abs() / se
            } else if (mean - e0).abs() > 0.0 {
                f64::MAX
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max)
}

/// Critical value for [`identifiability_score`] with `j` samples. Short
/// sequences have heavy-tailed scores, so the bar rises as `j` shrinks.
pub fn identifiability_threshold(j: usize) -> f64 {
    IDENTIFIABILITY_Z + 64.0 / j.max(1) as f64
}

fn canonical_row_signs(mut g: DMatrix<f64>) -> DMatrix<f64> {
    for r in 0..g.nrows() {
        let row: Vec<f64> = g.row(r).iter().copied().collect();
        if sign_flip_needed(&row) {
            g.row_mut(r).neg_mut();
        }
    }
    g
}

/// Finds the orthogonal `G` making the rows of `G * B'` as independent as
/// the contrast allows.
pub fn fastica_orthogonal(b: &DMatrix<f64>, cfg: &IcaConfig) -> Result<(DMatrix<f64>, IcaDiagnostics)> {
    let k = b.nrows();
    let j = b.ncols();
    if k == 0 {
        return Err(Error::InvalidInput("ICA needs at least one row".into()));
    }
    if j < 2 {
        return Err(Error::InvalidInput("ICA needs at least two samples".into()));
    }
    if !(cfg.tol > 0.0) {
        return Err(Error::InvalidInput(format!("ICA tolerance must be positive, got {}", cfg.tol)));
    }
    if b.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("ICA input".into()));
    }
    let jf = j as f64;

    let mut x = b.clone();
    if cfg.centering {
        for mut row in x.row_iter_mut() {
            let mean = row.mean();
            row.add_scalar_mut(-mean);
        }
    }
    let cov = &x * x.transpose() / jf;
    let whiteness_error = (&cov - DMatrix::<f64>::identity(k, k)).abs().max();
    let rewhitened = whiteness_error > WHITENESS_SLACK;
    let whitening = if rewhitened {
        inverse_sqrt(&cov)?
    } else {
        DMatrix::identity(k, k)
    };
    let z = &whitening * &x;

    let mut diag = IcaDiagnostics {
        iterations: 0,
        converged: true,
        final_change: 0.0,
        identifiable: true,
        identifiability_score: 0.0,
        whiteness_error,
        rewhitened,
        polar_residual: 0.0,
    };

    if k == 1 {
        return Ok((DMatrix::identity(1, 1), diag));
    }

    let mut w = initial_unmixing(k);
    diag.identifiability_score = identifiability_score(&(&w * &z), cfg.contrast);
    if diag.identifiability_score < identifiability_threshold(j) {
        diag.identifiable = false;
        return Ok((DMatrix::identity(k, k), diag));
    }

    diag.converged = false;
    for it in 1..=cfg.max_iters {
        let y = &w * &z;
        let mut gy = DMatrix::zeros(k, j);
        let mut mean_dg = vec![0.0; k];
        for r in 0..k {
            for c in 0..j {
                let (g, dg) = cfg.contrast.derivatives(y[(r, c)]);
                gy[(r, c)] = g;
                mean_dg[r] += dg;
            }
            mean_dg[r] /= jf;
        }
        let mut next = &gy * z.transpose() / jf;
        for r in 0..k {
            for c in 0..k {
                next[(r, c)] -= mean_dg[r] * w[(r, c)];
            }
        }
        let next = symmetric_decorrelation(&next)?;
        let overlap = &next * w.transpose();
        let change = 1.0 - (0..k).map(|i| overlap[(i, i)].abs()).fold(f64::INFINITY, f64::min);
        w = next;
        diag.iterations = it;
        diag.final_change = change;
        if change < cfg.tol {
            diag.converged = true;
            break;
        }
    }

    let unmixing = &w * &whitening;
    let g = if rewhitened {
        let g = polar_factor(&unmixing);
        diag.polar_residual = (&unmixing - &g).norm();
        g
    } else {
        w
    };
    Ok((canonical_row_signs(g), diag))
}
