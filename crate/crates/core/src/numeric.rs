//! Numeric kernels: truncated SVD with a fixed sign convention, the
//! Kronecker-product reductions used by the direction solver, and the
//! fixed-point maximizer for sums of generalized Rayleigh quotients.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rank-`r` truncation of a singular value decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedSvd {
    /// Left singular vectors, `m x r`.
    pub u: DMatrix<f64>,
    /// Retained singular values, descending.
    pub s: Vec<f64>,
    /// Right singular vectors, `n x r`.
    pub v: DMatrix<f64>,
    /// Discarded singular values, descending.
    pub tail: Vec<f64>,
    /// Sum of squared discarded singular values.
    pub residual_energy: f64,
}

impl TruncatedSvd {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `U diag(S) V^T`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut us = self.u.clone();
        for (c, &s) in self.s.iter().enumerate() {
            us.column_mut(c).scale_mut(s);
        }
        us * self.v.transpose()
    }

    /// All singular values, retained followed by discarded.
    pub fn spectrum(&self) -> Vec<f64> {
        self.s.iter().chain(self.tail.iter()).copied().collect()
    }
}

fn check_finite(a: &DMatrix<f64>) -> Result<()> {
    if let Some(pos) = a.iter().position(|x| !x.is_finite()) {
        let (r, c) = (pos % a.nrows(), pos / a.nrows());
        return Err(Error::NonFinite(format!("matrix entry ({r}, {c})")));
    }
    Ok(())
}

/// Full thin SVD sorted by descending singular value, with the sign
/// convention applied to every column pair.
fn sorted_svd(a: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let (m, n) = a.shape();
    let p = m.min(n);
    let svd = a.clone().svd(true, true);
    let u = svd.u.expect("u requested");
    let v = svd.v_t.expect("v_t requested").transpose();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&x, &y| {
        svd.singular_values[y]
            .partial_cmp(&svd.singular_values[x])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(x.cmp(&y))
    });
    let mut us = DMatrix::zeros(m, p);
    let mut vs = DMatrix::zeros(n, p);
    let mut s = Vec::with_capacity(p);
    for (dst, &src) in order.iter().enumerate() {
        let mut uc = u.column(src).into_owned();
        let mut vc = v.column(src).into_owned();
        if sign_flip_needed(vc.as_slice()) {
            uc.neg_mut();
            vc.neg_mut();
        }
        us.set_column(dst, &uc);
        vs.set_column(dst, &vc);
        s.push(svd.singular_values[src].max(0.0));
    }
    (us, s, vs)
}

/// True when the entry of largest magnitude (lowest index on ties) is negative.
pub(crate) fn sign_flip_needed(v: &[f64]) -> bool {
    let mut best = 0usize;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    v.get(best).is_some_and(|&x| x < 0.0)
}

/// All singular values of `a`, descending.
pub fn singular_values(a: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_finite(a)?;
    if a.is_empty() {
        return Ok(Vec::new());
    }
    let mut s: Vec<f64> = a
        .clone()
        .svd(false, false)
        .singular_values
        .iter()
        .map(|x| x.max(0.0))
        .collect();
    s.sort_by(|x, y| y.partial_cmp(x).unwrap_or(std::cmp::Ordering::Equal));
    Ok(s)
}

/// Best rank-`rank` approximation of `a`.
///
/// Column signs are fixed so that the largest-magnitude entry of each column
/// of `V` is positive; `U` follows. The result is therefore unique whenever
/// the singular values are distinct.
pub fn truncated_svd(a: &DMatrix<f64>, rank: usize) -> Result<TruncatedSvd> {
    let max = a.nrows().min(a.ncols());
    if rank == 0 || rank > max {
        return Err(Error::RankOutOfRange { rank, min: 1, max });
    }
    check_finite(a)?;
    let (u, s, v) = sorted_svd(a);
    let tail = s[rank..].to_vec();
    let residual_energy = tail.iter().map(|x| x * x).sum();
    Ok(TruncatedSvd {
        u: u.columns(0, rank).into_owned(),
        s: s[..rank].to_vec(),
        v: v.columns(0, rank).into_owned(),
        tail,
        residual_energy,
    })
}

/// `(b ⊗ M)^T (b ⊗ M)` evaluated as `|b|^2 M^T M`.
pub fn kron_gram(b: &DVector<f64>, m: &Matrix2x3<f64>) -> Matrix3<f64> {
    m.transpose() * m * b.norm_squared()
}

/// `(b ⊗ M)^T vec(W)` evaluated as `M^T W b`, for a `2 x J` block `W`.
pub fn kron_transpose_apply(b: &DVector<f64>, m: &Matrix2x3<f64>, w: &DMatrix<f64>) -> Vector3<f64> {
    let wb = w * b;
    m.transpose() * nalgebra::Vector2::new(wb[0], wb[1])
}

/// Maximize `sum_i (d^T g_i)^2 / (d^T H_i d)` over directions `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct RayleighSumProblem {
    g: Vec<Vector3<f64>>,
    h: Vec<Matrix3<f64>>,
}

impl RayleighSumProblem {
    /// Validates that every `H_i` is symmetric and positive semidefinite.
    pub fn new(g: Vec<Vector3<f64>>, h: Vec<Matrix3<f64>>) -> Result<Self> {
        if g.len() != h.len() {
            return Err(Error::Dimension(format!(
                "{} numerator vectors for {} denominator matrices",
                g.len(),
                h.len()
            )));
        }
        for (i, (gi, hi)) in g.iter().zip(&h).enumerate() {
            if gi.iter().chain(hi.iter()).any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("frame {i}")));
            }
            let scale = hi.abs().max().max(f64::MIN_POSITIVE);
            if (hi - hi.transpose()).abs().max() > 1e-12 * scale {
                return Err(Error::InvalidInput(format!("H of frame {i} is not symmetric")));
            }
            let min_eig = SymmetricEigen::new(*hi).eigenvalues.min();
            if min_eig < -1e-10 * hi.trace().abs().max(scale) {
                return Err(Error::InvalidInput(format!(
                    "H of frame {i} is not positive semidefinite (eigenvalue {min_eig:e})"
                )));
            }
        }
        Ok(Self { g, h })
    }

    pub fn frames(&self) -> usize {
        self.g.len()
    }

    pub fn g(&self) -> &[Vector3<f64>] {
        &self.g
    }

    pub fn h(&self) -> &[Matrix3<f64>] {
        &self.h
    }

    fn is_degenerate(&self) -> bool {
        self.g.iter().all(|g| g.iter().all(|&x| x == 0.0))
            || self.h.iter().all(|h| h.trace() <= 0.0)
    }

    /// Objective value below which a direction is treated as a zero of the
    /// objective rather than a stationary point worth converging to.
    fn zero_level(&self) -> f64 {
        let s: f64 = self
            .g
            .iter()
            .zip(&self.h)
            .filter(|(_, h)| h.trace() > 0.0)
            .map(|(g, h)| g.norm_squared() / h.trace())
            .sum();
        1e-14 * s
    }
}

/// Objective value together with the number of frames that were skipped
/// because `d^T H_i d` vanished.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    pub value: f64,
    pub skipped: usize,
}

struct Evaluation {
    value: f64,
    skipped: usize,
    a: Matrix3<f64>,
    b: Matrix3<f64>,
}

const SKIP_RELATIVE: f64 = 1e-14;

fn evaluate(p: &RayleighSumProblem, d: &Vector3<f64>, with_matrices: bool) -> Option<Evaluation> {
    let dn2 = d.norm_squared();
    let mut value = 0.0;
    let mut skipped = 0;
    let mut a = Matrix3::zeros();
    let mut b = Matrix3::zeros();
    for (g, h) in p.g.iter().zip(&p.h) {
        let den = d.dot(&(h * d));
        if den <= SKIP_RELATIVE * h.trace() * dn2 || den <= 0.0 {
            skipped += 1;
            continue;
        }
        let num = d.dot(g);
        value += num * num / den;
        if with_matrices {
            a += g * g.transpose() / den;
            b += h * (num * num / (den * den));
        }
    }
    (skipped < p.frames()).then_some(Evaluation {
        value,
        skipped,
        a,
        b,
    })
}

/// `sum_i (d^T g_i)^2 / (d^T H_i d)`, skipping frames whose denominator is
/// below `1e-14 * trace(H_i) * |d|^2`.
pub fn rayleigh_sum_objective(p: &RayleighSumProblem, d: &Vector3<f64>) -> Result<ObjectiveValue> {
    if d.iter().any(|x| !x.is_finite()) || d.norm_squared() == 0.0 {
        return Err(Error::InvalidInput("direction must be finite and nonzero".into()));
    }
    evaluate(p, d, false)
        .map(|e| ObjectiveValue {
            value: e.value,
            skipped: e.skipped,
        })
        .ok_or(Error::DegenerateDirection)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Tolerance on the stationarity residual `|A(d)d - B(d)d| / f(d)`.
    pub tol: f64,
    pub max_iters: usize,
    pub num_starts: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iters: 200,
            num_starts: 8,
        }
    }
}

/// One restart of the fixed-point iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartOutcome {
    pub start: [f64; 3],
    pub direction: [f64; 3],
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub residual: f64,
    /// Objective after each accepted step, starting with the initial value.
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayleighSolution {
    /// Unit direction; its largest-magnitude component is positive.
    pub direction: Vector3<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Set when every numerator vanishes (or every `H_i` is zero).
    pub degenerate: bool,
    /// Frames skipped at the returned direction.
    pub skipped_frames: usize,
    /// `max - min` of the restart objectives.
    pub restart_spread: f64,
    pub restarts: Vec<RestartOutcome>,
}

impl RayleighSolution {
    pub(crate) fn degenerate() -> Self {
        Self {
            direction: Vector3::x(),
            objective: 0.0,
            iterations: 0,
            converged: true,
            degenerate: true,
            skipped_frames: 0,
            restart_spread: 0.0,
            restarts: Vec::new(),
        }
    }
}

fn canonical_sign(mut d: Vector3<f64>) -> Vector3<f64> {
    if sign_flip_needed(d.as_slice()) {
        d.neg_mut();
    }
    d
}

/// Deterministic starting directions: the axes, their pairwise bisectors,
/// the diagonal, the dominant eigenvector of `sum_i g_i g_i^T`, then points of
/// a golden-angle spiral if more are requested.
fn starts(p: &RayleighSumProblem, n: usize) -> Vec<Vector3<f64>> {
    let s2 = std::f64::consts::FRAC_1_SQRT_2;
    let s3 = 1.0 / 3f64.sqrt();
    let mut out = vec![
        Vector3::new(1.0, 0.0, 0.0),
        Vector3::new(0.0, 1.0, 0.0),
        Vector3::new(0.0, 0.0, 1.0),
        Vector3::new(s2, s2, 0.0),
        Vector3::new(s2, 0.0, s2),
        Vector3::new(0.0, s2, s2),
        Vector3::new(s3, s3, s3),
    ];
    let scatter: Matrix3<f64> = p.g.iter().map(|g| g * g.transpose()).sum();
    out.push(top_eigenvector(&scatter));
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let extra = n.saturating_sub(out.len());
    for t in 0..extra {
        let z = 1.0 - (t as f64 + 0.5) / extra as f64;
        let r = (1.0 - z * z).sqrt();
        let phi = golden * t as f64;
        out.push(Vector3::new(r * phi.cos(), r * phi.sin(), z));
    }
    out.truncate(n.max(1));
    out
}

fn top_eigenvector(m: &Matrix3<f64>) -> Vector3<f64> {
    let eig = SymmetricEigen::new(*m);
    let idx = eig.eigenvalues.imax();
    let v = eig.eigenvectors.column(idx).into_owned();
    if v.norm() > 0.0 {
        canonical_sign(v.normalize())
    } else {
        Vector3::x()
    }
}

/// Top eigenvector of the pencil `A x = lambda B x`.
fn generalized_top(a: &Matrix3<f64>, b: &Matrix3<f64>) -> Vector3<f64> {
    let tr = b.trace();
    if tr <= 0.0 {
        return top_eigenvector(a);
    }
    let breg = b + Matrix3::identity() * (1e-12 * tr);
    let Some(chol) = breg.cholesky() else {
        return top_eigenvector(a);
    };
    let l = chol.l();
    let Some(linv) = l.try_inverse() else {
        return top_eigenvector(a);
    };
    let c = linv * a * linv.transpose();
    let c = (c + c.transpose()) * 0.5;
    let y = top_eigenvector(&c);
    let x = linv.transpose() * y;
    if x.norm() > 0.0 {
        x.normalize()
    } else {
        top_eigenvector(a)
    }
}

/// Relative slack, in ulps of the objective, within which a Newton polish
/// step may be accepted when it reduces the stationarity residual.
const POLISH_ULPS: f64 = 8.0;

fn stationarity_residual(e: &Evaluation, d: &Vector3<f64>) -> f64 {
    (e.a * d - e.b * d).norm() / e.value
}

/// Riemannian Newton step on the unit sphere, or `None` unless the tangent
/// Hessian is negative definite (i.e. `d` sits in the basin of a maximum).
fn newton_step(p: &RayleighSumProblem, d: &Vector3<f64>, e: &Evaluation) -> Option<Vector3<f64>> {
    let mut hess = Matrix3::zeros();
    let dn2 = d.norm_squared();
    for (g, h) in p.g.iter().zip(&p.h) {
        let den = d.dot(&(h * d));
        if den <= SKIP_RELATIVE * h.trace() * dn2 || den <= 0.0 {
            continue;
        }
        let num = d.dot(g);
        let hd = h * d;
        hess += g * g.transpose() * (2.0 / den)
            - (g * hd.transpose() + hd * g.transpose()) * (4.0 * num / (den * den))
            + hd * hd.transpose() * (8.0 * num * num / (den * den * den))
            - h * (2.0 * num * num / (den * den));
    }
    let grad = (e.a * d - e.b * d) * 2.0;
    let helper = if d[0].abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let t1 = (helper - d * d.dot(&helper)).normalize();
    let t2 = d.cross(&t1);
    let h11 = t1.dot(&(hess * t1));
    let h12 = t1.dot(&(hess * t2));
    let h22 = t2.dot(&(hess * t2));
    let det = h11 * h22 - h12 * h12;
    if !(h11 < 0.0 && det > 0.0) {
        return None;
    }
    let g1 = t1.dot(&grad);
    let g2 = t2.dot(&grad);
    let y1 = -(h22 * g1 - h12 * g2) / det;
    let y2 = -(-h12 * g1 + h11 * g2) / det;
    let x = d + t1 * y1 + t2 * y2;
    x.iter().all(|v| v.is_finite()).then(|| x.normalize())
}

fn run_restart(p: &RayleighSumProblem, start: Vector3<f64>, cfg: &SolverConfig) -> Option<RestartOutcome> {
    let zero_level = p.zero_level();
    let mut d = start.normalize();
    let mut cur = evaluate(p, &d, true)?;
    let mut history = vec![cur.value];
    let mut converged = false;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;

    while iterations < cfg.max_iters {
        let at_zero = cur.value <= zero_level;
        if !at_zero {
            residual = stationarity_residual(&cur, &d);
            if residual < cfg.tol {
                converged = true;
                break;
            }
        }
        iterations += 1;

        let mut next = None;

        // Polish: near a maximum the objective is flat to rounding, so the
        // Newton step is accepted on residual decrease within a few ulps.
        if !at_zero {
            if let Some(x) = newton_step(p, &d, &cur) {
                if let Some(e) = evaluate(p, &x, true) {
                    let floor = cur.value - POLISH_ULPS * f64::EPSILON * cur.value;
                    if e.value > cur.value
                        || (e.value >= floor && stationarity_residual(&e, &x) < residual)
                    {
                        next = Some((x, e));
                    }
                }
            }
        }

        if next.is_none() {
            let mut cand = if at_zero {
                top_eigenvector(&cur.a)
            } else {
                generalized_top(&cur.a, &cur.b)
            };
            if cand.dot(&d) < 0.0 {
                cand.neg_mut();
            }
            let mut t = 1.0;
            for _ in 0..11 {
                let x = d + (cand - d) * t;
                if x.norm() > 0.0 {
                    let x = x.normalize();
                    if let Some(e) = evaluate(p, &x, true) {
                        if e.value >= cur.value && x != d {
                            next = Some((x, e));
                            break;
                        }
                    }
                }
                t *= 0.5;
            }
        }

        if next.is_none() && !at_zero {
            // Damped eigen steps failed: backtrack along the gradient.
            let grad = (cur.a * d - cur.b * d) / cur.value;
            let mut s = 1.0;
            for _ in 0..40 {
                let x = (d + grad * s).normalize();
                if let Some(e) = evaluate(p, &x, true) {
                    if e.value > cur.value {
                        next = Some((x, e));
                        break;
                    }
                }
                s *= 0.5;
            }
        }

        match next {
            Some((x, e)) => {
                d = x;
                cur = e;
                history.push(cur.value);
            }
            None => break,
        }
    }
    if !converged && cur.value > zero_level {
        residual = stationarity_residual(&cur, &d);
        converged = residual < cfg.tol;
    }

    Some(RestartOutcome {
        start: [start[0], start[1], start[2]],
        direction: [d[0], d[1], d[2]],
        objective: cur.value,
        iterations,
        converged,
        residual,
        history,
    })
}

/// Maximizes the Rayleigh-quotient sum by a damped self-consistent
/// generalized-eigenvector iteration from `cfg.num_starts` deterministic
/// starts, returning the best restart.
pub fn maximize_rayleigh_sum(p: &RayleighSumProblem, cfg: &SolverConfig) -> RayleighSolution {
    if p.frames() == 0 || p.is_degenerate() {
        return RayleighSolution::degenerate();
    }
    let restarts: Vec<RestartOutcome> = starts(p, cfg.num_starts)
        .into_iter()
        .filter_map(|s| run_restart(p, s, cfg))
        .collect();
    let Some(best) = restarts.iter().enumerate().fold(None, |acc: Option<(usize, f64)>, (i, r)| {
        match acc {
            Some((_, v)) if v >= r.objective => acc,
            _ => Some((i, r.objective)),
        }
    }) else {
        // Every start landed on a direction all frames annihilate.
        return RayleighSolution::degenerate();
    };
    let best = &restarts[best.0];
    let lo = restarts.iter().map(|r| r.objective).fold(f64::INFINITY, f64::min);
    let direction = canonical_sign(Vector3::from_column_slice(&best.direction));
    let skipped = evaluate(p, &direction, false).map_or(p.frames(), |e| e.skipped);
    RayleighSolution {
        direction,
        objective: best.objective,
        iterations: best.iterations,
        converged: best.converged,
        degenerate: false,
        skipped_frames: skipped,
        restart_spread: best.objective - lo,
        restarts,
    }
}
