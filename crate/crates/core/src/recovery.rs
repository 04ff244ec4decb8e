//! Back-projection directions, rank-1 basis shapes and their coefficients.

use nalgebra::{DMatrix, DVector, Vector2};

use crate::error::{Error, Result};
use crate::model::{frame_block, BasisShapes, CoefficientMatrix, RigidFactor};
use crate::numeric::{
    kron_gram, kron_transpose_apply, maximize_rayleigh_sum, RayleighSolution, RayleighSumProblem,
    SolverConfig,
};

fn check_shapes(delta: &DMatrix<f64>, rigid: &RigidFactor, rows: &DMatrix<f64>) -> Result<()> {
    if delta.nrows() != 2 * rigid.frames() || delta.ncols() != rigid.points() {
        return Err(Error::Dimension(format!(
            "residual is {}x{}, rigid factor expects {}x{}",
            delta.nrows(),
            delta.ncols(),
            2 * rigid.frames(),
            rigid.points()
        )));
    }
    if rows.ncols() != rigid.points() {
        return Err(Error::Dimension(format!(
            "mode rows have {} columns, expected {}",
            rows.ncols(),
            rigid.points()
        )));
    }
    Ok(())
}

/// The per-frame problem whose maximizer is the direction of one mode row.
pub fn direction_problem(delta: &DMatrix<f64>, rigid: &RigidFactor, b: &DVector<f64>) -> Result<RayleighSumProblem> {
    let frames = rigid.frames();
    let mut g = Vec::with_capacity(frames);
    let mut h = Vec::with_capacity(frames);
    for i in 0..frames {
        let m = rigid.camera(i);
        g.push(kron_transpose_apply(b, &m, &frame_block(delta, i)));
        h.push(kron_gram(b, &m));
    }
    RayleighSumProblem::new(g, h)
}

/// Solves each mode's direction independently. Zero rows, or rows that carry
/// no residual energy, come back flagged as degenerate.
pub fn solve_directions(
    delta: &DMatrix<f64>,
    rigid: &RigidFactor,
    rows: &DMatrix<f64>,
    cfg: &SolverConfig,
) -> Result<Vec<RayleighSolution>> {
    check_shapes(delta, rigid, rows)?;
    let mut out = Vec::with_capacity(rows.nrows());
    for k in 0..rows.nrows() {
        let b = rows.row(k).transpose();
        if b.norm() == 0.0 {
            out.push(RayleighSolution::degenerate());
            continue;
        }
        let problem = direction_problem(delta, rigid, &b)?;
        out.push(maximize_rayleigh_sum(&problem, cfg));
    }
    Ok(out)
}

/// Builds the operators `M^i d_k b_k^T`. Degenerate directions give zero
/// operators for every frame.
pub fn form_basis_shapes(rigid: &RigidFactor, rows: &DMatrix<f64>, directions: &[RayleighSolution]) -> Result<BasisShapes> {
    if directions.len() != rows.nrows() {
        return Err(Error::Dimension(format!(
            "{} directions for {} mode rows",
            directions.len(),
            rows.nrows()
        )));
    }
    if rows.ncols() != rigid.points() {
        return Err(Error::Dimension(format!(
            "mode rows have {} columns, expected {}",
            rows.ncols(),
            rigid.points()
        )));
    }
    let k = rows.nrows();
    let mut dirs = Vec::with_capacity(rigid.frames() * k);
    for i in 0..rigid.frames() {
        let m = rigid.camera(i);
        for sol in directions {
            if sol.degenerate {
                dirs.push(Vector2::zeros());
            } else {
                dirs.push(m * sol.direction);
            }
        }
    }
    Ok(BasisShapes::new(rows.clone(), dirs))
}

/// `alpha[i, k] = <dW^i, B_hat_k^i>`; zero operators get a zero coefficient.
///
/// Covariance and permutation are left empty.
pub fn project_coefficients(delta: &DMatrix<f64>, shapes: &BasisShapes) -> Result<CoefficientMatrix> {
    if delta.nrows() != 2 * shapes.frames() || delta.ncols() != shapes.points() {
        return Err(Error::Dimension(format!(
            "residual is {}x{}, shapes expect {}x{}",
            delta.nrows(),
            delta.ncols(),
            2 * shapes.frames(),
            shapes.points()
        )));
    }
    let k = shapes.modes();
    let mut alpha = DMatrix::zeros(shapes.frames(), k);
    for i in 0..shapes.frames() {
        for m in 0..k {
            if let Some((u, b)) = shapes.unit_factors(i, m) {
                let proj = delta.row(2 * i).dot(&b.transpose()) * u[0] + delta.row(2 * i + 1).dot(&b.transpose()) * u[1];
                alpha[(i, m)] = proj;
            }
        }
    }
    Ok(CoefficientMatrix {
        alpha,
        cov: DMatrix::zeros(k, k),
        permutation: (0..k).collect(),
    })
}
