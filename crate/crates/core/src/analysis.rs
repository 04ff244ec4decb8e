//! Reconstruction error and coefficient covariance analysis.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{frame_block, BasisShapes, MeasurementMatrix, RigidFactor};

/// Relative reprojection error of a reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseSnr {
    /// `100 * |W - W_hat|_F / |W|_F`.
    pub percent: f64,
    /// `|W^i - W_hat^i|_F` per frame.
    pub per_frame: Vec<f64>,
}

/// `M0 B0 + sum_k alpha B_hat`, the full `2I x J` reconstruction.
pub fn reconstruct(rigid: &RigidFactor, shapes: &BasisShapes, alpha: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if shapes.frames() != rigid.frames() || shapes.points() != rigid.points() {
        return Err(Error::Dimension(format!(
            "shapes cover {} frames x {} points, rigid factor {} x {}",
            shapes.frames(),
            shapes.points(),
            rigid.frames(),
            rigid.points()
        )));
    }
    if alpha.nrows() != shapes.frames() || alpha.ncols() != shapes.modes() {
        return Err(Error::Dimension(format!(
            "coefficients are {}x{}, expected {}x{}",
            alpha.nrows(),
            alpha.ncols(),
            shapes.frames(),
            shapes.modes()
        )));
    }
    Ok(rigid.rigid_part() + shapes.reconstruct(alpha))
}

/// Inverse SNR in percent, measured on the centered measurements.
pub fn inverse_snr(
    w: &MeasurementMatrix,
    rigid: &RigidFactor,
    shapes: &BasisShapes,
    alpha: &DMatrix<f64>,
) -> Result<InverseSnr> {
    let fit = reconstruct(rigid, shapes, alpha)?;
    if fit.shape() != w.w().shape() {
        return Err(Error::Dimension(format!(
            "measurements are {}x{}, reconstruction {}x{}",
            w.w().nrows(),
            w.w().ncols(),
            fit.nrows(),
            fit.ncols()
        )));
    }
    inverse_snr_of(w.w(), &fit)
}

/// Inverse SNR between a measurement matrix and any reconstruction of it.
pub fn inverse_snr_of(w: &DMatrix<f64>, fit: &DMatrix<f64>) -> Result<InverseSnr> {
    let norm = w.norm();
    if norm == 0.0 {
        return Err(Error::InvalidInput("measurement matrix has zero norm".into()));
    }
    let res = w - fit;
    let per_frame = (0..w.nrows() / 2).map(|i| frame_block(&res, i).norm()).collect();
    Ok(InverseSnr {
        percent: 100.0 * res.norm() / norm,
        per_frame,
    })
}

/// Unbiased `K x K` covariance of the coefficient columns over frames.
pub fn coefficient_covariance(alpha: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = alpha.nrows();
    if n < 2 {
        return Err(Error::InvalidInput(format!("covariance needs at least 2 frames, got {n}")));
    }
    let mut centered = alpha.clone();
    for mut col in centered.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let mut c = centered.transpose() * &centered / (n - 1) as f64;
    // Symmetrize exactly so downstream consumers see a symmetric matrix.
    for p in 0..c.nrows() {
        for q in p + 1..c.ncols() {
            let v = 0.5 * (c[(p, q)] + c[(q, p)]);
            c[(p, q)] = v;
            c[(q, p)] = v;
        }
    }
    Ok(c)
}

/// `sum_{p,q} |C[perm[p], perm[q]]| * |p - q|`; lower means the mass sits
/// closer to the diagonal.
pub fn seriation_objective(c: &DMatrix<f64>, perm: &[usize]) -> f64 {
    let mut total = 0.0;
    for (p, &a) in perm.iter().enumerate() {
        for (q, &b) in perm.iter().enumerate() {
            total += c[(a, b)].abs() * p.abs_diff(q) as f64;
        }
    }
    total
}

/// Greedy chain seriation of `|C|`.
///
/// Starts from the strongest off-diagonal pair and keeps appending the unused
/// mode most strongly tied to either end. Ties go to the lowest index, and to
/// the right end when both ends score equally. The identity order is returned
/// whenever the chain does not beat it.
pub fn seriate_covariance(c: &DMatrix<f64>) -> Vec<usize> {
    let k = c.nrows();
    let identity: Vec<usize> = (0..k).collect();
    if k <= 2 {
        return identity;
    }
    let mut start = (0, 1);
    let mut best = f64::NEG_INFINITY;
    for p in 0..k {
        for q in p + 1..k {
            let v = c[(p, q)].abs();
            if v > best {
                best = v;
                start = (p, q);
            }
        }
    }
    let mut chain = std::collections::VecDeque::from([start.0, start.1]);
    let mut used = vec![false; k];
    used[start.0] = true;
    used[start.1] = true;
    while chain.len() < k {
        let left = chain[0];
        let right = chain[chain.len() - 1];
        let mut pick = None;
        let mut score = f64::NEG_INFINITY;
        for u in (0..k).filter(|&u| !used[u]) {
            let (r, l) = (c[(u, right)].abs(), c[(u, left)].abs());
            if r > score {
                score = r;
                pick = Some((u, true));
            }
            if l > score {
                score = l;
                pick = Some((u, false));
            }
        }
        let (u, at_right) = pick.expect("an unused mode remains");
        used[u] = true;
        if at_right {
            chain.push_back(u);
        } else {
            chain.push_front(u);
        }
    }
    let chain: Vec<usize> = chain.into();
    if seriation_objective(c, &chain) < seriation_objective(c, &identity) {
        chain
    } else {
        identity
    }
}

/// Largest off-diagonal `|C|` over the largest diagonal entry. Zero for a
/// diagonal matrix, and zero when `C` vanishes.
pub fn uncorrelatedness(c: &DMatrix<f64>) -> f64 {
    let k = c.nrows();
    let diag = (0..k).map(|i| c[(i, i)].abs()).fold(0.0, f64::max);
    let off = (0..k)
        .flat_map(|p| (0..k).filter(move |&q| q != p).map(move |q| (p, q)))
        .map(|(p, q)| c[(p, q)].abs())
        .fold(0.0, f64::max);
    if diag > 0.0 {
        off / diag
    } else {
        0.0
    }
}
