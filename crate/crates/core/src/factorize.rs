//! Measurement assembly and the rigid / non-rigid split of `W`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{check_factor_dims, DeformationModel, MeasurementMatrix, RigidFactor, TrackTable, Variant};
use crate::numeric::truncated_svd;

/// Singular-value ratio below which the rigid scene is reported as planar.
pub const PLANAR_RATIO: f64 = 1e-8;

/// Subtracts the per-frame centroid from every observation and stacks the
/// result frame-major.
pub fn assemble_measurements(tracks: &TrackTable) -> Result<MeasurementMatrix> {
    let (frames, points) = (tracks.frames(), tracks.points());
    let mut w = DMatrix::zeros(2 * frames, points);
    let mut translations = Vec::with_capacity(frames);
    for i in 0..frames {
        let mut t = [0.0; 2];
        for j in 0..points {
            let c = tracks.get(i, j);
            if !c[0].is_finite() || !c[1].is_finite() {
                return Err(Error::NonFinite(format!("frame {i}, point {j}")));
            }
            t[0] += c[0];
            t[1] += c[1];
        }
        t[0] /= points as f64;
        t[1] /= points as f64;
        for j in 0..points {
            let c = tracks.get(i, j);
            w[(2 * i, j)] = c[0] - t[0];
            w[(2 * i + 1, j)] = c[1] - t[1];
        }
        translations.push(t);
    }
    Ok(MeasurementMatrix::from_parts(w, translations))
}

/// Rank-3 affine factorization `M0 = U0 S0 / sqrt(J)`, `B0 = sqrt(J) V0^T`.
pub fn rigid_factor(w: &MeasurementMatrix) -> Result<RigidFactor> {
    check_factor_dims(w.frames(), w.points())?;
    let svd = truncated_svd(w.w(), 3)?;
    if svd.s[0] == 0.0 {
        return Err(Error::InvalidInput("measurement matrix is identically zero".into()));
    }
    let sqrt_j = (w.points() as f64).sqrt();
    let mut m0 = svd.u.clone();
    for c in 0..3 {
        m0.column_mut(c).scale_mut(svd.s[c] / sqrt_j);
    }
    let b0 = svd.v.transpose() * sqrt_j;
    Ok(RigidFactor {
        m0,
        b0,
        sigma0: [svd.s[0], svd.s[1], svd.s[2]],
        sigma_rest: svd.tail,
    })
}

/// `dW = W - M0 B0`.
pub fn nonrigid_residual(w: &MeasurementMatrix, rigid: &RigidFactor) -> Result<DMatrix<f64>> {
    if rigid.m0.nrows() != w.w().nrows() || rigid.b0.ncols() != w.w().ncols() {
        return Err(Error::Dimension(format!(
            "rigid factor is {}x{} but W is {}x{}",
            rigid.m0.nrows(),
            rigid.b0.ncols(),
            w.w().nrows(),
            w.w().ncols()
        )));
    }
    Ok(w.w() - rigid.rigid_part())
}

/// Largest admissible mode count, `min(2I, J) - 3`.
pub fn max_modes(frames: usize, points: usize) -> usize {
    (2 * frames).min(points).saturating_sub(3)
}

/// Checks `1 <= k <= min(2I, J) - 3`.
pub fn check_mode_count(k: usize, frames: usize, points: usize) -> Result<()> {
    let max = max_modes(frames, points);
    if k == 0 || k > max {
        return Err(Error::RankOutOfRange { rank: k, min: 1, max });
    }
    Ok(())
}

/// Rank-`k` factorization `dW ~ M' B'` of the non-rigid residual (PCA
/// variant, `G = I`). Only exactly-zero singular values are treated as
/// inactive modes; see [`nonrigid_factor_with_floor`].
pub fn nonrigid_factor(delta: &DMatrix<f64>, k: usize) -> Result<DeformationModel> {
    nonrigid_factor_with_floor(delta, k, 0.0)
}

/// Like [`nonrigid_factor`], but modes whose singular value is at or below
/// `floor` are inactive: their row of `B'` and column of `M'` are zeroed.
pub fn nonrigid_factor_with_floor(delta: &DMatrix<f64>, k: usize, floor: f64) -> Result<DeformationModel> {
    if !delta.nrows().is_multiple_of(2) {
        return Err(Error::Dimension(format!(
            "residual needs an even row count, got {}",
            delta.nrows()
        )));
    }
    check_mode_count(k, delta.nrows() / 2, delta.ncols())?;
    let svd = truncated_svd(delta, k)?;
    let sqrt_j = (delta.ncols() as f64).sqrt();
    let active: Vec<bool> = svd.s.iter().map(|&s| s > floor).collect();
    let mut mprime = svd.u.clone();
    let mut modes = svd.v.transpose() * sqrt_j;
    for (c, &on) in active.iter().enumerate() {
        if on {
            mprime.column_mut(c).scale_mut(svd.s[c] / sqrt_j);
        } else {
            mprime.column_mut(c).fill(0.0);
            modes.row_mut(c).fill(0.0);
        }
    }
    Ok(DeformationModel {
        variant: Variant::Pca,
        separation: DMatrix::identity(k, k),
        modes,
        mprime,
        singular_values: svd.s,
        active,
        directions: Vec::new(),
    })
}

/// Smallest `K` whose discarded spectrum carries less than 1% of `|dW|^2`.
/// Advisory only; the pipeline never applies it on its own.
pub fn suggest_k(spectrum: &[f64]) -> usize {
    let total: f64 = spectrum.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return 0;
    }
    let mut tail = total;
    for (k, s) in spectrum.iter().enumerate() {
        if tail < 0.01 * total {
            return k;
        }
        tail -= s * s;
    }
    spectrum.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::singular_values;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, m: usize, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0))
    }

    fn centered(m: DMatrix<f64>) -> MeasurementMatrix {
        let t = TrackTable::from_matrix(&m).unwrap();
        assemble_measurements(&t).unwrap()
    }

    #[test]
    fn two_point_centroid() {
        let t = TrackTable::new(1, 2, vec![[0.0, 0.0], [2.0, 2.0]]).unwrap();
        let w = assemble_measurements(&t).unwrap();
        assert_eq!(w.translations(), &[[1.0, 1.0]]);
        assert_eq!(w.w(), &DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, -1.0, 1.0]));
    }

    #[test]
    fn zero_mean_frame_is_unchanged() {
        let t = TrackTable::new(1, 3, vec![[1.0, -2.0], [-1.0, 0.0], [0.0, 2.0]]).unwrap();
        let w = assemble_measurements(&t).unwrap();
        assert_eq!(w.translations(), &[[0.0, 0.0]]);
        assert_eq!(w.w(), &t.to_matrix());
    }

    #[test]
    fn matches_direct_mean_oracle_and_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let raw = random(&mut rng, 6, 4) * 50.0;
        let t = TrackTable::from_matrix(&raw).unwrap();
        let w = assemble_measurements(&t).unwrap();
        for r in 0..6 {
            let mean = raw.row(r).iter().sum::<f64>() / 4.0;
            assert!((w.translations()[r / 2][r % 2] - mean).abs() < 1e-12);
            for j in 0..4 {
                assert!((w.w()[(r, j)] - (raw[(r, j)] - mean)).abs() < 1e-12);
            }
            let sum: f64 = w.w().row(r).iter().sum();
            assert!(sum.abs() <= 1e-9 * 4.0 * w.w().abs().max());
        }
        let back = w.to_tracks();
        for (a, b) in back.coords().iter().zip(t.coords()) {
            assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_rank_three_is_reproduced() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random(&mut rng, 10, 3);
        let mut b = random(&mut rng, 3, 8);
        for mut row in b.row_iter_mut() {
            let mean = row.mean();
            row.add_scalar_mut(-mean);
        }
        let w = MeasurementMatrix::from_parts(&m * &b, vec![[0.0, 0.0]; 5]);
        let rigid = rigid_factor(&w).unwrap();
        assert!((w.w() - rigid.rigid_part()).norm() < 1e-9 * w.w().norm());
        let delta = nonrigid_residual(&w, &rigid).unwrap();
        assert!(delta.abs().max() < 1e-9 * w.w().abs().max());
        let gram = &rigid.b0 * rigid.b0.transpose() / 8.0;
        assert!((gram - DMatrix::<f64>::identity(3, 3)).abs().max() < 1e-12);
    }

    #[test]
    fn shark_sized_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = centered(random(&mut rng, 480, 91));
        let rigid = rigid_factor(&w).unwrap();
        assert_eq!(rigid.m0.shape(), (480, 3));
        assert_eq!(rigid.b0.shape(), (3, 91));
        assert_eq!(rigid.sigma_rest.len(), 88);
    }

    #[test]
    fn rigid_residual_matches_spectrum_tail() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = centered(random(&mut rng, 8, 7));
        let rigid = rigid_factor(&w).unwrap();
        let delta = nonrigid_residual(&w, &rigid).unwrap();
        let s = singular_values(w.w()).unwrap();
        let tail: f64 = s[3..].iter().map(|x| x * x).sum();
        assert!((delta.norm_squared() - tail).abs() <= 1e-9 * tail);
        let rest: f64 = rigid.sigma_rest.iter().map(|x| x * x).sum();
        assert!((rest - tail).abs() <= 1e-9 * tail);
        let back = rigid.rigid_part() + &delta;
        let scale = w.w().amax();
        assert!((w.w() - back).amax() <= 4.0 * f64::EPSILON * scale);
    }

    #[test]
    fn rank_one_perturbation_norm_is_fourth_singular_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = random(&mut rng, 12, 3) * random(&mut rng, 3, 9);
        let pert = random(&mut rng, 12, 1) * random(&mut rng, 1, 9) * 0.1;
        let w = MeasurementMatrix::from_parts(base + pert, vec![[0.0, 0.0]; 6]);
        let rigid = rigid_factor(&w).unwrap();
        let delta = nonrigid_residual(&w, &rigid).unwrap();
        let s = singular_values(w.w()).unwrap();
        assert!((delta.norm() - s[3]).abs() <= 1e-9 * s[3]);
    }

    #[test]
    fn rejects_small_tables() {
        let w = MeasurementMatrix::from_parts(DMatrix::from_element(4, 3, 1.0), vec![[0.0, 0.0]; 2]);
        assert!(rigid_factor(&w).is_err());
        let w = MeasurementMatrix::from_parts(DMatrix::from_element(2, 6, 1.0), vec![[0.0, 0.0]; 1]);
        assert!(rigid_factor(&w).is_err());
    }

    #[test]
    fn nonrigid_truncation_matches_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let delta = random(&mut rng, 16, 10);
        let model = nonrigid_factor(&delta, 4).unwrap();
        let s = singular_values(&delta).unwrap();
        let tail: f64 = s[4..].iter().map(|x| x * x).sum();
        let err = (&delta - &model.mprime * &model.modes).norm_squared();
        assert!((err - tail).abs() <= 1e-9 * tail);
        let white = &model.modes * model.modes.transpose() / 10.0;
        assert!((white - DMatrix::<f64>::identity(4, 4)).abs().max() < 1e-6);
        assert_eq!(model.separation, DMatrix::<f64>::identity(4, 4));
        assert!(model.directions.is_empty());
    }

    #[test]
    fn zero_residual_has_zero_rows() {
        let model = nonrigid_factor(&DMatrix::zeros(8, 6), 2).unwrap();
        assert!(model.modes.iter().all(|&x| x == 0.0));
        assert!(model.is_rigid_scene());
    }

    #[test]
    fn mode_count_bounds() {
        let delta = DMatrix::<f64>::zeros(8, 6);
        assert!(matches!(nonrigid_factor(&delta, 0), Err(Error::RankOutOfRange { .. })));
        assert!(matches!(
            nonrigid_factor(&delta, 4),
            Err(Error::RankOutOfRange { max: 3, .. })
        ));
        assert!(nonrigid_factor(&delta, 3).is_ok());
    }

    #[test]
    fn suggested_k() {
        assert_eq!(suggest_k(&[10.0, 5.0, 0.1, 0.01]), 2);
        assert_eq!(suggest_k(&[1.0, 1.0]), 2);
        assert_eq!(suggest_k(&[0.0, 0.0]), 0);
    }
}
