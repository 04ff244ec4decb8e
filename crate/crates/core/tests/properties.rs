use nalgebra::{DMatrix, DVector, Matrix2x3};
use proptest::prelude::*;

use rank1_nrsfm::analysis::{coefficient_covariance, reconstruct};
use rank1_nrsfm::dataio::{synthesize, SyntheticSpec};
use rank1_nrsfm::factorize::max_modes;
use rank1_nrsfm::model::{TrackTable, Variant};
use rank1_nrsfm::numeric::{kron_gram, kron_transpose_apply};
use rank1_nrsfm::pipeline::{run, PipelineConfig};

fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, n)
}

fn tracks_strategy() -> impl Strategy<Value = (TrackTable, usize)> {
    (2usize..6, 4usize..9).prop_flat_map(|(i, j)| {
        let kmax = max_modes(i, j - 1).clamp(1, 3);
        (vec_strategy(2 * i * j), 1..=kmax).prop_map(move |(v, k)| {
            let coords = v.chunks(2).map(|c| [c[0] * 10.0, c[1] * 10.0]).collect();
            (TrackTable::new(i, j, coords).unwrap(), k)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn kronecker_identities(b in vec_strategy(7), m in vec_strategy(6), w in vec_strategy(14)) {
        let b = DVector::from_vec(b);
        let m = Matrix2x3::from_row_slice(&m);
        let w = DMatrix::from_row_slice(2, 7, &w);
        let gram = kron_gram(&b, &m);
        let expected = m.transpose() * m * b.norm_squared();
        prop_assert!((gram - expected).amax() <= 1e-9 * (1.0 + expected.amax()));
        let apply = kron_transpose_apply(&b, &m, &w);
        let expected = m.transpose() * (&w * &b);
        prop_assert!((apply - expected).amax() <= 1e-9 * (1.0 + expected.amax()));
    }

    #[test]
    fn pipeline_invariants((tracks, k) in tracks_strategy()) {
        let pca = run(&tracks, &PipelineConfig::new(k, Variant::Pca)).unwrap();
        let ica = run(&tracks, &PipelineConfig::new(k, Variant::Ica)).unwrap();
        prop_assert_eq!(&pca.rigid, &ica.rigid);
        prop_assert_eq!(&pca.residual, &ica.residual);

        for out in [&pca, &ica] {
            let g = &out.model.separation;
            let ortho = (g.transpose() * g - DMatrix::identity(k, k)).amax();
            prop_assert!(ortho < 1e-9, "G not orthogonal: {}", ortho);

            for sol in &out.model.directions {
                let n = sol.direction.norm();
                prop_assert!((n - 1.0).abs() < 1e-9 || (sol.degenerate && n == 0.0));
            }

            let c = &out.coefficients.cov;
            prop_assert_eq!(c, &c.transpose());
            prop_assert_eq!(c, &coefficient_covariance(&out.coefficients.alpha).unwrap());
            let eig = c.clone().symmetric_eigen();
            prop_assert!(eig.eigenvalues.iter().all(|&l| l >= -1e-9 * (1.0 + c.amax())));

            let mut perm = out.coefficients.permutation.clone();
            perm.sort_unstable();
            prop_assert_eq!(perm, (0..k).collect::<Vec<_>>());

            let fit = reconstruct(&out.rigid, &out.shapes, &out.coefficients.alpha).unwrap();
            let w = out.measurements.w();
            let direct = 100.0 * (w - fit).norm() / w.norm();
            prop_assert!((direct - out.inverse_snr_percent).abs() <= 1e-9 * (1.0 + direct));
            prop_assert!(out.per_frame_residuals.iter().all(|&r| r >= 0.0));
        }
    }
}

#[test]
fn pca_and_ica_agree_on_gaussian_modes() {
    for seed in 0..5 {
        let (tracks, _) = synthesize(&SyntheticSpec::new(30, 25, 3, 0.5, seed)).unwrap();
        let pca = run(&tracks, &PipelineConfig::new(3, Variant::Pca)).unwrap();
        let ica = run(&tracks, &PipelineConfig::new(3, Variant::Ica)).unwrap();
        let gap = (pca.inverse_snr_percent - ica.inverse_snr_percent).abs();
        assert!(gap < 0.05, "seed {seed}: pca {} ica {}", pca.inverse_snr_percent, ica.inverse_snr_percent);
    }
}
