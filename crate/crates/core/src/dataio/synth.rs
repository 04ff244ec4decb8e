use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TrackTable;

/// Image extent used for the random camera translations.
const IMAGE_SIZE: [f64; 2] = [640.0, 480.0];

/// Distribution the raw mode rows are drawn from before orthogonalization.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeDistribution {
    #[default]
    Gaussian,
    /// Uniform on `[-sqrt 3, sqrt 3]`; non-Gaussian, so ICA can rotate the
    /// modes.
    Uniform,
}

/// Parameters of a synthetic deforming scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub frames: usize,
    pub points: usize,
    pub modes: usize,
    /// Standard deviation of the i.i.d. pixel noise.
    pub noise_std: f64,
    /// Per-mode RMS deformation relative to the shape size; strictly
    /// decreasing so every mode has its own singular value.
    pub coefficient_std: Vec<f64>,
    pub seed: u64,
    /// Range of the per-frame camera scale (pixels per shape unit).
    pub camera_scale: [f64; 2],
    #[serde(default)]
    pub mode_distribution: ModeDistribution,
}

impl SyntheticSpec {
    /// Defaults: coefficient spread `0.25 * 0.8^k`, camera scale in
    /// `[80, 120]`.
    pub fn new(frames: usize, points: usize, modes: usize, noise_std: f64, seed: u64) -> Self {
        Self {
            frames,
            points,
            modes,
            noise_std,
            coefficient_std: (0..modes).map(|k| 0.25 * 0.8f64.powi(k as i32)).collect(),
            seed,
            camera_scale: [80.0, 120.0],
            mode_distribution: ModeDistribution::Gaussian,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (i, j, k) = (self.frames, self.points, self.modes);
        if i == 0 || j == 0 || k == 0 {
            return Err(Error::InvalidInput(format!(
                "frames, points and modes must be positive, got {i}, {j}, {k}"
            )));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::InvalidInput(format!(
                "noise std must be finite and non-negative, got {}",
                self.noise_std
            )));
        }
        if j < k + 4 {
            return Err(Error::InvalidInput(format!(
                "{k} modes need at least {} points, got {j}",
                k + 4
            )));
        }
        if i < k + 3 {
            return Err(Error::InvalidInput(format!(
                "{k} modes need at least {} frames, got {i}",
                k + 3
            )));
        }
        if self.coefficient_std.len() != k {
            return Err(Error::InvalidInput(format!(
                "{} coefficient stds for {k} modes",
                self.coefficient_std.len()
            )));
        }
        if self.coefficient_std.iter().any(|s| !(*s > 0.0) || !s.is_finite())
            || self.coefficient_std.windows(2).any(|w| w[1] >= w[0])
        {
            return Err(Error::InvalidInput(
                "coefficient stds must be positive and strictly decreasing".into(),
            ));
        }
        let [lo, hi] = self.camera_scale;
        if !(lo > 0.0) || !(hi >= lo) || !hi.is_finite() {
            return Err(Error::InvalidInput(format!("invalid camera scale range [{lo}, {hi}]")));
        }
        Ok(())
    }
}

/// The generating parameters of a synthetic scene.
///
/// Frame `i` observes `M^i (B0 + sum_k alpha[i][k] d_k b_k^T) + t^i`, plus
/// noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: SyntheticSpec,
    /// `2 x 3` camera per frame.
    pub cameras: Vec<[[f64; 3]; 2]>,
    pub translations: Vec<[f64; 2]>,
    /// Rigid shape, 3 rows of `J` coordinates.
    pub mean_shape: Vec<Vec<f64>>,
    /// Unit back-projection direction per mode.
    pub directions: Vec<[f64; 3]>,
    /// Mode rows `b_k`, each of norm `sqrt(J)`.
    pub modes: Vec<Vec<f64>>,
    /// `alpha[i][k]`.
    pub alpha: Vec<Vec<f64>>,
}

impl GroundTruth {
    pub fn camera(&self, i: usize) -> Matrix2x3<f64> {
        let c = &self.cameras[i];
        Matrix2x3::new(c[0][0], c[0][1], c[0][2], c[1][0], c[1][1], c[1][2])
    }

    /// Stacked cameras, `2I x 3`.
    pub fn camera_stack(&self) -> DMatrix<f64> {
        DMatrix::from_fn(2 * self.cameras.len(), 3, |r, c| self.cameras[r / 2][r % 2][c])
    }

    pub fn mean_shape_matrix(&self) -> DMatrix<f64> {
        rows_to_matrix(&self.mean_shape)
    }

    pub fn modes_matrix(&self) -> DMatrix<f64> {
        rows_to_matrix(&self.modes)
    }

    pub fn alpha_matrix(&self) -> DMatrix<f64> {
        rows_to_matrix(&self.alpha)
    }

    pub fn direction(&self, k: usize) -> Vector3<f64> {
        Vector3::from(self.directions[k])
    }

    /// Column factor of the deformation, `2I x K`; column `k` stacks
    /// `alpha[i][k] M^i d_k`.
    pub fn deformation_columns(&self) -> DMatrix<f64> {
        let k = self.directions.len();
        let mut c = DMatrix::zeros(2 * self.cameras.len(), k);
        for i in 0..self.cameras.len() {
            let m = self.camera(i);
            for (kk, _) in self.directions.iter().enumerate() {
                let u = m * self.direction(kk) * self.alpha[i][kk];
                c[(2 * i, kk)] = u[0];
                c[(2 * i + 1, kk)] = u[1];
            }
        }
        c
    }

    /// Noise-free centered measurements `M B0 + C B`.
    pub fn noiseless_measurements(&self) -> DMatrix<f64> {
        self.camera_stack() * self.mean_shape_matrix() + self.deformation_columns() * self.modes_matrix()
    }
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(n, m, |r, c| rows[r][c])
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

/// Removes from `v` its component in the column span of `a`, twice for
/// accuracy.
fn project_out(a: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    if a.ncols() == 0 {
        return v.clone();
    }
    let q = a.clone().qr().q();
    let mut out = v.clone();
    for _ in 0..2 {
        let coeffs = q.transpose() * &out;
        out -= &q * coeffs;
    }
    out
}

/// Draws a scene following the affine rank-1 deformation model.
///
/// Mode rows are orthogonal to the constant vector, to the rigid shape and to
/// each other. The per-mode coefficient vectors are further constrained so
/// that the deformation columns are orthogonal to the cameras and to each
/// other. When the rigid singular values dominate the deformation, as they
/// do with the default spreads, the truncated SVD of the noise-free
/// measurements separates the rigid part and every mode exactly.
pub fn synthesize(spec: &SyntheticSpec) -> Result<(TrackTable, GroundTruth)> {
    spec.validate()?;
    let (ni, nj, nk) = (spec.frames, spec.points, spec.modes);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut cams = Vec::with_capacity(ni);
    let mut scales = Vec::with_capacity(ni);
    let mut translations = Vec::with_capacity(ni);
    for _ in 0..ni {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let rot: Matrix3<f64> = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]))
            .to_rotation_matrix()
            .into_inner();
        let s = if spec.camera_scale[1] > spec.camera_scale[0] {
            rng.random_range(spec.camera_scale[0]..spec.camera_scale[1])
        } else {
            spec.camera_scale[0]
        };
        let m: Matrix2x3<f64> = rot.fixed_rows::<2>(0) * s;
        cams.push(m);
        scales.push(s);
        translations.push([
            rng.random_range(0.0..IMAGE_SIZE[0]),
            rng.random_range(0.0..IMAGE_SIZE[1]),
        ]);
    }

    let mut b0 = normal_matrix(&mut rng, 3, nj);
    for mut row in b0.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }

    let raw = match spec.mode_distribution {
        ModeDistribution::Gaussian => normal_matrix(&mut rng, nj, nk),
        ModeDistribution::Uniform => {
            let h = 3f64.sqrt();
            DMatrix::from_fn(nj, nk, |_, _| rng.random_range(-h..h))
        }
    };
    let mut basis = DMatrix::zeros(nj, 4 + nk);
    basis.column_mut(0).fill(1.0);
    basis.view_mut((0, 1), (nj, 3)).copy_from(&b0.transpose());
    basis.view_mut((0, 4), (nj, nk)).copy_from(&raw);
    let q = basis.qr().q();
    let modes = q.columns(4, nk).transpose() * (nj as f64).sqrt();

    let directions: Vec<Vector3<f64>> = (0..nk)
        .map(|_| {
            Vector3::from_fn(|_, _| rng.sample(StandardNormal)).normalize()
        })
        .collect();

    let mean_scale = scales.iter().sum::<f64>() / ni as f64;
    let grams: Vec<Matrix3<f64>> = cams.iter().map(|m| m.transpose() * m).collect();
    let mut alpha = DMatrix::zeros(ni, nk);
    for k in 0..nk {
        let d = directions[k];
        let mut cons = DMatrix::zeros(ni, 3 + k);
        for i in 0..ni {
            let hd = grams[i] * d;
            for r in 0..3 {
                cons[(i, r)] = hd[r];
            }
            for l in 0..k {
                cons[(i, 3 + l)] = alpha[(i, l)] * d.dot(&(grams[i] * directions[l]));
            }
        }
        let v: DVector<f64> = DVector::from_fn(ni, |_, _| rng.sample(StandardNormal));
        let a = project_out(&cons, &v);
        let col_norm = (0..ni)
            .map(|i| a[i] * a[i] * (cams[i] * d).norm_squared())
            .sum::<f64>()
            .sqrt();
        if col_norm == 0.0 {
            return Err(Error::InvalidInput("degenerate coefficient draw; try another seed".into()));
        }
        let target = spec.coefficient_std[k] * mean_scale * (ni as f64).sqrt();
        alpha.set_column(k, &(a * (target / col_norm)));
    }

    let truth = GroundTruth {
        spec: spec.clone(),
        cameras: cams
            .iter()
            .map(|m| [[m[(0, 0)], m[(0, 1)], m[(0, 2)]], [m[(1, 0)], m[(1, 1)], m[(1, 2)]]])
            .collect(),
        translations,
        mean_shape: matrix_to_rows(&b0),
        directions: directions.iter().map(|d| [d[0], d[1], d[2]]).collect(),
        modes: matrix_to_rows(&modes),
        alpha: matrix_to_rows(&alpha),
    };

    let clean = truth.noiseless_measurements();
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut coords = Vec::with_capacity(ni * nj);
    for i in 0..ni {
        let t = truth.translations[i];
        for j in 0..nj {
            let mut xy = [clean[(2 * i, j)] + t[0], clean[(2 * i + 1, j)] + t[1]];
            if spec.noise_std > 0.0 {
                xy[0] += noise.sample(&mut rng);
                xy[1] += noise.sample(&mut rng);
            }
            coords.push(xy);
        }
    }
    Ok((TrackTable::new(ni, nj, coords)?, truth))
}
