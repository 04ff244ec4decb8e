//! Domain types shared by the factorization, recovery and analysis stages.
//!
//! Measurement matrices are stored frame-major: rows `2i` and `2i + 1` hold
//! the x- and y-coordinates of frame `i`, columns index points. All matrices
//! are `f64` and immutable once built.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Matrix2x3, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::RayleighSolution;

/// Minimum frame count for the rank-3 rigid factorization.
pub const MIN_FRAMES: usize = 2;
/// Minimum point count for the rank-3 rigid factorization (three independent
/// points plus the centroid removed by translation correction).
pub const MIN_POINTS: usize = 4;

/// Raw 2D observations of `points` tracks over `frames` images.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackTable {
    frames: usize,
    points: usize,
    coords: Vec<[f64; 2]>,
    labels: Option<Vec<String>>,
}

impl TrackTable {
    /// Builds a table from frame-major coordinates (`coords[i * points + j]`).
    ///
    /// Only shape and finiteness are checked here; the stricter size limits
    /// needed by the rigid factorization are enforced by
    /// [`TrackTable::check_factorizable`].
    pub fn new(frames: usize, points: usize, coords: Vec<[f64; 2]>) -> Result<Self> {
        if frames == 0 || points == 0 {
            return Err(Error::InvalidInput(format!(
                "track table needs at least one frame and one point, got {frames}x{points}"
            )));
        }
        if coords.len() != frames * points {
            return Err(Error::Dimension(format!(
                "expected {} coordinates for {frames} frames x {points} points, got {}",
                frames * points,
                coords.len()
            )));
        }
        if let Some(pos) = coords
            .iter()
            .position(|c| !c[0].is_finite() || !c[1].is_finite())
        {
            return Err(Error::NonFinite(format!(
                "frame {}, point {}",
                pos / points,
                pos % points
            )));
        }
        Ok(Self {
            frames,
            points,
            coords,
            labels: None,
        })
    }

    /// Builds a table from a frame-major `2I x J` coordinate matrix.
    pub fn from_matrix(m: &DMatrix<f64>) -> Result<Self> {
        if !m.nrows().is_multiple_of(2) {
            return Err(Error::Dimension(format!(
                "coordinate matrix needs an even row count, got {}",
                m.nrows()
            )));
        }
        let frames = m.nrows() / 2;
        let points = m.ncols();
        let mut coords = Vec::with_capacity(frames * points);
        for i in 0..frames {
            for j in 0..points {
                coords.push([m[(2 * i, j)], m[(2 * i + 1, j)]]);
            }
        }
        Self::new(frames, points, coords)
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.points {
            return Err(Error::Dimension(format!(
                "{} labels for {} points",
                labels.len(),
                self.points
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn get(&self, frame: usize, point: usize) -> [f64; 2] {
        self.coords[frame * self.points + point]
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    /// Frame-major `2I x J` matrix of the raw coordinates.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(2 * self.frames, self.points, |r, j| {
            self.get(r / 2, j)[r % 2]
        })
    }

    /// Checks the size limits of the rigid factorization.
    pub fn check_factorizable(&self) -> Result<()> {
        check_factor_dims(self.frames, self.points)
    }
}

pub(crate) fn check_factor_dims(frames: usize, points: usize) -> Result<()> {
    if frames < MIN_FRAMES || points < MIN_POINTS {
        return Err(Error::InvalidInput(format!(
            "factorization needs at least {MIN_FRAMES} frames and {MIN_POINTS} points, got {frames} frames and {points} points"
        )));
    }
    Ok(())
}

/// Translation-corrected measurement matrix `W` with its per-frame centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementMatrix {
    w: DMatrix<f64>,
    translations: Vec<[f64; 2]>,
}

impl MeasurementMatrix {
    pub(crate) fn from_parts(w: DMatrix<f64>, translations: Vec<[f64; 2]>) -> Self {
        debug_assert_eq!(w.nrows(), 2 * translations.len());
        Self { w, translations }
    }

    pub fn frames(&self) -> usize {
        self.translations.len()
    }

    pub fn points(&self) -> usize {
        self.w.ncols()
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn translations(&self) -> &[[f64; 2]] {
        &self.translations
    }

    /// The `2 x J` block of frame `i`.
    pub fn frame_block(&self, i: usize) -> DMatrix<f64> {
        frame_block(&self.w, i)
    }

    /// Adds the stored translations back, recovering the raw observations.
    pub fn to_tracks(&self) -> TrackTable {
        let points = self.points();
        let mut coords = Vec::with_capacity(self.frames() * points);
        for (i, t) in self.translations.iter().enumerate() {
            for j in 0..points {
                coords.push([self.w[(2 * i, j)] + t[0], self.w[(2 * i + 1, j)] + t[1]]);
            }
        }
        TrackTable::new(self.frames(), points, coords)
            .expect("measurement matrix holds finite values")
    }
}

pub(crate) fn frame_block(m: &DMatrix<f64>, i: usize) -> DMatrix<f64> {
    m.rows(2 * i, 2).into_owned()
}

/// Rank-3 affine factorization `W0 = M0 * B0` of the measurement matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidFactor {
    /// Stacked `2 x 3` cameras, `2I x 3`.
    pub m0: DMatrix<f64>,
    /// Mean shape, `3 x J`.
    pub b0: DMatrix<f64>,
    /// The three retained singular values of `W`.
    pub sigma0: [f64; 3],
    /// The remaining singular values of `W`, descending.
    pub sigma_rest: Vec<f64>,
}

impl RigidFactor {
    pub fn frames(&self) -> usize {
        self.m0.nrows() / 2
    }

    pub fn points(&self) -> usize {
        self.b0.ncols()
    }

    /// Camera `M^i`.
    pub fn camera(&self, i: usize) -> Matrix2x3<f64> {
        self.m0.fixed_view::<2, 3>(2 * i, 0).into_owned()
    }

    pub fn rigid_part(&self) -> DMatrix<f64> {
        &self.m0 * &self.b0
    }

    /// Whether the rigid scene is numerically planar (`sigma3 / sigma1 < 1e-8`).
    pub fn is_planar(&self) -> bool {
        self.sigma0[0] > 0.0 && self.sigma0[2] / self.sigma0[0] < 1e-8
    }
}

/// Which orthogonal transform was applied to the mode rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Pca,
    Ica,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Pca => "pca",
            Variant::Ica => "ica",
        })
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pca" => Ok(Variant::Pca),
            "ica" => Ok(Variant::Ica),
            other => Err(format!("unknown variant '{other}', expected pca or ica")),
        }
    }
}

/// `K` rank-1 deformation modes of the non-rigid residual.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationModel {
    pub variant: Variant,
    /// Orthogonal separation matrix `G`, `K x K`.
    pub separation: DMatrix<f64>,
    /// Mode rows `b_k` (`K x J`), i.e. `G * sqrt(J) * V'^T`.
    pub modes: DMatrix<f64>,
    /// Coefficient-side factor (`2I x K`), `(1/sqrt(J)) U'S' G^T`.
    pub mprime: DMatrix<f64>,
    /// Leading singular values of the residual, one per mode.
    pub singular_values: Vec<f64>,
    /// Modes whose singular value was numerically zero have zeroed rows.
    pub active: Vec<bool>,
    /// Solved back-projection directions; empty until recovery runs.
    pub directions: Vec<RayleighSolution>,
}

impl DeformationModel {
    pub fn k(&self) -> usize {
        self.modes.nrows()
    }

    pub fn mode_row(&self, k: usize) -> DVector<f64> {
        self.modes.row(k).transpose()
    }

    /// True when no mode carries energy (the scene is rigid).
    pub fn is_rigid_scene(&self) -> bool {
        !self.active.iter().any(|&a| a)
    }

    /// Rotates the mode rows by `g` (`b <- g * b`, `M' <- M' * g^T`); the
    /// product `M' * B'` is unchanged.
    pub fn with_separation(mut self, g: DMatrix<f64>, variant: Variant) -> Self {
        self.modes = &g * &self.modes;
        self.mprime = &self.mprime * g.transpose();
        self.separation = &g * &self.separation;
        self.variant = variant;
        self
    }

    pub fn with_directions(mut self, directions: Vec<RayleighSolution>) -> Self {
        self.directions = directions;
        self
    }
}

/// The image-space operator `B_k^i = M^i d_k b_k^T` of one frame and mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RankOneBasisShape {
    pub frame: usize,
    pub mode: usize,
    pub operator: DMatrix<f64>,
    pub frob_norm: f64,
}

impl RankOneBasisShape {
    /// Unit Frobenius-norm copy, or `None` for a zero operator.
    pub fn normalized(&self) -> Option<DMatrix<f64>> {
        (self.frob_norm > 0.0).then(|| &self.operator / self.frob_norm)
    }
}

/// All rank-1 basis shapes of a reconstruction, stored in factored form.
///
/// Each operator is `u * b^T` with `u = M^i d_k` (a 2-vector), so only the
/// `I x K` image directions and the `K` mode rows are kept.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisShapes {
    frames: usize,
    rows: DMatrix<f64>,
    image_dirs: Vec<Vector2<f64>>,
}

impl BasisShapes {
    pub(crate) fn new(rows: DMatrix<f64>, image_dirs: Vec<Vector2<f64>>) -> Self {
        let k = rows.nrows();
        let frames = image_dirs.len().checked_div(k).unwrap_or(0);
        debug_assert_eq!(frames * k, image_dirs.len());
        Self {
            frames,
            rows,
            image_dirs,
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn modes(&self) -> usize {
        self.rows.nrows()
    }

    pub fn points(&self) -> usize {
        self.rows.ncols()
    }

    /// `M^i d_k`.
    pub fn image_direction(&self, frame: usize, mode: usize) -> Vector2<f64> {
        self.image_dirs[frame * self.modes() + mode]
    }

    pub fn row_norm(&self, mode: usize) -> f64 {
        self.rows.row(mode).norm()
    }

    pub fn frob_norm(&self, frame: usize, mode: usize) -> f64 {
        self.image_direction(frame, mode).norm() * self.row_norm(mode)
    }

    /// Whether the operator vanishes, leaving its unit copy undefined.
    pub fn is_zero(&self, frame: usize, mode: usize) -> bool {
        self.frob_norm(frame, mode) == 0.0
    }

    /// Unit factors `(u/|u|, b/|b|)` of the normalized operator.
    pub fn unit_factors(&self, frame: usize, mode: usize) -> Option<(Vector2<f64>, DVector<f64>)> {
        let u = self.image_direction(frame, mode);
        let un = u.norm();
        let bn = self.row_norm(mode);
        if un == 0.0 || bn == 0.0 {
            return None;
        }
        Some((u / un, self.rows.row(mode).transpose() / bn))
    }

    /// Materializes the operator `B_k^i`.
    pub fn shape(&self, frame: usize, mode: usize) -> RankOneBasisShape {
        let u = self.image_direction(frame, mode);
        let operator = DMatrix::from_fn(2, self.points(), |r, j| u[r] * self.rows[(mode, j)]);
        RankOneBasisShape {
            frame,
            mode,
            frob_norm: self.frob_norm(frame, mode),
            operator,
        }
    }

    /// Number of (frame, mode) pairs whose operator is zero.
    pub fn zero_count(&self) -> usize {
        (0..self.frames)
            .flat_map(|i| (0..self.modes()).map(move |k| (i, k)))
            .filter(|&(i, k)| self.is_zero(i, k))
            .count()
    }

    /// `sum_k alpha[i, k] * B_hat_k^i`, stacked frame-major (`2I x J`).
    pub fn reconstruct(&self, alpha: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(2 * self.frames, self.points());
        for i in 0..self.frames {
            for k in 0..self.modes() {
                if let Some((u, b)) = self.unit_factors(i, k) {
                    let a = alpha[(i, k)];
                    for j in 0..self.points() {
                        out[(2 * i, j)] += a * u[0] * b[j];
                        out[(2 * i + 1, j)] += a * u[1] * b[j];
                    }
                }
            }
        }
        out
    }
}

/// Per-frame mode coefficients with their covariance and seriation order.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMatrix {
    /// `I x K` coefficients with respect to the unit-norm operators.
    pub alpha: DMatrix<f64>,
    /// `K x K` covariance over frames.
    pub cov: DMatrix<f64>,
    /// Seriation order of the modes (0-based).
    pub permutation: Vec<usize>,
}

/// Reconstruction quality summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub inverse_snr_percent: f64,
    pub per_frame_residuals: Vec<f64>,
    /// Singular values of the non-rigid residual.
    pub energy_spectrum: Vec<f64>,
    /// Total wall-clock time; omitted when timings are disabled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runtime_ms: Option<f64>,
}
