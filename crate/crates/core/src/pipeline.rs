//! End-to-end reconstruction: rigid factorization, mode extraction,
//! optional ICA separation, direction recovery and coefficient projection.

use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::analysis::{coefficient_covariance, inverse_snr, seriate_covariance, uncorrelatedness};
use crate::error::Result;
use crate::factorize::{
    assemble_measurements, check_mode_count, nonrigid_factor_with_floor, nonrigid_residual, rigid_factor,
};
use crate::ica::{fastica_orthogonal, IcaConfig, IcaDiagnostics};
use crate::model::{
    BasisShapes, CoefficientMatrix, DeformationModel, MeasurementMatrix, RigidFactor, TrackTable, Variant,
};
use crate::numeric::{singular_values, SolverConfig};
use crate::recovery::{form_basis_shapes, project_coefficients, solve_directions};

/// Residual singular values at or below this fraction of `sigma_1(W)` mark a
/// mode as inactive.
pub const INACTIVE_RATIO: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub k: usize,
    pub variant: Variant,
    pub ica: IcaConfig,
    pub solver: SolverConfig,
}

impl PipelineConfig {
    pub fn new(k: usize, variant: Variant) -> Self {
        Self {
            k,
            variant,
            ica: IcaConfig::default(),
            solver: SolverConfig::default(),
        }
    }
}

/// Wall-clock time of one pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub ms: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub config: PipelineConfig,
    pub measurements: MeasurementMatrix,
    pub rigid: RigidFactor,
    /// `W - M0 B0`.
    pub residual: DMatrix<f64>,
    /// Full singular spectrum of the residual.
    pub spectrum: Vec<f64>,
    pub model: DeformationModel,
    pub ica: Option<IcaDiagnostics>,
    pub shapes: BasisShapes,
    pub coefficients: CoefficientMatrix,
    pub inverse_snr_percent: f64,
    pub per_frame_residuals: Vec<f64>,
    /// Largest off-diagonal covariance over the largest variance.
    pub uncorrelatedness: f64,
    pub timings: Vec<StageTiming>,
    pub warnings: Vec<String>,
}

impl PipelineOutput {
    pub fn total_ms(&self) -> f64 {
        self.timings.iter().map(|t| t.ms).sum()
    }
}

struct Clock {
    last: Instant,
    timings: Vec<StageTiming>,
}

impl Clock {
    fn new() -> Self {
        Self {
            last: Instant::now(),
            timings: Vec::new(),
        }
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.timings.push(StageTiming {
            stage: stage.to_string(),
            ms: (now - self.last).as_secs_f64() * 1e3,
        });
        self.last = now;
    }
}

/// Separates the active mode rows; inactive rows keep an identity block.
fn separate(model: &DeformationModel, cfg: &IcaConfig) -> Result<(DMatrix<f64>, IcaDiagnostics)> {
    let k = model.k();
    let idx: Vec<usize> = (0..k).filter(|&i| model.active[i]).collect();
    let rows = model.modes.select_rows(&idx);
    let (g_active, diag) = fastica_orthogonal(&rows, cfg)?;
    let mut g = DMatrix::identity(k, k);
    for (a, &p) in idx.iter().enumerate() {
        for (b, &q) in idx.iter().enumerate() {
            g[(p, q)] = g_active[(a, b)];
        }
    }
    Ok((g, diag))
}

/// Runs the full reconstruction on a track table.
pub fn run(tracks: &TrackTable, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    tracks.check_factorizable()?;
    check_mode_count(cfg.k, tracks.frames(), tracks.points())?;
    let mut clock = Clock::new();
    let mut warnings = Vec::new();

    let measurements = assemble_measurements(tracks)?;
    clock.lap("assemble");

    let rigid = rigid_factor(&measurements)?;
    if rigid.is_planar() {
        warnings.push("rigid structure is planar: third singular value is negligible".to_string());
    }
    let residual = nonrigid_residual(&measurements, &rigid)?;
    clock.lap("rigid");

    let spectrum = singular_values(&residual)?;
    let floor = INACTIVE_RATIO * rigid.sigma0[0];
    let mut model = nonrigid_factor_with_floor(&residual, cfg.k, floor)?;
    if model.is_rigid_scene() {
        warnings.push("rigid scene: the non-rigid residual carries no energy".to_string());
    } else if model.active.iter().any(|a| !a) {
        let n = model.active.iter().filter(|a| !**a).count();
        warnings.push(format!("{n} of {} modes carry no energy and were left inactive", cfg.k));
    }
    clock.lap("nonrigid");

    let mut ica = None;
    if cfg.variant == Variant::Ica {
        if model.is_rigid_scene() {
            model.variant = Variant::Ica;
        } else {
            let (g, diag) = separate(&model, &cfg.ica)?;
            if !diag.identifiable {
                warnings.push("mode rows look Gaussian; ICA kept G = I".to_string());
            } else if !diag.converged {
                warnings.push(format!("ICA stopped after {} iterations without converging", diag.iterations));
            }
            model = model.with_separation(g, Variant::Ica);
            ica = Some(diag);
        }
        clock.lap("ica");
    }

    let directions = solve_directions(&residual, &rigid, &model.modes, &cfg.solver)?;
    for (k, d) in directions.iter().enumerate() {
        if model.active[k] && d.degenerate {
            warnings.push(format!("mode {k}: direction is degenerate"));
        } else if !d.degenerate && !d.converged {
            warnings.push(format!("mode {k}: direction solver did not converge"));
        }
    }
    model = model.with_directions(directions);
    clock.lap("directions");

    let shapes = form_basis_shapes(&rigid, &model.modes, &model.directions)?;
    let mut coefficients = project_coefficients(&residual, &shapes)?;
    coefficients.cov = coefficient_covariance(&coefficients.alpha)?;
    coefficients.permutation = seriate_covariance(&coefficients.cov);
    clock.lap("coefficients");

    let snr = inverse_snr(&measurements, &rigid, &shapes, &coefficients.alpha)?;
    clock.lap("evaluate");

    Ok(PipelineOutput {
        config: *cfg,
        uncorrelatedness: uncorrelatedness(&coefficients.cov),
        measurements,
        rigid,
        residual,
        spectrum,
        model,
        ica,
        shapes,
        coefficients,
        inverse_snr_percent: snr.percent,
        per_frame_residuals: snr.per_frame,
        timings: clock.timings,
        warnings,
    })
}
