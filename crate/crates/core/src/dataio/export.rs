use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::tracks::{ensure_dir, read_number_grid, write_number_grid};
use super::{fmt_f64, read_to_string, write_string};
use crate::analysis::{inverse_snr, seriation_objective, InverseSnr};
use crate::error::{Error, Result};
use crate::factorize::assemble_measurements;
use crate::ica::IcaDiagnostics;
use crate::model::{BasisShapes, ReconstructionReport, RigidFactor, TrackTable, Variant};
use crate::numeric::RayleighSolution;
use crate::pipeline::{PipelineConfig, PipelineOutput, StageTiming};
use crate::recovery::form_basis_shapes;

pub const CAMERAS_FILE: &str = "cameras.json";
pub const MEAN_SHAPE_FILE: &str = "mean_shape.csv";
pub const MODES_FILE: &str = "modes.json";
pub const COEFFICIENTS_FILE: &str = "coefficients.csv";
pub const COVARIANCE_FILE: &str = "covariance.csv";
pub const REPORT_FILE: &str = "report.json";

pub fn perturbation_file(k: usize) -> String {
    format!("mode_{k}_perturbation.csv")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CamerasFile {
    frames: usize,
    /// `M0^i` per frame, two rows of three.
    cameras: Vec<[[f64; 3]; 2]>,
    /// Per-frame centroid removed before factorization.
    translations: Vec<[f64; 2]>,
    singular_values: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeEntry {
    pub index: usize,
    pub active: bool,
    pub singular_value: f64,
    pub direction: [f64; 3],
    pub row: Vec<f64>,
    pub objective: f64,
    pub degenerate: bool,
    pub converged: bool,
    pub iterations: usize,
    pub skipped_frames: usize,
    pub restart_spread: f64,
    /// Amplitude `a` of the exported `B0 +- a d b^T` shapes.
    pub perturbation_amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModesFile {
    variant: Variant,
    k: usize,
    points: usize,
    separation: Vec<Vec<f64>>,
    modes: Vec<ModeEntry>,
}

/// Machine-readable summary written to `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub frames: usize,
    pub points: usize,
    pub config: PipelineConfig,
    #[serde(flatten)]
    pub reconstruction: ReconstructionReport,
    pub rigid_singular_values: [f64; 3],
    pub planar: bool,
    pub rigid_scene: bool,
    pub ica: Option<IcaDiagnostics>,
    /// Largest off-diagonal coefficient covariance over the largest variance.
    pub uncorrelatedness: f64,
    pub permutation: Vec<usize>,
    pub seriation_objective: f64,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<Vec<StageTiming>>,
}

impl RunReport {
    pub fn from_output(out: &PipelineOutput, with_timings: bool) -> Self {
        Self {
            frames: out.rigid.frames(),
            points: out.rigid.points(),
            config: out.config,
            reconstruction: ReconstructionReport {
                inverse_snr_percent: out.inverse_snr_percent,
                per_frame_residuals: out.per_frame_residuals.clone(),
                energy_spectrum: out.spectrum.clone(),
                runtime_ms: with_timings.then(|| out.total_ms()),
            },
            rigid_singular_values: out.rigid.sigma0,
            planar: out.rigid.is_planar(),
            rigid_scene: out.model.is_rigid_scene(),
            ica: out.ica.clone(),
            uncorrelatedness: out.uncorrelatedness,
            permutation: out.coefficients.permutation.clone(),
            seriation_objective: seriation_objective(&out.coefficients.cov, &out.coefficients.permutation),
            warnings: out.warnings.clone(),
            timings: with_timings.then(|| out.timings.clone()),
        }
    }
}

/// Object-space coefficients `alpha / (|M0^i d| |b|)` of one mode, zero where
/// the operator vanishes.
fn object_coefficients(shapes: &BasisShapes, alpha: &DMatrix<f64>, k: usize) -> Vec<f64> {
    (0..shapes.frames())
        .map(|i| {
            let n = shapes.frob_norm(i, k);
            if n > 0.0 {
                alpha[(i, k)] / n
            } else {
                0.0
            }
        })
        .collect()
}

fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("export types serialize") + "\n"
}

fn from_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_to_string(path)?).map_err(|e| Error::parse(path, e.to_string()))
}

fn csv_text(header: &[String], rows: impl Iterator<Item = Vec<String>>) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Writes every result file into `dir`, creating it if needed, and returns
/// the written paths. Stage timings are included only when `with_timings`
/// is set, so that repeated runs can produce identical bytes.
pub fn export_results(out: &PipelineOutput, dir: &Path, with_timings: bool) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let mut written = Vec::new();
    let rigid = &out.rigid;
    let (ni, nj, nk) = (rigid.frames(), rigid.points(), out.model.k());

    let cams = CamerasFile {
        frames: ni,
        cameras: (0..ni)
            .map(|i| {
                let m = rigid.camera(i);
                [[m[(0, 0)], m[(0, 1)], m[(0, 2)]], [m[(1, 0)], m[(1, 1)], m[(1, 2)]]]
            })
            .collect(),
        translations: out.measurements.translations().to_vec(),
        singular_values: rigid.sigma0,
    };
    let path = dir.join(CAMERAS_FILE);
    write_string(&path, &to_json(&cams))?;
    written.push(path);

    let path = dir.join(MEAN_SHAPE_FILE);
    write_number_grid(&path, &rigid.b0, ',')?;
    written.push(path);

    let mut entries = Vec::with_capacity(nk);
    let mut amplitudes = Vec::with_capacity(nk);
    for k in 0..nk {
        let sol = &out.model.directions[k];
        let beta = object_coefficients(&out.shapes, &out.coefficients.alpha, k);
        let amp = if sol.degenerate { 0.0 } else { 2.0 * sample_std(&beta) };
        amplitudes.push(amp);
        entries.push(ModeEntry {
            index: k,
            active: out.model.active[k],
            singular_value: out.model.singular_values[k],
            direction: [sol.direction[0], sol.direction[1], sol.direction[2]],
            row: out.model.modes.row(k).iter().copied().collect(),
            objective: sol.objective,
            degenerate: sol.degenerate,
            converged: sol.converged,
            iterations: sol.iterations,
            skipped_frames: sol.skipped_frames,
            restart_spread: sol.restart_spread,
            perturbation_amplitude: amp,
        });
    }
    let modes = ModesFile {
        variant: out.model.variant,
        k: nk,
        points: nj,
        separation: matrix_rows(&out.model.separation),
        modes: entries,
    };
    let path = dir.join(MODES_FILE);
    write_string(&path, &to_json(&modes))?;
    written.push(path);

    let alpha = &out.coefficients.alpha;
    let header: Vec<String> = std::iter::once("frame".to_string())
        .chain((0..nk).map(|k| format!("alpha_{k}")))
        .collect();
    let rows = (0..ni).map(|i| {
        std::iter::once(i.to_string())
            .chain((0..nk).map(|k| fmt_f64(alpha[(i, k)])))
            .collect()
    });
    let path = dir.join(COEFFICIENTS_FILE);
    write_string(&path, &csv_text(&header, rows))?;
    written.push(path);

    let cov = &out.coefficients.cov;
    let header: Vec<String> = std::iter::once("mode".to_string())
        .chain((0..nk).map(|k| format!("cov_{k}")))
        .collect();
    let rows = (0..nk).map(|p| {
        std::iter::once(p.to_string())
            .chain((0..nk).map(|q| fmt_f64(cov[(p, q)])))
            .collect()
    });
    let path = dir.join(COVARIANCE_FILE);
    write_string(&path, &csv_text(&header, rows))?;
    written.push(path);

    let path = dir.join(REPORT_FILE);
    write_string(&path, &to_json(&RunReport::from_output(out, with_timings)))?;
    written.push(path);

    let header: Vec<String> = ["point", "x_minus", "y_minus", "z_minus", "x", "y", "z", "x_plus", "y_plus", "z_plus"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for (k, (sol, &amp)) in out.model.directions.iter().zip(&amplitudes).enumerate() {
        let d = sol.direction;
        let degenerate = sol.degenerate;
        let rows = (0..nj).map(|j| {
            let base = rigid.b0.column(j);
            let off = if degenerate {
                Vector3::zeros()
            } else {
                d * (amp * out.model.modes[(k, j)])
            };
            let mut rec = vec![j.to_string()];
            for sign in [-1.0, 0.0, 1.0] {
                for r in 0..3 {
                    rec.push(fmt_f64(base[r] + sign * off[r]));
                }
            }
            rec
        });
        let path = dir.join(perturbation_file(k));
        write_string(&path, &csv_text(&header, rows))?;
        written.push(path);
    }
    Ok(written)
}

/// Exported results read back from disk.
#[derive(Debug, Clone)]
pub struct ResultsBundle {
    pub rigid: RigidFactor,
    pub translations: Vec<[f64; 2]>,
    pub variant: Variant,
    pub separation: DMatrix<f64>,
    pub modes: DMatrix<f64>,
    pub entries: Vec<ModeEntry>,
    pub alpha: DMatrix<f64>,
    pub cov: DMatrix<f64>,
    pub report: RunReport,
}

impl ResultsBundle {
    pub fn frames(&self) -> usize {
        self.rigid.frames()
    }

    pub fn points(&self) -> usize {
        self.rigid.points()
    }

    pub fn directions(&self) -> Vec<RayleighSolution> {
        self.entries
            .iter()
            .map(|e| {
                let mut s = RayleighSolution::degenerate();
                s.direction = Vector3::from(e.direction);
                s.degenerate = e.degenerate;
                s.objective = e.objective;
                s.converged = e.converged;
                s.iterations = e.iterations;
                s.skipped_frames = e.skipped_frames;
                s.restart_spread = e.restart_spread;
                s
            })
            .collect()
    }

    pub fn shapes(&self) -> Result<BasisShapes> {
        form_basis_shapes(&self.rigid, &self.modes, &self.directions())
    }

    /// Inverse SNR of the stored reconstruction against a track table.
    pub fn evaluate(&self, tracks: &TrackTable) -> Result<InverseSnr> {
        if tracks.frames() != self.frames() || tracks.points() != self.points() {
            return Err(Error::Dimension(format!(
                "tracks are {} frames x {} points, results cover {} x {}",
                tracks.frames(),
                tracks.points(),
                self.frames(),
                self.points()
            )));
        }
        let w = assemble_measurements(tracks)?;
        inverse_snr(&w, &self.rigid, &self.shapes()?, &self.alpha)
    }
}

fn read_indexed_csv(path: &Path, prefix: &str, cols: usize, rows: usize) -> Result<DMatrix<f64>> {
    let text = read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::parse(path, "empty file"))?;
    let expected: Vec<String> = std::iter::once(if prefix == "alpha" { "frame" } else { "mode" }.to_string())
        .chain((0..cols).map(|k| format!("{prefix}_{k}")))
        .collect();
    if header.split(',').map(str::trim).ne(expected.iter().map(String::as_str)) {
        return Err(Error::parse(path, format!("header must be '{}'", expected.join(","))));
    }
    let mut m = DMatrix::zeros(rows, cols);
    let mut count = 0;
    for (n, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols + 1 {
            return Err(Error::parse(path, format!("row {n}: expected {} fields", cols + 1)));
        }
        if fields[0].parse::<usize>().ok() != Some(n) || n >= rows {
            return Err(Error::parse(path, format!("row {n}: unexpected index '{}'", fields[0])));
        }
        for c in 0..cols {
            let v: f64 = fields[c + 1]
                .parse()
                .map_err(|_| Error::parse(path, format!("row {n}: cannot parse '{}'", fields[c + 1])))?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{} row {n}", path.display())));
            }
            m[(n, c)] = v;
        }
        count += 1;
    }
    if count != rows {
        return Err(Error::Dimension(format!("{}: expected {rows} rows, got {count}", path.display())));
    }
    Ok(m)
}

/// Loads the files written by [`export_results`].
pub fn load_results(dir: &Path) -> Result<ResultsBundle> {
    let cams: CamerasFile = from_json(&dir.join(CAMERAS_FILE))?;
    let ni = cams.frames;
    if cams.cameras.len() != ni || cams.translations.len() != ni {
        return Err(Error::Dimension(format!(
            "{}: {} cameras and {} translations for {ni} frames",
            CAMERAS_FILE,
            cams.cameras.len(),
            cams.translations.len()
        )));
    }
    let m0 = DMatrix::from_fn(2 * ni, 3, |r, c| cams.cameras[r / 2][r % 2][c]);
    let b0 = read_number_grid(&dir.join(MEAN_SHAPE_FILE))?;
    if b0.nrows() != 3 {
        return Err(Error::Dimension(format!("{MEAN_SHAPE_FILE}: expected 3 rows, got {}", b0.nrows())));
    }
    let nj = b0.ncols();

    let modes: ModesFile = from_json(&dir.join(MODES_FILE))?;
    let nk = modes.k;
    if modes.modes.len() != nk || modes.points != nj || modes.modes.iter().any(|m| m.row.len() != nj) {
        return Err(Error::Dimension(format!("{MODES_FILE}: inconsistent with {nj} points and {nk} modes")));
    }
    if modes.separation.len() != nk || modes.separation.iter().any(|r| r.len() != nk) {
        return Err(Error::Dimension(format!("{MODES_FILE}: separation must be {nk}x{nk}")));
    }
    let rows = DMatrix::from_fn(nk, nj, |k, j| modes.modes[k].row[j]);
    let separation = DMatrix::from_fn(nk, nk, |p, q| modes.separation[p][q]);

    let alpha = read_indexed_csv(&dir.join(COEFFICIENTS_FILE), "alpha", nk, ni)?;
    let cov = read_indexed_csv(&dir.join(COVARIANCE_FILE), "cov", nk, nk)?;
    let report: RunReport = from_json(&dir.join(REPORT_FILE))?;

    Ok(ResultsBundle {
        rigid: RigidFactor {
            m0,
            b0,
            sigma0: cams.singular_values,
            sigma_rest: Vec::new(),
        },
        translations: cams.translations,
        variant: modes.variant,
        separation,
        modes: rows,
        entries: modes.modes,
        alpha,
        cov,
        report,
    })
}
