//! Track files, the synthetic generator and result export.
//!
//! All files are text. Numbers are written with 17 significant digits, so
//! every `f64` survives a write/read cycle bit for bit.

mod export;
mod synth;
mod tracks;

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub use export::{
    export_results, load_results, perturbation_file, ModeEntry, ResultsBundle, RunReport, CAMERAS_FILE, COEFFICIENTS_FILE,
    COVARIANCE_FILE, MEAN_SHAPE_FILE, MODES_FILE, REPORT_FILE,
};
pub use synth::{synthesize, GroundTruth, ModeDistribution, SyntheticSpec};
pub use tracks::{
    load_tracks, read_number_grid, sidecar_path, write_number_grid, write_tracks, MatrixSidecar, TrackFormat,
};

/// `{:.16e}`: 17 significant digits, locale independent.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub(crate) fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_string(path: &Path, s: &str) -> Result<()> {
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
