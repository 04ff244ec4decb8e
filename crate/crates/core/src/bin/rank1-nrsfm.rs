// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rank1_nrsfm::analysis::{seriate_covariance, seriation_objective, uncorrelatedness};
use rank1_nrsfm::dataio::{
    export_results, load_results, load_tracks, synthesize, write_tracks, ModeDistribution, SyntheticSpec, TrackFormat,
};
use rank1_nrsfm::factorize::{assemble_measurements, max_modes};
use rank1_nrsfm::ica::Contrast;
use rank1_nrsfm::model::Variant;
use rank1_nrsfm::numeric::singular_values;
use rank1_nrsfm::pipeline::{run, PipelineConfig};
use rank1_nrsfm::{Error, Result};

/// Relative singular-value cutoff for the reported numerical rank.
const RANK_TOL: f64 = 1e-10;

#[derive(Parser)]
#[command(name = "rank1-nrsfm", version, about = "Non-rigid structure from motion with rank-1 basis shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic deforming scene with known ground truth.
    Synth {
        #[arg(long)]
        frames: usize,
        #[arg(long)]
        points: usize,
        #[arg(long)]
        modes: usize,
        /// Standard deviation of the pixel noise.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Distribution of the raw mode rows (gaussian or uniform).
        #[arg(long, default_value = "gaussian")]
        mode_distribution: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full reconstruction and export the results.
    Factorize {
        #[arg(long)]
        input: PathBuf,
        /// csv or matrix; inferred from the extension when omitted.
        #[arg(long)]
        format: Option<TrackFormat>,
        /// Number of rank-1 deformation modes.
        #[arg(long)]
        k: usize,
        #[arg(long, default_value = "pca")]
        variant: Variant,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "logcosh")]
        ica_contrast: Contrast,
        #[arg(long)]
        ica_tol: Option<f64>,
        #[arg(long)]
        solver_tol: Option<f64>,
        /// Leave wall-clock timings out of report.json.
        #[arg(long)]
        no_timings: bool,
    },
    /// Recompute the inverse SNR of exported results against a track file.
    Evaluate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        format: Option<TrackFormat>,
        #[arg(long)]
        results: PathBuf,
    },
    /// Print the coefficient covariance and its seriation.
    Cov {
        #[arg(long)]
        results: PathBuf,
    },
}

fn format_for(path: &Path, format: Option<TrackFormat>) -> TrackFormat {
    format.unwrap_or_else(|| TrackFormat::from_path(path))
}

fn numerical_rank(s: &[f64]) -> usize {
    let top = s.first().copied().unwrap_or(0.0);
    s.iter().filter(|&&v| v > RANK_TOL * top).count()
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    frames: usize,
    points: usize,
    modes: usize,
    noise: f64,
    seed: u64,
    distribution: &str,
    out: &Path,
) -> Result<()> {
    let mode_distribution = match distribution {
        "gaussian" => ModeDistribution::Gaussian,
        "uniform" => ModeDistribution::Uniform,
        other => {
            return Err(Error::InvalidInput(format!(
                "unknown mode distribution '{other}', expected gaussian or uniform"
            )))
        }
    };
    let spec = SyntheticSpec {
        mode_distribution,
        ..SyntheticSpec::new(frames, points, modes, noise, seed)
    };
    let (tracks, truth) = synthesize(&spec)?;
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    write_tracks(&out.join("tracks.csv"), TrackFormat::Csv, &tracks)?;
    write_tracks(&out.join("tracks.txt"), TrackFormat::Matrix, &tracks)?;
    let gt = serde_json::to_string_pretty(&truth).expect("ground truth serializes") + "\n";
    let gt_path = out.join("ground_truth.json");
    std::fs::write(&gt_path, gt).map_err(|e| Error::Io { path: gt_path, source: e })?;

    let w = assemble_measurements(&tracks)?;
    let s = singular_values(w.w())?;
    println!("frames {frames}, points {points}, modes {modes}, noise std {noise}, seed {seed}");
    println!("numerical rank {} (model rank K+3 = {})", numerical_rank(&s), modes + 3);
    println!("wrote tracks.csv, tracks.txt, tracks.json, ground_truth.json to {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_factorize(
    input: &Path,
    format: Option<TrackFormat>,
    k: usize,
    variant: Variant,
    out: &Path,
    contrast: Contrast,
    ica_tol: Option<f64>,
    solver_tol: Option<f64>,
    no_timings: bool,
) -> Result<()> {
    let tracks = load_tracks(input, format_for(input, format))?;
    let mut cfg = PipelineConfig::new(k, variant);
    cfg.ica.contrast = contrast;
    if let Some(t) = ica_tol {
        if !(t > 0.0) {
            return Err(Error::InvalidInput(format!("--ica-tol must be positive, got {t}")));
        }
        cfg.ica.tol = t;
    }
    if let Some(t) = solver_tol {
        if !(t > 0.0) {
            return Err(Error::InvalidInput(format!("--solver-tol must be positive, got {t}")));
        }
        cfg.solver.tol = t;
    }
    let output = run(&tracks, &cfg).map_err(|e| match e {
        Error::RankOutOfRange { rank, .. } => Error::InvalidInput(format!(
            "--k {rank} is out of range: K must satisfy 1 <= K <= min(2I, J) - 3 = {} for {} frames and {} points",
            max_modes(tracks.frames(), tracks.points()),
            tracks.frames(),
            tracks.points()
        )),
        other => other,
    })?;
    export_results(&output, out, !no_timings)?;

    println!(
        "frames {}, points {}, K {}, variant {}",
        tracks.frames(),
        tracks.points(),
        k,
        variant
    );
    println!("inverse SNR {:.6e} %", output.inverse_snr_percent);
    for t in &output.timings {
        println!("  {:<13} {:>10.3} ms", t.stage, t.ms);
    }
    println!("  {:<13} {:>10.3} ms", "total", output.total_ms());
    for w in &output.warnings {
        println!("warning: {w}");
    }
    println!("wrote results to {}", out.display());
    Ok(())
}

fn cmd_evaluate(input: &Path, format: Option<TrackFormat>, results: &Path) -> Result<()> {
    let tracks = load_tracks(input, format_for(input, format))?;
    let bundle = load_results(results)?;
    let snr = bundle.evaluate(&tracks)?;
    println!("inverse SNR {:.6e} %", snr.percent);
    println!(
        "reported    {:.6e} %",
        bundle.report.reconstruction.inverse_snr_percent
    );
    Ok(())
}

fn cmd_cov(results: &Path) -> Result<()> {
    let bundle = load_results(results)?;
    let c = &bundle.cov;
    let k = c.nrows();
    println!("coefficient covariance ({k}x{k}):");
    for p in 0..k {
        let row: Vec<String> = (0..k).map(|q| format!("{:>13.6e}", c[(p, q)])).collect();
        println!("  {}", row.join(" "));
    }
    let perm = seriate_covariance(c);
    let identity: Vec<usize> = (0..k).collect();
    let order: Vec<String> = perm.iter().map(usize::to_string).collect();
    println!("seriation order: {}", order.join(" "));
    println!(
        "concentration objective: {:.6e} (identity order {:.6e})",
        seriation_objective(c, &perm),
        seriation_objective(c, &identity)
    );
    println!("max off-diagonal / max diagonal: {:.6e}", uncorrelatedness(c));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth {
            frames,
            points,
            modes,
            noise,
            seed,
            mode_distribution,
            out,
        } => cmd_synth(frames, points, modes, noise, seed, &mode_distribution, &out),
        Command::Factorize {
            input,
            format,
            k,
            variant,
            out,
            ica_contrast,
            ica_tol,
            solver_tol,
            no_timings,
        } => cmd_factorize(
            &input,
            format,
            k,
            variant,
            &out,
            ica_contrast,
            ica_tol,
            solver_tol,
            no_timings,
        ),
        Command::Evaluate { input, format, results } => cmd_evaluate(&input, format, &results),
        Command::Cov { results } => cmd_cov(&results),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
