use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{fmt_f64, read_to_string, write_string};
use crate::error::{Error, Result};
use crate::model::TrackTable;

/// On-disk layout of a track file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackFormat {
    /// Long CSV with header `frame,point,x,y` and an optional `label` column.
    Csv,
    /// `2I` lines of `J` whitespace-separated numbers (x row, then y row, per
    /// frame) plus a JSON sidecar `{"frames": I, "points": J}`.
    Matrix,
}

impl TrackFormat {
    /// `.csv` files are CSV; anything else is the matrix format.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => TrackFormat::Csv,
            _ => TrackFormat::Matrix,
        }
    }
}

impl fmt::Display for TrackFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrackFormat::Csv => "csv",
            TrackFormat::Matrix => "matrix",
        })
    }
}

impl FromStr for TrackFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(TrackFormat::Csv),
            "matrix" | "txt" => Ok(TrackFormat::Matrix),
            other => Err(Error::InvalidInput(format!(
                "unknown track format '{other}', expected csv or matrix"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixSidecar {
    pub frames: usize,
    pub points: usize,
}

/// Path of the JSON sidecar that accompanies a matrix-format file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn load_tracks(path: &Path, format: TrackFormat) -> Result<TrackTable> {
    match format {
        TrackFormat::Csv => load_csv(path),
        TrackFormat::Matrix => load_matrix(path),
    }
}

pub fn write_tracks(path: &Path, format: TrackFormat, tracks: &TrackTable) -> Result<()> {
    match format {
        TrackFormat::Csv => write_csv(path, tracks),
        TrackFormat::Matrix => write_matrix(path, tracks),
    }
}

fn parse_num<T: FromStr>(path: &Path, line: usize, field: &str, raw: &str) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| Error::parse(path, format!("line {line}: cannot parse {field} '{raw}'")))
}

fn load_csv(path: &Path) -> Result<TrackTable> {
    let text = read_to_string(path)?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::parse(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let has_label = match header.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
        ["frame", "point", "x", "y"] => false,
        ["frame", "point", "x", "y", "label"] => true,
        _ => {
            return Err(Error::parse(
                path,
                format!("header must be 'frame,point,x,y[,label]', got '{}'", header.join(",")),
            ))
        }
    };

    let mut rows = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let line = n + 2;
        let rec = rec.map_err(|e| Error::parse(path, format!("line {line}: {e}")))?;
        let frame: usize = parse_num(path, line, "frame", &rec[0])?;
        let point: usize = parse_num(path, line, "point", &rec[1])?;
        let x: f64 = parse_num(path, line, "x", &rec[2])?;
        let y: f64 = parse_num(path, line, "y", &rec[3])?;
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::NonFinite(format!("{} line {line}", path.display())));
        }
        let label = has_label.then(|| rec[4].to_string());
        rows.push((frame, point, [x, y], label));
    }
    if rows.is_empty() {
        return Err(Error::parse(path, "no observations"));
    }
    let frames = rows.iter().map(|r| r.0).max().unwrap_or(0) + 1;
    let points = rows.iter().map(|r| r.1).max().unwrap_or(0) + 1;

    let mut coords: Vec<Option<[f64; 2]>> = vec![None; frames * points];
    let mut labels: Vec<Option<String>> = vec![None; points];
    for (frame, point, xy, label) in rows {
        let slot = &mut coords[frame * points + point];
        if slot.is_some() {
            return Err(Error::parse(
                path,
                format!("duplicate observation for frame {frame}, point {point}"),
            ));
        }
        *slot = Some(xy);
        if let Some(label) = label {
            match &labels[point] {
                Some(prev) if *prev != label => {
                    return Err(Error::parse(
                        path,
                        format!("point {point} is labelled both '{prev}' and '{label}'"),
                    ))
                }
                _ => labels[point] = Some(label),
            }
        }
    }
    if let Some(gap) = coords.iter().position(Option::is_none) {
        return Err(Error::DenseCoverage {
            frame: gap / points,
            point: gap % points,
        });
    }
    let table = TrackTable::new(frames, points, coords.into_iter().flatten().collect())?;
    if has_label {
        table.with_labels(labels.into_iter().map(Option::unwrap_or_default).collect())
    } else {
        Ok(table)
    }
}

fn write_csv(path: &Path, tracks: &TrackTable) -> Result<()> {
    let labels = tracks.labels();
    let mut out = String::from(if labels.is_some() {
        "frame,point,x,y,label\n"
    } else {
        "frame,point,x,y\n"
    });
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for i in 0..tracks.frames() {
        for j in 0..tracks.points() {
            let [x, y] = tracks.get(i, j);
            let mut rec = vec![i.to_string(), j.to_string(), fmt_f64(x), fmt_f64(y)];
            if let Some(l) = labels {
                rec.push(l[j].clone());
            }
            wtr.write_record(&rec).map_err(|e| Error::parse(path, e.to_string()))?;
        }
    }
    let body = wtr.into_inner().map_err(|e| Error::parse(path, e.to_string()))?;
    out.push_str(&String::from_utf8(body).expect("csv output is utf-8"));
    write_string(path, &out)
}

fn load_matrix(path: &Path) -> Result<TrackTable> {
    let side_path = sidecar_path(path);
    let side: MatrixSidecar = serde_json::from_str(&read_to_string(&side_path)?)
        .map_err(|e| Error::parse(&side_path, e.to_string()))?;
    let m = read_number_grid(path)?;
    if m.nrows() != 2 * side.frames || m.ncols() != side.points {
        return Err(Error::Dimension(format!(
            "{}: sidecar declares {} frames x {} points, file holds {}x{} values",
            path.display(),
            side.frames,
            side.points,
            m.nrows(),
            m.ncols()
        )));
    }
    TrackTable::from_matrix(&m)
}

fn write_matrix(path: &Path, tracks: &TrackTable) -> Result<()> {
    write_number_grid(path, &tracks.to_matrix(), ' ')?;
    let side = MatrixSidecar {
        frames: tracks.frames(),
        points: tracks.points(),
    };
    let json = serde_json::to_string_pretty(&side).expect("sidecar serializes");
    write_string(&sidecar_path(path), &(json + "\n"))
}

/// Reads a grid of numbers separated by whitespace or commas. Blank lines are
/// skipped; every other line must have the same number of entries.
pub fn read_number_grid(path: &Path) -> Result<DMatrix<f64>> {
    let text = read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(|s| parse_num::<f64>(path, n + 1, "value", s))
            .collect::<Result<Vec<f64>>>()?;
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{} line {}", path.display(), n + 1)));
        }
        if let Some(first) = rows.first() {
            if first.len() != vals.len() {
                return Err(Error::parse(
                    path,
                    format!("line {}: expected {} values, got {}", n + 1, first.len(), vals.len()),
                ));
            }
        }
        rows.push(vals);
    }
    if rows.is_empty() {
        return Err(Error::parse(path, "no data"));
    }
    let cols = rows[0].len();
    Ok(DMatrix::from_fn(rows.len(), cols, |r, c| rows[r][c]))
}

pub fn write_number_grid(path: &Path, m: &DMatrix<f64>, sep: char) -> Result<()> {
    let mut out = String::new();
    for r in 0..m.nrows() {
        let line: Vec<String> = m.row(r).iter().map(|&v| fmt_f64(v)).collect();
        out.push_str(&line.join(&sep.to_string()));
        out.push('\n');
    }
    write_string(path, &out)
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}
