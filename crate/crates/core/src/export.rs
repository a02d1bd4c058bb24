//! File output helpers: 17-significant-digit float formatting (exact f64
//! round trips), matrix CSV, P2 PGM heatmaps, and atomic writes
//! (temp file + rename).

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use std::io::Write;
use std::path::Path;

/// Formats with 17 significant digits; parsing the result recovers the
/// exact same f64.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    format!("{x:.16e}")
}

/// Writes bytes atomically: temp file in the same directory, then rename.
/// Temp names carry a process-unique counter so concurrent writers of the
/// same target cannot trip over each other.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::sync::atomic::{AtomicU64, Ordering};
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.{}.{}.tmp",
        path.file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "out".into()),
        std::process::id(),
        COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Matrix as headerless CSV, one row per line, 17 significant digits.
pub fn matrix_to_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|&v| fmt_f64(v)).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn write_matrix_csv(path: &Path, m: &Matrix) -> Result<()> {
    write_atomic(path, matrix_to_csv(m).as_bytes())
}

/// Parses a headerless numeric CSV back into a matrix.
pub fn read_matrix_csv(path: &Path) -> Result<Matrix> {
    let text = std::fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for cell in line.split(',') {
            row.push(cell.trim().parse::<f64>().map_err(|_| Error::Parse {
                line: idx + 1,
                msg: format!("non-numeric cell {cell:?}"),
            })?);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 0,
            msg: "empty matrix file".into(),
        });
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Parse {
            line: 0,
            msg: "ragged matrix rows".into(),
        });
    }
    Ok(Matrix::from_rows(&rows))
}

/// Attention heatmap as text PGM (P2): row i is the query step, column j
/// the key step, and [0, max] maps linearly onto [255, 0] so that zero
/// weight renders white and the strongest weight black.
pub fn matrix_to_pgm(m: &Matrix) -> String {
    let max = m.data().iter().cloned().fold(0.0f64, f64::max);
    let mut out = format!("P2\n{} {}\n255\n", m.cols(), m.rows());
    for i in 0..m.rows() {
        let mut line = String::new();
        for j in 0..m.cols() {
            let v = m.get(i, j);
            let pixel = if max > 0.0 {
                (255.0 * (1.0 - v / max)).round().clamp(0.0, 255.0) as u8
            } else {
                255
            };
            let tok = pixel.to_string();
            // keep PGM lines at 70 characters or less
            if !line.is_empty() && line.len() + 1 + tok.len() > 70 {
                out.push_str(&line);
                out.push('\n');
                line.clear();
            }
            if !line.is_empty() {
                line.push(' ');
            }
            line.push_str(&tok);
        }
        out.push_str(&line);
        out.push('\n');
    }
    out
}

pub fn write_matrix_pgm(path: &Path, m: &Matrix) -> Result<()> {
    write_atomic(path, matrix_to_pgm(m).as_bytes())
}
