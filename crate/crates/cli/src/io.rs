//! Datasets as a directory holding `z.csv` (one row per subject, header
//! `t=<point>` per column) and `y.csv` (header `y`).

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use sofr_transfer::RawDataset;

use crate::error::{CliError, CliResult};

pub const Z_FILE: &str = "z.csv";
pub const Y_FILE: &str = "y.csv";

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn reader(path: &Path) -> CliResult<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| io_err(path, e))
}

fn cell(path: &Path, text: &str, row: usize, col: usize) -> CliResult<f64> {
    text.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| io_err(path, format!("row {row}, column {col}: '{text}' is not a finite number")))
}

fn read_grid(path: &Path, headers: &csv::StringRecord) -> CliResult<Vec<f64>> {
    headers
        .iter()
        .enumerate()
        .map(|(c, h)| {
            h.strip_prefix("t=")
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| io_err(path, format!("column {}: header '{h}' is not of the form t=<number>", c + 1)))
        })
        .collect()
}

/// Reads curves and responses; `id` tags the dataset (0 for the target).
pub fn load_dataset_files(path_z: &Path, path_y: &Path, id: usize) -> CliResult<RawDataset> {
    let mut rz = reader(path_z)?;
    let grid = read_grid(path_z, rz.headers().map_err(|e| io_err(path_z, e))?)?;
    let j = grid.len();
    let mut values = Vec::new();
    for (r, rec) in rz.records().enumerate() {
        let rec = rec.map_err(|e| io_err(path_z, e))?;
        if rec.len() != j {
            return Err(io_err(path_z, format!("row {}: {} values for {j} grid points", r + 1, rec.len())));
        }
        for (c, v) in rec.iter().enumerate() {
            values.push(cell(path_z, v, r + 1, c + 1)?);
        }
    }
    let n = values.len() / j.max(1);

    let mut ry = reader(path_y)?;
    let hy = ry.headers().map_err(|e| io_err(path_y, e))?;
    if hy.len() != 1 || &hy[0] != "y" {
        return Err(io_err(path_y, "expected a single column with header 'y'"));
    }
    let mut y = Vec::new();
    for (r, rec) in ry.records().enumerate() {
        let rec = rec.map_err(|e| io_err(path_y, e))?;
        if rec.len() != 1 {
            return Err(io_err(path_y, format!("row {}: expected one value", r + 1)));
        }
        y.push(cell(path_y, &rec[0], r + 1, 1)?);
    }
    if y.len() != n {
        return Err(CliError::Io(format!(
            "row count mismatch: {} has {n} curves but {} has {} responses",
            path_z.display(),
            path_y.display(),
            y.len()
        )));
    }
    // rows are subjects on disk, columns are subjects in memory
    let z = DMatrix::from_row_slice(n, j, &values).transpose();
    RawDataset::new(z, DVector::from_vec(y), grid, id).map_err(|e| io_err(path_z, e))
}

pub fn load_dataset(dir: &Path, id: usize) -> CliResult<RawDataset> {
    if !dir.is_dir() {
        return Err(CliError::Io(format!("dataset directory not found: {}", dir.display())));
    }
    load_dataset_files(&dir.join(Z_FILE), &dir.join(Y_FILE), id)
}

fn writer(path: &Path) -> CliResult<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| io_err(path, e))
}

/// Writes `raw` so that [`load_dataset`] reads back identical values.
pub fn save_dataset(raw: &RawDataset, dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let pz = dir.join(Z_FILE);
    let mut wz = writer(&pz)?;
    wz.write_record(raw.grid().iter().map(|t| format!("t={t}")))
        .map_err(|e| io_err(&pz, e))?;
    for col in raw.z().column_iter() {
        wz.write_record(col.iter().map(|v| v.to_string()))
            .map_err(|e| io_err(&pz, e))?;
    }
    wz.flush().map_err(|e| io_err(&pz, e))?;
    let py = dir.join(Y_FILE);
    let mut wy = writer(&py)?;
    wy.write_record(["y"]).map_err(|e| io_err(&py, e))?;
    for v in raw.y().iter() {
        wy.write_record([v.to_string()]).map_err(|e| io_err(&py, e))?;
    }
    wy.flush().map_err(|e| io_err(&py, e))
}

/// Writes rows of string cells under `header`.
pub fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut w = writer(path)?;
    w.write_record(header).map_err(|e| io_err(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, z: &str, y: &str) {
        std::fs::write(dir.join(Z_FILE), z).unwrap();
        std::fs::write(dir.join(Y_FILE), y).unwrap();
    }

    #[test]
    fn small_dataset() {
        let d = tempfile::tempdir().unwrap();
        write(d.path(), "t=0,t=0.5,t=1\n1,2,3\n4,5,6\n", "y\n0.5\n-1\n");
        let raw = load_dataset(d.path(), 0).unwrap();
        assert_eq!((raw.j(), raw.n()), (3, 2));
        assert_eq!(raw.z()[(1, 0)], 2.0);
        assert_eq!(raw.z()[(2, 1)], 6.0);
        assert_eq!(raw.y()[1], -1.0);
    }

    #[test]
    fn uneven_grid_reports_deviation() {
        let d = tempfile::tempdir().unwrap();
        write(d.path(), "t=0,t=0.4,t=1\n1,2,3\n", "y\n0\n");
        let e = load_dataset(d.path(), 0).unwrap_err().to_string();
        assert!(e.contains("deviation 0.1"), "{e}");
    }

    #[test]
    fn input_errors() {
        let d = tempfile::tempdir().unwrap();
        write(d.path(), "t=0,t=0.5,t=1\n1,2,3\n4,5,6\n", "y\n0.5\n");
        assert!(load_dataset(d.path(), 0).unwrap_err().to_string().contains("row count mismatch"));
        write(d.path(), "t=0,t=0.5,t=1\n1,x,3\n", "y\n0.5\n");
        let e = load_dataset(d.path(), 0).unwrap_err().to_string();
        assert!(e.contains("row 1, column 2"), "{e}");
        write(d.path(), "t=0,t=0.5,t=1.5\n1,2,3\n", "y\n0.5\n");
        assert!(load_dataset(d.path(), 0).unwrap_err().to_string().contains("outside [0, 1]"));
        write(d.path(), "t=0,s=0.5,t=1\n1,2,3\n", "y\n0.5\n");
        assert!(load_dataset(d.path(), 0).is_err());
        write(d.path(), "t=0,t=0.5,t=1\n1,2,3\n", "resp\n0.5\n");
        assert!(load_dataset(d.path(), 0).is_err());
        let e = load_dataset(&d.path().join("missing"), 0).unwrap_err();
        assert!(e.to_string().contains("missing") && e.exit_code() == 2);
    }

    #[test]
    fn round_trip_is_bitwise() {
        let d = tempfile::tempdir().unwrap();
        let j = 7;
        let grid: Vec<f64> = (0..j).map(|i| i as f64 / (j - 1) as f64).collect();
        let z = DMatrix::from_fn(j, 5, |a, b| ((a * 7 + b) as f64).sin() / 3.0 + 1e-17 * b as f64);
        let y = DVector::from_fn(5, |i, _| (i as f64).exp() * std::f64::consts::PI);
        let raw = RawDataset::new(z, y, grid, 4).unwrap();
        save_dataset(&raw, d.path()).unwrap();
        let back = load_dataset(d.path(), 4).unwrap();
        assert_eq!(back, raw);
    }
}
