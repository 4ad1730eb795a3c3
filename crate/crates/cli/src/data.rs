use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub y: Vec<f64>,
    pub w: Vec<f64>,
}

/// Reads the `y` and `w` columns of a headed, comma-separated file.
pub fn read_dataset(path: &Path) -> CliResult<Dataset> {
    let file = File::open(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    read_dataset_from(file, &path.display().to_string())
}

pub fn read_dataset_from<R: std::io::Read>(source: R, label: &str) -> CliResult<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(source);
    let headers = rdr
        .headers()
        .map_err(|e| CliError::Input(format!("{label}: cannot read header: {e}")))?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Input(format!("{label}: missing column '{name}'")))
    };
    let (iy, iw) = (column("y")?, column("w")?);
    let mut y = Vec::new();
    let mut w = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            CliError::Input(format!("{label}: line {line}: {e}"))
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize, name: &str| -> CliResult<f64> {
            let raw = rec.get(i).unwrap_or("");
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| CliError::Input(format!("{label}: line {line}: column '{name}' has non-numeric value '{raw}'")))
        };
        y.push(field(iy, "y")?);
        w.push(field(iw, "w")?);
    }
    if y.is_empty() {
        return Err(CliError::Input(format!("{label}: no data rows")));
    }
    Ok(Dataset { y, w })
}

/// Shortest decimal string that parses back to the same value.
pub fn fmt_num(v: f64) -> String {
    format!("{v}")
}

fn output_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Output(format!("{}: {e}", path.display()))
}

pub fn write_rows<I>(path: &Path, header: &[&str], rows: I) -> CliResult<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut wtr = csv::Writer::from_path(path).map_err(|e| output_err(path, e))?;
    wtr.write_record(header).map_err(|e| output_err(path, e))?;
    for r in rows {
        wtr.write_record(&r).map_err(|e| output_err(path, e))?;
    }
    wtr.flush().map_err(|e| output_err(path, e))
}

pub fn write_curve(path: &Path, grid: &[f64], fitted: &[f64]) -> CliResult<()> {
    write_rows(
        path,
        &["d", "fitted_mean"],
        grid.iter().zip(fitted).map(|(d, f)| vec![fmt_num(*d), fmt_num(*f)]),
    )
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    let mut f = File::create(path).map_err(|e| output_err(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| output_err(path, e))
}
