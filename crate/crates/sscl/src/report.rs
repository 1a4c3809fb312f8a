//! AUT tables over run directories.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::{AutSummary, AUT_COLUMNS};
use crate::trainer::fmt_f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Markdown,
}

/// The mean AUT summary of one run, read back from its `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub name: String,
    pub aut: AutSummary,
}

/// Run name: the directory's final component.
fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

pub fn read_run(dir: &Path) -> Result<RunRow> {
    let path: PathBuf = dir.join("metrics.csv");
    if !path.is_file() {
        return Err(Error::MissingMetrics(path));
    }
    let mut reader = csv::Reader::from_path(&path)?;
    let mut values = [None; 6];
    for record in reader.records() {
        let record = record?;
        if record.get(0) != Some("summary") || record.get(1) != Some("mean") {
            continue;
        }
        let metric = record.get(4).unwrap_or("");
        if let Some(k) = AUT_COLUMNS.iter().position(|c| *c == metric) {
            let raw = record.get(5).unwrap_or("");
            let v: f64 = raw.parse().map_err(|_| Error::MalformedRow {
                line: record.position().map_or(0, |p| p.line() as usize),
                reason: format!("bad value {raw:?} for {metric}"),
            })?;
            values[k] = Some(v);
        }
    }
    let mut out = [0.0; 6];
    for (k, v) in values.iter().enumerate() {
        out[k] = v.ok_or_else(|| Error::MissingColumn(AUT_COLUMNS[k].to_string()))?;
    }
    Ok(RunRow {
        name: run_name(dir),
        aut: AutSummary::from_values(out),
    })
}

/// Reads every run and orders rows by run name.
pub fn collect(dirs: &[PathBuf]) -> Result<Vec<RunRow>> {
    let mut rows = dirs.iter().map(|d| read_run(d)).collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(rows)
}

pub fn render<W: Write>(mut out: W, rows: &[RunRow], format: Format) -> Result<()> {
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(out);
            let mut header = vec!["run"];
            header.extend(AUT_COLUMNS);
            w.write_record(&header)?;
            for r in rows {
                let mut rec = vec![r.name.clone()];
                rec.extend(r.aut.values().iter().map(|&v| fmt_f64(v)));
                w.write_record(&rec)?;
            }
            w.flush()?;
        }
        Format::Markdown => {
            writeln!(out, "| run | {} |", AUT_COLUMNS.join(" | "))?;
            writeln!(out, "|---|{}", "---:|".repeat(AUT_COLUMNS.len()))?;
            for r in rows {
                let cells: Vec<String> = r.aut.values().iter().map(|v| format!("{v:.4}")).collect();
                writeln!(out, "| {} | {} |", r.name, cells.join(" | "))?;
            }
        }
    }
    Ok(())
}

/// Parses the csv rendering back into rows.
pub fn parse_csv(text: &str) -> Result<Vec<RunRow>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let mut v = [0.0; 6];
        for (k, slot) in v.iter_mut().enumerate() {
            let raw = record.get(k + 1).ok_or_else(|| Error::MissingColumn(AUT_COLUMNS[k].into()))?;
            *slot = raw.parse().map_err(|_| Error::MalformedRow {
                line: record.position().map_or(0, |p| p.line() as usize),
                reason: format!("bad value {raw:?}"),
            })?;
        }
        rows.push(RunRow {
            name: record.get(0).unwrap_or("").to_string(),
            aut: AutSummary::from_values(v),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_run(root: &Path, name: &str, base: f64) -> PathBuf {
        let dir = root.join(name);
        std::fs::create_dir_all(&dir).unwrap();
        let mut text = String::from("section,seed,task,split,metric,value\n");
        for (k, col) in AUT_COLUMNS.iter().enumerate() {
            text.push_str(&format!("summary,mean,,,{col},{:?}\n", base + k as f64 / 7.0));
            text.push_str(&format!("summary,std,,,{col},0.0\n"));
        }
        std::fs::write(dir.join("metrics.csv"), text).unwrap();
        dir
    }

    #[test]
    fn rows_sorted_by_name_and_csv_round_trips() {
        let root = tempfile::tempdir().unwrap();
        let b = fake_run(root.path(), "b-full", 0.1);
        let a = fake_run(root.path(), "a-ablation", 0.3);
        let rows = collect(&[b, a]).unwrap();
        assert_eq!(rows[0].name, "a-ablation");
        let mut buf = Vec::new();
        render(&mut buf, &rows, Format::Csv).unwrap();
        let back = parse_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back, rows);
        for (x, y) in back.iter().zip(&rows) {
            for (u, v) in x.aut.values().iter().zip(y.aut.values()) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
    }

    #[test]
    fn markdown_uses_the_column_headers() {
        let root = tempfile::tempdir().unwrap();
        let rows = collect(&[fake_run(root.path(), "only", 0.5)]).unwrap();
        let mut buf = Vec::new();
        render(&mut buf, &rows, Format::Markdown).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(
            "| run | seen-AUT(B) | seen-AUT(A) | unseen-AUT(B) | unseen-AUT(A) | overall-AUT(B) | overall-AUT(A) |"
        ));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn missing_metrics_is_an_error() {
        let root = tempfile::tempdir().unwrap();
        assert!(matches!(read_run(root.path()), Err(Error::MissingMetrics(_))));
    }
}
