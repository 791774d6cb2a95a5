//! CSV output.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{EmarError, Result};

/// Nine significant digits in scientific notation; `nan`, `inf`, `-inf`
/// for non-finite values.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{v:.8e}")
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EmarError + '_ {
    move |source| EmarError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write a header row and one row per record. Fields must not contain
/// commas or newlines.
pub fn write_csv<H: AsRef<str>>(path: &Path, header: &[H], rows: &[Vec<String>]) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let header: Vec<&str> = header.iter().map(AsRef::as_ref).collect();
    writeln!(out, "{}", header.join(",")).map_err(io_err(path))?;
    for row in rows {
        if row.len() != header.len() {
            return Err(EmarError::invalid(format!(
                "row has {} fields, header has {}",
                row.len(),
                header.len()
            )));
        }
        writeln!(out, "{}", row.join(",")).map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formats_nine_significant_digits() {
        assert_eq!(fmt_f64(1.0), "1.00000000e0");
        assert_eq!(fmt_f64(-0.000123456789123), "-1.23456789e-4");
        assert_eq!(fmt_f64(f64::NAN), "nan");
        assert_eq!(fmt_f64(f64::NEG_INFINITY), "-inf");
    }

    #[test]
    fn header_only_and_one_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        write_csv(&p, &["x", "y"], &[]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "x,y\n");
        write_csv(&p, &["x", "y"], &[vec!["1".into(), fmt_f64(0.1)]]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 2);
    }

    #[test]
    fn parse_back_within_precision() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.csv");
        let values = [std::f64::consts::PI, -1.0 / 3.0, 6.02214076e23, 1e-300];
        let rows: Vec<Vec<String>> = values.iter().map(|&v| vec![fmt_f64(v)]).collect();
        write_csv(&p, &["v"], &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        for (line, v) in text.lines().skip(1).zip(values) {
            let back: f64 = line.parse().unwrap();
            assert!(((back - v) / v).abs() < 1e-8);
        }
    }

    #[test]
    fn mismatched_row_and_bad_path() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_csv(
            &dir.path().join("c.csv"),
            &["x"],
            &[vec!["1".into(), "2".into()]]
        )
        .is_err());
        assert!(matches!(
            write_csv(&dir.path().join("missing/c.csv"), &["x"], &[]),
            Err(EmarError::Io { .. })
        ));
    }
}
