//! Trajectory CSV writer/reader. Header row with named channels, values at
//! 12 significant digits, LF line endings. The reader reconstructs a
//! `Trajectory`, so a written file round-trips into identical check results.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use slackdyn_core::Trajectory;

#[derive(Debug, Error)]
pub enum CsvError {
    #[error("cannot access trajectory file: {0}")]
    Io(#[from] std::io::Error),
    #[error("trajectory schema: {0}")]
    Schema(String),
}

/// 12 significant digits; plain notation where compact, scientific otherwise.
fn fmt(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if (1e-4..1e12).contains(&a) {
        let s = format!("{:.*}", sig_decimals(a), v);
        trim_zeros(s)
    } else {
        format!("{:.11e}", v)
    }
}

fn sig_decimals(a: f64) -> usize {
    let int_digits = a.log10().floor() as i64 + 1;
    (12 - int_digits).max(0) as usize
}

fn trim_zeros(mut s: String) -> String {
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    s
}

fn write_rows<W: Write>(
    w: &mut W,
    traj: &Trajectory,
    keep: &[usize],
    names: &[String],
) -> Result<(), CsvError> {
    write!(w, "t")?;
    for n in names {
        write!(w, ",{}", n)?;
    }
    writeln!(w)?;
    for k in 0..traj.len() {
        let row = traj.row(k);
        write!(w, "{}", fmt(traj.times()[k]))?;
        for &i in keep {
            write!(w, ",{}", fmt(row[i]))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Full trajectory CSV with every recorded channel.
pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<(), CsvError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let keep: Vec<usize> = (0..traj.names().len()).collect();
    write_rows(&mut w, traj, &keep, traj.names())?;
    w.flush()?;
    Ok(())
}

/// Power-decomposition CSV: only the per-device ps/pt/p channels.
pub fn write_powersplit(path: &Path, traj: &Trajectory) -> Result<(), CsvError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let mut keep = Vec::new();
    let mut names = Vec::new();
    for (i, n) in traj.names().iter().enumerate() {
        if n.starts_with("dev") && (n.ends_with(".ps") || n.ends_with(".pt") || n.ends_with(".p")) {
            keep.push(i);
            names.push(n.clone());
        }
    }
    write_rows(&mut w, traj, &keep, &names)?;
    w.flush()?;
    Ok(())
}

/// Read a trajectory CSV produced by [`write_trajectory`].
pub fn read_trajectory(path: &Path) -> Result<Trajectory, CsvError> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| CsvError::Schema("empty file".into()))??;
    let mut cols = header.split(',');
    if cols.next() != Some("t") {
        return Err(CsvError::Schema("first column must be 't'".into()));
    }
    let names: Vec<String> = cols.map(|s| s.to_string()).collect();
    if names.is_empty() {
        return Err(CsvError::Schema("no data channels in header".into()));
    }
    let mut traj = Trajectory::new(names.clone());
    let mut prev_t = f64::NEG_INFINITY;
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut vals = line.split(',').map(|s| {
            s.parse::<f64>()
                .map_err(|_| CsvError::Schema(format!("line {}: bad number '{}'", lineno + 2, s)))
        });
        let t = vals
            .next()
            .ok_or_else(|| CsvError::Schema(format!("line {}: empty row", lineno + 2)))??;
        let row: Vec<f64> = vals.collect::<Result<_, _>>()?;
        if row.len() != names.len() {
            return Err(CsvError::Schema(format!(
                "line {}: {} values, expected {}",
                lineno + 2,
                row.len(),
                names.len()
            )));
        }
        if t <= prev_t {
            return Err(CsvError::Schema(format!(
                "line {}: time {} not strictly increasing",
                lineno + 2,
                t
            )));
        }
        prev_t = t;
        traj.push(t, row);
    }
    if traj.is_empty() {
        return Err(CsvError::Schema("no data rows".into()));
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fmt_keeps_twelve_significant_digits() {
        assert_eq!(fmt(0.0), "0");
        assert_eq!(fmt(1.0), "1");
        assert_eq!(fmt(-0.5), "-0.5");
        assert_eq!(fmt(1.0471975511965976), "1.0471975512");
        assert!(fmt(3.2e-7).contains('e'));
    }

    #[test]
    fn round_trip_preserves_values_to_twelve_digits() {
        let mut traj = Trajectory::new(vec!["a".into(), "b".into()]);
        traj.push(0.0, vec![1.0, -0.123456789012345]);
        traj.push(0.01, vec![2.0e-9, 3.14159265358979]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_trajectory(&p, &traj).unwrap();
        let back = read_trajectory(&p).unwrap();
        assert_eq!(back.names(), traj.names());
        assert_eq!(back.len(), 2);
        for k in 0..2 {
            for i in 0..2 {
                let (a, b) = (traj.row(k)[i], back.row(k)[i]);
                assert!((a - b).abs() <= 1e-11 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn truncated_row_is_a_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "t,a,b\n0,1,2\n0.01,3\n").unwrap();
        assert!(matches!(read_trajectory(&p), Err(CsvError::Schema(_))));
    }
}
