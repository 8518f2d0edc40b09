//! CSV records and serialization.
//!
//! Floats are written with 17 significant digits so every row round-trips
//! through the parser losslessly and reruns are byte-identical.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// `{:.16e}` gives one leading digit plus 16 fractional digits: 17
/// significant digits, enough to reproduce any f64 exactly.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn parse_f64(s: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|e| Error::Parameter(format!("bad float '{s}': {e}")))
}

/// One record of the filter-learning comparison experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Fig2Record {
    pub method: String,
    pub seed: u64,
    /// Plot-time index; the system-identification run is left-shifted by one.
    pub t_plot: i64,
    /// 1-based feature index within the step; 0 for whole-step records.
    pub feature: usize,
    /// Tracked entry of `I - HK = RZ⁻¹`.
    pub ihk22: f64,
    /// Tracked entry of the dynamics matrix in use.
    pub f22: f64,
}

pub const FIG2_HEADER: [&str; 6] = ["method", "seed", "t_plot", "feature", "IHK22", "F22"];

pub fn write_fig2_csv<W: Write>(w: W, records: &[Fig2Record]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(FIG2_HEADER)?;
    for r in records {
        wtr.write_record([
            r.method.as_str(),
            &r.seed.to_string(),
            &r.t_plot.to_string(),
            &r.feature.to_string(),
            &fmt_f64(r.ihk22),
            &fmt_f64(r.f22),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn fig2_csv_string(records: &[Fig2Record]) -> Result<String> {
    let mut buf = Vec::new();
    write_fig2_csv(&mut buf, records)?;
    String::from_utf8(buf).map_err(|e| Error::Parameter(e.to_string()))
}

pub fn read_fig2_csv<R: std::io::Read>(r: R) -> Result<Vec<Fig2Record>> {
    let mut rdr = csv::Reader::from_reader(r);
    {
        let headers = rdr.headers()?;
        if headers.iter().collect::<Vec<_>>() != FIG2_HEADER {
            return Err(Error::Parameter(format!("unexpected header: {headers:?}")));
        }
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 6 {
            return Err(Error::Parameter(format!("bad record: {rec:?}")));
        }
        out.push(Fig2Record {
            method: rec[0].to_string(),
            seed: rec[1]
                .parse()
                .map_err(|e| Error::Parameter(format!("bad seed: {e}")))?,
            t_plot: rec[2]
                .parse()
                .map_err(|e| Error::Parameter(format!("bad t_plot: {e}")))?,
            feature: rec[3]
                .parse()
                .map_err(|e| Error::Parameter(format!("bad feature: {e}")))?,
            ihk22: parse_f64(&rec[4])?,
            f22: parse_f64(&rec[5])?,
        });
    }
    Ok(out)
}

/// Write an arbitrary table (used by the controller demo and the decay
/// baseline, whose schemas are documented in the README).
pub fn write_table<W: Write>(w: W, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(header)?;
    for row in rows {
        wtr.write_record(row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn table_string(header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut buf = Vec::new();
    write_table(&mut buf, header, rows)?;
    String::from_utf8(buf).map_err(|e| Error::Parameter(e.to_string()))
}

/// Write a string to `dir/name`, creating the directory if needed.
pub fn write_artifact(dir: &Path, name: &str, contents: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), contents)?;
    Ok(())
}
