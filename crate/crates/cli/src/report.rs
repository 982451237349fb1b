//! `report.csv`, `summary.json` and the plot-data table.
//!
//! Floats are written with 9 significant digits. Summary statistics are
//! computed from the values as written, so they can be recomputed from the
//! CSV alone.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use gradleak::attacks::{fmt_sig9, round_sig9};
use serde::Serialize;

use crate::error::CliError;

pub const REPORT_HEADER: [&str; 10] = [
    "image_id",
    "attack",
    "model",
    "noise_kind",
    "noise_scale",
    "iterations",
    "final_mse",
    "final_ssim",
    "success",
    "wall_time_s",
];

/// One attack run: an (image, defense, seed) triple.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub image_id: String,
    pub attack: String,
    pub model: String,
    pub noise_kind: String,
    pub noise_scale: f64,
    pub iterations: usize,
    pub final_mse: f64,
    pub final_ssim: f64,
    pub success: bool,
    pub wall_time_s: f64,
}

impl ReportRow {
    fn record(&self) -> [String; 10] {
        [
            self.image_id.clone(),
            self.attack.clone(),
            self.model.clone(),
            self.noise_kind.clone(),
            fmt_sig9(self.noise_scale),
            self.iterations.to_string(),
            fmt_sig9(self.final_mse),
            fmt_sig9(self.final_ssim),
            self.success.to_string(),
            fmt_sig9(self.wall_time_s),
        ]
    }

    /// The row as it reads back from the CSV.
    pub fn rounded(&self) -> ReportRow {
        ReportRow {
            noise_scale: round_sig9(self.noise_scale),
            final_mse: round_sig9(self.final_mse),
            final_ssim: round_sig9(self.final_ssim),
            wall_time_s: round_sig9(self.wall_time_s),
            ..self.clone()
        }
    }
}

pub fn write_report<W: Write>(out: W, rows: &[ReportRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_HEADER)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}

fn parse_float(s: &str, col: &str, line: usize) -> Result<f64, CliError> {
    s.parse::<f64>()
        .map_err(|_| CliError::Runtime(format!("report line {line}: bad {col} `{s}`")))
}

pub fn read_report<R: Read>(input: R) -> Result<Vec<ReportRow>, CliError> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != REPORT_HEADER {
        return Err(CliError::Runtime(format!(
            "unexpected report header {header:?}"
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let f = |k: usize| parse_float(&rec[k], REPORT_HEADER[k], line);
        rows.push(ReportRow {
            image_id: rec[0].to_string(),
            attack: rec[1].to_string(),
            model: rec[2].to_string(),
            noise_kind: rec[3].to_string(),
            noise_scale: f(4)?,
            iterations: rec[5].parse().map_err(|_| {
                CliError::Runtime(format!("report line {line}: bad iterations `{}`", &rec[5]))
            })?,
            final_mse: f(6)?,
            final_ssim: f(7)?,
            success: match &rec[8] {
                "true" => true,
                "false" => false,
                s => {
                    return Err(CliError::Runtime(format!(
                        "report line {line}: bad success `{s}`"
                    )))
                }
            },
            wall_time_s: f(9)?,
        });
    }
    Ok(rows)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSummary {
    pub defense: String,
    pub noise_kind: String,
    pub noise_scale: f64,
    pub runs: usize,
    pub asr: f64,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub wall_time_mean: f64,
    pub wall_time_std: f64,
}

impl GroupSummary {
    /// Aggregates rows after rounding them as the CSV does.
    pub fn from_rows<'a>(
        defense: &str,
        rows: impl IntoIterator<Item = &'a ReportRow>,
    ) -> GroupSummary {
        let rows: Vec<ReportRow> = rows.into_iter().map(ReportRow::rounded).collect();
        let col = |f: fn(&ReportRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
        let (mse_mean, mse_std) = mean_std(&col(|r| r.final_mse));
        let (ssim_mean, ssim_std) = mean_std(&col(|r| r.final_ssim));
        let (wall_time_mean, wall_time_std) = mean_std(&col(|r| r.wall_time_s));
        let n = rows.len();
        GroupSummary {
            defense: defense.to_string(),
            noise_kind: rows
                .first()
                .map(|r| r.noise_kind.clone())
                .unwrap_or_default(),
            noise_scale: rows.first().map(|r| r.noise_scale).unwrap_or(f64::NAN),
            runs: n,
            asr: if n == 0 {
                f64::NAN
            } else {
                rows.iter().filter(|r| r.success).count() as f64 / n as f64
            },
            mse_mean,
            mse_std,
            ssim_mean,
            ssim_std,
            wall_time_mean,
            wall_time_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub attack: String,
    pub model: String,
    pub success_threshold: f64,
    pub groups: Vec<GroupSummary>,
}

/// `noise_scale,mean_ssim,mean_mse`, one line per distinct scale in
/// ascending order.
pub fn plot_data<W: Write>(rows: &[ReportRow], out: W) -> Result<(), CliError> {
    let mut groups: BTreeMap<u64, (f64, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        // Order-preserving key for nonnegative floats.
        let e = groups
            .entry(r.noise_scale.to_bits())
            .or_insert_with(|| (r.noise_scale, Vec::new(), Vec::new()));
        e.1.push(r.final_ssim);
        e.2.push(r.final_mse);
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["noise_scale", "mean_ssim", "mean_mse"])?;
    for (scale, ssims, mses) in groups.values() {
        w.write_record([
            fmt_sig9(*scale),
            fmt_sig9(mean_std(ssims).0),
            fmt_sig9(mean_std(mses).0),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, scale: f64, ssim: f64) -> ReportRow {
        ReportRow {
            image_id: id.into(),
            attack: "dlg".into(),
            model: "cnn4".into(),
            noise_kind: "laplace".into(),
            noise_scale: scale,
            iterations: 300,
            final_mse: 1.0 / 3.0,
            final_ssim: ssim,
            success: ssim >= 0.9,
            wall_time_s: 1.25,
        }
    }

    #[test]
    fn csv_round_trip_matches_rounded_rows() {
        let rows = vec![row("00000", 0.001, 0.95), row("00001", 0.1, 2.0 / 3.0)];
        let mut buf = Vec::new();
        write_report(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("image_id,attack,model,noise_kind,noise_scale,iterations,final_mse,final_ssim,success,wall_time_s\n"));
        assert!(text.contains("00001,dlg,cnn4,laplace,0.1,300,0.333333333,0.666666667,false,1.25"));
        let back = read_report(buf.as_slice()).unwrap();
        let expect: Vec<_> = rows.iter().map(ReportRow::rounded).collect();
        assert_eq!(back, expect);
    }

    #[test]
    fn summary_uses_population_std() {
        let rows = vec![row("a", 0.0, 0.5), row("b", 0.0, 1.0)];
        let s = GroupSummary::from_rows("none", &rows);
        assert_eq!(s.runs, 2);
        assert_eq!(s.asr, 0.5);
        assert_eq!(s.ssim_mean, 0.75);
        assert_eq!(s.ssim_std, 0.25);
    }

    #[test]
    fn plot_data_groups_by_scale() {
        let rows = vec![row("a", 0.1, 0.2), row("b", 0.0, 1.0), row("c", 0.1, 0.4)];
        let mut buf = Vec::new();
        plot_data(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "noise_scale,mean_ssim,mean_mse\n0,1,0.333333333\n0.1,0.3,0.333333333\n"
        );
    }

    #[test]
    fn bad_header_is_rejected() {
        assert!(read_report("a,b\n1,2\n".as_bytes()).is_err());
    }
}
