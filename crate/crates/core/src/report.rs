//! Report files: the full [`QuantReport`] as JSON, or one CSV row per
//! quantized layer for plotting.

use std::io::Write;
use std::path::Path;

use crate::error::{QuantError, Result};
use crate::pipeline::QuantReport;

pub const CSV_HEADER: [&str; 9] = [
    "layer_id",
    "e_r",
    "e_calib",
    "e_stab",
    "delta_gain",
    "score",
    "alpha",
    "layer_out_err",
    "depth",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl ReportFormat {
    /// `.csv` selects CSV, anything else JSON.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => ReportFormat::Csv,
            _ => ReportFormat::Json,
        }
    }
}

pub fn report_to_json(report: &QuantReport) -> Result<String> {
    serde_json::to_string_pretty(report).map_err(|e| QuantError::Serialize(e.to_string()))
}

/// Diagnostic columns are left empty for layers without diagnostics (RTN).
/// `alpha` is the value applied to the layer.
pub fn report_to_csv(report: &QuantReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let ser = |e: csv::Error| QuantError::Serialize(e.to_string());
    w.write_record(CSV_HEADER).map_err(ser)?;
    for layer in &report.layers {
        let d = layer.diagnostics.as_ref();
        let opt = |f: fn(&crate::correction::LayerDiagnostics) -> f64| {
            d.map(|d| f(d).to_string()).unwrap_or_default()
        };
        w.write_record([
            layer.layer_id.clone(),
            opt(|d| d.e_r),
            opt(|d| d.e_calib),
            opt(|d| d.e_stab),
            opt(|d| d.delta_gain),
            opt(|d| d.score),
            layer.alpha.to_string(),
            layer.output_error.to_string(),
            layer.depth.to_string(),
        ])
        .map_err(ser)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| QuantError::Serialize(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn write_report(
    report: &QuantReport,
    path: impl AsRef<Path>,
    format: ReportFormat,
) -> Result<()> {
    let path = path.as_ref();
    let text = match format {
        ReportFormat::Json => report_to_json(report)? + "\n",
        ReportFormat::Csv => report_to_csv(report)?,
    };
    let mut f = std::fs::File::create(path).map_err(|e| QuantError::io(path, e))?;
    f.write_all(text.as_bytes())
        .map_err(|e| QuantError::io(path, e))
}

pub fn read_report(path: impl AsRef<Path>) -> Result<QuantReport> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| QuantError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| QuantError::Malformed(format!("report: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correction::LayerDiagnostics;
    use crate::pipeline::{ErrorSummary, LayerReport, Method, RunConfig};

    fn report(layers: Vec<LayerReport>) -> QuantReport {
        QuantReport {
            config: RunConfig::new(Method::Fade, Default::default()),
            samples: 128,
            layers,
            end_to_end: ErrorSummary {
                frobenius: 0.5,
                squared: 0.25,
                relative: 0.01,
            },
            timings: None,
        }
    }

    fn layer(name: &str) -> LayerReport {
        LayerReport {
            layer_id: name.into(),
            weight: format!("{name}.weight"),
            depth: 1,
            bits: 4,
            group_size: 64,
            alpha: 0.4123,
            diagnostics: Some(LayerDiagnostics {
                layer_id: name.into(),
                e_r: 0.1,
                e_calib: 0.12,
                e_stab: 0.05,
                delta_gain: -0.2,
                v_int: 0.1f64.ln_1p(),
                r_calib: -(0.05f64.ln_1p()),
                score: 0.1f64.ln_1p() - 0.05f64.ln_1p(),
                alpha: 0.4123,
            }),
            output_error: 1.0 / 3.0,
            relative_output_error: 0.02,
            trace_loss: Some(0.7),
            correction_norm: Some(0.0),
        }
    }

    #[test]
    fn empty_csv_is_header_only() {
        let csv = report_to_csv(&report(vec![])).unwrap();
        assert_eq!(csv.lines().count(), 1);
        assert_eq!(csv.trim_end(), CSV_HEADER.join(","));
    }

    #[test]
    fn one_layer_csv_has_two_lines() {
        let csv = report_to_csv(&report(vec![layer("enc.0")])).unwrap();
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn names_with_commas_are_quoted() {
        let csv = report_to_csv(&report(vec![layer("block,0 \"q\"")])).unwrap();
        let mut rdr = csv::Reader::from_reader(csv.as_bytes());
        let rec = rdr.records().next().unwrap().unwrap();
        assert_eq!(&rec[0], "block,0 \"q\"");
        assert_eq!(rec.len(), CSV_HEADER.len());
        assert_eq!(rec[6].parse::<f64>().unwrap(), 0.4123);
    }

    #[test]
    fn rtn_rows_leave_diagnostics_empty() {
        let mut l = layer("fc");
        l.diagnostics = None;
        let csv = report_to_csv(&report(vec![l])).unwrap();
        let mut rdr = csv::Reader::from_reader(csv.as_bytes());
        let rec = rdr.records().next().unwrap().unwrap();
        assert_eq!(&rec[1], "");
        assert_eq!(&rec[8], "1");
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        let r = report(vec![layer("a"), layer("b")]);
        write_report(&r, &path, ReportFormat::Json).unwrap();
        assert_eq!(read_report(&path).unwrap(), r);
    }

    #[test]
    fn format_from_extension() {
        assert_eq!(
            ReportFormat::from_path(Path::new("x.CSV")),
            ReportFormat::Csv
        );
        assert_eq!(
            ReportFormat::from_path(Path::new("x.json")),
            ReportFormat::Json
        );
        assert_eq!(ReportFormat::from_path(Path::new("x")), ReportFormat::Json);
    }
}
