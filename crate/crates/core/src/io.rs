//! Dataset ingestion, run configuration and report persistence.
//!
//! Datasets are delimited text (comma or tab) with a header naming the
//! columns `z`, `delta` and `x1`..`xd`; lines starting with `#` are comments.
//! Reports are JSON lines, one record per line, followed by a plain-text
//! summary written next to them.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitter::{FitConfig, IndexModelFit, StandardErrors, TauRecord};
use crate::sim::{EstimatorSummary, MonteCarloReport, RepRecord, SimDesign};
use crate::survival::CensoredSample;

/// Environment variable overriding the seed of a run.
pub const SEED_ENV: &str = "CENSIDX_SEED";
pub const REPORT_VERSION: u32 = 1;

/// A parsed dataset together with the raw text of each field.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sample: CensoredSample,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn detect_delimiter(text: &str) -> u8 {
    let first = text
        .lines()
        .find(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
    match first {
        Some(l) if l.contains('\t') && !l.contains(',') => b'\t',
        _ => b',',
    }
}

pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(detect_delimiter(text))
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .has_headers(true)
        .from_reader(text.as_bytes());

    let header: Vec<String> = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let header_line = reader.position().line().max(1) as usize;
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(parse_err(
            1,
            "empty dataset: expected a header with z, delta, x1..xd",
        ));
    }
    let col = |name: &str| header.iter().position(|h| h.eq_ignore_ascii_case(name));
    let z_col = col("z").ok_or_else(|| parse_err(header_line, "missing column `z`"))?;
    let d_col = col("delta").ok_or_else(|| parse_err(header_line, "missing column `delta`"))?;
    let d = header.len() - 2;
    if d == 0 {
        return Err(parse_err(
            header_line,
            "no covariate columns (expected x1..xd)",
        ));
    }
    let mut x_cols = Vec::with_capacity(d);
    for k in 1..=d {
        let name = format!("x{k}");
        x_cols.push(col(&name).ok_or_else(|| {
            parse_err(
                header_line,
                format!("missing column `{name}` (covariates must be x1..x{d})"),
            )
        })?);
    }

    let mut z = Vec::new();
    let mut delta = Vec::new();
    let mut x = Vec::new();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != header.len() {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        let num = |c: usize| -> Result<f64> {
            let field = &record[c];
            if field.is_empty() || field.eq_ignore_ascii_case("na") {
                return Err(parse_err(
                    line,
                    format!("missing value in column `{}`", header[c]),
                ));
            }
            let v: f64 = field.parse().map_err(|_| {
                parse_err(
                    line,
                    format!("`{field}` is not a number (column `{}`)", header[c]),
                )
            })?;
            if !v.is_finite() {
                return Err(parse_err(
                    line,
                    format!("non-finite value in column `{}`", header[c]),
                ));
            }
            Ok(v)
        };
        z.push(num(z_col)?);
        let flag = num(d_col)?;
        if flag != 0.0 && flag != 1.0 {
            return Err(parse_err(
                line,
                format!("delta must be 0 or 1, found `{}`", &record[d_col]),
            ));
        }
        delta.push(flag == 1.0);
        for &c in &x_cols {
            x.push(num(c)?);
        }
        rows.push(record.iter().map(str::to_string).collect());
    }
    if z.is_empty() {
        return Err(parse_err(
            header_line + 1,
            "dataset has a header but no observations",
        ));
    }
    let sample = CensoredSample::new(z, delta, x, d)?;
    Ok(Dataset {
        sample,
        header,
        rows,
    })
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    parse_dataset(&text)
}

/// Writes a sample in the dataset format.
pub fn write_dataset(path: &Path, sample: &CensoredSample) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    let mut header = vec!["z".to_string(), "delta".to_string()];
    header.extend((1..=sample.d()).map(|k| format!("x{k}")));
    w.write_record(&header).map_err(|e| Error::Io(e.into()))?;
    for i in 0..sample.n() {
        let mut row = vec![
            format!("{:?}", sample.z()[i]),
            if sample.delta()[i] { "1" } else { "0" }.to_string(),
        ];
        row.extend(sample.x_row(i).iter().map(|v| format!("{v:?}")));
        w.write_record(&row).map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: Option<PathBuf>,
    pub fit: FitConfig,
    pub simulation: SimDesign,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                Self::from_toml(&text)
            }
            None => Ok(Self::default()),
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.fit.seed = seed;
        self.simulation.seed = seed;
    }

    /// Applies a seed override given as the value of [`SEED_ENV`].
    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            let seed = v.trim().parse().map_err(|_| {
                Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))
            })?;
            self.set_seed(seed);
        }
        Ok(())
    }
}

/// Echo of the input dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputEcho {
    pub path: String,
    pub n: usize,
    pub d: usize,
    pub censored: usize,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl InputEcho {
    pub fn new(path: &Path, data: &Dataset) -> Self {
        Self {
            path: path.display().to_string(),
            n: data.sample.n(),
            d: data.sample.d(),
            censored: data.sample.censored_count(),
            header: data.header.clone(),
            rows: data.rows.clone(),
        }
    }
}

/// Largest-observation weights, over the full sample and up to `τ̂`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub n_retained: usize,
    pub weight_inf: f64,
    pub weight_tau: f64,
    pub weight_tau_raw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum ReportRecord {
    Header {
        command: String,
        version: u32,
    },
    Config {
        config: Box<RunConfig>,
    },
    Input(InputEcho),
    Fit(Box<IndexModelFit>),
    StandardErrors(StandardErrors),
    Tau(TauRecord),
    Weights(WeightRow),
    Estimator {
        label: String,
        summary: EstimatorSummary,
    },
    Simulation {
        lambda: f64,
        mean_censored_fraction: f64,
    },
    Rep(RepRecord),
}

/// Records of a fit report.
pub fn fit_records(
    config: &RunConfig,
    input: InputEcho,
    fit: &IndexModelFit,
    se: &StandardErrors,
    command: &str,
) -> Vec<ReportRecord> {
    let mut out = vec![
        ReportRecord::Header {
            command: command.to_string(),
            version: REPORT_VERSION,
        },
        ReportRecord::Config {
            config: Box::new(config.clone()),
        },
        ReportRecord::Input(input),
        ReportRecord::Fit(Box::new(fit.clone())),
        ReportRecord::StandardErrors(se.clone()),
    ];
    out.extend(fit.e2_table.iter().cloned().map(ReportRecord::Tau));
    out.push(ReportRecord::Weights(WeightRow {
        n_retained: fit.n_retained,
        weight_inf: fit.weight_inf,
        weight_tau: fit.weight_tau,
        weight_tau_raw: fit.weight_tau_raw,
    }));
    out
}

/// Records of a simulation report.
pub fn simulation_records(config: &RunConfig, report: &MonteCarloReport) -> Vec<ReportRecord> {
    let mut out = vec![
        ReportRecord::Header {
            command: "simulate".into(),
            version: REPORT_VERSION,
        },
        ReportRecord::Config {
            config: Box::new(config.clone()),
        },
        ReportRecord::Simulation {
            lambda: report.lambda,
            mean_censored_fraction: report.mean_censored_fraction,
        },
    ];
    for (label, s) in [
        ("adaptive", &report.adaptive),
        ("fixed_tau0", &report.fixed_tau0),
    ] {
        if let Some(s) = s {
            out.push(ReportRecord::Estimator {
                label: label.into(),
                summary: s.clone(),
            });
        }
    }
    out.extend(report.records.iter().cloned().map(ReportRecord::Rep));
    out
}

pub fn write_records(path: &Path, records: &[ReportRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r).map_err(|e| Error::Internal(e.to_string()))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<ReportRecord>> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (k, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| parse_err(k + 1, e.to_string()))?);
    }
    Ok(out)
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
    format!("[{}]", parts.join(", "))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.6}"))
}

pub fn fit_summary(fit: &IndexModelFit, se: &StandardErrors) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "n: {}", fit.n);
    let _ = writeln!(s, "d: {}", fit.d);
    let _ = writeln!(s, "censored: {}", fit.censored);
    if fit.no_censoring {
        let _ = writeln!(s, "note: no censoring: KM path degenerate to empirical");
    }
    let _ = writeln!(s, "theta_hat: {}", fmt_vec(&fit.theta_hat));
    let _ = writeln!(s, "theta_prelim: {}", fmt_vec(&fit.theta_prelim));
    let _ = writeln!(s, "standard_errors: {}", fmt_vec(&se.se));
    if fit.d == 2 {
        let _ = writeln!(s, "coefficient_ratio: {:.7}", fit.theta_hat[1]);
    }
    let _ = writeln!(s, "h_hat: {:.6}", fit.h_hat);
    let _ = writeln!(s, "tau_hat: {:.6}", fit.tau_hat);
    let _ = writeln!(s, "tau0: {:.6}", fit.tau0);
    let _ = writeln!(s, "h0: {:.6}", fit.h0);
    let _ = writeln!(s, "criterion: {:?}", fit.criterion);
    let _ = writeln!(s, "e2: {:.6e}", fit.e2);
    let _ = writeln!(s, "e2_sandwich: {:.6e}", fit.e2_sandwich);
    let _ = writeln!(s, "singular_v: {}", fit.singular);
    let _ = writeln!(s, "loglik: {:.6}", fit.loglik.value);
    let _ = writeln!(s, "loglik_terms: {}", fit.loglik.contributing);
    let _ = writeln!(s, "loglik_excluded: {}", fit.loglik.excluded);
    let _ = writeln!(s, "trim_level: {:.6e}", fit.trim_level);
    let _ = writeln!(s, "trim_retained: {}", fit.trim_retained);
    let _ = writeln!(s, "alternations: {}", fit.convergence.alternations);
    let _ = writeln!(s, "converged: {}", fit.convergence.converged);
    s.push('\n');
    s.push_str(&tau_table(&fit.e2_table));
    s.push('\n');
    let _ = writeln!(
        s,
        "{:>10} {:>12} {:>12} {:>12}",
        "N", "weight_inf", "weight_tau", "weight_tau_raw"
    );
    let _ = writeln!(
        s,
        "{:>10} {:>12.6} {:>12.6} {:>12.6}",
        fit.n_retained, fit.weight_inf, fit.weight_tau, fit.weight_tau_raw
    );
    s
}

pub fn tau_table(rows: &[TauRecord]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>12} {:>8} {:>14} {:>14} {:>6} {:>12}  theta",
        "tau", "h", "e2", "e2_sandwich", "N", "weight"
    );
    for r in rows {
        let theta = r.theta.as_deref().map_or_else(|| "-".into(), fmt_vec);
        let _ = write!(
            s,
            "{:>12.6} {:>8} {:>14} {:>14} {:>6} {:>12}  {theta}",
            r.tau,
            fmt_opt(r.h),
            r.e2.map_or_else(|| "-".into(), |v| format!("{v:.6e}")),
            r.e2_sandwich
                .map_or_else(|| "-".into(), |v| format!("{v:.6e}")),
            r.n_retained,
            fmt_opt(r.largest_weight),
        );
        if let Some(reason) = &r.reason {
            let _ = write!(s, "  failed: {reason}");
        }
        s.push('\n');
    }
    s
}

pub fn simulation_summary(report: &MonteCarloReport) -> String {
    let d = &report.design;
    let mut s = String::new();
    let _ = writeln!(s, "n: {}", d.n);
    let _ = writeln!(s, "target_p: {}", d.target_p);
    let _ = writeln!(s, "lambda: {:.6}", report.lambda);
    let _ = writeln!(
        s,
        "mean_censored_fraction: {:.4}",
        report.mean_censored_fraction
    );
    let _ = writeln!(s, "reps: {}", d.reps);
    let _ = writeln!(s, "seed: {}", d.seed);
    s.push('\n');
    let _ = writeln!(
        s,
        "{:>12} {:>11} {:>11} {:>11} {:>11} {:>9}",
        "estimator", "bias_2", "bias_3", "bias_4", "mse", "failures"
    );
    for (label, sum) in [
        ("adaptive", &report.adaptive),
        ("fixed_tau0", &report.fixed_tau0),
    ] {
        let Some(sum) = sum else { continue };
        let mut line = format!("{label:>12}");
        for b in &sum.bias {
            let _ = write!(line, " {b:>11.7}");
        }
        let _ = write!(line, " {:>11.7} {:>9}", sum.mse, sum.failures);
        let _ = writeln!(s, "{line}");
        let _ = writeln!(s, "{:>12} covariance:", "");
        for row in &sum.covariance {
            let _ = writeln!(s, "{:>12} {}", "", fmt_vec(row));
        }
    }
    if let Some(w) = report.weight_diagnostics() {
        s.push('\n');
        let _ = writeln!(
            s,
            "{:>10} {:>12} {:>12} {:>14}",
            "mean_N", "weight_inf", "weight_tau", "weight_tau_raw"
        );
        let _ = writeln!(
            s,
            "{:>10.2} {:>12.6} {:>12.6} {:>14.6}",
            w.mean_n, w.weight_inf, w.weight_tau, w.weight_tau_raw
        );
    }
    let failed: Vec<&RepRecord> = report
        .records
        .iter()
        .filter(|r| !r.errors.is_empty())
        .collect();
    if !failed.is_empty() {
        s.push('\n');
        for r in failed {
            let _ = writeln!(s, "rep {}: {}", r.rep, r.errors.join("; "));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_tabs() {
        let d = parse_dataset("# note\nz\tdelta\tx1\n1.5\t1\t0.2\n2.5\t0\t-0.1\n").unwrap();
        assert_eq!(d.sample.n(), 2);
        assert_eq!(d.sample.censored_count(), 1);
        assert_eq!(d.rows[1][0], "2.5");
    }

    #[test]
    fn empty_file_is_line_one() {
        match parse_dataset("") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_rows_name_their_line() {
        match parse_dataset("z,delta,x1\n1,1,0\n2,1,\n") {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("missing"));
            }
            other => panic!("{other:?}"),
        }
        match parse_dataset("z,delta,x1\n1,2,0\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_dataset("z,delta,x1\n1,1\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_dataset("z,delta,x1\n1,1,1,5\n"),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn header_needs_named_columns() {
        assert!(matches!(
            parse_dataset("z,delta,age\n1,1,2\n"),
            Err(Error::Parse { .. })
        ));
        assert!(matches!(
            parse_dataset("z,x1\n1,2\n"),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(matches!(
            RunConfig::from_toml("bogus = 1"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml("[fit]\nradius2 = 1"),
            Err(Error::Config(_))
        ));
        let c = RunConfig::from_toml("[fit]\nradius = 0.4\n[simulation]\nn = 200\n").unwrap();
        assert_eq!(c.fit.radius, 0.4);
        assert_eq!(c.simulation.n, 200);
    }

    #[test]
    fn seed_override() {
        let mut c = RunConfig::default();
        c.apply_seed_override(Some("17")).unwrap();
        assert_eq!((c.fit.seed, c.simulation.seed), (17, 17));
        assert!(c.apply_seed_override(Some("x")).is_err());
    }
}
