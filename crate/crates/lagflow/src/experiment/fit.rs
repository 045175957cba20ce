//! Convergence-rate fitting and plot-data emission for sweep results.
//!
//! Observed rates near the rough/smooth regime boundary are ambiguous
//! between a small power h^β and a logarithmic decay |log h|^(−q), so both
//! models are always fitted and reported with their residuals; picking one
//! silently would bake the conclusion into the tooling.

use crate::error::{Error, Result};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::RESULTS_HEADER;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RateModel {
    /// err ≈ C·h^β.
    Power,
    /// err ≈ C·|log h|^(−q).
    LogInverse,
}

/// One model fitted by least squares in its linearizing coordinates.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FittedModel {
    pub model: RateModel,
    pub constant: f64,
    /// β for the power model, q for the log-inverse model.
    pub exponent: f64,
    /// Residual RMS in the fit's own (log-transformed) coordinates.
    pub residual_rms: f64,
}

impl FittedModel {
    /// The fitted curve at step size h ∈ (0, 1).
    pub fn eval(&self, h: f64) -> f64 {
        match self.model {
            RateModel::Power => self.constant * h.powf(self.exponent),
            RateModel::LogInverse => {
                self.constant * (1.0 / h).ln().powf(-self.exponent)
            }
        }
    }
}

/// Fit report for one (scheme, metric, sample time) group.
#[derive(Debug, Clone, Serialize)]
pub struct RateFit {
    pub scheme: String,
    pub metric: String,
    pub t: f64,
    pub power: FittedModel,
    pub log_inverse: FittedModel,
    /// The model with the smaller residual (power on ties).
    pub preferred: RateModel,
    /// Whether the per-h mean errors decrease (weakly) as h shrinks.
    pub monotone: bool,
    /// Set when the data are non-monotone in h; rates fitted through such
    /// points say little.
    pub low_confidence: bool,
    /// The fitted (h, mean error) pairs, coarse to fine.
    pub points: Vec<[f64; 2]>,
}

/// (h, mean_err, var_err, n_reps) of one results row.
type Row = (f64, f64, f64, usize);
/// Per-sample-time row blocks of one output file.
type TimeBlocks = Vec<(f64, Vec<Row>)>;
/// (scheme, metric, sample-time bits); bit order equals numeric order for
/// the non-negative times the results format admits.
type GroupKey = (String, String, u64);

struct ResultsTable {
    groups: BTreeMap<GroupKey, Vec<Row>>,
}

fn read_results(path: &Path) -> Result<ResultsTable> {
    let mut reader =
        csv::Reader::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Format(e.to_string()))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("results file lacks column {name:?}")))
    };
    for required in RESULTS_HEADER {
        col(required)?;
    }
    let (c_scheme, c_metric) = (col("scheme")?, col("metric")?);
    let (c_h, c_t) = (col("h")?, col("t")?);
    let (c_mean, c_var, c_reps) = (col("mean_err")?, col("var_err")?, col("n_reps")?);
    let parse = |s: &str, what: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| Error::Format(format!("bad {what} value {s:?} in results file")))
    };
    let mut groups: BTreeMap<GroupKey, Vec<Row>> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Format(e.to_string()))?;
        let t = parse(&record[c_t], "t")?;
        if !(t.is_finite() && t >= 0.0) {
            return Err(Error::Format(format!("sample time {t} in results file")));
        }
        let h = parse(&record[c_h], "h")?;
        let mean = parse(&record[c_mean], "mean_err")?;
        let var = parse(&record[c_var], "var_err")?;
        let n_reps = record[c_reps]
            .parse::<usize>()
            .map_err(|_| Error::Format(format!("bad n_reps value {:?}", &record[c_reps])))?;
        groups
            .entry((
                record[c_scheme].to_string(),
                record[c_metric].to_string(),
                t.to_bits(),
            ))
            .or_default()
            .push((h, mean, var, n_reps));
    }
    Ok(ResultsTable { groups })
}

/// Mean error per distinct h, sorted coarse (large h) to fine.
fn aggregate_by_h(rows: &[Row]) -> Vec<[f64; 2]> {
    let mut by_h: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for &(h, mean, _, _) in rows {
        let e = by_h.entry(h.to_bits()).or_insert((0.0, 0));
        e.0 += mean;
        e.1 += 1;
    }
    let mut points: Vec<[f64; 2]> = by_h
        .into_iter()
        .map(|(bits, (sum, count))| [f64::from_bits(bits), sum / count as f64])
        .collect();
    points.sort_by(|a, b| b[0].total_cmp(&a[0]));
    points
}

fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx <= 0.0 {
        return Err(Error::invalid(
            "rate fitting needs at least two distinct step sizes",
        ));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    Ok((slope, intercept, (rss / n).sqrt()))
}

fn fit_group(scheme: &str, metric: &str, t: f64, points: &[[f64; 2]]) -> Result<RateFit> {
    let usable: Vec<[f64; 2]> = points
        .iter()
        .copied()
        .filter(|p| p[0] > 0.0 && p[0] < 1.0 && p[1] > 0.0)
        .collect();
    if usable.len() < 3 {
        return Err(Error::invalid(format!(
            "rate fitting for {scheme}/{metric} at t = {t} has {} usable levels; need ≥ 3",
            usable.len()
        )));
    }
    let log_e: Vec<f64> = usable.iter().map(|p| p[1].ln()).collect();
    let log_h: Vec<f64> = usable.iter().map(|p| p[0].ln()).collect();
    // |log h| = log(1/h) is positive on (0, 1), so its own log is defined.
    let log_log: Vec<f64> = usable.iter().map(|p| (1.0 / p[0]).ln().ln()).collect();
    let (beta, ln_c_pow, rms_pow) = linear_fit(&log_h, &log_e)?;
    let (slope_log, ln_c_log, rms_log) = linear_fit(&log_log, &log_e)?;
    let power = FittedModel {
        model: RateModel::Power,
        constant: ln_c_pow.exp(),
        exponent: beta,
        residual_rms: rms_pow,
    };
    let log_inverse = FittedModel {
        model: RateModel::LogInverse,
        constant: ln_c_log.exp(),
        exponent: -slope_log,
        residual_rms: rms_log,
    };
    let monotone = usable.windows(2).all(|w| w[1][1] <= w[0][1]);
    let preferred = if log_inverse.residual_rms < power.residual_rms {
        RateModel::LogInverse
    } else {
        RateModel::Power
    };
    Ok(RateFit {
        scheme: scheme.to_string(),
        metric: metric.to_string(),
        t,
        power,
        log_inverse,
        preferred,
        monotone,
        low_confidence: !monotone,
        points: usable,
    })
}

/// Fits both rate models to every (scheme, metric, sample time) group of a
/// results file. Groups need at least three usable levels (positive error,
/// h ∈ (0, 1)); a thinner group fails the whole call rather than silently
/// producing a two-point "rate".
pub fn fit_rates(results_csv: &Path) -> Result<Vec<RateFit>> {
    let table = read_results(results_csv)?;
    let mut fits = Vec::with_capacity(table.groups.len());
    for ((scheme, metric, t_bits), rows) in &table.groups {
        let points = aggregate_by_h(rows);
        fits.push(fit_group(scheme, metric, f64::from_bits(*t_bits), &points)?);
    }
    Ok(fits)
}

/// Writes one plain-text data file per (scheme, metric) pair next to the
/// results, blocks separated by blank lines (one block per sample time),
/// ready for gnuplot / pgfplots. Columns are `h mean_err stderr`, extended
/// with both fitted models whenever every block's fit succeeded. An empty
/// results file produces a single header-only `plot.dat`.
pub fn emit_plotdata(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let results = run_dir.join("results.csv");
    let table = read_results(&results)?;
    if table.groups.is_empty() {
        let path = run_dir.join("plot.dat");
        std::fs::write(&path, "# h mean_err stderr\n")?;
        return Ok(vec![path]);
    }
    let fits: Option<BTreeMap<GroupKey, RateFit>> = fit_rates(&results).ok().map(|fits| {
        fits.into_iter()
            .map(|f| ((f.scheme.clone(), f.metric.clone(), f.t.to_bits()), f))
            .collect()
    });

    // Regroup by (scheme, metric); keep per-t blocks inside.
    let mut files: BTreeMap<(String, String), TimeBlocks> = BTreeMap::new();
    for ((scheme, metric, t_bits), rows) in table.groups {
        files
            .entry((scheme, metric))
            .or_default()
            .push((f64::from_bits(t_bits), rows));
    }
    let mut written = Vec::with_capacity(files.len());
    for ((scheme, metric), blocks) in files {
        let mut text = String::new();
        for (idx, (t, rows)) in blocks.iter().enumerate() {
            if idx > 0 {
                text.push('\n');
            }
            let fit = fits
                .as_ref()
                .and_then(|m| m.get(&(scheme.clone(), metric.clone(), t.to_bits())));
            writeln!(text, "# t = {t}").expect("string write");
            match fit {
                Some(_) => writeln!(text, "# h mean_err stderr fit_power fit_log_inverse"),
                Option::None => writeln!(text, "# h mean_err stderr"),
            }
            .expect("string write");
            let mut rows = rows.clone();
            rows.sort_by(|a, b| b.0.total_cmp(&a.0));
            for (h, mean, var, n_reps) in rows {
                let stderr = if n_reps > 0 {
                    (var / n_reps as f64).sqrt()
                } else {
                    0.0
                };
                match fit {
                    Some(f) => writeln!(
                        text,
                        "{h} {mean} {stderr} {} {}",
                        f.power.eval(h),
                        f.log_inverse.eval(h)
                    ),
                    Option::None => writeln!(text, "{h} {mean} {stderr}"),
                }
                .expect("string write");
            }
        }
        let path = run_dir.join(format!("plot_{scheme}_{metric}.dat"));
        std::fs::write(&path, text)?;
        written.push(path);
    }
    Ok(written)
}
