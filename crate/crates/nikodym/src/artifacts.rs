//! Artifact writers: CSV and JSON files with the resolved config and a
//! content hash embedded.
//!
//! Every CSV starts with `#`-comment lines carrying the canonical config and
//! a sha256 over the config plus all data rows. Timing fields are masked
//! before hashing so that reruns of the same configuration produce the same
//! hash (wall-clock seconds are the one non-deterministic column).

use std::io::Write;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::flow::Trajectory;
use crate::maximal::MaximalField;
use crate::scaling::{BreakdownReport, SweepOutcome};
use crate::variational::LemmaReport;

/// Fixed float format: 17 significant digits, locale-independent.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Hash of the canonical config plus data rows, with listed comma-separated
/// fields masked out (used for timing columns).
pub fn content_hash(config: &str, rows: &[String], masked_fields: &[usize]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(config.as_bytes());
    hasher.update(b"\n");
    for row in rows {
        if masked_fields.is_empty() {
            hasher.update(row.as_bytes());
        } else {
            let fields: Vec<&str> = row.split(',').collect();
            let masked: Vec<&str> = fields
                .iter()
                .enumerate()
                .map(|(i, f)| if masked_fields.contains(&i) { "_" } else { *f })
                .collect();
            hasher.update(masked.join(",").as_bytes());
        }
        hasher.update(b"\n");
    }
    format!("{:x}", hasher.finalize())
}

fn write_csv(
    path: &Path,
    config: &str,
    header: &str,
    rows: &[String],
    masked_fields: &[usize],
) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let hash = content_hash(config, rows, masked_fields);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for line in config.lines() {
        writeln!(out, "# {line}")?;
    }
    writeln!(out, "# sha256 = {hash}")?;
    writeln!(out, "{header}")?;
    for row in rows {
        writeln!(out, "{row}")?;
    }
    Ok(())
}

/// Envelope for JSON artifacts.
#[derive(Serialize)]
struct JsonArtifact<'a, T: Serialize> {
    config: Vec<&'a str>,
    sha256: String,
    #[serde(flatten)]
    payload: &'a T,
}

pub fn write_json<T: Serialize>(path: &Path, config: &str, payload: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let body = serde_json::to_string(payload).expect("serializable payload");
    let hash = content_hash(config, &[body], &[]);
    let artifact = JsonArtifact {
        config: config.lines().collect(),
        sha256: hash,
        payload,
    };
    let text = serde_json::to_string_pretty(&artifact).expect("serializable artifact");
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// `shoot` artifact: one row per sample, `s,x1..xd,p1..pd,H`.
pub fn write_shoot_csv(path: &Path, config: &str, traj: &Trajectory) -> Result<()> {
    let dim = traj.samples[0].x.len();
    let mut header = String::from("s");
    for i in 1..=dim {
        header.push_str(&format!(",x{i}"));
    }
    for i in 1..=dim {
        header.push_str(&format!(",p{i}"));
    }
    header.push_str(",H");
    let rows: Vec<String> = traj
        .samples
        .iter()
        .map(|smp| {
            let mut row = fmt_f64(smp.s);
            for v in smp.x.iter() {
                row.push_str(&format!(",{}", fmt_f64(*v)));
            }
            for v in smp.p.iter() {
                row.push_str(&format!(",{}", fmt_f64(*v)));
            }
            row.push_str(&format!(",{}", fmt_f64(smp.energy)));
            row
        })
        .collect();
    write_csv(path, config, &header, &rows, &[])
}

/// `variational` artifact: transported blocks flattened per sample.
pub fn write_variational_csv(
    path: &Path,
    config: &str,
    transport: &crate::variational::Transport,
) -> Result<()> {
    let n = transport.x_blocks[0].nrows();
    let m = transport.x_blocks[0].ncols();
    let mut header = String::from("s");
    for j in 1..=m {
        for i in 1..=n {
            header.push_str(&format!(",dx{i}_dv{j}"));
        }
    }
    for j in 1..=m {
        for i in 1..=n {
            header.push_str(&format!(",dp{i}_dv{j}"));
        }
    }
    let rows: Vec<String> = transport
        .s
        .iter()
        .enumerate()
        .map(|(k, &s)| {
            let mut row = fmt_f64(s);
            for j in 0..m {
                for i in 0..n {
                    row.push_str(&format!(",{}", fmt_f64(transport.x_blocks[k][(i, j)])));
                }
            }
            for j in 0..m {
                for i in 0..n {
                    row.push_str(&format!(",{}", fmt_f64(transport.p_blocks[k][(i, j)])));
                }
            }
            row
        })
        .collect();
    write_csv(path, config, &header, &rows, &[])
}

/// `lemma-check` artifact: `s,det_xi11,bound,margin,verdict`.
pub fn write_lemma_csv(path: &Path, config: &str, report: &LemmaReport) -> Result<()> {
    let rows: Vec<String> = report
        .rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{}",
                fmt_f64(r.s),
                fmt_f64(r.det_xi11),
                fmt_f64(r.bound),
                fmt_f64(r.margin),
                r.margin > 0.0
            )
        })
        .collect();
    write_csv(path, config, "s,det_xi11,bound,margin,verdict", &rows, &[])
}

/// `maximal` artifact pair: per-point CSV and a JSON summary.
#[derive(Serialize)]
pub struct MaximalSummary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Value at the region center point.
    pub c0: f64,
    pub failures: usize,
}

pub fn maximal_summary(field: &MaximalField) -> MaximalSummary {
    let vals = &field.values;
    let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    // center = point nearest the region center
    let mut c0 = 0.0;
    let mut best = f64::INFINITY;
    for (pt, &v) in field.points.iter().zip(vals) {
        let d: f64 = pt
            .iter()
            .zip(&field.region.center)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if d < best {
            best = d;
            c0 = v;
        }
    }
    MaximalSummary { min, max, mean, c0, failures: field.failures.len() }
}

pub fn write_maximal_csv(path: &Path, config: &str, field: &MaximalField) -> Result<()> {
    let dim = field.region.center.len();
    let mut header = String::new();
    for i in 1..=dim {
        header.push_str(&format!("x{i},"));
    }
    header.push_str("value");
    for i in 1..=dim {
        header.push_str(&format!(",witness_p{i}"));
    }
    let rows: Vec<String> = field
        .points
        .iter()
        .zip(&field.values)
        .zip(&field.witnesses)
        .map(|((pt, &v), w)| {
            let mut row = String::new();
            for c in pt.iter() {
                row.push_str(&format!("{},", fmt_f64(*c)));
            }
            row.push_str(&fmt_f64(v));
            for c in w.iter() {
                row.push_str(&format!(",{}", fmt_f64(*c)));
            }
            row
        })
        .collect();
    write_csv(path, config, &header, &rows, &[])
}

/// `sweep` artifact: `delta,numerator,denominator,ratio,grid_n,seconds`.
/// The seconds column is masked out of the content hash.
pub fn write_sweep_csv(path: &Path, config: &str, outcome: &SweepOutcome) -> Result<()> {
    let rows: Vec<String> = outcome
        .records
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{},{:.3}",
                fmt_f64(r.delta),
                fmt_f64(r.numerator),
                fmt_f64(r.denominator),
                fmt_f64(r.ratio),
                r.grid_n,
                r.seconds
            )
        })
        .collect();
    write_csv(
        path,
        config,
        "delta,numerator,denominator,ratio,grid_n,seconds",
        &rows,
        &[5],
    )
}

/// Read a sweep CSV back (comments skipped); returns records with zeroed
/// timings.
pub fn read_sweep_csv(path: &Path) -> Result<Vec<crate::scaling::SweepRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("delta") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 5 {
            return Err(crate::error::Error::Usage(format!(
                "malformed sweep row '{line}'"
            )));
        }
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| crate::error::Error::Usage(format!("bad number '{s}'")))
        };
        out.push(crate::scaling::SweepRecord {
            delta: parse(fields[0])?,
            numerator: parse(fields[1])?,
            denominator: parse(fields[2])?,
            ratio: parse(fields[3])?,
            grid_n: fields[4].trim().parse().unwrap_or(0),
            seconds: 0.0,
        });
    }
    Ok(out)
}

/// `fit` artifact payload.
#[derive(Serialize)]
pub struct FitArtifact {
    pub slope: f64,
    pub stderr: f64,
    pub intercept: f64,
    pub n: usize,
    pub verdict: String,
    pub trivial_exponent: f64,
    pub predicted_exponent: f64,
    pub p: f64,
    pub q: f64,
    pub threshold_p: usize,
}

pub fn fit_artifact(report: &BreakdownReport) -> FitArtifact {
    FitArtifact {
        slope: report.slope,
        stderr: report.stderr,
        intercept: report.intercept,
        n: report.n,
        verdict: report.verdict.to_string(),
        trivial_exponent: report.trivial_exponent,
        predicted_exponent: report.predicted_exponent,
        p: report.p,
        q: report.q,
        threshold_p: report.threshold_p,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_masks_requested_fields() {
        let rows_a = vec!["1,2,3".to_string()];
        let rows_b = vec!["1,2,9".to_string()];
        assert_ne!(content_hash("cfg", &rows_a, &[]), content_hash("cfg", &rows_b, &[]));
        assert_eq!(content_hash("cfg", &rows_a, &[2]), content_hash("cfg", &rows_b, &[2]));
    }

    #[test]
    fn fixed_format_has_seventeen_significant_digits() {
        assert_eq!(fmt_f64(0.5), "5.0000000000000000e-1");
        assert_eq!(fmt_f64(1.0 / 3.0), "3.3333333333333331e-1");
    }
}
