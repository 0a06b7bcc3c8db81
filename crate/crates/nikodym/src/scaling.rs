//! Radius sweeps, log-log exponent fits, and breakdown verdicts.
//!
//! A sweep builds the slab indicator at each tube radius, scans the maximal
//! function over the evaluation region, and records the ratio of the
//! maximal-field norm over the region to the source norm over the chart.
//! The fitted log-log slope is compared against the exponent the uniform
//! maximal bound would force; a markedly steeper decay is reported as a
//! breakdown of that bound for the chosen integrability pair.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::maximal::{
    counterexample_f, lp_norm_field, lp_norm_grid, maximal_field, Region, SearchSpec, TubeSpec,
};
use crate::metric::{CometricModel, Parity};

/// One radius sample of a ratio sweep.
#[derive(Clone, Debug, Serialize)]
pub struct SweepRecord {
    pub delta: f64,
    pub numerator: f64,
    pub denominator: f64,
    pub ratio: f64,
    pub grid_n: usize,
    pub seconds: f64,
}

/// Sweep results plus per-radius failures (a failed radius does not abort
/// the sweep).
#[derive(Clone, Debug, Default)]
pub struct SweepOutcome {
    pub records: Vec<SweepRecord>,
    pub errors: Vec<(f64, String)>,
}

/// Sweep parameters.
#[derive(Clone, Debug)]
pub struct SweepSpec {
    pub deltas: Vec<f64>,
    pub p: f64,
    /// 0 selects the paired exponent `(dim - 1) p'`.
    pub q: f64,
    /// Fixed grid resolution; 0 selects `min(cap, max(64, ceil(8 / delta)))`.
    pub grid_n: usize,
    pub grid_cap: usize,
    pub region: Region,
    pub beta: f64,
    pub n_axial: usize,
    pub n_transversal: usize,
    pub search: SearchSpec,
}

impl SweepSpec {
    pub fn resolved_q(&self, dim: usize) -> f64 {
        if self.q > 0.0 {
            self.q
        } else {
            (dim as f64 - 1.0) * self.p / (self.p - 1.0)
        }
    }

    pub fn grid_for(&self, delta: f64) -> usize {
        if self.grid_n > 0 {
            self.grid_n
        } else {
            self.grid_cap.min(64usize.max((8.0 / delta).ceil() as usize))
        }
    }
}

/// Run the ratio sweep over decreasing radii.
pub fn ratio_sweep(model: &CometricModel, spec: &SweepSpec) -> Result<SweepOutcome> {
    if spec.deltas.is_empty() || spec.deltas.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::Usage("sweep radii must be strictly decreasing".into()));
    }
    if spec.p < 1.0 {
        return Err(Error::Usage("sweep exponent p must be >= 1".into()));
    }
    let geom = model.geometry();
    let q = spec.resolved_q(geom.dim);
    let mut outcome = SweepOutcome::default();
    for &delta in &spec.deltas {
        let start = std::time::Instant::now();
        let attempt = (|| -> Result<SweepRecord> {
            let n = spec.grid_for(delta);
            let grid = counterexample_f(&geom, model.halfwidth(), delta, n)?;
            let tube = TubeSpec::new(delta, spec.beta, spec.n_axial, spec.n_transversal)?;
            tube.validate_against(model.halfwidth())?;
            let field = maximal_field(&grid, model, &spec.region, &tube, &spec.search)?;
            if !field.failures.is_empty() {
                return Err(Error::Usage(format!(
                    "{} region points failed at delta {delta}",
                    field.failures.len()
                )));
            }
            let numerator = lp_norm_field(&field, q)?;
            let denominator = lp_norm_grid(&grid, spec.p)?;
            if !(numerator.is_finite() && denominator > 0.0) {
                return Err(Error::NonFinite { context: "sweep norms".into() });
            }
            Ok(SweepRecord {
                delta,
                numerator,
                denominator,
                ratio: numerator / denominator,
                grid_n: n,
                seconds: start.elapsed().as_secs_f64(),
            })
        })();
        match attempt {
            Ok(rec) => outcome.records.push(rec),
            Err(e) => outcome.errors.push((delta, e.to_string())),
        }
    }
    Ok(outcome)
}

/// Ordinary least squares on `(ln delta, ln ratio)`.
#[derive(Clone, Debug, Serialize)]
pub struct ExponentFit {
    pub slope: f64,
    pub intercept: f64,
    pub stderr: f64,
    pub n_points: usize,
    pub residual_max: f64,
}

pub const DEFAULT_MIN_POINTS: usize = 4;

/// Fit the scaling exponent. `min_points` defaults to 4; coarse three-point
/// checks may opt down to 3 explicitly.
pub fn fit_exponent(records: &[SweepRecord], min_points: usize) -> Result<ExponentFit> {
    let min_points = min_points.max(3);
    let pts: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.ratio.is_finite() && r.ratio > 0.0)
        .map(|r| (r.delta.ln(), r.ratio.ln()))
        .collect();
    if pts.len() < min_points {
        return Err(Error::InsufficientData { needed: min_points, got: pts.len() });
    }
    let n = pts.len() as f64;
    let mean_x = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    if sxx <= 0.0 {
        return Err(Error::Usage("degenerate abscissas in exponent fit".into()));
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let residuals: Vec<f64> = pts
        .iter()
        .map(|p| p.1 - (intercept + slope * p.0))
        .collect();
    let ss_res: f64 = residuals.iter().map(|r| r * r).sum();
    let dof = (pts.len() as f64 - 2.0).max(1.0);
    let stderr = (ss_res / dof / sxx).sqrt();
    let residual_max = residuals.iter().fold(0.0f64, |a, r| a.max(r.abs()));
    if !stderr.is_finite() {
        return Err(Error::NonFinite { context: "exponent fit".into() });
    }
    Ok(ExponentFit { slope, intercept, stderr, n_points: pts.len(), residual_max })
}

/// Verdict of the breakdown comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Verdict {
    #[serde(rename = "BREAKDOWN")]
    Breakdown,
    #[serde(rename = "NO-BREAKDOWN")]
    NoBreakdown,
    #[serde(rename = "INCONCLUSIVE")]
    Inconclusive,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Verdict::Breakdown => write!(f, "BREAKDOWN"),
            Verdict::NoBreakdown => write!(f, "NO-BREAKDOWN"),
            Verdict::Inconclusive => write!(f, "INCONCLUSIVE"),
        }
    }
}

/// Comparison of a measured slope against the exponent the uniform bound
/// would force.
#[derive(Clone, Debug, Serialize)]
pub struct BreakdownReport {
    pub slope: f64,
    pub stderr: f64,
    pub intercept: f64,
    pub n: usize,
    pub verdict: Verdict,
    /// `1 - dim / p`: the radius exponent of the uniform bound.
    pub trivial_exponent: f64,
    /// `-m / p` with `m` the normal-codimension count: the exponent the
    /// concentration construction drives the ratio to.
    pub predicted_exponent: f64,
    pub p: f64,
    pub q: f64,
    /// Integrability threshold above which the uniform bound is expected to
    /// fail: `ceil((dim + 1) / 2)`.
    pub threshold_p: usize,
    pub margin: f64,
}

/// Compare a fitted slope against the uniform-bound exponent. Breakdown is
/// declared when the slope undercuts `1 - dim/p` by more than
/// `2 stderr + 0.05`; a fit with `stderr > 0.2` is inconclusive.
pub fn breakdown_verdict(
    fit: &ExponentFit,
    p: f64,
    q: f64,
    dim: usize,
    parity: Parity,
) -> BreakdownReport {
    let n_sub = (dim + 2) / 2;
    let m = dim - n_sub;
    debug_assert_eq!(
        parity,
        if dim % 2 == 1 { Parity::Odd } else { Parity::Even }
    );
    let trivial = 1.0 - dim as f64 / p;
    let predicted = -(m as f64) / p;
    let threshold_p = (dim + 2) / 2;
    let margin = 2.0 * fit.stderr + 0.05;
    let verdict = if fit.stderr > 0.2 {
        Verdict::Inconclusive
    } else if fit.slope < trivial - margin {
        Verdict::Breakdown
    } else {
        Verdict::NoBreakdown
    };
    BreakdownReport {
        slope: fit.slope,
        stderr: fit.stderr,
        intercept: fit.intercept,
        n: fit.n_points,
        verdict,
        trivial_exponent: trivial,
        predicted_exponent: predicted,
        p,
        q,
        threshold_p,
        margin,
    }
}
