//! Command-line entry point: experiment orchestration over the library.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::DVector;
use serde::Serialize;

use nikodym::artifacts::{
    self, fit_artifact, maximal_summary, write_json, write_lemma_csv, write_maximal_csv,
    write_shoot_csv, write_sweep_csv, write_variational_csv,
};
use nikodym::config::ExperimentConfig;
use nikodym::error::{Error, Result};
use nikodym::flow::shooting_trajectory;
use nikodym::maximal::{counterexample_f, maximal_field, TubeSpec};
use nikodym::scaling::{breakdown_verdict, fit_exponent, ratio_sweep, Verdict};
use nikodym::variational::{lemma_margin, invert_shooting, variational_transport, Directions};

#[derive(Parser)]
#[command(name = "nikodym", about = "Geodesic tube-averaging laboratory", version)]
struct Cli {
    /// Plain-text config file; builtin defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker cap (0 = auto). Overrides NIKODYM_THREADS and the config key.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Output directory override.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Integrate one geodesic of the shooting family and write samples.
    Shoot {
        /// Tangential offsets, comma separated.
        #[arg(long, default_value = "0")]
        a: String,
        /// Launch angles, comma separated.
        #[arg(long, default_value = "0")]
        theta: String,
        #[arg(long)]
        s_max: Option<f64>,
        #[arg(long)]
        step: Option<f64>,
    },
    /// Transport the launch-angle variations along a shooting geodesic.
    Variational {
        #[arg(long, default_value = "0")]
        a: String,
        #[arg(long, default_value = "0")]
        theta: String,
        #[arg(long)]
        s_max: Option<f64>,
    },
    /// Determinant margin of the reduced normal block on a parameter grid.
    LemmaCheck {
        #[arg(long, default_value_t = 0.05)]
        s_max: f64,
        #[arg(long, default_value_t = 10)]
        points: usize,
    },
    /// Newton-invert the shooting map at a target point.
    Invert {
        /// Target chart point, comma separated.
        #[arg(long)]
        target: String,
    },
    /// Maximal-function scan over the configured region.
    Maximal {
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        grid_n: Option<usize>,
        #[arg(long)]
        coarse_net: Option<usize>,
    },
    /// Radius sweep of maximal-to-source norm ratios.
    Sweep {
        #[arg(long)]
        deltas: Option<String>,
        #[arg(long)]
        p: Option<f64>,
        #[arg(long)]
        q: Option<f64>,
    },
    /// Fit the scaling exponent of a sweep CSV and render the verdict.
    Fit {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 4)]
        min_points: usize,
    },
    /// Full pipeline: lemma-check, maximal scan, sweep, fit, verdict.
    Verify,
}

fn parse_list(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Usage(format!("invalid number '{t}'")))
        })
        .collect()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(dir) = &cli.out_dir {
        cfg.directory = dir.display().to_string();
    }

    let threads = cli
        .threads
        .or_else(|| {
            std::env::var("NIKODYM_THREADS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(cfg.threads);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Usage(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(&cli.cmd, &cfg))
}

fn out_path(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    PathBuf::from(&cfg.directory).join(name)
}

fn dispatch(cmd: &Cmd, cfg: &ExperimentConfig) -> Result<ExitCode> {
    let canon = cfg.canonical();
    match cmd {
        Cmd::Shoot { a, theta, s_max, step } => {
            let model = cfg.build_model()?;
            let a = parse_list(a)?;
            let theta = parse_list(theta)?;
            let traj = shooting_trajectory(
                &model,
                &a,
                &theta,
                s_max.unwrap_or(cfg.s_max),
                step.unwrap_or(cfg.step),
            )?;
            let path = out_path(cfg, "shoot.csv");
            write_shoot_csv(&path, &canon, &traj)?;
            println!(
                "shoot: {} samples to s = {} (drift {:.3e}) -> {}",
                traj.samples.len(),
                traj.s_end(),
                traj.max_drift,
                path.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Variational { a, theta, s_max } => {
            let model = cfg.build_model()?;
            let a = parse_list(a)?;
            let theta = parse_list(theta)?;
            let traj =
                shooting_trajectory(&model, &a, &theta, s_max.unwrap_or(cfg.s_max), cfg.step)?;
            let transport = variational_transport(&model, &traj, Directions::Theta)?;
            let path = out_path(cfg, "variational.csv");
            write_variational_csv(&path, &canon, &transport)?;
            println!("variational: {} samples -> {}", transport.s.len(), path.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::LemmaCheck { s_max, points } => {
            let model = cfg.build_model()?;
            let grid: Vec<f64> = (1..=*points)
                .map(|k| s_max * k as f64 / *points as f64)
                .collect();
            let report = lemma_margin(&model, &grid)?;
            let path = out_path(cfg, "lemma_check.csv");
            write_lemma_csv(&path, &canon, &report)?;
            println!(
                "lemma-check: verdict {:?}, eps0 = {:?} -> {}",
                report.verdict,
                report.eps0,
                path.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Invert { target } => {
            let model = cfg.build_model()?;
            let target = DVector::from_vec(parse_list(target)?);
            let shot = invert_shooting(&model, &target, None, cfg.step)?;
            #[derive(Serialize)]
            struct InvertArtifact {
                a: Vec<f64>,
                theta: Vec<f64>,
                s: f64,
                residual: f64,
                iterations: usize,
            }
            let payload = InvertArtifact {
                a: shot.a.clone(),
                theta: shot.theta.clone(),
                s: shot.s,
                residual: shot.residual,
                iterations: shot.iterations,
            };
            let path = out_path(cfg, "invert.json");
            write_json(&path, &canon, &payload)?;
            println!(
                "invert: s = {:.6}, residual {:.3e}, {} iterations -> {}",
                shot.s,
                shot.residual,
                shot.iterations,
                path.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Maximal { delta, beta, grid_n, coarse_net } => {
            let model = cfg.build_model()?;
            let geom = model.geometry();
            let delta = delta.unwrap_or(cfg.delta);
            let n = grid_n.unwrap_or(cfg.grid_n);
            let grid = counterexample_f(&geom, model.halfwidth(), delta, n)?;
            let tube = TubeSpec::new(delta, beta.unwrap_or(cfg.beta), cfg.n_axial, cfg.n_transversal)?;
            let mut search = cfg.build_search();
            if let Some(c) = coarse_net {
                search.coarse = *c;
            }
            let region = cfg.build_region()?;
            let field = maximal_field(&grid, &model, &region, &tube, &search)?;
            let csv = out_path(cfg, "maximal.csv");
            write_maximal_csv(&csv, &canon, &field)?;
            let summary = maximal_summary(&field);
            let json = out_path(cfg, "maximal_summary.json");
            write_json(&json, &canon, &summary)?;
            println!(
                "maximal: {} points, min {:.4} max {:.4} c0 {:.4} -> {}, {}",
                field.points.len(),
                summary.min,
                summary.max,
                summary.c0,
                csv.display(),
                json.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Sweep { deltas, p, q } => {
            let model = cfg.build_model()?;
            let mut spec = cfg.build_sweep()?;
            if let Some(d) = deltas {
                spec.deltas = parse_list(d)?;
            }
            if let Some(p) = p {
                spec.p = *p;
            }
            if let Some(q) = q {
                spec.q = *q;
            }
            let outcome = ratio_sweep(&model, &spec)?;
            let path = out_path(cfg, "sweep.csv");
            write_sweep_csv(&path, &canon, &outcome)?;
            for (delta, msg) in &outcome.errors {
                eprintln!("sweep: delta {delta} failed: {msg}");
            }
            println!("sweep: {} records -> {}", outcome.records.len(), path.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Fit { input, min_points } => {
            let records = artifacts::read_sweep_csv(input)?;
            let model = cfg.build_model()?;
            let spec = cfg.build_sweep()?;
            let fit = fit_exponent(&records, *min_points)?;
            let report = breakdown_verdict(
                &fit,
                spec.p,
                spec.resolved_q(model.dim()),
                model.dim(),
                model.geometry().parity(),
            );
            let path = out_path(cfg, "fit.json");
            write_json(&path, &canon, &fit_artifact(&report))?;
            println!(
                "fit: slope {:.4} +- {:.4}, verdict {} -> {}",
                report.slope,
                report.stderr,
                report.verdict,
                path.display()
            );
            Ok(match report.verdict {
                Verdict::Inconclusive => ExitCode::from(2),
                _ => ExitCode::SUCCESS,
            })
        }
        Cmd::Verify => {
            let model = cfg.build_model()?;
            let geom = model.geometry();

            // 1. determinant margin on (0, 0.05]
            let grid: Vec<f64> = (1..=10).map(|k| 0.005 * k as f64).collect();
            let lemma = lemma_margin(&model, &grid)?;
            write_lemma_csv(&out_path(cfg, "lemma_check.csv"), &canon, &lemma)?;

            // 2. maximal scan at the configured radius
            let grid_fn = counterexample_f(&geom, model.halfwidth(), cfg.delta, cfg.grid_n)?;
            let tube = TubeSpec::new(cfg.delta, cfg.beta, cfg.n_axial, cfg.n_transversal)?;
            let region = cfg.build_region()?;
            let search = cfg.build_search();
            let field = maximal_field(&grid_fn, &model, &region, &tube, &search)?;
            write_maximal_csv(&out_path(cfg, "maximal.csv"), &canon, &field)?;
            let summary = maximal_summary(&field);
            write_json(&out_path(cfg, "maximal_summary.json"), &canon, &summary)?;

            // 3. sweep + 4. fit + 5. verdict
            let spec = cfg.build_sweep()?;
            let outcome = ratio_sweep(&model, &spec)?;
            write_sweep_csv(&out_path(cfg, "sweep.csv"), &canon, &outcome)?;
            let min_points = if spec.deltas.len() >= 4 { 4 } else { 3 };
            let fit = fit_exponent(&outcome.records, min_points)?;
            let report = breakdown_verdict(
                &fit,
                spec.p,
                spec.resolved_q(model.dim()),
                model.dim(),
                geom.parity(),
            );
            write_json(&out_path(cfg, "fit.json"), &canon, &fit_artifact(&report))?;

            #[derive(Serialize)]
            struct VerifyArtifact {
                model: String,
                lemma_verdict: String,
                lemma_eps0: Option<f64>,
                maximal_min: f64,
                maximal_c0: f64,
                sweep_records: usize,
                sweep_errors: usize,
                slope: f64,
                stderr: f64,
                trivial_exponent: f64,
                predicted_exponent: f64,
                threshold_p: usize,
                p: f64,
                q: f64,
                verdict: String,
            }
            let payload = VerifyArtifact {
                model: model.descriptor(),
                lemma_verdict: format!("{:?}", lemma.verdict),
                lemma_eps0: lemma.eps0,
                maximal_min: summary.min,
                maximal_c0: summary.c0,
                sweep_records: outcome.records.len(),
                sweep_errors: outcome.errors.len(),
                slope: report.slope,
                stderr: report.stderr,
                trivial_exponent: report.trivial_exponent,
                predicted_exponent: report.predicted_exponent,
                threshold_p: report.threshold_p,
                p: report.p,
                q: report.q,
                verdict: report.verdict.to_string(),
            };
            let path = out_path(cfg, "verify.json");
            write_json(&path, &canon, &payload)?;
            println!(
                "verify: lemma {:?} (eps0 {:?}), slope {:.4} vs trivial {:.4}, verdict {} -> {}",
                lemma.verdict,
                lemma.eps0,
                report.slope,
                report.trivial_exponent,
                report.verdict,
                path.display()
            );
            Ok(match report.verdict {
                Verdict::Inconclusive => ExitCode::from(2),
                _ => ExitCode::SUCCESS,
            })
        }
    }
}
