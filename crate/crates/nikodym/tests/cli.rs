//! End-to-end checks of the command-line interface and its artifacts.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nikodym"))
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

fn data_rows(csv: &str) -> Vec<Vec<f64>> {
    csv.lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .skip(1)
        .map(|l| {
            l.split(',')
                .map(|t| t.trim().parse::<f64>().unwrap_or(f64::NAN))
                .collect()
        })
        .collect()
}

#[test]
fn shoot_flat_writes_straight_line_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("flat.cfg");
    write(
        &cfg,
        "[metric]\nvariant = flat\n\n[output]\ndirectory = OUT\n",
    );
    let out = bin()
        .args(["--config"])
        .arg(&cfg)
        .args(["--out-dir"])
        .arg(tmp.path().join("out"))
        .args(["shoot", "--a", "0.1", "--theta", "0", "--s-max", "0.4"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("out/shoot.csv")).unwrap();
    assert!(csv.lines().next().unwrap().starts_with('#'), "config header embedded");
    assert!(csv.contains("# sha256 = "));
    let rows = data_rows(&csv);
    assert_eq!(rows.len(), 401);
    for row in &rows {
        // s,x1,x2,x3,p1,p2,p3,H
        assert!((row[1] - row[0]).abs() <= 1e-12);
        assert!((row[2] - 0.1).abs() <= 1e-12);
        assert!(row[3].abs() <= 1e-12);
        assert!((row[7] - 0.5).abs() <= 1e-12);
    }
}

#[test]
fn fit_recovers_exact_power_law_from_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    let fixture = tmp.path().join("sweep.csv");
    // hand-written exact power law ratio = 3 delta^{-0.4}
    let mut text = String::from("delta,numerator,denominator,ratio,grid_n,seconds\n");
    for delta in [0.0625f64, 0.03125, 0.015625, 0.0078125] {
        let ratio = 3.0 * delta.powf(-0.4);
        text.push_str(&format!("{delta},1,1,{ratio:.17e},64,0.1\n"));
    }
    write(&fixture, &text);
    let out = bin()
        .args(["--out-dir"])
        .arg(tmp.path())
        .args(["fit", "--input"])
        .arg(&fixture)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("fit.json")).unwrap())
            .unwrap();
    let slope = json["slope"].as_f64().unwrap();
    assert!((slope + 0.4).abs() <= 1e-10, "slope {slope}");
    assert_eq!(json["verdict"], "BREAKDOWN");
    assert_eq!(json["threshold_p"], 2);
}

#[test]
fn malformed_config_fails_with_line_number() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    write(&cfg, "[metric]\nwibble = 3\n");
    let out = bin()
        .args(["--config"])
        .arg(&cfg)
        .args(["lemma-check"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2"), "stderr: {err}");
    assert!(err.contains("wibble"));
}

#[test]
fn variational_writes_transport_blocks() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["--out-dir"])
        .arg(tmp.path())
        .args(["variational", "--a", "0", "--theta", "0", "--s-max", "0.2"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("variational.csv")).unwrap();
    let header = csv.lines().find(|l| l.starts_with("s,")).unwrap();
    assert!(header.contains("dx3_dv1"));
    assert!(header.contains("dp3_dv1"));
    let rows = data_rows(&csv);
    assert_eq!(rows.len(), 201);
    // tangential momentum variation is constant 1 along the axis geodesic
    let last = rows.last().unwrap();
    assert!((last[5] - 1.0).abs() <= 1e-9, "dp2/dtheta stays 1, got {}", last[5]);
}

#[test]
fn lemma_check_reports_verified_margin() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["--out-dir"])
        .arg(tmp.path())
        .args(["lemma-check", "--s-max", "0.05", "--points", "10"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("Verified"), "{stdout}");
    let csv = std::fs::read_to_string(tmp.path().join("lemma_check.csv")).unwrap();
    let rows = data_rows(&csv);
    assert_eq!(rows.len(), 10);
    for row in rows {
        assert!(row[3] > 0.0, "positive margin");
    }
}

#[test]
fn invert_emits_parameter_record() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["--out-dir"])
        .arg(tmp.path())
        .args(["invert", "--target", "0.06,0.01,0.0"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("invert.json")).unwrap())
            .unwrap();
    assert!((json["s"].as_f64().unwrap() - 0.06).abs() < 1e-4);
    assert!(json["residual"].as_f64().unwrap() <= 1e-8);
    assert!(json["a"].as_array().unwrap().len() == 1);
    assert!(json["theta"].as_array().unwrap().len() == 1);
}

#[test]
fn maximal_scan_writes_field_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["--out-dir"])
        .arg(tmp.path())
        .args(["maximal", "--delta", "0.1", "--grid-n", "64", "--coarse-net", "32"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("maximal.csv")).unwrap();
    let rows = data_rows(&csv);
    assert_eq!(rows.len(), 9, "3x3x1 default region grid");
    let json: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(tmp.path().join("maximal_summary.json")).unwrap(),
    )
    .unwrap();
    let c0 = json["c0"].as_f64().unwrap();
    assert!(c0 > 0.3, "center value {c0} reflects the slab-hugging tube");
    assert_eq!(json["failures"], 0);
}

#[test]
fn sweep_then_fit_round_trip_with_reproducible_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("small.cfg");
    write(
        &cfg,
        "[sweep]\ndeltas = 0.125, 0.0625, 0.03125\ngrid_n = 64\np = 2.5\n",
    );
    // identical resolved config (relative out dir) from two working roots
    let run = |dir: &str, threads: &str| {
        let root = tmp.path().join(dir);
        std::fs::create_dir_all(&root).unwrap();
        let out = bin()
            .current_dir(&root)
            .args(["--config"])
            .arg(&cfg)
            .args(["--out-dir", "out"])
            .env("NIKODYM_THREADS", threads)
            .args(["sweep"])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read_to_string(root.join("out/sweep.csv")).unwrap()
    };
    let a = run("a", "1");
    let b = run("b", "2");
    let mask = |text: &str| {
        text.lines()
            .map(|l| {
                if l.starts_with('#') || l.starts_with("delta") {
                    l.to_string()
                } else {
                    l.rsplit_once(',').map(|(head, _)| format!("{head},_")).unwrap_or_default()
                }
            })
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(mask(&a), mask(&b), "byte-identical up to the seconds column");

    // embedded hash is identical because the seconds field is masked out
    let hash = |text: &str| {
        text.lines()
            .find(|l| l.starts_with("# sha256"))
            .unwrap()
            .to_string()
    };
    assert_eq!(hash(&a), hash(&b));

    let out = bin()
        .args(["--config"])
        .arg(&cfg)
        .args(["--out-dir"])
        .arg(tmp.path().join("a/out"))
        .args(["fit", "--min-points", "3", "--input"])
        .arg(tmp.path().join("a/out/sweep.csv"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("a/out/fit.json")).unwrap())
            .unwrap();
    assert!(json["slope"].as_f64().unwrap() < -0.3);
}

#[test]
fn verify_runs_the_full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("verify.cfg");
    // reduced radii keep the end-to-end run quick
    write(
        &cfg,
        "[sweep]\ndeltas = 0.125, 0.0625, 0.03125\ngrid_n = 64\n\n[maximal]\ndelta = 0.0625\ngrid_n = 64\n",
    );
    let out = bin()
        .args(["--config"])
        .arg(&cfg)
        .args(["--out-dir"])
        .arg(tmp.path().join("out"))
        .args(["verify"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("out/verify.json")).unwrap())
            .unwrap();
    assert_eq!(json["verdict"], "BREAKDOWN");
    assert_eq!(json["lemma_verdict"], "Verified");
    assert_eq!(json["threshold_p"], 2);
    assert!(json["slope"].as_f64().unwrap() < -0.3);
    assert!(json["maximal_c0"].as_f64().unwrap() > 0.3);
    for artifact in [
        "lemma_check.csv",
        "maximal.csv",
        "maximal_summary.json",
        "sweep.csv",
        "fit.json",
    ] {
        assert!(tmp.path().join("out").join(artifact).exists(), "{artifact}");
    }
}
