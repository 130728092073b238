use std::path::Path;
use std::process::{Command, Output};

fn mpca(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpca"))
        .args(args)
        .env_remove("MPCA_SEED")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("cfg.json");
    std::fs::write(
        &path,
        r#"{"dims":[6,5],"n":60,"r":2,"sigma":[3.0,2.5],"replicates":6,"seed":5,"components_mode":"random"}"#,
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn oracle_check_passes_and_detects_corruption() {
    let o = mpca(&["oracle-check"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("ALS stationarity"));
    let o = mpca(&["oracle-check", "--corrupt-als"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn simulate_report_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let o = mpca(&["simulate", "--config", &cfg, "--out", a.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = mpca(&["simulate", "--config", &cfg, "--out", b.to_str().unwrap(), "--jobs", "2"]);
    assert_eq!(code(&o), 0);
    let ra = std::fs::read(a.join("report.json")).unwrap();
    assert_eq!(ra, std::fs::read(b.join("report.json")).unwrap());
    assert!(a.join("timing.json").exists());

    // bin counts add up to replicates x targets (5 default targets)
    let hist = std::fs::read_to_string(a.join("histogram.csv")).unwrap();
    let mut rdr = hist.lines();
    let header: Vec<&str> = rdr.next().unwrap().split(',').collect();
    let col = header.iter().position(|&h| h == "count").unwrap();
    let total: usize = rdr.map(|l| l.split(',').nth(col).unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(total, 6 * 5);
    let cov = std::fs::read_to_string(a.join("coverage.csv")).unwrap();
    assert_eq!(cov.lines().count(), 1 + 5 * 3);
}

#[test]
fn seed_environment_variable_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = |seed: Option<&str>, out: &str| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_mpca"));
        c.args(["simulate", "--config", &cfg, "--reps", "2", "--out", out]);
        match seed {
            Some(s) => c.env("MPCA_SEED", s),
            None => c.env_remove("MPCA_SEED"),
        };
        assert!(c.output().unwrap().status.success());
        std::fs::read_to_string(Path::new(out).join("report.json")).unwrap()
    };
    let base = run(None, dir.path().join("x").to_str().unwrap());
    let env = run(Some("99"), dir.path().join("y").to_str().unwrap());
    assert!(base.contains("\"seed\": 5"));
    assert!(env.contains("\"seed\": 99"));
    assert_ne!(base, env);
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&mpca(&["simulate", "--preset", "nope", "--out", out])), 1);
    assert_eq!(code(&mpca(&["simulate", "--preset", "paper-low", "--alpha", "2", "--out", out])), 1);
    assert_eq!(code(&mpca(&["simulate", "--out", out])), 1);
    assert_eq!(code(&mpca(&["bogus"])), 1);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"dims":[4,4],"n":40}"#).unwrap();
    assert_eq!(code(&mpca(&["simulate", "--config", bad.to_str().unwrap(), "--out", out])), 1);
    let csv = dir.path().join("x.csv");
    std::fs::write(&csv, "i1,i2,i3,value\n1,1,3,1.0\n").unwrap();
    let o = mpca(&["analyze", "--input", csv.to_str().unwrap(), "--dims", "1,2,2", "--r", "1", "--out", out]);
    assert_eq!(code(&o), 1);
}

#[test]
fn numerical_failure_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("zero.csv");
    let mut text = String::from("i1,i2,i3,value\n");
    for i in 1..=5 {
        for j in 1..=3 {
            for k in 1..=3 {
                text.push_str(&format!("{i},{j},{k},0\n"));
            }
        }
    }
    std::fs::write(&csv, text).unwrap();
    let o = mpca(&["analyze", "--input", csv.to_str().unwrap(), "--r", "1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn analyze_reproduces_simulated_fit() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    let o = mpca(&[
        "simulate", "--preset", "paper-low", "--reps", "2", "--seed", "42", "--out", sim.to_str().unwrap(), "--export-data",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ana = dir.path().join("ana");
    let o = mpca(&[
        "analyze",
        "--input",
        sim.join("data.csv").to_str().unwrap(),
        "--dims",
        "200,10,10",
        "--r",
        "2",
        "--seed",
        "42",
        "--out",
        ana.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read(sim.join("components.json")).unwrap(),
        std::fs::read(ana.join("components.json")).unwrap()
    );
    let inf = std::fs::read_to_string(ana.join("inference.csv")).unwrap();
    assert!(inf.starts_with("k,q,probe,point,se,lo,hi,z,reject,regime\n"));
    // 2 components x 2 modes x 10 coordinates
    assert_eq!(inf.lines().count(), 1 + 40);
    for f in ["loadings.json", "inference.json", "bundle.json"] {
        assert!(ana.join(f).exists(), "{f}");
    }
}

#[test]
fn analyze_with_preprocessing_flags() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("pos.csv");
    let mut text = String::from("i1,i2,i3,value\n");
    let mut state = 12345u64;
    for i in 1..=40 {
        for j in 1..=5 {
            for k in 1..=4 {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let noise = (state >> 11) as f64 / (1u64 << 53) as f64;
                let v = (1.0 + (i % 7) as f64 * j as f64 * 0.3) * (k as f64) * (1.0 + noise);
                text.push_str(&format!("{i},{j},{k},{v}\n"));
            }
        }
    }
    std::fs::write(&csv, text).unwrap();
    let out = dir.path().join("out");
    let o = mpca(&[
        "analyze", "--input", csv.to_str().unwrap(), "--r", "1", "--log", "--mad", "--regime", "a", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = std::fs::read_to_string(out.join("loadings.json")).unwrap();
    assert!(report.contains("\"regime\": \"A\""));
    assert!(report.contains("heuristic_share"));
}
