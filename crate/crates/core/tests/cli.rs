//! End-to-end runs of the `effdyn` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn effdyn(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_effdyn"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("EFFDYN_SEED")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p
}

const RADIAL: &str = r#"
seed = 3

[system]
name = "radial2d"

[integrator]
dt = 0.001
n_steps = 1000

[grid]
axes = [{ lo = 0.2, hi = 2.2, n = 401 }]

[cosim]
horizon = 1.0
n_replicas = 200
"#;

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn assert_csvs_rectangular(dir: &Path) {
    let mut seen = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "csv") {
            seen += 1;
            let mut r = csv::Reader::from_path(&p).unwrap();
            let width = r.headers().unwrap().len();
            let mut rows = 0;
            for rec in r.records() {
                assert_eq!(rec.unwrap().len(), width, "{}", p.display());
                rows += 1;
            }
            assert!(rows > 0, "{} is empty", p.display());
        }
    }
    assert!(seen >= 2);
}

#[test]
fn radial_pipeline_is_fast_accurate_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), RADIAL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));

    let start = Instant::now();
    let first = effdyn(&cfg, &a, &["pipeline"]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    assert!(start.elapsed().as_secs_f64() < 60.0);

    let summary = json(&a.join("summary.json"));
    let sup = summary["mean_sq_sup"].as_f64().unwrap();
    assert!(sup <= 0.01, "mean squared sup-error {sup}");
    assert_csvs_rectangular(&a);

    assert!(effdyn(&cfg, &b, &["pipeline"]).status.success());
    let (ma, mb) = (json(&a.join("manifest.json")), json(&b.join("manifest.json")));
    assert_eq!(ma["outputs"], mb["outputs"]);
    assert_eq!(ma["config_sha256"], mb["config_sha256"]);
}

#[test]
fn invalid_configuration_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let text = format!("{RADIAL}\n[sweep]\nparameter = \"anisotropy\"\nvalues = []\n");
    let cfg = write_config(tmp.path(), &text);
    let out = effdyn(&cfg, &tmp.path().join("o"), &["scaling"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sweep.values"));
}

#[test]
fn frobenius_counterexample_exits_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let text = "seed = 1\n[system]\nname = \"frobenius-counterexample\"\n[integrator]\ndt = 0.001\nn_steps = 10\n";
    let cfg = write_config(tmp.path(), text);
    let out = effdyn(&cfg, &tmp.path().join("o"), &["frobenius"]);
    assert_eq!(out.status.code(), Some(1));

    let text = text.replace("frobenius-counterexample", "polar-pair");
    let cfg = write_config(tmp.path(), &text);
    let out = effdyn(&cfg, &tmp.path().join("p"), &["frobenius"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn seed_environment_overrides_flag_and_file() {
    let tmp = tempfile::tempdir().unwrap();
    let text = "seed = 1\n[system]\nname = \"ou2d\"\n[integrator]\ndt = 0.01\nn_steps = 50\n";
    let cfg = write_config(tmp.path(), text);
    let run = |dir: &str, flag: Option<&str>, env: Option<&str>| {
        let out = tmp.path().join(dir);
        let mut c = Command::new(env!("CARGO_BIN_EXE_effdyn"));
        c.arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .env_remove("EFFDYN_SEED");
        if let Some(s) = flag {
            c.args(["--seed", s]);
        }
        if let Some(s) = env {
            c.env("EFFDYN_SEED", s);
        }
        assert!(c.arg("simulate").status().unwrap().success());
        fs::read_to_string(fs::read_dir(&out).unwrap().next().unwrap().unwrap().path()).unwrap()
    };
    let file_seed = run("f", None, None);
    let flag_seed = run("g", Some("9"), None);
    let env_seed = run("e", Some("1"), Some("9"));
    assert_ne!(file_seed, flag_seed);
    assert_eq!(flag_seed, env_seed);
}
