use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn mvm(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mvm"));
    cmd.args(args).env_remove("MVM_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn mvm")
}

fn write(dir: &TempDir, name: &str, text: &str) -> String {
    let path = dir.path().join(name);
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const EX91: &str = r#"{
  "support": [-1, 0, 1],
  "weights": [0.25, 0.25, 0.5],
  "controls": ["id", "const:0", [-0.5, 0, 0.5], [-2, 0, 2]],
  "beta": 1.0,
  "cost": {"kind": "ex91", "phi": "tanh", "rho_bar": "id", "alpha": 0.5},
  "mesh": 20,
  "delta": 0.03
}"#;

#[test]
fn solve_writes_report_csv_and_sidecar() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "ex91.json", EX91);
    let out = dir.path().join("r.json");
    let res = mvm(&["solve", "--config", &cfg, "--out", out.to_str().unwrap()], &[]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let doc = read_json(&out);
    assert_eq!(doc["schema"], "mvm/1");
    assert_eq!(doc["problem"], "ex91");
    assert_eq!(doc["mesh"], 20);
    assert!(doc["max_error_vs_oracle"].as_f64().unwrap() <= 0.05);
    let csv_path = doc["values_csv_path"].as_str().unwrap();
    let csv = fs::read_to_string(csv_path).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "p_1,p_2,p_3,value,policy_index");
    assert_eq!(csv.lines().count(), 1 + 231);
    assert_eq!(doc["records"][0]["policy_index"], 0);
    let meta = read_json(&dir.path().join("r.meta.json"));
    assert!(meta["runtime_seconds"].as_f64().unwrap() >= 0.0);
}

#[test]
fn identical_config_gives_identical_bytes_for_any_thread_count() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "ex91.json", EX91);
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    let csv_a = dir.path().join("a.csv");
    let csv_b = dir.path().join("b.csv");
    let ra = mvm(
        &[
            "solve",
            "--config",
            &cfg,
            "--out",
            a.to_str().unwrap(),
            "--csv",
            csv_a.to_str().unwrap(),
            "--threads",
            "1",
        ],
        &[],
    );
    let rb = mvm(
        &[
            "solve",
            "--config",
            &cfg,
            "--out",
            b.to_str().unwrap(),
            "--csv",
            csv_b.to_str().unwrap(),
        ],
        &[("MVM_THREADS", "3")],
    );
    assert_eq!(ra.status.code(), Some(0));
    assert_eq!(rb.status.code(), Some(0));
    let strip = |p: &Path| {
        let mut v = read_json(p);
        v.as_object_mut().unwrap().remove("values_csv_path");
        v
    };
    assert_eq!(strip(&a), strip(&b));
    assert_eq!(fs::read(&csv_a).unwrap(), fs::read(&csv_b).unwrap());

    let sim = write(
        &dir,
        "sim.json",
        r#"{"support": [0, 1], "weights": [0.3, 0.7], "controls": ["id"], "cost": {"kind": "constant", "value": 1},
            "beta": 0.5, "dt": 0.01, "horizon": 1.0, "paths": 200, "seed": 4}"#,
    );
    let s1 = dir.path().join("s1.json");
    let s2 = dir.path().join("s2.json");
    assert_eq!(
        mvm(
            &[
                "simulate",
                "--config",
                &sim,
                "--out",
                s1.to_str().unwrap(),
                "--threads",
                "1"
            ],
            &[]
        )
        .status
        .code(),
        Some(0)
    );
    assert_eq!(
        mvm(
            &[
                "simulate",
                "--config",
                &sim,
                "--out",
                s2.to_str().unwrap(),
                "--threads",
                "4"
            ],
            &[]
        )
        .status
        .code(),
        Some(0)
    );
    assert_eq!(fs::read(&s1).unwrap(), fs::read(&s2).unwrap());
    let doc = read_json(&s1);
    for key in ["estimate", "std_error", "paths", "seed", "clamped_fraction"] {
        assert!(doc.get(key).is_some(), "missing {key}");
    }
    // constant cost, left-point rule on [0, 1]: dt sum_k e^{-beta k dt} on every path
    let exact: f64 = (0..100).map(|k| 0.01 * (-0.5 * 0.01 * k as f64).exp()).sum();
    assert!(
        (doc["estimate"].as_f64().unwrap() - exact).abs() < 1e-9,
        "{}",
        doc["estimate"]
    );
}

#[test]
fn config_echo_reparses_to_the_same_config() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "ex91.json", EX91);
    let out = dir.path().join("r.json");
    assert_eq!(
        mvm(&["solve", "--config", &cfg, "--out", out.to_str().unwrap()], &[])
            .status
            .code(),
        Some(0)
    );
    let echo = read_json(&out)["config"].clone();
    let again = write(&dir, "echo.json", &echo.to_string());
    let out2 = dir.path().join("r2.json");
    assert_eq!(
        mvm(&["solve", "--config", &again, "--out", out2.to_str().unwrap()], &[])
            .status
            .code(),
        Some(0)
    );
    assert_eq!(read_json(&out2)["config"], echo);
}

#[test]
fn malformed_config_exits_two_and_names_the_field() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("r.json");
    let cases = [
        (r#"{"support": [0, 1], "mesh": "fine"}"#, "mesh"),
        (
            r#"{"support": [0, 1], "controls": ["id"], "cost": {"kind": "ex91", "phi": "id", "rho_bar": "id"}}"#,
            "alpha",
        ),
        (
            r#"{"support": [0, 1], "controls": [[1, 2, 3]], "cost": {"kind": "ex92"}}"#,
            "controls[0]",
        ),
        (
            r#"{"support": [0, 1], "controls": ["cube"], "cost": {"kind": "ex92"}}"#,
            "controls[0]",
        ),
        (
            r#"{"support": [0, 1], "controls": ["id"], "cost": {"kind": "ex92"}, "bogus": 1}"#,
            "bogus",
        ),
        (r#"{"controls": ["id"], "cost": {"kind": "ex92"}}"#, "support"),
    ];
    for (i, (text, field)) in cases.iter().enumerate() {
        let cfg = write(&dir, &format!("bad{i}.json"), text);
        let res = mvm(&["solve", "--config", &cfg, "--out", out.to_str().unwrap()], &[]);
        let err = String::from_utf8_lossy(&res.stderr);
        assert_eq!(res.status.code(), Some(2), "{text}: {err}");
        assert!(err.contains(field), "{text}: {err}");
    }
    assert!(!out.exists());
}

#[test]
fn usage_errors_exit_two_with_usage_text() {
    for args in [&["frobnicate"][..], &["solve", "--nope"][..], &["validate"][..]] {
        let res = mvm(args, &[]);
        assert_eq!(res.status.code(), Some(2), "{args:?}");
        assert!(String::from_utf8_lossy(&res.stderr).contains("Usage"), "{args:?}");
    }
    let res = mvm(&["validate", "--suite", "A9"], &[("MVM_THREADS", "x")]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("--threads"));
    assert_eq!(mvm(&["--help"], &[]).status.code(), Some(0));
}

#[test]
fn validate_exit_code_tracks_the_outcome() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("v.json");
    let res = mvm(&["validate", "--suite", "A9", "--out", out.to_str().unwrap()], &[]);
    assert_eq!(res.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&res.stdout).starts_with("A9 PASS"));
    let doc = read_json(&out);
    assert_eq!(doc["records"][0]["id"], "A9");
    assert_eq!(doc["passed"], true);

    let res = mvm(&["validate", "--suite", "game_convex"], &[]);
    assert_eq!(res.status.code(), Some(0));
    let res = mvm(&["validate", "--suite", "ex92"], &[]);
    assert_eq!(res.status.code(), Some(1), "{}", String::from_utf8_lossy(&res.stdout));
    let res = mvm(&["validate", "--suite", "A99"], &[]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn game_and_asian_commands_report_oracles() {
    let dir = TempDir::new().unwrap();
    let game = write(
        &dir,
        "g.json",
        r#"{"game": "concave", "horizon": 1.0, "mesh": 10, "steps": 10}"#,
    );
    let out = dir.path().join("g.json.out");
    let csv = dir.path().join("g.csv");
    let res = mvm(
        &[
            "game",
            "--config",
            &game,
            "--out",
            out.to_str().unwrap(),
            "--csv",
            csv.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(read_json(&out)["max_error_vs_oracle"].as_f64().unwrap() <= 0.05);
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 12);
    assert_eq!(read_json(&out)["records"], Value::Array(Vec::new()));

    let asian = write(
        &dir,
        "a.json",
        r#"{"support": [0, 1], "weights": [0.5, 0.5], "payoff": "sq", "mesh": 10, "steps": 10}"#,
    );
    let out = dir.path().join("a.out.json");
    let res = mvm(&["asian", "--config", &asian, "--out", out.to_str().unwrap()], &[]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let doc = read_json(&out);
    assert!((doc["value"].as_f64().unwrap() - doc["jensen_bound"].as_f64().unwrap()).abs() <= 0.05);
}
