use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lab(args: &[&str], threads: Option<usize>) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_rwre-lab"));
    c.args(args);
    if let Some(t) = threads {
        c.env("RWRE_THREADS", t.to_string());
    }
    c.output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

const MOMENTS: &str = r#"kind = "moments"
seed = 5

[law]
family = "signed-axis-kick"
d = 3
a = 0.01

[params]
rho = 0.5
"#;

#[test]
fn moments_report_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "m.toml", MOMENTS);
    let out = dir.path().join("out");
    let o = lab(
        &["moments", "--config", &cfg, "--out", out.to_str().unwrap()],
        None,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("moments.json")).unwrap()).unwrap();
    let m = &report["result"]["moments"];
    assert!((m["eps"].as_f64().unwrap() - 0.12).abs() < 1e-12);
    assert!((m["sigma2"].as_f64().unwrap() - 2e-4).abs() < 1e-15);
    assert_eq!(report["seed"], 5);
    let hash = report["config_sha256"].as_str().unwrap();
    assert_eq!(hash.len(), 64);

    let csv = fs::read_to_string(out.join("moments-directions.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        format!("# kind=moments config_sha256={hash} seed=5")
    );

    let s = lab(
        &["summary", out.join("moments.json").to_str().unwrap()],
        None,
    );
    assert!(s.status.success());
    let table = String::from_utf8(s.stdout).unwrap();
    assert!(table.contains("eps=0.12, sigma2=2e-4"), "{table}");
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "m.toml", MOMENTS);
    let out = dir.path().join("out");
    let o = lab(
        &[
            "moments",
            "--config",
            &cfg,
            "--seed",
            "99",
            "--out",
            out.to_str().unwrap(),
        ],
        None,
    );
    assert!(o.status.success());
    let text = fs::read_to_string(out.join("moments.json")).unwrap();
    assert!(text.contains("\"seed\": 99"));
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "v.toml",
        r#"seed = 3
[law]
family = "signed-axis-kick"
d = 2
a = 0.05
[region]
kind = "box"
lo = [-1, -1]
hi = [1, 1]
[params]
n_env = 500
force_monte_carlo = true
route = "both"
"#,
    );
    let mut outs = Vec::new();
    for (i, t) in [1usize, 3].into_iter().enumerate() {
        let out = dir.path().join(format!("o{i}"));
        let o = lab(
            &[
                "kalikow-drift",
                "--config",
                &cfg,
                "--out",
                out.to_str().unwrap(),
            ],
            Some(t),
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outs.push(out);
    }
    for name in [
        "kalikow-drift.json",
        "kalikow-drift-definition.csv",
        "kalikow-drift-formula.csv",
    ] {
        assert_eq!(
            fs::read(outs[0].join(name)).unwrap(),
            fs::read(outs[1].join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn dimension_one_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "d1.toml",
        "[law]\nfamily = \"signed-axis-kick\"\nd = 1\na = 0.01\n",
    );
    let o = lab(&["moments", "--config", &cfg], None);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("d >= 2"), "{err}");
}

#[test]
fn parse_errors_name_line_and_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "bad.toml",
        "seed = 1\n\n[law]\nfamily = \"point-mass\"\nd = 2\nlamda = 0.1\n",
    );
    let o = lab(&["velocity", "--config", &cfg], None);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 3") && err.contains("lamda"), "{err}");
}

#[test]
fn module_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "p.toml",
        "[law]\nfamily = \"point-mass\"\nd = 2\n[params]\nm_values = [1]\n",
    );
    let o = lab(
        &[
            "condition-p",
            "--config",
            &cfg,
            "--out",
            dir.path().to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn empty_summary_is_a_usage_error() {
    let o = lab(&["summary"], None);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_report_is_an_error() {
    let o = lab(&["summary", "/nonexistent/report.json"], None);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn shipped_configs_are_valid() {
    use rwre_cli::{ExperimentConfig, ExperimentKind};
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = ExperimentConfig::parse(&fs::read_to_string(&path).unwrap()).unwrap();
        let kind: ExperimentKind = cfg.kind.expect("configs name their kind");
        cfg.check(kind)
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert_eq!(n, 12);
}
