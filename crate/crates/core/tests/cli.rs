//! End-to-end runs of the binary on small configs: exit codes, output files,
//! schema conformance of report.json and byte-identical reruns.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hydrolimit::config::Config;
use hydrolimit::kinetic_solver::KineticState;
use hydrolimit::report::SCHEMA;

const TRANSPORT: &str = r#"
kernel = "constant_frequency"
frequency = 2.0
quadrature = "gauss_hermite"
nv = 6
"#;

const SPECTRUM: &str = r#"
kernel = "hard_sphere"
nv = 6
v_max = 5.0
"#;

const SIMULATE: &str = r#"
nv = 8
nx = 8
epsilon = 0.2
t_end = 0.05
u_amplitude = 0.5
theta_amplitude = 0.0
diagnostics_every = 1
nu = 1.0
kappa = 1.0
"#;

const NSF: &str = r#"
nx = 16
nu = 0.1
kappa = 0.1
theta_amplitude = 0.0
t_end = 0.1
"#;

const SWEEP: &str = r#"
nv = 8
nx = 8
u_amplitude = 0.5
theta_amplitude = 0.0
epsilons = [0.2, 0.1]
comparison_times = [0.05]
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hydrolimit"))
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    bin()
        .arg(cmd)
        .arg("--config")
        .arg(config)
        .arg("--output")
        .arg(out)
        .args(extra)
        .output()
        .unwrap()
}

fn validate(report: &Path) -> serde_json::Value {
    let schema: serde_json::Value = serde_json::from_str(SCHEMA).unwrap();
    let v = jsonschema::validator_for(&schema).unwrap();
    let instance: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    let errors: Vec<String> = v.iter_errors(&instance).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{}: {errors:?}", report.display());
    instance
}

#[test]
fn every_command_writes_schema_valid_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let jobs = [
        ("transport-coeffs", TRANSPORT, "transport_coeffs.csv"),
        ("spectrum", SPECTRUM, "spectrum.csv"),
        ("simulate", SIMULATE, "timeseries.csv"),
        ("nsf", NSF, "energy.csv"),
        ("sweep", SWEEP, "sweep.csv"),
    ];
    for (cmd, body, csv) in jobs {
        let cfg = write(d, &format!("{cmd}.toml"), body);
        let out = d.join(cmd);
        let o = run(cmd, &cfg, &out, &[]);
        let code = o.status.code().unwrap();
        assert!(code == 0 || code == 1, "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        let report = validate(&out.join("report.json"));
        assert_eq!(report["command"], cmd);
        // exit status follows the recorded checks
        assert_eq!(report["pass"].as_bool().unwrap(), code == 0, "{cmd}");
        let text = std::fs::read_to_string(out.join(csv)).unwrap();
        assert!(text.ends_with('\n') && !text.contains('\r'), "{cmd}: line endings");
        let width = text.lines().next().unwrap().split(',').count();
        assert!(text.lines().all(|l| l.split(',').count() == width), "{cmd}: ragged csv");
    }

    // diagnose on the snapshot simulate left behind
    let cfg = write(
        d,
        "diagnose.toml",
        &format!(
            "{SIMULATE}snapshot = {:?}\n",
            d.join("simulate/state_final.hlsnap").display().to_string()
        ),
    );
    let o = run("diagnose", &cfg, &d.join("diagnose"), &[]);
    assert!(o.status.code() == Some(0) || o.status.code() == Some(1));
    validate(&d.join("diagnose/report.json"));
    let rows = std::fs::read_to_string(d.join("diagnose/diagnostics.csv")).unwrap();
    assert_eq!(rows.lines().count(), 2);
    assert!(rows.starts_with("t,H,E_int,"));
}

#[test]
fn transport_report_values() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", TRANSPORT);
    let o = run("transport-coeffs", &cfg, tmp.path(), &[]);
    assert!(o.status.success());
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.lines().any(|l| l.starts_with("PASS nu_equals_inverse_rate")));
    let csv = std::fs::read_to_string(tmp.path().join("transport_coeffs.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "kind,beta,n,v_max,nu,kappa,nu_dual,kappa_dual,gap,a_minus,a_plus"
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "constant_frequency");
    let nu: f64 = row[4].parse().unwrap();
    assert!((nu - 0.5).abs() < 1e-10);
    // 17 significant digits in scientific notation
    assert_eq!(row[4].split('e').next().unwrap().replace(['-', '.'], "").len(), 17);
}

#[test]
fn failing_check_exits_one() {
    // coarse BGK steps in a 0-D relaxation miss the entropy balance by far more than 1e-3·H(0)
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "c.toml",
        r#"
nv = 8
nx = 1
nz = 1
epsilon = 0.5
dt = 0.2
t_end = 1.0
initial = "bimodal"
track_entropy = true
relaxation = "exact"
flux_split = false
defect_window = -1.0
nu = 1.0
kappa = 1.0
"#,
    );
    let o = run("simulate", &cfg, tmp.path(), &[]);
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(o.status.code(), Some(1), "{stdout}");
    assert!(stdout.lines().any(|l| l.starts_with("FAIL entropy_defect")));
}

#[test]
fn bad_config_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", "nv = 8\nnot_a_key = 3\n");
    let o = run("nsf", &cfg, tmp.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not_a_key"));

    let cfg = write(tmp.path(), "d.toml", "epsilons = [0.1, 0.2]\n");
    assert_eq!(run("sweep", &cfg, tmp.path(), &[]).status.code(), Some(2));

    // diagnose without a snapshot
    let cfg = write(tmp.path(), "e.toml", "nv = 8\n");
    assert_eq!(run("diagnose", &cfg, tmp.path(), &[]).status.code(), Some(2));

    let o = bin().arg("simulate").arg("--config").arg(tmp.path().join("missing.toml")).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = write(d, "s.toml", SIMULATE);
    let a = run("simulate", &cfg, &d.join("a"), &[]);
    let b = run("simulate", &cfg, &d.join("b"), &["--threads", "1"]);
    assert!(a.status.success() && b.status.success());
    for f in ["timeseries.csv", "state_final.hlsnap", "report.json"] {
        let x = std::fs::read(d.join("a").join(f)).unwrap();
        let y = std::fs::read(d.join("b").join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
}

#[test]
fn snapshot_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "s.toml", SIMULATE);
    assert!(run("simulate", &cfg, tmp.path(), &[]).status.success());
    let p = tmp.path().join("state_final.hlsnap");
    let s = KineticState::read_snapshot(&p).unwrap();
    assert_eq!(s.domain.n, [8, 8, 1]);
    assert_eq!(s.grid.len(), 512);
    assert!((s.time - 0.05).abs() < 1e-12);
    let q = tmp.path().join("again.hlsnap");
    s.write_snapshot(&q).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for e in std::fs::read_dir(&dir).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "toml") {
            let c = Config::load(&p).unwrap();
            let back = Config::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
            assert_eq!(c, back, "{}", p.display());
            n += 1;
        }
    }
    assert!(n >= 8);
}
