use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(format!("{name}.toml"))
}

fn mintime(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mintime")).args(args).output().expect("spawn mintime")
}

fn run(sub: &str, cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![sub, cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    mintime(&args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn column(csv: &str, name: &str) -> Vec<f64> {
    let mut lines = csv.lines();
    let idx = lines.next().unwrap().split(',').position(|c| c == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().parse().unwrap()).collect()
}

#[test]
fn empty_config_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("empty.toml");
    fs::write(&cfg, "").unwrap();
    let o = run("verify", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("empty"));
}

#[test]
fn malformed_config_names_line_and_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "scenario = \"eikonal-disk\"\n[flow]\nstpe = 1e-3\n").unwrap();
    let o = run("flow", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.contains("line 3") && e.contains("stpe"), "{e}");
    let missing = mintime(&["flow", dir.path().join("nope.toml").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn annulus_caustic_focuses_at_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("conjugate", &config("eikonal-annulus"), dir.path(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("caustic.csv")).unwrap();
    let t_bar = column(&csv, "t_bar");
    assert_eq!(t_bar.len(), 64);
    assert!(t_bar.iter().all(|t| (t - 1.0).abs() <= 1e-3), "{t_bar:?}");
}

#[test]
fn verify_disk_passes_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let oa = run("verify", &config("eikonal-disk"), &a, &[]);
    assert_eq!(oa.status.code(), Some(0), "{}", stderr(&oa));
    let ob = run("verify", &config("eikonal-disk"), &b, &["--threads", "2"]);
    assert_eq!(ob.status.code(), Some(0), "{}", stderr(&ob));
    for name in ["verify_report.toml", "subgradient_margins.csv", "differentiability_margins.csv"] {
        let (x, y) = (fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
        assert_eq!(x, y, "{name} differs");
    }
    let report = fs::read_to_string(a.join("verify_report.toml")).unwrap();
    assert!(report.contains("[summary]\npass = true"), "{report}");
    assert!(report.contains("status = \"granted\""));
    assert!(!report.contains("generated_unix"));
}

#[test]
fn verify_accepts_an_exported_grid() {
    let dir = tempfile::tempdir().unwrap();
    let (g, fresh, loaded) = (dir.path().join("grid"), dir.path().join("fresh"), dir.path().join("loaded"));
    assert!(run("oracle", &config("eikonal-disk"), &g, &[]).status.success());
    let header = fs::read_to_string(g.join("grid_header.toml")).unwrap();
    assert!(header.contains("h = 0.02") && header.contains("increases = 0"), "{header}");
    assert!(run("verify", &config("eikonal-disk"), &fresh, &[]).status.success());
    let o = run("verify", &config("eikonal-disk"), &loaded, &["--grid", g.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for name in ["verify_report.toml", "subgradient_margins.csv", "differentiability_margins.csv"] {
        assert_eq!(fs::read(fresh.join(name)).unwrap(), fs::read(loaded.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn verify_failure_exits_two_and_names_the_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("verify", &config("zermelo-strong"), dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("petrov"), "{}", stderr(&o));
    let report = fs::read_to_string(dir.path().join("verify_report.toml")).unwrap();
    assert!(report.contains("failures = [\"petrov\""), "{report}");
}

#[test]
fn flow_and_levelset_exports() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run("flow", &config("eikonal-disk"), dir.path(), &[]).status.success());
    let flow = fs::read_to_string(dir.path().join("flow.csv")).unwrap();
    assert!(flow.starts_with("t,y0,y1,p0,p1,detYjt,normR,Hdrift\n"));
    let det = column(&flow, "detYjt");
    let t = column(&flow, "t");
    assert!(t.iter().zip(&det).all(|(t, d)| (d - (1.0 + t)).abs() < 1e-9));

    assert!(run("levelset", &config("eikonal-disk"), dir.path(), &["--timestamps"]).status.success());
    let set = fs::read_to_string(dir.path().join("levelset.csv")).unwrap();
    let (x, y) = (column(&set, "y0"), column(&set, "y1"));
    assert_eq!(x.len(), 128);
    assert!(x.iter().zip(&y).all(|(a, b)| (a.hypot(*b) - 1.5).abs() < 1e-9));
}

#[test]
fn field_export_with_timestamps() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("field", &config("eikonal-disk"), dir.path(), &["--timestamps"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = fs::read_to_string(dir.path().join("field_manifest.toml")).unwrap();
    assert!(manifest.starts_with("generated_unix = "));
    assert!(manifest.contains("scenario = \"eikonal-disk\""));
    let nodes = fs::read_to_string(dir.path().join("field_nodes.csv")).unwrap();
    assert!(!nodes.contains("generated"));
    assert!(nodes.lines().count() > 100);
}
