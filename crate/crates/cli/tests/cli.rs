use std::path::Path;
use std::process::{Command, Output};

fn reflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reflow"))
        .args(args)
        .env_remove("REFLOW_OUTPUT_ROOT")
        .output()
        .expect("spawn reflow")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("run.conf");
    std::fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

const TINY_DAE: &str = "kind = dae-loop\nseeds = 0..3\nloop.iterations = 5\n";

#[test]
fn validate_echoes_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), TINY_DAE);
    let out_dir = dir.path().join("out");
    let o = reflow(&["validate", &conf, "--set", &format!("output={}", out_dir.display())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("kind = dae-loop"));
    assert!(text.contains("loop.iterations = 5"));
}

#[test]
fn bad_configs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), "kind = dae-loop\nseeds = 0..0\n");
    let o = reflow(&["validate", &conf]);
    assert!(!o.status.success());
    let conf = write_config(dir.path(), "kind = dae-loop\nnot.a.key = 1\n");
    assert!(!reflow(&["validate", &conf]).status.success());
    assert!(!reflow(&["validate", "/nonexistent/run.conf"]).status.success());
}

#[test]
fn tiny_run_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), TINY_DAE);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let oa = reflow(&["run", &conf, "--output", a.to_str().unwrap()]);
    let ob = reflow(&["run", &conf, "--output", b.to_str().unwrap(), "--workers", "2"]);
    assert!(oa.status.success(), "{}", String::from_utf8_lossy(&oa.stderr));
    assert!(ob.status.success());
    assert!(stdout(&oa).contains("seed 2: ok"));
    for f in ["aggregate.csv", "seed_0/metrics.csv", "seed_2/metrics.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let fig = reflow(&["figure-data", a.to_str().unwrap(), "fig4"]);
    assert!(fig.status.success());
    assert!(a.join("figures/fig4/w2.csv").exists());
}

#[test]
fn output_root_env_sets_the_run_dir() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), "kind = metrics\nname = m\nseeds = 0\ndata.n = 64\n");
    let o = Command::new(env!("CARGO_BIN_EXE_reflow"))
        .args(["run", &conf])
        .env("REFLOW_OUTPUT_ROOT", dir.path().join("root"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("root/m/manifest.json").exists());
}

#[test]
fn gradcheck_passes() {
    let o = reflow(&["gradcheck", "--batches", "3"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.contains("mlp_tanh") && text.contains("PASS"));
}

#[test]
fn figure_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    assert!(!reflow(&["figure-data", missing.to_str().unwrap(), "fig4"]).status.success());
    assert!(!reflow(&["figure-data", dir.path().to_str().unwrap(), "fig99"]).status.success());
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let out = tempfile::tempdir().unwrap();
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "conf") {
            let o = reflow(&[
                "validate",
                p.to_str().unwrap(),
                "--set",
                &format!("output={}", out.path().join("x").display()),
            ]);
            assert!(o.status.success(), "{}: {}", p.display(), String::from_utf8_lossy(&o.stderr));
            seen += 1;
        }
    }
    assert!(seen >= 7);
}
