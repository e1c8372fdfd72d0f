use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cefgl(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cefgl"));
    cmd.args(args).env_remove("CEFGL_SEED");
    if let Some(s) = seed {
        cmd.env("CEFGL_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("exp.cfg");
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

const SMALL: &str = "# tiny run\ndata.synth.n_graphs = 24\npartition.clients = 2\nrun.rounds = 5\nrun.repeats = 1\n";

#[test]
fn run_writes_outputs_and_inspect_reads_them() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("out");
    let o = cefgl(&["run", &cfg, "--out", out.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["rounds.jsonl", "summary.csv", "summary.json", "checkpoint.bin", "config.resolved"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let lines = fs::read_to_string(out.join("rounds.jsonl")).unwrap().lines().count();
    assert_eq!(lines, 5);
    let o = cefgl(&["inspect", out.to_str().unwrap()], None);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("rounds 5"));
}

#[test]
fn repeats_go_to_seed_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("{SMALL}run.repeats = 2\n"));
    let out = tmp.path().join("out");
    let o = cefgl(&["run", &cfg, "--out", out.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("seed-0/rounds.jsonl").exists());
    assert!(out.join("seed-1/rounds.jsonl").exists());
}

#[test]
fn resume_finishes_an_interrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let short = write_config(tmp.path(), &format!("{SMALL}run.rounds = 2\n"));
    let out = tmp.path().join("out");
    let out_s = out.to_str().unwrap();
    assert!(cefgl(&["run", &short, "--out", out_s], None).status.success());
    let long = write_config(tmp.path(), SMALL);
    let o = cefgl(&["run", &long, "--out", out_s, "--resume"], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lines = fs::read_to_string(out.join("rounds.jsonl")).unwrap().lines().count();
    assert_eq!(lines, 5);
}

#[test]
fn seed_environment_variable_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let run = |dir: &str, seed| {
        let out = tmp.path().join(dir);
        assert!(cefgl(&["run", &cfg, "--out", out.to_str().unwrap()], seed).status.success());
        fs::read(out.join("rounds.jsonl")).unwrap()
    };
    let a = run("a", Some("7"));
    let b = run("b", Some("7"));
    let c = run("c", Some("8"));
    assert_eq!(a, b);
    assert_ne!(a, c);
    let resolved = fs::read_to_string(tmp.path().join("a/config.resolved")).unwrap();
    assert!(resolved.contains("seed.data = 7"), "{resolved}");
}

#[test]
fn sweep_writes_one_directory_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("sweep");
    let o = cefgl(
        &["sweep", &cfg, "--axis", "r_bits", "--values", "4,8", "--out", out.to_str().unwrap()],
        None,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("r_bits=4/summary.csv").exists());
    assert!(out.join("r_bits=8/summary.csv").exists());
}

#[test]
fn fixture_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = tmp.path().join("fx");
    assert!(cefgl(&["make-fixture", fx.to_str().unwrap()], None).status.success());
    assert!(fx.join("FIXTURE_A.txt").exists());
    let cfg = write_config(
        tmp.path(),
        &format!(
            "data.source = tu\ndata.tu_paths = {}\npartition.clients = 1\ndata.split = 1, 0, 0\nrun.rounds = 3\n",
            fx.display()
        ),
    );
    let o = cefgl(&["run", &cfg, "--out", tmp.path().join("out").to_str().unwrap()], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad_key = write_config(tmp.path(), "server.q = 1\n");
    assert_eq!(cefgl(&["run", &bad_key], None).status.code(), Some(2));
    let bad_value = write_config(tmp.path(), "server.p = 1.5\n");
    assert_eq!(cefgl(&["run", &bad_value], None).status.code(), Some(2));
    let bad_axis = write_config(tmp.path(), SMALL);
    let o = cefgl(&["sweep", &bad_axis, "--axis", "depth", "--values", "1"], None);
    assert_eq!(o.status.code(), Some(2));

    let missing = tmp.path().join("nope.cfg");
    assert_eq!(cefgl(&["run", missing.to_str().unwrap()], None).status.code(), Some(4));
    let empty = tmp.path().join("empty");
    assert_eq!(cefgl(&["inspect", empty.to_str().unwrap()], None).status.code(), Some(4));
    let no_tu = write_config(tmp.path(), "data.source = tu\ndata.tu_paths = /definitely/not/here\n");
    let code = cefgl(&["run", &no_tu], None).status.code();
    assert!(matches!(code, Some(2 | 4)), "{code:?}");

    let out = tmp.path().join("div");
    let diverge = write_config(
        tmp.path(),
        &format!("{SMALL}client.eta = 1e6\nclient.correction = proxskip\nrun.rounds = 50\nrun.out = {}\n", out.display()),
    );
    let o = cefgl(&["run", &diverge], None);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}
