use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ideotrace(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ideotrace"))
        .args(args)
        .env("IDEOTRACE_OUT", out)
        .output()
        .expect("binary runs")
}

fn micro_pipeline(out: &Path) {
    let synth = ideotrace(out, &["synth", "--set", "synth.preset=micro", "--set", "seed=7"]);
    assert!(synth.status.success(), "{}", String::from_utf8_lossy(&synth.stderr));
    let config = out.join("synth/run.toml");
    let run = ideotrace(out, &["pipeline", "--config", config.to_str().unwrap()]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
}

#[test]
fn micro_pipeline_writes_report_tables() {
    let dir = tempfile::tempdir().unwrap();
    micro_pipeline(dir.path());
    for f in ["profile.csv", "transitions.csv", "populations.csv", "conditional.csv", "report.json"] {
        assert!(dir.path().join("report").join(f).is_file(), "missing {f}");
    }
    for stage in ["synth", "ingest", "sample", "topics", "linkage", "cluster", "trajectories", "report"] {
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join(format!("manifest-{stage}.json"))).unwrap())
                .unwrap();
        assert_eq!(manifest["command"], stage);
        assert!(!manifest["outputs"].as_array().unwrap().is_empty());
    }
    assert!(!dir.path().join(".lock").exists());
    let model = fs::read_to_string(dir.path().join("trajectories/model.hmm")).unwrap();
    assert!(model.starts_with("hmm "));
}

#[test]
fn reruns_hash_identically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    micro_pipeline(a.path());
    micro_pipeline(b.path());
    let hashes = |dir: &Path| {
        let m: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest-report.json")).unwrap()).unwrap();
        m["outputs"].clone()
    };
    assert_eq!(hashes(a.path()), hashes(b.path()));
    for stage in ["cluster", "trajectories"] {
        for entry in fs::read_dir(a.path().join(stage)).unwrap() {
            let name = entry.unwrap().file_name();
            assert_eq!(
                fs::read(a.path().join(stage).join(&name)).unwrap(),
                fs::read(b.path().join(stage).join(&name)).unwrap(),
                "{stage}/{name:?}"
            );
        }
    }
}

#[test]
fn report_before_trajectories_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = ideotrace(dir.path(), &["report"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing artifact: trajectory model (run `trajectories` first)"), "{err}");
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = ideotrace(dir.path(), &["cluster", "--set", "cluster.restart=3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cluster.restart"));
    assert_eq!(ideotrace(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(ideotrace(dir.path(), &["--help"]).status.code(), Some(0));
    // ingest without an archive is a configuration problem
    assert_eq!(ideotrace(dir.path(), &["ingest"]).status.code(), Some(1));
}
