use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn genie(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_genie"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn scenario(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn run_baseline(out: &Path) -> Output {
    genie(&[
        "run",
        "--scenario",
        &scenario("baseline.json"),
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn run_writes_artifacts_and_verify_accepts_them() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_baseline(dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("PASS chain_valid"));
    for f in ["chain.dump", "trace.log", "report.json"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["passed"], true);

    let chain = dir.path().join("chain.dump");
    let v = genie(&["verify", "--chain", chain.to_str().unwrap()]);
    assert_eq!(v.status.code(), Some(0));
    assert!(stdout(&v).starts_with("ok: "), "{}", stdout(&v));
}

#[test]
fn edited_and_truncated_dumps_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_baseline(dir.path()).status.code(), Some(0));
    let text = std::fs::read_to_string(dir.path().join("chain.dump")).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();

    let line = &mut lines[3];
    let pos = line.rfind(|c: char| c.is_ascii_hexdigit()).unwrap();
    let flipped = if &line[pos..=pos] == "0" { "1" } else { "0" };
    line.replace_range(pos..=pos, flipped);
    let edited = dir.path().join("edited.dump");
    std::fs::write(&edited, lines.join("\n") + "\n").unwrap();
    let v = genie(&["verify", "--chain", edited.to_str().unwrap()]);
    assert_eq!(v.status.code(), Some(1));
    assert!(stdout(&v).starts_with("invalid"), "{}", stdout(&v));

    let truncated = dir.path().join("truncated.dump");
    std::fs::write(&truncated, &text[..text.len() / 2]).unwrap();
    let v = genie(&["verify", "--chain", truncated.to_str().unwrap()]);
    assert_eq!(v.status.code(), Some(1));
    assert!(stdout(&v).starts_with("invalid"), "{}", stdout(&v));
}

#[test]
fn same_seed_gives_identical_dumps_and_override_changes_them() {
    let (a, b, c) = (
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
    );
    run_baseline(a.path());
    run_baseline(b.path());
    let o = genie(&[
        "run",
        "--scenario",
        &scenario("baseline.json"),
        "--seed",
        "5",
        "--out",
        c.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(a.path(), "chain.dump"), read(b.path(), "chain.dump"));
    assert_eq!(read(a.path(), "trace.log"), read(b.path(), "trace.log"));
    assert_ne!(read(a.path(), "chain.dump"), read(c.path(), "chain.dump"));
}

#[test]
fn inspect_prints_verified_objects() {
    let dir = tempfile::tempdir().unwrap();
    run_baseline(dir.path());
    let repo = dir.path().join("repo");
    let entry = std::fs::read_dir(&repo).unwrap().next().unwrap().unwrap();
    let hash = entry.file_name().to_string_lossy().into_owned();
    let o = genie(&["inspect", "--repo", repo.to_str().unwrap(), "--hash", &hash]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("content verified"));

    std::fs::write(entry.path(), b"corrupted").unwrap();
    let o = genie(&["inspect", "--repo", repo.to_str().unwrap(), "--hash", &hash]);
    assert_eq!(o.status.code(), Some(1));

    let o = genie(&["inspect", "--repo", repo.to_str().unwrap(), "--hash", "xyz"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn tampered_scenario_exits_zero_when_only_expected_failures_fail() {
    let dir = tempfile::tempdir().unwrap();
    let o = genie(&[
        "run",
        "--scenario",
        &scenario("tamper_chain.json"),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("chain_valid (expected to fail)"));
    let v = genie(&[
        "verify",
        "--chain",
        dir.path().join("chain.dump").to_str().unwrap(),
    ]);
    assert_eq!(v.status.code(), Some(1));
}

#[test]
fn schema_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"name": "x"}"#).unwrap();
    let o = genie(&[
        "run",
        "--scenario",
        bad.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));
}
