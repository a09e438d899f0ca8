mod common;

use std::path::Path;
use std::process::{Command, Output};

use memeaudit::mock::MockServer;

fn memeaudit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memeaudit"))
        .args(args)
        .output()
        .unwrap()
}

async fn memeaudit_async(args: Vec<String>) -> Output {
    tokio::task::spawn_blocking(move || {
        Command::new(env!("CARGO_BIN_EXE_memeaudit"))
            .args(&args)
            .output()
            .unwrap()
    })
    .await
    .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_lists_subcommands() {
    let o = memeaudit(&["--help"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for cmd in ["eval", "leaderboard", "audit", "typology", "agreement", "mock-serve"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn invalid_config_fails_before_any_request() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(
        &cfg,
        r#"
prompts = ["vn-vn", "xx-yy"]
[[datasets]]
id = "nope"
manifest = "missing.jsonl"
[[endpoints]]
id = "m"
base_url = "ftp://example"
model_name = "m"
"#,
    )
    .unwrap();
    let o = memeaudit(&["eval", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("4 configuration error(s)"), "{err}");
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let o = memeaudit(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

fn write_annotations(path: &Path, disagree: bool) {
    let mut lines = String::new();
    for item in 0..6 {
        for who in ["a1", "a2", "a3"] {
            let mut code = ["NHM", "WA", "FS"][item % 3];
            if disagree && who == "a3" && item < 3 {
                code = "OTH";
            }
            lines.push_str(&format!(
                "{{\"item_id\": {item}, \"annotator_id\": \"{who}\", \"class_code\": \"{code}\"}}\n"
            ));
        }
    }
    std::fs::write(path, lines).unwrap();
}

#[test]
fn agreement_reports_alpha() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("codes.jsonl");
    let out = tmp.path().join("alpha.json");
    write_annotations(&input, false);
    let o = memeaudit(&[
        "agreement",
        "--input",
        input.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("alpha = 1.000"));
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(json["alpha"], 1.0);
    assert_eq!(json["n_items"], 6);

    write_annotations(&input, true);
    let o = memeaudit(&["agreement", "--input", input.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(!String::from_utf8_lossy(&o.stdout).contains("alpha = 1.000"));
}

#[test]
fn agreement_on_missing_file_fails() {
    let o = memeaudit(&["agreement", "--input", "/nonexistent/codes.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
}

#[tokio::test(flavor = "multi_thread")]
async fn pipeline_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = common::write_dataset(&tmp.path().join("data"), 32);
    let server = MockServer::start(common::scenario_script(), 0).await.unwrap();
    let (cfg, _) = common::write_config(&tmp.path().join("run"), &manifest, &server.base_url(), &["vn-vn"]);
    let cfg = cfg.to_str().unwrap().to_string();
    let out = tmp.path().join("elsewhere");
    let run = |cmd: &str| {
        vec![
            cmd.to_string(),
            "--config".into(),
            cfg.clone(),
            "--out".into(),
            out.to_str().unwrap().into(),
        ]
    };

    let o = memeaudit_async(run("typology")).await;
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("run `memeaudit audit`"), "{}", stderr(&o));

    let mut eval = run("eval");
    eval.extend(["--max-new-requests".into(), "10".into()]);
    let o = memeaudit_async(eval).await;
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("rerun to resume"), "{}", stderr(&o));

    for cmd in ["eval", "audit", "typology"] {
        let o = memeaudit_async(run(cmd)).await;
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    let results = out.join("eval/results.csv");
    let o = memeaudit_async(vec![
        "leaderboard".into(),
        "--eval".into(),
        results.to_str().unwrap().into(),
        "--out".into(),
        out.to_str().unwrap().into(),
    ])
    .await;
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "eval/leaderboard.csv",
        "eval/run.json",
        "audit/summary.csv",
        "audit/outcomes.jsonl",
        "typology/fhm__mock-vlm.json",
    ] {
        assert!(out.join(f).is_file(), "{f}");
    }
}
