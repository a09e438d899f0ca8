mod common;

use memeaudit::commands::{cmd_audit, cmd_eval, cmd_leaderboard, cmd_typology, CommandError, RunOptions};
use memeaudit::core::audit::Case;
use memeaudit::mock::{MockScript, MockServer};

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn scenario_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = common::write_dataset(&tmp.path().join("data"), 40);
    let server = MockServer::start(common::scenario_script(), 0).await.unwrap();
    let (_, cfg) = common::write_config(&tmp.path().join("run"), &manifest, &server.base_url(), &["vn-vn"]);
    let opts = RunOptions::default();

    let eval = cmd_eval(&cfg, &opts).await.unwrap();
    assert_eq!(eval.rows.len(), 1);
    assert_eq!(eval.fetched, 40);
    let row = &eval.rows[0];
    assert_eq!((row.support.parsed_count, row.support.total_count), (39, 40));

    let lb = cmd_leaderboard(&cfg.out_dir.join("eval/results.csv"), &cfg.out_dir).unwrap();
    assert_eq!(lb.cells.len(), 1);
    assert!(lb.stability.is_empty());

    let audit = cmd_audit(&cfg, &opts).await.unwrap();
    assert_eq!(audit.outcomes.len(), 16);
    assert!(audit.skipped.is_empty());
    let (summary, prompt, skipped) = &audit.summaries[0];
    assert_eq!((prompt.as_str(), *skipped), ("vn-vn", 0));
    assert_eq!(summary.case_counts, [3, 7, 3, 3]);
    assert_eq!(summary.rigid_pos, Some(true));
    assert_eq!(summary.rigid_neg, Some(false));
    for o in &audit.outcomes {
        let want = match &o.outcome.sample_id[..] {
            "s00" | "s01" | "s02" => Case::Case3,
            "s03" | "s04" | "s05" => Case::Case4,
            "s20" | "s21" | "s22" => Case::Case1,
            _ => Case::Case2,
        };
        assert_eq!(o.outcome.case, want, "{}", o.outcome.sample_id);
    }
    let occluded_pngs = std::fs::read_dir(cfg.out_dir.join("audit/occluded/fhm/mock-vlm"))
        .unwrap()
        .count();
    assert_eq!(
        occluded_pngs,
        audit.outcomes.iter().map(|o| o.segment_count).sum::<usize>()
    );

    let typ = cmd_typology(&cfg, &opts).await.unwrap();
    assert_eq!(typ.reports.len(), 1);
    for g in &typ.reports[0].groups {
        assert_eq!(g.clusters.len(), 2);
    }

    let before = server.stats().total();
    assert_eq!(cmd_eval(&cfg, &opts).await.unwrap().fetched, 0);
    assert_eq!(cmd_audit(&cfg, &opts).await.unwrap().fetched, 0);
    assert_eq!(cmd_typology(&cfg, &opts).await.unwrap().fetched, 0);
    assert_eq!(server.stats().total(), before);
}

#[tokio::test]
async fn typology_requires_audit() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = common::write_dataset(&tmp.path().join("data"), 4);
    let (_, cfg) = common::write_config(&tmp.path().join("run"), &manifest, "http://127.0.0.1:9/v1", &["vn-vn"]);
    let err = cmd_typology(&cfg, &RunOptions::default()).await.unwrap_err();
    assert!(matches!(err, CommandError::MissingInput(_)), "{err}");
    assert!(err.to_string().contains("memeaudit audit"), "{err}");
}

#[tokio::test]
async fn audit_requires_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = common::write_dataset(&tmp.path().join("data"), 4);
    let (_, cfg) = common::write_config(&tmp.path().join("run"), &manifest, "http://127.0.0.1:9/v1", &["vn-vn"]);
    let err = cmd_audit(&cfg, &RunOptions::default()).await.unwrap_err();
    assert!(err.to_string().contains("memeaudit eval"), "{err}");
}

#[tokio::test]
async fn perfect_model_yields_an_empty_audit() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = common::write_dataset(&tmp.path().join("data"), 40);
    let script = MockScript::new("not-hateful")
        .rule(memeaudit::mock::MockRule::reply("hateful").for_sample("s0*"))
        .rule(memeaudit::mock::MockRule::reply("hateful").for_sample("s1*"));
    let server = MockServer::start(script, 0).await.unwrap();
    let (_, cfg) = common::write_config(&tmp.path().join("run"), &manifest, &server.base_url(), &["vn-vn"]);
    let eval = cmd_eval(&cfg, &RunOptions::default()).await.unwrap();
    assert_eq!(eval.rows[0].macro_f1, 100.0);
    let audit = cmd_audit(&cfg, &RunOptions::default()).await.unwrap();
    assert!(audit.outcomes.is_empty());
    let summary = &audit.summaries[0].0;
    assert!(summary.is_undefined());
    assert_eq!(server.stats().chat(), 40);
    let text = std::fs::read_to_string(cfg.out_dir.join("audit/summary.txt")).unwrap();
    assert!(!text.is_empty());
}

#[tokio::test]
async fn budget_stops_the_run_and_rerun_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = common::write_dataset(&tmp.path().join("data"), 12);
    let server = MockServer::start(common::scenario_script(), 0).await.unwrap();
    let (_, cfg) = common::write_config(&tmp.path().join("run"), &manifest, &server.base_url(), &["vn-vn"]);
    let err = cmd_eval(
        &cfg,
        &RunOptions {
            max_new_requests: Some(5),
        },
    )
    .await
    .unwrap_err();
    assert!(matches!(err, CommandError::BudgetExhausted(5)), "{err}");
    assert_eq!(server.stats().chat(), 5);
    let done = cmd_eval(&cfg, &RunOptions::default()).await.unwrap();
    assert_eq!(done.fetched, 7);
}
