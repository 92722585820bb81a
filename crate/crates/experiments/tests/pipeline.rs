use std::fs;
use std::path::Path;

use experiments::pipeline::{global_group, pairwise_groups};
use experiments::{parse_methods, prepare, run_benchmark, run_global, run_pairwise, ExperimentConfig, Method, RunManifest};
use marketrec::models::ModelKind;

fn tiny(out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        out_dir: out.to_path_buf(),
        synth_users: 40,
        synth_items: 60,
        synth_interactions: 10,
        epochs: 2,
        maml_meta_epochs: 1,
        ..ExperimentConfig::default()
    }
}

#[test]
fn one_source_makes_avg_and_bst_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        methods: parse_methods("GMF++,MA-GMF++").unwrap(),
        targets: vec!["m1".into()],
        sources: vec!["m0".into()],
        ..tiny(dir.path())
    };
    let out = run_pairwise(&cfg).unwrap();
    for m in [Method::Plus(ModelKind::GMF), Method::Plus(ModelKind::MA_GMF)] {
        let a = out.avg.cell(m, "m1").unwrap();
        let b = out.bst.cell(m, "m1").unwrap();
        assert_eq!(a.ndcg, b.ndcg, "{m}");
    }
    assert!(dir.path().join("tables/pairwise-avg.csv").exists());
    assert!(dir.path().join("tables/pairwise-bst.json").exists());
    assert!(RunManifest::path(dir.path(), "pairwise").exists());
    assert!(out.manifest.failed.is_empty());
}

#[test]
fn resumed_runs_reuse_finished_cells() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        methods: parse_methods("GMF++").unwrap(),
        targets: vec!["m1".into()],
        sources: vec!["m2".into()],
        resume: true,
        ..tiny(dir.path())
    };
    let first = run_pairwise(&cfg).unwrap();
    let cell = dir.path().join(&first.results[0].dir).join("cell.json");
    let before = fs::read_to_string(&cell).unwrap();
    let second = run_pairwise(&cfg).unwrap();
    assert_eq!(fs::read_to_string(&cell).unwrap(), before);
    assert_eq!(first.results[0].test, second.results[0].test);

    // A changed training setting invalidates the cell.
    let changed = ExperimentConfig { epochs: 1, ..cfg };
    run_pairwise(&changed).unwrap();
    assert_ne!(fs::read_to_string(&cell).unwrap(), before);
}

#[test]
fn failed_cells_fail_the_run_and_their_dependents() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        methods: parse_methods("NMF++").unwrap(),
        targets: vec!["m1".into()],
        sources: vec!["m0".into()],
        lr_mlp: -1.0,
        ..tiny(dir.path())
    };
    assert!(run_pairwise(&cfg).is_err());
    let manifest: RunManifest =
        serde_json::from_str(&fs::read_to_string(RunManifest::path(dir.path(), "pairwise")).unwrap()).unwrap();
    let failed: Vec<Method> = manifest.failed.iter().map(|f| f.method).collect();
    assert!(failed.contains(&Method::Plus(ModelKind::MLP)));
    assert!(failed.contains(&Method::Plus(ModelKind::NMF)));
    assert!(manifest.completed.iter().any(|c| c.contains("gmf-plus")));
}

#[test]
fn full_plan_runs_in_both_settings() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        targets: vec!["m1".into()],
        sources: vec!["m0".into()],
        threads: 2,
        ..tiny(dir.path())
    };
    let out = run_pairwise(&cfg).unwrap();
    assert_eq!(out.bst.rows.len(), 11);
    assert_eq!(out.avg.rows.len(), 8);
    assert!(out.bst.rows.iter().all(|r| r.cells[0].is_some()));

    let global = run_global(&ExperimentConfig { targets: vec![], ..cfg }).unwrap();
    assert_eq!(global.table.columns, vec!["m1".to_string(), "m2".to_string()]);
    assert!(global.table.rows.iter().all(|r| r.cells.iter().all(Option::is_some)));
    let best: usize = (0..2)
        .map(|c| global.table.rows.iter().filter(|r| r.cells[c].as_ref().unwrap().best).count())
        .sum();
    assert!(best >= 2);
}

#[test]
fn training_sets_follow_the_sampling_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let (data, _) = prepare(&cfg).unwrap();
    let methods = Method::avg_rows();
    for g in pairwise_groups(&cfg, &data, &methods).unwrap() {
        let t = data.split_by_code(&g.target).unwrap().train.len();
        let s = data.split_by_code(g.source.as_deref().unwrap()).unwrap().train.len();
        assert_eq!(g.train.len(), t + s.min(t));
    }
    let g = global_group(&cfg, &data, &methods).unwrap();
    let total: usize = data.splits.iter().map(|s| s.train.len()).sum();
    assert_eq!(g.train.len(), total);
}

#[test]
fn repeated_benchmark_reports_fastest_timings() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        methods: parse_methods("GMF++,MA-GMF++").unwrap(),
        targets: vec!["m1".into()],
        bench_repeats: 2,
        ..tiny(dir.path())
    };
    let out = run_benchmark(&cfg).unwrap();
    assert_eq!(out.rows.len(), 2);
    for r in &out.rows {
        assert_eq!(r.sources, 2);
        assert!(r.seconds > 0.0 && r.cumulative_seconds >= r.seconds, "{r:?}");
    }
    assert!(dir.path().join("tables/timing.csv").exists());
    assert!(run_benchmark(&ExperimentConfig { bench_repeats: 0, ..cfg }).is_err());
}
