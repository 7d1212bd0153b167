use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ans(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ans"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_GENERATOR: &str = r#"{"dim_min": 2, "dim_max": 2, "max_points": 400}"#;

#[test]
fn generate_run_and_resummarize() {
    let dir = tempfile::tempdir().unwrap();
    let probs = dir.path().join("problems");
    let gen_cfg = dir.path().join("gen.json");
    write(&gen_cfg, &format!(r#"{{"generator": {SMALL_GENERATOR}, "index_k": 30}}"#));
    let out = ans(&["generate", "--seed", "3", "--count", "2", "--config", p(&gen_cfg), "--out", p(&probs)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for stem in ["synth-3-0", "synth-3-1"] {
        for ext in ["json", "csv", "idx", "meta.json"] {
            assert!(probs.join(format!("{stem}.{ext}")).exists(), "{stem}.{ext}");
        }
    }
    let header = fs::read_to_string(probs.join("synth-3-0.csv")).unwrap();
    assert!(header.starts_with("label,x1,x2\n"));

    let run_cfg = dir.path().join("run.json");
    write(
        &run_cfg,
        &format!(
            r#"{{
                "problems": [
                    {{"kind": "file", "path": "{0}/synth-3-0.json", "set": "files"}},
                    {{"kind": "file", "path": "{0}/synth-3-1.json", "set": "files"}},
                    {{"kind": "generated", "generator": {SMALL_GENERATOR}, "count": 1, "set": "gen"}}
                ],
                "policies": [{{"kind": "random"}}, {{"kind": "one_step"}}, {{"kind": "ens"}}],
                "repeats": 2,
                "budget": 10,
                "model": {{"k": 20}}
            }}"#,
            p(&probs)
        ),
    );
    let results = dir.path().join("results");
    let out = ans(&["run", "--seed", "1", "--config", p(&run_cfg), "--out", p(&results)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let runs = fs::read_to_string(results.join("runs.csv")).unwrap();
    let mut lines = runs.lines();
    assert_eq!(lines.next().unwrap(), "problem,policy,repeat,t,utility,iter_seconds");
    // 3 problems x 3 policies x 2 repeats x (T + 1) rows.
    assert_eq!(lines.count(), 3 * 3 * 2 * 11);
    assert!(runs.contains("files/synth-3-0,"));
    let summary = fs::read_to_string(results.join("summary.json")).unwrap();

    let again = dir.path().join("again");
    let sum_cfg = dir.path().join("sum.json");
    write(&sum_cfg, r#"{"cumulative": [["ens", "one-step"]]}"#);
    let out = ans(&[
        "summarize",
        "--runs",
        p(&results.join("runs.csv")),
        "--config",
        p(&sum_cfg),
        "--out",
        p(&again),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(again.join("summary.json")).unwrap(), summary);
    let curve = fs::read_to_string(again.join("cumulative_ens_vs_one-step.csv")).unwrap();
    assert_eq!(curve.lines().count(), 12);
}

#[test]
fn per_item_errors_give_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let run_cfg = dir.path().join("run.json");
    write(
        &run_cfg,
        &format!(
            r#"{{
                "problems": [
                    {{"kind": "file", "path": "{0}/missing.json"}},
                    {{"kind": "generated", "generator": {SMALL_GENERATOR}, "count": 1}}
                ],
                "policies": [{{"kind": "one_step"}}, {{"kind": "learned", "model_path": "{0}/none.bin"}}],
                "repeats": 1,
                "budget": 5
            }}"#,
            p(dir.path())
        ),
    );
    let out_dir = dir.path().join("out");
    let out = ans(&["run", "--config", p(&run_cfg), "--out", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    let errors = fs::read_to_string(out_dir.join("errors.json")).unwrap();
    assert!(errors.contains("missing.json") && errors.contains("none.bin"));
    // The healthy items still ran.
    assert!(fs::read_to_string(out_dir.join("runs.csv")).unwrap().contains("one-step"));

    let bad = ans(&["run", "--config", p(&dir.path().join("nope.json")), "--out", p(&out_dir)]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ans(&["gradcheck", "--seed", "2", "--out", p(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert_eq!(report.as_array().unwrap().len(), 20);
}

#[test]
fn train_then_toy_then_bench() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("dagger.json");
    write(
        &cfg,
        &format!(
            r#"{{"iterations": 2, "problems_per_iter": 1, "validation_problems": 1, "budget": 6,
                "generator": {SMALL_GENERATOR}, "model": {{"k": 10}},
                "train": {{"max_epochs": 5}}, "max_candidates_per_record": 16}}"#
        ),
    );
    let model_dir = dir.path().join("model");
    let out = ans(&["train-dagger", "--seed", "4", "--config", p(&cfg), "--out", p(&model_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["model.bin", "dataset.jsonl", "dagger_report.json", "dagger_report.csv"] {
        assert!(model_dir.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(model_dir.join("dataset.jsonl")).unwrap().lines().count(), 12);

    let toy_dir = dir.path().join("toy");
    let model = model_dir.join("model.bin");
    let out = ans(&["toy-demo", "--seed", "0", "--model", p(&model), "--out", p(&toy_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for b in [10, 33, 100] {
        let csv = fs::read_to_string(toy_dir.join(format!("toy_budget_{b}.csv"))).unwrap();
        assert!(csv.starts_with("index,x1,x2,group,prob,one_step_score,ens_score,learned_score\n"));
        assert_eq!(csv.lines().count(), 241);
    }

    let bench_cfg = dir.path().join("bench.json");
    write(
        &bench_cfg,
        &format!(
            r#"{{"sizes": [200, 400], "budget": 5, "generator": {SMALL_GENERATOR},
                "policies": [{{"kind": "one_step"}}, {{"kind": "learned", "model_path": "{}"}}]}}"#,
            p(&model)
        ),
    );
    let bench_dir = dir.path().join("bench");
    let out = ans(&["bench-time", "--config", p(&bench_cfg), "--out", p(&bench_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let timing = fs::read_to_string(bench_dir.join("timing.csv")).unwrap();
    assert_eq!(timing.lines().next().unwrap(), "policy,n,episodes,iterations,median_seconds,mean_seconds");
    assert_eq!(timing.lines().count(), 5);
    assert!(timing.lines().skip(1).all(|l| l.split(',').nth(3) == Some("5")));
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let read = |f: &str| fs::read_to_string(root.join(f)).unwrap();
    let desk: ans_core::dagger::DaggerConfig = serde_json::from_str(&read("dagger_desk.json")).unwrap();
    assert_eq!(desk, ans_core::dagger::DaggerConfig::desk(0));
    let run: ans_core::harness::RunConfig = serde_json::from_str(&read("run_desk.json")).unwrap();
    run.validate().unwrap();
    let _: ans_core::harness::BenchConfig = serde_json::from_str(&read("bench_time.json")).unwrap();
}
