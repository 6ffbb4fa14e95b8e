use std::path::Path;
use std::process::{Command, Output};

use cotrain::banks::BenchmarkDoc;
use cotrain::evalharness::{EvalReport, LatencyReport};

fn cotrain(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cotrain"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

const TINY: &str = r#"
steps = 6
batch_size = 4
metrics_every = 2

[net]
d_model = 8
n_heads = 2
n_layers = 1

[mar]
n_heads = 2
d_latent = 4

[context]
bc = 2
k = 3

[benchmark]
adapter_dim = 8
variants_per_suite = 2
side_view_tasks = 2

[benchmark.pools]
train = 6
context = 4
eval = 5
"#;

#[test]
fn train_writes_metrics_and_one_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = cotrain(&["train", "--mode", "meta_det", "--steps", "10", "--seed", "1", "--out", "run"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let files: Vec<String> = std::fs::read_dir(dir.path().join("run"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(files.iter().filter(|f| f.ends_with(".ckpt")).count(), 1, "{files:?}");
    assert_eq!(files.iter().filter(|f| f.ends_with(".jsonl")).count(), 1, "{files:?}");
    let log = std::fs::read_to_string(dir.path().join("run/metrics.jsonl")).unwrap();
    let recs = cotrain::trainer::parse_metrics_jsonl(&log).unwrap();
    assert_eq!(recs.first().map(|r| r.step), Some(0));
    assert_eq!(recs.last().map(|r| r.step), Some(9));
}

#[test]
fn eval_of_missing_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = cotrain(&["eval", "--ckpt", "absent.ckpt"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("checkpoint not found"), "{}", text(&out.stderr));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["train", "--bogus"][..],
        &["frobnicate"][..],
        &["train", "--mode", "meta"][..],
        &["eval"][..],
        &[][..],
    ] {
        let out = cotrain(args, dir.path());
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert!(!out.stderr.is_empty(), "{args:?}");
    }
    let out = cotrain(&["train", "--bogus"], dir.path());
    assert!(text(&out.stderr).contains("Usage: cotrain train"), "{}", text(&out.stderr));
    let out = cotrain(&["train", "--mode", "meta"], dir.path());
    assert!(text(&out.stderr).contains("meta_det"), "{}", text(&out.stderr));
    assert_eq!(cotrain(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn train_eval_latency_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let out = cotrain(&["train", "--config", "tiny.toml", "--mode", "meta_stoch", "--beta", "0.5", "--out", "r"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));

    let out = cotrain(&["eval", "--ckpt", "r/final.ckpt", "--episodes", "5", "--suite", "goal", "--suite", "long", "--out", "eval.json"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(dir.path().join("eval.json")).unwrap()).unwrap();
    assert_eq!(report.suites.len(), 2);
    assert_eq!(report.suites[0].episodes, 5);
    assert_eq!(report.epsilon, 2.0 / 32.0);

    let out = cotrain(&["eval", "--ckpt", "r/final.ckpt", "--episodes", "6"], dir.path());
    assert_eq!(out.status.code(), Some(2));

    let out = cotrain(&["bench-latency", "--ckpt", "r/final.ckpt", "--tokens", "30"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let rep: LatencyReport = serde_json::from_str(&text(&out.stdout)).unwrap();
    assert!(rep.n_tokens >= 30 && rep.overhead.is_finite());

    let mut bad = std::fs::read(dir.path().join("r/final.ckpt")).unwrap();
    let n = bad.len();
    bad[n / 2] ^= 0xff;
    std::fs::write(dir.path().join("bad.ckpt"), bad).unwrap();
    let out = cotrain(&["eval", "--ckpt", "bad.ckpt"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn grid_resume_recomputes_nothing_and_exports() {
    let dir = tempfile::tempdir().unwrap();
    let base: String = TINY
        .lines()
        .map(|l| match l.strip_prefix('[') {
            Some(rest) => format!("[base.{rest}"),
            None => l.to_string(),
        })
        .collect::<Vec<_>>()
        .join("\n");
    // Top-level keys of the training config move under [base].
    let (top, tables) = base.split_at(base.find("[base.").unwrap());
    let grid = format!(
        "name = \"cli\"\nseeds = [0, 1]\neval_episodes = 3\njobs = 2\n\n\
         [[cells]]\nname = \"sft\"\nmode = \"multitask_sft\"\n\n\
         [[cells]]\nname = \"meta\"\nmode = \"meta_det\"\n\n\
         [base]\n{top}\n{tables}"
    );
    std::fs::write(dir.path().join("grid.toml"), grid).unwrap();

    let first = cotrain(&["grid", "--grid-config", "grid.toml", "--out", "g", "--resume"], dir.path());
    assert_eq!(first.status.code(), Some(0), "{}", text(&first.stderr));
    assert!(text(&first.stdout).contains("runs computed 4 steps run 24"), "{}", text(&first.stdout));
    let second = cotrain(&["grid", "--grid-config", "grid.toml", "--out", "g", "--resume"], dir.path());
    assert_eq!(second.status.code(), Some(0));
    assert!(text(&second.stdout).contains("runs computed 0 steps run 0"), "{}", text(&second.stdout));

    let out = cotrain(&["export", "--grid-dir", "g"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("g/report/cells.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
    assert!(dir.path().join("g/report/summary.json").exists());
    assert!(dir.path().join("g/report/curves.csv").exists());
}

#[test]
fn gen_bench_writes_a_loadable_definition() {
    let dir = tempfile::tempdir().unwrap();
    let out = cotrain(&["gen-bench", "--seed", "3", "--out", "b/bench.toml"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let doc = BenchmarkDoc::from_toml(&std::fs::read_to_string(dir.path().join("b/bench.toml")).unwrap()).unwrap();
    assert_eq!(doc.config.seed, 3);
    assert_eq!(doc.tasks.len(), doc.config.n_tasks());
}
