use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cdt_core::cli::{LodoRow, RunConfig};
use cdt_core::data;
use cdt_core::eval::EvalReport;
use cdt_core::model::ModelParams;
use cdt_core::trainer::{traces_from_jsonl, ClassIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn cdt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdt")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = cdt(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small dataset plus a config file describing it.
struct Fixture {
    dir: TempDir,
    config: PathBuf,
    data: PathBuf,
}

impl Fixture {
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("run.json");
        std::fs::write(
            &config,
            format!(
                r#"{{"seed": 3, "synth": {{"identities_per_domain": 8, "samples_per_identity": 4, "input_dim": 8}},
                    "model": {{"hidden_dim": 16, "map_d": 4, "final_dim": 8, "embed_dim": 8}}{extra}}}"#
            ),
        )
        .unwrap();
        let data = dir.path().join("data.txt");
        ok(&["synth", "--config", s(&config), "--out", s(&data)]);
        Fixture { dir, config, data }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, name: &str, extra: &[&str]) -> PathBuf {
        let out = self.path(name);
        let mut args = vec!["train", "--config", s(&self.config), "--data", s(&self.data), "--out", s(&out)];
        args.extend_from_slice(extra);
        ok(&args);
        out
    }
}

#[test]
fn synth_defaults_to_three_domains() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.txt");
    let stdout = ok(&["synth", "--out", s(&path)]);
    assert!(stdout.contains("3 domains"), "{stdout}");
    let (domains, dim) = data::load(&path).unwrap();
    assert_eq!(domains.len(), 3);
    assert_eq!(dim, 16);
}

#[test]
fn synth_is_byte_identical_for_a_repeated_seed() {
    let dir = tempfile::tempdir().unwrap();
    for ext in ["txt", "bin"] {
        let (a, b) = (dir.path().join(format!("a.{ext}")), dir.path().join(format!("b.{ext}")));
        ok(&["synth", "--seed", "11", "--out", s(&a)]);
        ok(&["synth", "--seed", "11", "--out", s(&b)]);
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
    let c = dir.path().join("c.txt");
    ok(&["synth", "--seed", "12", "--out", s(&c)]);
    assert_ne!(std::fs::read(dir.path().join("a.txt")).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn sampler_shortfall_exits_with_code_two() {
    let f = Fixture::new(r#", "train": {"batch": 9}"#);
    let out = cdt(&["train", "--config", s(&f.config), "--data", s(&f.data), "--out", s(&f.path("t"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("8 identities") && err.contains("short of batch size 9"), "{err}");
}

#[test]
fn zero_steps_writes_the_initialization() {
    let f = Fixture::new("");
    let out = f.train("t", &["--steps", "0"]);
    let params = ModelParams::load(&out.join("checkpoint.json")).unwrap();
    let config = RunConfig::load(&out.join("config.json")).unwrap();
    let (domains, dim) = data::load(&f.data).unwrap();
    let model = config.model.build(dim, ClassIndex::from_domains(&domains).len()).unwrap();
    let init = ModelParams::init(&model, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(params, init);
    assert_eq!(std::fs::read_to_string(out.join("trace.jsonl")).unwrap(), "");
}

#[test]
fn lambda_one_ignores_the_cross_domain_switch() {
    let f = Fixture::new("");
    let a = f.train("a", &["--steps", "4", "--lambda", "1.0"]);
    let b = f.train("b", &["--steps", "4", "--lambda", "1.0", "--no-cdt"]);
    let read = |d: &Path, n: &str| std::fs::read(d.join(n)).unwrap();
    assert_eq!(read(&a, "trace.jsonl"), read(&b, "trace.jsonl"));
    assert_eq!(read(&a, "checkpoint.json"), read(&b, "checkpoint.json"));
}

#[test]
fn ablations_drop_their_terms_from_the_trace() {
    let f = Fixture::new("");
    let cases: [(&str, &[&str]); 4] = [
        ("--no-cls", &["s_cls", "t_cls"]),
        ("--no-trp", &["s_trp", "t_trp"]),
        ("--no-cdt", &["t_cdt"]),
        ("--second-order", &[]),
    ];
    for (flag, gone) in cases {
        let out = f.train(&flag[2..], &["--steps", "2", flag]);
        let text = std::fs::read_to_string(out.join("trace.jsonl")).unwrap();
        let traces = traces_from_jsonl(&text).unwrap();
        assert_eq!(traces.len(), 2 * 3 * 2);
        for key in ["s_cls", "s_trp", "t_cls", "t_trp", "t_cdt"] {
            assert_eq!(text.contains(key), !gone.contains(&key), "{flag}: {key}");
        }
    }
}

#[test]
fn config_echo_reproduces_the_run() {
    let f = Fixture::new("");
    let a = f.train("a", &["--steps", "3", "--alpha", "0.02", "--tau", "0.5", "--lmcl-form", "cosface"]);
    let echo = RunConfig::load(&a.join("config.json")).unwrap();
    assert_eq!(echo.train.alpha, 0.02);
    assert_eq!(echo.train.loss.tau, 0.5);
    let b = f.path("b");
    ok(&["train", "--config", s(&a.join("config.json")), "--out", s(&b)]);
    for name in ["checkpoint.json", "trace.jsonl", "config.json"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn config_errors_exit_with_code_two() {
    let f = Fixture::new("");
    let bad = f.path("bad.json");
    std::fs::write(&bad, r#"{"train": {"lamda": 0.5}}"#).unwrap();
    assert_eq!(cdt(&["train", "--config", s(&bad), "--data", s(&f.data), "--out", s(&f.path("x"))]).status.code(), Some(2));
    assert_eq!(cdt(&["train", "--data", s(&f.data), "--lambda", "2", "--out", s(&f.path("x"))]).status.code(), Some(2));
    assert_eq!(cdt(&["train", "--out", s(&f.path("x"))]).status.code(), Some(2));
    assert_eq!(cdt(&["train", "--bogus"]).status.code(), Some(2));
}

#[test]
fn divergence_exits_with_code_three_naming_the_step() {
    let f = Fixture::new(r#", "train": {"grad_clip": 0.0}"#);
    let out = cdt(&[
        "train", "--config", s(&f.config), "--data", s(&f.data), "--beta", "1e250", "--steps", "5", "--out", s(&f.path("t")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("at step"));
}

/// Parses the `FAR  TAR` rows of a printed report table.
fn printed_tars(table: &str) -> Vec<(String, String)> {
    table
        .lines()
        .skip_while(|l| !l.trim_start().starts_with("FAR"))
        .skip(1)
        .take_while(|l| !l.starts_with("rank-1"))
        .map(|l| {
            let mut it = l.split_whitespace();
            (it.next().unwrap().to_string(), it.next().unwrap().to_string())
        })
        .collect()
}

#[test]
fn eval_writes_report_matching_the_printed_table() {
    let f = Fixture::new("");
    let t = f.train("t", &["--steps", "3", "--held-out", "2"]);
    let report = f.path("r.json");
    let roc = f.path("r.csv");
    let stdout = ok(&[
        "eval", "--config", s(&f.config), "--data", s(&f.data), "--checkpoint", s(&t.join("checkpoint.json")),
        "--held-out", "2", "--far-levels", "0.001,0.01,0.1", "--out", s(&report), "--roc", s(&roc),
    ]);
    let r = EvalReport::load(&report).unwrap();
    assert_eq!(r.held_out_domain, 2);
    assert_eq!(r.tar_at_far.len(), 3);
    let rows = printed_tars(&stdout);
    assert_eq!(rows.len(), 3, "{stdout}");
    for (row, t) in rows.iter().zip(&r.tar_at_far) {
        assert_eq!(row.0, t.far.to_string());
        assert_eq!(row.1, format!("{:.4}", t.tar));
    }
    assert!(stdout.contains(&format!("rank-1 {:.4}", r.rank1)));
    let csv = std::fs::read_to_string(&roc).unwrap();
    assert!(csv.starts_with("threshold,far,tar\n"));
    assert!(csv.lines().count() > 2);
}

#[test]
fn untrained_model_on_identityless_data_is_at_chance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(
        &cfg,
        r#"{"synth": {"identities_per_domain": 20, "samples_per_identity": 10, "prototype_scale": 0.0}}"#,
    )
    .unwrap();
    let data = dir.path().join("d.bin");
    ok(&["synth", "--config", s(&cfg), "--out", s(&data)]);
    let t = dir.path().join("t");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--held-out", "2", "--steps", "0", "--out", s(&t)]);
    let report = dir.path().join("r.json");
    ok(&[
        "eval", "--data", s(&data), "--checkpoint", s(&t.join("checkpoint.json")), "--held-out", "2", "--out", s(&report),
    ]);
    let r = EvalReport::load(&report).unwrap();
    assert!((r.rank1 - 1.0 / 20.0).abs() < 0.06, "rank-1 {}", r.rank1);
}

#[test]
fn eval_rejects_a_dimension_mismatch() {
    let f = Fixture::new("");
    let t = f.train("t", &["--steps", "0"]);
    let other = f.path("wide.txt");
    ok(&["synth", "--out", s(&other)]);
    let out = cdt(&["eval", "--data", s(&other), "--checkpoint", s(&t.join("checkpoint.json")), "--held-out", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("features"));
}

fn report_files(dir: &Path) -> Vec<PathBuf> {
    let mut found = Vec::new();
    for sub in std::fs::read_dir(dir).unwrap() {
        let sub = sub.unwrap().path();
        if sub.is_dir() {
            for f in std::fs::read_dir(&sub).unwrap() {
                let f = f.unwrap().path();
                if f.extension().is_some_and(|e| e == "json") {
                    found.push(f);
                }
            }
        }
    }
    found.sort();
    found
}

#[test]
fn lodo_emits_one_report_per_domain_and_lambda() {
    let f = Fixture::new("");
    let single = f.path("single");
    ok(&["lodo", "--config", s(&f.config), "--data", s(&f.data), "--steps", "2", "--out", s(&single)]);
    assert_eq!(report_files(&single).len(), 3);

    let sweep = f.path("sweep");
    let stdout = ok(&[
        "lodo", "--config", s(&f.config), "--data", s(&f.data), "--steps", "2", "--sweep-lambda", "0,0.5,0.7,1",
        "--out", s(&sweep),
    ]);
    let files = report_files(&sweep);
    assert_eq!(files.len(), 4 * 3);
    let rows: Vec<LodoRow> = serde_json::from_str(&std::fs::read_to_string(sweep.join("summary.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 12);
    for row in &rows {
        assert_eq!(EvalReport::load(&row.report_path).unwrap(), row.report);
    }
    // printed table: one header plus one line per run, values as in the reports
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 13);
    for (line, row) in lines[1..].iter().zip(&rows) {
        let cols: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(cols[0], row.lambda.to_string());
        assert_eq!(cols[1], row.report.held_out_domain.to_string());
        assert_eq!(cols[4], format!("{:.4}", row.report.tar_at_far[2].tar));
        assert_eq!(cols[5], format!("{:.4}", row.report.rank1));
    }
}

#[test]
fn lodo_needs_three_domains() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"synth": {"domains": 2}}"#).unwrap();
    let data = dir.path().join("d.txt");
    ok(&["synth", "--config", s(&cfg), "--out", s(&data)]);
    let out = cdt(&["lodo", "--data", s(&data), "--steps", "1", "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
}
