//! Golden-file tests for every `xgkit` subcommand on a tiny world.
//!
//! Set `UPDATE_GOLDEN=1` to rewrite the files under `tests/golden/`.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn tiny() -> PathBuf {
    data("tiny.json")
}

fn xgkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xgkit"))
        .args(args)
        .env_remove("XGKIT_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = xgkit(args);
    assert!(
        out.status.success(),
        "xgkit {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn golden(name: &str, actual: &str) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing golden file {name}"));
    assert_eq!(actual, expected, "output differs from golden file {name}");
}

fn golden_file(name: &str, path: &Path) {
    golden(name, &std::fs::read_to_string(path).unwrap());
}

/// Relative paths of every file under `dir`, sorted.
fn listing(dir: &Path) -> String {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push(p.strip_prefix(root).unwrap().display().to_string());
            }
        }
    }
    let mut v = Vec::new();
    walk(dir, dir, &mut v);
    v.sort();
    v.join("\n") + "\n"
}

/// A world built once through the CLI and shared by every test.
fn world() -> &'static Path {
    static WORLD: OnceLock<TempDir> = OnceLock::new();
    WORLD
        .get_or_init(|| {
            let dir = TempDir::new().unwrap();
            let w = dir.path().join("w");
            for cmd in ["gen-corpus", "gen-summ", "tokenizer-train", "lid-train", "pretrain"] {
                ok(&[cmd, "--config", s(&tiny()), "--world", s(&w)]);
            }
            dir
        })
        .path()
}

fn world_dir() -> PathBuf {
    world().join("w")
}

fn tok() -> PathBuf {
    world_dir().join("tokenizer.model")
}

#[test]
fn world_commands_write_expected_artifacts() {
    let w = world_dir();
    golden("world_listing.txt", &listing(&w));
    golden_file("languages.json", &w.join("languages.json"));
    golden_file("summ.cy0.jsonl", &w.join("summ.cy0.jsonl"));
    golden_file("pretrain_losses.csv", &w.join("pretrain_losses.csv"));
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(w.join("manifest.pretrain.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "pretrain");
    assert_eq!(m["config"]["pretrain_steps"], 4);
    assert!(m["outputs"].as_object().unwrap().len() == 2);
}

#[test]
fn missing_prerequisite_is_actionable() {
    let dir = TempDir::new().unwrap();
    let out = xgkit(&["pretrain", "--config", s(&tiny()), "--world", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("xgkit: config: missing prerequisite"), "{err}");
    assert!(err.contains("xgkit gen-corpus"), "{err}");
}

#[test]
fn rouge_identity_scores_100() {
    let dir = TempDir::new().unwrap();
    let r = dir.path().join("r.txt");
    std::fs::write(&r, "vos hap tarn\\nkel mir\nöl ∂ x\n").unwrap();
    let out = ok(&["rouge", "--refs", s(&r), "--preds", s(&r), "--tokenizer", s(&tok())]);
    golden("rouge_identity.json", &out);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["lsum"], 100.0);
}

#[test]
fn rouge_length_mismatch_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let (r, p) = (dir.path().join("r.txt"), dir.path().join("p.txt"));
    std::fs::write(&r, "a\nb\n").unwrap();
    std::fs::write(&p, "a\n").unwrap();
    let out = xgkit(&["rouge", "--refs", s(&r), "--preds", s(&p), "--tokenizer", s(&tok())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("xgkit: input:"));
}

#[test]
fn correlate_scores_csv() {
    golden("correlate.json", &ok(&["correlate", "--scores", s(&data("scores.csv"))]));
}

#[test]
fn correlate_constant_column_is_undefined() {
    let out = xgkit(&["correlate", "--scores", s(&data("scores_constant.csv"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("xgkit: correlation:"));
}

#[test]
fn trim_lines_and_report() {
    let dir = TempDir::new().unwrap();
    let report = dir.path().join("trim.tsv");
    let out = ok(&["trim", "--input", s(&data("trim.txt")), "--report", s(&report)]);
    golden("trim.txt", &out);
    golden_file("trim.tsv", &report);
}

#[test]
fn lead_first_tokens() {
    let input = world_dir().join("summ.la0.jsonl");
    golden("lead.txt", &ok(&["lead", "--input", s(&input), "--tokenizer", s(&tok()), "--n", "8"]));
}

#[test]
fn build_tasks_jsonl() {
    let input = world_dir().join("corpus.cy0.jsonl");
    let tok = tok();
    let args = [
        "build-tasks", "--task", "span_corruption", "--lang", "cy0", "--in", s(&input), "--tokenizer", s(&tok), "--seed", "3",
    ];
    let out = ok(&args);
    golden("build_tasks.jsonl", &out);
    assert_eq!(out, ok(&args));
}

#[test]
fn lid_eval_accuracy() {
    let w = world_dir();
    let lid = w.join("lid.json");
    let out = ok(&["lid-eval", "--lid", s(&lid), "--input", s(&w.join("corpus.la0.jsonl"))]);
    golden("lid_eval.json", &out);
}

#[test]
fn prompt_tune_and_curves_and_decode_and_eval() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("pt");
    let w = world_dir();
    ok(&["prompt-tune", "--config", s(&tiny()), "--world", s(&w), "--out", s(&out)]);
    golden("prompt_tune_listing.txt", &listing(&out));
    golden_file("prompt_tune_losses.csv", &out.join("losses.csv"));

    let ck = out.join("checkpoints/step000004.ckpt");
    let decoded = ok(&[
        "decode", "--config", s(&tiny()), "--world", s(&w), "--checkpoint", s(&ck), "--input", s(&w.join("summ.cy0.jsonl")),
    ]);
    golden("decode.txt", &decoded);

    let report = ok(&["eval", "--config", s(&tiny()), "--world", s(&w), "--checkpoint", s(&ck), "--language", "cy0"]);
    golden("eval.json", &report);

    let csv = dir.path().join("curves.csv");
    ok(&[
        "curves", "--config", s(&tiny()), "--world", s(&w), "--checkpoints", s(&out.join("checkpoints")), "--out", s(&csv),
    ]);
    golden_file("curves.csv", &csv);
}

#[test]
fn model_tune_writes_backbone_checkpoints() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("mt");
    ok(&["model-tune", "--config", s(&tiny()), "--world", s(&world_dir()), "--out", s(&out), "--steps", "2"]);
    golden("model_tune_listing.txt", &listing(&out));
    golden_file("model_tune_losses.csv", &out.join("losses.csv"));
}

#[test]
fn factorized_then_downstream_then_composed_decode() {
    let dir = TempDir::new().unwrap();
    let w = world_dir();
    let ft = dir.path().join("ft");
    ok(&["factorized-train", "--config", s(&tiny()), "--world", s(&w), "--out", s(&ft)]);
    golden("factorized_losses.csv", &std::fs::read_to_string(ft.join("losses.csv")).unwrap());
    let fck = ft.join("factorized.ckpt");
    let dt = dir.path().join("dt");
    ok(&["downstream-train", "--config", s(&tiny()), "--world", s(&w), "--out", s(&dt), "--factorized", s(&fck)]);
    golden("downstream_listing.txt", &listing(&dt));
    let task = dt.join("checkpoints/step000004.ckpt");
    let decoded = ok(&[
        "decode", "--config", s(&tiny()), "--world", s(&w), "--checkpoint", s(&task), "--factorized", s(&fck), "--half", "cy0",
        "--input", s(&w.join("summ.cy0.jsonl")),
    ]);
    golden("decode_fp.txt", &decoded);

    let out = xgkit(&[
        "decode", "--config", s(&tiny()), "--world", s(&w), "--checkpoint", s(&task), "--factorized", s(&fck), "--input",
        s(&w.join("summ.cy0.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(1), "--factorized without --half is a usage error");
}

#[test]
fn cluster_outputs() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("cl");
    let stdout = ok(&["cluster", "--config", s(&tiny()), "--world", s(&world_dir()), "--out", s(&out)]);
    golden("cluster_listing.txt", &listing(&out));
    golden("cluster.json", &stdout);
    golden_file("cluster_matrix.csv", &out.join("matrix.csv"));
    assert!(std::fs::read_to_string(out.join("heatmap.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn recipe_fp_is_byte_identical_across_runs() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["recipe", "fp", "--config", s(&tiny()), "--world", s(&world_dir()), "--out", s(out)]);
    }
    let ra = std::fs::read(a.join("report.json")).unwrap();
    assert_eq!(ra, std::fs::read(b.join("report.json")).unwrap());
    golden("recipe_fp_listing.txt", &listing(&a));
    golden_file("recipe_fp_report.json", &a.join("report.json"));
}

#[test]
fn unknown_flag_is_usage_error() {
    let out = xgkit(&["rouge", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn help_exits_zero() {
    let out = xgkit(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in [
        "tokenizer-train", "gen-corpus", "gen-summ", "build-tasks", "lid-train", "lid-eval", "rouge", "correlate", "trim", "lead",
        "pretrain", "prompt-tune", "model-tune", "factorized-train", "downstream-train", "decode", "eval", "curves", "cluster",
        "recipe",
    ] {
        assert!(text.contains(cmd), "help lists {cmd}");
    }
}

fn manifest_config(stderr: &[u8]) -> serde_json::Value {
    let text = String::from_utf8_lossy(stderr);
    let line = text.lines().find_map(|l| l.strip_prefix("manifest: ")).expect("manifest line");
    serde_json::from_str::<serde_json::Value>(line).unwrap()["config"].clone()
}

#[test]
fn config_resolution_order() {
    let scores = data("scores.csv");
    let base = xgkit(&["correlate", "--scores", s(&scores), "--config", s(&tiny())]);
    assert_eq!(manifest_config(&base.stderr)["seed"], 0);
    assert_eq!(manifest_config(&base.stderr)["d_model"], 8);

    let set = xgkit(&["correlate", "--scores", s(&scores), "--config", s(&tiny()), "--set", "d_model=12", "--kappa", "5"]);
    let c = manifest_config(&set.stderr);
    assert_eq!(c["d_model"], 12);
    assert_eq!(c["kappa"], 5.0);

    let env = Command::new(env!("CARGO_BIN_EXE_xgkit"))
        .args(["correlate", "--scores", s(&scores)])
        .env("XGKIT_SEED", "41")
        .output()
        .unwrap();
    assert_eq!(manifest_config(&env.stderr)["seed"], 41);

    let flag = Command::new(env!("CARGO_BIN_EXE_xgkit"))
        .args(["correlate", "--scores", s(&scores), "--seed", "7"])
        .env("XGKIT_SEED", "41")
        .output()
        .unwrap();
    assert_eq!(manifest_config(&flag.stderr)["seed"], 7);
}

#[test]
fn unknown_config_key_is_rejected() {
    let out = xgkit(&["correlate", "--scores", s(&data("scores.csv")), "--set", "no_such_key=1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("xgkit: config: unknown config key"));

    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"seed": 1, "typo_key": 2}"#).unwrap();
    let out = xgkit(&["correlate", "--scores", s(&data("scores.csv")), "--config", s(&bad)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn stage_flags_need_a_training_command() {
    let out = xgkit(&["correlate", "--scores", s(&data("scores.csv")), "--steps", "3"]);
    assert_eq!(out.status.code(), Some(1));
}
