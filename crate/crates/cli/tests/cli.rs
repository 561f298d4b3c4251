use std::path::Path;
use std::process::{Command, Output};

use vagnmt::checkpoint::Checkpoint;
use vagnmt::corpus::{read_lines, Features, SplitPaths};
use vagnmt::model::translate;
use vagnmt::train::read_history;

fn vagnmt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vagnmt"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = vagnmt(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails_with(args: &[&str], code: i32) -> String {
    let out = vagnmt(args);
    assert_eq!(
        out.status.code(),
        Some(code),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(
        err.trim_end().lines().count(),
        1,
        "diagnostic should be one line: {err:?}"
    );
    err
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

const TINY_MODEL: &str = r#""model": {"embed_dim": 8, "hidden_dim": 8, "shared_dim": 8, "attention_dim": 8,
    "decoder_attention_dim": 8, "output_dim": 8, "feature_dim": 16}"#;

/// Small copy corpus plus a matching config next to it.
fn setup(dir: &Path, extra: &str) -> std::path::PathBuf {
    let data = dir.join("data");
    ok(&[
        "synth",
        "--task",
        "copy",
        "--n",
        "16",
        "--valid-n",
        "6",
        "--test-n",
        "6",
        "--feature-dim",
        "16",
        "--seed",
        "3",
        "--out",
        p(&data),
    ]);
    let cfg = dir.join("config.json");
    write(
        &cfg,
        &format!(
            r#"{{ {TINY_MODEL}, "corpus_dir": "data", "batch_size": 4, "max_epochs": 3, "beam_size": 3, "seed": 4 {extra} }}"#
        ),
    );
    cfg
}

#[test]
fn eval_bleu_of_identical_files_is_one() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("r.txt");
    write(
        &f,
        "a small cat sits on the mat .\nthe dog runs in the park today\n",
    );
    let json: serde_json::Value =
        serde_json::from_str(&ok(&["eval-bleu", "--hyp", p(&f), "--ref", p(&f)])).unwrap();
    assert_eq!(json["bleu"], 1.0);
    assert_eq!(json["bp"], 1.0);
}

#[test]
fn eval_bleu_smoothing_flag() {
    let dir = tempfile::tempdir().unwrap();
    let (h, r) = (dir.path().join("h.txt"), dir.path().join("r.txt"));
    write(&h, "the the the\n");
    write(&r, "the cat\n");
    let smooth: serde_json::Value =
        serde_json::from_str(&ok(&["eval-bleu", "--hyp", p(&h), "--ref", p(&r)])).unwrap();
    let raw: serde_json::Value = serde_json::from_str(&ok(&[
        "eval-bleu",
        "--hyp",
        p(&h),
        "--ref",
        p(&r),
        "--no-smoothing",
    ]))
    .unwrap();
    assert_eq!(raw["bleu"], 0.0);
    assert!(smooth["bleu"].as_f64().unwrap() > 0.0);
}

#[test]
fn usage_errors_exit_one() {
    fails_with(&["eval-bleu", "--bogus"], 1);
    fails_with(&["no-such-command"], 1);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    write(&cfg, r#"{"alpha": 2.0}"#);
    fails_with(&["train", "--config", p(&cfg), "--out", p(dir.path())], 1);
    write(&cfg, r#"{"not_a_field": 1}"#);
    fails_with(&["train", "--config", p(&cfg), "--out", p(dir.path())], 1);
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.txt");
    let err = fails_with(
        &["eval-bleu", "--hyp", p(&missing), "--ref", p(&missing)],
        2,
    );
    assert!(err.contains("missing.txt"));
    let (h, r) = (dir.path().join("h.txt"), dir.path().join("r.txt"));
    write(&h, "a\nb\n");
    write(&r, "a\n");
    fails_with(&["eval-bleu", "--hyp", p(&h), "--ref", p(&r)], 2);
    let bad = dir.path().join("bad.vagf");
    write(&bad, "not a feature file");
    let ck = dir.path().join("x.ckpt");
    write(&ck, "garbage");
    fails_with(
        &[
            "translate",
            "--checkpoint",
            p(&ck),
            "--input",
            p(&h),
            "--features",
            p(&bad),
        ],
        2,
    );
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&[
            "synth",
            "--task",
            "ambiguous",
            "--n",
            "20",
            "--seed",
            "9",
            "--feature-dim",
            "8",
            "--out",
            p(out),
        ]);
    }
    for name in [
        "train.src.txt",
        "train.tgt.txt",
        "train.feat.vagf",
        "test.tgt.txt",
        "valid.feat.vagf",
    ] {
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    let train = SplitPaths::new(&a, "train").load(true).unwrap();
    assert_eq!(train.len(), 20);
    assert_eq!(train.features.unwrap().dim(), 8);
}

#[test]
fn bpe_and_vocabulary_files() {
    let dir = tempfile::tempdir().unwrap();
    let text = dir.path().join("text.txt");
    write(&text, "lower lowest newer newest\nwider widest lower\n");
    let bpe = dir.path().join("bpe.txt");
    let vocab = dir.path().join("vocab.txt");
    ok(&[
        "learn-bpe",
        "--input",
        p(&text),
        "--merges",
        "20",
        "--output",
        p(&bpe),
    ]);
    ok(&[
        "build-vocab",
        "--input",
        p(&text),
        "--bpe",
        p(&bpe),
        "--output",
        p(&vocab),
    ]);
    let entries = read_lines(&vocab).unwrap();
    assert_eq!(&entries[..4], ["<pad>", "<s>", "</s>", "<unk>"]);
    assert!(entries.len() > 4);
}

#[test]
fn train_then_translate_reproduces_validation_bleu() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    let run = dir.path().join("run");
    ok(&["train", "--config", p(&cfg), "--out", p(&run)]);
    let history = read_history(&run.join("history.csv")).unwrap();
    assert_eq!(history.len(), 3);
    let best = history
        .iter()
        .map(|r| r.val_bleu)
        .fold(f64::NEG_INFINITY, f64::max);

    let data = dir.path().join("data");
    let hyp = dir.path().join("valid.hyp");
    let ck = run.join("model.ckpt");
    ok(&[
        "translate",
        "--checkpoint",
        p(&ck),
        "--input",
        p(&data.join("valid.src.txt")),
        "--features",
        p(&data.join("valid.feat.vagf")),
        "--beam",
        "3",
        "--output",
        p(&hyp),
    ]);
    let json: serde_json::Value = serde_json::from_str(&ok(&[
        "eval-bleu",
        "--hyp",
        p(&hyp),
        "--ref",
        p(&data.join("valid.tgt.txt")),
    ]))
    .unwrap();
    assert_eq!(json["bleu"].as_f64().unwrap(), best);

    // Greedy decoding through the command line equals the library call.
    let greedy_out = ok(&[
        "translate",
        "--checkpoint",
        p(&ck),
        "--input",
        p(&data.join("valid.src.txt")),
        "--features",
        p(&data.join("valid.feat.vagf")),
        "--beam",
        "1",
    ]);
    let checkpoint = Checkpoint::load(&ck).unwrap();
    let (model, text) = checkpoint.restore().unwrap();
    let feats = Features::load(&data.join("valid.feat.vagf")).unwrap();
    for (i, (line, printed)) in read_lines(&data.join("valid.src.txt"))
        .unwrap()
        .iter()
        .zip(greedy_out.lines())
        .enumerate()
    {
        let src = text.encode_source(line);
        let hyp = translate(
            &checkpoint.params,
            &model,
            &src,
            Some(feats.row(i)),
            &checkpoint.settings(),
            1,
        )
        .unwrap();
        assert_eq!(text.decode_target(&hyp), printed);
    }

    // The same config trains to the same bytes.
    let again = dir.path().join("again");
    ok(&["train", "--config", p(&cfg), "--out", p(&again)]);
    assert_eq!(
        std::fs::read(&ck).unwrap(),
        std::fs::read(again.join("model.ckpt")).unwrap()
    );

    let report: serde_json::Value = serde_json::from_str(&ok(&[
        "retrieve",
        "--checkpoint",
        p(&ck),
        "--corpus",
        p(&data),
        "--split",
        "valid",
        "--k",
        "1,2,6",
    ]))
    .unwrap();
    let t2i = &report["text_to_image"];
    let (r1, r2, r6) = (
        t2i["1"].as_f64().unwrap(),
        t2i["2"].as_f64().unwrap(),
        t2i["6"].as_f64().unwrap(),
    );
    assert!(r1 <= r2 && r2 <= r6);
    assert_eq!(r6, 1.0);

    // Image features are required for this checkpoint.
    fails_with(
        &[
            "translate",
            "--checkpoint",
            p(&ck),
            "--input",
            p(&data.join("valid.src.txt")),
        ],
        1,
    );
}

#[test]
fn text_only_checkpoint_translates_without_features() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    let run = dir.path().join("run");
    ok(&[
        "train",
        "--config",
        p(&cfg),
        "--out",
        p(&run),
        "--text-only",
        "--max-epochs",
        "1",
    ]);
    let saved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(saved["ablation"]["text_only"], true);
    assert_eq!(saved["max_epochs"], 1);
    let out = ok(&[
        "translate",
        "--checkpoint",
        p(&run.join("model.ckpt")),
        "--input",
        p(&dir.path().join("data").join("test.src.txt")),
    ]);
    assert_eq!(out.lines().count(), 6);
}

#[test]
fn experiment_reports_mean_and_std() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    let out = dir.path().join("exp");
    let table = ok(&[
        "experiment",
        "--config",
        p(&cfg),
        "--seeds",
        "2",
        "--out",
        p(&out),
        "--max-epochs",
        "2",
    ]);
    assert!(table.contains("mean ± std"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("results.json")).unwrap()).unwrap();
    assert_eq!(report["runs"].as_array().unwrap().len(), 2);
    assert_eq!(report["runs"][1]["seed"], 5);
    for key in ["valid_bleu", "test_bleu"] {
        let std = report[key]["std"].as_f64().unwrap();
        assert!(std.is_finite() && std >= 0.0);
    }
    assert!(out.join("seed-4").join("model.ckpt").exists());
    assert!(out.join("seed-5").join("test.hyp.txt").exists());
}
