use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use idattn::flow::PreparedTask;
use idattn::io::pnm::{read_pgm, read_ppm};
use idattn::io::{Instructions, RunConfig};
use idattn::masks::{mask_to_image, oracle_mask, Regime, ALLOWED_GRAY};
use idattn::partition::BoxSpec;
use idattn::synth::Manifest;
use tempfile::TempDir;

const SMALL: &str = r#"{
  "model": {"image_h": 24, "image_w": 24, "d_model": 16, "heads": 2, "num_layers": 3,
            "early_count": 1, "late_count": 1, "embed_dim": 8, "time_dim": 8, "utility_len": 4},
  "synth": {"width": 24, "height": 24, "max_boxes": 2},
  "train": {"batch": 2, "steps": 4, "checkpoint_every": 2},
  "lora": {"rank": 2, "alpha": 2},
  "seed": 11
}"#;

fn idattn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_idattn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = idattn(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn error_kind(args: &[&str]) -> String {
    let out = idattn(args);
    assert!(!out.status.success(), "{args:?} succeeded");
    let stderr = String::from_utf8(out.stderr).unwrap();
    let line = stderr.lines().last().expect("an error line");
    let v: serde_json::Value = serde_json::from_str(line).expect("error line is JSON");
    assert!(v["error"]["message"].as_str().is_some_and(|m| !m.is_empty()));
    v["error"]["kind"].as_str().unwrap().to_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Small {
    dir: TempDir,
    config: PathBuf,
    data: PathBuf,
}

fn small_setup(n_train: usize, n_test: usize) -> Small {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    std::fs::write(&config, SMALL).unwrap();
    let data = dir.path().join("data");
    ok(&[
        "gen-data",
        "--out",
        s(&data),
        "--n-train",
        &n_train.to_string(),
        "--n-test",
        &n_test.to_string(),
        "--seed",
        "5",
        "--config",
        s(&config),
    ]);
    Small { dir, config, data }
}

fn loss_rows(path: &Path) -> Vec<(u64, String)> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,loss"));
    lines
        .map(|l| {
            let (a, b) = l.split_once(',').unwrap();
            (a.parse().unwrap(), b.to_owned())
        })
        .collect()
}

#[test]
fn gen_data_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let stdout = ok(&["gen-data", "--out", s(&out)]);
    assert!(stdout.contains("wrote 2000 train and 100 test samples"));
    let m: Manifest = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!((m.train.len(), m.test.len()), (2000, 100));
    assert!(m.train.iter().all(|e| (1..=4).contains(&e.num_boxes)));
    let files = std::fs::read_dir(out.join("train")).unwrap().count();
    assert_eq!(files, 3 * 2000);

    let e = &m.test[7];
    let ins = Instructions::load(&out.join("test").join(format!("{}.json", e.id))).unwrap();
    assert_eq!(ins.boxes.len(), e.num_boxes);
    let r = read_ppm(&out.join("test").join(&ins.image)).unwrap();
    assert_eq!((r.width(), r.height()), (48, 48));
    let t = read_ppm(&out.join("test").join(format!("{}.tgt.ppm", e.id))).unwrap();
    assert_ne!(r, t);
}

#[test]
fn gen_data_max_boxes_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for p in [&a, &b] {
        ok(&["gen-data", "--out", s(p), "--n-train", "20", "--n-test", "5", "--max-boxes", "1", "--seed", "3"]);
    }
    let m: Manifest = serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert!(m.train.iter().chain(&m.test).all(|e| e.num_boxes == 1));
    for name in ["manifest.json", "train/train-00013.ref.ppm", "test/test-00004.json"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap());
    }
}

#[test]
fn train_resume_matches_unbroken_run() {
    let w = small_setup(6, 2);
    let full = w.dir.path().join("full");
    ok(&["train", "--config", s(&w.config), "--data", s(&w.data), "--out", s(&full)]);
    let rows = loss_rows(&full.join("loss.csv"));
    assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), [1, 2, 3, 4]);
    assert!(full.join("step-000002.idfm").is_file());
    assert!(!full.join("step-000004.idfm").exists());

    let resumed = w.dir.path().join("resumed");
    ok(&[
        "train",
        "--config",
        s(&w.config),
        "--data",
        s(&w.data),
        "--out",
        s(&resumed),
        "--resume",
        s(&full.join("step-000002.idfm")),
    ]);
    assert_eq!(loss_rows(&resumed.join("loss.csv")), rows[2..]);
    assert_eq!(
        std::fs::read(full.join("model.idfm")).unwrap(),
        std::fs::read(resumed.join("model.idfm")).unwrap()
    );
}

#[test]
fn lora_first_loss_equals_base_loss() {
    let w = small_setup(4, 1);
    let base = w.dir.path().join("base");
    ok(&["train", "--config", s(&w.config), "--data", s(&w.data), "--out", s(&base), "--steps", "0"]);
    let full = w.dir.path().join("full");
    ok(&["train", "--config", s(&w.config), "--data", s(&w.data), "--out", s(&full), "--steps", "1"]);
    let lora = w.dir.path().join("lora");
    ok(&[
        "train",
        "--config",
        s(&w.config),
        "--data",
        s(&w.data),
        "--out",
        s(&lora),
        "--steps",
        "2",
        "--lora",
        "--base",
        s(&base.join("model.idfm")),
        "--merge",
    ]);
    assert_eq!(loss_rows(&lora.join("loss.csv"))[0], loss_rows(&full.join("loss.csv"))[0]);
    let merged = idattn::io::Checkpoint::load(&lora.join("model.idfm")).unwrap();
    assert!(merged.model.adapters.is_empty() && merged.trainer.is_none());
}

fn write_instructions(dir: &Path, boxes: &[BoxSpec]) -> PathBuf {
    let p = dir.join("ins.json");
    let ins = Instructions {
        image: "test/test-00000.ref.ppm".into(),
        boxes: boxes.to_vec(),
    };
    std::fs::write(&p, ins.to_json()).unwrap();
    p
}

#[test]
fn edit_is_seeded_and_schedules_resolve() {
    let w = small_setup(2, 1);
    let ck = w.dir.path().join("m");
    ok(&["train", "--config", s(&w.config), "--data", s(&w.data), "--out", s(&ck), "--steps", "1"]);
    let ckpt = ck.join("model.idfm");
    let reference = w.data.join("test/test-00000.ref.ppm");
    let test_ins = w.data.join("test/test-00000.json");

    let mut outputs = Vec::new();
    let runs = [("default", "9"), ("default", "9"), ("default", "10"), ("all-dis", "9"), ("dis-har-dis", "9"), ("unmasked", "9")];
    for (i, (schedule, seed)) in runs.iter().enumerate() {
        let out = w.dir.path().join(format!("e{i}.ppm"));
        let msg = ok(&[
            "edit", "--ckpt", s(&ckpt), "--instructions", s(&test_ins), "--out", s(&out), "--steps", "2", "--schedule",
            schedule, "--seed", seed,
        ]);
        assert!(msg.contains("in 2 steps"));
        outputs.push(std::fs::read(&out).unwrap());
    }
    assert!(outputs[0] == outputs[1]);
    assert!(outputs[0] != outputs[2]);

    // An empty instruction list is a valid task.
    let empty = write_instructions(w.dir.path(), &[]);
    let out = w.dir.path().join("empty.ppm");
    let msg = ok(&[
        "edit", "--ckpt", s(&ckpt), "--instructions", s(&empty), "--image", s(&reference), "--out", s(&out), "--steps", "1",
    ]);
    assert!(msg.contains("edited 0 instance(s)"));
    assert_eq!(read_ppm(&out).unwrap().width(), 24);

    assert_eq!(
        error_kind(&["edit", "--ckpt", s(&ckpt), "--instructions", s(&test_ins), "--out", s(&out), "--schedule", "har-bad-dis"]),
        "schedule"
    );
    let oob = write_instructions(w.dir.path(), &[BoxSpec::new(20, 20, 8, 6).with_text("A", "B")]);
    assert_eq!(
        error_kind(&["edit", "--ckpt", s(&ckpt), "--instructions", s(&oob), "--image", s(&reference), "--out", s(&out)]),
        "box_out_of_bounds"
    );
    assert_eq!(
        error_kind(&["edit", "--ckpt", s(&w.dir.path().join("missing.idfm")), "--instructions", s(&test_ins), "--out", s(&out)]),
        "io"
    );
}

#[test]
fn malformed_inputs_report_json_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"image\": \"x.ppm\",\n \"boxes\": [{\"x\": 1}]}").unwrap();
    let out = idattn(&["dump-masks", "--instructions", s(&bad), "--out-prefix", s(&dir.path().join("m"))]);
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("\"kind\":\"format\""));
    assert!(stderr.contains("line 2 column"));

    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"train": {"batch": 0}}"#).unwrap();
    assert_eq!(
        error_kind(&["gen-data", "--out", s(&dir.path().join("d")), "--config", s(&cfg)]),
        "format"
    );
}

#[test]
fn dump_masks_match_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("none");
    let empty = write_instructions(dir.path(), &[]);
    ok(&["dump-masks", "--instructions", s(&empty), "--out-prefix", s(&prefix)]);
    for r in ["dis", "har"] {
        let img = read_pgm(Path::new(&format!("{}.{r}.pgm", prefix.display()))).unwrap();
        assert!(img.data().iter().all(|&v| v == ALLOWED_GRAY));
    }

    let boxes = [
        BoxSpec::new(0, 0, 8, 6).with_text("AB", "CD"),
        BoxSpec::new(20, 30, 16, 6).with_text("EFGH", "IJ"),
    ];
    let ins = write_instructions(dir.path(), &boxes);
    let prefix = dir.path().join("two");
    ok(&["dump-masks", "--instructions", s(&ins), "--out-prefix", s(&prefix)]);
    let task = PreparedTask::new(&RunConfig::default().model, &boxes).unwrap();
    for (name, regime) in [("dis", Regime::Dis), ("har", Regime::Har)] {
        let img = read_pgm(Path::new(&format!("{}.{name}.pgm", prefix.display()))).unwrap();
        assert_eq!(img, mask_to_image(&oracle_mask(&task.layout, regime)), "{name}");
    }
    let layout: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(format!("{}.layout.json", prefix.display())).unwrap()).unwrap();
    assert_eq!(layout["seq_len"], task.layout.seq_len);
    assert_eq!(layout["t_inst"][1].as_array().unwrap().len(), 4);
    assert_eq!(layout["l_inst"][0].as_array().unwrap().len(), 4);
}

#[test]
fn eval_targets_and_schedule_table() {
    let w = small_setup(2, 3);
    let report = w.dir.path().join("gt.json");
    ok(&["eval", "--use-targets", "--data", s(&w.data), "--report", s(&report)]);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["label"], "targets");
    assert_eq!(v["aggregate"]["cer"], 0.0);
    assert_eq!(v["aggregate"]["mae_b"], 0.0);
    assert_eq!(v["samples"].as_array().unwrap().len(), 3);
    let csv = std::fs::read_to_string(w.dir.path().join("gt.samples.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(w.dir.path().join("gt.bins.csv").is_file());

    let ck = w.dir.path().join("m");
    ok(&["train", "--config", s(&w.config), "--data", s(&w.data), "--out", s(&ck), "--steps", "1"]);
    let table = w.dir.path().join("t.json");
    ok(&[
        "eval", "--ckpt", s(&ck.join("model.idfm")), "--data", s(&w.data), "--report", s(&table), "--steps", "1",
        "--all-schedules", "--limit", "2",
    ]);
    let csv = std::fs::read_to_string(w.dir.path().join("t.table.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    for col in ["cer", "mae_b", "attempt_rate"] {
        assert!(header.split(',').any(|c| c == col), "{header}");
    }
    assert_eq!(csv.lines().count(), 9);
}

#[test]
fn elo_ratings_printed_sorted() {
    let dir = tempfile::tempdir().unwrap();
    let games = dir.path().join("g.jsonl");
    std::fs::write(
        &games,
        [
            r#"{"a": "ann", "b": "bob", "result": "a"}"#,
            r#"{"a": "bob", "b": "cat", "result": "draw"}"#,
            r#"{"a": "cat", "b": "ann", "result": "a"}"#,
            r#"{"a": "ann", "b": "bob", "result": "b"}"#,
            r#"{"a": "bob", "b": "cat", "result": "a"}"#,
            r#"{"a": "cat", "b": "ann", "result": "draw"}"#,
        ]
        .join("\n"),
    )
    .unwrap();
    let out = ok(&["elo", "--judgments", s(&games), "--epochs", "2", "--seed", "7"]);
    assert_eq!(out, "player\trating\nbob\t1229.6328\ncat\t1202.0033\nann\t1168.3639\n");

    std::fs::write(&games, r#"{"a": "x", "b": "y", "result": "win"}"#).unwrap();
    assert_eq!(error_kind(&["elo", "--judgments", s(&games)]), "format");
}
