use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use editroll::midi::{export_midi, QuantizeConfig};
use editroll::nn::load_model;
use editroll::sampler::{parse_transcript, replay_transcript};
use editroll::PianoRoll;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_editroll");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn scale(start: usize) -> PianoRoll {
    let notes = (0..16).map(|t| (t, start + [0, 2, 4, 5, 7, 9, 11, 12][t / 2]));
    PianoRoll::from_notes(16, 12 + 12, 60, notes).unwrap()
}

/// Four loose roll files plus the quantization flags that match them.
fn fixture(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    fs::create_dir_all(&data).unwrap();
    for s in 0..4 {
        fs::write(data.join(format!("r{s}.json")), scale(s).to_json()).unwrap();
    }
    data
}

const QUANT: [&str; 4] = ["--pitch-offset", "60", "--pitch-count", "24"];

fn train(dir: &Path, name: &str, epochs: &str, seed: &str) -> (PathBuf, Output) {
    let data = fixture(dir);
    let model = dir.join(format!("{name}.bin"));
    let mut args = vec![
        "train",
        "--data",
        p(&data),
        "--out",
        p(&model),
        "--epochs",
        epochs,
        "--seed",
        seed,
        "--depth",
        "2",
        "--base-filters",
        "4",
        "--batch-size",
        "4",
    ];
    args.extend(QUANT);
    let out = run(&args);
    (model, out)
}

#[test]
fn train_writes_checkpoint_and_loss_trace() {
    let dir = TempDir::new().unwrap();
    let (model, out) = train(dir.path(), "m", "3", "1");
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let bytes = fs::read(&model).unwrap();
    assert_eq!(&bytes[..4], b"ESNT");
    let m = load_model(&model).unwrap();
    assert_eq!((m.config.time_steps, m.config.pitch_count), (16, 24));
    let csv = fs::read_to_string(model.with_extension("csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3, "{csv}");
}

#[test]
fn zero_epochs_give_header_only_trace() {
    let dir = TempDir::new().unwrap();
    let (model, out) = train(dir.path(), "m", "0", "1");
    assert_eq!(code(&out), 0);
    let csv = fs::read_to_string(model.with_extension("csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
}

#[test]
fn training_is_reproducible_per_seed() {
    let dir = TempDir::new().unwrap();
    let (a, _) = train(dir.path(), "a", "2", "9");
    let (b, _) = train(dir.path(), "b", "2", "9");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(
        fs::read(a.with_extension("csv")).unwrap(),
        fs::read(b.with_extension("csv")).unwrap()
    );
}

#[test]
fn sample_one_iteration_adds_one_note() {
    let dir = TempDir::new().unwrap();
    let (model, _) = train(dir.path(), "m", "1", "1");
    let out_dir = dir.path().join("s");
    let out = run(&[
        "sample",
        "--model",
        p(&model),
        "--out-dir",
        p(&out_dir),
        "--max-iterations",
        "1",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(summary["notes"], 1);
    assert_eq!(summary["steps"], 1);
    let roll = PianoRoll::from_json(&fs::read_to_string(out_dir.join("sample.json")).unwrap()).unwrap();
    assert_eq!(roll.note_count(), 1);
    assert!(fs::read(out_dir.join("sample.mid")).unwrap().starts_with(b"MThd"));
    let records = parse_transcript(&fs::read_to_string(out_dir.join("transcript.jsonl")).unwrap()).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(replay_transcript(&roll.empty_like(), &records).unwrap(), roll);
}

#[test]
fn conditioned_sample_without_removals_keeps_input() {
    let dir = TempDir::new().unwrap();
    let (model, _) = train(dir.path(), "m", "1", "1");
    let input = scale(3);
    let cfg = QuantizeConfig {
        pitch_offset: 60,
        pitch_count: 24,
        ..QuantizeConfig::default()
    };
    let midi_path = dir.path().join("input.mid");
    fs::write(&midi_path, export_midi(&input, &cfg, 120.0).unwrap()).unwrap();
    let out_dir = dir.path().join("s");
    let out = run(&[
        "sample",
        "--model",
        p(&model),
        "--input",
        p(&midi_path),
        "--out-dir",
        p(&out_dir),
        "--max-removals",
        "0",
        "--max-iterations",
        "30",
        "--seed",
        "4",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let roll = PianoRoll::from_json(&fs::read_to_string(out_dir.join("sample.json")).unwrap()).unwrap();
    for (i, &on) in input.cells().iter().enumerate() {
        assert!(!on || roll.cells()[i]);
    }
}

#[test]
fn eval_corpus_against_itself() {
    let dir = TempDir::new().unwrap();
    let data = fixture(dir.path());
    let mut args = vec!["eval", "--training", p(&data), "--generated", p(&data)];
    args.extend(QUANT);
    let out = run(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["bhattacharyya"], 0.0);
    assert_eq!(v["ks"]["d"], 0.0);
    assert_eq!(v["ks"]["p_value"], 1.0);
    assert_eq!(v["training"]["p"], v["generated"]["p"]);

    let mut args = vec!["eval", "--training", p(&data), "--table"];
    args.extend(QUANT);
    let table = stdout(&run(&args));
    assert!(table.contains("PC") && table.contains("ISR"), "{table}");
}

#[test]
fn likelihood_of_identical_rolls_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let (model, _) = train(dir.path(), "m", "1", "1");
    let roll = dir.path().join("r.json");
    fs::write(&roll, scale(0).to_json()).unwrap();
    let out = run(&[
        "likelihood",
        "--model",
        p(&model),
        "--input",
        p(&roll),
        "--target",
        p(&roll),
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn likelihood_reports_json() {
    let dir = TempDir::new().unwrap();
    let (model, _) = train(dir.path(), "m", "1", "1");
    let input = dir.path().join("in.json");
    let target = dir.path().join("target.json");
    let mut partial = scale(0);
    partial.set(0, 0, false);
    partial.set(1, 0, false);
    fs::write(&input, partial.to_json()).unwrap();
    fs::write(&target, scale(0).to_json()).unwrap();
    let out = run(&[
        "likelihood",
        "--model",
        p(&model),
        "--input",
        p(&input),
        "--target",
        p(&target),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["K"], 2);
    assert_eq!(v["D"], 1);
    assert!(v["notewise_ll"].as_f64().unwrap() < 0.0);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&run(&[])), 2);
    assert_eq!(code(&run(&["train"])), 2);
    assert_eq!(code(&run(&["sample", "--model"])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
}

#[test]
fn bad_model_exits_4() {
    let dir = TempDir::new().unwrap();
    let junk = dir.path().join("junk.bin");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let out = run(&["sample", "--model", p(&junk), "--out-dir", p(&dir.path().join("o"))]);
    assert_eq!(code(&out), 4);
    let missing = dir.path().join("missing.bin");
    let out = run(&["sample", "--model", p(&missing), "--out-dir", p(&dir.path().join("o"))]);
    assert_eq!(code(&out), 4);
}

#[test]
fn missing_training_data_exits_3() {
    let dir = TempDir::new().unwrap();
    let out = run(&[
        "train",
        "--data",
        p(&dir.path().join("nowhere")),
        "--out",
        p(&dir.path().join("m.bin")),
    ]);
    assert_eq!(code(&out), 3);
}
