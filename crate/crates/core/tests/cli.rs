mod common;

use std::path::Path;
use std::process::Command;

use reverbswap::audio::{load_wav, save_wav, synthetic_vocal, Waveform, CANONICAL_RATE};
use reverbswap::checkpoint::Checkpoint;
use reverbswap::cli::{main_with_args, ModelSize, RunLog};
use reverbswap::databus::{read_jsonl, DatasetManifest};
use reverbswap::metrics::ReportRow;
use reverbswap::model::{ModelConfig, ModelParams};
use reverbswap::reverb::ReverbPreset;
use reverbswap::training::{LossReport, LOSS_LOG};

use common::{args, path_str, write_corpus};

fn cli(items: &[&str]) -> u8 {
    main_with_args(args(items), &mut RunLog::quiet())
}

fn synth(corpus: &Path, out: &Path, quads: &str, val_quads: &str) -> u8 {
    cli(&["synth-data", "--corpus", path_str(corpus), "--out", path_str(out), "--quads", quads, "--val-quads", val_quads, "--model", "reduced"])
}

fn reduced_checkpoint(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("model.ckpt");
    Checkpoint::new(&ModelParams::new(ModelConfig::reduced(), 7).unwrap(), 0, 0).save(&p).unwrap();
    p
}

#[test]
fn zero_quads_still_writes_presets() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c");
    write_corpus(&corpus, 2, ModelSize::Reduced.clip_frames());
    let out = tmp.path().join("m.json");
    assert_eq!(synth(&corpus, &out, "0", "0"), 0);
    assert!(DatasetManifest::read(&out).unwrap().quads.is_empty());
    let train: Vec<ReverbPreset> = read_jsonl(tmp.path().join("m_presets_train.jsonl")).unwrap();
    let val: Vec<ReverbPreset> = read_jsonl(tmp.path().join("m_presets_val.jsonl")).unwrap();
    assert_eq!((train.len(), val.len()), (36, 4));
}

#[test]
fn two_clip_corpus_never_pairs_a_source_with_itself() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c");
    write_corpus(&corpus, 2, 7000);
    let out = tmp.path().join("m.json");
    assert_eq!(synth(&corpus, &out, "8", "2"), 0);
    let m = DatasetManifest::read(&out).unwrap();
    assert_eq!(m.quads.len(), 8);
    assert!(m.quads.iter().all(|q| q.source_a != q.source_b));
}

#[test]
fn too_small_corpus_is_a_user_error() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c");
    write_corpus(&corpus, 1, 7000);
    assert_eq!(synth(&corpus, &tmp.path().join("m.json"), "4", "0"), 1);
    write_corpus(&corpus, 2, 100);
    assert_eq!(synth(&corpus, &tmp.path().join("m.json"), "4", "0"), 1);
}

#[test]
fn train_one_epoch_then_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c");
    write_corpus(&corpus, 2, 7000);
    let manifest = tmp.path().join("m.json");
    assert_eq!(synth(&corpus, &manifest, "2", "0"), 0);
    let run = tmp.path().join("run");
    let train = |epochs: &str, resume: bool| {
        let mut a = vec!["train", "--manifest", path_str(&manifest), "--out", path_str(&run), "--model", "reduced", "--epochs", epochs, "--batch-size", "2"];
        if resume {
            a.push("--resume");
        }
        cli(&a)
    };
    assert_eq!(train("1", false), 0);
    assert!(run.join("epoch_0001.ckpt").exists());
    assert!(run.join("run.log").exists());
    assert_eq!(train("2", true), 0);
    let ck = Checkpoint::load(run.join("epoch_0002.ckpt")).unwrap();
    assert_eq!((ck.meta.epoch, ck.meta.step), (2, 2));
    let log: Vec<LossReport> = read_jsonl(run.join(LOSS_LOG)).unwrap();
    assert_eq!(log.iter().map(|r| r.epoch).collect::<Vec<_>>(), [0, 1]);
    // a full-size model cannot train on reduced-length clips
    let a = ["train", "--manifest", path_str(&manifest), "--out", path_str(&run), "--epochs", "1"];
    assert_eq!(cli(&a), 1);
}

#[test]
fn convert_keeps_length_rate_and_channels() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = reduced_checkpoint(tmp.path());
    let input = tmp.path().join("in.wav");
    let reference = tmp.path().join("ref.wav");
    let mono = synthetic_vocal(1, 10_001, 22_050);
    save_wav(&mono, &input).unwrap();
    save_wav(&synthetic_vocal(2, 3_000, 22_050).to_stereo(), &reference).unwrap();
    let out = tmp.path().join("out.wav");
    let base = ["convert", "--input", path_str(&input), "--reference", path_str(&reference), "--ckpt", path_str(&ckpt), "--out", path_str(&out)];
    assert_eq!(cli(&base), 1, "non-canonical rate needs --allow-resample");
    let mut a = base.to_vec();
    a.push("--allow-resample");
    assert_eq!(cli(&a), 0);
    let y = load_wav(&out).unwrap();
    assert_eq!((y.channels(), y.sample_rate(), y.frames()), (1, 22_050, 10_001));
}

#[test]
fn dereverb_is_convert_with_a_dry_reference() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = reduced_checkpoint(tmp.path());
    let input = tmp.path().join("in.wav");
    let dry = tmp.path().join("dry.wav");
    save_wav(&synthetic_vocal(3, 15_000, CANONICAL_RATE).to_stereo(), &input).unwrap();
    save_wav(&synthetic_vocal(4, 9_000, CANONICAL_RATE).to_stereo(), &dry).unwrap();
    let (o1, o2) = (tmp.path().join("o1.wav"), tmp.path().join("o2.wav"));
    let common = ["--input", path_str(&input), "--ckpt", path_str(&ckpt)];
    let mut d = vec!["dereverb", "--dry-ref", path_str(&dry), "--out", path_str(&o1)];
    d.extend(common);
    let mut c = vec!["convert", "--reference", path_str(&dry), "--out", path_str(&o2)];
    c.extend(common);
    assert_eq!((cli(&d), cli(&c)), (0, 0));
    assert_eq!(std::fs::read(o1).unwrap(), std::fs::read(o2).unwrap());
}

#[test]
fn binary_exit_codes_and_dry_ref_hint() {
    let tmp = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_reverbswap");
    let out = Command::new(bin)
        .args(["dereverb", "--input", "a.wav", "--ckpt", "m.ckpt", "--out", "o.wav"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--dry-ref") && err.contains("dry"), "{err}");

    let missing = tmp.path().join("nope.ckpt");
    let out = Command::new(bin)
        .args(["convert", "--input", "a.wav", "--reference", "b.wav", "--ckpt", path_str(&missing), "--out", "o.wav"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.ckpt"));

    assert_eq!(Command::new(bin).arg("--bogus").output().unwrap().status.code(), Some(1));
    assert_eq!(Command::new(bin).arg("--help").output().unwrap().status.code(), Some(0));
}

#[test]
fn evaluate_reports_and_rejects_empty_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c");
    write_corpus(&corpus, 2, 50_000);
    let ckpt = reduced_checkpoint(tmp.path());
    let manifest = tmp.path().join("m.json");
    assert_eq!(synth(&corpus, &manifest, "0", "1"), 0);
    let eval = |m: &Path, mode: &str, stem: &Path| {
        cli(&["evaluate", "--ckpt", path_str(&ckpt), "--val-manifest", path_str(m), "--mode", mode, "--out", path_str(stem), "--pesq-cmd", "echo 2.5"])
    };

    let empty = tmp.path().join("empty");
    assert_eq!(eval(&manifest, "conversion", &empty), 1);
    assert!(!empty.with_extension("txt").exists());

    let val = tmp.path().join("m_val.json");
    let conv = tmp.path().join("conv");
    assert_eq!(eval(&val, "conversion", &conv), 0);
    let rows: Vec<ReportRow> = read_jsonl(conv.with_extension("jsonl")).unwrap();
    assert_eq!(rows.iter().map(|r| r.condition.as_str()).collect::<Vec<_>>(), ["input", "model"]);
    let table = std::fs::read_to_string(conv.with_extension("txt")).unwrap();
    assert!(table.contains("stoi") && table.contains("2.500"), "{table}");

    let derev = tmp.path().join("derev");
    assert_eq!(eval(&val, "dereverb", &derev), 0);
    let rows: Vec<ReportRow> = read_jsonl(derev.with_extension("jsonl")).unwrap();
    assert_eq!(rows.len(), 26);
    let max_gamma = rows.iter().filter_map(|r| r.gamma).fold(0.0, f64::max);
    assert!((max_gamma - 0.7).abs() < 1e-9);
    assert!(rows.iter().all(|r| r.metrics.len() == 4));
}

#[test]
fn silent_audio_round_trips_through_convert() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = reduced_checkpoint(tmp.path());
    let input = tmp.path().join("in.wav");
    save_wav(&Waveform::silence(2, 7_000, CANONICAL_RATE), &input).unwrap();
    let out = tmp.path().join("o.wav");
    assert_eq!(cli(&["convert", "--input", path_str(&input), "--reference", path_str(&input), "--ckpt", path_str(&ckpt), "--out", path_str(&out)]), 0);
    assert_eq!(load_wav(&out).unwrap().frames(), 7_000);
}
