//! End-to-end tests of the `speechsem` binary: pipeline round trips,
//! exit codes, idempotent featurization and run determinism.

use byteorder::{LittleEndian, WriteBytesExt};
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_speechsem"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn gen_tiny_corpus(dir: &Path) {
    run_ok(bin().args([
        "gen-synthetic",
        "--out-dir",
        dir.to_str().unwrap(),
        "--classes",
        "8",
        "--paraphrases",
        "3",
        "--speakers",
        "2",
        "--seed",
        "1",
    ]));
}

const TINY_TRAIN: &[&str] = &[
    "--set",
    "hidden=32",
    "--set",
    "attn_hidden=16",
    "--set",
    "gru_layers=1",
    "--set",
    "conv_channels=8",
    "--set",
    "max_epochs=1",
    "--set",
    "batch_size=8",
];

#[test]
fn pipeline_train_encode_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    gen_tiny_corpus(&corpus);
    let manifest = corpus.join("manifest");
    let run_dir = tmp.path().join("run");

    let out = run_ok(
        bin()
            .args(["train", "--manifest"])
            .arg(&manifest)
            .arg("--out-dir")
            .arg(&run_dir)
            .args(TINY_TRAIN),
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    // run header carries the effective config
    assert!(stdout.contains("# run config"), "{stdout}");
    assert!(stdout.contains("lr=0.0002"), "{stdout}");
    assert!(stdout.contains("epoch=0 "), "{stdout}");
    assert!(run_dir.join("best.ckpt").exists());
    assert!(run_dir.join("last.ckpt").exists());
    assert!(run_dir.join("train.log").exists());

    let emb = tmp.path().join("emb.ssem");
    let out = run_ok(
        bin()
            .args(["encode", "--checkpoint"])
            .arg(run_dir.join("best.ckpt"))
            .arg("--manifest")
            .arg(&manifest)
            .arg("--out")
            .arg(&emb),
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("24x32"), "{stdout}");

    let out = run_ok(
        bin()
            .args(["eval", "--embeddings"])
            .arg(&emb)
            .arg("--manifest")
            .arg(&manifest)
            .arg("--json"),
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("\"num_utterances\": 24"), "{stdout}");
    assert!(stdout.contains("\"recall_at_10\""), "{stdout}");
    assert!(stdout.contains("\"rsa\""), "{stdout}");
}

#[test]
fn resume_continues_epoch_numbering() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    gen_tiny_corpus(&corpus);
    let manifest = corpus.join("manifest");
    let run_dir = tmp.path().join("run");

    run_ok(
        bin()
            .args(["train", "--manifest"])
            .arg(&manifest)
            .arg("--out-dir")
            .arg(&run_dir)
            .args(TINY_TRAIN),
    );
    let out = run_ok(
        bin()
            .args(["train", "--manifest"])
            .arg(&manifest)
            .arg("--out-dir")
            .arg(&run_dir)
            .arg("--resume")
            .arg(run_dir.join("last.ckpt"))
            .args(TINY_TRAIN),
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("epoch=1 "), "{stdout}");
    let log = std::fs::read_to_string(run_dir.join("train.log")).unwrap();
    assert!(log.contains("epoch=0 ") && log.contains("epoch=1 "), "{log}");
}

#[test]
fn training_is_deterministic_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    gen_tiny_corpus(&corpus);
    let manifest = corpus.join("manifest");
    for run in ["a", "b"] {
        run_ok(
            bin()
                .args(["train", "--manifest"])
                .arg(&manifest)
                .arg("--out-dir")
                .arg(tmp.path().join(run))
                .args(TINY_TRAIN),
        );
    }
    for name in ["best.ckpt", "last.ckpt", "train.log"] {
        assert_eq!(
            std::fs::read(tmp.path().join("a").join(name)).unwrap(),
            std::fs::read(tmp.path().join("b").join(name)).unwrap(),
            "{name} differs between identical runs"
        );
    }
}

#[test]
fn mean_mfcc_baseline_is_13_dimensional() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    gen_tiny_corpus(&corpus);
    let emb = tmp.path().join("mfcc.ssem");
    let out = run_ok(
        bin()
            .args(["encode", "--mean-mfcc", "--manifest"])
            .arg(corpus.join("manifest"))
            .arg("--out")
            .arg(&emb),
    );
    assert!(String::from_utf8(out.stdout).unwrap().contains("24x13"));
    run_ok(
        bin()
            .args(["eval", "--embeddings"])
            .arg(&emb)
            .arg("--manifest")
            .arg(corpus.join("manifest")),
    );
}

#[test]
fn exit_codes_for_usage_and_data_errors() {
    // unknown model name → config/usage error
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    gen_tiny_corpus(&corpus);
    let out = bin()
        .args(["train", "--manifest"])
        .arg(corpus.join("manifest"))
        .arg("--out-dir")
        .arg(tmp.path().join("run"))
        .args(["--set", "model=lstm"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    // missing manifest → data error
    let out = bin()
        .args(["encode", "--mean-mfcc", "--manifest", "/nonexistent/manifest"])
        .args(["--out", "/tmp/never.ssem"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // bad flag → usage error
    let out = bin().args(["train", "--no-such-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

/// Minimal mono PCM16 WAV writer for fixtures.
fn write_wav(path: &Path, samples: &[i16], rate: u32) {
    let mut f = std::fs::File::create(path).unwrap();
    let data_len = (samples.len() * 2) as u32;
    f.write_all(b"RIFF").unwrap();
    f.write_u32::<LittleEndian>(36 + data_len).unwrap();
    f.write_all(b"WAVEfmt ").unwrap();
    f.write_u32::<LittleEndian>(16).unwrap();
    f.write_u16::<LittleEndian>(1).unwrap(); // PCM
    f.write_u16::<LittleEndian>(1).unwrap(); // mono
    f.write_u32::<LittleEndian>(rate).unwrap();
    f.write_u32::<LittleEndian>(rate * 2).unwrap();
    f.write_u16::<LittleEndian>(2).unwrap();
    f.write_u16::<LittleEndian>(16).unwrap();
    f.write_all(b"data").unwrap();
    f.write_u32::<LittleEndian>(data_len).unwrap();
    for s in samples {
        f.write_i16::<LittleEndian>(*s).unwrap();
    }
}

#[test]
fn featurize_is_idempotent_and_reports_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let samples: Vec<i16> = (0..16000)
        .map(|i| (8000.0 * (i as f32 * 0.05).sin()) as i16)
        .collect();
    write_wav(&tmp.path().join("good.wav"), &samples, 16000);
    std::fs::write(tmp.path().join("bad.wav"), b"not a wav at all").unwrap();

    let manifest = tmp.path().join("manifest");
    std::fs::write(
        &manifest,
        "utt=good\tspeaker=s0\timage=i0\tsplit=train\taudio=good.wav\n\
         utt=bad\tspeaker=s0\timage=i1\tsplit=train\taudio=bad.wav\n",
    )
    .unwrap();
    let feat_dir = tmp.path().join("features");
    let out_manifest = tmp.path().join("manifest.out");

    let out = bin()
        .args(["featurize", "--manifest"])
        .arg(&manifest)
        .arg("--out-dir")
        .arg(&feat_dir)
        .arg("--out-manifest")
        .arg(&out_manifest)
        .output()
        .unwrap();
    // one corrupt file → per-file report, data exit code
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("failed bad"));
    assert!(feat_dir.join("good.ssem").exists());

    // good-only manifest: run twice, second run reuses the existing file
    std::fs::write(
        &manifest,
        "utt=good\tspeaker=s0\timage=i0\tsplit=train\taudio=good.wav\n",
    )
    .unwrap();
    let out = run_ok(
        bin()
            .args(["featurize", "--manifest"])
            .arg(&manifest)
            .arg("--out-dir")
            .arg(&feat_dir)
            .arg("--out-manifest")
            .arg(&out_manifest),
    );
    assert!(String::from_utf8(out.stdout).unwrap().contains("featurized 0, reused 1"));
    let before = std::fs::read(feat_dir.join("good.ssem")).unwrap();
    let out = run_ok(
        bin()
            .args(["featurize", "--manifest"])
            .arg(&manifest)
            .arg("--out-dir")
            .arg(&feat_dir)
            .arg("--out-manifest")
            .arg(&out_manifest),
    );
    assert!(String::from_utf8(out.stdout).unwrap().contains("reused 1"));
    assert_eq!(before, std::fs::read(feat_dir.join("good.ssem")).unwrap());
}
