use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SHORT: &str = "\
[toy]
utterances_per_speaker = 6
val_per_speaker = 2
[verifier_train]
steps = 10
[baseline]
total_steps = 4
checkpoint_every = 0
[fc]
total_steps = 4
checkpoint_every = 0
[eval]
n_trials = 20
";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxfc")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(dir: &Path, f: &str) -> String {
    dir.join(f).to_string_lossy().into_owned()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["train-fc"]).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(run(&["evaluate", "--protocol", "sideways"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_print_kind_and_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "train-fc", "--manifest", &p(dir.path(), "m.tsv"), "--verifier", &p(dir.path(), "v.ckpt"), "--out",
        &p(dir.path(), "f.ckpt"),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.lines().any(|l| l.starts_with("error: kind=config msg=")), "{err}");

    let cfg = p(dir.path(), "bad.toml");
    fs::write(&cfg, "[synthesizer]\nwarp_factor = 9\n").unwrap();
    let out = run(&["--config", &cfg, "make-toy", "--out", &p(dir.path(), "toy")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("kind=config"));
}

#[test]
fn short_toy_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = p(d, "short.toml");
    fs::write(&cfg, SHORT).unwrap();
    let manifest = p(d, "toy/manifest.tsv");

    let made = ok(&["--config", &cfg, "make-toy", "--speakers", "3", "--out", &p(d, "toy")]);
    assert!(made.contains("entries=18"));
    let v = ok(&["--config", &cfg, "train-verifier", "--manifest", &manifest, "--out", &p(d, "v.ckpt")]);
    assert!(v.contains("train_accuracy=") && v.contains("natural_eer_percent="));
    ok(&["--config", &cfg, "train-baseline", "--manifest", &manifest, "--verifier", &p(d, "v.ckpt"), "--out", &p(d, "b.ckpt")]);
    ok(&[
        "--config", &cfg, "train-fc", "--manifest", &manifest, "--verifier", &p(d, "v.ckpt"), "--init", &p(d, "b.ckpt"),
        "--out", &p(d, "f.ckpt"), "--steps", "2",
    ]);
    let metrics = fs::read_to_string(p(d, "f.ckpt.metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(metrics.starts_with("step\t"));

    let syn = ok(&[
        "--config", &cfg, "synthesize", "--system", &p(d, "f.ckpt"), "--verifier", &p(d, "v.ckpt"), "--text", "abcd",
        "--reference", &p(d, "toy/wavs/spk00_000.wav"), "--out", &p(d, "x.mels"), "--wav", &p(d, "x.wav"), "--gl-iters", "4",
    ]);
    assert!(syn.starts_with("frames="));
    assert!(Path::new(&p(d, "x.mels")).is_file() && Path::new(&p(d, "x.wav")).is_file());

    let eval = ok(&[
        "--config", &cfg, "evaluate", "--system", &p(d, "f.ckpt"), "--verifier", &p(d, "v.ckpt"), "--manifest", &manifest,
        "--protocol", "indep", "--name", "fc", "--report", &p(d, "r.txt"),
    ]);
    for key in ["eer_percent=", "avg_cosine=", "natural_eer_percent=", "trial_count=20"] {
        assert!(eval.contains(key), "{key} missing: {eval}");
    }
    assert!(eval.lines().any(|l| l.starts_with("fc\tval\tindep\t")), "{eval}");
    assert!(fs::read_to_string(p(d, "r.txt")).unwrap().contains("eer_percent="));

    let ex = ok(&[
        "--config", &cfg, "export-embeddings", "--system", &p(d, "f.ckpt"), "--verifier", &p(d, "v.ckpt"), "--manifest",
        &manifest, "--out", &p(d, "e.tsv"), "--pca", &p(d, "pca.tsv"),
    ]);
    assert!(ex.contains("rows=12"));
    let pca = fs::read_to_string(p(d, "pca.tsv")).unwrap();
    assert_eq!(pca.lines().count(), 13);
    assert!(pca.contains("\tsynthesized\t") && pca.contains("\tnatural\t"));
}

#[test]
fn prepare_data_on_a_vctk_tree() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = p(d, "short.toml");
    fs::write(&cfg, SHORT).unwrap();
    ok(&["--config", &cfg, "make-toy", "--speakers", "4", "--out", &p(d, "toy")]);
    for e in fs::read_dir(d.join("toy/wavs")).unwrap() {
        let path = e.unwrap().path();
        let utt = path.file_stem().unwrap().to_string_lossy().into_owned();
        let spk = &utt[..5];
        fs::create_dir_all(d.join("corpus/wav48").join(spk)).unwrap();
        fs::create_dir_all(d.join("corpus/txt").join(spk)).unwrap();
        fs::copy(&path, d.join("corpus/wav48").join(spk).join(format!("{utt}.wav"))).unwrap();
        fs::copy(d.join("toy/txt").join(format!("{utt}.txt")), d.join("corpus/txt").join(spk).join(format!("{utt}.txt")))
            .unwrap();
    }
    let out = ok(&[
        "prepare-data", "--layout", "vctk_like", "--root", &p(d, "corpus"), "--out", &p(d, "m.tsv"), "--test-speakers", "1",
        "--val-per-speaker", "2",
    ]);
    assert!(out.contains("entries=24"), "{out}");
    let manifest = fs::read_to_string(p(d, "m.tsv")).unwrap();
    assert_eq!(manifest.lines().filter(|l| l.contains("\ttest\t")).count(), 6);
    assert_eq!(manifest.lines().filter(|l| l.contains("\tval\t")).count(), 6);
    // the manifest is usable from anywhere: audio paths are absolute
    let v = ok(&["--config", &cfg, "train-verifier", "--manifest", &p(d, "m.tsv"), "--out", &p(d, "v.ckpt"), "--steps", "2"]);
    assert!(v.contains("train_accuracy="));
}
