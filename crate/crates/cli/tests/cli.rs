use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mtnet::dataset::{wav_read, DatasetManifest, Split};
use mtnet::metrics::EvalReport;

fn mtnet(args: &[&str]) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mtnet"));
    c.args(args).env_remove("MTNET_OUT_ROOT");
    c
}

fn ok(c: &mut Command) -> String {
    let out = c.output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails(c: &mut Command) -> Output {
    let out = c.output().unwrap();
    assert!(!out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn checksum(stdout: &str) -> String {
    stdout.lines().find_map(|l| l.strip_prefix("checksum=")).unwrap().to_string()
}

/// Short words so that training stays fast.
fn tiny_dataset(dir: &Path, test_per_class: usize) {
    ok(&mut mtnet(&[
        "dataset-gen",
        "--classes",
        "2",
        "--train-per-class",
        "2",
        "--test-per-class",
        &test_per_class.to_string(),
        "--seed",
        "3",
        "--sample-rate",
        "8000",
        "--min-ms",
        "100",
        "--max-ms",
        "120",
        "--out",
        s(dir),
    ]));
}

/// Default-length words; STOI needs a few hundred milliseconds of speech.
fn eval_dataset(dir: &Path, test_per_class: usize) {
    let tpc = test_per_class.to_string();
    ok(&mut mtnet(&["dataset-gen", "--classes", "2", "--train-per-class", "1", "--test-per-class", &tpc, "--out", s(dir)]));
}

const TINY: [&str; 8] = ["--set", "batch_size=4", "--set", "lr=1e-4", "--set", "phase1_steps=3", "--set", "phase2_steps=20"];

fn train(data: &Path, out: &Path, extra: &[&str]) -> String {
    let mut args = vec!["train", "--data", s(data), "--out", s(out)];
    args.extend_from_slice(&TINY);
    args.extend_from_slice(extra);
    ok(&mut mtnet(&args))
}

fn totals(log: &str, phase: &str) -> Vec<f64> {
    log.lines()
        .filter(|l| l.starts_with(phase))
        .map(|l| {
            let t = l.split_whitespace().find_map(|f| f.strip_prefix("total=")).unwrap();
            t.parse().unwrap()
        })
        .collect()
}

#[test]
fn dataset_gen_counts_and_checksums() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let args = ["dataset-gen", "--classes", "10", "--train-per-class", "8", "--test-per-class", "2", "--seed", "7", "--out"];
    let mut first = args.to_vec();
    first.push(s(a.path()));
    let out_a = ok(&mut mtnet(&first));
    let m = DatasetManifest::load(a.path()).unwrap();
    assert_eq!(m.records.len(), 100);
    assert_eq!((m.split_len(Split::Train), m.split_len(Split::Test)), (80, 20));
    assert!(out_a.contains("train=80 test=20"), "{out_a}");

    let mut second = args.to_vec();
    second.push(s(b.path()));
    assert_eq!(checksum(&out_a), checksum(&ok(&mut mtnet(&second))));
}

#[test]
fn dataset_gen_single_class_and_invalid_spec() {
    let dir = tempfile::tempdir().unwrap();
    let one = dir.path().join("one");
    ok(&mut mtnet(&["dataset-gen", "--classes", "1", "--train-per-class", "3", "--test-per-class", "1", "--out", s(&one)]));
    assert_eq!(DatasetManifest::load(&one).unwrap().num_classes, 1);
    let out = fails(&mut mtnet(&[
        "dataset-gen",
        "--classes",
        "0",
        "--train-per-class",
        "3",
        "--test-per-class",
        "1",
        "--out",
        s(&dir.path().join("zero")),
    ]));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn train_writes_artifacts_and_joint_loss_falls() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = (dir.path().join("d"), dir.path().join("run"));
    tiny_dataset(&data, 1);
    train(&data, &run, &[]);
    for f in ["phase1.ckpt", "phi_a.cache", "final.ckpt", "train.log"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert!(!run.join("phase2.partial.ckpt").exists());
    let log = fs::read_to_string(run.join("train.log")).unwrap();
    assert!(log.starts_with("# model=desk\n# precision=f32\n"), "{log}");
    assert!(log.contains("# lr=0.0001\n"));
    let t = totals(&log, "phase=2");
    assert!(t.len() >= 2);
    assert!(t.last().unwrap() < &t[0], "{t:?}");
}

#[test]
fn gen_only_ablation_switches_off_two_terms() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = (dir.path().join("d"), dir.path().join("run"));
    tiny_dataset(&data, 1);
    train(&data, &run, &["--ablation", "gen-only", "--set", "phase2_steps=2"]);
    let log = fs::read_to_string(run.join("train.log")).unwrap();
    assert!(log.contains("# use_per_loss=false\n# use_rep_loss=false\n"), "{log}");
    for l in log.lines().filter(|l| l.starts_with("phase=2")) {
        assert!(l.contains(" per=0.000000e0 rep=0.000000e0 "), "{l}");
    }
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    tiny_dataset(&data, 1);
    let (straight, pieces) = (dir.path().join("straight"), dir.path().join("pieces"));
    let short = ["--set", "phase2_steps=4", "--set", "checkpoint_every=1"];
    train(&data, &straight, &short);

    // stop inside phase 1, then inside phase 2, then finish
    let out = train(&data, &pieces, &[&short[..], &["--stop-after", "2"]].concat());
    assert!(out.contains("stopped early"));
    assert!(pieces.join("phase1.partial.ckpt").exists() && !pieces.join("phase1.ckpt").exists());
    train(&data, &pieces, &[&short[..], &["--resume", "--stop-after", "3"]].concat());
    assert!(pieces.join("phase2.partial.ckpt").exists() && !pieces.join("final.ckpt").exists());
    train(&data, &pieces, &[&short[..], &["--resume"]].concat());

    for f in ["phase1.ckpt", "phi_a.cache", "final.ckpt"] {
        assert_eq!(fs::read(straight.join(f)).unwrap(), fs::read(pieces.join(f)).unwrap(), "{f}");
    }
    assert!(!pieces.join("phase2.partial.ckpt").exists());
}

#[test]
fn generate_is_one_wav_per_image_and_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = (dir.path().join("d"), dir.path().join("run"));
    tiny_dataset(&data, 2);
    train(&data, &run, &["--set", "phase2_steps=2"]);
    let m = DatasetManifest::load(&data).unwrap();
    let ckpt = run.join("final.ckpt");

    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&mut mtnet(&["generate", "--checkpoint", s(&ckpt), "--data", s(&data), "--split", "test", "--out", s(out)]));
    }
    let ids: Vec<&str> = m.split(Split::Test).map(|r| r.id.as_str()).collect();
    assert_eq!(fs::read_dir(&a).unwrap().count(), ids.len());
    for id in &ids {
        let name = format!("{id}.wav");
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap());
    }

    let rec = m.split(Split::Test).next().unwrap();
    let single = dir.path().join("single");
    ok(&mut mtnet(&["generate", "--checkpoint", s(&ckpt), "--image", s(&data.join(&rec.image)), "--out", s(&single)]));
    let files: Vec<_> = fs::read_dir(&single).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(files.len(), 1);
    let clip = wav_read(&files[0]).unwrap();
    assert_eq!((clip.samples().len(), clip.sample_rate), (m.audio_length, m.sample_rate));

    // a partial or phase-1 checkpoint is not a generator
    fails(&mut mtnet(&["generate", "--checkpoint", s(&run.join("phase1.ckpt")), "--data", s(&data), "--out", s(&a)]));
}

#[test]
fn evaluate_ground_truth_is_perfect_and_report_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    eval_dataset(&data, 2);
    let report = dir.path().join("gt.report");
    let out = ok(&mut mtnet(&["evaluate", "--data", s(&data), "--ground-truth", "--report", s(&report)]));
    assert!(out.trim().starts_with("corr2d=1.0000 stoi="), "{out}");
    let text = fs::read_to_string(&report).unwrap();
    let parsed = EvalReport::parse(&text).unwrap();
    assert_eq!(parsed.rows.len(), 4);
    assert_eq!(parsed.to_text(), text);
}

#[test]
fn evaluate_tolerates_up_to_ten_percent_missing() {
    let dir = tempfile::tempdir().unwrap();
    let (data, wavs) = (dir.path().join("d"), dir.path().join("wavs"));
    eval_dataset(&data, 5);
    let m = DatasetManifest::load(&data).unwrap();
    fs::create_dir_all(&wavs).unwrap();
    let recs: Vec<_> = m.split(Split::Test).collect();
    assert_eq!(recs.len(), 10);
    // the references themselves, minus one file: 90% coverage passes
    for r in &recs[1..] {
        fs::copy(data.join(&r.audio), wavs.join(format!("{}.wav", r.id))).unwrap();
    }
    let out = mtnet(&["evaluate", "--data", s(&data), "--wavs", s(&wavs)]).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains(&format!("warning: {}", recs[0].id)));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("corr2d="));

    fs::remove_file(wavs.join(format!("{}.wav", recs[1].id))).unwrap();
    fails(&mut mtnet(&["evaluate", "--data", s(&data), "--wavs", s(&wavs)]));
}

#[test]
fn unknown_and_dataset_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    tiny_dataset(&data, 1);
    let run = dir.path().join("run");
    for bad in ["bogus=1", "audio_length=10", "lr=fast"] {
        let out = fails(&mut mtnet(&["train", "--data", s(&data), "--out", s(&run), "--set", bad]));
        let key = bad.split('=').next().unwrap();
        assert!(String::from_utf8_lossy(&out.stderr).contains(key));
    }
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "lr = 1e-4\nnot_a_key = 3\n").unwrap();
    let out = fails(&mut mtnet(&["train", "--data", s(&data), "--out", s(&run), "--config", s(&cfg)]));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.cfg:2"));
    assert!(!run.join("train.log").exists());
}

#[test]
fn out_root_prefixes_relative_paths() {
    let root = tempfile::tempdir().unwrap();
    let mut c = mtnet(&["dataset-gen", "--classes", "2", "--train-per-class", "1", "--test-per-class", "1", "--out", "d"]);
    c.env("MTNET_OUT_ROOT", root.path());
    ok(&mut c);
    assert!(root.path().join("d/manifest.txt").exists());
    let mut c = mtnet(&["evaluate", "--data", "d", "--ground-truth", "--report", "r/gt.report"]);
    c.env("MTNET_OUT_ROOT", root.path());
    ok(&mut c);
    assert!(root.path().join("r/gt.report").exists());
}

#[test]
fn ablate_scores_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    let (data, out) = (dir.path().join("d"), dir.path().join("abl"));
    tiny_dataset(&data, 1);
    let mut args = vec!["ablate", "--data", s(&data), "--out", s(&out), "--include-full"];
    args.extend_from_slice(&TINY);
    args.extend_from_slice(&["--set", "phase2_steps=2"]);
    ok(&mut mtnet(&args));
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    let names: Vec<&str> = summary.lines().map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(names, ["gen-only", "gen-rep", "no-holes", "autoencoder-gen", "full"]);
    for n in names {
        assert!(out.join(n).join("final.ckpt").exists());
        EvalReport::parse(&fs::read_to_string(out.join(format!("{n}.report"))).unwrap()).unwrap();
    }
    assert!(out.join("phase1.ckpt").exists());
}
