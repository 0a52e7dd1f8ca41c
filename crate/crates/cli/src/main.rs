mod config;
mod run;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mtnet::dataset::{build_dataset, read_netpbm, wav_write, DatasetManifest, DatasetSpec, ImageSample, Split, WordSpec};
use mtnet::metrics::{evaluate_set, EvalReport, EvalSource};
use mtnet::model::{stored_dtype, Ablation, InferenceModel};
use mtnet::tensor::Scalar;

use config::{Precision, Resolved, RunConfig};
use run::{Budget, Log, Outcome, Phase1, Phase2};

/// Relative output (and run-artifact) paths are resolved against this
/// directory when it is set.
const OUT_ROOT_VAR: &str = "MTNET_OUT_ROOT";

/// Fraction of the split that must be scored for `evaluate` to succeed.
const MIN_COVERAGE: f64 = 0.9;

#[derive(Parser)]
#[command(name = "mtnet", version, about = "Image-to-audio description: data, training, generation, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a seeded synthetic image/word dataset.
    DatasetGen(DatasetGenArgs),
    /// Train the audio autoencoder, then the joint model.
    Train(TrainArgs),
    /// Write one WAV per input image.
    Generate(GenerateArgs),
    /// Score generated audio against the references of a split.
    Evaluate(EvaluateArgs),
    /// Train and score every ablation variant on one shared phase 1.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct DatasetGenArgs {
    #[arg(long)]
    classes: usize,
    #[arg(long)]
    train_per_class: usize,
    #[arg(long)]
    test_per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "synth")]
    name: String,
    #[arg(long, default_value_t = 16)]
    image_size: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long)]
    sample_rate: Option<u32>,
    /// Shortest word in milliseconds.
    #[arg(long)]
    min_ms: Option<f64>,
    /// Longest word in milliseconds.
    #[arg(long)]
    max_ms: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    /// Dataset directory written by `dataset-gen`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `key = value` file; `--set` wins over it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set lr=1e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from the checkpoints already in `--out`.
    #[arg(long)]
    resume: bool,
    /// Stop after this many optimizer steps, leaving partial checkpoints.
    #[arg(long, value_name = "STEPS")]
    stop_after: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// One of full, gen-only, gen-rep, no-holes, autoencoder-gen.
    #[arg(long)]
    ablation: Option<String>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A single PGM/PPM image.
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    image: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
    /// Linearly resample to this rate before writing.
    #[arg(long, value_name = "HZ")]
    wav_rate: Option<u32>,
}

#[derive(Args)]
#[command(group(clap::ArgGroup::new("source").required(true).multiple(false)))]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, group = "source")]
    checkpoint: Option<PathBuf>,
    /// Directory of `<id>.wav` files.
    #[arg(long, group = "source")]
    wavs: Option<PathBuf>,
    /// Score each reference against itself.
    #[arg(long, group = "source")]
    ground_truth: bool,
    /// Write the per-example report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Also train the unablated model.
    #[arg(long)]
    include_full: bool,
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    let root = std::env::var_os(OUT_ROOT_VAR).map(PathBuf::from);
    let at = |p: &Path| match &root {
        Some(r) if p.is_relative() => r.join(p),
        _ => p.to_path_buf(),
    };
    match cli.command {
        Command::DatasetGen(a) => dataset_gen(a, &at),
        Command::Train(a) => train(a, &at),
        Command::Generate(a) => generate(a, &at),
        Command::Evaluate(a) => evaluate(a, &at),
        Command::Ablate(a) => ablate(a, &at),
    }
}

fn dataset_gen(a: DatasetGenArgs, at: &dyn Fn(&Path) -> PathBuf) -> Result<ExitCode> {
    let mut spec = DatasetSpec::new(a.classes, a.train_per_class, a.test_per_class, a.seed);
    spec.name = a.name;
    spec.image_shape.height = a.image_size;
    spec.image_shape.width = a.image_size;
    spec.image_shape.channels = a.channels;
    let d = WordSpec::default();
    spec.word = WordSpec {
        sample_rate: a.sample_rate.unwrap_or(d.sample_rate),
        min_ms: a.min_ms.unwrap_or(d.min_ms),
        max_ms: a.max_ms.unwrap_or(d.max_ms),
    };
    let out = at(&a.out);
    let m = build_dataset(&spec, &out)?;
    println!("dataset {} in {}", m.name, out.display());
    println!(
        "classes={} train={} test={} image={}x{}x{} sample_rate={} audio_length={}",
        m.num_classes,
        m.split_len(Split::Train),
        m.split_len(Split::Test),
        m.image_shape.height,
        m.image_shape.width,
        m.image_shape.channels,
        m.sample_rate,
        m.audio_length
    );
    println!("checksum={}", m.checksum(&out)?);
    Ok(ExitCode::SUCCESS)
}

struct Prepared {
    data_dir: PathBuf,
    out: PathBuf,
    manifest: DatasetManifest,
    run: RunConfig,
}

fn prepare(a: &RunArgs, ablation: Option<&str>, at: &dyn Fn(&Path) -> PathBuf) -> Result<Prepared> {
    let mut run = RunConfig::default();
    if let Some(p) = &a.config {
        run.load(p)?;
    }
    run.apply_overrides(&a.sets)?;
    if let Some(name) = ablation {
        run.set("ablation", name)?;
    }
    if let Some(seed) = a.seed {
        run.train.seed = seed;
    }
    run.validate()?;
    let data_dir = at(&a.data);
    let manifest = DatasetManifest::load(&data_dir)?;
    let out = at(&a.out);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(Prepared {
        data_dir,
        out,
        manifest,
        run,
    })
}

fn train(a: TrainArgs, at: &dyn Fn(&Path) -> PathBuf) -> Result<ExitCode> {
    let p = prepare(&a.run, a.ablation.as_deref(), at)?;
    match p.run.precision {
        Precision::F32 => train_as::<f32>(&p, &a.run),
        Precision::F64 => train_as::<f64>(&p, &a.run),
    }
}

fn meta(m: &DatasetManifest) -> Vec<(String, String)> {
    vec![("sample_rate".into(), m.sample_rate.to_string())]
}

fn stopped(path: &Path) -> Result<ExitCode> {
    println!("stopped early; partial checkpoint {} (continue with --resume)", path.display());
    Ok(ExitCode::SUCCESS)
}

fn train_as<T: Scalar>(p: &Prepared, a: &RunArgs) -> Result<ExitCode> {
    let model = p.run.model_for(&p.manifest)?;
    if !a.resume {
        for f in [run::PHASE1, run::PHASE1_PARTIAL, run::FEATURES, run::FINAL, run::PHASE2_PARTIAL] {
            let path = p.out.join(f);
            if path.exists() {
                fs::remove_file(&path).with_context(|| format!("removing stale {}", path.display()))?;
            }
        }
    }
    let data = p.manifest.load_split(&p.data_dir, Split::Train)?;
    if data.is_empty() {
        bail!("the training split of {} is empty", p.data_dir.display());
    }
    let mut log = Log::open(&p.out.join(run::LOG), a.resume, p.run.train.log_every)?;
    let resolved = Resolved { run: &p.run, model: &model }.to_string();
    print!("{resolved}");
    log.note(&resolved)?;
    let meta = meta(&p.manifest);
    let mut budget = Budget(a.stop_after);

    let phase1 = Phase1 {
        dir: &p.out,
        model: &model,
        train: &p.run.train,
        meta: &meta,
        resume: a.resume,
    };
    let art = match phase1.run::<T>(&data, &mut budget, &mut log)? {
        Outcome::Done(art) => art,
        Outcome::Stopped(path) => return stopped(&path),
    };
    let phase2 = Phase2 {
        dir: &p.out,
        model: &model,
        train: &p.run.train,
        meta: &meta,
        resume: a.resume,
    };
    match phase2.run(&data, &art, &mut budget, &mut log)? {
        Outcome::Done(_) => {
            println!("wrote {}", p.out.join(run::FINAL).display());
            Ok(ExitCode::SUCCESS)
        }
        Outcome::Stopped(path) => stopped(&path),
    }
}

fn generate(a: GenerateArgs, at: &dyn Fn(&Path) -> PathBuf) -> Result<ExitCode> {
    let ckpt = at(&a.checkpoint);
    match Precision::from_dtype(&stored_dtype(&ckpt)?)? {
        Precision::F32 => generate_as::<f32>(&a, &ckpt, at),
        Precision::F64 => generate_as::<f64>(&a, &ckpt, at),
    }
}

fn generate_as<T: Scalar>(a: &GenerateArgs, ckpt_path: &Path, at: &dyn Fn(&Path) -> PathBuf) -> Result<ExitCode> {
    let ckpt = run::load_exact::<T>(ckpt_path)?;
    let stored_rate = ckpt.meta.get("sample_rate").map(|s| s.parse::<u32>()).transpose()?;
    let model = InferenceModel::from_checkpoint(ckpt)?;
    // (id, image or the reason it could not be read)
    let mut inputs: Vec<(String, Result<ImageSample>)> = Vec::new();
    let rate = if let Some(img) = &a.image {
        let id = img.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
        inputs.push((id.clone(), read_netpbm(img, &id, 0).map_err(Into::into)));
        stored_rate.context("checkpoint does not record a sample rate")?
    } else {
        let dir = at(a.data.as_deref().expect("clap requires --data without --image"));
        let m = DatasetManifest::load(&dir)?;
        for r in m.split(Split::parse(&a.split)?) {
            let img = read_netpbm(&dir.join(&r.image), &r.id, r.label).map_err(Into::into);
            inputs.push((r.id.clone(), img));
        }
        if inputs.is_empty() {
            bail!("split `{}` of {} is empty", a.split, dir.display());
        }
        m.sample_rate
    };
    let out = at(&a.out);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let (total, mut failed) = (inputs.len(), 0);
    for (id, img) in inputs {
        let res = img.and_then(|img| {
            let wave = model.generate(std::slice::from_ref(&img))?.remove(0);
            let samples: Vec<f32> = wave.iter().map(|v| v.as_f64() as f32).collect();
            let (samples, rate) = match a.wav_rate {
                Some(to) if to != rate => (resample_linear(&samples, rate, to), to),
                _ => (samples, rate),
            };
            wav_write(&out.join(format!("{id}.wav")), &samples, rate)?;
            Ok(())
        });
        if let Err(e) = res {
            eprintln!("error: {id}: {e:#}");
            failed += 1;
        }
    }
    if failed > 0 {
        bail!("{failed} image(s) failed");
    }
    println!("wrote {total} wav file(s) to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

/// Linear interpolation onto a `to` Hz grid covering the same duration.
fn resample_linear(x: &[f32], from: u32, to: u32) -> Vec<f32> {
    if x.is_empty() || from == 0 || to == 0 {
        return Vec::new();
    }
    let n = ((x.len() as u64 * to as u64) / from as u64).max(1) as usize;
    let step = from as f64 / to as f64;
    (0..n)
        .map(|i| {
            let pos = i as f64 * step;
            let k = pos.floor() as usize;
            let frac = (pos - k as f64) as f32;
            match (x.get(k), x.get(k + 1)) {
                (Some(&a), Some(&b)) => a + frac * (b - a),
                (Some(&a), None) => a,
                _ => *x.last().expect("non-empty"),
            }
        })
        .collect()
}

fn evaluate(a: EvaluateArgs, at: &dyn Fn(&Path) -> PathBuf) -> Result<ExitCode> {
    let dir = at(&a.data);
    let m = DatasetManifest::load(&dir)?;
    let split = Split::parse(&a.split)?;
    let report = if let Some(c) = &a.checkpoint {
        let c = at(c);
        match Precision::from_dtype(&stored_dtype(&c)?)? {
            Precision::F32 => {
                let model = InferenceModel::from_checkpoint(run::load_exact::<f32>(&c)?)?;
                evaluate_set(&m, &dir, split, EvalSource::Model(&model))?
            }
            Precision::F64 => {
                let model = InferenceModel::from_checkpoint(run::load_exact::<f64>(&c)?)?;
                evaluate_set(&m, &dir, split, EvalSource::Model(&model))?
            }
        }
    } else if let Some(w) = &a.wavs {
        evaluate_set::<f32>(&m, &dir, split, EvalSource::Directory(&at(w)))?
    } else {
        evaluate_set::<f32>(&m, &dir, split, EvalSource::GroundTruth)?
    };
    finish_report(&report, a.report.map(|r| at(&r)).as_deref())
}

fn finish_report(report: &EvalReport, path: Option<&Path>) -> Result<ExitCode> {
    for (id, why) in &report.missing {
        eprintln!("warning: {id}: {why}");
    }
    if let Some(p) = path {
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(p, report.to_text()).with_context(|| format!("writing {}", p.display()))?;
    }
    if report.rows.is_empty() {
        bail!("nothing was evaluated");
    }
    println!("{}", report.summary_line());
    let coverage = report.coverage();
    if coverage < MIN_COVERAGE {
        bail!(
            "only {} of {} examples evaluated ({:.0}%, need {:.0}%)",
            report.rows.len(),
            report.rows.len() + report.missing.len(),
            100.0 * coverage,
            100.0 * MIN_COVERAGE
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn ablate(a: AblateArgs, at: &dyn Fn(&Path) -> PathBuf) -> Result<ExitCode> {
    let p = prepare(&a.run, None, at)?;
    match p.run.precision {
        Precision::F32 => ablate_as::<f32>(&p, &a),
        Precision::F64 => ablate_as::<f64>(&p, &a),
    }
}

fn ablate_as<T: Scalar>(p: &Prepared, a: &AblateArgs) -> Result<ExitCode> {
    let base = p.run.model_for(&p.manifest)?;
    let data = p.manifest.load_split(&p.data_dir, Split::Train)?;
    if data.is_empty() {
        bail!("the training split of {} is empty", p.data_dir.display());
    }
    if p.manifest.split_len(Split::Test) == 0 {
        bail!("the test split of {} is empty; nothing to score", p.data_dir.display());
    }
    let resume = a.run.resume;
    let mut log = Log::open(&p.out.join(run::LOG), resume, p.run.train.log_every)?;
    let resolved = Resolved { run: &p.run, model: &base }.to_string();
    print!("{resolved}");
    log.note(&resolved)?;
    let meta = meta(&p.manifest);
    let mut budget = Budget(a.run.stop_after);

    // the autoencoder does not depend on the ablation switches
    let phase1 = Phase1 {
        dir: &p.out,
        model: &base,
        train: &p.run.train,
        meta: &meta,
        resume,
    };
    let art = match phase1.run::<T>(&data, &mut budget, &mut log)? {
        Outcome::Done(art) => art,
        Outcome::Stopped(path) => return stopped(&path),
    };

    let mut variants: Vec<&str> = Ablation::NAMES.iter().copied().filter(|&n| n != "full").collect();
    if a.include_full {
        variants.push("full");
    }
    let mut summary = String::new();
    for name in variants {
        let mut model = base.clone();
        model.ablation = Ablation::named(name)?;
        let dir = p.out.join(name);
        fs::create_dir_all(&dir)?;
        log.note(&format!("variant {name}"))?;
        let phase2 = Phase2 {
            dir: &dir,
            model: &model,
            train: &p.run.train,
            meta: &meta,
            resume,
        };
        let ckpt = match phase2.run(&data, &art, &mut budget, &mut log)? {
            Outcome::Done(c) => c,
            Outcome::Stopped(path) => return stopped(&path),
        };
        let inference = InferenceModel::from_checkpoint(ckpt)?;
        let report = evaluate_set(&p.manifest, &p.data_dir, Split::Test, EvalSource::Model(&inference))?;
        fs::write(p.out.join(format!("{name}.report")), report.to_text())?;
        let line = format!("{name} {}", report.summary_line());
        println!("{line}");
        log.note(&line)?;
        summary.push_str(&line);
        summary.push('\n');
    }
    fs::write(p.out.join("summary.txt"), summary)?;
    Ok(ExitCode::SUCCESS)
}
