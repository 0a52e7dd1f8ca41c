//! Two-phase training with partial checkpoints and resume.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mtnet::dataset::{AudioClip, PairedExample};
use mtnet::model::{stored_dtype, Checkpoint, ModelConfig};
use mtnet::tensor::Scalar;
use mtnet::training::{AudioArtifact, AudioTrainer, JointTrainer, StepRecord, TrainConfig};

pub const PHASE1: &str = "phase1.ckpt";
pub const PHASE1_PARTIAL: &str = "phase1.partial.ckpt";
pub const FEATURES: &str = "phi_a.cache";
pub const FINAL: &str = "final.ckpt";
pub const PHASE2_PARTIAL: &str = "phase2.partial.ckpt";
pub const LOG: &str = "train.log";

/// Loads a checkpoint written with element type `T`. Refusing other dtypes
/// keeps resumed runs bit-exact.
pub fn load_exact<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let dtype = stored_dtype(path)?;
    if dtype != T::DTYPE {
        bail!("{} holds {dtype} weights but the run uses {}", path.display(), T::DTYPE);
    }
    Ok(Checkpoint::load(path)?)
}

/// Caps the number of optimizer steps one invocation may take.
pub struct Budget(pub Option<u64>);

impl Budget {
    fn take(&mut self) -> bool {
        match &mut self.0 {
            None => true,
            Some(0) => false,
            Some(n) => {
                *n -= 1;
                true
            }
        }
    }
}

pub struct Log {
    out: BufWriter<File>,
    every: u64,
}

impl Log {
    pub fn open(path: &Path, append: bool, every: u64) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .with_context(|| format!("opening log {}", path.display()))?;
        Ok(Self {
            out: BufWriter::new(file),
            every,
        })
    }

    /// Comment lines, e.g. the resolved configuration.
    pub fn note(&mut self, text: &str) -> Result<()> {
        for line in text.lines() {
            writeln!(self.out, "# {line}")?;
        }
        self.out.flush()?;
        Ok(())
    }

    fn record(&mut self, r: &StepRecord, last: u64) -> Result<()> {
        if r.step == 1 || r.step == last || (self.every > 0 && r.step.is_multiple_of(self.every)) {
            let line = r.to_line();
            println!("{line}");
            writeln!(self.out, "{line}")?;
            self.out.flush()?;
        }
        Ok(())
    }
}

fn save<T: Scalar>(mut ckpt: Checkpoint<T>, extra_meta: &[(String, String)], path: &Path) -> Result<()> {
    for (k, v) in extra_meta {
        ckpt.meta.insert(k.clone(), v.clone());
    }
    ckpt.save(path).with_context(|| format!("writing {}", path.display()))
}

fn remove_if_present(path: &Path) -> Result<()> {
    match fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => {
            Err(e).with_context(|| format!("removing {}", path.display()))
        }
        _ => Ok(()),
    }
}

/// What a phase ended with.
pub enum Outcome<A> {
    Done(A),
    /// Step budget ran out; a partial checkpoint was written.
    Stopped(PathBuf),
}

pub struct Phase1<'a> {
    pub dir: &'a Path,
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    pub meta: &'a [(String, String)],
    pub resume: bool,
}

impl Phase1<'_> {
    /// Trains (or resumes, or reloads) the audio autoencoder and caches its
    /// features next to it.
    pub fn run<T: Scalar>(&self, data: &[PairedExample], budget: &mut Budget, log: &mut Log) -> Result<Outcome<AudioArtifact<T>>> {
        let (done, cache, partial) = (self.dir.join(PHASE1), self.dir.join(FEATURES), self.dir.join(PHASE1_PARTIAL));
        if self.resume && done.exists() && cache.exists() {
            let art = AudioArtifact::from_parts(load_exact(&done)?, load_exact(&cache)?)?;
            if art.checkpoint.config.audio_length != self.model.audio_length {
                bail!("{} was trained for a different dataset", done.display());
            }
            log.note(&format!("phase 1 loaded from {}", done.display()))?;
            return Ok(Outcome::Done(art));
        }
        let clips: Vec<&AudioClip> = data.iter().map(|e| &e.audio).collect();
        let mut t = if self.resume && partial.exists() {
            let t = AudioTrainer::resume(load_exact(&partial)?, self.train.clone(), &clips)?;
            if t.config() != self.model {
                bail!("{} was written with a different model configuration", partial.display());
            }
            log.note(&format!("phase 1 resumed at step {}", t.steps_done()))?;
            t
        } else {
            AudioTrainer::new(self.model.clone(), self.train.clone(), &clips)?
        };
        let last = self.train.phase1_steps;
        let every = self.train.checkpoint_every;
        while t.steps_done() < last {
            if !budget.take() {
                save(t.checkpoint(false), self.meta, &partial)?;
                return Ok(Outcome::Stopped(partial));
            }
            let r = t.step()?;
            log.record(&r, last)?;
            if every > 0 && r.step.is_multiple_of(every) && r.step < last {
                save(t.checkpoint(false), self.meta, &partial)?;
            }
        }
        let mut art = t.finish()?;
        art.checkpoint.meta.extend(self.meta.iter().cloned());
        save(art.checkpoint.clone(), &[], &done)?;
        save(art.features_checkpoint(), self.meta, &cache)?;
        remove_if_present(&partial)?;
        Ok(Outcome::Done(art))
    }
}

pub struct Phase2<'a> {
    pub dir: &'a Path,
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    pub meta: &'a [(String, String)],
    pub resume: bool,
}

impl Phase2<'_> {
    /// Trains the joint model and writes `final.ckpt`.
    pub fn run<T: Scalar>(
        &self,
        data: &[PairedExample],
        art: &AudioArtifact<T>,
        budget: &mut Budget,
        log: &mut Log,
    ) -> Result<Outcome<Checkpoint<T>>> {
        let (done, partial) = (self.dir.join(FINAL), self.dir.join(PHASE2_PARTIAL));
        if self.resume && done.exists() {
            let ckpt: Checkpoint<T> = load_exact(&done)?;
            if ckpt.complete && ckpt.step >= self.train.phase2_steps {
                log.note(&format!("phase 2 already complete in {}", done.display()))?;
                return Ok(Outcome::Done(ckpt));
            }
        }
        let mut t = if self.resume && partial.exists() {
            let t = JointTrainer::resume(load_exact(&partial)?, self.train.clone(), data, art)?;
            if t.config() != self.model {
                bail!("{} was written with a different model configuration", partial.display());
            }
            log.note(&format!("phase 2 resumed at step {}", t.steps_done()))?;
            t
        } else {
            JointTrainer::new(self.model.clone(), self.train.clone(), data, art)?
        };
        let last = self.train.phase2_steps;
        let every = self.train.checkpoint_every;
        while t.steps_done() < last {
            if !budget.take() {
                save(t.checkpoint(false), self.meta, &partial)?;
                return Ok(Outcome::Stopped(partial));
            }
            let r = t.step()?;
            log.record(&r, last)?;
            if every > 0 && r.step.is_multiple_of(every) && r.step < last {
                save(t.checkpoint(false), self.meta, &partial)?;
            }
        }
        let mut ckpt = t.checkpoint(true);
        ckpt.meta.extend(self.meta.iter().cloned());
        save(ckpt.clone(), &[], &done)?;
        remove_if_present(&partial)?;
        Ok(Outcome::Done(ckpt))
    }
}
