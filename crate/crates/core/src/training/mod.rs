//! Two-phase schedule: the audio autoencoder is trained alone, its
//! bottleneck features are cached, and then the image encoder, mapper and
//! generator are trained jointly against those frozen features.

mod config;

pub use config::{DecayScale, TrainConfig};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{normalize_image, AudioClip, PairedExample};
use crate::error::{Error, Result};
use crate::model::{
    audio_autoencoder_forward, audio_generator_forward, audio_specs, check_store, cross_modal_map,
    image_encoder_forward, init_audio_params, init_joint_params, joint_specs, Checkpoint, CheckpointKind, Forward,
    InferenceModel, Mode, ModelConfig, FEATURE_DIM,
};
use crate::tensor::{Graph, ParameterStore, RmsProp, Scalar, Tensor, Var};

/// Running-statistics momentum of batch norm.
pub const BN_MOMENTUM: f64 = 0.9;
/// Name of the cached feature table inside a features checkpoint.
pub const FEATURES_TABLE: &str = "phi_a";

/// Which of the two phases a record or checkpoint belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Audio,
    Joint,
}

impl Phase {
    fn stream(&self) -> u64 {
        match self {
            Phase::Audio => 1 << 32,
            Phase::Joint => 2 << 32,
        }
    }
}

/// Indices of the examples in minibatch `step`. Examples are consumed
/// through a sequence of per-epoch permutations drawn from
/// `(seed, phase, epoch)`, so the batch depends on nothing but its step.
pub fn batch_indices(seed: u64, phase: Phase, step: u64, batch: usize, n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for p in step * batch as u64..(step + 1) * batch as u64 {
        let epoch = p / n as u64;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(phase.stream() + epoch);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().expect("filled above").1[(p % n as u64) as usize]);
    }
    out
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub phase: Phase,
    /// Steps completed after this update.
    pub step: u64,
    pub reconstruction: f64,
    pub perceptual: f64,
    pub representation: f64,
    pub generation: f64,
    /// Sum of squares of the decayed parameters before the update.
    pub weight_sq: f64,
    pub total: f64,
    pub wall_ms: f64,
}

impl StepRecord {
    pub fn to_line(&self) -> String {
        match self.phase {
            Phase::Audio => format!(
                "phase=1 step={} rec={:.6e} wsq={:.6e} total={:.6e} wall_ms={:.1}",
                self.step, self.reconstruction, self.weight_sq, self.total, self.wall_ms
            ),
            Phase::Joint => format!(
                "phase=2 step={} per={:.6e} rep={:.6e} gen={:.6e} wsq={:.6e} total={:.6e} wall_ms={:.1}",
                self.step,
                self.perceptual,
                self.representation,
                self.generation,
                self.weight_sq,
                self.total,
                self.wall_ms
            ),
        }
    }
}

fn decay_coefficient<T: Scalar>(coef: f64, scale: DecayScale, store: &ParameterStore<T>) -> f64 {
    match scale {
        DecayScale::Sum => coef,
        DecayScale::Mean => {
            let n: usize = store.iter().filter(|(_, e)| e.decay).map(|(_, e)| e.tensor.numel()).sum();
            coef / n.max(1) as f64
        }
    }
}

fn rows<T: Scalar>(table: &[T], width: usize, idx: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(idx.len() * width);
    for &i in idx {
        out.extend_from_slice(&table[i * width..(i + 1) * width]);
    }
    out
}

fn optimizer(cfg: &TrainConfig) -> Result<RmsProp> {
    RmsProp::new(cfg.lr, cfg.decay_rate, cfg.momentum)
}

fn audio_table<T: Scalar>(clips: &[&AudioClip], len: usize) -> Result<Vec<T>> {
    if clips.is_empty() {
        return Err(Error::Training("the audio set is empty".into()));
    }
    let mut out = Vec::with_capacity(clips.len() * len);
    for (i, c) in clips.iter().enumerate() {
        if c.padded_len() != len {
            return Err(Error::Training(format!(
                "clip {i} has padded length {}, model expects {len}",
                c.padded_len()
            )));
        }
        out.extend(c.samples().iter().map(|&v| T::lit(v as f64)));
    }
    Ok(out)
}

fn check_resume(ckpt: &Checkpoint<impl Scalar>, kind: CheckpointKind, cfg: &TrainConfig) -> Result<()> {
    if ckpt.kind != kind {
        return Err(Error::Checkpoint(format!(
            "cannot resume {} training from a `{}` checkpoint",
            kind.as_str(),
            ckpt.kind.as_str()
        )));
    }
    if ckpt.seed != cfg.seed {
        return Err(Error::Checkpoint(format!(
            "checkpoint was trained with seed {}, config says {}",
            ckpt.seed, cfg.seed
        )));
    }
    Ok(())
}

/// Phase 1: the audio autoencoder trained on reconstruction alone.
pub struct AudioTrainer<T: Scalar> {
    model: ModelConfig,
    train: TrainConfig,
    params: ParameterStore<T>,
    step: u64,
    audio: Vec<T>,
    n: usize,
}

impl<T: Scalar> AudioTrainer<T> {
    pub fn new(model: ModelConfig, train: TrainConfig, clips: &[&AudioClip]) -> Result<Self> {
        train.validate()?;
        let params = init_audio_params(&model, train.seed)?;
        Self::with_params(model, train, clips, params, 0)
    }

    /// Continues from a partial phase-1 checkpoint.
    pub fn resume(ckpt: Checkpoint<T>, train: TrainConfig, clips: &[&AudioClip]) -> Result<Self> {
        train.validate()?;
        check_resume(&ckpt, CheckpointKind::Audio, &train)?;
        check_store(&ckpt.params, &audio_specs(&ckpt.config))?;
        Self::with_params(ckpt.config, train, clips, ckpt.params, ckpt.step)
    }

    fn with_params(
        model: ModelConfig,
        train: TrainConfig,
        clips: &[&AudioClip],
        params: ParameterStore<T>,
        step: u64,
    ) -> Result<Self> {
        let audio = audio_table(clips, model.audio_length)?;
        Ok(Self {
            n: clips.len(),
            model,
            train,
            params,
            step,
            audio,
        })
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &ParameterStore<T> {
        &self.params
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model
    }

    /// One RMSProp update on the reconstruction objective.
    pub fn step(&mut self) -> Result<StepRecord> {
        let t0 = Instant::now();
        let len = self.model.audio_length;
        let idx = batch_indices(self.train.seed, Phase::Audio, self.step, self.train.batch_size, self.n);
        let target = Tensor::new(vec![idx.len(), len], rows(&self.audio, len, &idx))?;
        let mut g = Graph::new();
        let x = g.input(target.clone());
        let out = audio_autoencoder_forward(&mut Forward::new(&mut g, &self.params, Mode::Train), &self.model, x)?;
        let rec = g.half_mse(out.reconstruction, &target)?;
        g.backward(rec)?;
        let reconstruction = g.value(rec).item().as_f64();
        let grads = g.into_param_grads();
        let coef = decay_coefficient(self.train.weight_decay(), self.train.decay_scale, &self.params);
        let weight_sq = optimizer(&self.train)?.step_with_decay(&mut self.params, &grads, coef)?;
        self.step += 1;
        let total = reconstruction + coef * weight_sq;
        if !total.is_finite() {
            return Err(Error::Training(format!("phase 1 loss diverged at step {}", self.step)));
        }
        Ok(StepRecord {
            phase: Phase::Audio,
            step: self.step,
            reconstruction,
            perceptual: 0.0,
            representation: 0.0,
            generation: 0.0,
            weight_sq,
            total,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Bottleneck features and reconstructions for every clip, in chunks.
    fn forward_all(&self) -> Result<(Vec<T>, Vec<T>)> {
        let len = self.model.audio_length;
        let (mut feats, mut recs) = (Vec::new(), Vec::new());
        let all: Vec<usize> = (0..self.n).collect();
        for chunk in all.chunks(32) {
            let x = Tensor::new(vec![chunk.len(), len], rows(&self.audio, len, chunk))?;
            let mut g = Graph::new();
            let xv = g.input(x);
            let out =
                audio_autoencoder_forward(&mut Forward::frozen(&mut g, &self.params, Mode::Infer), &self.model, xv)?;
            feats.extend_from_slice(g.value(out.feature).data());
            recs.extend_from_slice(g.value(out.reconstruction).data());
        }
        Ok((feats, recs))
    }

    /// Reconstruction SNR in dB of every clip over its padded length.
    pub fn reconstruction_snr_db(&self) -> Result<Vec<f64>> {
        let len = self.model.audio_length;
        let (_, recs) = self.forward_all()?;
        Ok(self
            .audio
            .chunks(len)
            .zip(recs.chunks(len))
            .map(|(a, r)| snr_db(a, r))
            .collect())
    }

    pub fn checkpoint(&self, complete: bool) -> Checkpoint<T> {
        let mut c = Checkpoint::new(CheckpointKind::Audio, self.model.clone(), self.params.clone());
        c.complete = complete;
        c.seed = self.train.seed;
        c.step = self.step;
        c.meta.extend(self.train.to_pairs());
        c
    }

    /// Freezes the autoencoder and emits the feature table `[N, 1024]`.
    pub fn finish(self) -> Result<AudioArtifact<T>> {
        let (feats, _) = self.forward_all()?;
        let features = Tensor::new(vec![self.n, FEATURE_DIM], feats)?;
        Ok(AudioArtifact {
            checkpoint: self.checkpoint(true),
            features,
        })
    }
}

/// `10 log10(sum a^2 / sum (a - r)^2)`.
pub fn snr_db<T: Scalar>(a: &[T], r: &[T]) -> f64 {
    let sig: f64 = a.iter().map(|v| v.as_f64().powi(2)).sum();
    let err: f64 = a.iter().zip(r).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum();
    10.0 * (sig / err.max(f64::MIN_POSITIVE)).log10()
}

/// Output of phase 1: the frozen autoencoder and its cached features.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioArtifact<T: Scalar> {
    pub checkpoint: Checkpoint<T>,
    /// `[N, 1024]`, row `i` belonging to training clip `i`.
    pub features: Tensor<T>,
}

impl<T: Scalar> AudioArtifact<T> {
    /// Rebuilds the artifact from a complete phase-1 checkpoint and its
    /// feature cache.
    pub fn from_parts(checkpoint: Checkpoint<T>, features: Checkpoint<T>) -> Result<Self> {
        if checkpoint.kind != CheckpointKind::Audio || !checkpoint.complete {
            return Err(Error::Training(
                "joint training needs a complete phase-1 checkpoint".into(),
            ));
        }
        check_store(&checkpoint.params, &audio_specs(&checkpoint.config))?;
        let table = features.extra(FEATURES_TABLE)?.clone();
        if table.shape().len() != 2 || table.shape()[1] != FEATURE_DIM {
            return Err(Error::shape("feature cache", table.shape(), &[0, FEATURE_DIM]));
        }
        Ok(Self {
            checkpoint,
            features: table,
        })
    }

    /// The feature cache as a standalone container.
    pub fn features_checkpoint(&self) -> Checkpoint<T> {
        let mut c = Checkpoint::new(CheckpointKind::Features, self.checkpoint.config.clone(), ParameterStore::new());
        c.complete = true;
        c.seed = self.checkpoint.seed;
        c.step = self.checkpoint.step;
        c.extras.insert(FEATURES_TABLE.into(), self.features.clone());
        c
    }

    pub fn num_examples(&self) -> usize {
        self.features.shape()[0]
    }
}

/// Runs phase 1 for `train.phase1_steps`, calling `log` after every step.
pub fn train_phase1<T: Scalar>(
    model: ModelConfig,
    train: TrainConfig,
    clips: &[&AudioClip],
    mut log: impl FnMut(&StepRecord),
) -> Result<AudioArtifact<T>> {
    let steps = train.phase1_steps;
    let mut t = AudioTrainer::new(model, train, clips)?;
    while t.steps_done() < steps {
        let r = t.step()?;
        log(&r);
    }
    t.finish()
}

/// Phase 2: image encoder, head, mapper and generator trained on the
/// weighted joint objective, supervised by the cached audio features.
pub struct JointTrainer<T: Scalar> {
    model: ModelConfig,
    train: TrainConfig,
    params: ParameterStore<T>,
    step: u64,
    images: Vec<T>,
    labels: Vec<usize>,
    audio: Vec<T>,
    features: Vec<T>,
    n: usize,
}

impl<T: Scalar> JointTrainer<T> {
    /// `data[i]` must be the example whose clip produced feature row `i`.
    pub fn new(model: ModelConfig, train: TrainConfig, data: &[PairedExample], phase1: &AudioArtifact<T>) -> Result<Self> {
        train.validate()?;
        let params = init_joint_params(&model, train.seed)?;
        Self::with_params(model, train, data, phase1, params, 0)
    }

    pub fn resume(
        ckpt: Checkpoint<T>,
        train: TrainConfig,
        data: &[PairedExample],
        phase1: &AudioArtifact<T>,
    ) -> Result<Self> {
        train.validate()?;
        check_resume(&ckpt, CheckpointKind::Joint, &train)?;
        check_store(&ckpt.params, &joint_specs(&ckpt.config))?;
        Self::with_params(ckpt.config, train, data, phase1, ckpt.params, ckpt.step)
    }

    fn with_params(
        model: ModelConfig,
        train: TrainConfig,
        data: &[PairedExample],
        phase1: &AudioArtifact<T>,
        params: ParameterStore<T>,
        step: u64,
    ) -> Result<Self> {
        model.validate()?;
        if !phase1.checkpoint.complete {
            return Err(Error::Training("phase 1 has not completed".into()));
        }
        if phase1.checkpoint.config.audio_length != model.audio_length {
            return Err(Error::Training(format!(
                "phase 1 used L_s={}, joint model uses {}",
                phase1.checkpoint.config.audio_length, model.audio_length
            )));
        }
        let n = data.len();
        if n == 0 {
            return Err(Error::Training("the paired set is empty".into()));
        }
        if phase1.num_examples() != n {
            return Err(Error::Training(format!(
                "pairing mismatch: {n} image/audio pairs but {} cached audio features",
                phase1.num_examples()
            )));
        }
        let shape = model.image_shape;
        let mut images = Vec::with_capacity(n * shape.pixels());
        let mut labels = Vec::with_capacity(n);
        for ex in data {
            if ex.image.shape() != shape {
                return Err(Error::Training(format!("image `{}` does not match the model shape", ex.id)));
            }
            if ex.image.label >= model.num_classes {
                return Err(Error::Training(format!(
                    "label {} of `{}` exceeds {} classes",
                    ex.image.label, ex.id, model.num_classes
                )));
            }
            images.extend(normalize_image::<T>(&ex.image).into_data());
            labels.push(ex.image.label);
        }
        let clips: Vec<&AudioClip> = data.iter().map(|e| &e.audio).collect();
        let audio = audio_table(&clips, model.audio_length)?;
        Ok(Self {
            model,
            train,
            params,
            step,
            images,
            labels,
            audio,
            features: phase1.features.data().to_vec(),
            n,
        })
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &ParameterStore<T> {
        &self.params
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model
    }

    fn image_batch(&self, idx: &[usize]) -> Result<Tensor<T>> {
        let s = self.model.image_shape;
        Tensor::new(
            vec![idx.len(), s.channels, s.height, s.width],
            rows(&self.images, s.pixels(), idx),
        )
    }

    /// One RMSProp update on the joint objective.
    pub fn step(&mut self) -> Result<StepRecord> {
        let t0 = Instant::now();
        let (h, len) = (self.model.num_classes, self.model.audio_length);
        let idx = batch_indices(self.train.seed, Phase::Joint, self.step, self.train.batch_size, self.n);
        let b = idx.len();
        let onehot = Tensor::from_fn(&[b, h], |i| {
            if self.labels[idx[i / h]] == i % h {
                T::one()
            } else {
                T::zero()
            }
        });
        let target = Tensor::new(vec![b, len], rows(&self.audio, len, &idx))?;
        let phi_a = Tensor::new(vec![b, FEATURE_DIM], rows(&self.features, FEATURE_DIM, &idx))?;

        let mut g = Graph::new();
        let x = g.input(self.image_batch(&idx)?);
        let phi_a = g.input(phi_a);
        let mut f = Forward::new(&mut g, &self.params, Mode::Train);
        let enc = image_encoder_forward(&mut f, &self.model, x)?;
        let phi = cross_modal_map(&mut f, enc.feature)?;
        let a_gen = audio_generator_forward(&mut f, &self.model, phi)?;
        let w = self.effective_weights();
        // switched-off terms stay out of the graph; a zero-weight cosine
        // distance would still reject a degenerate representation
        let per = if w.eta1 > 0.0 {
            let probs = g.softmax(enc.logits);
            Some(g.cross_entropy(probs, &onehot)?)
        } else {
            None
        };
        let rep = if w.eta2 > 0.0 { Some(g.cosine_distance(phi_a, phi)?) } else { None };
        let gen = g.smooth_l1_mean(a_gen, &target)?;
        let terms: Vec<(Var, f64)> = [(per, w.eta1), (rep, w.eta2), (Some(gen), w.eta3)]
            .into_iter()
            .filter_map(|(v, c)| v.map(|v| (v, c)))
            .collect();
        let data_loss = g.weighted_sum(&terms)?;
        g.backward(data_loss)?;
        let v = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item().as_f64());
        let (perceptual, representation, generation) = (v(per), v(rep), v(Some(gen)));
        let data_total = v(Some(data_loss));
        let stats = g.take_batch_stats();
        let grads = g.into_param_grads();
        let coef = decay_coefficient(w.eta4, self.train.decay_scale, &self.params);
        let weight_sq = optimizer(&self.train)?.step_with_decay(&mut self.params, &grads, coef)?;
        let m = T::lit(BN_MOMENTUM);
        for s in stats {
            self.params.update_buffer(&format!("{}.mean", s.label), &s.mean, m)?;
            self.params.update_buffer(&format!("{}.var", s.label), &s.var, m)?;
        }
        self.step += 1;
        let total = data_total + coef * weight_sq;
        if !total.is_finite() {
            return Err(Error::Training(format!("phase 2 loss diverged at step {}", self.step)));
        }
        Ok(StepRecord {
            phase: Phase::Joint,
            step: self.step,
            reconstruction: 0.0,
            perceptual,
            representation,
            generation,
            weight_sq,
            total,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Loss weights after applying the ablation switches.
    pub fn effective_weights(&self) -> crate::losses::LossWeights {
        let mut w = self.train.loss_weights;
        if !self.model.ablation.use_per_loss {
            w.eta1 = 0.0;
        }
        if !self.model.ablation.use_rep_loss {
            w.eta2 = 0.0;
        }
        w
    }

    /// Inference-mode waveforms for every training image, `[N][L_s]`.
    pub fn generate_training_set(&self) -> Result<Vec<Vec<T>>> {
        let model = InferenceModel::new(self.model.clone(), self.params.clone())?;
        let all: Vec<usize> = (0..self.n).collect();
        let mut out = Vec::with_capacity(self.n);
        for chunk in all.chunks(32) {
            let wav = model.generate_normalized(self.image_batch(chunk)?)?;
            out.extend(wav.data().chunks(self.model.audio_length).map(<[T]>::to_vec));
        }
        Ok(out)
    }

    /// Reference waveforms in training order, `[N][L_s]`.
    pub fn targets(&self) -> Vec<Vec<T>> {
        self.audio.chunks(self.model.audio_length).map(<[T]>::to_vec).collect()
    }

    pub fn checkpoint(&self, complete: bool) -> Checkpoint<T> {
        let mut c = Checkpoint::new(CheckpointKind::Joint, self.model.clone(), self.params.clone());
        c.complete = complete;
        c.seed = self.train.seed;
        c.step = self.step;
        c.meta.extend(self.train.to_pairs());
        c
    }

    pub fn finish(self) -> Result<InferenceModel<T>> {
        InferenceModel::new(self.model, self.params)
    }
}

/// Runs phase 2 for `train.phase2_steps`, calling `log` after every step.
pub fn train_phase2<T: Scalar>(
    model: ModelConfig,
    train: TrainConfig,
    data: &[PairedExample],
    phase1: &AudioArtifact<T>,
    mut log: impl FnMut(&StepRecord),
) -> Result<InferenceModel<T>> {
    let steps = train.phase2_steps;
    let mut t = JointTrainer::new(model, train, data, phase1)?;
    while t.steps_done() < steps {
        let r = t.step()?;
        log(&r);
    }
    t.finish()
}
