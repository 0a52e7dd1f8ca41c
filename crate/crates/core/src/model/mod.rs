//! The four MT-Net sub-networks built on the tensor graph: image encoder,
//! audio autoencoder, cross-modal mapper and 1-D audio generator.

mod checkpoint;
mod config;
mod layers;

pub use checkpoint::{stored_dtype, Checkpoint, CheckpointKind, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{
    Ablation, ImageShape, ModelConfig, AUTOENCODER_WIDTHS, ENCODER_WIDTHS, FEATURE_DIM, GENERATOR_BLOCKS,
    GENERATOR_HIDDEN, GENERATOR_RESHAPE,
};
pub use layers::{
    audio_autoencoder_forward, audio_generator_forward, cross_modal_map, generator_block_1d, image_encoder_forward,
    residual_block_2d, AutoencoderOutput, EncoderOutput, Forward, Mode,
};

pub(crate) use config::parse;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{normalize_image, ImageSample};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParameterStore, Scalar, Tensor};

/// Semantic role of a 1024-dim feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureRole {
    Image,
    Audio,
    CrossModal,
}

/// One 1024-dim feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector<T: Scalar = f32> {
    values: Vec<T>,
    role: FeatureRole,
}

impl<T: Scalar> FeatureVector<T> {
    pub fn new(values: Vec<T>, role: FeatureRole) -> Result<Self> {
        if values.len() != FEATURE_DIM {
            return Err(Error::shape("feature_vector", &[values.len()], &[FEATURE_DIM]));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Param("feature vector has non-finite entries".into()));
        }
        Ok(Self { values, role })
    }

    /// Splits a `[batch, 1024]` tensor into rows.
    pub fn from_batch(t: &Tensor<T>, role: FeatureRole) -> Result<Vec<Self>> {
        if t.shape().len() != 2 || t.shape()[1] != FEATURE_DIM {
            return Err(Error::shape("feature_batch", t.shape(), &[0, FEATURE_DIM]));
        }
        t.data().chunks(FEATURE_DIM).map(|r| Self::new(r.to_vec(), role)).collect()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn role(&self) -> FeatureRole {
        self.role
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    Normal,
    Zero,
    One,
}

/// Name, shape and initializer of one learnable tensor.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn spec(out: &mut Vec<ParamSpec>, name: String, shape: &[usize], init: Init) {
    out.push(ParamSpec {
        name,
        shape: shape.to_vec(),
        init,
    });
}

fn dense(out: &mut Vec<ParamSpec>, prefix: &str, n_in: usize, n_out: usize) {
    spec(out, format!("{prefix}.w"), &[n_in, n_out], Init::Normal);
    spec(out, format!("{prefix}.b"), &[n_out], Init::Zero);
}

fn conv(out: &mut Vec<ParamSpec>, prefix: &str, shape: &[usize]) {
    spec(out, format!("{prefix}.w"), shape, Init::Normal);
    spec(out, format!("{prefix}.b"), &[shape[0]], Init::Zero);
}

fn bn(out: &mut Vec<ParamSpec>, prefix: &str, channels: usize) {
    spec(out, format!("{prefix}.gamma"), &[channels], Init::One);
    spec(out, format!("{prefix}.beta"), &[channels], Init::Zero);
}

/// Parameters of the audio autoencoder `W^A`.
pub(crate) fn audio_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let [w1, w2, w3] = AUTOENCODER_WIDTHS;
    let widths = [cfg.audio_length, w1, w2, w3, w2, w1, cfg.audio_length];
    let mut out = Vec::new();
    for (i, pair) in widths.windows(2).enumerate() {
        dense(&mut out, &format!("ae.fc{}", i + 1), pair[0], pair[1]);
    }
    out
}

/// Parameters of the jointly trained networks `W^J`: encoder, head, mapper
/// and generator.
pub(crate) fn joint_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let mut c_in = cfg.image_shape.channels;
    for (k, &w) in cfg.encoder_widths.iter().enumerate() {
        conv(&mut out, &format!("enc.trans{k}"), &[w, c_in, 1, 1]);
        bn(&mut out, &format!("enc.trans{k}.bn"), w);
        conv(&mut out, &format!("enc.res{k}.conv1"), &[w, w, 3, 3]);
        bn(&mut out, &format!("enc.res{k}.bn"), w);
        conv(&mut out, &format!("enc.res{k}.conv2"), &[w, w, 3, 3]);
        c_in = w;
    }
    dense(&mut out, "enc.fc1", c_in, FEATURE_DIM);
    dense(&mut out, "enc.fc2", FEATURE_DIM, FEATURE_DIM);
    dense(&mut out, "head", FEATURE_DIM, cfg.num_classes);
    dense(&mut out, "map.fc1", FEATURE_DIM, FEATURE_DIM);
    dense(&mut out, "map.fc2", FEATURE_DIM, FEATURE_DIM);
    if cfg.ablation.autoencoder_generator {
        let [w1, w2, _] = AUTOENCODER_WIDTHS;
        dense(&mut out, "gen.dec1", FEATURE_DIM, w2);
        dense(&mut out, "gen.dec2", w2, w1);
        dense(&mut out, "gen.dec3", w1, cfg.audio_length);
    } else {
        let (rs_ch, rs_len) = GENERATOR_RESHAPE;
        let c = cfg.generator_channels;
        conv(&mut out, "gen.entry", &[c, rs_ch, 1]);
        for n in 0..GENERATOR_BLOCKS {
            conv(&mut out, &format!("gen.block{n}.filter"), &[c, c, 3]);
            conv(&mut out, &format!("gen.block{n}.gate"), &[c, c, 3]);
        }
        conv(&mut out, "gen.exit", &[1, c, 1]);
        dense(&mut out, "gen.fc1", rs_len, GENERATOR_HIDDEN);
        dense(&mut out, "gen.fc2", GENERATOR_HIDDEN, cfg.audio_length);
    }
    out
}

/// Batch-norm running statistics of the encoder, as `(name, channels)`.
pub(crate) fn joint_buffers(cfg: &ModelConfig) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for (k, &w) in cfg.encoder_widths.iter().enumerate() {
        out.push((format!("enc.trans{k}.bn"), w));
        out.push((format!("enc.res{k}.bn"), w));
    }
    out
}

fn build_store<T: Scalar>(specs: &[ParamSpec], std: f64, rng: &mut ChaCha8Rng) -> Result<ParameterStore<T>> {
    let mut store = ParameterStore::new();
    for s in specs {
        match s.init {
            Init::Normal => store.insert_truncated_normal(&s.name, &s.shape, std, rng)?,
            Init::Zero => store.insert_constant(&s.name, &s.shape, 0.0)?,
            Init::One => store.insert_constant(&s.name, &s.shape, 1.0)?,
        }
    }
    Ok(store)
}

/// Freshly initialized audio autoencoder parameters.
pub fn init_audio_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParameterStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    build_store(&audio_specs(cfg), cfg.init_std, &mut rng)
}

/// Freshly initialized encoder, head, mapper and generator parameters, with
/// batch-norm running statistics at mean 0 and variance 1.
pub fn init_joint_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParameterStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let mut store = build_store(&joint_specs(cfg), cfg.init_std, &mut rng)?;
    for (name, c) in joint_buffers(cfg) {
        store.insert_buffer(&format!("{name}.mean"), Tensor::zeros(&[c]))?;
        store.insert_buffer(&format!("{name}.var"), Tensor::full(&[c], T::one()))?;
    }
    Ok(store)
}

/// Checks that `store` holds exactly the tensors `specs` describe.
pub(crate) fn check_store<T: Scalar>(store: &ParameterStore<T>, specs: &[ParamSpec]) -> Result<()> {
    for s in specs {
        let t = store
            .get(&s.name)
            .map_err(|_| Error::Checkpoint(format!("missing parameter `{}`", s.name)))?;
        if t.shape() != s.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` has shape {:?}, expected {:?}",
                s.name,
                t.shape(),
                s.shape
            )));
        }
    }
    if store.len() != specs.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameters, found {}",
            specs.len(),
            store.len()
        )));
    }
    Ok(())
}

/// Inference path: image encoder, mapper and generator from a trained
/// joint checkpoint. The classifier head and the audio autoencoder are not
/// used.
#[derive(Debug, Clone)]
pub struct InferenceModel<T: Scalar = f32> {
    config: ModelConfig,
    params: ParameterStore<T>,
}

impl<T: Scalar> InferenceModel<T> {
    pub fn new(config: ModelConfig, params: ParameterStore<T>) -> Result<Self> {
        config.validate()?;
        check_store(&params, &joint_specs(&config))?;
        for (name, _) in joint_buffers(&config) {
            params.buffer(&format!("{name}.mean"))?;
            params.buffer(&format!("{name}.var"))?;
        }
        Ok(Self { config, params })
    }

    /// Loads a complete joint checkpoint. Partial or phase-1 checkpoints are
    /// rejected.
    pub fn from_checkpoint(ckpt: Checkpoint<T>) -> Result<Self> {
        if ckpt.kind != CheckpointKind::Joint {
            return Err(Error::Checkpoint(format!(
                "expected a joint checkpoint, found `{}`",
                ckpt.kind.as_str()
            )));
        }
        if !ckpt.complete {
            return Err(Error::Checkpoint("checkpoint is partial; training did not finish".into()));
        }
        Self::new(ckpt.config, ckpt.params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterStore<T> {
        &self.params
    }

    /// Waveforms of length `L_s` for already normalized `[batch, C, H, W]`
    /// images.
    pub fn generate_normalized(&self, images: Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.input(images);
        let mut f = Forward::frozen(&mut g, &self.params, Mode::Infer);
        let enc = image_encoder_forward(&mut f, &self.config, x)?;
        let phi = cross_modal_map(&mut f, enc.feature)?;
        let a = audio_generator_forward(&mut f, &self.config, phi)?;
        Ok(g.value(a).clone())
    }

    /// Normalizes each raw image and returns one waveform per image.
    pub fn generate(&self, images: &[ImageSample]) -> Result<Vec<Vec<T>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let s = self.config.image_shape;
        let mut data = Vec::with_capacity(images.len() * s.pixels());
        for img in images {
            if img.shape() != s {
                return Err(Error::Config(format!(
                    "image `{}` is {}x{}x{}, model expects {}x{}x{}",
                    img.id,
                    img.shape().height,
                    img.shape().width,
                    img.shape().channels,
                    s.height,
                    s.width,
                    s.channels
                )));
            }
            data.extend(normalize_image::<T>(img).into_data());
        }
        let x = Tensor::new(vec![images.len(), s.channels, s.height, s.width], data)?;
        let out = self.generate_normalized(x)?;
        Ok(out.data().chunks(self.config.audio_length).map(<[T]>::to_vec).collect())
    }
}
