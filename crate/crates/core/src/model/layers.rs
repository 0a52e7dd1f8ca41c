use super::config::{ModelConfig, AUTOENCODER_WIDTHS, FEATURE_DIM, GENERATOR_BLOCKS, GENERATOR_RESHAPE};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParameterStore, Scalar, Var};

/// Batch-norm behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, recorded for the running averages.
    Train,
    /// Stored running statistics.
    Infer,
}

/// Graph builder bound to one parameter store.
pub struct Forward<'a, T: Scalar> {
    pub graph: &'a mut Graph<T>,
    store: &'a ParameterStore<T>,
    mode: Mode,
    frozen: bool,
}

impl<'a, T: Scalar> Forward<'a, T> {
    /// Parameters receive gradients.
    pub fn new(graph: &'a mut Graph<T>, store: &'a ParameterStore<T>, mode: Mode) -> Self {
        Self {
            graph,
            store,
            mode,
            frozen: false,
        }
    }

    /// Parameters are constants.
    pub fn frozen(graph: &'a mut Graph<T>, store: &'a ParameterStore<T>, mode: Mode) -> Self {
        Self {
            graph,
            store,
            mode,
            frozen: true,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    fn p(&mut self, name: &str) -> Result<Var> {
        if self.frozen {
            self.graph.frozen_param(self.store, name)
        } else {
            self.graph.param(self.store, name)
        }
    }

    fn wb(&mut self, prefix: &str) -> Result<(Var, Var)> {
        Ok((self.p(&format!("{prefix}.w"))?, self.p(&format!("{prefix}.b"))?))
    }

    pub(crate) fn fc(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let (w, b) = self.wb(prefix)?;
        self.graph.fully_connected(x, w, b)
    }

    pub(crate) fn conv2d(&mut self, x: Var, prefix: &str, stride: usize, dilation: usize) -> Result<Var> {
        let (w, b) = self.wb(prefix)?;
        self.graph.conv2d(x, w, b, stride, dilation)
    }

    pub(crate) fn conv1d(&mut self, x: Var, prefix: &str, dilation: usize) -> Result<Var> {
        let (w, b) = self.wb(prefix)?;
        self.graph.conv1d(x, w, b, dilation)
    }

    pub(crate) fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        match self.mode {
            Mode::Train => self.graph.batch_norm_train(x, gamma, beta, prefix),
            Mode::Infer => {
                let mean = self.store.buffer(&format!("{prefix}.mean"))?;
                let var = self.store.buffer(&format!("{prefix}.var"))?;
                self.graph.batch_norm_infer(x, gamma, beta, mean.data(), var.data())
            }
        }
    }
}

/// Outputs of the image encoder.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    /// `[batch, h]` pre-softmax scores of the classifier head.
    pub logits: Var,
    /// `[batch, 1024]` image feature.
    pub feature: Var,
}

/// Outputs of the audio autoencoder.
#[derive(Debug, Clone, Copy)]
pub struct AutoencoderOutput {
    /// `[batch, 1024]` bottleneck feature.
    pub feature: Var,
    /// `[batch, L_s]` reconstruction.
    pub reconstruction: Var,
}

/// `relu(conv2(relu(bn(conv1(x)))) + x)`, both convolutions 3x3.
pub fn residual_block_2d<T: Scalar>(f: &mut Forward<T>, x: Var, prefix: &str, dilation: usize) -> Result<Var> {
    let h = f.conv2d(x, &format!("{prefix}.conv1"), 1, dilation)?;
    let h = f.batch_norm(h, &format!("{prefix}.bn"))?;
    let h = f.graph.relu(h);
    let h = f.conv2d(h, &format!("{prefix}.conv2"), 1, dilation)?;
    if f.graph.shape(h) != f.graph.shape(x) {
        return Err(Error::shape("residual_block_2d", f.graph.shape(h), f.graph.shape(x)));
    }
    let s = f.graph.add(h, x)?;
    Ok(f.graph.relu(s))
}

/// Five transition + residual stages, global average pooling and two FC
/// layers. `x` is `[batch, C, H, W]`, already normalized.
pub fn image_encoder_forward<T: Scalar>(f: &mut Forward<T>, cfg: &ModelConfig, x: Var) -> Result<EncoderOutput> {
    let s = cfg.image_shape;
    let xs = f.graph.shape(x);
    if xs.len() != 4 || xs[1..] != [s.channels, s.height, s.width] {
        return Err(Error::shape("image_encoder", xs, &[0, s.channels, s.height, s.width]));
    }
    let dilation = cfg.ablation.dilation();
    let mut h = x;
    for k in 0..cfg.encoder_widths.len() {
        h = f.conv2d(h, &format!("enc.trans{k}"), cfg.transition_strides[k], 1)?;
        h = f.batch_norm(h, &format!("enc.trans{k}.bn"))?;
        h = f.graph.relu(h);
        h = residual_block_2d(f, h, &format!("enc.res{k}"), dilation)?;
    }
    let pooled = f.graph.global_avg_pool(h)?;
    let h1 = f.fc(pooled, "enc.fc1")?;
    let h1 = f.graph.relu(h1);
    let feature = f.fc(h1, "enc.fc2")?;
    let logits = f.fc(feature, "head")?;
    Ok(EncoderOutput { logits, feature })
}

/// Six FC layers with tanh after each hidden layer; the bottleneck is the
/// third layer's output.
pub fn audio_autoencoder_forward<T: Scalar>(f: &mut Forward<T>, cfg: &ModelConfig, a: Var) -> Result<AutoencoderOutput> {
    let s = f.graph.shape(a);
    if s.len() != 2 || s[1] != cfg.audio_length {
        return Err(Error::shape("audio_autoencoder", s, &[0, cfg.audio_length]));
    }
    let layers = 2 * AUTOENCODER_WIDTHS.len();
    let mut h = a;
    let mut feature = None;
    for i in 1..=layers {
        h = f.fc(h, &format!("ae.fc{i}"))?;
        if i < layers {
            h = f.graph.tanh(h);
        }
        if i == AUTOENCODER_WIDTHS.len() {
            feature = Some(h);
        }
    }
    Ok(AutoencoderOutput {
        feature: feature.expect("bottleneck layer visited"),
        reconstruction: h,
    })
}

/// `fc2(tanh(fc1(phi_i)))`.
pub fn cross_modal_map<T: Scalar>(f: &mut Forward<T>, phi_i: Var) -> Result<Var> {
    let s = f.graph.shape(phi_i);
    if s.len() != 2 || s[1] != FEATURE_DIM {
        return Err(Error::shape("cross_modal_map", s, &[0, FEATURE_DIM]));
    }
    let h = f.fc(phi_i, "map.fc1")?;
    let h = f.graph.tanh(h);
    f.fc(h, "map.fc2")
}

/// `tanh(G(e) + e)` with the gated unit
/// `G(e) = tanh(conv_f(e)) * sigmoid(conv_g(e))`.
pub fn generator_block_1d<T: Scalar>(f: &mut Forward<T>, e: Var, prefix: &str, dilation: usize) -> Result<Var> {
    let filt = f.conv1d(e, &format!("{prefix}.filter"), dilation)?;
    let filt = f.graph.tanh(filt);
    let gate = f.conv1d(e, &format!("{prefix}.gate"), dilation)?;
    let gate = f.graph.sigmoid(gate);
    let g = f.graph.mul(filt, gate)?;
    let s = f.graph.add(g, e)?;
    Ok(f.graph.tanh(s))
}

/// Decodes `[batch, 1024]` cross-modal features into `[batch, L_s]`
/// waveforms.
pub fn audio_generator_forward<T: Scalar>(f: &mut Forward<T>, cfg: &ModelConfig, phi: Var) -> Result<Var> {
    let s = f.graph.shape(phi).to_vec();
    if s.len() != 2 || s[1] != FEATURE_DIM {
        return Err(Error::shape("audio_generator", &s, &[0, FEATURE_DIM]));
    }
    let batch = s[0];
    if cfg.ablation.autoencoder_generator {
        let h = f.fc(phi, "gen.dec1")?;
        let h = f.graph.tanh(h);
        let h = f.fc(h, "gen.dec2")?;
        let h = f.graph.tanh(h);
        return f.fc(h, "gen.dec3");
    }
    let (ch, len) = GENERATOR_RESHAPE;
    let dilation = cfg.ablation.dilation();
    let x = f.graph.reshape(phi, &[batch, ch, len])?;
    let mut e = f.conv1d(x, "gen.entry", 1)?;
    for n in 0..GENERATOR_BLOCKS {
        e = generator_block_1d(f, e, &format!("gen.block{n}"), dilation)?;
    }
    let out = f.conv1d(e, "gen.exit", 1)?;
    let flat = f.graph.reshape(out, &[batch, len])?;
    let h = f.fc(flat, "gen.fc1")?;
    let h = f.graph.tanh(h);
    f.fc(h, "gen.fc2")
}
