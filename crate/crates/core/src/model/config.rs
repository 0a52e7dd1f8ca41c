use crate::error::{Error, Result};

/// Length of every semantic feature vector (image, audio, cross-modal).
pub const FEATURE_DIM: usize = 1024;
/// `(channels, length)` the cross-modal vector is reshaped to before the
/// 1-D generator blocks.
pub const GENERATOR_RESHAPE: (usize, usize) = (8, 128);
/// Number of gated 1-D residual blocks in the generator.
pub const GENERATOR_BLOCKS: usize = 3;
/// Hidden width of the generator's first fully connected layer.
pub const GENERATOR_HIDDEN: usize = 4096;
/// Autoencoder layer widths between the waveform and the bottleneck.
pub const AUTOENCODER_WIDTHS: [usize; 3] = [4096, 2048, FEATURE_DIM];
/// Channel widths of the five transition/residual stages.
pub const ENCODER_WIDTHS: [usize; 5] = [32, 128, 256, 512, 1024];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn pixels(&self) -> usize {
        self.height * self.width * self.channels
    }
}

/// Switches reproducing the ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablation {
    pub use_per_loss: bool,
    pub use_rep_loss: bool,
    /// Dilation 2 in every 3-tap kernel when set, dilation 1 otherwise.
    pub dilated_kernels: bool,
    /// Replace the gated 1-D generator by an autoencoder-style FC decoder.
    pub autoencoder_generator: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_per_loss: true,
            use_rep_loss: true,
            dilated_kernels: true,
            autoencoder_generator: false,
        }
    }
}

impl Ablation {
    /// Named variants: `full`, `gen-only`, `gen-rep`, `no-holes`,
    /// `autoencoder-gen`.
    pub fn named(name: &str) -> Result<Self> {
        let full = Self::default();
        Ok(match name {
            "full" => full,
            "gen-only" => Self {
                use_per_loss: false,
                use_rep_loss: false,
                ..full
            },
            "gen-rep" => Self {
                use_per_loss: false,
                ..full
            },
            "no-holes" => Self {
                dilated_kernels: false,
                ..full
            },
            "autoencoder-gen" => Self {
                autoencoder_generator: true,
                ..full
            },
            other => return Err(Error::Config(format!("unknown ablation `{other}`"))),
        })
    }

    pub const NAMES: [&'static str; 5] = ["gen-only", "gen-rep", "no-holes", "autoencoder-gen", "full"];

    pub fn dilation(&self) -> usize {
        if self.dilated_kernels {
            2
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Number of classes `h` of the classifier head.
    pub num_classes: usize,
    /// Padded waveform length `L_s` in samples.
    pub audio_length: usize,
    pub image_shape: ImageShape,
    pub ablation: Ablation,
    pub generator_channels: usize,
    pub transition_strides: [usize; 5],
    pub encoder_widths: [usize; 5],
    /// Standard deviation of the truncated-normal weight init.
    pub init_std: f64,
}

impl ModelConfig {
    /// Full-width configuration.
    pub fn new(num_classes: usize, audio_length: usize, image_shape: ImageShape) -> Self {
        Self {
            num_classes,
            audio_length,
            image_shape,
            ablation: Ablation::default(),
            generator_channels: 64,
            transition_strides: [1, 2, 2, 2, 2],
            encoder_widths: ENCODER_WIDTHS,
            init_std: 0.05,
        }
    }

    /// Narrow encoder for single-core desk runs; every other size is unchanged.
    pub fn desk(num_classes: usize, audio_length: usize, image_shape: ImageShape) -> Self {
        Self {
            encoder_widths: [8, 16, 32, 64, 128],
            ..Self::new(num_classes, audio_length, image_shape)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.audio_length == 0 {
            return Err(Error::Config("audio_length must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be at least 2, got {}", self.num_classes)));
        }
        if self.image_shape.pixels() == 0 {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        if self.transition_strides.iter().any(|&s| s == 0) || self.encoder_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("strides and encoder widths must be positive".into()));
        }
        if self.generator_channels == 0 || !(self.init_std > 0.0) {
            return Err(Error::Config("generator_channels and init_std must be positive".into()));
        }
        Ok(())
    }

    /// Spatial size after each transition layer.
    pub fn stage_sizes(&self) -> [(usize, usize); 5] {
        let (mut h, mut w) = (self.image_shape.height, self.image_shape.width);
        let mut out = [(0, 0); 5];
        for (k, &s) in self.transition_strides.iter().enumerate() {
            h = (h - 1) / s + 1;
            w = (w - 1) / s + 1;
            out[k] = (h, w);
        }
        out
    }

    /// Flat `key=value` pairs, in a stable order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let join = |xs: &[usize]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("num_classes".into(), self.num_classes.to_string()),
            ("audio_length".into(), self.audio_length.to_string()),
            ("image_height".into(), self.image_shape.height.to_string()),
            ("image_width".into(), self.image_shape.width.to_string()),
            ("image_channels".into(), self.image_shape.channels.to_string()),
            ("use_per_loss".into(), self.ablation.use_per_loss.to_string()),
            ("use_rep_loss".into(), self.ablation.use_rep_loss.to_string()),
            ("dilated_kernels".into(), self.ablation.dilated_kernels.to_string()),
            ("autoencoder_generator".into(), self.ablation.autoencoder_generator.to_string()),
            ("generator_channels".into(), self.generator_channels.to_string()),
            ("transition_strides".into(), join(&self.transition_strides)),
            ("encoder_widths".into(), join(&self.encoder_widths)),
            ("init_std".into(), self.init_std.to_string()),
        ]
    }

    /// Inverse of [`Self::to_pairs`]; unknown keys are rejected.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::new(
            2,
            1,
            ImageShape {
                height: 1,
                width: 1,
                channels: 1,
            },
        );
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one field from its `key=value` form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "num_classes" => self.num_classes = parse(key, value)?,
            "audio_length" => self.audio_length = parse(key, value)?,
            "image_height" => self.image_shape.height = parse(key, value)?,
            "image_width" => self.image_shape.width = parse(key, value)?,
            "image_channels" => self.image_shape.channels = parse(key, value)?,
            "use_per_loss" => self.ablation.use_per_loss = parse(key, value)?,
            "use_rep_loss" => self.ablation.use_rep_loss = parse(key, value)?,
            "dilated_kernels" => self.ablation.dilated_kernels = parse(key, value)?,
            "autoencoder_generator" => self.ablation.autoencoder_generator = parse(key, value)?,
            "generator_channels" => self.generator_channels = parse(key, value)?,
            "transition_strides" => self.transition_strides = parse_five(key, value)?,
            "encoder_widths" => self.encoder_widths = parse_five(key, value)?,
            "init_std" => self.init_std = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown model key `{key}`"))),
        }
        Ok(())
    }
}

pub(crate) fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_five(key: &str, value: &str) -> Result<[usize; 5]> {
    let parts: Vec<usize> = value.split(',').map(|p| parse(key, p)).collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|v: Vec<usize>| Error::Config(format!("`{key}` needs exactly 5 values, got {}", v.len())))
}
