//! Deterministic synthetic paired image/word-audio dataset, image
//! normalization and file I/O.

mod io;
mod synth;

pub use io::{read_netpbm, wav_read, wav_write, write_netpbm};
pub use synth::{render_class_image, synthesize_word_audio, WordSpec};

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{parse, ImageShape};
use crate::tensor::{Scalar, Tensor};

/// One image with its class label. Pixels are stored row-major as
/// `[height][width][channel]`, each in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub label: usize,
    shape: ImageShape,
    pixels: Vec<f32>,
}

impl ImageSample {
    pub fn new(id: &str, label: usize, shape: ImageShape, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != shape.pixels() || shape.pixels() == 0 {
            return Err(Error::shape(
                "image",
                &[shape.height, shape.width, shape.channels],
                &[pixels.len()],
            ));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::Dataset(format!("image `{id}` has non-finite pixels")));
        }
        Ok(Self {
            id: id.to_string(),
            label,
            shape,
            pixels,
        })
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }
}

/// `(I - mean) / max(std, 1/sqrt(P))` over all `P` pixels, with the
/// population standard deviation, returned channel-first as `[C, H, W]`.
pub fn normalize_image<T: Scalar>(img: &ImageSample) -> Tensor<T> {
    let p = img.pixels.len() as f64;
    let mean = img.pixels.iter().map(|&v| v as f64).sum::<f64>() / p;
    let var = img.pixels.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / p;
    let denom = var.sqrt().max(1.0 / p.sqrt());
    let ImageShape {
        height: h,
        width: w,
        channels: c,
    } = img.shape;
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, rest) = (i / (h * w), i % (h * w));
        T::lit((img.pixels[rest * c + ch] as f64 - mean) / denom)
    })
}

/// Mono waveform zero-padded to a fixed length. Samples past
/// `original_len` are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    pub sample_rate: u32,
    original_len: usize,
}

impl AudioClip {
    /// Unpadded clip.
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        let original_len = samples.len();
        Self {
            samples,
            sample_rate,
            original_len,
        }
    }

    /// Zero-pads to `len` samples.
    pub fn padded(mut self, len: usize) -> Result<Self> {
        if len < self.original_len {
            return Err(Error::Dataset(format!(
                "cannot pad a {}-sample clip to {len}",
                self.original_len
            )));
        }
        self.samples.truncate(self.original_len);
        self.samples.resize(len, 0.0);
        Ok(self)
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn original_len(&self) -> usize {
        self.original_len
    }

    pub fn padded_len(&self) -> usize {
        self.samples.len()
    }

    /// The unpadded prefix.
    pub fn trimmed(&self) -> &[f32] {
        &self.samples[..self.original_len]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Dataset(format!("unknown split `{s}`"))),
        }
    }
}

/// Inputs to [`build_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub name: String,
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_shape: ImageShape,
    pub word: WordSpec,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(num_classes: usize, train_per_class: usize, test_per_class: usize, seed: u64) -> Self {
        Self {
            name: "synth".into(),
            num_classes,
            train_per_class,
            test_per_class,
            image_shape: ImageShape {
                height: 16,
                width: 16,
                channels: 1,
            },
            word: WordSpec::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Dataset("need at least one class".into()));
        }
        if self.train_per_class + self.test_per_class == 0 {
            return Err(Error::Dataset("need at least one example per class".into()));
        }
        if !matches!(self.image_shape.channels, 1 | 3) || self.image_shape.pixels() == 0 {
            return Err(Error::Dataset("images need 1 or 3 channels and positive size".into()));
        }
        let w = &self.word;
        if w.sample_rate == 0 || !(w.min_ms > 0.0 && w.min_ms <= w.max_ms) {
            return Err(Error::Dataset(format!(
                "invalid word spec: rate {} Hz, duration {}..{} ms",
                w.sample_rate, w.min_ms, w.max_ms
            )));
        }
        Ok(())
    }
}

/// One paired example as listed in the manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub split: Split,
    pub id: String,
    pub image: String,
    pub audio: String,
    pub label: usize,
    pub original_len: usize,
}

/// Contents of `manifest.txt`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub num_classes: usize,
    /// `L_s`: the longest clip in the dataset.
    pub audio_length: usize,
    pub sample_rate: u32,
    pub image_shape: ImageShape,
    pub seed: u64,
    pub records: Vec<Record>,
}

pub const MANIFEST_FILE: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "# mtnet dataset manifest v1";

/// An image paired with its zero-padded word clip.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedExample {
    pub id: String,
    pub image: ImageSample,
    pub audio: AudioClip,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{MANIFEST_HEADER}");
        let _ = writeln!(s, "name={}", self.name);
        let _ = writeln!(s, "classes={}", self.num_classes);
        let _ = writeln!(s, "audio_length={}", self.audio_length);
        let _ = writeln!(s, "sample_rate={}", self.sample_rate);
        let _ = writeln!(s, "image_height={}", self.image_shape.height);
        let _ = writeln!(s, "image_width={}", self.image_shape.width);
        let _ = writeln!(s, "image_channels={}", self.image_shape.channels);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "train={}", self.split_len(Split::Train));
        let _ = writeln!(s, "test={}", self.split_len(Split::Test));
        for r in &self.records {
            let _ = writeln!(
                s,
                "record {} {} {} {} {} {}",
                r.split.as_str(),
                r.id,
                r.image,
                r.audio,
                r.label,
                r.original_len
            );
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Dataset(format!("manifest: {m}"));
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(bad("missing or unsupported header line".into()));
        }
        let mut m = DatasetManifest {
            name: String::new(),
            num_classes: 0,
            audio_length: 0,
            sample_rate: 0,
            image_shape: ImageShape {
                height: 0,
                width: 0,
                channels: 0,
            },
            seed: 0,
            records: Vec::new(),
        };
        let (mut n_train, mut n_test) = (0usize, 0usize);
        for line in lines.filter(|l| !l.trim().is_empty()) {
            if let Some(rest) = line.strip_prefix("record ") {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 6 {
                    return Err(bad(format!("malformed record `{line}`")));
                }
                m.records.push(Record {
                    split: Split::parse(f[0])?,
                    id: f[1].to_string(),
                    image: f[2].to_string(),
                    audio: f[3].to_string(),
                    label: parse("label", f[4])?,
                    original_len: parse("original_len", f[5])?,
                });
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("malformed line `{line}`")))?;
            match k {
                "name" => m.name = v.to_string(),
                "classes" => m.num_classes = parse(k, v)?,
                "audio_length" => m.audio_length = parse(k, v)?,
                "sample_rate" => m.sample_rate = parse(k, v)?,
                "image_height" => m.image_shape.height = parse(k, v)?,
                "image_width" => m.image_shape.width = parse(k, v)?,
                "image_channels" => m.image_shape.channels = parse(k, v)?,
                "seed" => m.seed = parse(k, v)?,
                "train" => n_train = parse(k, v)?,
                "test" => n_test = parse(k, v)?,
                _ => return Err(bad(format!("unknown key `{k}`"))),
            }
        }
        if m.split_len(Split::Train) != n_train || m.split_len(Split::Test) != n_test {
            return Err(bad("record count disagrees with header".into()));
        }
        if let Some(r) = m.records.iter().find(|r| r.label >= m.num_classes || r.original_len > m.audio_length) {
            return Err(bad(format!("record `{}` is out of range", r.id)));
        }
        Ok(m)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text)
    }

    /// SHA-256 over the manifest text and every referenced file, in record
    /// order.
    pub fn checksum(&self, dir: &Path) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.to_text().as_bytes());
        for r in &self.records {
            for rel in [&r.image, &r.audio] {
                let path = dir.join(rel);
                h.update(fs::read(&path).map_err(|e| Error::io(&path, e))?);
            }
        }
        Ok(format!("{:x}", h.finalize()))
    }

    /// Loads one record, padding its clip to `L_s`.
    pub fn load_example(&self, dir: &Path, r: &Record) -> Result<PairedExample> {
        let image = read_netpbm(&dir.join(&r.image), &r.id, r.label)?;
        if image.shape() != self.image_shape {
            return Err(Error::Dataset(format!("image `{}` does not match the manifest shape", r.id)));
        }
        let clip = wav_read(&dir.join(&r.audio))?;
        if clip.sample_rate != self.sample_rate {
            return Err(Error::Dataset(format!(
                "clip `{}` is {} Hz, manifest says {} Hz",
                r.id, clip.sample_rate, self.sample_rate
            )));
        }
        Ok(PairedExample {
            id: r.id.clone(),
            image,
            audio: clip.padded(self.audio_length)?,
        })
    }

    pub fn load_split(&self, dir: &Path, split: Split) -> Result<Vec<PairedExample>> {
        self.split(split).map(|r| self.load_example(dir, r)).collect()
    }
}

/// Generates every example, writes images, WAVs and `manifest.txt` under
/// `dir`, and returns the manifest. `L_s` is the longest clip over both
/// splits.
pub fn build_dataset(spec: &DatasetSpec, dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    for sub in ["images", "audio"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let ext = if spec.image_shape.channels == 1 { "pgm" } else { "ppm" };
    let mut records = Vec::new();
    for (split, per_class) in [(Split::Train, spec.train_per_class), (Split::Test, spec.test_per_class)] {
        for class in 0..spec.num_classes {
            for k in 0..per_class {
                let id = format!("{}-c{class:03}-{k:04}", split.as_str());
                let seed = example_seed(spec.seed, split, class, k);
                let img = render_class_image(class, spec.num_classes, spec.image_shape, seed, &id);
                let clip = synthesize_word_audio(class, &spec.word, seed);
                let image = format!("images/{id}.{ext}");
                let audio = format!("audio/{id}.wav");
                write_netpbm(&dir.join(&image), &img)?;
                wav_write(&dir.join(&audio), clip.samples(), clip.sample_rate)?;
                records.push(Record {
                    split,
                    id,
                    image,
                    audio,
                    label: class,
                    original_len: clip.original_len(),
                });
            }
        }
    }
    let manifest = DatasetManifest {
        name: spec.name.clone(),
        num_classes: spec.num_classes,
        audio_length: records.iter().map(|r| r.original_len).max().unwrap_or(0),
        sample_rate: spec.word.sample_rate,
        image_shape: spec.image_shape,
        seed: spec.seed,
        records,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn example_seed(seed: u64, split: Split, class: usize, k: usize) -> u64 {
    let tag = match split {
        Split::Train => 0u64,
        Split::Test => 1u64,
    };
    crate::tensor::fnv1a(&[seed.to_le_bytes(), tag.to_le_bytes(), (class as u64).to_le_bytes(), (k as u64).to_le_bytes()].concat())
}
