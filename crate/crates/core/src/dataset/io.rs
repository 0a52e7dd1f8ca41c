//! 16-bit PCM WAV and binary netpbm (PGM/PPM) files.

use std::fs;
use std::path::Path;

use super::{AudioClip, ImageSample};
use crate::error::{Error, Result};
use crate::model::ImageShape;

const PCM_SCALE: f32 = 32767.0;

/// Writes mono 16-bit PCM, clamping to [-1, 1] and rounding.
pub fn wav_write(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in samples {
        let q = (s.clamp(-1.0, 1.0) * PCM_SCALE).round() as i16;
        w.write_sample(q).map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}

/// Reads a mono 16-bit PCM file written by [`wav_write`].
pub fn wav_read(path: &Path) -> Result<AudioClip> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut r = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = r.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Dataset(format!(
            "{}: unsupported WAV format ({} channels, {} bits, {:?}); expected mono 16-bit PCM",
            path.display(),
            spec.channels,
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    let samples = r
        .samples::<i16>()
        .map(|s| s.map(|q| q as f32 / PCM_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(wav_err)?;
    Ok(AudioClip::new(samples, spec.sample_rate))
}

/// Writes a binary PGM (1 channel) or PPM (3 channels) with maxval 255.
pub fn write_netpbm(path: &Path, img: &ImageSample) -> Result<()> {
    let s = img.shape();
    let magic = match s.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Dataset(format!("netpbm needs 1 or 3 channels, image has {c}"))),
    };
    let mut bytes = format!("{magic}\n{} {}\n255\n", s.width, s.height).into_bytes();
    bytes.extend(img.pixels().iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a binary PGM/PPM with maxval up to 255 into pixels in [0, 1].
pub fn read_netpbm(path: &Path, id: &str, label: usize) -> Result<ImageSample> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Dataset(format!("{}: {m}", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated netpbm header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?.to_string());
    }
    pos += 1; // single whitespace before the raster
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(bad(&format!("unsupported netpbm magic `{m}`"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad number in header"));
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("only maxval 1..=255 is supported"));
    }
    let n = width * height * channels;
    let raster = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated raster"))?;
    let pixels = raster.iter().map(|&b| (b as f64 / maxval as f64) as f32).collect();
    let shape = ImageShape {
        height,
        width,
        channels,
    };
    ImageSample::new(id, label, shape, pixels)
}
