use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

pub const FRAME_LEN: usize = 512;
pub const HOP: usize = 128;

/// Magnitude spectrogram, `frames x bins`, row-major by frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    mag: Vec<f64>,
    frames: usize,
    bins: usize,
    pub frame_len: usize,
    pub hop: usize,
    pub sample_rate: u32,
}

impl Spectrogram {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn mag(&self) -> &[f64] {
        &self.mag
    }

    pub fn at(&self, frame: usize, bin: usize) -> f64 {
        self.mag[frame * self.bins + bin]
    }

    pub fn energy(&self) -> f64 {
        self.mag.iter().map(|m| m * m).sum()
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// One-sided magnitudes of Hann-windowed frames, `1 + (len - frame_len) / hop`
/// frames of `frame_len / 2 + 1` bins.
pub fn stft_magnitude(samples: &[f64], sample_rate: u32, frame_len: usize, hop: usize) -> Result<Spectrogram> {
    if frame_len == 0 || hop == 0 {
        return Err(Error::Param("frame length and hop must be positive".into()));
    }
    if samples.len() < frame_len {
        return Err(Error::TooShort {
            len: samples.len(),
            min: frame_len,
        });
    }
    let frames = 1 + (samples.len() - frame_len) / hop;
    let bins = frame_len / 2 + 1;
    let window = hann(frame_len);
    let fft = FftPlanner::new().plan_fft_forward(frame_len);
    let mut buf = vec![Complex::new(0.0, 0.0); frame_len];
    let mut mag = Vec::with_capacity(frames * bins);
    for f in 0..frames {
        let frame = &samples[f * hop..f * hop + frame_len];
        for ((b, &s), &w) in buf.iter_mut().zip(frame).zip(&window) {
            *b = Complex::new(s * w, 0.0);
        }
        fft.process(&mut buf);
        mag.extend(buf[..bins].iter().map(|c| c.norm()));
    }
    Ok(Spectrogram {
        mag,
        frames,
        bins,
        frame_len,
        hop,
        sample_rate,
    })
}

/// Pearson correlation of two equally sized matrices given as flat slices,
/// clamped to [-1, 1].
pub fn corr2d_values(gen: &[f64], act: &[f64]) -> Result<f64> {
    if gen.len() != act.len() {
        return Err(Error::LengthMismatch(gen.len(), act.len()));
    }
    if gen.is_empty() {
        return Err(Error::ConstantInput);
    }
    let n = gen.len() as f64;
    let mg = gen.iter().sum::<f64>() / n;
    let ma = act.iter().sum::<f64>() / n;
    let (mut num, mut sg, mut sa) = (0.0, 0.0, 0.0);
    for (&g, &a) in gen.iter().zip(act) {
        let (dg, da) = (g - mg, a - ma);
        num += dg * da;
        sg += dg * dg;
        sa += da * da;
    }
    if sg == 0.0 || sa == 0.0 {
        return Err(Error::ConstantInput);
    }
    Ok((num / (sg.sqrt() * sa.sqrt())).clamp(-1.0, 1.0))
}

/// 2-D correlation between generated and actual spectrograms.
pub fn corr2d(gen: &Spectrogram, act: &Spectrogram) -> Result<f64> {
    if (gen.frames, gen.bins) != (act.frames, act.bins) {
        return Err(Error::shape("corr2d", &[gen.frames, gen.bins], &[act.frames, act.bins]));
    }
    corr2d_values(&gen.mag, &act.mag)
}

/// Corr2D of the STFT magnitudes of two waveforms of equal length.
pub fn audio_corr2d(generated: &[f64], actual: &[f64], sample_rate: u32) -> Result<f64> {
    if generated.len() != actual.len() {
        return Err(Error::LengthMismatch(generated.len(), actual.len()));
    }
    let g = stft_magnitude(generated, sample_rate, FRAME_LEN, HOP)?;
    let a = stft_magnitude(actual, sample_rate, FRAME_LEN, HOP)?;
    corr2d(&g, &a)
}
