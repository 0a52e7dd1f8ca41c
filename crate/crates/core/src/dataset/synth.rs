//! Procedural stand-ins for recorded word audio and class images.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AudioClip, ImageSample};
use crate::model::ImageShape;

/// Duration bounds and sample rate for synthesized words.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WordSpec {
    pub sample_rate: u32,
    pub min_ms: f64,
    pub max_ms: f64,
}

impl Default for WordSpec {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            min_ms: 420.0,
            max_ms: 500.0,
        }
    }
}

const PEAK: f64 = 0.9;
const CROSSFADE_MS: f64 = 10.0;
const JITTER: f64 = 0.03;

/// Formant-like frequency ranges in Hz, one per partial, clipped below
/// Nyquist.
const BANDS: [(f64, f64); 3] = [(250.0, 800.0), (850.0, 2000.0), (2100.0, 3400.0)];

struct Segment {
    weight: f64,
    partials: Vec<(f64, f64)>,
    tremolo_hz: f64,
}

struct WordShape {
    duration_ms: f64,
    segments: Vec<Segment>,
}

fn class_rng(class_id: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + class_id as u64);
    rng.set_stream(stream);
    rng
}

fn word_shape(class_id: usize, spec: &WordSpec) -> WordShape {
    let mut rng = class_rng(class_id, 0);
    let n = rng.random_range(2..=4);
    let nyquist = spec.sample_rate as f64 / 2.0;
    let segments = (0..n)
        .map(|_| {
            let k = rng.random_range(2..=3);
            let partials = (0..k)
                .map(|b| {
                    let (lo, hi) = BANDS[b];
                    let hi = hi.min(0.85 * nyquist);
                    let lo = lo.min(hi * 0.8);
                    (rng.random_range(lo..hi), 1.0 / (1.0 + b as f64))
                })
                .collect();
            Segment {
                weight: rng.random_range(0.6..1.4),
                partials,
                tremolo_hz: rng.random_range(4.0..12.0),
            }
        })
        .collect();
    let duration_ms = rng.random_range(spec.min_ms..=spec.max_ms);
    WordShape { duration_ms, segments }
}

/// One spoken-word stand-in: a class-specific sequence of 2 to 4 segments,
/// each a sum of 2 or 3 sinusoids under a smooth envelope, joined with 10 ms
/// crossfades. `seed` adds up to 3% pitch and duration jitter. Peak is 0.9.
pub fn synthesize_word_audio(class_id: usize, spec: &WordSpec, seed: u64) -> AudioClip {
    let shape = word_shape(class_id, spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + class_id as u64);
    let pitch = 1.0 + rng.random_range(-JITTER..=JITTER);
    let stretch = 1.0 + rng.random_range(-JITTER..=JITTER);
    let fs = spec.sample_rate as f64;
    let duration_ms = (shape.duration_ms * stretch).clamp(spec.min_ms, spec.max_ms);
    let len = ((duration_ms / 1000.0) * fs).round().max(1.0) as usize;

    let total_weight: f64 = shape.segments.iter().map(|s| s.weight).sum();
    let fade = (CROSSFADE_MS / 1000.0 * fs).round() as usize;
    let mut bounds = vec![0usize];
    let mut acc = 0.0;
    for s in &shape.segments {
        acc += s.weight;
        bounds.push(((acc / total_weight) * len as f64).round() as usize);
    }

    let mut out = vec![0.0f64; len];
    for (i, seg) in shape.segments.iter().enumerate() {
        let (start, end) = (bounds[i], bounds[i + 1]);
        let lo = start.saturating_sub(fade / 2);
        let hi = (end + fade / 2).min(len);
        let phases: Vec<f64> = seg.partials.iter().map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        for (t, o) in out.iter_mut().enumerate().take(hi).skip(lo) {
            // linear crossfade at interior boundaries
            let mut gain: f64 = 1.0;
            if i > 0 && t < start + fade / 2 {
                gain = gain.min((t + 1 - lo) as f64 / (fade + 1) as f64);
            }
            if i + 1 < shape.segments.len() && t + fade / 2 >= end {
                gain = gain.min((hi - t) as f64 / (fade + 1) as f64);
            }
            let time = t as f64 / fs;
            let tremolo = 0.65 + 0.35 * (2.0 * PI * seg.tremolo_hz * time).cos();
            let tone: f64 = seg
                .partials
                .iter()
                .zip(&phases)
                .map(|(&(f, a), &ph)| a * (2.0 * PI * f * pitch * time + ph).sin())
                .sum();
            *o += gain * tremolo * tone;
        }
    }
    // word-level attack/release
    let edge = (0.03 * fs) as usize;
    for t in 0..len {
        let e = ((t + 1) as f64 / edge as f64).min((len - t) as f64 / edge as f64).min(1.0);
        out[t] *= 0.5 - 0.5 * (PI * e).cos();
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { PEAK / peak } else { 0.0 };
    let samples: Vec<f32> = out.iter().map(|v| (v * scale) as f32).collect();
    AudioClip::new(samples, spec.sample_rate)
}

/// A class-conditioned procedural image: an oriented grating plus a bright
/// blob whose placement encodes the class, with per-instance jitter, quantized
/// to 8 bits.
pub fn render_class_image(class_id: usize, num_classes: usize, shape: ImageShape, seed: u64, id: &str) -> ImageSample {
    let mut crng = class_rng(class_id, 1);
    let theta = PI * class_id as f64 / num_classes.max(1) as f64;
    let freq = 1.0 + (class_id % 3) as f64;
    let blob = (crng.random_range(0.2..0.8), crng.random_range(0.2..0.8));
    let colors: Vec<f64> = (0..shape.channels).map(|_| crng.random_range(0.4..1.0)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1000 + class_id as u64);
    let shift = (rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
    let phase = rng.random_range(0.0..0.5);
    let (h, w, c) = (shape.height, shape.width, shape.channels);
    let mut pixels = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
            let proj = u * theta.cos() + v * theta.sin();
            let grating = 0.5 + 0.5 * (2.0 * PI * freq * proj + phase).sin();
            let (du, dv) = (u - blob.0 - shift.0, v - blob.1 - shift.1);
            let spot = (-(du * du + dv * dv) / 0.02).exp();
            for &col in &colors {
                let noise = rng.random_range(-0.04..0.04);
                let val = (0.45 * grating * col + 0.55 * spot + noise).clamp(0.0, 1.0);
                pixels.push(((val * 255.0).round() / 255.0) as f32);
            }
        }
    }
    ImageSample::new(id, class_id, shape, pixels).expect("pixels in range by construction")
}
