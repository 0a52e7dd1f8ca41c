//! Short-time objective intelligibility, following the reference
//! implementation step for step: polyphase resampling to 10 kHz with a
//! Kaiser-windowed sinc, silent-frame removal over a 40 dB range, 256-sample
//! frames with 50% overlap and a 512-point DFT, 15 one-third octave bands
//! from 150 Hz, 30-frame envelope segments, and clipping at -15 dB SDR.

use std::f64::consts::PI;
use std::sync::OnceLock;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

pub const STOI_FS: u32 = 10_000;
const N_FRAME: usize = 256;
const HOP: usize = N_FRAME / 2;
const NFFT: usize = 512;
const NUM_BANDS: usize = 15;
const MIN_FREQ: f64 = 150.0;
/// Frames per envelope segment.
pub const SEGMENT_FRAMES: usize = 30;
const BETA_DB: f64 = -15.0;
const DYN_RANGE_DB: f64 = 40.0;
const EPS: f64 = f64::EPSILON;

/// STOI of `generated` against the clean `actual` signal, clamped to [0, 1].
pub fn stoi(actual: &[f64], generated: &[f64], sample_rate: u32) -> Result<f64> {
    if actual.len() != generated.len() {
        return Err(Error::LengthMismatch(actual.len(), generated.len()));
    }
    if actual.iter().all(|&v| v == 0.0) {
        return Err(Error::Silent("reference signal is all zeros".into()));
    }
    let (x, y) = if sample_rate == STOI_FS {
        (actual.to_vec(), generated.to_vec())
    } else {
        (resample(actual, STOI_FS, sample_rate), resample(generated, STOI_FS, sample_rate))
    };
    let (x, y) = remove_silent_frames(&x, &y);
    let xs = band_envelopes(&x);
    let ys = band_envelopes(&y);
    let frames = xs.len() / NUM_BANDS;
    if frames < SEGMENT_FRAMES {
        return Err(Error::TooShort {
            len: frames,
            min: SEGMENT_FRAMES,
        });
    }
    let clip = 1.0 + 10f64.powf(-BETA_DB / 20.0);
    let mut total = 0.0;
    let segments = frames - SEGMENT_FRAMES + 1;
    let mut xv = [0.0; SEGMENT_FRAMES];
    let mut yv = [0.0; SEGMENT_FRAMES];
    for m in SEGMENT_FRAMES..=frames {
        for band in 0..NUM_BANDS {
            for (j, t) in (m - SEGMENT_FRAMES..m).enumerate() {
                xv[j] = xs[band * frames + t];
                yv[j] = ys[band * frames + t];
            }
            let scale = norm(&xv) / (norm(&yv) + EPS);
            for j in 0..SEGMENT_FRAMES {
                yv[j] = (yv[j] * scale).min(xv[j] * clip);
            }
            center(&mut xv);
            center(&mut yv);
            let (nx, ny) = (norm(&xv) + EPS, norm(&yv) + EPS);
            total += xv.iter().zip(&yv).map(|(a, b)| (a / nx) * (b / ny)).sum::<f64>();
        }
    }
    Ok((total / (segments * NUM_BANDS) as f64).clamp(0.0, 1.0))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn center(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|a| *a -= m);
}

/// Symmetric Hann window without its zero endpoints.
fn hanning_inner(n: usize) -> Vec<f64> {
    let m = n + 2;
    (1..=n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (m - 1) as f64).cos()).collect()
}

fn frame_starts(len: usize) -> impl Iterator<Item = usize> {
    (0..len.saturating_sub(N_FRAME)).step_by(HOP)
}

/// Drops frames of both signals whose reference energy is more than 40 dB
/// below the loudest reference frame, then overlap-adds the remainder.
fn remove_silent_frames(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let w = hanning_inner(N_FRAME);
    let frame = |s: &[f64], i: usize| -> Vec<f64> { s[i..i + N_FRAME].iter().zip(&w).map(|(a, b)| a * b).collect() };
    let starts: Vec<usize> = frame_starts(x.len()).collect();
    let xf: Vec<Vec<f64>> = starts.iter().map(|&i| frame(x, i)).collect();
    let yf: Vec<Vec<f64>> = starts.iter().map(|&i| frame(y, i)).collect();
    let energy: Vec<f64> = xf.iter().map(|f| 20.0 * (norm(f) + EPS).log10()).collect();
    let max = energy.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let keep: Vec<usize> = (0..xf.len()).filter(|&i| max - DYN_RANGE_DB - energy[i] < 0.0).collect();
    (overlap_add(&xf, &keep), overlap_add(&yf, &keep))
}

fn overlap_add(frames: &[Vec<f64>], keep: &[usize]) -> Vec<f64> {
    if keep.is_empty() {
        return Vec::new();
    }
    let mut out = vec![0.0; (keep.len() - 1) * HOP + N_FRAME];
    for (k, &i) in keep.iter().enumerate() {
        for (o, v) in out[k * HOP..k * HOP + N_FRAME].iter_mut().zip(&frames[i]) {
            *o += v;
        }
    }
    out
}

/// Band edges `[lo, hi)` as DFT bin indices.
fn third_octave_bands() -> &'static [(usize, usize); NUM_BANDS] {
    static BANDS: OnceLock<[(usize, usize); NUM_BANDS]> = OnceLock::new();
    BANDS.get_or_init(|| {
        let nbins = NFFT / 2 + 1;
        let f: Vec<f64> = (0..nbins).map(|i| i as f64 * STOI_FS as f64 / NFFT as f64).collect();
        let nearest = |target: f64| -> usize {
            let mut best = 0;
            for (i, &fi) in f.iter().enumerate() {
                if (fi - target).powi(2) < (f[best] - target).powi(2) {
                    best = i;
                }
            }
            best
        };
        let mut out = [(0, 0); NUM_BANDS];
        for (k, o) in out.iter_mut().enumerate() {
            let k = k as f64;
            let lo = MIN_FREQ * 2f64.powf((2.0 * k - 1.0) / 6.0);
            let hi = MIN_FREQ * 2f64.powf((2.0 * k + 1.0) / 6.0);
            *o = (nearest(lo), nearest(hi));
        }
        out
    })
}

/// One-third octave band envelopes, `bands x frames`, row-major by band.
fn band_envelopes(x: &[f64]) -> Vec<f64> {
    let w = hanning_inner(N_FRAME);
    let starts: Vec<usize> = frame_starts(x.len()).collect();
    let frames = starts.len();
    let fft = FftPlanner::new().plan_fft_forward(NFFT);
    let bands = third_octave_bands();
    let mut out = vec![0.0; NUM_BANDS * frames];
    let mut buf = vec![Complex::new(0.0, 0.0); NFFT];
    for (t, &i) in starts.iter().enumerate() {
        buf.fill(Complex::new(0.0, 0.0));
        for (j, b) in buf.iter_mut().take(N_FRAME).enumerate() {
            b.re = x[i + j] * w[j];
        }
        fft.process(&mut buf);
        for (band, &(lo, hi)) in bands.iter().enumerate() {
            let power: f64 = buf[lo..hi].iter().map(|c| c.norm_sqr()).sum();
            out[band * frames + t] = power.sqrt();
        }
    }
    out
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Modified Bessel function of the first kind, order zero (power series).
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let (mut term, mut sum, mut k) = (1.0, 1.0, 1.0);
    while term > sum * 1e-17 {
        term *= q / (k * k);
        sum += term;
        k += 1.0;
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Rational resampling by `p / q` with the 60 dB Kaiser-windowed sinc
/// anti-aliasing filter and zero-phase polyphase alignment, producing
/// `ceil(len * p / q)` samples.
pub fn resample(x: &[f64], p: u32, q: u32) -> Vec<f64> {
    let g = gcd(p as u64, q as u64);
    let (up, down) = ((p as u64 / g) as usize, (q as u64 / g) as usize);
    if up == 1 && down == 1 {
        return x.to_vec();
    }
    let stopband = 1.0 / (2.0 * up.max(down) as f64);
    let roll_off = stopband / 10.0;
    let rejection_db = 60.0;
    let l = ((rejection_db - 8.0) / (28.714 * roll_off)).ceil() as i64;
    let beta = 0.1102 * (rejection_db - 8.7);
    let taps = (2 * l + 1) as usize;
    let i0_beta = bessel_i0(beta);
    let mut h: Vec<f64> = (0..taps)
        .map(|n| {
            let t = n as i64 - l;
            let r = 2.0 * n as f64 / (taps - 1) as f64 - 1.0;
            let kaiser = bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / i0_beta;
            kaiser * 2.0 * up as f64 * stopband * sinc(2.0 * stopband * t as f64)
        })
        .collect();
    let sum: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v = *v / sum * up as f64);

    let half_len = (taps - 1) / 2;
    let pre_pad = down - half_len % down;
    let pre_remove = (half_len + pre_pad) / down;
    let n_out = (x.len() * up).div_ceil(down);
    let hlen = pre_pad + taps;
    let mut y = vec![0.0; n_out];
    for (k, yk) in y.iter_mut().enumerate() {
        let pos = (k + pre_remove) * down;
        // taps hp[pos - i*up] with pre_pad leading zeros
        let i_max = (pos / up).min(x.len().saturating_sub(1));
        let i_min = (pos + up).saturating_sub(hlen) / up;
        let mut acc = 0.0;
        for i in i_min..=i_max {
            let j = pos - i * up;
            if j >= pre_pad && j < hlen {
                acc += x[i] * h[j - pre_pad];
            }
        }
        *yk = acc;
    }
    y
}
