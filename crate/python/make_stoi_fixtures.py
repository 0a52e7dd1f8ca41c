"""Writes the STOI cross-check fixtures: clean/noisy WAV pairs plus the
scores pystoi assigns them. Scores are computed on the decoded 16-bit
samples (q / 32767), which is what the Rust reader returns."""

import os
import sys

import numpy as np
from pystoi import stoi
from scipy.io import wavfile

OUT = sys.argv[1] if len(sys.argv) > 1 else "crates/core/tests/fixtures/stoi"

CASES = [
    # name, sample rate, duration s, snr dB, seed
    ("a", 8000, 0.9, 20.0, 1),
    ("b", 8000, 0.8, 5.0, 2),
    ("c", 8000, 1.2, -5.0, 3),
    ("d", 16000, 0.7, 0.0, 4),
    ("e", 10000, 1.0, 10.0, 5),
]


def word(fs, dur, rng):
    t = np.arange(int(fs * dur)) / fs
    x = np.zeros_like(t)
    n_seg = 4
    edges = np.linspace(0, len(t), n_seg + 1).astype(int)
    for s in range(n_seg):
        f = rng.uniform([250, 900, 2100], [800, 2000, 3400])
        seg = slice(edges[s], edges[s + 1])
        tm = t[seg]
        env = np.sin(np.pi * (tm - tm[0]) / (tm[-1] - tm[0] + 1e-9)) ** 2
        trem = 0.65 + 0.35 * np.cos(2 * np.pi * rng.uniform(4, 12) * tm)
        tone = sum(a * np.sin(2 * np.pi * fi * tm) for a, fi in zip([1, 0.5, 0.33], f))
        x[seg] = env * trem * tone
    return 0.9 * x / np.abs(x).max()


def quant(x):
    return np.round(np.clip(x, -1, 1) * 32767).astype(np.int16)


os.makedirs(OUT, exist_ok=True)
lines = []
for name, fs, dur, snr, seed in CASES:
    rng = np.random.default_rng(seed)
    clean = word(fs, dur, rng)
    noise = rng.standard_normal(len(clean))
    noise *= np.sqrt(np.mean(clean**2) / np.mean(noise**2) / 10 ** (snr / 10))
    noisy = np.clip(clean + noise, -1, 1)
    qc, qn = quant(clean), quant(noisy)
    wavfile.write(os.path.join(OUT, f"{name}_clean.wav"), fs, qc)
    wavfile.write(os.path.join(OUT, f"{name}_noisy.wav"), fs, qn)
    score = stoi(qc / 32767.0, qn / 32767.0, fs)
    lines.append(f"{name} {fs} {snr} {float(score)!r}")
with open(os.path.join(OUT, "expected.txt"), "w") as f:
    f.write("\n".join(lines) + "\n")
print("\n".join(lines))
