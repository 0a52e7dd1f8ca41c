//! Spectrogram correlation, STOI, and test-set evaluation reports.

mod spectral;
mod stoi;

pub use spectral::{audio_corr2d, corr2d, corr2d_values, hann, stft_magnitude, Spectrogram, FRAME_LEN, HOP};
pub use stoi::{resample, stoi, SEGMENT_FRAMES, STOI_FS};

use std::fmt::Write as _;
use std::path::Path;

use crate::dataset::{wav_read, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::model::{parse, InferenceModel};
use crate::tensor::Scalar;

pub const REPORT_HEADER: &str = "# mtnet eval report v1";

/// Scores of one test example.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub corr2d: f64,
    pub stoi: f64,
}

/// Per-example scores plus the examples that could not be evaluated.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// `(id, reason)` for every skipped example.
    pub missing: Vec<(String, String)>,
}

impl EvalReport {
    pub fn mean_corr2d(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.corr2d))
    }

    pub fn mean_stoi(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.stoi))
    }

    /// Fraction of examples that were scored.
    pub fn coverage(&self) -> f64 {
        let total = self.rows.len() + self.missing.len();
        if total == 0 {
            0.0
        } else {
            self.rows.len() as f64 / total as f64
        }
    }

    pub fn summary_line(&self) -> String {
        format!("corr2d={:.4} stoi={:.4}", self.mean_corr2d(), self.mean_stoi())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{REPORT_HEADER}");
        for r in &self.rows {
            let _ = writeln!(s, "row {} {} {}", r.id, r.corr2d, r.stoi);
        }
        for (id, why) in &self.missing {
            let _ = writeln!(s, "missing {id} {}", why.replace('\n', " "));
        }
        let _ = writeln!(
            s,
            "summary n={} missing={} corr2d={} stoi={}",
            self.rows.len(),
            self.missing.len(),
            self.mean_corr2d(),
            self.mean_stoi()
        );
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Dataset(format!("report: {m}"));
        let mut lines = text.lines();
        if lines.next() != Some(REPORT_HEADER) {
            return Err(bad("missing or unsupported header".into()));
        }
        let mut out = Self::default();
        let mut summary_n = None;
        for line in lines.filter(|l| !l.is_empty()) {
            let (kind, rest) = line.split_once(' ').ok_or_else(|| bad(format!("malformed line `{line}`")))?;
            match kind {
                "row" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 3 {
                        return Err(bad(format!("malformed row `{line}`")));
                    }
                    out.rows.push(EvalRow {
                        id: f[0].to_string(),
                        corr2d: parse("corr2d", f[1])?,
                        stoi: parse("stoi", f[2])?,
                    });
                }
                "missing" => {
                    let (id, why) = rest.split_once(' ').unwrap_or((rest, ""));
                    out.missing.push((id.to_string(), why.to_string()));
                }
                "summary" => {
                    let n = rest
                        .split(' ')
                        .find_map(|kv| kv.strip_prefix("n="))
                        .ok_or_else(|| bad("summary lacks n".into()))?;
                    summary_n = Some(parse::<usize>("n", n)?);
                }
                _ => return Err(bad(format!("unknown record `{kind}`"))),
            }
        }
        if summary_n != Some(out.rows.len()) {
            return Err(bad("summary row count disagrees with rows".into()));
        }
        Ok(out)
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Corr2D and STOI of one generated clip against its reference, both cut to
/// the reference's unpadded length.
pub fn score_pair(id: &str, actual: &[f32], generated: &[f32], sample_rate: u32) -> Result<EvalRow> {
    let n = actual.len();
    if generated.len() < n {
        return Err(Error::LengthMismatch(n, generated.len()));
    }
    let a: Vec<f64> = actual.iter().map(|&v| v as f64).collect();
    let g: Vec<f64> = generated[..n].iter().map(|&v| v as f64).collect();
    Ok(EvalRow {
        id: id.to_string(),
        corr2d: audio_corr2d(&g, &a, sample_rate)?,
        stoi: stoi(&a, &g, sample_rate)?,
    })
}

/// Where generated audio for [`evaluate_set`] comes from.
pub enum EvalSource<'a, T: Scalar> {
    /// Run the model on each test image.
    Model(&'a InferenceModel<T>),
    /// Read `<id>.wav` from a directory.
    Directory(&'a Path),
    /// Score each reference against itself.
    GroundTruth,
}

/// Scores every example of `split`. Examples whose files are missing or
/// unreadable are listed in `missing` and the rest are still scored.
pub fn evaluate_set<T: Scalar>(
    manifest: &DatasetManifest,
    dir: &Path,
    split: Split,
    source: EvalSource<'_, T>,
) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for r in manifest.split(split) {
        let ex = match manifest.load_example(dir, r) {
            Ok(ex) => ex,
            Err(e) => {
                report.missing.push((r.id.clone(), e.to_string()));
                continue;
            }
        };
        let reference = ex.audio.trimmed();
        let generated: Vec<f32> = match &source {
            EvalSource::GroundTruth => reference.to_vec(),
            EvalSource::Directory(gen_dir) => match wav_read(&gen_dir.join(format!("{}.wav", r.id))) {
                Ok(c) => c.samples().to_vec(),
                Err(e) => {
                    report.missing.push((r.id.clone(), e.to_string()));
                    continue;
                }
            },
            EvalSource::Model(model) => {
                let mut out = model.generate(std::slice::from_ref(&ex.image))?;
                out.pop()
                    .expect("one waveform per image")
                    .into_iter()
                    .map(|v| v.as_f64() as f32)
                    .collect()
            }
        };
        match score_pair(&r.id, reference, &generated, manifest.sample_rate) {
            Ok(row) => report.rows.push(row),
            Err(e) => report.missing.push((r.id.clone(), e.to_string())),
        }
    }
    Ok(report)
}
