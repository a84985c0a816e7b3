//! Audio frontend: WAV ingest and MFCC+log-energy feature extraction.
//!
//! Each utterance becomes a T×13 matrix: columns 0..11 hold cepstral
//! coefficients c1..c12, column 12 holds the log of the per-frame signal
//! energy. The chain is pre-emphasis, Hamming window, 512-point FFT,
//! 40 triangular mel filters, log with floor, orthonormal DCT-II.
//! Internally everything runs at f64; the stored features are f32.

use byteorder::{LittleEndian, ReadBytesExt};
use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};
use std::f64::consts::PI;
use std::io::{BufReader, Read, Seek, SeekFrom};
use std::path::Path;

use crate::error::{Error, Result};

/// T×13 frame matrix (c1..c12 + log energy), 25 ms windows every 10 ms.
pub type FeatureMatrix = Array2<f32>;

pub const FEATURE_DIM: usize = 13;

/// Raw mono audio, amplitudes nominally in [-1, 1].
#[derive(Debug, Clone)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

#[derive(Debug, Clone)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub frame_length_ms: u32,
    pub frame_shift_ms: u32,
    pub pre_emphasis: f64,
    pub fft_size: usize,
    pub num_mel_filters: usize,
    pub low_freq_hz: f64,
    pub high_freq_hz: f64,
    /// Floor applied inside the filterbank log and to the frame energy.
    pub floor: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            sample_rate: 16_000,
            frame_length_ms: 25,
            frame_shift_ms: 10,
            pre_emphasis: 0.97,
            fft_size: 512,
            num_mel_filters: 40,
            low_freq_hz: 0.0,
            high_freq_hz: 8_000.0,
            floor: 1e-10,
        }
    }
}

impl FrontendConfig {
    pub fn window_samples(&self) -> usize {
        (self.sample_rate as usize * self.frame_length_ms as usize) / 1000
    }
    pub fn hop_samples(&self) -> usize {
        (self.sample_rate as usize * self.frame_shift_ms as usize) / 1000
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank over the one-sided power spectrum.
fn mel_filterbank(cfg: &FrontendConfig) -> Vec<Vec<(usize, f64)>> {
    let num_bins = cfg.fft_size / 2 + 1;
    let mel_lo = hz_to_mel(cfg.low_freq_hz);
    let mel_hi = hz_to_mel(cfg.high_freq_hz);
    let num = cfg.num_mel_filters;
    let points: Vec<f64> = (0..num + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (num + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.fft_size as f64;
    let mut filters = Vec::with_capacity(num);
    for f in 0..num {
        let (left, center, right) = (points[f], points[f + 1], points[f + 2]);
        let mut taps = Vec::new();
        for bin in 0..num_bins {
            let hz = bin as f64 * bin_hz;
            let w = if hz > left && hz < center {
                (hz - left) / (center - left)
            } else if (hz - center).abs() < f64::EPSILON {
                1.0
            } else if hz > center && hz < right {
                (right - hz) / (right - center)
            } else {
                0.0
            };
            if w > 0.0 {
                taps.push((bin, w));
            }
        }
        filters.push(taps);
    }
    filters
}

/// Orthonormal DCT-II of `x`, rows k = 1..=count.
fn dct2_rows(x: &[f64], count: usize) -> Vec<f64> {
    let m = x.len();
    let mut out = Vec::with_capacity(count);
    for k in 1..=count {
        let mut acc = 0.0;
        for (i, &v) in x.iter().enumerate() {
            acc += v * (PI * k as f64 * (i as f64 + 0.5) / m as f64).cos();
        }
        out.push(acc * (2.0 / m as f64).sqrt());
    }
    out
}

/// Internal f64 extraction; the public API casts the result to f32.
pub fn extract_mfcc_f64(clip: &AudioClip, cfg: &FrontendConfig) -> Result<Vec<Vec<f64>>> {
    if clip.sample_rate != cfg.sample_rate {
        return Err(Error::Data(format!(
            "clip sample rate {} does not match config {}",
            clip.sample_rate, cfg.sample_rate
        )));
    }
    if clip.samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::Data("non-finite sample in clip".into()));
    }
    let win = cfg.window_samples();
    let hop = cfg.hop_samples();
    if clip.samples.len() < win {
        return Err(Error::Length(format!(
            "clip has {} samples, need at least one {win}-sample window",
            clip.samples.len()
        )));
    }
    let num_frames = 1 + (clip.samples.len() - win) / hop;

    // Pre-emphasis over the whole signal, then per-frame Hamming windowing.
    let mut emph = Vec::with_capacity(clip.samples.len());
    emph.push(clip.samples[0] as f64);
    for i in 1..clip.samples.len() {
        emph.push(clip.samples[i] as f64 - cfg.pre_emphasis * clip.samples[i - 1] as f64);
    }
    let hamming: Vec<f64> = (0..win)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (win - 1) as f64).cos())
        .collect();

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(cfg.fft_size);
    let filters = mel_filterbank(cfg);
    let num_ceps = FEATURE_DIM - 1;

    let mut frames = Vec::with_capacity(num_frames);
    for t in 0..num_frames {
        let start = t * hop;
        let windowed: Vec<f64> = (0..win).map(|i| emph[start + i] * hamming[i]).collect();
        let energy: f64 = windowed.iter().map(|v| v * v).sum();
        let log_energy = energy.max(cfg.floor).ln();

        let mut buf: Vec<Complex<f64>> = windowed
            .iter()
            .map(|&v| Complex::new(v, 0.0))
            .chain(std::iter::repeat(Complex::new(0.0, 0.0)).take(cfg.fft_size - win))
            .collect();
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..cfg.fft_size / 2 + 1]
            .iter()
            .map(|c| c.norm_sqr())
            .collect();

        let log_mel: Vec<f64> = filters
            .iter()
            .map(|taps| {
                let e: f64 = taps.iter().map(|&(bin, w)| power[bin] * w).sum();
                e.max(cfg.floor).ln()
            })
            .collect();
        let mut row = dct2_rows(&log_mel, num_ceps);
        row.push(log_energy);
        frames.push(row);
    }
    Ok(frames)
}

/// MFCC+log-energy features for one clip. T = 1 + floor((N − window)/hop).
pub fn extract_mfcc(clip: &AudioClip, cfg: &FrontendConfig) -> Result<FeatureMatrix> {
    let frames = extract_mfcc_f64(clip, cfg)?;
    let rows = frames.len();
    let flat: Vec<f32> = frames.into_iter().flatten().map(|v| v as f32).collect();
    Ok(Array2::from_shape_vec((rows, FEATURE_DIM), flat).expect("consistent frame width"))
}

/// Reads a PCM WAV file: 16-bit signed, mono (stereo averaged to mono).
/// Sample rates other than `target_rate` are linearly resampled.
pub fn read_wav(path: &Path, target_rate: u32) -> Result<AudioClip> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut tag = [0u8; 4];
    let fmt_err = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    r.read_exact(&mut tag).map_err(|_| fmt_err("truncated"))?;
    if &tag != b"RIFF" {
        return Err(fmt_err("not a RIFF file"));
    }
    r.read_u32::<LittleEndian>().map_err(|_| fmt_err("truncated"))?;
    r.read_exact(&mut tag).map_err(|_| fmt_err("truncated"))?;
    if &tag != b"WAVE" {
        return Err(fmt_err("not a WAVE file"));
    }
    let mut channels = 0u16;
    let mut rate = 0u32;
    let mut bits = 0u16;
    let mut data: Option<Vec<i16>> = None;
    loop {
        if r.read_exact(&mut tag).is_err() {
            break;
        }
        let size = r.read_u32::<LittleEndian>().map_err(|_| fmt_err("truncated chunk"))?;
        match &tag {
            b"fmt " => {
                let audio_format = r.read_u16::<LittleEndian>().map_err(|_| fmt_err("bad fmt"))?;
                if audio_format != 1 {
                    return Err(fmt_err("only PCM (format 1) is supported"));
                }
                channels = r.read_u16::<LittleEndian>().map_err(|_| fmt_err("bad fmt"))?;
                rate = r.read_u32::<LittleEndian>().map_err(|_| fmt_err("bad fmt"))?;
                r.read_u32::<LittleEndian>().map_err(|_| fmt_err("bad fmt"))?;
                r.read_u16::<LittleEndian>().map_err(|_| fmt_err("bad fmt"))?;
                bits = r.read_u16::<LittleEndian>().map_err(|_| fmt_err("bad fmt"))?;
                if size > 16 {
                    r.seek(SeekFrom::Current((size - 16) as i64))?;
                }
            }
            b"data" => {
                let mut raw = vec![0u8; size as usize];
                r.read_exact(&mut raw).map_err(|_| fmt_err("truncated data chunk"))?;
                data = Some(
                    raw.chunks_exact(2)
                        .map(|c| i16::from_le_bytes([c[0], c[1]]))
                        .collect(),
                );
            }
            _ => {
                // skip unknown chunks (pad to even size per RIFF)
                let skip = size as i64 + (size % 2) as i64;
                r.seek(SeekFrom::Current(skip))?;
            }
        }
    }
    let data = data.ok_or_else(|| fmt_err("missing data chunk"))?;
    if channels == 0 || rate == 0 {
        return Err(fmt_err("missing fmt chunk"));
    }
    if bits != 16 {
        return Err(fmt_err("only 16-bit PCM is supported"));
    }
    let ch = channels as usize;
    let mono: Vec<f32> = data
        .chunks_exact(ch)
        .map(|frame| frame.iter().map(|&s| s as f32 / 32768.0).sum::<f32>() / ch as f32)
        .collect();
    let samples = if rate == target_rate {
        mono
    } else {
        resample_linear(&mono, rate, target_rate)
    };
    Ok(AudioClip { samples, sample_rate: target_rate })
}

fn resample_linear(x: &[f32], from: u32, to: u32) -> Vec<f32> {
    if x.is_empty() {
        return Vec::new();
    }
    let out_len = ((x.len() as u64 * to as u64) / from as u64).max(1) as usize;
    let step = from as f64 / to as f64;
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * step;
            let lo = pos.floor() as usize;
            let frac = (pos - lo as f64) as f32;
            let a = x[lo.min(x.len() - 1)];
            let b = x[(lo + 1).min(x.len() - 1)];
            a + (b - a) * frac
        })
        .collect()
}

/// In-place corpus-level mean/variance normalization of columns 0..12.
/// Off by default; the log-energy column is left untouched.
pub fn mean_var_normalize(features: &mut [FeatureMatrix]) {
    let num_ceps = FEATURE_DIM - 1;
    let total: usize = features.iter().map(|f| f.nrows()).sum();
    if total == 0 {
        return;
    }
    let mut mean = vec![0f64; num_ceps];
    for f in features.iter() {
        for row in f.rows() {
            for c in 0..num_ceps {
                mean[c] += row[c] as f64;
            }
        }
    }
    for m in mean.iter_mut() {
        *m /= total as f64;
    }
    let mut var = vec![0f64; num_ceps];
    for f in features.iter() {
        for row in f.rows() {
            for c in 0..num_ceps {
                let d = row[c] as f64 - mean[c];
                var[c] += d * d;
            }
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / total as f64).sqrt().max(1e-8)).collect();
    for f in features.iter_mut() {
        for mut row in f.rows_mut() {
            for c in 0..num_ceps {
                row[c] = ((row[c] as f64 - mean[c]) / std[c]) as f32;
            }
        }
    }
}
