//! Log-mel filter bank front end and 16-bit PCM WAV I/O.
//!
//! `logmel` = DC removal → pre-emphasis → 25 ms Hamming frames every 10 ms →
//! |DFT|² → 40 triangular mel filters → natural log with a floor.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{io_err, Error, Result};
use crate::tensor::Tensor;

pub const N_MELS: usize = 40;
pub const FRAME_LENGTH_S: f64 = 0.025;
pub const FRAME_SHIFT_S: f64 = 0.010;
pub const PREEMPHASIS: f64 = 0.97;
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * alpha).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// `T × 40` log energies at a 100 Hz frame rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub frames: Tensor<f32>,
}

impl Spectrogram {
    pub fn new(frames: Tensor<f32>) -> Result<Self> {
        if frames.rank() != 2 || frames.shape()[1] != N_MELS {
            return Err(Error::InvalidArgument(format!(
                "spectrogram must be T x {N_MELS}, got {:?}",
                frames.shape()
            )));
        }
        Ok(Self { frames })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    /// Band-major `40 × T` copy, the layout the audio encoder consumes.
    pub fn band_major(&self) -> Tensor<f32> {
        let t = self.num_frames();
        let d = self.frames.data();
        Tensor::from_fn(&[N_MELS, t], |i| d[(i % t) * N_MELS + i / t])
    }
}

/// Frame geometry for a sample rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Framing {
    pub window: usize,
    pub shift: usize,
    pub nfft: usize,
}

impl Framing {
    pub fn for_rate(sample_rate: u32) -> Self {
        let window = (FRAME_LENGTH_S * sample_rate as f64).round() as usize;
        let shift = (FRAME_SHIFT_S * sample_rate as f64).round() as usize;
        Self {
            window,
            shift,
            nfft: window.next_power_of_two(),
        }
    }

    pub fn frame_count(&self, n: usize) -> usize {
        if n < self.window {
            0
        } else {
            1 + (n - self.window) / self.shift
        }
    }
}

pub fn dc_remove(w: &Waveform) -> Result<Waveform> {
    if w.samples.is_empty() {
        return Err(Error::InvalidArgument("cannot remove DC from an empty waveform".into()));
    }
    let mean = w.samples.iter().sum::<f64>() / w.samples.len() as f64;
    Ok(Waveform {
        samples: w.samples.iter().map(|s| s - mean).collect(),
        sample_rate: w.sample_rate,
    })
}

/// `y[0] = x[0]`, `y[t] = x[t] - alpha * x[t-1]`.
pub fn preemphasis(w: &Waveform, alpha: f64) -> Waveform {
    let x = &w.samples;
    let samples = (0..x.len())
        .map(|t| if t == 0 { x[0] } else { x[t] - alpha * x[t - 1] })
        .collect();
    Waveform {
        samples,
        sample_rate: w.sample_rate,
    }
}

pub fn hamming(window: usize) -> Vec<f64> {
    if window == 1 {
        return vec![1.0];
    }
    (0..window)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (window - 1) as f64).cos())
        .collect()
}

pub fn frame_and_window(w: &Waveform) -> Result<Vec<Vec<f64>>> {
    let f = Framing::for_rate(w.sample_rate);
    if w.samples.len() < f.window || f.window == 0 || f.shift == 0 {
        return Err(Error::InvalidArgument(format!(
            "waveform of {} samples is shorter than one {}-sample analysis window",
            w.samples.len(),
            f.window
        )));
    }
    let win = hamming(f.window);
    Ok((0..f.frame_count(w.samples.len()))
        .map(|i| {
            let start = i * f.shift;
            w.samples[start..start + f.window]
                .iter()
                .zip(&win)
                .map(|(s, h)| s * h)
                .collect()
        })
        .collect())
}

/// Reusable |DFT|² evaluator for one transform size.
pub struct PowerSpectrum {
    nfft: usize,
    fft: Arc<dyn Fft<f64>>,
}

impl PowerSpectrum {
    pub fn new(nfft: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(nfft);
        Self { nfft, fft }
    }

    /// Squared magnitudes of bins `0..=nfft/2` of the zero-padded frame.
    pub fn compute(&self, frame: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = (0..self.nfft)
            .map(|i| Complex::new(frame.get(i).copied().unwrap_or(0.0), 0.0))
            .collect();
        self.fft.process(&mut buf);
        buf[..self.nfft / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
    }
}

pub fn power_spectrum(frame: &[f64], nfft: usize) -> Vec<f64> {
    PowerSpectrum::new(nfft).compute(frame)
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the 40 filters.
pub fn mel_centers(sample_rate: u32) -> Vec<f64> {
    mel_edges(sample_rate)[1..=N_MELS].to_vec()
}

fn mel_edges(sample_rate: u32) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (0..N_MELS + 2)
        .map(|i| mel_to_hz(top * i as f64 / (N_MELS + 1) as f64))
        .collect()
}

/// `40 × (nfft/2 + 1)` triangular filters, row-major.
pub fn mel_filterbank(sample_rate: u32, nfft: usize) -> Result<Vec<Vec<f64>>> {
    if sample_rate == 0 || nfft < 2 {
        return Err(Error::InvalidArgument("invalid sample rate or FFT size".into()));
    }
    let bins = nfft / 2 + 1;
    let edges = mel_edges(sample_rate);
    let bin_hz = sample_rate as f64 / nfft as f64;
    let mut bank = Vec::with_capacity(N_MELS);
    for m in 1..=N_MELS {
        let (lo, mid, hi) = (edges[m - 1], edges[m], edges[m + 1]);
        let row: Vec<f64> = (0..bins)
            .map(|k| {
                let f = k as f64 * bin_hz;
                if f <= lo || f >= hi {
                    0.0
                } else if f <= mid {
                    (f - lo) / (mid - lo)
                } else {
                    (hi - f) / (hi - mid)
                }
            })
            .collect();
        if row.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "FFT size {nfft} is too small for {N_MELS} mel filters at {sample_rate} Hz (filter {m} is empty)"
            )));
        }
        bank.push(row);
    }
    Ok(bank)
}

pub fn logmel(w: &Waveform) -> Result<Spectrogram> {
    let framing = Framing::for_rate(w.sample_rate);
    let centered = dc_remove(w)?;
    let emphasized = preemphasis(&centered, PREEMPHASIS);
    let frames = frame_and_window(&emphasized)?;
    let bank = mel_filterbank(w.sample_rate, framing.nfft)?;
    let ps = PowerSpectrum::new(framing.nfft);
    let mut out = Vec::with_capacity(frames.len() * N_MELS);
    for frame in &frames {
        let power = ps.compute(frame);
        for filter in &bank {
            let e: f64 = filter.iter().zip(&power).map(|(a, b)| a * b).sum();
            out.push(e.max(LOG_FLOOR).ln() as f32);
        }
    }
    Spectrogram::new(Tensor::new(vec![frames.len(), N_MELS], out)?)
}

/// Parses a 16-bit PCM mono WAV file.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let bytes = fs::read(path.as_ref()).map_err(io_err(path.as_ref()))?;
    decode_wav(&bytes)
}

pub fn decode_wav(bytes: &[u8]) -> Result<Waveform> {
    let bad = |msg: &str| Error::InvalidArgument(format!("WAV: {msg}"));
    if bytes.len() < 12 || &bytes[..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad("missing RIFF/WAVE header"));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(pos + 4) as usize;
        let body = pos + 8;
        if body + size > bytes.len() {
            return Err(Error::Truncated {
                needed: body + size,
                available: bytes.len(),
            });
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(bad("fmt chunk too short"));
                }
                fmt = Some((u16_at(body), u16_at(body + 2), u32_at(body + 4), u16_at(body + 14)));
            }
            b"data" => {
                let (format, channels, rate, bits) = fmt.ok_or_else(|| bad("data before fmt"))?;
                if format != 1 {
                    return Err(bad(&format!("compressed format {format} is not supported")));
                }
                if channels != 1 || bits != 16 {
                    return Err(bad(&format!("need mono 16-bit PCM, got {channels} ch / {bits} bit")));
                }
                let samples = bytes[body..body + size]
                    .chunks_exact(2)
                    .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
                    .collect();
                return Waveform::new(samples, rate);
            }
            _ => {}
        }
        pos = body + size + (size & 1);
    }
    Err(bad("no data chunk"))
}

/// Canonical 44-byte-header 16-bit PCM mono encoding (samples clipped to [-1, 1]).
pub fn encode_wav(w: &Waveform) -> Vec<u8> {
    let data_len = (w.samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    fs::write(path.as_ref(), encode_wav(w)).map_err(io_err(path.as_ref()))
}
