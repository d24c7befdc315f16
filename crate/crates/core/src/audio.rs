//! Audio ingestion, resampling and the 80-channel log-mel front-end.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const N_FFT: usize = 400;
pub const HOP: usize = 160;
pub const N_MELS: usize = 80;
pub const LOG_FLOOR: f64 = 1e-10;
/// Dynamic range kept below the global maximum, in log10 units.
pub const DYNAMIC_RANGE: f64 = 8.0;

pub const WMEL_MAGIC: &[u8; 4] = b"WMEL";

#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioClip {
    /// Builds a clip, clamping samples into [-1, 1]. Non-finite samples and a
    /// zero sample rate are rejected.
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample_rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("audio sample {i}")));
        }
        let samples = samples.into_iter().map(|s| s.clamp(-1.0, 1.0)).collect();
        Ok(AudioClip { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Samples covering `[start_s, end_s)`, clipped to the clip bounds.
    pub fn slice_seconds(&self, start_s: f64, end_s: f64) -> AudioClip {
        let sr = self.sample_rate as f64;
        let a = ((start_s * sr).round().max(0.0) as usize).min(self.samples.len());
        let b = ((end_s * sr).round().max(0.0) as usize).clamp(a, self.samples.len());
        AudioClip {
            samples: self.samples[a..b].to_vec(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Loads a 16-bit PCM WAV file; multi-channel audio is averaged to mono.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_wav_from(std::io::BufReader::new(file))
}

pub fn read_wav_from<R: Read>(reader: R) -> Result<AudioClip> {
    let mut wav = hound::WavReader::new(reader)?;
    let spec = wav.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::InvalidInput(format!(
            "only 16-bit PCM WAV is supported (got {:?} {}-bit)",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let channels = spec.channels.max(1) as usize;
    let raw: Vec<i16> = wav.samples::<i16>().collect::<std::result::Result<_, _>>()?;
    let samples = raw
        .chunks(channels)
        .map(|frame| {
            let sum: f32 = frame.iter().map(|&s| s as f32 / 32768.0).sum();
            sum / frame.len() as f32
        })
        .collect();
    AudioClip::new(samples, spec.sample_rate)
}

/// Writes a mono 16-bit PCM WAV.
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in &clip.samples {
        w.write_sample((s * 32767.0).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}

/// Windowed-sinc (Hann) band-limited resampling.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if clip.is_empty() {
        return Err(Error::EmptyClip);
    }
    if target_rate == 0 {
        return Err(Error::InvalidInput("target_rate must be positive".into()));
    }
    if target_rate == clip.sample_rate {
        return Ok(clip.clone());
    }
    let src_rate = clip.sample_rate as f64;
    let ratio = target_rate as f64 / src_rate;
    let n_out = (clip.len() as f64 * ratio).round() as usize;
    // Cutoff relative to the input Nyquist; below 1 when downsampling.
    let cutoff = ratio.min(1.0) * 0.97;
    const ZERO_CROSSINGS: f64 = 16.0;
    let half_width = ZERO_CROSSINGS / cutoff;
    let x = &clip.samples;

    let out = (0..n_out)
        .map(|n| {
            let t = n as f64 / ratio;
            let lo = ((t - half_width).ceil().max(0.0)) as usize;
            let hi = ((t + half_width).floor() as usize).min(x.len() - 1);
            let mut acc = 0.0;
            for (k, &xk) in x.iter().enumerate().take(hi + 1).skip(lo) {
                let d = t - k as f64;
                let w = 0.5 + 0.5 * (PI * d / half_width).cos();
                acc += xk as f64 * cutoff * sinc(cutoff * d) * w;
            }
            acc.clamp(-1.0, 1.0) as f32
        })
        .collect();
    AudioClip::new(out, target_rate)
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Centre frequency of each mel channel, in Hz.
pub fn mel_centers_hz(n_mels: usize, sample_rate: u32) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (1..=n_mels)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Triangular filters, `n_mels x (n_fft/2 + 1)`, row-major, peak weight 1.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_bins: usize,
    pub weights: Vec<f64>,
}

impl MelFilterbank {
    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    /// Applies the filterbank to one power spectrum.
    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        assert_eq!(power.len(), self.n_bins);
        (0..self.n_mels)
            .map(|m| self.row(m).iter().zip(power).map(|(w, p)| w * p).sum())
            .collect()
    }
}

pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Result<MelFilterbank> {
    if n_mels == 0 {
        return Err(Error::InvalidInput("n_mels must be at least 1".into()));
    }
    if n_fft == 0 || !n_fft.is_multiple_of(2) {
        return Err(Error::InvalidInput(format!("n_fft must be even and positive, got {n_fft}")));
    }
    let n_bins = n_fft / 2 + 1;
    if n_mels > n_bins {
        return Err(Error::InvalidInput(format!(
            "n_mels {n_mels} exceeds the {n_bins} FFT bins of n_fft {n_fft}"
        )));
    }
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut weights = vec![0.0; n_mels * n_bins];
    for m in 0..n_mels {
        let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * sample_rate as f64 / n_fft as f64;
            let w = ((f - lo) / (c - lo)).min((hi - f) / (hi - c));
            weights[m * n_bins + k] = w.max(0.0);
        }
    }
    Ok(MelFilterbank {
        n_mels,
        n_bins,
        weights,
    })
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Number of analysis frames for `n_samples` with no padding.
pub fn frame_count(n_samples: usize) -> usize {
    if n_samples < N_FFT {
        0
    } else {
        1 + (n_samples - N_FFT) / HOP
    }
}

/// Log-mel features, `frames x n_mels`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    frames: usize,
    n_mels: usize,
    values: Vec<f32>,
}

impl MelSpectrogram {
    pub fn new(frames: usize, n_mels: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != frames * n_mels {
            return Err(Error::InvalidInput(format!(
                "mel values length {} does not match {frames} x {n_mels}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("mel value {i}")));
        }
        Ok(MelSpectrogram { frames, n_mels, values })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.values[t * self.n_mels..(t + 1) * self.n_mels]
    }

    /// Feature dump: magic, u32 frames, u32 n_mels, then row-major f32, all LE.
    pub fn write_to<W: Write + ?Sized>(&self, w: &mut W) -> Result<()> {
        w.write_all(WMEL_MAGIC)?;
        w.write_all(&(self.frames as u32).to_le_bytes())?;
        w.write_all(&(self.n_mels as u32).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.values.len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Reads one WMEL block; `base_offset` is only used for diagnostics.
    pub fn read_from<R: Read>(r: &mut R, base_offset: u64) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact_at(r, &mut magic, "WMEL", base_offset)?;
        if &magic != WMEL_MAGIC {
            return Err(Error::Format {
                format: "WMEL",
                offset: base_offset,
                reason: format!("bad magic {magic:?}"),
            });
        }
        let frames = read_u32_at(r, "WMEL", base_offset + 4)? as usize;
        let n_mels = read_u32_at(r, "WMEL", base_offset + 8)? as usize;
        let n = frames.checked_mul(n_mels).ok_or_else(|| Error::Format {
            format: "WMEL",
            offset: base_offset + 4,
            reason: "dimension overflow".into(),
        })?;
        let mut buf = vec![0u8; n * 4];
        read_exact_at(r, &mut buf, "WMEL", base_offset + 12)?;
        let values = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        MelSpectrogram::new(frames, n_mels, values)
    }
}

pub(crate) fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], format: &'static str, offset: u64) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::Format {
        format,
        offset,
        reason: e.to_string(),
    })
}

pub(crate) fn read_u32_at<R: Read>(r: &mut R, format: &'static str, offset: u64) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_at(r, &mut b, format, offset)?;
    Ok(u32::from_le_bytes(b))
}

/// Short-time power spectra, one `n_fft/2 + 1` row per frame.
pub fn power_spectrogram(samples: &[f32]) -> Vec<Vec<f64>> {
    let frames = frame_count(samples.len());
    let window = hann_window(N_FFT);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(N_FFT);
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    (0..frames)
        .map(|t| {
            let start = t * HOP;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(samples[start + i] as f64 * window[i], 0.0);
            }
            fft.process(&mut buf);
            buf[..N_FFT / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
        })
        .collect()
}

/// Pre-normalization `log10(max(mel power, floor))`, `frames x 80`.
pub fn log_mel_raw(clip: &AudioClip) -> Result<Vec<Vec<f64>>> {
    if clip.sample_rate() != SAMPLE_RATE {
        return Err(Error::InvalidInput(format!(
            "log_mel expects {SAMPLE_RATE} Hz input, got {} Hz; resample first",
            clip.sample_rate()
        )));
    }
    if clip.len() < N_FFT {
        return Err(Error::ClipTooShort {
            got: clip.len(),
            need: N_FFT,
        });
    }
    let fb = mel_filterbank(N_MELS, N_FFT, SAMPLE_RATE)?;
    Ok(power_spectrogram(clip.samples())
        .iter()
        .map(|p| fb.apply(p).into_iter().map(|m| m.max(LOG_FLOOR).log10()).collect())
        .collect())
}

/// Compresses dynamic range to `DYNAMIC_RANGE` below the global max, then
/// shifts and scales into roughly [-1, 1].
pub fn normalize_log_mel(raw: &[Vec<f64>]) -> Vec<f32> {
    let gmax = raw
        .iter()
        .flatten()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    raw.iter()
        .flatten()
        .map(|&x| ((x.max(gmax - DYNAMIC_RANGE) + 4.0) / 4.0) as f32)
        .collect()
}

pub fn log_mel(clip: &AudioClip) -> Result<MelSpectrogram> {
    let raw = log_mel_raw(clip)?;
    let frames = raw.len();
    MelSpectrogram::new(frames, N_MELS, normalize_log_mel(&raw))
}
