//! Stitching segment latents, decoding them to audio, and 16-bit WAV output.

use std::f64::consts::FRAC_PI_2;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{LatentShape, LatentTensor};

/// Maximum tolerated difference between overlapping halves of neighbouring segments.
pub const OVERLAP_TOLERANCE: f32 = 1e-6;

/// Audio/latent geometry of the decoder: 10 s at 16 kHz, mel 1024×64, compression 4.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderSpec {
    pub sample_rate: u32,
    pub mel_frames_per_segment: usize,
    pub mel_bins: usize,
    pub compression_factor: usize,
    pub latent_channels: usize,
    pub segment_seconds: u32,
}

impl Default for DecoderSpec {
    fn default() -> Self {
        DecoderSpec {
            sample_rate: 16_000,
            mel_frames_per_segment: 1024,
            mel_bins: 64,
            compression_factor: 4,
            latent_channels: 8,
            segment_seconds: 10,
        }
    }
}

impl DecoderSpec {
    pub fn latent_frames(&self) -> usize {
        self.mel_frames_per_segment / self.compression_factor
    }

    pub fn latent_bins(&self) -> usize {
        self.mel_bins / self.compression_factor
    }

    pub fn latent_shape(&self) -> LatentShape {
        LatentShape {
            channels: self.latent_channels,
            time_frames: self.latent_frames(),
            freq_bins: self.latent_bins(),
        }
    }

    pub fn segment_samples(&self) -> usize {
        self.sample_rate as usize * self.segment_seconds as usize
    }

    pub fn samples_per_latent_frame(&self) -> usize {
        self.segment_samples() / self.latent_frames()
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.compression_factor;
        if r == 0 || !self.mel_frames_per_segment.is_multiple_of(r) || !self.mel_bins.is_multiple_of(r) {
            return Err(Error::Config(format!(
                "mel {}x{} is not divisible by compression factor {r}",
                self.mel_frames_per_segment, self.mel_bins
            )));
        }
        if !self.segment_samples().is_multiple_of(self.latent_frames()) {
            return Err(Error::Config(format!(
                "{} samples per segment do not split evenly over {} latent frames",
                self.segment_samples(),
                self.latent_frames()
            )));
        }
        self.latent_shape().validate()
    }
}

/// Mono audio; samples are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    sample_rate: u32,
    samples: Vec<f32>,
}

impl Waveform {
    pub fn new(sample_rate: u32, samples: Vec<f32>) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Input("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Numerical {
                step: i,
                message: "non-finite audio sample".into(),
            });
        }
        Ok(Waveform { sample_rate, samples })
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }
}

/// Joins half-overlapping segment latents, keeping one copy of each shared half.
pub fn stitch_latents(zs: &[LatentTensor]) -> Result<LatentTensor> {
    let first = zs.first().ok_or_else(|| Error::Input("no latents to stitch".into()))?;
    let shape = first.shape();
    shape.validate()?;
    let (half, frames) = (shape.half_frames(), shape.time_frames);
    let mut parts = Vec::with_capacity(zs.len());
    for (k, z) in zs.iter().enumerate().skip(1) {
        if z.shape() != shape {
            return Err(Error::Shape(format!(
                "segment {k} has shape {}, segment 0 has {shape}",
                z.shape()
            )));
        }
        let deviation = z
            .slice_time(0, half)?
            .max_abs_diff(&zs[k - 1].slice_time(half, frames)?)?;
        if deviation.is_nan() || deviation > OVERLAP_TOLERANCE {
            return Err(Error::Consistency {
                index: k,
                message: format!(
                    "first half deviates from segment {}'s second half by up to {deviation:e}",
                    k - 1
                ),
            });
        }
        parts.push(z.slice_time(half, frames)?);
    }
    LatentTensor::concat_time_all(std::iter::once(first).chain(parts.iter()))
}

/// Frames of the stitched latent for `n` segments of `frames` each.
pub fn stitched_frames(n: usize, frames: usize) -> usize {
    frames + n.saturating_sub(1) * (frames / 2)
}

/// Seconds of audio for `n` half-overlapping 10 s segments: 5·(n+1).
pub fn duration_of(n_segments: usize) -> Result<f64> {
    if n_segments < 1 {
        return Err(Error::Input("at least one segment is required".into()));
    }
    Ok(5.0 * (n_segments as f64 + 1.0))
}

/// Maps a fixed-extent latent window to audio.
pub trait LatentDecoder: Send + Sync {
    fn id(&self) -> String;

    fn spec(&self) -> DecoderSpec;

    /// Decodes exactly one window of `spec().latent_shape()`, returning
    /// `latent_frames × samples_per_latent_frame` samples.
    fn decode_window(&self, window: &LatentTensor) -> Result<Vec<f32>>;
}

fn window_starts(frames: usize, window: usize) -> Vec<usize> {
    if frames <= window {
        return vec![0];
    }
    let hop = (window / 2).max(1);
    let mut starts: Vec<usize> = (0..).map(|i| i * hop).take_while(|s| s + window < frames).collect();
    starts.push(frames - window);
    starts.dedup();
    starts
}

fn pad_to(z: &LatentTensor, frames: usize) -> Result<LatentTensor> {
    let have = z.shape().time_frames;
    if have == frames {
        return Ok(z.clone());
    }
    let last = z.slice_time(have - 1, have)?;
    let mut parts = vec![z.clone()];
    parts.extend(std::iter::repeat_n(last, frames - have));
    LatentTensor::concat_time_all(parts.iter())
}

/// Decodes a latent of any length.
///
/// Latents longer than the decoder window are decoded in windows at half-window
/// hop; the audio of consecutive windows is joined with an equal-power
/// (sin/cos) crossfade over their overlap. The result always has
/// `frames × samples_per_latent_frame` samples.
pub fn decode(decoder: &dyn LatentDecoder, z: &LatentTensor) -> Result<Waveform> {
    let spec = decoder.spec();
    let expect = spec.latent_shape();
    let shape = z.shape();
    if shape.channels != expect.channels || shape.freq_bins != expect.freq_bins {
        return Err(Error::Shape(format!(
            "decoder expects {} channels × {} bins, latent is {shape}",
            expect.channels, expect.freq_bins
        )));
    }
    let window = expect.time_frames;
    let spf = spec.samples_per_latent_frame();
    let frames = shape.time_frames;
    let mut out: Vec<f32> = Vec::with_capacity(frames * spf);
    let mut covered_frames = 0usize;

    for (w, start) in window_starts(frames, window).into_iter().enumerate() {
        let end = (start + window).min(frames);
        let chunk = pad_to(&z.slice_time(start, end)?, window)?;
        let mut audio = decoder.decode_window(&chunk)?;
        if audio.len() != window * spf {
            return Err(Error::Contract {
                what: format!("decoded samples for window {w}"),
                expected: (window * spf).to_string(),
                found: audio.len().to_string(),
            });
        }
        if let Some(i) = audio.iter().position(|s| !s.is_finite()) {
            return Err(Error::Numerical {
                step: w,
                message: format!("decoder window {w} produced a non-finite sample at {i}"),
            });
        }
        audio.truncate((end - start) * spf);

        let overlap = (covered_frames.saturating_sub(start)) * spf;
        let base = start * spf;
        for (j, &s) in audio[..overlap].iter().enumerate() {
            let theta = FRAC_PI_2 * (j as f64 + 0.5) / overlap as f64;
            let old = f64::from(out[base + j]);
            out[base + j] = (old * theta.cos() + f64::from(s) * theta.sin()) as f32;
        }
        out.extend_from_slice(&audio[overlap..]);
        covered_frames = end;
    }
    debug_assert_eq!(out.len(), frames * spf);
    Waveform::new(spec.sample_rate, out)
}

/// Deterministic stand-in decoder: the channel-0 trajectory (mean over bins per
/// frame) upsampled to 625 samples per frame by linear interpolation, squashed
/// into (-1, 1) with tanh.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyDecoder {
    spec: DecoderSpec,
}

impl ToyDecoder {
    pub fn new(spec: DecoderSpec) -> Result<Self> {
        spec.validate()?;
        Ok(ToyDecoder { spec })
    }
}

impl LatentDecoder for ToyDecoder {
    fn id(&self) -> String {
        "toy-linear-upsample-tanh/v1".into()
    }

    fn spec(&self) -> DecoderSpec {
        self.spec
    }

    fn decode_window(&self, window: &LatentTensor) -> Result<Vec<f32>> {
        let shape = window.shape();
        if shape != self.spec.latent_shape() {
            return Err(Error::Shape(format!(
                "toy decoder expects {}, got {shape}",
                self.spec.latent_shape()
            )));
        }
        let bins = shape.freq_bins;
        let trajectory: Vec<f64> = window.values()[..shape.time_frames * bins]
            .chunks_exact(bins)
            .map(|frame| frame.iter().map(|&v| f64::from(v)).sum::<f64>() / bins as f64)
            .collect();
        let spf = self.spec.samples_per_latent_frame();
        let mut out = Vec::with_capacity(trajectory.len() * spf);
        for (t, &here) in trajectory.iter().enumerate() {
            let next = trajectory.get(t + 1).copied().unwrap_or(here);
            for phase in 0..spf {
                let p = phase as f64 / spf as f64;
                out.push((here + (next - here) * p).tanh() as f32);
            }
        }
        Ok(out)
    }
}

/// Header layout and quantization of the 16-bit PCM output.
pub const WAV_HEADER_BYTES: usize = 44;

/// Hard-limits to [-1, 1], scales by 32767 and rounds half to even.
pub fn quantize(sample: f32) -> i16 {
    (sample.clamp(-1.0, 1.0) * 32767.0).round_ties_even() as i16
}

/// Canonical RIFF/WAVE bytes: PCM, mono, 16-bit little-endian.
pub fn wav_bytes(w: &Waveform) -> Vec<u8> {
    let data_len = (w.samples.len() * 2) as u32;
    let rate = w.sample_rate;
    let mut out = Vec::with_capacity(WAV_HEADER_BYTES + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&rate.to_le_bytes());
    out.extend_from_slice(&(rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &w.samples {
        out.extend_from_slice(&quantize(s).to_le_bytes());
    }
    out
}

/// Writes atomically (temporary sibling, then rename).
pub fn write_wav(w: &Waveform, path: &Path) -> Result<()> {
    let bytes = wav_bytes(w);
    crate::fsutil::write_atomic_with(path, |f| f.write_all(&bytes))
}

#[derive(Debug, Clone, PartialEq)]
pub struct WavContents {
    pub sample_rate: u32,
    pub channels: u16,
    pub bits_per_sample: u16,
    /// Sample count the data chunk header declares.
    pub declared_samples: usize,
    pub samples: Vec<i16>,
}

impl WavContents {
    pub fn is_truncated(&self) -> bool {
        self.samples.len() < self.declared_samples
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }
}

/// Reads a 16-bit PCM WAV, tolerating extra chunks and reporting truncation.
pub fn read_wav(path: &Path) -> Result<WavContents> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_wav(&bytes).map_err(|message| Error::Format {
        message: format!("{}: {message}", path.display()),
        raw: None,
    })
}

fn parse_wav(bytes: &[u8]) -> std::result::Result<WavContents, String> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err("not a RIFF/WAVE file".into());
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
    let u32_at = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
    let mut pos = 12;
    let mut fmt = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let len = u32_at(pos + 4) as usize;
        let body = pos + 8;
        if id == b"fmt " {
            if body + 16 > bytes.len() {
                return Err("truncated fmt chunk".into());
            }
            if u16_at(body) != 1 {
                return Err(format!("unsupported format tag {}", u16_at(body)));
            }
            fmt = Some((u16_at(body + 2), u32_at(body + 4), u16_at(body + 14)));
        } else if id == b"data" {
            let (channels, sample_rate, bits) = fmt.ok_or("data chunk before fmt chunk")?;
            if bits != 16 {
                return Err(format!("expected 16-bit samples, found {bits}"));
            }
            let available = bytes.len().saturating_sub(body).min(len);
            let samples = bytes[body..body + available - available % 2]
                .chunks_exact(2)
                .map(|b| i16::from_le_bytes([b[0], b[1]]))
                .collect();
            return Ok(WavContents {
                sample_rate,
                channels,
                bits_per_sample: bits,
                declared_samples: len / 2,
                samples,
            });
        }
        pos = body + len + (len & 1);
    }
    Err("no data chunk".into())
}
