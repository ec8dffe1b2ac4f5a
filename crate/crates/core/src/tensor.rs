//! Latent arrays laid out as (channel, time, frequency), row-major.
//!
//! Only the handful of operations the pipeline needs: seeded Gaussian
//! sampling, time slicing and time concatenation. Slices are copies.

use std::fmt;

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifier of the pseudo-random generator behind every Gaussian draw.
/// Bump the suffix whenever the draw order or algorithm changes.
pub const NOISE_GENERATOR_ID: &str = "xoshiro256pp-ziggurat-f64/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentShape {
    pub channels: usize,
    pub time_frames: usize,
    pub freq_bins: usize,
}

impl LatentShape {
    /// The composition latent: 8 channels, 256 frames, 16 bins (10 s of audio).
    pub const DEFAULT: LatentShape = LatentShape {
        channels: 8,
        time_frames: 256,
        freq_bins: 16,
    };

    pub fn new(channels: usize, time_frames: usize, freq_bins: usize) -> Result<Self> {
        let shape = LatentShape {
            channels,
            time_frames,
            freq_bins,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.time_frames == 0 || self.freq_bins == 0 {
            return Err(Error::Shape(format!("all dimensions must be positive, got {self}")));
        }
        if !self.time_frames.is_multiple_of(2) {
            return Err(Error::Shape(format!("time_frames must be even, got {self}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.channels * self.time_frames * self.freq_bins
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn half_frames(&self) -> usize {
        self.time_frames / 2
    }

    pub fn with_time_frames(&self, time_frames: usize) -> LatentShape {
        LatentShape { time_frames, ..*self }
    }
}

impl fmt::Display for LatentShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.channels, self.time_frames, self.freq_bins)
    }
}

/// A finite-valued latent tensor stored as `f32`.
///
/// `time_frames` is not required to be even here: stitched latents and
/// arbitrary slices are valid tensors. Even length is enforced where the
/// half-overlap arithmetic needs it.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    shape: LatentShape,
    values: Vec<f32>,
}

impl LatentTensor {
    pub fn from_values(shape: LatentShape, values: Vec<f32>) -> Result<Self> {
        if shape.channels == 0 || shape.time_frames == 0 || shape.freq_bins == 0 {
            return Err(Error::Shape(format!("all dimensions must be positive, got {shape}")));
        }
        if values.len() != shape.len() {
            return Err(Error::Shape(format!(
                "shape {shape} needs {} values, got {}",
                shape.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite latent value at flat index {i}")));
        }
        Ok(LatentTensor { shape, values })
    }

    /// Builds a tensor without the finiteness scan. Callers guarantee the invariants.
    pub(crate) fn from_parts_unchecked(shape: LatentShape, values: Vec<f32>) -> Self {
        debug_assert_eq!(values.len(), shape.len());
        LatentTensor { shape, values }
    }

    pub fn zeros(shape: LatentShape) -> Self {
        LatentTensor {
            shape,
            values: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: LatentShape, value: f32) -> Result<Self> {
        LatentTensor::from_values(shape, vec![value; shape.len()])
    }

    pub fn shape(&self) -> LatentShape {
        self.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn get(&self, channel: usize, frame: usize, bin: usize) -> f32 {
        self.values[self.index(channel, frame, bin)]
    }

    fn index(&self, channel: usize, frame: usize, bin: usize) -> usize {
        (channel * self.shape.time_frames + frame) * self.shape.freq_bins + bin
    }

    /// Frames `[from, to)` as a new tensor.
    pub fn slice_time(&self, from: usize, to: usize) -> Result<LatentTensor> {
        let frames = self.shape.time_frames;
        if from >= to || to > frames {
            return Err(Error::Range(format!(
                "time slice [{from}, {to}) invalid for {frames} frames"
            )));
        }
        let shape = self.shape.with_time_frames(to - from);
        let bins = self.shape.freq_bins;
        let mut values = Vec::with_capacity(shape.len());
        for c in 0..self.shape.channels {
            let start = self.index(c, from, 0);
            values.extend_from_slice(&self.values[start..start + (to - from) * bins]);
        }
        Ok(LatentTensor { shape, values })
    }

    /// `a` followed by `b` along the time axis.
    pub fn concat_time(a: &LatentTensor, b: &LatentTensor) -> Result<LatentTensor> {
        LatentTensor::concat_time_all([a, b])
    }

    pub fn concat_time_all<'a, I>(parts: I) -> Result<LatentTensor>
    where
        I: IntoIterator<Item = &'a LatentTensor>,
    {
        let parts: Vec<&LatentTensor> = parts.into_iter().collect();
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("nothing to concatenate".into()))?;
        let (channels, bins) = (first.shape.channels, first.shape.freq_bins);
        for p in &parts[1..] {
            if p.shape.channels != channels || p.shape.freq_bins != bins {
                return Err(Error::Shape(format!(
                    "cannot concatenate {} with {} along time",
                    first.shape, p.shape
                )));
            }
        }
        let frames: usize = parts.iter().map(|p| p.shape.time_frames).sum();
        let shape = first.shape.with_time_frames(frames);
        let mut values = Vec::with_capacity(shape.len());
        for c in 0..channels {
            for p in &parts {
                let span = p.shape.time_frames * bins;
                values.extend_from_slice(&p.values[c * span..(c + 1) * span]);
            }
        }
        Ok(LatentTensor { shape, values })
    }

    /// Canonical byte form: every value as little-endian `f32`, in storage order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(shape: LatentShape, bytes: &[u8]) -> Result<LatentTensor> {
        if bytes.len() != shape.len() * 4 {
            return Err(Error::Shape(format!(
                "shape {shape} needs {} bytes, got {}",
                shape.len() * 4,
                bytes.len()
            )));
        }
        let values = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        LatentTensor::from_values(shape, values)
    }

    /// 64-bit FNV-1a over the canonical little-endian bytes.
    pub fn checksum(&self) -> u64 {
        let mut hash = Fnv1a::new();
        for v in &self.values {
            hash.write(&v.to_le_bytes());
        }
        hash.finish()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference. Shapes must agree.
    pub fn max_abs_diff(&self, other: &LatentTensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "cannot compare {} with {}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }
}

/// Free-function form of [`LatentTensor::slice_time`].
pub fn slice_time(x: &LatentTensor, from: usize, to: usize) -> Result<LatentTensor> {
    x.slice_time(from, to)
}

/// Free-function form of [`LatentTensor::concat_time`].
pub fn concat_time(a: &LatentTensor, b: &LatentTensor) -> Result<LatentTensor> {
    LatentTensor::concat_time(a, b)
}

/// I.i.d. standard normal entries; a pure function of `(shape, seed)`.
pub fn seeded_gaussian(shape: LatentShape, seed: u64) -> LatentTensor {
    NoiseStream::new(seed).gaussian(shape)
}

/// Sequential Gaussian draws from the pinned generator.
pub struct NoiseStream {
    rng: Xoshiro256PlusPlus,
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        NoiseStream {
            rng: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    #[inline]
    pub fn next_standard(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn fill(&mut self, out: &mut [f32]) {
        // Working on a local copy keeps the generator state in registers.
        let mut rng = self.rng.clone();
        for v in out {
            let x: f64 = StandardNormal.sample(&mut rng);
            *v = x as f32;
        }
        self.rng = rng;
    }

    /// Same draws as repeated [`next_standard`](Self::next_standard), in order.
    pub fn fill_f64(&mut self, out: &mut [f64]) {
        let mut rng = self.rng.clone();
        for v in out {
            *v = StandardNormal.sample(&mut rng);
        }
        self.rng = rng;
    }

    pub fn gaussian(&mut self, shape: LatentShape) -> LatentTensor {
        let mut values = vec![0.0f32; shape.len()];
        self.fill(&mut values);
        LatentTensor::from_parts_unchecked(shape, values)
    }
}

/// 64-bit FNV-1a.
#[derive(Debug, Clone, Copy)]
pub struct Fnv1a(u64);

impl Fnv1a {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;

    pub fn new() -> Self {
        Fnv1a(Self::OFFSET)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(Self::PRIME);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }

    pub fn hash(bytes: &[u8]) -> u64 {
        let mut h = Fnv1a::new();
        h.write(bytes);
        h.finish()
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Fnv1a::new()
    }
}
