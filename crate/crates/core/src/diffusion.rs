//! Text-conditioned latent sampling with outpainting across segments.
//!
//! Each new segment starts from `concat(z_prev[:, T/2:, :], eps[:, :T/2, :])`.
//! While denoising, the first T/2 frames are held to the previous segment's
//! second half, forward-noised to the level of the step being entered, and
//! clamped exactly once the chain reaches t = 0. Consecutive latents
//! therefore share their overlapping half bit for bit.

use serde::{Deserialize, Serialize};

use crate::conditioning::ConditioningVector;
use crate::error::{Error, Result};
use crate::tensor::{concat_time, Fnv1a, LatentShape, LatentTensor, NoiseStream};

/// How often (in steps) the running latent is scanned for NaN/Inf.
pub const FINITE_CHECK_INTERVAL: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub clamp_final_step: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            num_steps: 1000,
            beta_start: 1.0e-4,
            beta_end: 2.0e-2,
            clamp_final_step: true,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn with_seed(self, seed: u64) -> Self {
        SamplerConfig { seed, ..self }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.num_steps, self.beta_start, self.beta_end)
    }
}

/// Linear beta schedule with its cumulative products.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::Config("num_steps must be at least 1".into()));
        }
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !in_unit(beta_start) || !in_unit(beta_end) {
            return Err(Error::Config(format!(
                "betas must lie in (0, 1), got {beta_start}..{beta_end}"
            )));
        }
        if num_steps > 1 && beta_end <= beta_start {
            return Err(Error::Config(format!(
                "beta schedule must increase, got {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..num_steps)
            .map(|i| {
                if num_steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (num_steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(num_steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn timestep(&self, t: usize) -> Timestep {
        Timestep {
            index: t,
            num_steps: self.len(),
            alpha_bar: self.alpha_bars[t],
        }
    }

    /// Variance of the ancestral step from t to t-1 (the forward-process posterior variance).
    pub fn posterior_variance(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.betas[t] * (1.0 - self.alpha_bars[t - 1]) / (1.0 - self.alpha_bars[t])
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timestep {
    /// 0-based; sampling runs from `num_steps - 1` down to 0.
    pub index: usize,
    pub num_steps: usize,
    pub alpha_bar: f64,
}

/// A noise-predicting denoiser over latents of one fixed shape.
pub trait DiffusionBackend: Send + Sync {
    fn id(&self) -> String;

    fn latent_shape(&self) -> LatentShape;

    /// ε̂(x_t, t, v): must return a tensor of `x`'s shape.
    fn predict_noise(&self, x: &LatentTensor, t: Timestep, v: &ConditioningVector) -> Result<LatentTensor>;
}

/// Known-region indicator: the first T/2 frames of a segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mask {
    segment: LatentShape,
}

impl Mask {
    pub fn half_window(segment: LatentShape) -> Result<Mask> {
        segment.validate()?;
        Ok(Mask { segment })
    }

    pub fn segment_shape(&self) -> LatentShape {
        self.segment
    }

    pub fn known_frames(&self) -> usize {
        self.segment.half_frames()
    }

    /// Shape of the known region, e.g. (8,128,16) for the default segment.
    pub fn extent(&self) -> LatentShape {
        self.segment.with_time_frames(self.known_frames())
    }

    pub fn is_known(&self, frame: usize) -> bool {
        frame < self.known_frames()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnownRegion {
    latent_half: LatentTensor,
    mask: Mask,
}

impl KnownRegion {
    pub fn new(latent_half: LatentTensor, mask: Mask) -> Result<Self> {
        if latent_half.shape() != mask.extent() {
            return Err(Error::Shape(format!(
                "known half {} does not match mask extent {}",
                latent_half.shape(),
                mask.extent()
            )));
        }
        Ok(KnownRegion { latent_half, mask })
    }

    /// Second half of `previous` as the known start of the next segment.
    pub fn continuing(previous: &LatentTensor) -> Result<Self> {
        let shape = previous.shape();
        let mask = Mask::half_window(shape)?;
        KnownRegion::new(previous.slice_time(shape.half_frames(), shape.time_frames)?, mask)
    }

    pub fn latent_half(&self) -> &LatentTensor {
        &self.latent_half
    }

    pub fn mask(&self) -> Mask {
        self.mask
    }
}

/// `concat(z_prev[:, T/2:, :], eps[:, :T/2, :])`.
pub fn build_outpaint_init(z_prev: &LatentTensor, eps: &LatentTensor) -> Result<LatentTensor> {
    let shape = z_prev.shape();
    if eps.shape() != shape {
        return Err(Error::Shape(format!(
            "previous latent {shape} and noise {} differ",
            eps.shape()
        )));
    }
    shape.validate()?;
    let half = shape.half_frames();
    concat_time(&z_prev.slice_time(half, shape.time_frames)?, &eps.slice_time(0, half)?)
}

/// Per-segment noise seed derived from the composition seed.
pub fn segment_seed(seed: u64, index: usize) -> u64 {
    let mut h = Fnv1a::new();
    h.write(&seed.to_le_bytes());
    h.write(&(index as u64).to_le_bytes());
    splitmix64(h.finish())
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Overwrites the known frames of `x` with `sqrt(ab)·half + sqrt(1-ab)·n`, or with
/// `half` itself. `n` is the step's full-size draw at the same positions, which the
/// ancestral update would otherwise have spent on values that get overwritten here.
fn impose_known(x: &mut [f32], shape: LatentShape, half: &LatentTensor, renoise: Option<(f64, &[f64])>) {
    let bins = shape.freq_bins;
    let known = half.shape().time_frames * bins;
    let span = shape.time_frames * bins;
    let src = half.values();
    for c in 0..shape.channels {
        let dst = &mut x[c * span..c * span + known];
        let src = &src[c * known..(c + 1) * known];
        match renoise {
            Some((ab, n)) => {
                let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
                let n = &n[c * span..c * span + known];
                for ((d, &k), &z) in dst.iter_mut().zip(src).zip(n) {
                    *d = (a * f64::from(k) + s * z) as f32;
                }
            }
            None => dst.copy_from_slice(src),
        }
    }
}

/// Ancestral DDPM sampling from `t = num_steps - 1` down to 0.
///
/// Without `known`, the chain starts from seeded Gaussian noise. With it, the
/// chain starts from the outpainting concatenation and the known frames are
/// re-imposed after every step (see the module docs).
pub fn sample(
    backend: &dyn DiffusionBackend,
    v: &ConditioningVector,
    config: &SamplerConfig,
    known: Option<&KnownRegion>,
) -> Result<LatentTensor> {
    let schedule = config.schedule()?;
    let shape = backend.latent_shape();
    shape.validate()?;
    if let Some(k) = known {
        if k.mask.segment_shape() != shape {
            return Err(Error::Shape(format!(
                "mask is for segments {}, backend produces {shape}",
                k.mask.segment_shape()
            )));
        }
    }

    let mut noise = NoiseStream::new(config.seed);
    let eps = noise.gaussian(shape);
    let mut x = match known {
        Some(k) => concat_time(k.latent_half(), &eps.slice_time(0, shape.half_frames())?)?,
        None => eps,
    };

    let mut draws = vec![0.0f64; shape.len()];
    let steps = schedule.len();
    for t in (0..steps).rev() {
        let eps_hat = backend.predict_noise(&x, schedule.timestep(t), v)?;
        if eps_hat.shape() != shape {
            return Err(Error::Contract {
                what: format!("noise prediction shape at step {t}"),
                expected: shape.to_string(),
                found: eps_hat.shape().to_string(),
            });
        }
        let beta = schedule.beta(t);
        let alpha_bar = schedule.alpha_bar(t);
        let inv_sqrt_alpha = 1.0 / (1.0 - beta).sqrt();
        let eps_coef = beta / (1.0 - alpha_bar).sqrt();
        let sigma = schedule.posterior_variance(t).sqrt();

        let mut values = x.into_values();
        if t > 0 {
            noise.fill_f64(&mut draws);
            for ((xv, &e), &z) in values.iter_mut().zip(eps_hat.values()).zip(&draws) {
                let mean = (f64::from(*xv) - eps_coef * f64::from(e)) * inv_sqrt_alpha;
                *xv = (mean + sigma * z) as f32;
            }
        } else {
            for (xv, &e) in values.iter_mut().zip(eps_hat.values()) {
                *xv = ((f64::from(*xv) - eps_coef * f64::from(e)) * inv_sqrt_alpha) as f32;
            }
        }
        if let Some(k) = known {
            if t > 0 {
                impose_known(
                    &mut values,
                    shape,
                    k.latent_half(),
                    Some((schedule.alpha_bar(t - 1), &draws)),
                );
            } else if config.clamp_final_step {
                impose_known(&mut values, shape, k.latent_half(), None);
            }
        }

        let done = steps - t;
        if done % FINITE_CHECK_INTERVAL == 0 || t == 0 {
            if let Some(i) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical {
                    step: t,
                    message: format!("non-finite latent value at flat index {i}"),
                });
            }
        }
        x = LatentTensor::from_parts_unchecked(shape, values);
    }
    Ok(x)
}

/// Generates segments `first..vs.len()`, continuing from `previous` (the latent of
/// segment `first - 1`) when given. `on_segment` sees each latent as soon as it exists.
pub fn generate_sequence_from<F>(
    backend: &dyn DiffusionBackend,
    vs: &[ConditioningVector],
    config: &SamplerConfig,
    first: usize,
    previous: Option<&LatentTensor>,
    mut on_segment: F,
) -> Result<Vec<LatentTensor>>
where
    F: FnMut(usize, u64, &LatentTensor) -> Result<()>,
{
    if vs.is_empty() {
        return Err(Error::Input("no conditioning vectors to generate from".into()));
    }
    if first > 0 && previous.is_none() {
        return Err(Error::Input(format!(
            "continuing at segment {first} needs the latent of segment {}",
            first - 1
        )));
    }
    let mut out: Vec<LatentTensor> = Vec::with_capacity(vs.len().saturating_sub(first));
    let mut prev = previous.cloned();
    for (k, v) in vs.iter().enumerate().skip(first) {
        let seed = segment_seed(config.seed, k);
        let known = prev.as_ref().map(KnownRegion::continuing).transpose()?;
        let z =
            sample(backend, v, &config.with_seed(seed), known.as_ref()).map_err(|e| e.at_stage("sampling", Some(k)))?;
        on_segment(k, seed, &z)?;
        prev = Some(z.clone());
        out.push(z);
    }
    Ok(out)
}

/// `[z_0, …, z_{N-1}]`: z_0 from pure noise, every later segment outpainted from its predecessor.
pub fn generate_sequence(
    backend: &dyn DiffusionBackend,
    vs: &[ConditioningVector],
    config: &SamplerConfig,
) -> Result<Vec<LatentTensor>> {
    generate_sequence_from(backend, vs, config, 0, None, |_, _, _| Ok(()))
}

/// Per-entry mean of the toy data distribution as a function of the conditioning vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeanMap {
    Constant {
        value: f64,
    },
    /// `scale · sqrt(512) · v[(c·F + f) mod 512]`, constant over time.
    Projection {
        scale: f64,
    },
}

impl MeanMap {
    /// Mean per (channel, bin), identical for every frame.
    fn rows(&self, shape: LatentShape, v: &ConditioningVector) -> Vec<f64> {
        let n = shape.channels * shape.freq_bins;
        match *self {
            MeanMap::Constant { value } => vec![value; n],
            MeanMap::Projection { scale } => {
                let vals = v.values();
                let gain = scale * (vals.len() as f64).sqrt();
                (0..n).map(|i| gain * f64::from(vals[i % vals.len()])).collect()
            }
        }
    }

    fn fill(&self, shape: LatentShape, v: &ConditioningVector, out: &mut Vec<f64>) {
        let rows = self.rows(shape, v);
        let bins = shape.freq_bins;
        out.clear();
        for c in 0..shape.channels {
            for _ in 0..shape.time_frames {
                out.extend_from_slice(&rows[c * bins..(c + 1) * bins]);
            }
        }
    }
}

/// Exact noise predictor for data drawn from N(μ(v), σ²I).
///
/// With x_t = √ᾱ x_0 + √(1-ᾱ) ε the posterior mean is
/// E[x_0|x_t] = (√ᾱ σ² x_t + (1-ᾱ) μ) / (ᾱ σ² + 1 - ᾱ),
/// and ε̂ = (x_t - √ᾱ E[x_0|x_t]) / √(1-ᾱ).
#[derive(Debug, Clone, PartialEq)]
pub struct ToyGaussianBackend {
    shape: LatentShape,
    mean: MeanMap,
    sigma: f64,
}

impl ToyGaussianBackend {
    pub fn new(shape: LatentShape, mean: MeanMap, sigma: f64) -> Result<Self> {
        shape.validate()?;
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!(
                "toy backend sigma must be positive, got {sigma}"
            )));
        }
        Ok(ToyGaussianBackend { shape, mean, sigma })
    }

    /// The pipeline default: projection mean at scale 0.5, σ = 0.2, default latent shape.
    pub fn composition_default() -> Self {
        ToyGaussianBackend::new(LatentShape::DEFAULT, MeanMap::Projection { scale: 0.5 }, 0.2).expect("valid defaults")
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn mean_map(&self) -> MeanMap {
        self.mean
    }

    pub fn mean_for(&self, v: &ConditioningVector) -> Vec<f64> {
        let mut out = Vec::new();
        self.mean.fill(self.shape, v, &mut out);
        out
    }
}

impl DiffusionBackend for ToyGaussianBackend {
    fn id(&self) -> String {
        format!(
            "toy-gaussian/v1 mean={} sigma={}",
            serde_json::to_string(&self.mean).expect("mean map serializes"),
            self.sigma
        )
    }

    fn latent_shape(&self) -> LatentShape {
        self.shape
    }

    fn predict_noise(&self, x: &LatentTensor, t: Timestep, v: &ConditioningVector) -> Result<LatentTensor> {
        if x.shape() != self.shape {
            return Err(Error::Shape(format!(
                "toy backend expects {}, got {}",
                self.shape,
                x.shape()
            )));
        }
        let ab = t.alpha_bar;
        let var = self.sigma * self.sigma;
        let den = ab * var + (1.0 - ab);
        let sqrt_ab = ab.sqrt();
        let sqrt_one_minus = (1.0 - ab).sqrt();
        // ε̂ = x·(1 - √ᾱ·√ᾱσ²/den)/√(1-ᾱ) - μ·√ᾱ(1-ᾱ)/(den·√(1-ᾱ))
        let cx = (1.0 - sqrt_ab * sqrt_ab * var / den) / sqrt_one_minus;
        let cm = -sqrt_ab * (1.0 - ab) / (den * sqrt_one_minus);
        // The mean varies over (channel, bin) only; walk x one frame row at a time.
        let rows = self.mean.rows(self.shape, v);
        let bins = self.shape.freq_bins;
        let frames = self.shape.time_frames;
        let mut values = Vec::with_capacity(x.values().len());
        for (i, row) in x.values().chunks_exact(bins).enumerate() {
            let c = i / frames;
            let mean = &rows[c * bins..(c + 1) * bins];
            values.extend(
                row.iter()
                    .zip(mean)
                    .map(|(&xv, &m)| (cx * f64::from(xv) + cm * m) as f32),
            );
        }
        Ok(LatentTensor::from_parts_unchecked(self.shape, values))
    }
}

/// Free-function constructor matching the other toy components.
pub fn toy_gaussian_backend(shape: LatentShape, mean: MeanMap, sigma: f64) -> Result<ToyGaussianBackend> {
    ToyGaussianBackend::new(shape, mean, sigma)
}
