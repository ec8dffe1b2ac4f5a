//! Pages → prompts → conditioning vectors → latent chain → stitched audio.
//!
//! A run persists every segment latent to `<work>/segments/z_<k>.bin` (plus a
//! `.meta.json` sidecar) and keeps the manifest marked `incomplete` until the
//! WAV has been written, so an interrupted run can be resumed without
//! recomputing verified segments.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::Utc;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::audio::{decode, duration_of, stitch_latents, write_wav, DecoderSpec, LatentDecoder, ToyDecoder};
use crate::checkpoint::{CheckpointConfig, CheckpointSession};
use crate::conditioning::{encode, ConditioningVector, StubEncoder, TextEncoder};
use crate::diffusion::{generate_sequence_from, segment_seed, DiffusionBackend, SamplerConfig, ToyGaussianBackend};
use crate::error::{Error, Result};
use crate::fsutil::{write_atomic, DirLock};
use crate::prompts::{build_corpus, load_corpus, PromptCorpus, ScorePage, StylePrefix, PROMPTS_PER_PAGE};
use crate::tensor::{LatentShape, LatentTensor, NOISE_GENERATOR_ID};
use crate::vision::{FixtureClient, ServiceClient, ServiceConfig, VisionClient, INSTRUCTION_VERSION};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const CHECKSUM_ID: &str = "fnv1a-64/f32le";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageRange {
    pub first: u32,
    pub last: u32,
}

impl PageRange {
    pub fn new(first: u32, last: u32) -> Result<Self> {
        let range = PageRange { first, last };
        range.validate()?;
        Ok(range)
    }

    pub fn validate(&self) -> Result<()> {
        if self.first == 0 || self.first > self.last {
            return Err(Error::Input(format!(
                "page range {}-{} is empty (pages start at 1, first ≤ last)",
                self.first, self.last
            )));
        }
        Ok(())
    }

    /// Parses `A:B` (or `A-B`).
    pub fn parse(text: &str) -> Result<Self> {
        let (a, b) = text
            .split_once([':', '-'])
            .ok_or_else(|| Error::Input(format!("page range {text:?} is not of the form A:B")))?;
        let num = |s: &str| {
            s.trim()
                .parse::<u32>()
                .map_err(|_| Error::Input(format!("page range {text:?}: {s:?} is not a page number")))
        };
        PageRange::new(num(a)?, num(b)?)
    }

    pub fn pages(&self) -> impl Iterator<Item = u32> {
        self.first..=self.last
    }

    pub fn len(&self) -> usize {
        (self.last - self.first + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl Default for PageRange {
    fn default() -> Self {
        PageRange { first: 1, last: 33 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisionChoice {
    #[default]
    Fixture,
    Service,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    #[default]
    Toy,
    Checkpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceSettings {
    pub base_url: String,
    pub model: String,
    pub concurrency: usize,
}

impl Default for ServiceSettings {
    fn default() -> Self {
        let d = ServiceConfig::default();
        ServiceSettings {
            base_url: d.base_url,
            model: d.model,
            concurrency: 4,
        }
    }
}

/// Everything that determines a composition. Also the schema of the JSON config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompositionConfig {
    pub pages_dir: Option<PathBuf>,
    pub corpus_path: Option<PathBuf>,
    /// Defaults to 1–33 for page images and to every corpus page otherwise.
    pub page_range: Option<PageRange>,
    /// Overrides the corpus prefix when set.
    pub prefix: Option<String>,
    pub vision: VisionChoice,
    pub service: ServiceSettings,
    pub backend: ModelChoice,
    pub decoder: ModelChoice,
    pub checkpoint: CheckpointConfig,
    pub sampler: SamplerConfig,
    pub output_wav_path: PathBuf,
    pub manifest_path: PathBuf,
    /// Defaults to the manifest path with a `.work` extension.
    pub work_dir: Option<PathBuf>,
    /// Stop (resumably) once this many segments exist.
    pub stop_after: Option<usize>,
}

impl Default for CompositionConfig {
    fn default() -> Self {
        CompositionConfig {
            pages_dir: None,
            corpus_path: None,
            page_range: None,
            prefix: None,
            vision: VisionChoice::default(),
            service: ServiceSettings::default(),
            backend: ModelChoice::default(),
            decoder: ModelChoice::default(),
            checkpoint: CheckpointConfig::default(),
            sampler: SamplerConfig::default(),
            output_wav_path: PathBuf::from("composition.wav"),
            manifest_path: PathBuf::from("composition.manifest.json"),
            work_dir: None,
            stop_after: None,
        }
    }
}

impl CompositionConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.pages_dir, &self.corpus_path) {
            (Some(_), Some(_)) => return Err(Error::Config("set either pages_dir or corpus_path, not both".into())),
            (None, None) => return Err(Error::Config("one of pages_dir or corpus_path is required".into())),
            _ => {}
        }
        if let Some(r) = &self.page_range {
            r.validate()?;
        }
        if let Some(p) = &self.prefix {
            StylePrefix::new(p.clone())?;
        }
        if self.stop_after == Some(0) {
            return Err(Error::Config("stop_after must be at least 1".into()));
        }
        self.sampler.schedule()?;
        Ok(())
    }

    pub fn work_dir(&self) -> PathBuf {
        self.work_dir
            .clone()
            .unwrap_or_else(|| self.manifest_path.with_extension("work"))
    }

    fn echo(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        redact(&mut v);
        v
    }
}

fn redact(v: &mut Value) {
    match v {
        Value::Object(map) => {
            for (k, val) in map.iter_mut() {
                let key = k.to_ascii_lowercase();
                if ["key", "token", "secret", "password"].iter().any(|s| key.contains(s)) {
                    *val = Value::String("<redacted>".into());
                } else {
                    redact(val);
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(redact),
        _ => {}
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedSegment {
    pub index: usize,
    pub page: u32,
    /// 1–4, left to right on the page.
    pub prompt_position: usize,
    /// Prompt text with the style prefix applied.
    pub prompt: String,
}

pub type SegmentPlan = Vec<PlannedSegment>;

/// Page images in `dir`, numbered by the last run of digits in each file stem.
pub fn discover_pages(dir: &Path, range: PageRange) -> Result<Vec<ScorePage>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut found: std::collections::BTreeMap<u32, PathBuf> = Default::default();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"));
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()).filter(|_| is_image) else {
            continue;
        };
        let digits: String = stem
            .chars()
            .rev()
            .skip_while(|c| !c.is_ascii_digit())
            .take_while(|c| c.is_ascii_digit())
            .collect::<Vec<_>>()
            .into_iter()
            .rev()
            .collect();
        let Ok(page) = digits.parse::<u32>() else { continue };
        if let Some(other) = found.insert(page, path.clone()) {
            return Err(Error::Input(format!(
                "page {page} has two images: {} and {}",
                other.display(),
                path.display()
            )));
        }
    }
    range
        .pages()
        .map(|p| {
            found
                .get(&p)
                .map(|path| ScorePage::new(p, path))
                .ok_or_else(|| Error::Input(format!("no image for page {p} in {}", dir.display())))
        })
        .collect()
}

fn vision_client(config: &CompositionConfig) -> Result<Box<dyn VisionClient>> {
    Ok(match config.vision {
        VisionChoice::Fixture => Box::new(FixtureClient::new()),
        VisionChoice::Service => Box::new(ServiceClient::from_env(ServiceConfig {
            base_url: config.service.base_url.clone(),
            model: config.service.model.clone(),
            ..ServiceConfig::default()
        })?),
    })
}

/// The prompt corpus a config refers to: loaded from disk, or produced from page images.
pub fn resolve_corpus(config: &CompositionConfig) -> Result<PromptCorpus> {
    if let Some(path) = &config.corpus_path {
        return load_corpus(path);
    }
    let dir = config
        .pages_dir
        .as_ref()
        .ok_or_else(|| Error::Config("one of pages_dir or corpus_path is required".into()))?;
    let range = config.page_range.unwrap_or_default();
    let pages = discover_pages(dir, range)?;
    let prefix = StylePrefix::new(config.prefix.clone().unwrap_or_else(|| DEFAULT_PREFIX.into()))?;
    let client = vision_client(config).map_err(|e| e.at_stage("vision", None))?;
    build_corpus(client.as_ref(), &pages, prefix, config.service.concurrency).map_err(|e| e.at_stage("vision", None))
}

/// Style used when neither the config nor a corpus supplies one.
pub const DEFAULT_PREFIX: &str = "sine wave is playing";

/// Four segments per page, pages ascending, prompts left to right.
pub fn plan_segments(corpus: &PromptCorpus, range: Option<PageRange>, prefix: Option<&str>) -> Result<SegmentPlan> {
    let prefix = match prefix {
        Some(p) => StylePrefix::new(p)?,
        None => corpus.prefix().clone(),
    };
    let pages: Vec<u32> = match range {
        Some(r) => {
            r.validate()?;
            r.pages().collect()
        }
        None => corpus.pages().iter().map(|p| p.page_number()).collect(),
    };
    if pages.is_empty() {
        return Err(Error::Input("corpus has no pages".into()));
    }
    let mut plan = Vec::with_capacity(pages.len() * PROMPTS_PER_PAGE);
    for page in pages {
        let set = corpus
            .page(page)
            .ok_or_else(|| Error::Input(format!("corpus has no prompts for page {page}")))?;
        for (i, sentence) in set.prompts().iter().enumerate() {
            plan.push(PlannedSegment {
                index: plan.len(),
                page,
                prompt_position: i + 1,
                prompt: prefix.apply(sentence)?,
            });
        }
    }
    Ok(plan)
}

pub fn plan(config: &CompositionConfig) -> Result<SegmentPlan> {
    config.validate()?;
    let corpus = resolve_corpus(config)?;
    plan_segments(&corpus, config.page_range, config.prefix.as_deref())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Incomplete,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorIds {
    pub noise: String,
    pub checksum: String,
    pub encoder: String,
    pub backend: String,
    pub decoder: String,
    pub vision_instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub index: usize,
    pub page: u32,
    pub prompt_position: usize,
    pub prompt: String,
    pub seed: u64,
    pub latent_checksum: String,
    pub start_time_s: f64,
    pub end_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub status: RunStatus,
    pub created_at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completed_at: Option<String>,
    pub config: Value,
    pub generators: GeneratorIds,
    pub seed: u64,
    pub planned_segments: usize,
    pub sample_rate: u32,
    pub segments: Vec<SegmentRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_duration_s: Option<f64>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Manifest> {
        let m: Manifest = serde_json::from_str(text).map_err(|e| Error::format(format!("manifest: {e}")))?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::format(format!(
                "manifest: schema_version must be {MANIFEST_SCHEMA_VERSION}, found {}",
                m.schema_version
            )));
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        Manifest::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    /// Checks timing and count invariants; complete manifests must cover the plan.
    pub fn validate(&self) -> Result<()> {
        let spec = DecoderSpec::default();
        let len = f64::from(spec.segment_seconds);
        for (k, s) in self.segments.iter().enumerate() {
            let start = k as f64 * len / 2.0;
            if s.index != k || s.start_time_s != start || s.end_time_s != start + len {
                return Err(Error::Consistency {
                    index: k,
                    message: format!(
                        "record claims index {} at {}–{} s, expected {k} at {start}–{} s",
                        s.index,
                        s.start_time_s,
                        s.end_time_s,
                        start + len
                    ),
                });
            }
        }
        if self.status == RunStatus::Complete {
            let n = self.segments.len();
            let expect = duration_of(n)?;
            let samples = (expect * f64::from(self.sample_rate)).round() as usize;
            if n != self.planned_segments || self.total_duration_s != Some(expect) || self.sample_count != Some(samples)
            {
                return Err(Error::Consistency {
                    index: n.saturating_sub(1),
                    message: format!(
                        "complete manifest with {n} of {} segments claims {:?} s / {:?} samples, expected {expect} s / {samples}",
                        self.planned_segments, self.total_duration_s, self.sample_count
                    ),
                });
            }
        }
        Ok(())
    }
}

pub fn format_checksum(sum: u64) -> String {
    format!("{sum:016x}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SegmentMeta {
    index: usize,
    seed: u64,
    latent_checksum: String,
    shape: LatentShape,
    prompt: String,
}

fn segment_paths(work: &Path, k: usize) -> (PathBuf, PathBuf) {
    let dir = work.join("segments");
    (dir.join(format!("z_{k}.bin")), dir.join(format!("z_{k}.meta.json")))
}

fn persist_segment(work: &Path, k: usize, seed: u64, prompt: &str, z: &LatentTensor) -> Result<()> {
    let (bin, meta) = segment_paths(work, k);
    write_atomic(&bin, &z.to_le_bytes())?;
    let meta_json = serde_json::to_string_pretty(&SegmentMeta {
        index: k,
        seed,
        latent_checksum: format_checksum(z.checksum()),
        shape: z.shape(),
        prompt: prompt.to_owned(),
    })
    .expect("meta serializes");
    write_atomic(&meta, meta_json.as_bytes())
}

/// Loads segment `k` and checks it against `expected_checksum`. `Ok(None)` if it was never written.
fn load_segment(work: &Path, k: usize, shape: LatentShape, expected_checksum: &str) -> Result<Option<LatentTensor>> {
    let (bin, _) = segment_paths(work, k);
    let bytes = match fs::read(&bin) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(&bin, e)),
    };
    let mismatch = |message: String| Error::Consistency {
        index: k,
        message: format!("{message}; restart from segment {}", k.saturating_sub(1)),
    };
    let z = LatentTensor::from_le_bytes(shape, &bytes)
        .map_err(|e| mismatch(format!("persisted latent {} is unreadable: {e}", bin.display())))?;
    let found = format_checksum(z.checksum());
    if found != expected_checksum {
        return Err(mismatch(format!(
            "persisted latent {} has checksum {found}, manifest records {expected_checksum}",
            bin.display()
        )));
    }
    Ok(Some(z))
}

fn read_meta(work: &Path, k: usize) -> Option<SegmentMeta> {
    let (_, meta) = segment_paths(work, k);
    serde_json::from_str(&fs::read_to_string(meta).ok()?).ok()
}

struct Components {
    encoder: Box<dyn TextEncoder>,
    backend: Box<dyn DiffusionBackend>,
    decoder: Box<dyn LatentDecoder>,
    checkpoint_sha256: Option<String>,
}

/// The encoder follows the backend: toy → stub encoder, checkpoint → the checkpoint's text encoder.
fn build_components(config: &CompositionConfig) -> Result<Components> {
    let uses_checkpoint = config.backend == ModelChoice::Checkpoint || config.decoder == ModelChoice::Checkpoint;
    let session = if uses_checkpoint {
        Some(CheckpointSession::open(&config.checkpoint)?)
    } else {
        None
    };
    let (encoder, backend): (Box<dyn TextEncoder>, Box<dyn DiffusionBackend>) = match (config.backend, &session) {
        (ModelChoice::Checkpoint, Some(s)) => (Box::new(s.encoder()), Box::new(s.backend())),
        _ => (
            Box::new(StubEncoder),
            Box::new(ToyGaussianBackend::composition_default()),
        ),
    };
    let decoder: Box<dyn LatentDecoder> = match (config.decoder, &session) {
        (ModelChoice::Checkpoint, Some(s)) => Box::new(s.decoder()),
        _ => Box::new(ToyDecoder::default()),
    };
    if backend.latent_shape() != decoder.spec().latent_shape() {
        return Err(Error::Contract {
            what: "backend latent shape vs decoder window".into(),
            expected: decoder.spec().latent_shape().to_string(),
            found: backend.latent_shape().to_string(),
        });
    }
    Ok(Components {
        encoder,
        backend,
        decoder,
        checkpoint_sha256: session.map(|s| s.checkpoint_hash().to_owned()),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositionResult {
    /// `None` when the run stopped early (`stop_after`).
    pub wav_path: Option<PathBuf>,
    pub manifest: Manifest,
}

struct ResumePoint {
    records: Vec<SegmentRecord>,
    latents: Vec<LatentTensor>,
    created_at: String,
}

/// Runs the whole composition from scratch.
pub fn compose(config: &CompositionConfig) -> Result<CompositionResult> {
    config.validate().map_err(|e| e.at_stage("config", None))?;
    let work = config.work_dir();
    let _lock = DirLock::acquire(&work)?;
    let segments_dir = work.join("segments");
    if segments_dir.exists() {
        fs::remove_dir_all(&segments_dir).map_err(|e| Error::io(&segments_dir, e))?;
    }
    run(config, &work, None)
}

/// Continues an interrupted run recorded in `manifest`.
///
/// Persisted latents are verified against their checksums and reused; the
/// chain continues from the last verified segment.
pub fn resume(config: &CompositionConfig, manifest: &Manifest) -> Result<CompositionResult> {
    config.validate().map_err(|e| e.at_stage("config", None))?;
    if manifest.seed != config.sampler.seed {
        return Err(Error::Input(format!(
            "manifest was generated with seed {}, config has seed {}",
            manifest.seed, config.sampler.seed
        )));
    }
    let recorded: SamplerConfig = serde_json::from_value(manifest.config["sampler"].clone())
        .map_err(|e| Error::format(format!("manifest config.sampler: {e}")))?;
    if recorded != config.sampler {
        return Err(Error::Input("sampler settings differ from the manifest's".into()));
    }
    manifest.validate()?;
    let work = config.work_dir();
    let _lock = DirLock::acquire(&work)?;

    let plan = plan(config).map_err(|e| e.at_stage("plan", None))?;
    let shape = DecoderSpec::default().latent_shape();
    let mut records = Vec::new();
    let mut latents = Vec::new();
    for record in &manifest.segments {
        let k = record.index;
        let planned = plan
            .get(k)
            .ok_or_else(|| Error::Input(format!("manifest has segment {k}, the plan only {}", plan.len())))?;
        if planned.prompt != record.prompt || record.seed != segment_seed(config.sampler.seed, k) {
            return Err(Error::Input(format!(
                "segment {k} in the manifest does not match this config's plan"
            )));
        }
        match load_segment(&work, k, shape, &record.latent_checksum)? {
            Some(z) => {
                records.push(record.clone());
                latents.push(z);
            }
            None => break,
        }
    }
    // Segments persisted after the manifest was last written.
    while records.len() == manifest.segments.len() && records.len() < plan.len() {
        let k = records.len();
        let Some(meta) = read_meta(&work, k) else { break };
        if meta.prompt != plan[k].prompt || meta.seed != segment_seed(config.sampler.seed, k) {
            break;
        }
        match load_segment(&work, k, shape, &meta.latent_checksum)? {
            Some(z) => {
                records.push(segment_record(&plan[k], meta.seed, &z));
                latents.push(z);
            }
            None => break,
        }
    }
    log::info!("resuming with {} verified segments of {}", records.len(), plan.len());
    run(
        config,
        &work,
        Some(ResumePoint {
            records,
            latents,
            created_at: manifest.created_at.clone(),
        }),
    )
}

fn segment_record(planned: &PlannedSegment, seed: u64, z: &LatentTensor) -> SegmentRecord {
    let len = f64::from(DecoderSpec::default().segment_seconds);
    let start = planned.index as f64 * len / 2.0;
    SegmentRecord {
        index: planned.index,
        page: planned.page,
        prompt_position: planned.prompt_position,
        prompt: planned.prompt.clone(),
        seed,
        latent_checksum: format_checksum(z.checksum()),
        start_time_s: start,
        end_time_s: start + len,
    }
}

fn run(config: &CompositionConfig, work: &Path, resume_from: Option<ResumePoint>) -> Result<CompositionResult> {
    let plan = plan(config).map_err(|e| e.at_stage("plan", None))?;
    let parts = build_components(config).map_err(|e| e.at_stage("load", None))?;

    let vs: Vec<ConditioningVector> = plan
        .iter()
        .map(|s| encode(parts.encoder.as_ref(), &s.prompt).map_err(|e| e.at_stage("encode", Some(s.index))))
        .collect::<Result<_>>()?;

    let spec = parts.decoder.spec();
    let ResumePoint {
        mut records,
        mut latents,
        created_at,
    } = resume_from.unwrap_or(ResumePoint {
        records: Vec::new(),
        latents: Vec::new(),
        created_at: Utc::now().to_rfc3339(),
    });
    let mut manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        status: RunStatus::Incomplete,
        created_at,
        completed_at: None,
        config: config.echo(),
        generators: GeneratorIds {
            noise: NOISE_GENERATOR_ID.into(),
            checksum: CHECKSUM_ID.into(),
            encoder: parts.encoder.id(),
            backend: parts.backend.id(),
            decoder: parts.decoder.id(),
            vision_instruction: INSTRUCTION_VERSION.into(),
            checkpoint_sha256: parts.checkpoint_sha256.clone(),
        },
        seed: config.sampler.seed,
        planned_segments: plan.len(),
        sample_rate: spec.sample_rate,
        segments: records.clone(),
        sample_count: None,
        total_duration_s: None,
    };
    manifest.save(&config.manifest_path)?;

    let target = config.stop_after.map_or(plan.len(), |n| n.min(plan.len()));
    let first = latents.len();
    if first < target {
        let new = generate_sequence_from(
            parts.backend.as_ref(),
            &vs[..target],
            &config.sampler,
            first,
            latents.last(),
            |k, seed, z| {
                persist_segment(work, k, seed, &plan[k].prompt, z)?;
                records.push(segment_record(&plan[k], seed, z));
                manifest.segments = records.clone();
                manifest.save(&config.manifest_path)?;
                log::info!(
                    "segment {}/{} (page {}, prompt {})",
                    k + 1,
                    plan.len(),
                    plan[k].page,
                    plan[k].prompt_position
                );
                Ok(())
            },
        )?;
        latents.extend(new);
    }

    if latents.len() < plan.len() {
        log::info!("stopped after {} of {} segments", latents.len(), plan.len());
        return Ok(CompositionResult {
            wav_path: None,
            manifest,
        });
    }

    let stitched = stitch_latents(&latents).map_err(|e| e.at_stage("stitch", None))?;
    let audio = decode(parts.decoder.as_ref(), &stitched).map_err(|e| e.at_stage("decode", None))?;
    let expected = duration_of(plan.len())?;
    if audio.duration_seconds() != expected {
        return Err(Error::Consistency {
            index: plan.len() - 1,
            message: format!("decoded {} s of audio, expected {expected} s", audio.duration_seconds()),
        }
        .at_stage("decode", None));
    }
    write_wav(&audio, &config.output_wav_path).map_err(|e| e.at_stage("write", None))?;

    manifest.status = RunStatus::Complete;
    manifest.completed_at = Some(Utc::now().to_rfc3339());
    manifest.sample_count = Some(audio.len());
    manifest.total_duration_s = Some(expected);
    manifest.validate()?;
    manifest.save(&config.manifest_path)?;
    Ok(CompositionResult {
        wav_path: Some(config.output_wav_path.clone()),
        manifest,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct InspectReport {
    pub manifest: Manifest,
    pub wav_samples: usize,
    pub wav_duration_s: f64,
}

impl InspectReport {
    pub fn summary(&self) -> String {
        format!(
            "{} segments, {:.1} s",
            self.manifest.segments.len(),
            self.manifest.total_duration_s.unwrap_or(0.0)
        )
    }
}

/// Loads a manifest and checks the WAV it describes has exactly the recorded length.
pub fn inspect(manifest_path: &Path, wav_path: &Path) -> Result<InspectReport> {
    let manifest = Manifest::load(manifest_path)?;
    manifest.validate()?;
    let last = manifest.segments.len().saturating_sub(1);
    if manifest.status != RunStatus::Complete {
        return Err(Error::Consistency {
            index: last,
            message: "manifest belongs to an incomplete run".into(),
        });
    }
    let wav = crate::audio::read_wav(wav_path)?;
    let disagree = |message: String| Error::Consistency { index: last, message };
    if wav.is_truncated() {
        return Err(disagree(format!(
            "{} is truncated: header declares {} samples, file holds {}",
            wav_path.display(),
            wav.declared_samples,
            wav.samples.len()
        )));
    }
    if wav.sample_rate != manifest.sample_rate || wav.channels != 1 {
        return Err(disagree(format!(
            "WAV is {} Hz × {} channels, manifest expects {} Hz mono",
            wav.sample_rate, wav.channels, manifest.sample_rate
        )));
    }
    if Some(wav.samples.len()) != manifest.sample_count {
        return Err(disagree(format!(
            "WAV has {} samples, manifest records {:?}",
            wav.samples.len(),
            manifest.sample_count
        )));
    }
    Ok(InspectReport {
        wav_duration_s: wav.duration_seconds(),
        wav_samples: wav.samples.len(),
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::save_corpus;

    fn fixture_config(dir: &Path, steps: usize) -> CompositionConfig {
        let corpus = dir.join("corpus.json");
        save_corpus(&PromptCorpus::fixture(), &corpus).unwrap();
        CompositionConfig {
            corpus_path: Some(corpus),
            page_range: Some(PageRange::new(1, 2).unwrap()),
            sampler: SamplerConfig {
                num_steps: steps,
                seed: 42,
                ..SamplerConfig::default()
            },
            output_wav_path: dir.join("out.wav"),
            manifest_path: dir.join("m.json"),
            ..CompositionConfig::default()
        }
    }

    #[test]
    fn page_range_parsing() {
        assert_eq!(PageRange::parse("1:7").unwrap(), PageRange::new(1, 7).unwrap());
        assert_eq!(PageRange::parse("3-3").unwrap().len(), 1);
        assert!(PageRange::parse("5:3").is_err());
        assert!(PageRange::parse("0:3").is_err());
        assert!(PageRange::parse("seven").is_err());
        assert_eq!(PageRange::default().len(), 33);
    }

    #[test]
    fn plan_fixture_pages() {
        let plan = plan_segments(&PromptCorpus::fixture(), None, None).unwrap();
        assert_eq!(plan.len(), 28);
        assert_eq!((plan[5].page, plan[5].prompt_position), (2, 2));
        assert!(plan.iter().all(|s| s.prompt.starts_with("sine wave is playing, ")));
        assert!(plan.iter().enumerate().all(|(i, s)| s.index == i));
    }

    #[test]
    fn plan_missing_page_names_it() {
        let err = plan_segments(&PromptCorpus::fixture(), Some(PageRange::new(6, 9).unwrap()), None).unwrap_err();
        assert!(err.to_string().contains("page 8"), "{err}");
    }

    #[test]
    fn plan_thirty_three_pages() {
        let sets: Vec<_> = (1..=33)
            .map(|p| {
                crate::prompts::PromptSet::new(p, vec!["a.".into(), "b.".into(), "c.".into(), "d.".into()]).unwrap()
            })
            .collect();
        let corpus = PromptCorpus::new(
            StylePrefix::new("strings").unwrap(),
            sets,
            crate::prompts::CorpusSource::VisionService,
            None,
        )
        .unwrap();
        let plan = plan_segments(&corpus, Some(PageRange::default()), Some("electronic")).unwrap();
        assert_eq!(plan.len(), 132);
        assert_eq!(plan[131].prompt, "electronic, d.");
    }

    #[test]
    fn config_needs_exactly_one_source() {
        let mut c = CompositionConfig::default();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.pages_dir = Some("p".into());
        c.corpus_path = Some("c.json".into());
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.pages_dir = None;
        c.validate().unwrap();
    }

    #[test]
    fn config_file_round_trip_and_redaction() {
        let mut c = CompositionConfig::default();
        c.checkpoint.options = serde_json::json!({"guidance_scale": 2.0, "api_key": "sk-123"});
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<CompositionConfig>(&text).unwrap(), c);
        let echo = c.echo().to_string();
        assert!(!echo.contains("sk-123") && echo.contains("guidance_scale"));
        assert!(serde_json::from_str::<CompositionConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn discover_pages_by_number() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["score_p001.png", "score_p002.JPG", "score_p003.jpeg", "notes.txt"] {
            fs::write(dir.path().join(name), b"x").unwrap();
        }
        let pages = discover_pages(dir.path(), PageRange::new(1, 3).unwrap()).unwrap();
        assert_eq!(pages.len(), 3);
        assert!(pages[1].image_ref.as_ref().unwrap().ends_with("score_p002.JPG"));
        let err = discover_pages(dir.path(), PageRange::new(1, 4).unwrap()).unwrap_err();
        assert!(err.to_string().contains("page 4"));
    }

    #[test]
    fn compose_small_run() {
        let dir = tempfile::tempdir().unwrap();
        let config = fixture_config(dir.path(), 10);
        let result = compose(&config).unwrap();
        let m = &result.manifest;
        assert_eq!(m.status, RunStatus::Complete);
        assert_eq!(m.segments.len(), 8);
        assert_eq!(m.total_duration_s, Some(45.0));
        assert_eq!(m.sample_count, Some(720_000));
        assert_eq!(m.segments[3].start_time_s, 15.0);
        assert_eq!(m.segments[3].end_time_s, 25.0);
        let report = inspect(&config.manifest_path, &config.output_wav_path).unwrap();
        assert_eq!(report.summary(), "8 segments, 45.0 s");
        assert!(!config.work_dir().join("lock").exists());
    }

    #[test]
    fn checkpoint_backend_without_path_is_backend_error() {
        let dir = tempfile::tempdir().unwrap();
        let config = CompositionConfig {
            backend: ModelChoice::Checkpoint,
            ..fixture_config(dir.path(), 5)
        };
        let err = compose(&config).unwrap_err();
        assert!(matches!(err.root(), Error::Backend(_)), "{err}");
        assert!(err.to_string().contains("checkpoint_path"), "{err}");
        assert!(!config.output_wav_path.exists());
    }

    #[test]
    fn stop_then_resume_matches() {
        let dir = tempfile::tempdir().unwrap();
        let config = fixture_config(dir.path(), 8);
        let full = compose(&config).unwrap();
        let full_wav = fs::read(&config.output_wav_path).unwrap();

        let other = dir.path().join("b");
        let partial_cfg = CompositionConfig {
            output_wav_path: other.join("out.wav"),
            manifest_path: other.join("m.json"),
            stop_after: Some(3),
            ..config.clone()
        };
        let partial = compose(&partial_cfg).unwrap();
        assert!(partial.wav_path.is_none());
        assert_eq!(partial.manifest.status, RunStatus::Incomplete);
        assert_eq!(partial.manifest.segments.len(), 3);

        let resume_cfg = CompositionConfig {
            stop_after: None,
            ..partial_cfg
        };
        let resumed = resume(&resume_cfg, &Manifest::load(&resume_cfg.manifest_path).unwrap()).unwrap();
        assert_eq!(fs::read(&resume_cfg.output_wav_path).unwrap(), full_wav);
        assert_eq!(resumed.manifest.segments, full.manifest.segments);
    }

    #[test]
    fn resume_rejects_seed_mismatch_and_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let config = CompositionConfig {
            stop_after: Some(3),
            ..fixture_config(dir.path(), 5)
        };
        compose(&config).unwrap();
        let manifest = Manifest::load(&config.manifest_path).unwrap();

        let mut wrong_seed = config.clone();
        wrong_seed.sampler.seed = 7;
        assert!(matches!(resume(&wrong_seed, &manifest), Err(Error::Input(_))));

        let (bin, _) = segment_paths(&config.work_dir(), 1);
        let mut bytes = fs::read(&bin).unwrap();
        bytes[100] ^= 0x40;
        fs::write(&bin, bytes).unwrap();
        match resume(&config, &manifest) {
            Err(Error::Consistency { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected consistency error, got {other:?}"),
        }
    }

    #[test]
    fn picks_up_segments_persisted_after_last_manifest_write() {
        let dir = tempfile::tempdir().unwrap();
        let config = CompositionConfig {
            stop_after: Some(4),
            ..fixture_config(dir.path(), 5)
        };
        compose(&config).unwrap();
        let mut manifest = Manifest::load(&config.manifest_path).unwrap();
        manifest.segments.truncate(2);
        let resumed = resume(
            &CompositionConfig {
                stop_after: Some(4),
                ..config.clone()
            },
            &manifest,
        )
        .unwrap();
        assert_eq!(resumed.manifest.segments.len(), 4);
    }

    #[test]
    fn locked_work_dir_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let config = fixture_config(dir.path(), 5);
        let _held = DirLock::acquire(&config.work_dir()).unwrap();
        assert!(matches!(compose(&config), Err(Error::Input(_))));
    }

    #[test]
    fn manifest_validation_catches_bad_timing() {
        let dir = tempfile::tempdir().unwrap();
        let config = fixture_config(dir.path(), 4);
        let mut m = compose(&config).unwrap().manifest;
        m.validate().unwrap();
        m.segments[2].end_time_s = 21.0;
        assert!(matches!(m.validate(), Err(Error::Consistency { index: 2, .. })));
    }
}
