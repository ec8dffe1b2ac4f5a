//! Adapters binding the backend, encoder and decoder boundaries to a pretrained checkpoint.
//!
//! The model itself runs in a worker process (see `scripts/musicldm_worker.py`)
//! that speaks one JSON object per line on stdin/stdout:
//!
//! ```text
//! → {"op":"hello","checkpoint":"…","device":"cpu","options":{…}}
//! ← {"ok":true,"latent_shape":[8,256,16],"embedding_dim":512,"sample_rate":16000,"samples_per_latent_frame":625,"model":"…"}
//! → {"op":"encode","text":"…"}                                   ← {"ok":true,"vector":"<b64 f32le>"}
//! → {"op":"predict_noise","latent":"<b64>","shape":[c,t,f],
//!    "timestep":t,"num_steps":n,"alpha_bar":ab,"conditioning":"<b64>"} ← {"ok":true,"noise":"<b64>"}
//! → {"op":"decode","latent":"<b64>","shape":[c,t,f]}             ← {"ok":true,"samples":"<b64>"}
//! ```
//!
//! Failures come back as `{"ok":false,"error":"…"}`. Every reply is checked
//! against the boundary contracts here; nothing the worker says is trusted.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::{Arc, Mutex};

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::audio::{DecoderSpec, LatentDecoder};
use crate::conditioning::{ConditioningVector, TextEncoder, EMBEDDING_DIM};
use crate::diffusion::{DiffusionBackend, Timestep};
use crate::error::{Error, Result};
use crate::tensor::{LatentShape, LatentTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointConfig {
    pub checkpoint_path: Option<PathBuf>,
    pub device: String,
    /// Program and arguments that start the worker.
    pub worker: Vec<String>,
    /// Passed through to the worker untouched (native step count, guidance scale, …).
    pub options: Value,
}

impl Default for CheckpointConfig {
    fn default() -> Self {
        CheckpointConfig {
            checkpoint_path: None,
            device: "cpu".into(),
            worker: vec!["python3".into(), "scripts/musicldm_worker.py".into()],
            options: Value::Object(Default::default()),
        }
    }
}

/// One request/response exchange with a worker.
pub trait Transport: Send {
    fn call(&mut self, request: &Value) -> Result<Value>;
}

/// JSON-lines over any reader/writer pair.
pub struct LineTransport<R, W> {
    reader: R,
    writer: W,
}

impl<R: BufRead + Send, W: Write + Send> LineTransport<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        LineTransport { reader, writer }
    }
}

impl<R: BufRead + Send, W: Write + Send> Transport for LineTransport<R, W> {
    fn call(&mut self, request: &Value) -> Result<Value> {
        let mut line = serde_json::to_string(request).expect("request serializes");
        line.push('\n');
        self.writer
            .write_all(line.as_bytes())
            .and_then(|_| self.writer.flush())
            .map_err(|e| Error::Backend(format!("writing to checkpoint worker: {e}")))?;
        let mut reply = String::new();
        let n = self
            .reader
            .read_line(&mut reply)
            .map_err(|e| Error::Backend(format!("reading from checkpoint worker: {e}")))?;
        if n == 0 {
            return Err(Error::Backend("checkpoint worker closed its output".into()));
        }
        serde_json::from_str(&reply).map_err(|e| Error::Backend(format!("checkpoint worker sent invalid JSON: {e}")))
    }
}

struct ProcessTransport {
    child: Child,
    lines: LineTransport<BufReader<ChildStdout>, ChildStdin>,
}

impl Transport for ProcessTransport {
    fn call(&mut self, request: &Value) -> Result<Value> {
        self.lines.call(request)
    }
}

impl Drop for ProcessTransport {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct Handshake {
    pub latent_shape: [usize; 3],
    pub embedding_dim: usize,
    pub sample_rate: u32,
    pub samples_per_latent_frame: usize,
    #[serde(default)]
    pub model: String,
}

/// A loaded checkpoint shared by the three adapters.
pub struct CheckpointSession {
    transport: Mutex<Box<dyn Transport>>,
    handshake: Handshake,
    checkpoint_hash: String,
    spec: DecoderSpec,
}

impl std::fmt::Debug for CheckpointSession {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CheckpointSession")
            .field("handshake", &self.handshake)
            .field("checkpoint_hash", &self.checkpoint_hash)
            .finish()
    }
}

fn configured_path(cfg: &CheckpointConfig) -> Result<&Path> {
    let path = cfg
        .checkpoint_path
        .as_deref()
        .ok_or_else(|| Error::Backend("no checkpoint path configured (set checkpoint.checkpoint_path)".into()))?;
    if !path.exists() {
        return Err(Error::Backend(format!("checkpoint not found: {}", path.display())));
    }
    Ok(path)
}

impl CheckpointSession {
    /// Verifies the checkpoint exists, hashes it, starts the worker and checks its declared shapes.
    pub fn open(cfg: &CheckpointConfig) -> Result<Arc<CheckpointSession>> {
        let path = configured_path(cfg)?;
        let hash = checkpoint_hash(path)?;
        let (program, args) = cfg
            .worker
            .split_first()
            .ok_or_else(|| Error::Config("checkpoint worker command is empty".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Backend(format!("cannot start checkpoint worker {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let transport = ProcessTransport {
            child,
            lines: LineTransport::new(BufReader::new(stdout), stdin),
        };
        CheckpointSession::connect(Box::new(transport), cfg, path, hash)
    }

    /// Same as [`open`](Self::open) over an existing transport.
    pub fn with_transport(transport: Box<dyn Transport>, cfg: &CheckpointConfig) -> Result<Arc<CheckpointSession>> {
        let path = configured_path(cfg)?;
        let hash = checkpoint_hash(path)?;
        CheckpointSession::connect(transport, cfg, path, hash)
    }

    fn connect(
        mut transport: Box<dyn Transport>,
        cfg: &CheckpointConfig,
        path: &Path,
        checkpoint_hash: String,
    ) -> Result<Arc<CheckpointSession>> {
        let reply = checked(transport.call(&json!({
            "op": "hello",
            "checkpoint": path,
            "device": cfg.device,
            "options": cfg.options,
        }))?)?;
        let handshake: Handshake =
            serde_json::from_value(reply).map_err(|e| Error::Backend(format!("bad worker handshake: {e}")))?;
        let spec = DecoderSpec::default();
        let [c, t, f] = handshake.latent_shape;
        let found = LatentShape {
            channels: c,
            time_frames: t,
            freq_bins: f,
        };
        if found != spec.latent_shape() {
            return Err(Error::Contract {
                what: "checkpoint latent shape".into(),
                expected: spec.latent_shape().to_string(),
                found: found.to_string(),
            });
        }
        if handshake.embedding_dim != EMBEDDING_DIM {
            return Err(Error::Contract {
                what: "checkpoint embedding dimension".into(),
                expected: EMBEDDING_DIM.to_string(),
                found: handshake.embedding_dim.to_string(),
            });
        }
        if handshake.sample_rate != spec.sample_rate
            || handshake.samples_per_latent_frame != spec.samples_per_latent_frame()
        {
            return Err(Error::Contract {
                what: "checkpoint audio geometry".into(),
                expected: format!(
                    "{} Hz, {} samples/frame",
                    spec.sample_rate,
                    spec.samples_per_latent_frame()
                ),
                found: format!(
                    "{} Hz, {} samples/frame",
                    handshake.sample_rate, handshake.samples_per_latent_frame
                ),
            });
        }
        Ok(Arc::new(CheckpointSession {
            transport: Mutex::new(transport),
            handshake,
            checkpoint_hash,
            spec,
        }))
    }

    pub fn checkpoint_hash(&self) -> &str {
        &self.checkpoint_hash
    }

    pub fn handshake(&self) -> &Handshake {
        &self.handshake
    }

    fn call(&self, request: Value) -> Result<Value> {
        let mut transport = self.transport.lock().expect("worker lock poisoned");
        checked(transport.call(&request)?)
    }

    fn id(&self, role: &str) -> String {
        format!(
            "checkpoint-{role} model={} sha256={}",
            self.handshake.model, self.checkpoint_hash
        )
    }
}

fn checked(reply: Value) -> Result<Value> {
    if reply["ok"].as_bool() == Some(true) {
        Ok(reply)
    } else {
        Err(Error::Backend(format!(
            "checkpoint worker: {}",
            reply["error"].as_str().unwrap_or("request failed")
        )))
    }
}

fn encode_f32(values: &[f32]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn decode_f32(reply: &Value, field: &str) -> Result<Vec<f32>> {
    let text = reply[field]
        .as_str()
        .ok_or_else(|| Error::Backend(format!("worker reply lacks {field}")))?;
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(text)
        .map_err(|e| Error::Backend(format!("worker {field} is not base64: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Backend(format!(
            "worker {field} is not a whole number of f32 values"
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

fn shape_json(shape: LatentShape) -> Value {
    json!([shape.channels, shape.time_frames, shape.freq_bins])
}

pub struct CheckpointBackend(Arc<CheckpointSession>);
pub struct CheckpointEncoder(Arc<CheckpointSession>);
pub struct CheckpointDecoder(Arc<CheckpointSession>);

impl CheckpointSession {
    pub fn backend(self: &Arc<Self>) -> CheckpointBackend {
        CheckpointBackend(self.clone())
    }

    pub fn encoder(self: &Arc<Self>) -> CheckpointEncoder {
        CheckpointEncoder(self.clone())
    }

    pub fn decoder(self: &Arc<Self>) -> CheckpointDecoder {
        CheckpointDecoder(self.clone())
    }
}

pub fn load_backend(cfg: &CheckpointConfig) -> Result<CheckpointBackend> {
    Ok(CheckpointSession::open(cfg)?.backend())
}

pub fn load_encoder(cfg: &CheckpointConfig) -> Result<CheckpointEncoder> {
    Ok(CheckpointSession::open(cfg)?.encoder())
}

pub fn load_decoder(cfg: &CheckpointConfig) -> Result<CheckpointDecoder> {
    Ok(CheckpointSession::open(cfg)?.decoder())
}

impl DiffusionBackend for CheckpointBackend {
    fn id(&self) -> String {
        self.0.id("unet")
    }

    fn latent_shape(&self) -> LatentShape {
        self.0.spec.latent_shape()
    }

    fn predict_noise(&self, x: &LatentTensor, t: Timestep, v: &ConditioningVector) -> Result<LatentTensor> {
        let reply = self.0.call(json!({
            "op": "predict_noise",
            "latent": encode_f32(x.values()),
            "shape": shape_json(x.shape()),
            "timestep": t.index,
            "num_steps": t.num_steps,
            "alpha_bar": t.alpha_bar,
            "conditioning": encode_f32(v.values()),
        }))?;
        let values = decode_f32(&reply, "noise")?;
        if values.len() != x.shape().len() {
            return Err(Error::Contract {
                what: "noise prediction size".into(),
                expected: x.shape().len().to_string(),
                found: values.len().to_string(),
            });
        }
        LatentTensor::from_values(x.shape(), values).map_err(|e| Error::Backend(format!("noise prediction: {e}")))
    }
}

impl TextEncoder for CheckpointEncoder {
    fn id(&self) -> String {
        self.0.id("clap")
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        let reply = self.0.call(json!({ "op": "encode", "text": text }))?;
        decode_f32(&reply, "vector")
    }
}

impl LatentDecoder for CheckpointDecoder {
    fn id(&self) -> String {
        self.0.id("vae-vocoder")
    }

    fn spec(&self) -> DecoderSpec {
        self.0.spec
    }

    fn decode_window(&self, window: &LatentTensor) -> Result<Vec<f32>> {
        let reply = self.0.call(json!({
            "op": "decode",
            "latent": encode_f32(window.values()),
            "shape": shape_json(window.shape()),
        }))?;
        decode_f32(&reply, "samples")
    }
}

/// SHA-256 of a checkpoint file, or of a directory's files (relative path and content, sorted).
pub fn checkpoint_hash(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    if path.is_dir() {
        let mut files: Vec<PathBuf> = walkdir::WalkDir::new(path)
            .into_iter()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().is_file())
            .map(|e| e.into_path())
            .collect();
        files.sort();
        for file in files {
            let rel = file.strip_prefix(path).unwrap_or(&file);
            hasher.update(rel.to_string_lossy().as_bytes());
            hasher.update([0]);
            hash_file(&file, &mut hasher)?;
        }
    } else {
        hash_file(path, &mut hasher)?;
    }
    Ok(format!("{:x}", hasher.finalize()))
}

fn hash_file(path: &Path, hasher: &mut Sha256) -> Result<()> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Ok(());
        }
        hasher.update(&buf[..n]);
    }
}
