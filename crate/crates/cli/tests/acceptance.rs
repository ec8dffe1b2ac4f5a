//! The nine acceptance criteria, run in order inside one test so their timings
//! are not distorted by parallel tests. Prints one PASS/FAIL line per criterion,
//! even without `--nocapture`.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use scorediff::audio::{duration_of, read_wav, DecoderSpec};
use scorediff::conditioning::stub_encode;
use scorediff::diffusion::{
    build_outpaint_init, generate_sequence, sample, MeanMap, SamplerConfig, ToyGaussianBackend,
};
use scorediff::pipeline::{compose, resume, CompositionConfig, Manifest, PageRange};
use scorediff::prompts::{save_corpus, PromptCorpus, StylePrefix};
use scorediff::tensor::{seeded_gaussian, LatentShape, LatentTensor};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn shipped_corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/assets/fixture_corpus_pages_1_7.json")
}

/// Flat index into a (C,T,F) row-major buffer.
fn at(shape: LatentShape, c: usize, t: usize, f: usize) -> usize {
    (c * shape.time_frames + t) * shape.freq_bins + f
}

/// True if `a[:, a_from.., :]` equals `b[:, b_from.., :]` bit for bit over `frames` frames.
fn frames_bitwise_equal(a: &LatentTensor, a_from: usize, b: &LatentTensor, b_from: usize, frames: usize) -> bool {
    let (sa, sb) = (a.shape(), b.shape());
    (0..sa.channels).all(|c| {
        (0..frames).all(|t| {
            (0..sa.freq_bins).all(|f| {
                a.values()[at(sa, c, a_from + t, f)].to_bits() == b.values()[at(sb, c, b_from + t, f)].to_bits()
            })
        })
    })
}

fn fixture_config(dir: &Path) -> CompositionConfig {
    let corpus = dir.join("corpus.json");
    save_corpus(&PromptCorpus::fixture(), &corpus).unwrap();
    CompositionConfig {
        corpus_path: Some(corpus),
        page_range: Some(PageRange::new(1, 7).unwrap()),
        prefix: Some("sine wave is playing".into()),
        sampler: SamplerConfig {
            seed: 42,
            ..SamplerConfig::default()
        },
        output_wav_path: dir.join("piece.wav"),
        manifest_path: dir.join("piece.manifest.json"),
        ..CompositionConfig::default()
    }
}

fn without_timestamps(path: &Path) -> String {
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    let obj = v.as_object_mut().unwrap();
    obj.remove("created_at");
    obj.remove("completed_at");
    serde_json::to_string_pretty(&v).unwrap()
}

fn criterion_1() -> Check {
    let spec = DecoderSpec::default();
    ensure(
        spec.mel_frames_per_segment == 1024 && spec.mel_bins == 64,
        "mel is not 1024×64",
    )?;
    ensure(spec.compression_factor == 4, "compression factor is not 4")?;
    spec.validate().map_err(|e| e.to_string())?;
    let shape = spec.latent_shape();
    ensure(
        (shape.channels, shape.time_frames, shape.freq_bins) == (8, 1024 / 4, 64 / 4),
        format!("latent shape {shape}"),
    )?;
    ensure(
        shape == LatentShape::DEFAULT,
        "decoder and default latent shapes differ",
    )?;
    ensure(
        spec.segment_samples() == 10 * 16_000,
        format!("{} samples/segment", spec.segment_samples()),
    )?;
    ensure(spec.segment_samples() == 160_000, "segment is not 160000 samples")?;
    Ok(format!("mel 1024×64 ÷ 4 → {shape}, 160000 samples per 10 s segment"))
}

fn criterion_2() -> Check {
    let shape = LatentShape::DEFAULT;
    let h = shape.time_frames / 2;
    for i in 0..100u64 {
        let z = seeded_gaussian(shape, 2 * i + 1_000);
        let eps = seeded_gaussian(shape, 2 * i + 1_001);
        let init = build_outpaint_init(&z, &eps).map_err(|e| e.to_string())?;
        ensure(init.shape() == shape, format!("pair {i}: init shape {}", init.shape()))?;
        ensure(
            frames_bitwise_equal(&init, 0, &z, h, h),
            format!("pair {i}: first half differs from z[:, T/2:, :]"),
        )?;
        ensure(
            frames_bitwise_equal(&init, h, &eps, 0, h),
            format!("pair {i}: second half differs from eps[:, :T/2, :]"),
        )?;
    }
    Ok("100 pairs, both halves bitwise equal to their sources".into())
}

fn criterion_3() -> Check {
    let backend = ToyGaussianBackend::composition_default();
    let h = LatentShape::DEFAULT.half_frames();
    let vs: Vec<_> = (0..5)
        .map(|k| stub_encode(&format!("sine wave is playing, overlap check prompt {k}")).unwrap())
        .collect();
    let mut pairs = 0;
    for seed in 0..20u64 {
        let config = SamplerConfig::default().with_seed(seed);
        let zs = generate_sequence(&backend, &vs, &config).map_err(|e| e.to_string())?;
        ensure(zs.len() == 5, format!("seed {seed}: {} segments", zs.len()))?;
        for k in 0..4 {
            ensure(
                frames_bitwise_equal(&zs[k + 1], 0, &zs[k], h, h),
                format!("seed {seed}: z_{}[:, :128, :] != z_{k}[:, 128:, :]", k + 1),
            )?;
            pairs += 1;
        }
    }
    Ok(format!(
        "{pairs} consecutive pairs bitwise equal over the overlap (1000 steps)"
    ))
}

fn criterion_4() -> Check {
    let shape = LatentShape::new(2, 32, 4).unwrap();
    let backend = ToyGaussianBackend::new(shape, MeanMap::Constant { value: 0.5 }, 0.2).map_err(|e| e.to_string())?;
    let v = stub_encode("diffusion oracle").unwrap();
    let mut all = Vec::with_capacity(200 * shape.len());
    for seed in 0..200u64 {
        let config = SamplerConfig::default().with_seed(seed);
        ensure(config.num_steps == 1000, "sampler default is not 1000 steps")?;
        let z = sample(&backend, &v, &config, None).map_err(|e| e.to_string())?;
        all.extend(z.values().iter().map(|&x| f64::from(x)));
    }
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let detail = format!("grand mean {mean:.5}, variance {var:.5}");
    ensure(
        (mean - 0.5).abs() <= 0.02,
        format!("{detail}: mean off by more than 0.02"),
    )?;
    ensure(
        (var - 0.04).abs() <= 0.015,
        format!("{detail}: variance off by more than 0.015"),
    )?;
    Ok(detail)
}

fn criterion_5() -> Check {
    for n in [1usize, 2, 4, 28, 132] {
        let d = duration_of(n).map_err(|e| e.to_string())?;
        ensure(d == 5.0 * (n as f64 + 1.0), format!("duration_of({n}) = {d}"))?;
    }
    let dir = tempfile::tempdir().unwrap();
    let config = fixture_config(dir.path());
    let result = compose(&config).map_err(|e| e.to_string())?;
    let wav = read_wav(&config.output_wav_path).map_err(|e| e.to_string())?;
    ensure(
        result.manifest.segments.len() == 28,
        format!("{} segments", result.manifest.segments.len()),
    )?;
    ensure(wav.sample_rate == 16_000 && wav.channels == 1, "WAV is not 16 kHz mono")?;
    ensure(!wav.is_truncated(), "WAV is truncated")?;
    ensure(wav.samples.len() == 2_320_000, format!("{} samples", wav.samples.len()))?;
    ensure(wav.duration_seconds() == 145.0, format!("{} s", wav.duration_seconds()))?;
    Ok("duration_of(n) = 5(n+1) for n ∈ {1,2,4,28,132}; 28-prompt compose → 145.0 s, 2320000 samples".into())
}

fn criterion_6() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let shipped = fs::read(shipped_corpus()).map_err(|e| e.to_string())?;
    let runs: [&[&str]; 2] = [&[], &["--prefix", "sine wave is playing"]];
    for extra in runs {
        let out = dir.path().join("corpus.json");
        let output = Command::new(env!("CARGO_BIN_EXE_scorediff"))
            .args(["prompts", "--vision", "fixture", "--range", "1:7", "--quiet", "--out"])
            .arg(&out)
            .args(extra)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(
            output.status.success(),
            format!(
                "prompts exited with {}: {}",
                output.status,
                String::from_utf8_lossy(&output.stderr)
            ),
        )?;
        let written = fs::read(&out).map_err(|e| e.to_string())?;
        ensure(written == shipped, "written corpus differs from the shipped fixture")?;
    }
    let corpus = PromptCorpus::from_json(std::str::from_utf8(&shipped).unwrap()).map_err(|e| e.to_string())?;
    let page2 = corpus.page(2).ok_or("page 2 missing")?.prompts();
    ensure(
        page2[0] == page2[1] && page2[1] == page2[2],
        "page 2 does not repeat its sentence",
    )?;
    ensure(
        corpus.prompt_count() == 28,
        format!("{} prompts", corpus.prompt_count()),
    )?;
    Ok(format!(
        "{} bytes identical, page 2 repeats its sentence",
        shipped.len()
    ))
}

/// Returns the reference WAV bytes for criterion 8.
fn criterion_7(reference: &mut Option<(PathBuf, Vec<u8>)>, keep: &Path) -> Check {
    let config = fixture_config(keep);
    compose(&config).map_err(|e| e.to_string())?;
    let wav_a = fs::read(&config.output_wav_path).map_err(|e| e.to_string())?;
    let manifest_a = without_timestamps(&config.manifest_path);

    compose(&config).map_err(|e| e.to_string())?;
    let wav_b = fs::read(&config.output_wav_path).map_err(|e| e.to_string())?;
    let manifest_b = without_timestamps(&config.manifest_path);

    ensure(wav_a == wav_b, "WAVs differ between identical runs")?;
    ensure(
        manifest_a == manifest_b,
        "manifests differ outside the timestamp fields",
    )?;
    *reference = Some((config.manifest_path.clone(), wav_a.clone()));
    Ok(format!(
        "two runs, seed 42: {} WAV bytes and manifests identical",
        wav_a.len()
    ))
}

fn criterion_8(reference: &Option<(PathBuf, Vec<u8>)>) -> Check {
    let (_, full_wav) = reference.as_ref().ok_or("no reference WAV from criterion 7")?;
    let dir = tempfile::tempdir().unwrap();
    let config = CompositionConfig {
        stop_after: Some(10),
        ..fixture_config(dir.path())
    };
    let partial = compose(&config).map_err(|e| e.to_string())?;
    ensure(partial.wav_path.is_none(), "interrupted run wrote a WAV")?;
    ensure(!config.output_wav_path.exists(), "interrupted run left a WAV behind")?;
    ensure(
        partial.manifest.segments.len() == 10,
        format!("{} segments before interruption", partial.manifest.segments.len()),
    )?;

    let config = CompositionConfig {
        stop_after: None,
        ..config
    };
    let manifest = Manifest::load(&config.manifest_path).map_err(|e| e.to_string())?;
    let resumed = resume(&config, &manifest).map_err(|e| e.to_string())?;
    ensure(resumed.manifest.segments.len() == 28, "resumed run is not 28 segments")?;
    let wav = fs::read(&config.output_wav_path).map_err(|e| e.to_string())?;
    ensure(&wav == full_wav, "resumed WAV differs from the uninterrupted run")?;
    Ok("stopped after 10 of 28, resumed WAV byte-identical".into())
}

fn criterion_9(reference: &Option<(PathBuf, Vec<u8>)>) -> Check {
    let (manifest_path, _) = reference.as_ref().ok_or("no manifest from criterion 7")?;
    let manifest = Manifest::load(manifest_path).map_err(|e| e.to_string())?;
    ensure(manifest.segments.len() == 28, "manifest does not have 28 segments")?;
    let want = "sine wave is playing, ";
    for s in &manifest.segments {
        ensure(
            s.prompt.starts_with(want),
            format!("segment {}: {:?}", s.index, s.prompt),
        )?;
        ensure(
            !s.prompt[want.len()..].starts_with(' '),
            format!("segment {}: doubled separator", s.index),
        )?;
    }
    // A corpus written with another style still yields the run's prefix.
    let other = PromptCorpus::fixture().with_prefix(StylePrefix::new("orchestral strings").unwrap());
    let plan =
        scorediff::pipeline::plan_segments(&other, None, Some("sine wave is playing")).map_err(|e| e.to_string())?;
    ensure(
        plan.iter().all(|s| s.prompt.starts_with(want)),
        "prefix override not applied",
    )?;
    Ok("all 28 manifest prompts start with \"sine wave is playing, \"".into())
}

/// Writes past the test harness's output capture, so the lines show up in a plain `cargo test`.
fn report(line: std::fmt::Arguments) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

struct Outcome {
    number: usize,
    name: &'static str,
    result: Check,
    elapsed: Duration,
    budget: Duration,
}

fn run(number: usize, name: &'static str, budget: Duration, f: impl FnOnce() -> Check) -> Outcome {
    let start = Instant::now();
    let result = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    };
    let elapsed = start.elapsed();
    let result = match result {
        Ok(detail) if elapsed > budget => Err(format!("{detail}; took {elapsed:.2?}, budget {budget:?}")),
        other => other,
    };
    let outcome = Outcome {
        number,
        name,
        result,
        elapsed,
        budget,
    };
    let (tag, detail) = match &outcome.result {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    report(format_args!(
        "criterion {} {:<22} {tag}  {:>7.2} s / {:>4} s  {detail}",
        outcome.number,
        outcome.name,
        outcome.elapsed.as_secs_f64(),
        outcome.budget.as_secs()
    ));
    outcome
}

#[test]
fn acceptance() {
    let s = Duration::from_secs;
    let keep = tempfile::tempdir().unwrap();
    let mut reference = None;
    let outcomes = vec![
        run(1, "shape chain", s(1), criterion_1),
        run(2, "outpaint init", s(5), criterion_2),
        run(3, "overlap clamp", s(30), criterion_3),
        run(4, "diffusion oracle", s(120), criterion_4),
        run(5, "duration formula", s(60), criterion_5),
        run(6, "fixture fidelity", s(1), criterion_6),
        run(7, "determinism", s(120), || criterion_7(&mut reference, keep.path())),
        run(8, "resume equivalence", s(120), || criterion_8(&reference)),
        run(9, "prefix contract", s(1), || criterion_9(&reference)),
    ];
    let failed: Vec<String> = outcomes
        .iter()
        .filter(|o| o.result.is_err())
        .map(|o| format!("{} ({})", o.number, o.name))
        .collect();
    report(format_args!(
        "acceptance: {} of {} criteria passed",
        outcomes.len() - failed.len(),
        outcomes.len()
    ));
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}
