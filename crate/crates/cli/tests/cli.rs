use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn scorediff(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scorediff"))
        .args(args)
        .current_dir(dir)
        .env_remove("SCORE_VISION_API_KEY")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_corpus(dir: &Path) {
    let out = scorediff(
        &["prompts", "--vision", "fixture", "--range", "1:7", "--out", "c.json"],
        dir,
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

/// Four segments at a handful of steps: quick, but the full pipeline.
fn generate(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "generate",
        "--corpus",
        "c.json",
        "--range",
        "1:1",
        "--steps",
        "5",
        "--seed",
        "42",
        "--out",
        "p.wav",
        "--manifest",
        "m.json",
    ];
    args.extend_from_slice(extra);
    scorediff(&args, dir)
}

#[test]
fn prompts_fixture_reports_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = scorediff(
        &[
            "prompts",
            "--vision",
            "fixture",
            "--range",
            "1:7",
            "--prefix",
            "sine wave is playing",
            "--out",
            "c.json",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(report["pages"], 7);
    assert_eq!(report["prompts"], 28);
    assert!(stderr(&out).contains("28 prompts"));
}

#[test]
fn prompts_reversed_range_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = scorediff(
        &["prompts", "--vision", "fixture", "--range", "7:1", "--out", "c.json"],
        dir.path(),
    );
    assert_eq!(code(&out), 1);
    assert!(!dir.path().join("c.json").exists());
}

#[test]
fn prompts_service_without_key_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = scorediff(
        &["prompts", "--vision", "service", "--range", "1:7", "--out", "c.json"],
        dir.path(),
    );
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("SCORE_VISION_API_KEY"), "{}", stderr(&out));
    assert!(!dir.path().join("c.json").exists());
}

#[test]
fn prompts_missing_pages_dir_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = scorediff(
        &[
            "prompts", "--vision", "fixture", "--pages", "nowhere", "--range", "1:2", "--out", "c.json",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}

#[test]
fn generate_then_inspect() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path());
    let out = generate(dir.path(), &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(report["segments"], 4);
    assert_eq!(report["duration_s"], 25.0);

    let out = scorediff(&["inspect", "--manifest", "m.json", "--wav", "p.wav"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(stdout(&out).trim(), "4 segments, 25.0 s");
    let table = stderr(&out);
    assert!(table.contains("checksum") && table.lines().count() >= 5, "{table}");
}

#[test]
fn inspect_truncated_wav_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path());
    assert_eq!(code(&generate(dir.path(), &[])), 0);
    let wav = dir.path().join("p.wav");
    let bytes = fs::read(&wav).unwrap();
    fs::write(&wav, &bytes[..bytes.len() - 1000]).unwrap();
    let out = scorediff(&["inspect", "--manifest", "m.json", "--wav", "p.wav"], dir.path());
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    assert!(stderr(&out).contains("truncated"), "{}", stderr(&out));
}

#[test]
fn inspect_missing_manifest_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = scorediff(&["inspect", "--manifest", "m.json", "--wav", "p.wav"], dir.path());
    assert_eq!(code(&out), 4);
}

#[test]
fn generate_rejects_corrupt_corpus() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path());
    let text = fs::read_to_string(dir.path().join("c.json")).unwrap();
    let broken = text.replacen(
        "\"A steady, mid-range tone follows the diagonal line, with a calm, deliberate progression.\",",
        "",
        1,
    );
    assert_ne!(text, broken);
    fs::write(dir.path().join("c.json"), broken).unwrap();
    let out = generate(dir.path(), &[]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("expected 4 prompts"), "{}", stderr(&out));
    assert!(!dir.path().join("p.wav").exists());
}

#[test]
fn checkpoint_backend_without_path_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path());
    let out = generate(dir.path(), &["--backend", "checkpoint"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(!dir.path().join("p.wav").exists());
}

#[test]
fn checkpoint_backend_with_missing_file_names_it() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path());
    let out = generate(dir.path(), &["--backend", "checkpoint", "--checkpoint", "missing.ckpt"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("missing.ckpt"), "{}", stderr(&out));
}

#[test]
fn compose_with_pages_and_corpus_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path());
    let out = scorediff(&["compose", "--pages", ".", "--corpus", "c.json"], dir.path());
    assert_eq!(code(&out), 1);
}

#[test]
fn compose_from_page_images_with_fixture_vision() {
    let dir = tempfile::tempdir().unwrap();
    let pages = dir.path().join("pages");
    fs::create_dir(&pages).unwrap();
    for p in 1..=2 {
        fs::write(pages.join(format!("score_{p:03}.png")), b"\x89PNG\r\n\x1a\n").unwrap();
    }
    let out = scorediff(
        &[
            "compose",
            "--pages",
            "pages",
            "--range",
            "1:2",
            "--vision",
            "fixture",
            "--steps",
            "3",
            "--out",
            "p.wav",
            "--manifest",
            "m.json",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = scorediff(&["inspect", "--manifest", "m.json", "--wav", "p.wav"], dir.path());
    assert_eq!(stdout(&out).trim(), "8 segments, 45.0 s");
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path());
    fs::write(
        dir.path().join("cfg.json"),
        r#"{"corpus_path": "c.json", "page_range": {"first": 1, "last": 1},
            "sampler": {"num_steps": 4, "beta_start": 0.0001, "beta_end": 0.02, "clamp_final_step": true, "seed": 7},
            "output_wav_path": "p.wav", "manifest_path": "m.json"}"#,
    )
    .unwrap();
    let out = scorediff(&["--config", "cfg.json", "compose"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("m.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 7);

    let out = scorediff(&["--config", "cfg.json", "compose", "--seed", "42"], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("m.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 42);
    assert_eq!(m["config"]["sampler"]["num_steps"], 4);
}

#[test]
fn bad_config_file_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), r#"{"corpus": "c.json"}"#).unwrap();
    let out = scorediff(&["--config", "cfg.json", "compose"], dir.path());
    assert_eq!(code(&out), 1, "{}", stderr(&out));
}

#[test]
fn stop_and_resume_matches_direct_run() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path());
    assert_eq!(code(&generate(dir.path(), &[])), 0);
    let direct = fs::read(dir.path().join("p.wav")).unwrap();
    fs::remove_file(dir.path().join("p.wav")).unwrap();

    let out = generate(dir.path(), &["--stop-after", "2"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stderr(&out).contains("--resume"));
    assert!(!dir.path().join("p.wav").exists());

    let out = generate(dir.path(), &["--resume"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read(dir.path().join("p.wav")).unwrap(), direct);
}

#[test]
fn resume_with_other_seed_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path());
    assert_eq!(code(&generate(dir.path(), &["--stop-after", "1"])), 0);
    let out = scorediff(
        &[
            "generate",
            "--corpus",
            "c.json",
            "--range",
            "1:1",
            "--steps",
            "5",
            "--seed",
            "9",
            "--out",
            "p.wav",
            "--manifest",
            "m.json",
            "--resume",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(stderr(&out).contains("seed"));
}
