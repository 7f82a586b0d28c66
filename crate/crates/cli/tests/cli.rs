use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const SMALL: &str = r#"
[grid]
level = 2

[dsvd]
noise_alpha = 0.02

[sim]
duration_secs = 1.0
calibration_secs = 2.0
snr_db = [20.0]
rt60 = [0.2]

[eval]
methods = ["dsvd-phat", "svd-phat", "gsvd-music"]
n_scenarios = 2
"#;

fn sslkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sslkit"))
        .args(args)
        .env_remove("SSLKIT_CORPUS_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn default_index_has_rank_23_and_delta_lowers_it() {
    let dir = TempDir::new().unwrap();
    let index = dir.path().join("index.bin");
    let report = dir.path().join("report.json");
    let o = sslkit(&["build-index", "--out", s(&index), "--report", s(&report)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("K = 23"), "{}", stdout(&o));
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["rank"], 23);
    assert_eq!(r["directions"], 1282);
    assert!(r["energy_ratio"].as_f64().unwrap() >= 1.0 - 1e-5);

    let coarse = dir.path().join("coarse.json");
    let o = sslkit(&["build-index", "--out", s(&dir.path().join("c.bin")), "--delta", "0.5", "--report", s(&coarse)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let c: Value = serde_json::from_str(&std::fs::read_to_string(&coarse).unwrap()).unwrap();
    assert!(c["rank"].as_u64().unwrap() < 23);
}

#[test]
fn rebuilt_index_is_byte_identical() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let a = dir.path().join("a.bin");
    let b = dir.path().join("sub/b.bin");
    for out in [&a, &b] {
        let o = sslkit(&["--config", s(&cfg), "build-index", "--out", s(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn config_command_round_trips() {
    let dir = TempDir::new().unwrap();
    let o = sslkit(&["config"]);
    assert_eq!(code(&o), 0);
    let printed = stdout(&o);
    assert_eq!(sslkit_cli::RunConfig::from_toml(&printed).unwrap(), sslkit_cli::RunConfig::default());
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let o = sslkit(&["--config", s(&cfg), "--seed", "42", "config"]);
    let parsed = sslkit_cli::RunConfig::from_toml(&stdout(&o)).unwrap();
    assert_eq!(parsed.grid.level, 2);
    assert_eq!(parsed.sim.seed, 42);
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    let dir = TempDir::new().unwrap();
    let wav = dir.path().join("x.wav");
    let o = sslkit(&["localize", s(&wav), "--method", "srp-phat"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("unknown method"), "{}", stderr(&o));
    let o = sslkit(&["localize", s(&wav), "--method", "dsvd-phat"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--noise"));
    assert_eq!(code(&sslkit(&["no-such-command"])), 1);
    assert_eq!(code(&sslkit(&["--jobs", "0", "config"])), 1);
    assert_eq!(code(&sslkit(&["--config", s(&dir.path().join("missing.toml")), "config"])), 1);
    let bad = write_config(dir.path(), "bad.toml", "[dsvd]\nalpha = 1.5\n[grid]\nlevel = 1\n");
    assert_eq!(code(&sslkit(&["--config", s(&bad), "build-index", "--out", s(&dir.path().join("i.bin"))])), 0);
    let o = sslkit(&["--config", s(&bad), "localize", s(&wav), "--method", "svd-phat"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    let typo = write_config(dir.path(), "typo.toml", "[dsvd]\ndleta = 0.1\n");
    assert_eq!(code(&sslkit(&["--config", s(&typo), "config"])), 1);
    let o = sslkit(&["--config", s(&typo), "build-index", "--delta", "2.0"]);
    assert_eq!(code(&o), 1);
    assert_eq!(code(&sslkit(&["--help"])), 0);
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let o = sslkit(&["--config", s(&cfg), "localize", s(&dir.path().join("missing.wav")), "--method", "svd-phat"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let garbage = dir.path().join("garbage.bin");
    std::fs::write(&garbage, b"not an index").unwrap();
    let o = sslkit(&["--config", s(&cfg), "bench", "--index", s(&garbage)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

fn simulate_free_field(dir: &Path, cfg: &Path) -> PathBuf {
    let out = dir.join("scenes");
    let o = sslkit(&["--config", s(cfg), "simulate", "--out-dir", s(&out), "--free-field", "2.0", "--snr", "20"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest = out.join("scene_000.json");
    assert_eq!(stdout(&o).trim(), manifest.to_str().unwrap());
    for f in ["scene_000.wav", "scene_000.noise.wav", "scene_000.noise.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    manifest
}

fn read_estimates(path: &Path) -> Vec<Vec<f64>> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "frame,q,x,y,z,amplitude,warmed_up");
    lines
        .filter(|l| l.ends_with("true"))
        .map(|l| l.split(',').take(6).map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn simulated_scene_localizes_to_its_manifest() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let manifest = simulate_free_field(dir.path(), &cfg);
    let m: Value = serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    let truth: Vec<f64> = m["true_doa"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(m["snr_db"], 20.0);
    let scenes = manifest.parent().unwrap();
    let wav = scenes.join("scene_000.wav");
    let index = dir.path().join("index.bin");
    assert_eq!(code(&sslkit(&["--config", s(&cfg), "build-index", "--out", s(&index)])), 0);
    let runs = [
        ("dsvd-phat", Some("scene_000.noise.json")),
        ("gsvd-music", Some("scene_000.noise.json")),
        ("gsvd-music", Some("scene_000.noise.wav")),
        ("svd-phat", None),
    ];
    for (i, (method, noise)) in runs.iter().enumerate() {
        let out = dir.path().join(format!("est{i}.csv"));
        let mut args = vec!["--config", s(&cfg), "localize", s(&wav), "--method", method, "--index", s(&index)];
        args.extend(["--out", s(&out), "--truth", s(&manifest)]);
        let noise_path = noise.map(|n| scenes.join(n));
        if let Some(p) = &noise_path {
            args.extend(["--noise", s(p)]);
        }
        let o = sslkit(&args);
        assert_eq!(code(&o), 0, "{method}: {}", stderr(&o));
        assert!(stderr(&o).contains("warmed-up frames within"));
        let rows = read_estimates(&out);
        assert!(rows.len() > 50);
        let hits = rows
            .iter()
            .filter(|r| {
                let dot = r[2] * truth[0] + r[3] * truth[1] + r[4] * truth[2];
                dot.clamp(-1.0, 1.0).acos() <= 0.2
            })
            .count();
        assert!(hits as f64 >= 0.9 * rows.len() as f64, "{method}: {hits}/{}", rows.len());
    }
    let o = sslkit(&["--config", s(&cfg), "localize", s(&wav), "--method", "svd-phat", "--index", s(&index), "--format", "jsonl"]);
    assert_eq!(code(&o), 0);
    let first: Value = serde_json::from_str(stdout(&o).lines().next().unwrap()).unwrap();
    for key in ["frame", "q", "x", "y", "z", "amplitude"] {
        assert!(first.get(key).is_some(), "{key}");
    }
}

#[test]
fn mismatched_inputs_are_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let manifest = simulate_free_field(dir.path(), &cfg);
    let scenes = manifest.parent().unwrap();
    // An index for another grid level.
    let other = write_config(dir.path(), "other.toml", "[grid]\nlevel = 1\n");
    let index = dir.path().join("l1.bin");
    assert_eq!(code(&sslkit(&["--config", s(&other), "build-index", "--out", s(&index)])), 0);
    let o = sslkit(&["--config", s(&cfg), "localize", s(&scenes.join("scene_000.wav")), "--method", "svd-phat", "--index", s(&index)]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    // A noise sidecar for another frame size.
    let wide = write_config(dir.path(), "wide.toml", "[grid]\nlevel = 2\n[stft]\nframe_size = 512\nhop_size = 256\n");
    let o = sslkit(&[
        "--config",
        s(&wide),
        "localize",
        s(&scenes.join("scene_000.wav")),
        "--method",
        "dsvd-phat",
        "--noise",
        s(&scenes.join("scene_000.noise.json")),
    ]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

const EVAL: &str = r#"
[grid]
level = 2

[dsvd]
noise_alpha = 0.02

[sim]
duration_secs = 1.0
calibration_secs = 2.0
snr_db = [0.0, 20.0]
rt60 = [0.2]

[eval]
methods = ["dsvd-phat", "svd-phat"]
n_scenarios = 2
"#;

#[test]
fn evaluate_is_deterministic_under_a_fixed_seed() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "eval.toml", EVAL);
    let mut outputs = Vec::new();
    for (run, jobs) in [("a", "1"), ("b", "2")] {
        let out = dir.path().join(run);
        let o = sslkit(&["--config", s(&cfg), "--seed", "5", "--jobs", jobs, "evaluate", "--out-dir", s(&out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("dsvd-phat"));
        outputs.push(out);
    }
    for f in ["auc.csv", "auc.txt", "roc.csv"] {
        let a = std::fs::read(outputs[0].join(f)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, std::fs::read(outputs[1].join(f)).unwrap(), "{f}");
    }
    let csv = std::fs::read_to_string(outputs[0].join("auc.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
    let roc = std::fs::read_to_string(outputs[0].join("roc.csv")).unwrap();
    assert!(roc.starts_with("method,snr_db,rt60_ms,threshold,tpr,fpr"));
}

#[test]
fn failed_assertions_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let strict = format!(
        "{EVAL}\n[eval.assert]\ncomplete = true\nmin_auc = [{{ method = \"dsvd-phat\", snr_db = 20.0, rt60 = 0.2, auc = 1.5 }}]\n"
    );
    let cfg = write_config(dir.path(), "strict.toml", &strict);
    let o = sslkit(&["--config", s(&cfg), "evaluate", "--out-dir", s(dir.path()), "--scenarios", "1"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("PASS complete"), "{out}");
    assert!(out.contains("FAIL min auc dsvd-phat"), "{out}");
    assert!(stderr(&o).contains("1 assertion(s) failed"));
    assert!(dir.path().join("auc.csv").is_file());
}

#[test]
fn bench_reports_online_and_offline_timings() {
    let dir = TempDir::new().unwrap();
    let text = format!("{SMALL}\n[eval.assert]\nmin_speedup = 1.0\n");
    let cfg = write_config(dir.path(), "bench.toml", &text);
    let out = dir.path().join("bench.json");
    let o = sslkit(&["--config", s(&cfg), "bench", "--out", s(&out), "--repeats", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("PASS speedup"));
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert!(r["index_build_secs"].as_f64().unwrap() > 0.0);
    assert!(r["bank_build_secs"].as_f64().unwrap() > 0.0);
    let methods: Vec<&str> = r["online"].as_array().unwrap().iter().map(|t| t["method"].as_str().unwrap()).collect();
    assert_eq!(methods, ["dsvd-phat", "svd-phat", "gsvd-music"]);
    for t in r["online"].as_array().unwrap() {
        assert!(t["mean_ms"].as_f64().unwrap() > 0.0);
    }
    let text = format!("{SMALL}\n[eval.assert]\nmax_frame_ms = 1e-9\n");
    let cfg = write_config(dir.path(), "tight.toml", &text);
    let o = sslkit(&["--config", s(&cfg), "bench", "--out", s(&out), "--repeats", "1"]);
    assert_eq!(code(&o), 2);
    assert!(stdout(&o).contains("FAIL frame time"));
}

#[test]
fn corpus_directory_comes_from_the_environment() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let corpus = dir.path().join("corpus");
    std::fs::create_dir(&corpus).unwrap();
    let run = |args: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_sslkit"))
            .args(args)
            .env("SSLKIT_CORPUS_DIR", &corpus)
            .output()
            .unwrap()
    };
    let o = run(&["config"]);
    let c = sslkit_cli::RunConfig::from_toml(&stdout(&o)).unwrap();
    assert_eq!(c.sim.corpus_dir.as_deref(), Some(corpus.as_path()));
    // No .wav files yet: a configuration error.
    let out = dir.path().join("scenes");
    let o = run(&["--config", s(&cfg), "simulate", "--out-dir", s(&out)]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    // A file from the corpus becomes the source.
    let tone: Vec<f64> = (0..16000).map(|n| 0.3 * (n as f64 * 0.2).sin()).collect();
    let sig = sslkit::MultichannelSignal::new(vec![tone], 16000.0).unwrap();
    sslkit::wav::write_wav(corpus.join("tone.wav"), &sig).unwrap();
    let o = run(&["--config", s(&cfg), "simulate", "--out-dir", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("scene_000.wav").is_file());
}
