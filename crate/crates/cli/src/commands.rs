//! One function per subcommand. Each takes the effective configuration and
//! its parsed arguments and writes its outputs to disk.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use sslkit::correlation::{estimate_noise, CorrelationSet};
use sslkit::dsvd::SvdIndex;
use sslkit::estimate::{write_estimates_csv, write_estimates_jsonl};
use sslkit::eval::{
    angle_error, bench_per_frame, localize_frames, prepare_scene, run_condition_grid, AucTable, BenchReport,
    MethodSuite,
};
use sslkit::geometry::build_doa_grid;
use sslkit::simroom::{sample_free_field, sample_scenarios, SceneManifest};
use sslkit::wav::{read_wav_channels, write_wav};
use sslkit::{DoaEstimate, Method};

use crate::checks::{check_bench, check_table, speedup, CheckResult};
use crate::config::RunConfig;
use crate::{BenchArgs, BuildIndexArgs, CliError, EvaluateArgs, LocalizeArgs, OutputFormat, SimulateArgs};

type Result<T> = std::result::Result<T, CliError>;

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(CliError::io(format!("cannot create {}", path.display())))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(CliError::io(format!("cannot open {}", path.display())))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(CliError::io(format!("cannot create {}", dir.display())))
}

fn flush(mut w: impl Write, path: &Path) -> Result<()> {
    w.flush().map_err(CliError::io(format!("cannot write {}", path.display())))
}

fn first(values: &[f64], what: &str) -> Result<f64> {
    values
        .first()
        .copied()
        .ok_or_else(|| CliError::Config(format!("no {what} configured")))
}

/// Offline state for every method, from a saved index or built from scratch.
pub fn load_suite(config: &RunConfig, index: Option<&Path>) -> Result<MethodSuite> {
    let geometry = config.geometry()?;
    let pipeline = config.pipeline();
    let Some(path) = index else {
        return Ok(MethodSuite::build(geometry, pipeline)?);
    };
    let index = SvdIndex::<f64>::read_from(open(path)?)?;
    if index.geometry() != &geometry
        || index.frame_size() != pipeline.frame_size
        || index.grid().refinement_level() != pipeline.grid_level
    {
        return Err(CliError::Config(format!(
            "{} was built for a different geometry, frame size or grid",
            path.display()
        )));
    }
    if index.delta() != pipeline.delta {
        log::warn!("{} was built with delta {}, configuration says {}", path.display(), index.delta(), pipeline.delta);
    }
    Ok(MethodSuite::with_index(index, pipeline)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndexReport {
    pub path: PathBuf,
    pub rank: usize,
    pub energy_ratio: f64,
    pub delta: f64,
    pub directions: usize,
    pub grid_level: u32,
    pub width: usize,
    pub build_secs: f64,
}

impl fmt::Display for IndexReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "K = {}", self.rank)?;
        writeln!(f, "energy ratio {:.9} (need >= {})", self.energy_ratio, 1.0 - self.delta)?;
        writeln!(
            f,
            "Q = {} (grid level {}), width {}",
            self.directions, self.grid_level, self.width
        )?;
        write!(f, "built in {:.2} s, written to {}", self.build_secs, self.path.display())
    }
}

pub fn build_index(config: &RunConfig, args: &BuildIndexArgs) -> Result<IndexReport> {
    let geometry = config.geometry()?;
    let delta = args.delta.unwrap_or(config.dsvd.delta);
    let start = Instant::now();
    let index = SvdIndex::build(
        geometry,
        std::sync::Arc::new(build_doa_grid(config.grid.level)),
        config.stft.frame_size,
        delta,
        config.dsvd.backend,
    )?;
    let build_secs = start.elapsed().as_secs_f64();
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let mut out = create(&args.out)?;
    index.write_to(&mut out)?;
    flush(out, &args.out)?;
    let report = IndexReport {
        path: args.out.clone(),
        rank: index.rank(),
        energy_ratio: index.svd().energy_ratio(),
        delta,
        directions: index.grid().len(),
        grid_level: index.grid().refinement_level(),
        width: index.steering().width(),
        build_secs,
    };
    if let Some(path) = &args.report {
        let mut f = create(path)?;
        serde_json::to_writer_pretty(&mut f, &report).map_err(sslkit::Error::from)?;
        writeln!(f).map_err(CliError::io(format!("cannot write {}", path.display())))?;
        flush(f, path)?;
    }
    Ok(report)
}

/// Render scenes; returns the manifest paths.
///
/// Each scene `scene_NNN` gets the mixture WAV, a noise-only calibration WAV,
/// the noise correlation sidecar and a JSON manifest with the ground truth.
pub fn simulate(config: &RunConfig, args: &SimulateArgs) -> Result<Vec<PathBuf>> {
    let geometry = config.geometry()?;
    let scene_config = config.scene()?;
    let snr = if args.clean {
        f64::INFINITY
    } else {
        match args.snr {
            Some(s) => s,
            None => first(&config.sim.snr_db, "SNR")?,
        }
    };
    let scenarios = match args.free_field {
        Some(distance) => {
            if !(distance > 0.0) {
                return Err(CliError::Usage(format!("free-field distance must be positive, got {distance}")));
            }
            let grid = build_doa_grid::<f64>(config.grid.level);
            let dirs: Vec<[f64; 3]> = grid.directions().iter().map(|d| [d.x, d.y, d.z]).collect();
            sample_free_field(args.count, snr, &dirs, distance, config.sim.mount, config.sim.seed)
        }
        None => {
            let rt60 = match args.rt60 {
                Some(r) => r,
                None => first(&config.sim.rt60, "RT60")?,
            };
            sample_scenarios(args.count, snr, rt60, config.sim.seed, &config.placement())
        }
    };
    let stft = sslkit::stft::Stft::<f64>::new(config.stft.frame_size, config.stft.hop_size, config.stft.window)?;
    create_dir(&args.out_dir)?;
    let mut manifests = Vec::with_capacity(scenarios.len());
    for (i, scenario) in scenarios.iter().enumerate() {
        let scene = prepare_scene(scenario, &geometry, &scene_config)?;
        let stem = format!("scene_{i:03}");
        let wav = PathBuf::from(format!("{stem}.wav"));
        let sidecar = PathBuf::from(format!("{stem}.noise.json"));
        write_wav(args.out_dir.join(&wav), &scene.signal)?;
        write_wav(args.out_dir.join(format!("{stem}.noise.wav")), &scene.calibration)?;
        let rnn = estimate_noise(&stft.analyze(&scene.calibration)?, config.dsvd.noise_alpha)?;
        let path = args.out_dir.join(&sidecar);
        let mut f = create(&path)?;
        rnn.write_json(&mut f)?;
        flush(f, &path)?;
        let manifest = SceneManifest {
            wav,
            noise_sidecar: Some(sidecar),
            true_doa: [scene.true_doa.x, scene.true_doa.y, scene.true_doa.z],
            snr_db: snr.is_finite().then_some(snr),
            rt60: scenario.room.rt60,
            seed: config.sim.seed,
            active_span: scene.active_span,
            sample_rate: geometry.sample_rate(),
            room: scenario.room.clone(),
        };
        let path = args.out_dir.join(format!("{stem}.json"));
        manifest.write_json(&path)?;
        manifests.push(path);
    }
    Ok(manifests)
}

/// `R_nn` from a JSON sidecar, or estimated from a noise-only WAV recording.
pub fn load_noise(suite: &MethodSuite, path: &Path) -> Result<CorrelationSet<f64>> {
    let is_wav = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    let noise = if is_wav {
        let rec = read_wav_channels::<f64>(path, suite.geometry.num_mics())?;
        check_rate(rec.sample_rate(), suite, path)?;
        suite.noise_correlation(&rec)?
    } else {
        CorrelationSet::read_json(open(path)?)?
    };
    let bins = suite.config.frame_size / 2 + 1;
    if noise.num_mics() != suite.geometry.num_mics() || noise.num_bins() != bins {
        return Err(CliError::Config(format!(
            "{} holds {} microphones by {} bins, expected {} by {bins}",
            path.display(),
            noise.num_mics(),
            noise.num_bins(),
            suite.geometry.num_mics()
        )));
    }
    Ok(noise)
}

fn check_rate(rate: f64, suite: &MethodSuite, path: &Path) -> Result<()> {
    if (rate - suite.geometry.sample_rate()).abs() > 1e-9 {
        return Err(CliError::Config(format!(
            "{} is sampled at {rate} Hz, configuration says {}",
            path.display(),
            suite.geometry.sample_rate()
        )));
    }
    Ok(())
}

/// Estimates for every frame that produced one.
pub fn localize_file(config: &RunConfig, args: &LocalizeArgs) -> Result<(Method, Vec<DoaEstimate>)> {
    let method: Method = args
        .method
        .parse()
        .map_err(|e: sslkit::Error| CliError::Usage(e.to_string().replace("invalid configuration: ", "")))?;
    if method != Method::SvdPhat && args.noise.is_none() {
        return Err(CliError::Usage(format!("{method} needs a noise sidecar or recording (--noise)")));
    }
    let suite = load_suite(config, args.index.as_deref())?;
    let signal = read_wav_channels::<f64>(&args.wav, suite.geometry.num_mics())?;
    check_rate(signal.sample_rate(), &suite, &args.wav)?;
    let noise = match &args.noise {
        Some(path) if method != Method::SvdPhat => load_noise(&suite, path)?,
        _ => CorrelationSet::new(suite.geometry.num_mics(), suite.config.frame_size / 2 + 1, suite.config.alpha)?,
    };
    let frames = suite.stft.analyze(&signal)?;
    let mut loc = suite.localizer(method, &noise)?;
    let estimates = localize_frames(loc.as_mut(), &frames)?.into_iter().flatten().collect();
    Ok((method, estimates))
}

pub fn localize(config: &RunConfig, args: &LocalizeArgs) -> Result<()> {
    let (method, estimates) = localize_file(config, args)?;
    match &args.out {
        Some(path) => {
            let mut f = create(path)?;
            write_estimates(&estimates, args.format, &mut f)?;
            flush(f, path)?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            write_estimates(&estimates, args.format, &mut lock)?;
        }
    }
    if let Some(path) = &args.truth {
        let manifest = SceneManifest::read_json(path)?;
        let truth = nalgebra::Vector3::from(manifest.true_doa);
        let scored: Vec<f64> = estimates
            .iter()
            .filter(|e| e.warmed_up)
            .map(|e| angle_error(&e.direction, &truth))
            .collect::<std::result::Result<_, _>>()?;
        let hits = scored.iter().filter(|&&t| t <= config.eval.delta_theta).count();
        eprintln!(
            "{method}: {hits}/{} warmed-up frames within {} rad of the true direction",
            scored.len(),
            config.eval.delta_theta
        );
    }
    Ok(())
}

fn write_estimates(estimates: &[DoaEstimate], format: OutputFormat, out: &mut impl Write) -> Result<()> {
    match format {
        OutputFormat::Csv => write_estimates_csv(estimates, out)?,
        OutputFormat::Jsonl => write_estimates_jsonl(estimates, out)?,
    }
    Ok(())
}

/// Output files of `evaluate` inside its output directory.
pub const AUC_CSV: &str = "auc.csv";
pub const AUC_TEXT: &str = "auc.txt";
pub const ROC_CSV: &str = "roc.csv";

/// Run the condition grid and write `auc.csv`, `auc.txt` and `roc.csv`.
pub fn evaluate_grid(config: &RunConfig, args: &EvaluateArgs) -> Result<(AucTable, Vec<CheckResult>)> {
    let mut grid = config.condition_grid()?;
    if let Some(n) = args.scenarios {
        grid.n_scenarios = n;
    }
    let suite = load_suite(config, args.index.as_deref())?;
    let table = run_condition_grid(&suite, &grid)?;
    create_dir(&args.out_dir)?;
    let path = args.out_dir.join(AUC_CSV);
    let mut f = create(&path)?;
    table.write_csv(&mut f)?;
    flush(f, &path)?;
    let path = args.out_dir.join(AUC_TEXT);
    std::fs::write(&path, table.to_text()).map_err(CliError::io(format!("cannot write {}", path.display())))?;
    let path = args.out_dir.join(ROC_CSV);
    let mut f = create(&path)?;
    table.write_roc_csv(&mut f)?;
    flush(f, &path)?;
    let checks = check_table(&table, &config.eval.assert);
    Ok((table, checks))
}

fn report_checks(checks: &[CheckResult]) -> Result<()> {
    for c in checks {
        println!("{c}");
    }
    match checks.iter().filter(|c| !c.passed).count() {
        0 => Ok(()),
        n => Err(CliError::Assertions(n)),
    }
}

pub fn evaluate(config: &RunConfig, args: &EvaluateArgs) -> Result<()> {
    let (table, checks) = evaluate_grid(config, args)?;
    print!("{}", table.to_text());
    report_checks(&checks)
}

/// Time every method on one scene rendered at the first configured condition.
pub fn bench_report(config: &RunConfig, args: &BenchArgs) -> Result<BenchReport> {
    let suite = load_suite(config, args.index.as_deref())?;
    let snr = first(&config.sim.snr_db, "SNR")?;
    let rt60 = first(&config.sim.rt60, "RT60")?;
    let scenario = sample_scenarios(1, snr, rt60, config.sim.seed, &config.placement()).remove(0);
    let scene = prepare_scene(&scenario, &suite.geometry, &config.scene()?)?;
    let warmup = config.eval.warmup_frames.unwrap_or_else(|| suite.default_warmup());
    let report = bench_per_frame(&suite, &Method::ALL, &scene, warmup, args.repeats)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let mut f = create(&args.out)?;
    report.write_json(&mut f)?;
    flush(f, &args.out)?;
    Ok(report)
}

pub fn bench(config: &RunConfig, args: &BenchArgs) -> Result<()> {
    let report = bench_report(config, args)?;
    print!("{report}");
    if let Some(s) = speedup(&report) {
        println!("dsvd-phat is {s:.1}x faster than gsvd-music per frame");
    }
    report_checks(&check_bench(&report, &config.eval.assert))
}
