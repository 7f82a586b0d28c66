//! Evaluation protocol: angle errors, confusion counts, ROC/AUC over
//! simulated condition grids, and per-frame timing.

use std::cmp::Ordering;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correlation::{estimate_noise, CorrelationSet};
use crate::dsvd::{DsvdPhat, SearchBackend, SvdIndex};
use crate::error::{Error, Result};
use crate::estimate::{DoaEstimate, Localizer};
use crate::geometry::{build_doa_grid, DoaGrid, MicArrayGeometry, DEFAULT_GRID_LEVEL};
use crate::music::{build_steering_bank, BinRange, GsvdMusic, SteeringVectorBank, DEFAULT_REGULARIZATION};
use crate::scalar::Real;
use crate::signals::{speech_like, FanNoiseModel};
use crate::simroom::{generate_rir, render_scene, sample_scenarios, DelayInterpolation, PlacementRules, Scenario, Span};
use crate::stft::{MultichannelSignal, SpectraFrame, Stft, WindowKind};

/// Angle between two unit vectors, in `[0, pi]`.
pub fn angle_error<T: Real>(est: &Vector3<T>, truth: &Vector3<T>) -> Result<T> {
    let tol = T::lit(1e-6);
    for v in [est, truth] {
        if (v.norm() - T::one()).abs() > tol {
            return Err(Error::Domain(format!("angle_error needs unit vectors, got norm {}", v.norm().as_f64())));
        }
    }
    Ok(est.dot(truth).clamp(-T::one(), T::one()).acos())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    DsvdPhat,
    /// DSVD-PHAT with `R_nn = 0`.
    SvdPhat,
    GsvdMusic,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::DsvdPhat, Method::SvdPhat, Method::GsvdMusic];

    pub fn tag(self) -> &'static str {
        match self {
            Method::DsvdPhat => "dsvd-phat",
            Method::SvdPhat => "svd-phat",
            Method::GsvdMusic => "gsvd-music",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}' (expected dsvd-phat, svd-phat or gsvd-music)")))
    }
}

/// One localized frame paired with its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub frame_index: usize,
    pub method: Method,
    pub grid_index: usize,
    pub direction: [f64; 3],
    pub amplitude: f64,
    pub true_doa: [f64; 3],
    pub theta: f64,
}

impl EvalRecord {
    pub fn from_estimate<T: Real>(method: Method, est: &DoaEstimate<T>, truth: &Vector3<f64>) -> Result<Self> {
        let d = Vector3::new(est.direction.x.as_f64(), est.direction.y.as_f64(), est.direction.z.as_f64());
        Ok(Self {
            frame_index: est.frame_index,
            method,
            grid_index: est.grid_index,
            direction: d.into(),
            amplitude: est.amplitude.as_f64(),
            true_doa: (*truth).into(),
            theta: angle_error(&d, truth)?,
        })
    }

    pub fn is_accurate(&self, delta_theta: f64) -> bool {
        self.theta <= delta_theta
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_pos: usize,
    pub true_neg: usize,
    pub false_pos: usize,
    pub false_neg: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.true_pos + self.true_neg + self.false_pos + self.false_neg
    }

    /// `None` without positives.
    pub fn tpr(&self) -> Option<f64> {
        let p = self.true_pos + self.false_neg;
        (p > 0).then(|| self.true_pos as f64 / p as f64)
    }

    /// `None` without negatives.
    pub fn fpr(&self) -> Option<f64> {
        let n = self.false_pos + self.true_neg;
        (n > 0).then(|| self.false_pos as f64 / n as f64)
    }
}

/// A record is a positive when accurate within `delta_theta`, and is accepted
/// when its amplitude reaches `t_min`.
pub fn confusion_counts(records: &[EvalRecord], delta_theta: f64, t_min: f64) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for r in records {
        match (r.is_accurate(delta_theta), r.amplitude >= t_min) {
            (true, true) => c.true_pos += 1,
            (false, false) => c.true_neg += 1,
            (false, true) => c.false_pos += 1,
            (true, false) => c.false_neg += 1,
        }
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// From `+inf` (nothing accepted) down to `-inf` (everything accepted).
    /// Empty when only one class is present.
    pub points: Vec<RocPoint>,
    /// `None` when only one class is present.
    pub auc: Option<f64>,
    pub positives: usize,
    pub negatives: usize,
}

/// Sweep `T_min` over every distinct amplitude plus `+-inf` and integrate
/// TPR over FPR with the trapezoid rule.
pub fn roc(records: &[EvalRecord], delta_theta: f64) -> Result<RocCurve> {
    if records.is_empty() {
        return Err(Error::Domain("ROC needs at least one record".into()));
    }
    let mut sorted: Vec<(f64, bool)> = records
        .iter()
        .map(|r| (r.amplitude, r.is_accurate(delta_theta)))
        .collect();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let positives = sorted.iter().filter(|r| r.1).count();
    let negatives = sorted.len() - positives;
    if positives == 0 || negatives == 0 {
        log::warn!("ROC over {positives} positives and {negatives} negatives: AUC undefined");
        return Ok(RocCurve {
            points: Vec::new(),
            auc: None,
            positives,
            negatives,
        });
    }
    let (p, n) = (positives as f64, negatives as f64);
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        tpr: 0.0,
        fpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0.total_cmp(&t) == Ordering::Equal {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: t,
            tpr: tp as f64 / p,
            fpr: fp as f64 / n,
        });
    }
    points.push(RocPoint {
        threshold: f64::NEG_INFINITY,
        tpr: 1.0,
        fpr: 1.0,
    });
    let auc = points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum();
    Ok(RocCurve {
        points,
        auc: Some(auc),
        positives,
        negatives,
    })
}

/// Shared analysis settings for every localizer in a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub frame_size: usize,
    pub hop_size: usize,
    pub window: WindowKind,
    pub alpha: f64,
    /// Smoothing for the offline noise estimate; `None` reuses `alpha`.
    pub noise_alpha: Option<f64>,
    pub delta: f64,
    pub grid_level: u32,
    pub backend: SearchBackend,
    pub music_regularization: f64,
    pub music_sources: usize,
    pub music_band: Option<BinRange>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            frame_size: 256,
            hop_size: 128,
            window: WindowKind::default(),
            alpha: 0.05,
            noise_alpha: Some(0.005),
            delta: 1e-5,
            grid_level: DEFAULT_GRID_LEVEL,
            backend: SearchBackend::KdTree,
            music_regularization: DEFAULT_REGULARIZATION,
            music_sources: 1,
            music_band: None,
        }
    }
}

/// Offline state for all methods: the SVD index and the MUSIC steering bank.
#[derive(Debug)]
pub struct MethodSuite {
    pub config: PipelineConfig,
    pub geometry: MicArrayGeometry<f64>,
    pub grid: Arc<DoaGrid<f64>>,
    pub stft: Stft<f64>,
    pub index: Arc<SvdIndex<f64>>,
    pub bank: Arc<SteeringVectorBank<f64>>,
    /// Wall time spent in `SvdIndex::build`, seconds.
    pub index_build_secs: f64,
    /// Wall time spent building the MUSIC steering bank, seconds.
    pub bank_build_secs: f64,
}

impl MethodSuite {
    pub fn build(geometry: MicArrayGeometry<f64>, config: PipelineConfig) -> Result<Self> {
        let start = Instant::now();
        let index = SvdIndex::build(
            geometry.clone(),
            Arc::new(build_doa_grid(config.grid_level)),
            config.frame_size,
            config.delta,
            config.backend,
        )?;
        let secs = start.elapsed().as_secs_f64();
        let mut suite = Self::with_index(index, config)?;
        suite.index_build_secs = secs;
        Ok(suite)
    }

    /// Reuse a prebuilt index; its geometry, grid and frame size win over `config`.
    pub fn with_index(index: SvdIndex<f64>, mut config: PipelineConfig) -> Result<Self> {
        let index = Arc::new(index);
        config.frame_size = index.frame_size();
        config.delta = index.delta();
        config.grid_level = index.grid().refinement_level();
        let geometry = index.geometry().clone();
        let grid = index.grid().clone();
        let stft = Stft::new(config.frame_size, config.hop_size, config.window)?;
        let start = Instant::now();
        let bank = Arc::new(build_steering_bank(&geometry, &grid, config.frame_size));
        let bank_build_secs = start.elapsed().as_secs_f64();
        for a in [Some(config.alpha), config.noise_alpha].into_iter().flatten() {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::Config(format!("smoothing factor must be in (0, 1), got {a}")));
            }
        }
        Ok(Self {
            config,
            geometry,
            grid,
            stft,
            index,
            bank,
            index_build_secs: 0.0,
            bank_build_secs,
        })
    }

    /// Record the time an externally timed index build took.
    pub fn set_index_build_secs(&mut self, secs: f64) {
        self.index_build_secs = secs;
    }

    /// Warm-up length implied by `alpha`.
    pub fn default_warmup(&self) -> usize {
        (1.0 / self.config.alpha).ceil() as usize
    }

    /// `R_nn` from a noise-only recording.
    pub fn noise_correlation(&self, noise: &MultichannelSignal<f64>) -> Result<CorrelationSet<f64>> {
        let frames = self.stft.analyze(noise)?;
        estimate_noise(&frames, self.config.noise_alpha.unwrap_or(self.config.alpha))
    }

    pub fn localizer(&self, method: Method, noise: &CorrelationSet<f64>) -> Result<Box<dyn Localizer<f64> + Send>> {
        Ok(match method {
            Method::DsvdPhat => Box::new(DsvdPhat::new(self.index.clone(), noise.clone())?),
            Method::SvdPhat => Box::new(DsvdPhat::plain(self.index.clone(), self.config.alpha)?),
            Method::GsvdMusic => Box::new(
                GsvdMusic::new(self.bank.clone(), self.grid.clone(), noise.clone())?
                    .with_sources(self.config.music_sources)?
                    .with_band(self.config.music_band)
                    .with_regularization(self.config.music_regularization),
            ),
        })
    }
}

/// Every estimate for a frame sequence, `None` where the frame had none.
pub fn localize_frames(localizer: &mut dyn Localizer<f64>, frames: &[SpectraFrame<f64>]) -> Result<Vec<Option<DoaEstimate<f64>>>> {
    frames.iter().map(|f| localizer.process(f)).collect()
}

/// Where speech sources come from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceCorpus {
    #[default]
    Synthetic,
    /// Mono or multichannel WAV files; the first channel is used.
    Files(Vec<PathBuf>),
}

impl SourceCorpus {
    /// All `.wav` files directly in `dir`, sorted by name.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir.as_ref())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
            .collect();
        if files.is_empty() {
            return Err(Error::Config(format!("no .wav files in {}", dir.as_ref().display())));
        }
        files.sort();
        Ok(SourceCorpus::Files(files))
    }

    /// `len` samples of source signal, zero-padded or truncated.
    pub fn source(&self, len: usize, sample_rate: f64, seed: u64) -> Result<Vec<f64>> {
        match self {
            SourceCorpus::Synthetic => Ok(speech_like(len, sample_rate, seed)),
            SourceCorpus::Files(files) => {
                if files.is_empty() {
                    return Err(Error::Config("empty source corpus".into()));
                }
                let path = &files[(seed % files.len() as u64) as usize];
                let wav = crate::wav::read_wav::<f64>(path)?;
                if (wav.sample_rate() - sample_rate).abs() > 1e-9 {
                    return Err(Error::Config(format!(
                        "{} is sampled at {} Hz, expected {sample_rate}",
                        path.display(),
                        wav.sample_rate()
                    )));
                }
                let mut out = wav.channel(0).to_vec();
                out.resize(len, 0.0);
                Ok(out)
            }
        }
    }
}

/// How each scenario is turned into audio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub duration_secs: f64,
    /// Length of the separate noise-only recording used for `R_nn`.
    pub calibration_secs: f64,
    pub interpolation: DelayInterpolation,
    pub noise: FanNoiseModel,
    pub corpus: SourceCorpus,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            duration_secs: 3.0,
            calibration_secs: 8.0,
            interpolation: DelayInterpolation::default(),
            noise: FanNoiseModel::default(),
            corpus: SourceCorpus::default(),
        }
    }
}

/// A rendered scenario ready for localization.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub scenario: Scenario,
    pub signal: MultichannelSignal<f64>,
    /// Noise-only recording at the same gain as the mixed-in noise.
    pub calibration: MultichannelSignal<f64>,
    pub true_doa: Vector3<f64>,
    pub active_span: Span,
}

pub fn prepare_scene(scenario: &Scenario, geometry: &MicArrayGeometry<f64>, config: &SceneConfig) -> Result<PreparedScene> {
    let fs = geometry.sample_rate();
    let len = (config.duration_secs * fs).round() as usize;
    let cal_len = (config.calibration_secs * fs).round() as usize;
    let rir = generate_rir(&scenario.room, geometry, config.interpolation)?;
    let source = config.corpus.source(len, fs, scenario.source_seed)?;
    let noise = config.noise.render(geometry, len, scenario.noise_seed);
    let scene = render_scene(&rir, &source, &noise, finite_snr(scenario.snr_db), fs)?;
    // Noiseless scenes still get a faint calibration floor so R_nn stays invertible.
    let gain = if scene.noise_gain > 0.0 { scene.noise_gain } else { 1e-6 };
    let calibration = config
        .noise
        .render(geometry, cal_len, scenario.calibration_seed)
        .into_iter()
        .map(|c| c.into_iter().map(|v| v * gain).collect())
        .collect();
    Ok(PreparedScene {
        scenario: scenario.clone(),
        signal: scene.signal,
        calibration: MultichannelSignal::new(calibration, fs)?,
        true_doa: scene.true_doa,
        active_span: scene.active_span,
    })
}

fn finite_snr(snr_db: f64) -> Option<f64> {
    snr_db.is_finite().then_some(snr_db)
}

/// Records for one scene and method, with what was left out.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SceneRecords {
    pub records: Vec<EvalRecord>,
    pub excluded_warmup: usize,
    pub excluded_silent: usize,
}

impl SceneRecords {
    fn merge(&mut self, other: SceneRecords) {
        self.records.extend(other.records);
        self.excluded_warmup += other.excluded_warmup;
        self.excluded_silent += other.excluded_silent;
    }
}

/// Localize a prepared scene with every method, dropping the first `warmup` frames.
pub fn evaluate_scene(suite: &MethodSuite, methods: &[Method], scene: &PreparedScene, warmup: usize) -> Result<Vec<SceneRecords>> {
    let frames = suite.stft.analyze(&scene.signal)?;
    let noise = suite.noise_correlation(&scene.calibration)?;
    methods
        .iter()
        .map(|&method| {
            let mut loc = suite.localizer(method, &noise)?;
            let mut out = SceneRecords::default();
            for (l, est) in localize_frames(loc.as_mut(), &frames)?.into_iter().enumerate() {
                if l < warmup {
                    out.excluded_warmup += 1;
                    continue;
                }
                match est {
                    Some(e) => out.records.push(EvalRecord::from_estimate(method, &e, &scene.true_doa)?),
                    None => out.excluded_silent += 1,
                }
            }
            Ok(out)
        })
        .collect()
}

/// A condition sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub methods: Vec<Method>,
    pub snr_db: Vec<f64>,
    /// Seconds.
    pub rt60: Vec<f64>,
    pub n_scenarios: usize,
    pub seed: u64,
    pub delta_theta: f64,
    /// Frames dropped per scene; `None` uses `ceil(1 / alpha)`.
    pub warmup_frames: Option<usize>,
    pub placement: PlacementRules,
    pub scene: SceneConfig,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::GsvdMusic, Method::DsvdPhat],
            snr_db: vec![-10.0, 0.0, 10.0, 20.0],
            rt60: vec![0.2, 0.8],
            n_scenarios: 10,
            seed: 0,
            delta_theta: 0.2,
            warmup_frames: None,
            placement: PlacementRules::default(),
            scene: SceneConfig::default(),
        }
    }
}

/// Fraction of scenarios that must succeed for a condition to count as complete.
pub const MIN_SCENARIO_SUCCESS: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucCell {
    pub snr_db: f64,
    pub rt60: f64,
    pub method: Method,
    pub auc: Option<f64>,
    pub roc: Option<RocCurve>,
    pub records: usize,
    pub excluded_warmup: usize,
    pub excluded_silent: usize,
    pub scenarios_ok: usize,
    pub scenarios_total: usize,
}

impl AucCell {
    pub fn is_complete(&self) -> bool {
        self.scenarios_total > 0 && self.scenarios_ok as f64 >= MIN_SCENARIO_SUCCESS * self.scenarios_total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucTable {
    pub methods: Vec<Method>,
    pub delta_theta: f64,
    /// Ordered by SNR, then RT60, then method as listed in `methods`.
    pub cells: Vec<AucCell>,
}

impl AucTable {
    pub fn cell(&self, snr_db: f64, rt60: f64, method: Method) -> Option<&AucCell> {
        self.cells
            .iter()
            .find(|c| c.snr_db == snr_db && c.rt60 == rt60 && c.method == method)
    }

    pub fn auc(&self, snr_db: f64, rt60: f64, method: Method) -> Option<f64> {
        self.cell(snr_db, rt60, method).and_then(|c| c.auc)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "snr_db,rt60_ms,method,auc,records,positives,negatives,excluded_warmup,excluded_silent,scenarios_ok,scenarios_total,complete"
        )?;
        for c in &self.cells {
            let (p, n) = c.roc.as_ref().map_or((0, 0), |r| (r.positives, r.negatives));
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                c.snr_db,
                rt60_ms(c.rt60),
                c.method,
                c.auc.map_or("".into(), |a| format!("{a:.6}")),
                c.records,
                p,
                n,
                c.excluded_warmup,
                c.excluded_silent,
                c.scenarios_ok,
                c.scenarios_total,
                c.is_complete()
            )?;
        }
        Ok(())
    }

    /// Aligned text: one row per (SNR, RT60), one AUC column per method.
    /// Undefined AUCs print as `n/a`, incomplete conditions get a `*`.
    pub fn to_text(&self) -> String {
        let mut s = format!("{:>8}  {:>9}", "SNR (dB)", "RT60 (ms)");
        for m in &self.methods {
            s.push_str(&format!("  {:>10}", m.tag()));
        }
        s.push('\n');
        let mut seen: Vec<(f64, f64)> = Vec::new();
        for c in &self.cells {
            if !seen.contains(&(c.snr_db, c.rt60)) {
                seen.push((c.snr_db, c.rt60));
            }
        }
        for (snr, rt60) in seen {
            s.push_str(&format!("{:>8}  {:>9}", snr, rt60_ms(rt60)));
            for &m in &self.methods {
                let v = match self.cell(snr, rt60, m) {
                    Some(c) => {
                        let a = c.auc.map_or("n/a".to_string(), |a| format!("{a:.3}"));
                        if c.is_complete() { a } else { format!("{a}*") }
                    }
                    None => "-".into(),
                };
                s.push_str(&format!("  {v:>10}"));
            }
            s.push('\n');
        }
        s
    }

    /// Every ROC point: `method,snr_db,rt60_ms,threshold,tpr,fpr`.
    pub fn write_roc_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "method,snr_db,rt60_ms,threshold,tpr,fpr")?;
        for c in &self.cells {
            for p in c.roc.iter().flat_map(|r| &r.points) {
                writeln!(out, "{},{},{},{},{},{}", c.method, c.snr_db, rt60_ms(c.rt60), p.threshold, p.tpr, p.fpr)?;
            }
        }
        Ok(())
    }
}

fn rt60_ms(rt60: f64) -> f64 {
    (rt60 * 1000.0 * 1e6).round() / 1e6
}

/// Pooled ROC per (SNR, RT60, method) over `n_scenarios` placements each.
///
/// Every condition reuses the same placements and signal seeds, so cells
/// differ only in SNR and reverberation. Scenes render in parallel on the
/// current rayon pool; results are merged in a fixed order.
pub fn run_condition_grid(suite: &MethodSuite, config: &GridConfig) -> Result<AucTable> {
    if config.methods.is_empty() || config.snr_db.is_empty() || config.rt60.is_empty() || config.n_scenarios == 0 {
        return Err(Error::Config("condition grid needs methods, SNRs, RT60s and scenarios".into()));
    }
    if !(0.0..=std::f64::consts::FRAC_PI_2).contains(&config.delta_theta) {
        return Err(Error::Config(format!("delta_theta {} outside [0, pi/2]", config.delta_theta)));
    }
    let warmup = config.warmup_frames.unwrap_or_else(|| suite.default_warmup());
    let mut jobs = Vec::new();
    for &snr in &config.snr_db {
        for &rt60 in &config.rt60 {
            for s in sample_scenarios(config.n_scenarios, snr, rt60, config.seed, &config.placement) {
                jobs.push(s);
            }
        }
    }
    let results: Vec<Result<Vec<SceneRecords>>> = jobs
        .par_iter()
        .map(|s| {
            let scene = prepare_scene(s, &suite.geometry, &config.scene)?;
            evaluate_scene(suite, &config.methods, &scene, warmup)
        })
        .collect();

    let mut cells = Vec::new();
    let mut results = results.into_iter();
    for &snr in &config.snr_db {
        for &rt60 in &config.rt60 {
            let mut pooled: Vec<SceneRecords> = vec![SceneRecords::default(); config.methods.len()];
            let mut ok = 0;
            for _ in 0..config.n_scenarios {
                match results.next().expect("one result per job") {
                    Ok(per_method) => {
                        ok += 1;
                        for (acc, r) in pooled.iter_mut().zip(per_method) {
                            acc.merge(r);
                        }
                    }
                    Err(e) => log::warn!("scenario failed at snr {snr} dB, rt60 {rt60} s: {e}"),
                }
            }
            for (&method, acc) in config.methods.iter().zip(pooled) {
                let curve = if acc.records.is_empty() {
                    None
                } else {
                    Some(roc(&acc.records, config.delta_theta)?)
                };
                let cell = AucCell {
                    snr_db: snr,
                    rt60,
                    method,
                    auc: curve.as_ref().and_then(|c| c.auc),
                    roc: curve,
                    records: acc.records.len(),
                    excluded_warmup: acc.excluded_warmup,
                    excluded_silent: acc.excluded_silent,
                    scenarios_ok: ok,
                    scenarios_total: config.n_scenarios,
                };
                if !cell.is_complete() {
                    log::warn!("condition snr {snr} dB, rt60 {rt60} s incomplete: {ok}/{} scenarios", config.n_scenarios);
                }
                cells.push(cell);
            }
        }
    }
    Ok(AucTable {
        methods: config.methods.clone(),
        delta_theta: config.delta_theta,
        cells,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodTiming {
    pub method: Method,
    pub frames: usize,
    pub repeats: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub frame_size: usize,
    pub hop_size: usize,
    pub num_directions: usize,
    pub rank: usize,
    /// Frame period `hop / f_S` in ms: the real-time budget.
    pub budget_ms: f64,
    pub index_build_secs: f64,
    pub bank_build_secs: f64,
    pub online: Vec<MethodTiming>,
}

impl BenchReport {
    pub fn timing(&self, method: Method) -> Option<&MethodTiming> {
        self.online.iter().find(|t| t.method == method)
    }

    pub fn write_json<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut out, self)?;
        writeln!(out)?;
        Ok(())
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "offline: index build {:.3} s (K = {}, Q = {}), steering bank {:.3} s",
            self.index_build_secs, self.rank, self.num_directions, self.bank_build_secs
        )?;
        writeln!(f, "online per frame (budget {:.3} ms):", self.budget_ms)?;
        for t in &self.online {
            writeln!(
                f,
                "  {:>10}  mean {:>9.4} ms  median {:>9.4} ms  ({} frames x {})",
                t.method.tag(),
                t.mean_ms,
                t.median_ms,
                t.frames,
                t.repeats
            )?;
        }
        Ok(())
    }
}

/// Time `process` per frame for each method over the same frames.
///
/// The first `warmup_frames` calls of each repeat run untimed. Offline
/// construction times come from `suite`.
pub fn bench_per_frame(
    suite: &MethodSuite,
    methods: &[Method],
    scene: &PreparedScene,
    warmup_frames: usize,
    repeats: usize,
) -> Result<BenchReport> {
    let frames = suite.stft.analyze(&scene.signal)?;
    if frames.len() <= warmup_frames {
        return Err(Error::Config(format!(
            "scene has {} frames, warm-up needs more than {warmup_frames}",
            frames.len()
        )));
    }
    let noise = suite.noise_correlation(&scene.calibration)?;
    let mut online = Vec::new();
    for &method in methods {
        let mut samples = Vec::with_capacity(repeats * frames.len());
        for _ in 0..repeats.max(1) {
            let mut loc = suite.localizer(method, &noise)?;
            for (l, frame) in frames.iter().enumerate() {
                let start = Instant::now();
                let est = loc.process(frame)?;
                let dt = start.elapsed().as_secs_f64() * 1e3;
                std::hint::black_box(est);
                if l >= warmup_frames {
                    samples.push(dt);
                }
            }
        }
        samples.sort_by(f64::total_cmp);
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let mid = samples.len() / 2;
        let median = if samples.len() % 2 == 0 {
            (samples[mid - 1] + samples[mid]) / 2.0
        } else {
            samples[mid]
        };
        online.push(MethodTiming {
            method,
            frames: frames.len() - warmup_frames,
            repeats: repeats.max(1),
            mean_ms: mean,
            median_ms: median,
        });
    }
    Ok(BenchReport {
        frame_size: suite.config.frame_size,
        hop_size: suite.config.hop_size,
        num_directions: suite.grid.len(),
        rank: suite.index.rank(),
        budget_ms: suite.config.hop_size as f64 / suite.geometry.sample_rate() * 1e3,
        index_build_secs: suite.index_build_secs,
        bank_build_secs: suite.bank_build_secs,
        online,
    })
}
