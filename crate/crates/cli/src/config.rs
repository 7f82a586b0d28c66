//! The run configuration file.
//!
//! Every section and field is optional; missing values take the defaults
//! below, so an empty file is a complete configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sslkit::dsvd::SearchBackend;
use sslkit::eval::{GridConfig, PipelineConfig, SceneConfig, SourceCorpus};
use sslkit::geometry::{default_mic_positions, DEFAULT_GRID_LEVEL};
use sslkit::music::{BinRange, DEFAULT_REGULARIZATION};
use sslkit::signals::FanNoiseModel;
use sslkit::simroom::{ArrayMount, DelayInterpolation, PlacementRules, WallModel};
use sslkit::stft::WindowKind;
use sslkit::{Method, MicArrayGeometry};

use crate::CliError;

/// Overrides the source corpus directory of the configuration.
pub const CORPUS_DIR_ENV: &str = "SSLKIT_CORPUS_DIR";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: GeometrySection,
    pub stft: StftSection,
    pub grid: GridSection,
    pub dsvd: DsvdSection,
    pub music: MusicSection,
    pub sim: SimSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometrySection {
    /// Microphone positions in meters; the array plane is `z = 0`.
    pub mic_positions: Vec<[f64; 3]>,
    pub speed_of_sound: f64,
    pub sample_rate: f64,
}

impl Default for GeometrySection {
    fn default() -> Self {
        Self {
            mic_positions: default_mic_positions(),
            speed_of_sound: 343.0,
            sample_rate: 16000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftSection {
    pub frame_size: usize,
    pub hop_size: usize,
    pub window: WindowKind,
}

impl Default for StftSection {
    fn default() -> Self {
        Self {
            frame_size: 256,
            hop_size: 128,
            window: WindowKind::Sine,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    /// Icosahedral refinement level; level 4 gives 1282 directions.
    pub level: u32,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { level: DEFAULT_GRID_LEVEL }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DsvdSection {
    pub alpha: f64,
    /// Smoothing for the noise-only recording.
    pub noise_alpha: f64,
    pub delta: f64,
    pub backend: SearchBackend,
}

impl Default for DsvdSection {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            noise_alpha: 0.005,
            delta: 1e-5,
            backend: SearchBackend::KdTree,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MusicSection {
    pub regularization: f64,
    pub n_sources: usize,
    pub band: Option<BinRange>,
}

impl Default for MusicSection {
    fn default() -> Self {
        Self {
            regularization: DEFAULT_REGULARIZATION,
            n_sources: 1,
            band: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub room: [f64; 3],
    pub wall_margin: f64,
    pub min_source_distance: f64,
    pub mount: ArrayMount,
    pub walls: WallModel,
    pub front_only: bool,
    pub snr_db: Vec<f64>,
    pub rt60: Vec<f64>,
    pub duration_secs: f64,
    pub calibration_secs: f64,
    pub interpolation: DelayInterpolation,
    /// Directory of `.wav` speech files; synthetic speech when unset.
    pub corpus_dir: Option<PathBuf>,
    /// At most `i64::MAX`, the largest TOML integer.
    pub seed: u64,
    pub noise: FanNoiseModel,
}

impl Default for SimSection {
    fn default() -> Self {
        let rules = PlacementRules::default();
        let scene = SceneConfig::default();
        Self {
            room: rules.dimensions,
            wall_margin: rules.wall_margin,
            min_source_distance: rules.min_source_distance,
            mount: rules.mount,
            walls: rules.walls,
            front_only: rules.front_only,
            snr_db: vec![-10.0, 0.0, 10.0, 20.0],
            rt60: vec![0.2, 0.8],
            duration_secs: scene.duration_secs,
            calibration_secs: scene.calibration_secs,
            interpolation: scene.interpolation,
            corpus_dir: None,
            seed: 0,
            noise: scene.noise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub methods: Vec<Method>,
    pub delta_theta: f64,
    /// Frames dropped per scene; `ceil(1 / alpha)` when unset.
    pub warmup_frames: Option<usize>,
    pub n_scenarios: usize,
    pub assert: Assertions,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            methods: vec![Method::GsvdMusic, Method::DsvdPhat],
            delta_theta: 0.2,
            warmup_frames: None,
            n_scenarios: 10,
            assert: Assertions::default(),
        }
    }
}

/// Checks that turn `evaluate` and `bench` into pass/fail gates. All off by default.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Assertions {
    /// Every condition must have enough successful scenarios.
    pub complete: bool,
    /// AUC rises with SNR and falls with RT60, one inversion allowed along each axis.
    pub trends: bool,
    pub min_auc: Vec<AucFloor>,
    pub margins: Vec<AucMargin>,
    /// DSVD-PHAT must be this many times faster per frame than GSVD-MUSIC.
    pub min_speedup: Option<f64>,
    /// Upper bound on the DSVD-PHAT mean per-frame time.
    pub max_frame_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AucFloor {
    pub method: Method,
    pub snr_db: f64,
    pub rt60: f64,
    pub auc: f64,
}

/// `better` must beat `worse` by at least `margin` AUC in one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AucMargin {
    pub better: Method,
    pub worse: Method,
    pub snr_db: f64,
    pub rt60: f64,
    pub margin: f64,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Apply the corpus directory override from the environment, if set.
    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(CORPUS_DIR_ENV).filter(|d| !d.is_empty()) {
            self.sim.corpus_dir = Some(PathBuf::from(dir));
        }
    }

    pub fn geometry(&self) -> Result<MicArrayGeometry, CliError> {
        let g = &self.geometry;
        Ok(MicArrayGeometry::from_meters(&g.mic_positions, g.speed_of_sound, g.sample_rate)?)
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            frame_size: self.stft.frame_size,
            hop_size: self.stft.hop_size,
            window: self.stft.window,
            alpha: self.dsvd.alpha,
            noise_alpha: Some(self.dsvd.noise_alpha),
            delta: self.dsvd.delta,
            grid_level: self.grid.level,
            backend: self.dsvd.backend,
            music_regularization: self.music.regularization,
            music_sources: self.music.n_sources,
            music_band: self.music.band,
        }
    }

    pub fn placement(&self) -> PlacementRules {
        PlacementRules {
            dimensions: self.sim.room,
            wall_margin: self.sim.wall_margin,
            min_source_distance: self.sim.min_source_distance,
            mount: self.sim.mount,
            walls: self.sim.walls,
            front_only: self.sim.front_only,
        }
    }

    pub fn scene(&self) -> Result<SceneConfig, CliError> {
        let corpus = match &self.sim.corpus_dir {
            Some(dir) => SourceCorpus::from_dir(dir)?,
            None => SourceCorpus::Synthetic,
        };
        Ok(SceneConfig {
            duration_secs: self.sim.duration_secs,
            calibration_secs: self.sim.calibration_secs,
            interpolation: self.sim.interpolation,
            noise: self.sim.noise.clone(),
            corpus,
        })
    }

    pub fn condition_grid(&self) -> Result<GridConfig, CliError> {
        Ok(GridConfig {
            methods: self.eval.methods.clone(),
            snr_db: self.sim.snr_db.clone(),
            rt60: self.sim.rt60.clone(),
            n_scenarios: self.eval.n_scenarios,
            seed: self.sim.seed,
            delta_theta: self.eval.delta_theta,
            warmup_frames: self.eval.warmup_frames,
            placement: self.placement(),
            scene: self.scene()?,
        })
    }
}
