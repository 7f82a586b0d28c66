//! Shoebox room simulation for controlled localization experiments.
//!
//! Impulse responses come from the image-source method with one frequency
//! independent wall reflection coefficient. By default the coefficient is
//! tuned so the simulated energy decay matches the requested RT60; Sabine's
//! formula is available too. The array is mounted either flat or upright, and
//! true DOAs are expressed in the array frame, whose z axis is the array
//! normal.

use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::MicArrayGeometry;
use crate::scalar::Real;
use crate::stft::MultichannelSignal;

/// Orientation of the array frame inside the room (room z points up).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArrayMount {
    /// Array plane horizontal, axes aligned with the room.
    Flat,
    /// Array plane vertical, facing room +y, like a microphone board on a
    /// robot's face. Array x is room -x and array y is room z.
    #[default]
    Upright,
}

impl ArrayMount {
    /// Rotation taking array-frame vectors to room-frame vectors.
    pub fn rotation(self) -> Matrix3<f64> {
        match self {
            ArrayMount::Flat => Matrix3::identity(),
            ArrayMount::Upright => Matrix3::new(-1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0),
        }
    }
}

/// How the wall reflection coefficient follows from RT60.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WallModel {
    /// Sabine's formula. Long, flat rooms then decay slower than requested.
    Sabine,
    /// Bisection on the coefficient until the image-method decay, fitted
    /// between -5 and -35 dB and extrapolated, lasts RT60.
    #[default]
    Calibrated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    /// Room size in meters.
    pub dimensions: [f64; 3],
    /// Seconds; zero gives a free field.
    pub rt60: f64,
    pub array_center: [f64; 3],
    pub source_position: [f64; 3],
    #[serde(default)]
    pub mount: ArrayMount,
    #[serde(default)]
    pub walls: WallModel,
    pub seed: u64,
}

impl RoomSpec {
    pub fn validate(&self) -> Result<()> {
        let inside = |p: &[f64; 3]| (0..3).all(|i| p[i] > 0.0 && p[i] < self.dimensions[i]);
        if self.dimensions.iter().any(|&d| d <= 0.0) {
            return Err(Error::Config("room dimensions must be positive".into()));
        }
        if !inside(&self.array_center) || !inside(&self.source_position) {
            return Err(Error::Config("array and source must lie inside the room".into()));
        }
        if !(self.rt60 >= 0.0) {
            return Err(Error::Config("rt60 must be non-negative".into()));
        }
        Ok(())
    }

    /// Unit vector towards the source, array frame.
    pub fn true_doa(&self) -> Vector3<f64> {
        let v = Vector3::from(self.source_position) - Vector3::from(self.array_center);
        self.mount.rotation().transpose() * v.normalize()
    }

    /// Uniform wall reflection coefficient under `self.walls`.
    pub fn reflection_coefficient(&self, speed_of_sound: f64, sample_rate: f64) -> f64 {
        match self.walls {
            WallModel::Sabine => self.sabine_reflection(speed_of_sound),
            WallModel::Calibrated => self.calibrated_reflection(speed_of_sound, sample_rate),
        }
    }

    pub fn sabine_reflection(&self, speed_of_sound: f64) -> f64 {
        if self.rt60 <= 0.0 {
            return 0.0;
        }
        let [x, y, z] = self.dimensions;
        let volume = x * y * z;
        let surface = 2.0 * (x * y + y * z + x * z);
        let absorption = 24.0 * std::f64::consts::LN_10 * volume / (speed_of_sound * surface * self.rt60);
        if absorption >= 1.0 {
            log::warn!("rt60 {} s is below what this room can reach; using anechoic walls", self.rt60);
            0.0
        } else {
            (1.0 - absorption).sqrt()
        }
    }

    /// Coefficient whose nearest-sample image response at the array center
    /// decays over `rt60`. Images landing in the same sample add in amplitude,
    /// as they do in the rendered taps.
    pub fn calibrated_reflection(&self, speed_of_sound: f64, sample_rate: f64) -> f64 {
        if self.rt60 <= 0.0 {
            return 0.0;
        }
        let len = (1.2 * self.rt60 * sample_rate).ceil() as usize + 1;
        let max_dist = len as f64 * speed_of_sound / sample_rate;
        let receiver = Vector3::from(self.array_center);
        // Summed 1/d per (reflection count, sample) at unit reflection coefficient.
        let mut amp: Vec<Vec<f64>> = Vec::new();
        for_each_image(self, max_dist, |image, reflections| {
            let d = (image - receiver).norm().max(1e-3);
            let n = (d * sample_rate / speed_of_sound).round() as usize;
            if n >= len {
                return;
            }
            if amp.len() <= reflections {
                amp.resize(reflections + 1, vec![0.0; len]);
            }
            amp[reflections][n] += 1.0 / d;
        });
        let decay_time = |beta: f64| {
            let mut taps = vec![0.0; len];
            let mut gain = 1.0;
            for a in &amp {
                for (t, v) in taps.iter_mut().zip(a) {
                    *t += gain * v;
                }
                gain *= beta;
            }
            let energy: Vec<f64> = taps.iter().map(|t| t * t).collect();
            fitted_decay_time(&energy, 1.0 / sample_rate).unwrap_or(f64::INFINITY)
        };
        let (mut lo, mut hi) = (0.0, 1.0 - 1e-9);
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if decay_time(mid) < self.rt60 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Time to decay by 60 dB from a line fitted to the Schroeder curve of
/// `energy` (one value per bin) between -5 and -35 dB.
fn fitted_decay_time(energy: &[f64], bin_secs: f64) -> Option<f64> {
    let mut acc = 0.0;
    let mut edc: Vec<f64> = energy
        .iter()
        .rev()
        .map(|e| {
            acc += e;
            acc
        })
        .collect();
    edc.reverse();
    let total = *edc.first()?;
    let pts: Vec<(f64, f64)> = edc
        .iter()
        .enumerate()
        .filter(|(_, &e)| e > 0.0)
        .map(|(n, &e)| (n as f64 * bin_secs, 10.0 * (e / total).log10()))
        .filter(|&(_, db)| (-35.0..=-5.0).contains(&db))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope < 0.0).then(|| -60.0 / slope)
}

/// Visit image sources with their reflection counts, covering at least every
/// image within `max_dist` of any point in the room.
fn for_each_image(room: &RoomSpec, max_dist: f64, mut visit: impl FnMut(Vector3<f64>, usize)) {
    let dims = room.dimensions;
    let src = Vector3::from(room.source_position);
    let orders: Vec<i64> = dims.iter().map(|&d| (max_dist / (2.0 * d)).ceil() as i64 + 1).collect();
    for lx in -orders[0]..=orders[0] {
        for ly in -orders[1]..=orders[1] {
            for lz in -orders[2]..=orders[2] {
                for parity in 0..8u8 {
                    let q = [parity & 1, (parity >> 1) & 1, (parity >> 2) & 1];
                    let l = [lx, ly, lz];
                    let mut image = Vector3::zeros();
                    let mut reflections = 0i64;
                    for axis in 0..3 {
                        let sign = 1.0 - 2.0 * q[axis] as f64;
                        image[axis] = sign * src[axis] + 2.0 * l[axis] as f64 * dims[axis];
                        reflections += (l[axis] - q[axis] as i64).abs() + l[axis].abs();
                    }
                    visit(image, reflections as usize);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DelayInterpolation {
    /// Each image lands on its nearest sample.
    Nearest,
    /// Hann-windowed sinc spread over 2 * `SINC_HALF_WIDTH` + 1 taps.
    #[default]
    Sinc,
}

pub const SINC_HALF_WIDTH: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Rir {
    /// `taps[m]` is the response at microphone `m`.
    pub taps: Vec<Vec<f64>>,
    pub true_doa: Vector3<f64>,
    /// Direct-path delay per microphone in (fractional) samples.
    pub direct_delays: Vec<f64>,
}

impl Rir {
    pub fn len(&self) -> usize {
        self.taps.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn add_tap(taps: &mut [f64], delay: f64, amp: f64, interp: DelayInterpolation) {
    match interp {
        DelayInterpolation::Nearest => {
            let i = delay.round() as usize;
            if i < taps.len() {
                taps[i] += amp;
            }
        }
        DelayInterpolation::Sinc => {
            let center = delay.round() as isize;
            let half = SINC_HALF_WIDTH as isize;
            let width = (half + 1) as f64;
            for n in center - half..=center + half {
                if n < 0 || n as usize >= taps.len() {
                    continue;
                }
                let t = n as f64 - delay;
                let sinc = if t.abs() < 1e-12 {
                    1.0
                } else {
                    (std::f64::consts::PI * t).sin() / (std::f64::consts::PI * t)
                };
                let win = 0.5 + 0.5 * (std::f64::consts::PI * t / width).cos();
                taps[n as usize] += amp * sinc * win;
            }
        }
    }
}

/// Image-source impulse responses from the source to every microphone, `rt60`
/// seconds long (just the direct path in a free field).
pub fn generate_rir<T: Real>(room: &RoomSpec, geom: &MicArrayGeometry<T>, interp: DelayInterpolation) -> Result<Rir> {
    generate_rir_with_length(room, geom, interp, None)
}

/// As [`generate_rir`], with an explicit length in samples.
pub fn generate_rir_with_length<T: Real>(
    room: &RoomSpec,
    geom: &MicArrayGeometry<T>,
    interp: DelayInterpolation,
    len: Option<usize>,
) -> Result<Rir> {
    room.validate()?;
    let fs = geom.sample_rate().as_f64();
    let c = geom.speed_of_sound().as_f64();
    let center = Vector3::from(room.array_center);
    let src = Vector3::from(room.source_position);
    let rot = room.mount.rotation();
    let mics: Vec<Vector3<f64>> = geom
        .positions()
        .iter()
        .map(|p| center + rot * Vector3::new(p.x.as_f64(), p.y.as_f64(), p.z.as_f64()))
        .collect();
    for m in &mics {
        if (0..3).any(|i| m[i] <= 0.0 || m[i] >= room.dimensions[i]) {
            return Err(Error::Config("a microphone lies outside the room".into()));
        }
        if (m - src).norm() < 1e-3 {
            return Err(Error::Domain("source coincides with a microphone".into()));
        }
    }
    let direct_delays: Vec<f64> = mics.iter().map(|m| (m - src).norm() * fs / c).collect();
    let max_direct = direct_delays.iter().cloned().fold(0.0, f64::max);
    let beta = room.reflection_coefficient(c, fs);
    let min_len = max_direct.ceil() as usize + 2 * SINC_HALF_WIDTH + 2;
    let len = match len {
        Some(n) => n.max(min_len),
        None if beta == 0.0 => min_len,
        None => ((room.rt60 * fs).ceil() as usize).max(min_len),
    };
    let max_dist = len as f64 * c / fs;
    let mut taps = vec![vec![0.0; len]; mics.len()];
    if beta == 0.0 {
        for (m, mic) in mics.iter().enumerate() {
            let dist = (src - mic).norm();
            add_tap(&mut taps[m], dist * fs / c, 1.0 / (4.0 * std::f64::consts::PI * dist), interp);
        }
    } else {
        for_each_image(room, max_dist, |image, reflections| {
            let gain = beta.powi(reflections as i32);
            for (m, mic) in mics.iter().enumerate() {
                let dist = (image - mic).norm();
                if dist <= max_dist {
                    add_tap(&mut taps[m], dist * fs / c, gain / (4.0 * std::f64::consts::PI * dist), interp);
                }
            }
        });
    }
    Ok(Rir {
        taps,
        true_doa: room.true_doa(),
        direct_delays,
    })
}

/// Schroeder backward-integrated energy decay in dB, normalized to 0 dB at the start.
pub fn energy_decay_curve(taps: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut rev: Vec<f64> = taps
        .iter()
        .rev()
        .map(|v| {
            acc += v * v;
            acc
        })
        .collect();
    rev.reverse();
    let total = rev.first().copied().unwrap_or(0.0);
    rev.iter()
        .map(|&e| if total > 0.0 && e > 0.0 { 10.0 * (e / total).log10() } else { f64::NEG_INFINITY })
        .collect()
}

/// Linear convolution via FFT, truncated to `out_len` samples.
pub fn fft_convolve(a: &[f64], b: &[f64], out_len: usize) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return vec![0.0; out_len];
    }
    let n = (a.len() + b.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut fa: Vec<Complex<f64>> = a.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fa.resize(n, Complex::new(0.0, 0.0));
    let mut fb: Vec<Complex<f64>> = b.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fb.resize(n, Complex::new(0.0, 0.0));
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    inv.process(&mut fa);
    let scale = 1.0 / n as f64;
    let mut out: Vec<f64> = fa.iter().take(out_len).map(|z| z.re * scale).collect();
    out.resize(out_len, 0.0);
    out
}

/// Half-open sample range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedScene<T: Real> {
    pub signal: MultichannelSignal<T>,
    /// Reverberant source alone, before noise.
    pub speech: Vec<Vec<f64>>,
    /// Scaled noise as mixed in.
    pub noise: Vec<Vec<f64>>,
    pub true_doa: Vector3<f64>,
    pub active_span: Span,
    pub noise_gain: f64,
}

fn mean_power(channels: &[Vec<f64>], span: Span) -> f64 {
    let count = channels.len() * (span.end - span.start);
    if count == 0 {
        return 0.0;
    }
    channels
        .iter()
        .map(|c| c[span.start..span.end].iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        / count as f64
}

/// `10 log10(P_speech / P_noise)` over `span`, broadband, all channels pooled.
pub fn measure_snr_db(speech: &[Vec<f64>], noise: &[Vec<f64>], span: Span) -> f64 {
    10.0 * (mean_power(speech, span) / mean_power(noise, span)).log10()
}

/// Span from the first to the last sample of the reverberant source above 0.1% of its peak.
fn active_span(speech: &[Vec<f64>]) -> Option<Span> {
    let peak = speech.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
    if peak == 0.0 {
        return None;
    }
    let thr = 1e-3 * peak;
    let len = speech[0].len();
    let active = |n: usize| speech.iter().any(|c| c[n].abs() > thr);
    let start = (0..len).find(|&n| active(n))?;
    let end = (0..len).rev().find(|&n| active(n))? + 1;
    Some(Span { start, end })
}

/// Convolve `source` with the RIR and add `noise` scaled to `snr_db`.
///
/// `snr_db = None` leaves the noise out entirely. The output has the source's length.
pub fn render_scene<T: Real>(
    rir: &Rir,
    source: &[f64],
    noise: &[Vec<f64>],
    snr_db: Option<f64>,
    sample_rate: T,
) -> Result<RenderedScene<T>> {
    let m = rir.taps.len();
    let len = source.len();
    if noise.len() != m || noise.iter().any(|c| c.len() < len) {
        return Err(Error::Dimension(format!(
            "noise needs {m} channels of at least {len} samples"
        )));
    }
    let speech: Vec<Vec<f64>> = rir.taps.iter().map(|h| fft_convolve(source, h, len)).collect();
    let span = active_span(&speech).ok_or_else(|| Error::Domain("source is silent".into()))?;
    let noise: Vec<Vec<f64>> = noise.iter().map(|c| c[..len].to_vec()).collect();
    let noise_gain = match snr_db {
        None => 0.0,
        Some(snr) => {
            let pn = mean_power(&noise, span);
            if pn == 0.0 {
                return Err(Error::Domain("noise is silent".into()));
            }
            (mean_power(&speech, span) / (pn * 10f64.powf(snr / 10.0))).sqrt()
        }
    };
    let noise: Vec<Vec<f64>> = noise
        .into_iter()
        .map(|c| c.into_iter().map(|v| v * noise_gain).collect())
        .collect();
    let mixed = speech
        .iter()
        .zip(&noise)
        .map(|(s, n)| s.iter().zip(n).map(|(a, b)| T::lit(a + b)).collect())
        .collect();
    Ok(RenderedScene {
        signal: MultichannelSignal::new(mixed, sample_rate)?,
        speech,
        noise,
        true_doa: rir.true_doa,
        active_span: span,
        noise_gain,
    })
}

/// Placement constraints for random scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementRules {
    pub dimensions: [f64; 3],
    /// Minimum distance from every wall, meters.
    pub wall_margin: f64,
    /// Minimum source to array-center distance, meters.
    pub min_source_distance: f64,
    pub mount: ArrayMount,
    pub walls: WallModel,
    /// Keep sources on the normal side of the array plane (the localizable halfsphere).
    pub front_only: bool,
}

impl Default for PlacementRules {
    fn default() -> Self {
        Self {
            dimensions: [10.0, 10.0, 3.0],
            wall_margin: 0.5,
            min_source_distance: 1.0,
            mount: ArrayMount::Upright,
            walls: WallModel::Calibrated,
            front_only: true,
        }
    }
}

/// One randomized experiment: room placement plus the seeds for its signals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub room: RoomSpec,
    pub snr_db: f64,
    pub source_seed: u64,
    pub noise_seed: u64,
    pub calibration_seed: u64,
}

/// `n` independent placements, reproducible from `seed`.
pub fn sample_scenarios(n: usize, snr_db: f64, rt60: f64, seed: u64, rules: &PlacementRules) -> Vec<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rules.dimensions;
    let normal = rules.mount.rotation().column(2).into_owned();
    let uniform = |rng: &mut ChaCha8Rng| -> [f64; 3] {
        std::array::from_fn(|i| rng.random_range(rules.wall_margin..d[i] - rules.wall_margin))
    };
    (0..n)
        .map(|_| {
            let (array, source) = loop {
                let a = uniform(&mut rng);
                let s = uniform(&mut rng);
                let v = Vector3::from(s) - Vector3::from(a);
                if v.norm() >= rules.min_source_distance && (!rules.front_only || v.dot(&normal) > 0.0) {
                    break (a, s);
                }
            };
            Scenario {
                room: RoomSpec {
                    dimensions: d,
                    rt60,
                    array_center: array,
                    source_position: source,
                    mount: rules.mount,
                    walls: rules.walls,
                    seed: rng.random(),
                },
                snr_db,
                source_seed: rng.random(),
                noise_seed: rng.random(),
                calibration_seed: rng.random(),
            }
        })
        .collect()
}

/// Free-field scenarios: `rt60 = 0` and each source `distance` meters from the
/// array along an array-frame direction drawn uniformly from `directions`.
pub fn sample_free_field(
    n: usize,
    snr_db: f64,
    directions: &[[f64; 3]],
    distance: f64,
    mount: ArrayMount,
    seed: u64,
) -> Vec<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = 2.0 * distance + 2.0;
    let center = Vector3::repeat(distance + 1.0);
    let rot = mount.rotation();
    (0..n)
        .map(|_| {
            let s = rot * Vector3::from(directions[rng.random_range(0..directions.len())]);
            let src = center + distance * s;
            Scenario {
                room: RoomSpec {
                    dimensions: [side; 3],
                    rt60: 0.0,
                    array_center: center.into(),
                    source_position: src.into(),
                    mount,
                    walls: WallModel::default(),
                    seed: rng.random(),
                },
                snr_db,
                source_seed: rng.random(),
                noise_seed: rng.random(),
                calibration_seed: rng.random(),
            }
        })
        .collect()
}

/// Ground truth written next to a rendered scene WAV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub wav: PathBuf,
    pub noise_sidecar: Option<PathBuf>,
    pub true_doa: [f64; 3],
    pub snr_db: Option<f64>,
    pub rt60: f64,
    pub seed: u64,
    pub active_span: Span,
    pub sample_rate: f64,
    pub room: RoomSpec,
}

impl SceneManifest {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        writeln!(f)?;
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(std::fs::File::open(path)?)?)
    }
}
