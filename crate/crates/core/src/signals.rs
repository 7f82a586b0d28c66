//! Synthetic test signals: a speech-like source and multichannel fan noise.

use nalgebra::Vector3;
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::scalar::Real;
use crate::geometry::MicArrayGeometry;

const ASPIRATION: f64 = 0.03;

/// Speech-like mono signal: words of two to four syllables separated by pauses.
///
/// Each syllable is an optional unvoiced burst (shaped noise) followed by a
/// voiced segment under a raised-cosine envelope: harmonics of a gliding `f0`
/// up to 5 kHz with a `1/h` roll-off, plus weak broadband aspiration noise.
/// Peak amplitude is 0.5.
pub fn speech_like(len: usize, sample_rate: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0.0; len];
    let ms = |t: f64| (t * sample_rate / 1000.0) as usize;
    let mut pos = ms(rng.random_range(50.0..200.0));
    let base_f0 = rng.random_range(100.0..220.0);
    while pos < len {
        let syllables = rng.random_range(2..=4);
        for _ in 0..syllables {
            if rng.random_bool(0.4) {
                let n = ms(rng.random_range(30.0..80.0));
                let mut prev = 0.0;
                for i in 0..n {
                    if pos + i >= len {
                        break;
                    }
                    let w: f64 = StandardNormal.sample(&mut rng);
                    // First difference tilts the noise towards high frequencies.
                    let env = (std::f64::consts::PI * i as f64 / n as f64).sin();
                    out[pos + i] += 0.15 * env * (w - prev);
                    prev = w;
                }
                pos += n;
            }
            let n = ms(rng.random_range(100.0..250.0));
            let f0_start: f64 = base_f0 * rng.random_range(0.85..1.15);
            let f0_end = base_f0 * rng.random_range(0.85..1.15);
            let harmonics = ((5000.0 / f0_start.max(f0_end)) as usize).max(1);
            let phases: Vec<f64> = (0..harmonics).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
            let mut phase = 0.0;
            for i in 0..n {
                if pos + i >= len {
                    break;
                }
                let frac = i as f64 / n as f64;
                let f0 = f0_start + (f0_end - f0_start) * frac;
                phase += std::f64::consts::TAU * f0 / sample_rate;
                let env = 0.5 - 0.5 * (std::f64::consts::TAU * frac).cos();
                let v: f64 = phases
                    .iter()
                    .enumerate()
                    .map(|(h, p)| ((h + 1) as f64 * phase + p).sin() / (h + 1) as f64)
                    .sum();
                let breath: f64 = StandardNormal.sample(&mut rng);
                out[pos + i] += env * (v + ASPIRATION * breath);
            }
            pos += n + ms(rng.random_range(10.0..60.0));
        }
        pos += ms(rng.random_range(250.0..600.0));
    }
    let peak = out.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    out
}

/// Stationary fan noise heard by the array.
///
/// The fans radiate band noise between `band_hz` with narrowband hums on top
/// as plane waves from fixed directions. Airflow turbulence adds a pink floor
/// that is independent at each microphone, and `diffuse_ratio` of the band
/// power also arrives incoherently. Draws with different seeds share the
/// spectral and spatial structure, so one draw can calibrate the noise
/// correlation for another.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FanNoiseModel {
    /// Unit directions towards each fan, array frame.
    pub directions: Vec<[f64; 3]>,
    /// Main band edges in Hz.
    pub band_hz: [f64; 2],
    /// Hum centers in Hz.
    pub hums_hz: Vec<f64>,
    /// Hum bandwidth in Hz.
    pub hum_width_hz: f64,
    /// Hum peak power density relative to the band density.
    pub hum_gain: f64,
    /// Incoherent pink floor density at 1 kHz relative to the band density.
    pub pink_level: f64,
    /// Incoherent share of the band and hum power, relative to the coherent share.
    pub diffuse_ratio: f64,
}

impl Default for FanNoiseModel {
    fn default() -> Self {
        let dir = |az: f64, el: f64| {
            let (az, el) = (az.to_radians(), el.to_radians());
            [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]
        };
        Self {
            // Fans sit in the robot body, below the array plane.
            directions: vec![dir(200.0, -35.0), dir(290.0, -20.0)],
            band_hz: [2500.0, 5000.0],
            hums_hz: vec![2700.0, 3400.0, 4100.0, 4800.0],
            hum_width_hz: 120.0,
            hum_gain: 4.0,
            pink_level: 0.1,
            diffuse_ratio: 0.5,
        }
    }
}

/// Edge width of the band taper in Hz.
const BAND_TAPER_HZ: f64 = 300.0;

impl FanNoiseModel {
    /// Band plus hums power density at `f` Hz.
    fn band_density(&self, f: f64) -> f64 {
        let [lo, hi] = self.band_hz;
        let taper = |d: f64| {
            if d <= 0.0 {
                0.0
            } else if d >= BAND_TAPER_HZ {
                1.0
            } else {
                0.5 - 0.5 * (std::f64::consts::PI * d / BAND_TAPER_HZ).cos()
            }
        };
        let band = taper(f - lo + BAND_TAPER_HZ / 2.0) * taper(hi + BAND_TAPER_HZ / 2.0 - f);
        let hum: f64 = self
            .hums_hz
            .iter()
            .map(|&c| (-0.5 * ((f - c) / self.hum_width_hz).powi(2)).exp())
            .sum();
        band + self.hum_gain * hum
    }

    fn pink_density(&self, f: f64) -> f64 {
        if f <= 0.0 {
            0.0
        } else {
            self.pink_level * 1000.0 / f.max(50.0)
        }
    }

    /// Render `len` samples for every microphone of `geom`.
    pub fn render<T: Real>(&self, geom: &MicArrayGeometry<T>, len: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fs = geom.sample_rate().as_f64();
        let c = geom.speed_of_sound().as_f64();
        let m = geom.num_mics();
        let n = len.max(2);
        let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
        let freq = |k: usize| k as f64 * fs / n as f64;
        let mut draw = |density: &dyn Fn(f64) -> f64| -> Vec<Complex<f64>> {
            (0..=n / 2)
                .map(|k| {
                    let re: f64 = StandardNormal.sample(&mut rng);
                    let im: f64 = StandardNormal.sample(&mut rng);
                    Complex::new(re, im) * density(freq(k)).sqrt()
                })
                .collect()
        };
        // Add the real signal with half spectrum `spec`, advanced by `advance` samples.
        let add = |out: &mut [f64], spec: &[Complex<f64>], advance: f64| {
            let mut buf = vec![Complex::new(0.0, 0.0); n];
            for (k, s) in spec.iter().enumerate() {
                let ph = std::f64::consts::TAU * k as f64 * advance / n as f64;
                let v = s * Complex::new(ph.cos(), ph.sin());
                buf[k] = v;
                if k > 0 && k < n - k {
                    buf[n - k] = v.conj();
                }
            }
            if n % 2 == 0 {
                buf[n / 2].im = 0.0;
            }
            buf[0].im = 0.0;
            ifft.process(&mut buf);
            for (o, b) in out.iter_mut().zip(&buf) {
                *o += b.re;
            }
        };
        let mut out = vec![vec![0.0; len]; m];
        let positions: Vec<Vector3<f64>> = geom
            .positions()
            .iter()
            .map(|p| Vector3::new(p.x.as_f64(), p.y.as_f64(), p.z.as_f64()))
            .collect();
        let share = 1.0 / self.directions.len().max(1) as f64;
        for dir in &self.directions {
            let u = Vector3::new(dir[0], dir[1], dir[2]).normalize();
            let spec = draw(&|f| share * self.band_density(f));
            for (mic, r) in positions.iter().enumerate() {
                // A microphone displaced towards the fan hears it early.
                add(&mut out[mic], &spec, fs / c * r.dot(&u));
            }
        }
        for ch in out.iter_mut() {
            let spec = draw(&|f| self.pink_density(f) + self.diffuse_ratio * self.band_density(f));
            add(ch, &spec, 0.0);
        }
        let power = out.iter().flatten().map(|v| v * v).sum::<f64>() / (m * len).max(1) as f64;
        if power > 0.0 {
            let g = 1.0 / power.sqrt();
            out.iter_mut().flatten().for_each(|v| *v *= g);
        }
        out
    }
}
