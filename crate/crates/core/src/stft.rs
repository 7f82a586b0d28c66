//! Multichannel short-time Fourier analysis.

use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Time-domain samples for `M` synchronized channels.
#[derive(Debug, Clone, PartialEq)]
pub struct MultichannelSignal<T> {
    samples: Vec<Vec<T>>,
    sample_rate: T,
}

impl<T: Real> MultichannelSignal<T> {
    pub fn new(samples: Vec<Vec<T>>, sample_rate: T) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Config("signal needs at least one channel".into()));
        }
        let len = samples[0].len();
        if samples.iter().any(|c| c.len() != len) {
            return Err(Error::Dimension("channels differ in length".into()));
        }
        if sample_rate <= T::zero() {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn channels(&self) -> usize {
        self.samples.len()
    }

    pub fn len(&self) -> usize {
        self.samples[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> T {
        self.sample_rate
    }

    pub fn channel(&self, m: usize) -> &[T] {
        &self.samples[m]
    }

    pub fn samples(&self) -> &[Vec<T>] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Vec<T>> {
        self.samples
    }

    /// Copy of the samples in `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        let end = end.min(self.len());
        let start = start.min(end);
        Self {
            samples: self.samples.iter().map(|c| c[start..end].to_vec()).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// One analysis frame: `bins[(m, k)]` is the coefficient of channel `m` at bin `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectraFrame<T: Real> {
    pub frame_index: usize,
    pub bins: DMatrix<Complex<T>>,
}

impl<T: Real> SpectraFrame<T> {
    pub fn channels(&self) -> usize {
        self.bins.nrows()
    }

    pub fn num_bins(&self) -> usize {
        self.bins.ncols()
    }

    /// Snapshot `x[k]`, the column of channel coefficients at bin `k`.
    pub fn snapshot(&self, k: usize) -> nalgebra::DVector<Complex<T>> {
        self.bins.column(k).into_owned()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowKind {
    Rectangular,
    /// Periodic square-root Hann, `sin(pi n / N)`.
    #[default]
    Sine,
    Hann,
}

impl WindowKind {
    pub fn coefficients<T: Real>(self, n: usize) -> Vec<T> {
        let len = T::from_usize_lossy(n);
        (0..n)
            .map(|i| {
                let phase = T::pi() * T::from_usize_lossy(i) / len;
                match self {
                    WindowKind::Rectangular => T::one(),
                    WindowKind::Sine => phase.sin(),
                    WindowKind::Hann => phase.sin() * phase.sin(),
                }
            })
            .collect()
    }
}

/// Number of complete frames of `frame_size` samples spaced `hop` apart.
pub fn frame_count(len: usize, frame_size: usize, hop: usize) -> usize {
    if len < frame_size || hop == 0 {
        0
    } else {
        (len - frame_size) / hop + 1
    }
}

/// Reusable analyzer holding the FFT plan and window.
pub struct Stft<T: Real> {
    frame_size: usize,
    hop_size: usize,
    window: Vec<T>,
    fft: Arc<dyn Fft<T>>,
}

impl<T: Real> std::fmt::Debug for Stft<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft")
            .field("frame_size", &self.frame_size)
            .field("hop_size", &self.hop_size)
            .finish_non_exhaustive()
    }
}

impl<T: Real> Stft<T> {
    pub fn new(frame_size: usize, hop_size: usize, window: WindowKind) -> Result<Self> {
        if frame_size < 2 || !frame_size.is_power_of_two() {
            return Err(Error::Config(format!(
                "frame size {frame_size} is not a power of two"
            )));
        }
        if hop_size == 0 || hop_size > frame_size {
            return Err(Error::Config(format!(
                "hop size {hop_size} outside 1..={frame_size}"
            )));
        }
        let fft = FftPlanner::new().plan_fft_forward(frame_size);
        Ok(Self {
            frame_size,
            hop_size,
            window: window.coefficients(frame_size),
            fft,
        })
    }

    pub fn frame_size(&self) -> usize {
        self.frame_size
    }

    pub fn hop_size(&self) -> usize {
        self.hop_size
    }

    pub fn num_bins(&self) -> usize {
        self.frame_size / 2 + 1
    }

    /// Transform the frame starting at sample `start` of every channel.
    pub fn frame_at(&self, signal: &MultichannelSignal<T>, frame_index: usize) -> SpectraFrame<T> {
        let start = frame_index * self.hop_size;
        let bins_n = self.num_bins();
        let mut bins = DMatrix::zeros(signal.channels(), bins_n);
        let mut buf = vec![Complex::new(T::zero(), T::zero()); self.frame_size];
        for m in 0..signal.channels() {
            let ch = &signal.channel(m)[start..start + self.frame_size];
            for ((b, &x), &w) in buf.iter_mut().zip(ch).zip(&self.window) {
                *b = Complex::new(x * w, T::zero());
            }
            self.fft.process(&mut buf);
            for k in 0..bins_n {
                bins[(m, k)] = buf[k];
            }
        }
        SpectraFrame { frame_index, bins }
    }

    pub fn analyze(&self, signal: &MultichannelSignal<T>) -> Result<Vec<SpectraFrame<T>>> {
        let count = frame_count(signal.len(), self.frame_size, self.hop_size);
        if count == 0 {
            return Err(Error::EmptySequence {
                len: signal.len(),
                frame: self.frame_size,
            });
        }
        Ok((0..count).map(|l| self.frame_at(signal, l)).collect())
    }
}

/// One-sided STFT of every channel; frame `l` covers samples `[l*hop, l*hop + N)`.
pub fn analyze<T: Real>(
    signal: &MultichannelSignal<T>,
    frame_size: usize,
    hop_size: usize,
    window: WindowKind,
) -> Result<Vec<SpectraFrame<T>>> {
    Stft::new(frame_size, hop_size, window)?.analyze(signal)
}
