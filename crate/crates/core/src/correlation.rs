//! Recursive per-bin spatial correlation, noise subtraction and PHAT weighting.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{modulus, Real};
use crate::stft::SpectraFrame;

/// Magnitude below which a cross-spectrum entry is treated as silent.
pub const PHAT_FLOOR: f64 = 1e-12;

/// One `M x M` Hermitian correlation matrix per frequency bin.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationSet<T: Real> {
    matrices: Vec<DMatrix<Complex<T>>>,
    alpha: T,
    frames_absorbed: usize,
}

impl<T: Real> CorrelationSet<T> {
    /// Zero state for `num_mics` channels and `num_bins` bins; `alpha` must lie in `(0, 1)`.
    pub fn new(num_mics: usize, num_bins: usize, alpha: T) -> Result<Self> {
        if !(alpha > T::zero() && alpha < T::one()) {
            return Err(Error::Config(format!(
                "adaptive rate {} outside (0, 1)",
                alpha.as_f64()
            )));
        }
        Ok(Self::zeroed(num_mics, num_bins, alpha))
    }

    fn zeroed(num_mics: usize, num_bins: usize, alpha: T) -> Self {
        Self {
            matrices: vec![DMatrix::zeros(num_mics, num_mics); num_bins],
            alpha,
            frames_absorbed: 0,
        }
    }

    /// Zero state with the same shape and rate as `self`.
    pub fn zeros_like(&self) -> Self {
        Self::zeroed(self.num_mics(), self.num_bins(), self.alpha)
    }

    pub fn from_matrices(matrices: Vec<DMatrix<Complex<T>>>, alpha: T, frames_absorbed: usize) -> Result<Self> {
        let m = matrices.first().map_or(0, |r| r.nrows());
        if matrices.iter().any(|r| r.nrows() != m || r.ncols() != m) {
            return Err(Error::Dimension("correlation matrices must share one square shape".into()));
        }
        Ok(Self {
            matrices,
            alpha,
            frames_absorbed,
        })
    }

    pub fn num_mics(&self) -> usize {
        self.matrices.first().map_or(0, |r| r.nrows())
    }

    pub fn num_bins(&self) -> usize {
        self.matrices.len()
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn frames_absorbed(&self) -> usize {
        self.frames_absorbed
    }

    pub fn matrices(&self) -> &[DMatrix<Complex<T>>] {
        &self.matrices
    }

    pub fn bin(&self, k: usize) -> &DMatrix<Complex<T>> {
        &self.matrices[k]
    }

    /// Frames needed before the estimate is trusted: `ceil(1 / alpha)`.
    pub fn warmup_frames(&self) -> usize {
        (1.0 / self.alpha.as_f64()).ceil() as usize
    }

    pub fn is_warmed_up(&self) -> bool {
        self.frames_absorbed >= self.warmup_frames()
    }

    /// `R <- (1 - alpha) R + alpha x x^H` at every bin.
    pub fn update(&mut self, frame: &SpectraFrame<T>) -> Result<()> {
        if frame.channels() != self.num_mics() || frame.num_bins() != self.num_bins() {
            return Err(Error::Dimension(format!(
                "frame is {}x{}, correlation expects {}x{}",
                frame.channels(),
                frame.num_bins(),
                self.num_mics(),
                self.num_bins()
            )));
        }
        let keep = T::one() - self.alpha;
        let m = self.num_mics();
        for (k, r) in self.matrices.iter_mut().enumerate() {
            let x = frame.bins.column(k);
            for i in 0..m {
                for j in i..m {
                    let v = r[(i, j)] * keep + x[i] * x[j].conj() * self.alpha;
                    r[(i, j)] = v;
                    r[(j, i)] = v.conj();
                }
                // Keep the diagonal exactly real.
                r[(i, i)].im = T::zero();
            }
        }
        self.frames_absorbed += 1;
        Ok(())
    }

    /// Largest elementwise deviation from Hermitian symmetry.
    pub fn hermitian_error(&self) -> T {
        let mut worst = T::zero();
        for r in &self.matrices {
            for i in 0..r.nrows() {
                for j in 0..r.ncols() {
                    worst = worst.max(modulus(r[(i, j)] - r[(j, i)].conj()));
                }
            }
        }
        worst
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        let sidecar = CorrelationFile {
            format: SIDECAR_FORMAT.into(),
            version: SIDECAR_VERSION,
            num_mics: self.num_mics(),
            num_bins: self.num_bins(),
            alpha: self.alpha.as_f64(),
            frames_absorbed: self.frames_absorbed,
            bins: self
                .matrices
                .iter()
                .map(|r| {
                    (0..r.nrows())
                        .flat_map(|i| (0..r.ncols()).map(move |j| (i, j)))
                        .map(|(i, j)| [r[(i, j)].re.as_f64(), r[(i, j)].im.as_f64()])
                        .collect()
                })
                .collect(),
        };
        serde_json::to_writer(out, &sidecar)?;
        Ok(())
    }

    pub fn read_json<R: Read>(input: R) -> Result<Self> {
        let f: CorrelationFile = serde_json::from_reader(input)?;
        if f.format != SIDECAR_FORMAT || f.version != SIDECAR_VERSION {
            return Err(Error::Format(format!(
                "unsupported correlation file {} v{}",
                f.format, f.version
            )));
        }
        if f.bins.len() != f.num_bins || f.bins.iter().any(|b| b.len() != f.num_mics * f.num_mics) {
            return Err(Error::Format("correlation file shape is inconsistent".into()));
        }
        let matrices = f
            .bins
            .iter()
            .map(|b| {
                DMatrix::from_row_iterator(
                    f.num_mics,
                    f.num_mics,
                    b.iter().map(|&[re, im]| Complex::new(T::lit(re), T::lit(im))),
                )
            })
            .collect();
        Self::from_matrices(matrices, T::lit(f.alpha), f.frames_absorbed)
    }
}

const SIDECAR_FORMAT: &str = "sslkit-correlation";
const SIDECAR_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CorrelationFile {
    format: String,
    version: u32,
    num_mics: usize,
    num_bins: usize,
    alpha: f64,
    frames_absorbed: usize,
    /// Row-major `[re, im]` entries per bin.
    bins: Vec<Vec<[f64; 2]>>,
}

/// Run the recursive update over noise-only frames from a zero state.
pub fn estimate_noise<T: Real>(frames: &[SpectraFrame<T>], alpha: T) -> Result<CorrelationSet<T>> {
    let first = frames.first().ok_or(Error::NoFrames)?;
    let mut corr = CorrelationSet::new(first.channels(), first.num_bins(), alpha)?;
    let recommended = (5.0 / alpha.as_f64()).ceil() as usize;
    if frames.len() < recommended {
        log::warn!(
            "noise estimate from {} frames; at least {recommended} recommended",
            frames.len()
        );
    }
    for f in frames {
        corr.update(f)?;
    }
    Ok(corr)
}

/// `R_ss = R_xx - R_nn` per bin. The result may be indefinite.
pub fn difference<T: Real>(rxx: &CorrelationSet<T>, rnn: &CorrelationSet<T>) -> Result<CorrelationSet<T>> {
    if rxx.num_mics() != rnn.num_mics() || rxx.num_bins() != rnn.num_bins() {
        return Err(Error::Dimension(format!(
            "cannot subtract {}x{} noise set from {}x{} set",
            rnn.num_mics(),
            rnn.num_bins(),
            rxx.num_mics(),
            rxx.num_bins()
        )));
    }
    Ok(CorrelationSet {
        matrices: rxx
            .matrices
            .iter()
            .zip(&rnn.matrices)
            .map(|(a, b)| a - b)
            .collect(),
        alpha: rxx.alpha,
        frames_absorbed: rxx.frames_absorbed,
    })
}

/// PHAT-normalized cross-spectra, pair-major then bin.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossSpectraVector<T> {
    pub values: Vec<Complex<T>>,
}

impl<T: Real> CrossSpectraVector<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_silent(&self) -> bool {
        self.values.iter().all(|v| v.re == T::zero() && v.im == T::zero())
    }
}

/// `(R_ss[k])_{ij} / |(R_ss[k])_{ij}|` for each pair, zero below [`PHAT_FLOOR`].
pub fn phat_vector<T: Real>(rss: &CorrelationSet<T>, pairs: &[(usize, usize)]) -> CrossSpectraVector<T> {
    let floor = T::lit(PHAT_FLOOR);
    let mut values = Vec::with_capacity(pairs.len() * rss.num_bins());
    for &(i, j) in pairs {
        for r in &rss.matrices {
            let z = r[(i, j)];
            let mag = modulus(z);
            values.push(if mag > floor {
                z / mag
            } else {
                Complex::new(T::zero(), T::zero())
            });
        }
    }
    CrossSpectraVector { values }
}
