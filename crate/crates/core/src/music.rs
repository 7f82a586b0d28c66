//! GSVD-MUSIC baseline.
//!
//! Per bin, `(R_nn + eps I)^-1 R_xx` is factored by a complex SVD; the left
//! singular vectors past the source count span the noise subspace, and the
//! pseudo-spectrum sums the inverse projection of each candidate steering
//! vector onto that subspace across bins.

use std::sync::Arc;

use nalgebra::{DMatrix, SVD};
use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::correlation::CorrelationSet;
use crate::error::{Error, Result};
use crate::estimate::{DoaEstimate, Localizer};
use crate::geometry::{DoaGrid, MicArrayGeometry};
use crate::scalar::{cis, modulus, Real};
use crate::stft::SpectraFrame;

/// Floor on the inner projection sum before inversion.
pub const MUSIC_FLOOR: f64 = 1e-9;

/// Relative diagonal loading applied to `R_nn` before inversion.
pub const DEFAULT_REGULARIZATION: f64 = 1e-6;

/// `A_{q,m}[k] = exp(-2 pi sqrt(-1) k tau_{q,m} / N)` stored `[q][k][m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringVectorBank<T: Real> {
    vectors: Vec<Complex<T>>,
    num_directions: usize,
    num_bins: usize,
    num_mics: usize,
}

impl<T: Real> SteeringVectorBank<T> {
    pub fn num_directions(&self) -> usize {
        self.num_directions
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn num_mics(&self) -> usize {
        self.num_mics
    }

    /// `A_q[k]` as a slice of `M` components.
    pub fn vector(&self, q: usize, k: usize) -> &[Complex<T>] {
        let start = (q * self.num_bins + k) * self.num_mics;
        &self.vectors[start..start + self.num_mics]
    }
}

pub fn build_steering_bank<T: Real>(
    geom: &MicArrayGeometry<T>,
    grid: &DoaGrid<T>,
    frame_size: usize,
) -> SteeringVectorBank<T> {
    let num_bins = frame_size / 2 + 1;
    let m = geom.num_mics();
    let scale = -T::two_pi() / T::from_usize_lossy(frame_size) * geom.sample_rate() / geom.speed_of_sound();
    let mut vectors = Vec::with_capacity(grid.len() * num_bins * m);
    for s in grid.directions() {
        let taus: Vec<T> = geom.positions().iter().map(|r| r.dot(s)).collect();
        for k in 0..num_bins {
            let kk = T::from_usize_lossy(k);
            vectors.extend(taus.iter().map(|&t| cis(scale * kk * t)));
        }
    }
    SteeringVectorBank {
        vectors,
        num_directions: grid.len(),
        num_bins,
        num_mics: m,
    }
}

/// Factorization of `(R_nn + eps I)^-1 R_xx` for one bin.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceDecomposition<T: Real> {
    /// Non-increasing.
    pub singular_values: Vec<T>,
    /// Columns `e_1 .. e_M`.
    pub left: DMatrix<Complex<T>>,
    /// Columns `f_1 .. f_M`.
    pub right: DMatrix<Complex<T>>,
}

/// `eps = scale * Tr(R_nn) / M`.
pub fn regularization_for<T: Real>(rnn: &DMatrix<Complex<T>>, scale: T) -> T {
    let tr = (0..rnn.nrows()).fold(T::zero(), |a, i| a + rnn[(i, i)].re);
    scale * tr / T::from_usize_lossy(rnn.nrows())
}

pub fn gsvd_per_bin<T: Real>(
    rxx: &DMatrix<Complex<T>>,
    rnn: &DMatrix<Complex<T>>,
    regularization: T,
) -> Result<SubspaceDecomposition<T>> {
    let m = rxx.nrows();
    if rxx.shape() != (m, m) || rnn.shape() != (m, m) {
        return Err(Error::Dimension("gsvd needs two square matrices of one size".into()));
    }
    let mut loaded = rnn.clone();
    for i in 0..m {
        loaded[(i, i)] += Complex::new(regularization, T::zero());
    }
    let inv = loaded
        .try_inverse()
        .filter(|inv| inv.iter().all(|z| z.re.is_finite() && z.im.is_finite()))
        .ok_or_else(|| Error::Domain("noise correlation is singular".into()))?;
    let svd = SVD::new(inv * rxx, true, true);
    let u = svd.u.expect("left vectors requested");
    let vt = svd.v_t.expect("right vectors requested");
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    Ok(SubspaceDecomposition {
        singular_values: order.iter().map(|&i| svd.singular_values[i]).collect(),
        left: DMatrix::from_fn(m, m, |r, c| u[(r, order[c])]),
        right: DMatrix::from_fn(m, m, |r, c| vt[(order[c], r)].conj()),
    })
}

/// Range of bins included in the pseudo-spectrum sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinRange {
    pub first: usize,
    pub last: usize,
}

/// `P_q = sum_k (sum_{m > n_sources} |a_q[k]^H e_m[k]|)^-1`, skipping `None` bins.
///
/// The STFT of a source at `s_q` is proportional to `conj(A_q[k])`, so that is
/// the vector projected onto the noise subspace.
pub fn music_spectrum<T: Real>(
    decomps: &[Option<SubspaceDecomposition<T>>],
    bank: &SteeringVectorBank<T>,
    n_sources: usize,
    band: Option<BinRange>,
) -> Vec<T> {
    let m = bank.num_mics();
    let floor = T::lit(MUSIC_FLOOR);
    let bins: Vec<usize> = (0..decomps.len().min(bank.num_bins()))
        .filter(|&k| band.is_none_or(|b| k >= b.first && k <= b.last))
        .filter(|&k| decomps[k].is_some())
        .collect();
    let mut spectrum = vec![T::zero(); bank.num_directions()];
    for &k in &bins {
        let d = decomps[k].as_ref().expect("filtered");
        let noise: Vec<Vec<Complex<T>>> = (n_sources..m)
            .map(|c| d.left.column(c).iter().cloned().collect())
            .collect();
        for (q, p) in spectrum.iter_mut().enumerate() {
            let a = bank.vector(q, k);
            let mut sum = T::zero();
            for e in &noise {
                let dot = a
                    .iter()
                    .zip(e)
                    .fold(Complex::new(T::zero(), T::zero()), |acc, (x, y)| acc + x * y);
                sum += modulus(dot);
            }
            *p += T::one() / sum.max(floor);
        }
    }
    spectrum
}

/// Streaming GSVD-MUSIC localizer.
pub struct GsvdMusic<T: Real> {
    bank: Arc<SteeringVectorBank<T>>,
    grid: Arc<DoaGrid<T>>,
    rxx: CorrelationSet<T>,
    rnn: CorrelationSet<T>,
    n_sources: usize,
    band: Option<BinRange>,
    regularization_scale: T,
    failed_bins: usize,
}

impl<T: Real> GsvdMusic<T> {
    pub fn new(bank: Arc<SteeringVectorBank<T>>, grid: Arc<DoaGrid<T>>, noise: CorrelationSet<T>) -> Result<Self> {
        if bank.num_directions() != grid.len() {
            return Err(Error::Dimension("steering bank and grid disagree".into()));
        }
        if noise.num_mics() != bank.num_mics() || noise.num_bins() != bank.num_bins() {
            return Err(Error::Dimension(format!(
                "noise set is {}x{}, bank expects {}x{}",
                noise.num_mics(),
                noise.num_bins(),
                bank.num_mics(),
                bank.num_bins()
            )));
        }
        Ok(Self {
            bank,
            grid,
            rxx: noise.zeros_like(),
            rnn: noise,
            n_sources: 1,
            band: None,
            regularization_scale: T::lit(DEFAULT_REGULARIZATION),
            failed_bins: 0,
        })
    }

    pub fn with_sources(mut self, n_sources: usize) -> Result<Self> {
        if n_sources == 0 || n_sources >= self.bank.num_mics() {
            return Err(Error::Config(format!(
                "source count {n_sources} must be in 1..{}",
                self.bank.num_mics()
            )));
        }
        self.n_sources = n_sources;
        Ok(self)
    }

    pub fn with_band(mut self, band: Option<BinRange>) -> Self {
        self.band = band;
        self
    }

    pub fn with_regularization(mut self, scale: T) -> Self {
        self.regularization_scale = scale;
        self
    }

    /// Bins skipped so far because `R_nn` could not be inverted.
    pub fn failed_bins(&self) -> usize {
        self.failed_bins
    }

    pub fn correlation(&self) -> &CorrelationSet<T> {
        &self.rxx
    }

    /// Per-bin decompositions of the current state.
    pub fn decompose(&mut self) -> Vec<Option<SubspaceDecomposition<T>>> {
        let mut out = Vec::with_capacity(self.rxx.num_bins());
        for k in 0..self.rxx.num_bins() {
            let in_band = self.band.is_none_or(|b| k >= b.first && k <= b.last);
            if !in_band {
                out.push(None);
                continue;
            }
            let rnn = self.rnn.bin(k);
            let eps = regularization_for(rnn, self.regularization_scale);
            match gsvd_per_bin(self.rxx.bin(k), rnn, eps) {
                Ok(d) => out.push(Some(d)),
                Err(_) => {
                    self.failed_bins += 1;
                    out.push(None);
                }
            }
        }
        out
    }
}

impl<T: Real> Localizer<T> for GsvdMusic<T> {
    fn name(&self) -> &str {
        "gsvd-music"
    }

    fn process(&mut self, frame: &SpectraFrame<T>) -> Result<Option<DoaEstimate<T>>> {
        self.rxx.update(frame)?;
        let decomps = self.decompose();
        if decomps.iter().all(|d| d.is_none()) {
            log::warn!("frame {}: every bin failed", frame.frame_index);
            return Ok(None);
        }
        let spectrum = music_spectrum(&decomps, &self.bank, self.n_sources, self.band);
        let mut best = (0, spectrum[0]);
        for (q, &p) in spectrum.iter().enumerate().skip(1) {
            if p > best.1 {
                best = (q, p);
            }
        }
        Ok(Some(DoaEstimate {
            frame_index: frame.frame_index,
            grid_index: best.0,
            direction: *self.grid.direction(best.0),
            amplitude: best.1,
            warmed_up: self.rxx.is_warmed_up(),
        }))
    }

    fn reset(&mut self) {
        self.rxx = self.rxx.zeros_like();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_doa_grid, build_steering_matrix};
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type C = Complex<f64>;

    fn eye(m: usize) -> DMatrix<C> {
        DMatrix::identity(m, m)
    }

    fn random_psd(rng: &mut impl Rng, m: usize) -> DMatrix<C> {
        let a = DMatrix::from_fn(m, m, |_, _| C::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        &a * a.adjoint() + eye(m) * C::new(0.1, 0.0)
    }

    #[test]
    fn diagonal_case() {
        let rxx = DMatrix::from_diagonal(&DVector::from_vec(vec![
            C::new(4.0, 0.0),
            C::new(3.0, 0.0),
            C::new(2.0, 0.0),
            C::new(1.0, 0.0),
        ]));
        let d = gsvd_per_bin(&rxx, &eye(4), 0.0).unwrap();
        assert_eq!(d.singular_values.len(), 4);
        for (got, want) in d.singular_values.iter().zip([4.0, 3.0, 2.0, 1.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        for m in 0..4 {
            assert!((d.left[(m, m)].norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_one_source_eigenstructure() {
        let a = DVector::from_vec(vec![C::new(0.5, 0.5), C::new(0.0, -0.5), C::new(-0.5, 0.0), C::new(0.0, 0.0)]);
        let a = &a / C::new(a.norm(), 0.0);
        let sigma2 = 3.0;
        let rxx = &a * a.adjoint() * C::new(sigma2, 0.0) + eye(4);
        let d = gsvd_per_bin(&rxx, &eye(4), 0.0).unwrap();
        // Unit a: the top value is sigma^2 |a|^2 + 1.
        assert!((d.singular_values[0] - (sigma2 + 1.0)).abs() < 1e-10);
        assert!((d.left.column(0).dotc(&a).norm() - 1.0).abs() < 1e-10);
        for m in 1..4 {
            assert!(d.left.column(m).dotc(&a).norm() < 1e-10);
        }
    }

    #[test]
    fn equal_matrices_give_unit_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = random_psd(&mut rng, 4);
        let d = gsvd_per_bin(&r, &r, 0.0).unwrap();
        assert!(d.singular_values.iter().all(|s| (s - 1.0).abs() < 1e-9));
    }

    #[test]
    fn singular_noise_is_an_error() {
        let z = DMatrix::<C>::zeros(4, 4);
        assert!(matches!(gsvd_per_bin(&eye(4), &z, 0.0), Err(Error::Domain(_))));
        assert!(gsvd_per_bin(&eye(4), &z, regularization_for(&z, 1e-6)).is_err());
    }

    #[test]
    fn bank_structure_and_sign() {
        let geom = MicArrayGeometry::<f64>::default_array();
        let grid = build_doa_grid::<f64>(2);
        let bank = build_steering_bank(&geom, &grid, 256);
        let w = build_steering_matrix(&geom, &grid, 256);
        for q in 0..grid.len() {
            assert!(bank.vector(q, 0).iter().all(|z| (*z - C::new(1.0, 0.0)).norm() == 0.0));
            for k in [1, 40, 128] {
                let a = bank.vector(q, k);
                assert!(a.iter().all(|z| (z.norm() - 1.0).abs() < 1e-12));
                let tau = geom.tdoa_origin(grid.direction(q), 2).unwrap();
                let expect = cis(-2.0 * std::f64::consts::PI * k as f64 * tau / 256.0);
                assert!((a[2] - expect).norm() < 1e-12);
                // A (exp(-j)) and W (exp(+j)) relate by A_i conj(A_j) = W_ij.
                for (p, &(i, j)) in w.pairs().iter().enumerate() {
                    let lhs = a[i] * a[j].conj();
                    assert!((lhs - w.entries()[(q, w.column(p, k))]).norm() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn spectrum_saturates_when_orthogonal() {
        // One mic pair with identical steering components; e_2 = (1,-1)/sqrt2 annihilates them.
        let geom = MicArrayGeometry::<f64>::from_meters(&[[0.0, 0.0, 0.0], [0.1, 0.0, 0.0]], 343.0, 16000.0).unwrap();
        let grid = DoaGrid::from_directions(vec![nalgebra::Vector3::z()], 0).unwrap();
        let bank = build_steering_bank(&geom, &grid, 8);
        let s = 1.0 / 2f64.sqrt();
        let left = DMatrix::from_row_slice(2, 2, &[C::new(s, 0.0), C::new(s, 0.0), C::new(s, 0.0), C::new(-s, 0.0)]);
        let d = SubspaceDecomposition {
            singular_values: vec![2.0, 1.0],
            left: left.clone(),
            right: left,
        };
        let decomps = vec![Some(d); 5];
        let p = music_spectrum(&decomps, &bank, 1, None);
        assert!((p[0] - 5.0 / MUSIC_FLOOR).abs() / (5.0 / MUSIC_FLOOR) < 1e-9);
        let half = music_spectrum(&decomps, &bank, 1, Some(BinRange { first: 1, last: 2 }));
        assert!((half[0] - 2.0 / MUSIC_FLOOR).abs() / (2.0 / MUSIC_FLOOR) < 1e-9);
    }

    #[test]
    fn no_source_spectrum_is_flat() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let geom = MicArrayGeometry::<f64>::default_array();
        let grid = build_doa_grid::<f64>(3);
        let bank = build_steering_bank(&geom, &grid, 256);
        let decomps: Vec<_> = (0..129)
            .map(|_| {
                let r = random_psd(&mut rng, 4);
                Some(gsvd_per_bin(&r, &r, 0.0).unwrap())
            })
            .collect();
        let p = music_spectrum(&decomps, &bank, 1, None);
        let max = p.iter().cloned().fold(f64::MIN, f64::max);
        let min = p.iter().cloned().fold(f64::MAX, f64::min);
        assert!((max - min) / max < 0.1, "spread {}", (max - min) / max);
    }

    proptest! {
        #[test]
        fn identity_noise_reduces_to_eigendecomposition(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = random_psd(&mut rng, 4);
            let d = gsvd_per_bin(&r, &eye(4), 0.0).unwrap();
            let mut eig: Vec<f64> = r.clone().symmetric_eigenvalues().iter().cloned().collect();
            eig.sort_by(|a, b| b.total_cmp(a));
            for (s, l) in d.singular_values.iter().zip(&eig) {
                prop_assert!((s - l).abs() < 1e-9);
            }
            prop_assert!(d.singular_values.windows(2).all(|w| w[0] >= w[1]));
            let gram = d.left.adjoint() * &d.left;
            prop_assert!((gram - eye(4)).norm() < 1e-9);
        }

        #[test]
        fn decomposition_reconstructs(seed in 0u64..300, scale in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rxx = random_psd(&mut rng, 4);
            let rnn = random_psd(&mut rng, 4);
            let d = gsvd_per_bin(&rxx, &rnn, 0.0).unwrap();
            let prod = rnn.clone().try_inverse().unwrap() * &rxx;
            let lam = DMatrix::from_diagonal(&DVector::from_iterator(4, d.singular_values.iter().map(|&s| C::new(s, 0.0))));
            let rec = &d.left * lam * d.right.adjoint();
            prop_assert!((rec - &prod).norm() <= 1e-8 * prod.norm());

            // Scaling R_xx scales the values but keeps the noise subspace.
            let ds = gsvd_per_bin(&(&rxx * C::new(scale, 0.0)), &rnn, 0.0).unwrap();
            for m in 0..4 {
                prop_assert!((ds.singular_values[m] - scale * d.singular_values[m]).abs() < 1e-8 * scale * d.singular_values[0]);
            }
            let p0 = d.left.columns(1, 3).into_owned();
            let p1 = ds.left.columns(1, 3).into_owned();
            let proj0 = &p0 * p0.adjoint();
            let proj1 = &p1 * p1.adjoint();
            prop_assert!((proj0 - proj1).norm() < 1e-6);
        }
    }
}
