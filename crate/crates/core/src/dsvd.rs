//! Difference SVD-PHAT: the steering matrix is compressed offline by a
//! truncated SVD, and each frame is localized by projecting its PHAT
//! cross-spectra onto the retained subspace and searching for the nearest
//! normalized steering row.

use std::io::{Read, Write};
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, Vector3, SVD};
use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::correlation::{difference, phat_vector, CorrelationSet, CrossSpectraVector};
use crate::error::{Error, Result};
use crate::estimate::{DoaEstimate, Localizer};
use crate::geometry::{build_steering_matrix, DoaGrid, MicArrayGeometry, SteeringMatrix};
use crate::kdtree::{KdTree, LinearScan, NearestNeighbor};
use crate::scalar::Real;
use crate::stft::SpectraFrame;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchBackend {
    #[default]
    KdTree,
    LinearScan,
}

/// `W ~ U S V^H` truncated to the smallest rank meeting the energy bound.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedSvd<T: Real> {
    /// `Q x K` left singular vectors.
    pub u: DMatrix<Complex<T>>,
    /// `L x K` right singular vectors.
    pub v: DMatrix<Complex<T>>,
    /// Every singular value of `W`, non-increasing; the first `rank` are kept.
    pub singular_values: Vec<T>,
    pub rank: usize,
    pub delta: T,
    /// `Tr{W W^H}`.
    pub total_energy: T,
}

impl<T: Real> TruncatedSvd<T> {
    /// Whether the leading `k` singular values satisfy `sum s^2 >= (1 - delta) Tr{W W^H}`.
    pub fn satisfies_energy_bound(&self, k: usize) -> bool {
        retained_energy(&self.singular_values, k) >= (T::one() - self.delta) * self.total_energy
    }

    /// Fraction of `Tr{W W^H}` captured by the kept singular values.
    pub fn energy_ratio(&self) -> T {
        retained_energy(&self.singular_values, self.rank) / self.total_energy
    }

    pub fn reconstruct(&self) -> DMatrix<Complex<T>> {
        let mut us = self.u.clone();
        for (k, mut col) in us.column_iter_mut().enumerate() {
            col *= Complex::new(self.singular_values[k], T::zero());
        }
        us * self.v.adjoint()
    }
}

fn retained_energy<T: Real>(sv: &[T], k: usize) -> T {
    sv[..k.min(sv.len())].iter().fold(T::zero(), |a, &s| a + s * s)
}

/// Full SVD of `W` followed by truncation to the smallest rank `K` with
/// `Tr{S S^T} >= (1 - delta) Tr{W W^H}`.
pub fn truncated_svd<T: Real>(w: &DMatrix<Complex<T>>, delta: T) -> Result<TruncatedSvd<T>> {
    if !(delta > T::zero() && delta < T::one()) {
        return Err(Error::Config(format!(
            "reconstruction tolerance {} outside (0, 1)",
            delta.as_f64()
        )));
    }
    if w.is_empty() {
        return Err(Error::Dimension("steering matrix is empty".into()));
    }
    let total_energy = w.iter().fold(T::zero(), |a, z| a + z.norm_sqr());
    let svd = SVD::new(w.clone(), true, true);
    let u_full = svd.u.expect("left vectors requested");
    let vt_full = svd.v_t.expect("right vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let singular_values: Vec<T> = order.iter().map(|&i| svd.singular_values[i]).collect();

    let target = (T::one() - delta) * total_energy;
    let mut acc = T::zero();
    let mut rank = None;
    for (k, &s) in singular_values.iter().enumerate() {
        acc += s * s;
        if acc >= target {
            rank = Some(k + 1);
            break;
        }
    }
    // Rounding can leave the bound just out of reach as delta -> 0; keep the numerical rank.
    let rank = rank.unwrap_or_else(|| {
        let tol = singular_values[0] * T::default_epsilon() * T::from_usize_lossy(w.nrows().max(w.ncols()));
        singular_values.iter().filter(|&&s| s > tol).count().max(1)
    });

    let u = DMatrix::from_fn(w.nrows(), rank, |r, c| u_full[(r, order[c])]);
    let v = DMatrix::from_fn(w.ncols(), rank, |r, c| vt_full[(order[c], r)].conj());
    Ok(TruncatedSvd {
        u,
        v,
        singular_values,
        rank,
        delta,
        total_energy,
    })
}

/// Offline search structure for one array, grid and frame size.
pub struct SvdIndex<T: Real> {
    geometry: MicArrayGeometry<T>,
    grid: Arc<DoaGrid<T>>,
    frame_size: usize,
    steering: SteeringMatrix<T>,
    svd: TruncatedSvd<T>,
    backend: SearchBackend,
    searcher: Box<dyn NearestNeighbor<T>>,
}

impl<T: Real> std::fmt::Debug for SvdIndex<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SvdIndex")
            .field("directions", &self.grid.len())
            .field("width", &self.steering.width())
            .field("rank", &self.svd.rank)
            .field("backend", &self.backend)
            .finish()
    }
}

/// Rows of `D = U S`, each scaled to unit norm and embedded as interleaved (re, im).
fn normalized_rows<T: Real>(svd: &TruncatedSvd<T>) -> Vec<T> {
    let (q, k) = (svd.u.nrows(), svd.rank);
    let mut out = Vec::with_capacity(q * 2 * k);
    for r in 0..q {
        let row: Vec<Complex<T>> = (0..k)
            .map(|c| svd.u[(r, c)] * svd.singular_values[c])
            .collect();
        let norm = row.iter().fold(T::zero(), |a, z| a + z.norm_sqr()).sqrt();
        for z in row {
            out.push(z.re / norm);
            out.push(z.im / norm);
        }
    }
    out
}

impl<T: Real> SvdIndex<T> {
    pub fn build(
        geometry: MicArrayGeometry<T>,
        grid: Arc<DoaGrid<T>>,
        frame_size: usize,
        delta: T,
        backend: SearchBackend,
    ) -> Result<Self> {
        let steering = build_steering_matrix(&geometry, &grid, frame_size);
        let svd = truncated_svd(steering.entries(), delta)?;
        Ok(Self::assemble(geometry, grid, frame_size, steering, svd, backend))
    }

    fn assemble(
        geometry: MicArrayGeometry<T>,
        grid: Arc<DoaGrid<T>>,
        frame_size: usize,
        steering: SteeringMatrix<T>,
        svd: TruncatedSvd<T>,
        backend: SearchBackend,
    ) -> Self {
        let rows = normalized_rows(&svd);
        let dim = 2 * svd.rank;
        let searcher: Box<dyn NearestNeighbor<T>> = match backend {
            SearchBackend::KdTree => Box::new(KdTree::new(rows, dim)),
            SearchBackend::LinearScan => Box::new(LinearScan::new(rows, dim)),
        };
        Self {
            geometry,
            grid,
            frame_size,
            steering,
            svd,
            backend,
            searcher,
        }
    }

    /// Same decomposition, different search backend.
    pub fn with_backend(&self, backend: SearchBackend) -> Self {
        Self::assemble(
            self.geometry.clone(),
            self.grid.clone(),
            self.frame_size,
            self.steering.clone(),
            self.svd.clone(),
            backend,
        )
    }

    pub fn rank(&self) -> usize {
        self.svd.rank
    }

    pub fn delta(&self) -> T {
        self.svd.delta
    }

    pub fn svd(&self) -> &TruncatedSvd<T> {
        &self.svd
    }

    pub fn steering(&self) -> &SteeringMatrix<T> {
        &self.steering
    }

    pub fn grid(&self) -> &Arc<DoaGrid<T>> {
        &self.grid
    }

    pub fn geometry(&self) -> &MicArrayGeometry<T> {
        &self.geometry
    }

    pub fn frame_size(&self) -> usize {
        self.frame_size
    }

    pub fn backend(&self) -> SearchBackend {
        self.backend
    }

    /// Unit-norm `D_q` embedded as interleaved (re, im).
    pub fn normalized_row(&self, q: usize) -> Vec<T> {
        normalized_rows(&self.svd)[q * 2 * self.rank()..(q + 1) * 2 * self.rank()].to_vec()
    }

    /// `Z = V^H X`.
    pub fn project(&self, x: &CrossSpectraVector<T>) -> Result<Vec<Complex<T>>> {
        if x.len() != self.steering.width() {
            return Err(Error::Dimension(format!(
                "cross-spectra length {} but index expects {}",
                x.len(),
                self.steering.width()
            )));
        }
        Ok(self
            .svd
            .v
            .column_iter()
            .map(|col| {
                col.iter().zip(&x.values).fold(Complex::new(T::zero(), T::zero()), |acc, (v, xv)| {
                    acc + v.conj() * xv
                })
            })
            .collect())
    }

    /// Grid index minimizing `|D^_q - (Z^)^H|`, or `None` when `Z = 0`.
    pub fn nearest_direction(&self, z: &[Complex<T>]) -> Option<usize> {
        let norm = z.iter().fold(T::zero(), |a, v| a + v.norm_sqr()).sqrt();
        if norm <= T::zero() {
            return None;
        }
        let query: Vec<T> = z.iter().flat_map(|v| [v.re / norm, -v.im / norm]).collect();
        Some(self.searcher.nearest(&query).0)
    }

    /// Nearest-neighbor search on `z`, with amplitude `Re{W_q X}` from the full row.
    pub fn search(&self, z: &[Complex<T>], x: &CrossSpectraVector<T>, frame_index: usize) -> Option<DoaEstimate<T>> {
        let q = self.nearest_direction(z)?;
        Some(DoaEstimate {
            frame_index,
            grid_index: q,
            direction: *self.grid.direction(q),
            amplitude: self.steering.row_energy(q, &x.values),
            warmed_up: true,
        })
    }

    pub fn localize(&self, x: &CrossSpectraVector<T>, frame_index: usize) -> Result<Option<DoaEstimate<T>>> {
        let z = self.project(x)?;
        Ok(self.search(&z, x, frame_index))
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(INDEX_MAGIC)?;
        out.write_u32::<LittleEndian>(INDEX_VERSION)?;
        let put = |out: &mut W, v: T| out.write_f64::<LittleEndian>(v.as_f64());
        let put_c = |out: &mut W, z: Complex<T>| -> std::io::Result<()> {
            out.write_f64::<LittleEndian>(z.re.as_f64())?;
            out.write_f64::<LittleEndian>(z.im.as_f64())
        };
        out.write_u64::<LittleEndian>(self.geometry.num_mics() as u64)?;
        for p in self.geometry.positions() {
            for c in p.iter() {
                put(&mut out, *c)?;
            }
        }
        put(&mut out, self.geometry.speed_of_sound())?;
        put(&mut out, self.geometry.sample_rate())?;
        out.write_u64::<LittleEndian>(self.frame_size as u64)?;
        out.write_u32::<LittleEndian>(self.grid.refinement_level())?;
        out.write_u64::<LittleEndian>(self.grid.len() as u64)?;
        for s in self.grid.directions() {
            for c in s.iter() {
                put(&mut out, *c)?;
            }
        }
        out.write_u8(match self.backend {
            SearchBackend::KdTree => 0,
            SearchBackend::LinearScan => 1,
        })?;
        put(&mut out, self.svd.delta)?;
        put(&mut out, self.svd.total_energy)?;
        out.write_u64::<LittleEndian>(self.svd.singular_values.len() as u64)?;
        for &s in &self.svd.singular_values {
            put(&mut out, s)?;
        }
        out.write_u64::<LittleEndian>(self.svd.rank as u64)?;
        for z in self.svd.u.iter().chain(self.svd.v.iter()) {
            put_c(&mut out, *z)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(Error::Format("not an index file".into()));
        }
        let version = input.read_u32::<LittleEndian>()?;
        if version != INDEX_VERSION {
            return Err(Error::Format(format!("unsupported index version {version}")));
        }
        let get = |input: &mut R| -> Result<T> { Ok(T::lit(input.read_f64::<LittleEndian>()?)) };
        let count = |input: &mut R, limit: u64| -> Result<usize> {
            let n = input.read_u64::<LittleEndian>()?;
            if n > limit {
                return Err(Error::Format(format!("implausible count {n}")));
            }
            Ok(n as usize)
        };
        let m = count(&mut input, 1 << 12)?;
        let mut positions = Vec::with_capacity(m);
        for _ in 0..m {
            positions.push(Vector3::new(get(&mut input)?, get(&mut input)?, get(&mut input)?));
        }
        let c = get(&mut input)?;
        let fs = get(&mut input)?;
        let geometry = MicArrayGeometry::new(positions, c, fs)?;
        let frame_size = count(&mut input, 1 << 24)?;
        let level = input.read_u32::<LittleEndian>()?;
        let q = count(&mut input, 1 << 24)?;
        let mut dirs = Vec::with_capacity(q);
        for _ in 0..q {
            dirs.push(Vector3::new(get(&mut input)?, get(&mut input)?, get(&mut input)?));
        }
        let grid = Arc::new(DoaGrid::from_directions(dirs, level)?);
        let backend = match input.read_u8()? {
            0 => SearchBackend::KdTree,
            1 => SearchBackend::LinearScan,
            b => return Err(Error::Format(format!("unknown backend tag {b}"))),
        };
        let delta = get(&mut input)?;
        let total_energy = get(&mut input)?;
        let nsv = count(&mut input, 1 << 24)?;
        let singular_values = (0..nsv).map(|_| get(&mut input)).collect::<Result<Vec<_>>>()?;
        let rank = count(&mut input, nsv as u64)?;
        let steering = build_steering_matrix(&geometry, &grid, frame_size);
        let mut read_matrix = |rows: usize| -> Result<DMatrix<Complex<T>>> {
            let mut data = Vec::with_capacity(rows * rank);
            for _ in 0..rows * rank {
                data.push(Complex::new(get(&mut input)?, get(&mut input)?));
            }
            Ok(DMatrix::from_vec(rows, rank, data))
        };
        let u = read_matrix(q)?;
        let v = read_matrix(steering.width())?;
        let svd = TruncatedSvd {
            u,
            v,
            singular_values,
            rank,
            delta,
            total_energy,
        };
        Ok(Self::assemble(geometry, grid, frame_size, steering, svd, backend))
    }
}

const INDEX_MAGIC: &[u8; 8] = b"SSLKIDX\0";
const INDEX_VERSION: u32 = 1;

/// Dense `Y = Re{W X}` and its argmax, lowest index on ties.
pub fn brute_force_srp<T: Real>(w: &SteeringMatrix<T>, x: &CrossSpectraVector<T>) -> (usize, T) {
    let energies = srp_energies(w, x);
    let mut best = (0, energies[0]);
    for (q, &y) in energies.iter().enumerate().skip(1) {
        if y > best.1 {
            best = (q, y);
        }
    }
    best
}

/// `Re{W X}` for every direction.
pub fn srp_energies<T: Real>(w: &SteeringMatrix<T>, x: &CrossSpectraVector<T>) -> Vec<T> {
    let e = w.entries();
    let mut y = vec![T::zero(); e.nrows()];
    for (c, col) in e.column_iter().enumerate() {
        let xv = x.values[c];
        for (acc, wv) in y.iter_mut().zip(col.iter()) {
            *acc += wv.re * xv.re - wv.im * xv.im;
        }
    }
    y
}

/// Streaming DSVD-PHAT localizer. With a zero noise set this is plain SVD-PHAT.
pub struct DsvdPhat<T: Real> {
    index: Arc<SvdIndex<T>>,
    rxx: CorrelationSet<T>,
    rnn: CorrelationSet<T>,
    name: String,
}

impl<T: Real> DsvdPhat<T> {
    pub fn new(index: Arc<SvdIndex<T>>, noise: CorrelationSet<T>) -> Result<Self> {
        let expect_bins = index.frame_size() / 2 + 1;
        if noise.num_mics() != index.geometry().num_mics() || noise.num_bins() != expect_bins {
            return Err(Error::Dimension(format!(
                "noise set is {}x{}, index expects {}x{}",
                noise.num_mics(),
                noise.num_bins(),
                index.geometry().num_mics(),
                expect_bins
            )));
        }
        Ok(Self {
            rxx: noise.zeros_like(),
            rnn: noise,
            index,
            name: "dsvd-phat".into(),
        })
    }

    /// SVD-PHAT on the noisy correlation directly (`R_nn = 0`).
    pub fn plain(index: Arc<SvdIndex<T>>, alpha: T) -> Result<Self> {
        let zero = CorrelationSet::new(index.geometry().num_mics(), index.frame_size() / 2 + 1, alpha)?;
        let mut me = Self::new(index, zero)?;
        me.name = "svd-phat".into();
        Ok(me)
    }

    pub fn index(&self) -> &Arc<SvdIndex<T>> {
        &self.index
    }

    pub fn correlation(&self) -> &CorrelationSet<T> {
        &self.rxx
    }

    /// PHAT cross-spectra of `R_xx - R_nn` for the current state.
    pub fn cross_spectra(&self) -> Result<CrossSpectraVector<T>> {
        let rss = difference(&self.rxx, &self.rnn)?;
        Ok(phat_vector(&rss, self.index.steering().pairs()))
    }
}

impl<T: Real> Localizer<T> for DsvdPhat<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn process(&mut self, frame: &SpectraFrame<T>) -> Result<Option<DoaEstimate<T>>> {
        self.rxx.update(frame)?;
        let x = self.cross_spectra()?;
        if x.is_silent() {
            return Ok(None);
        }
        let warmed_up = self.rxx.is_warmed_up();
        Ok(self
            .index
            .localize(&x, frame.frame_index)?
            .map(|e| DoaEstimate { warmed_up, ..e }))
    }

    fn reset(&mut self) {
        self.rxx = self.rxx.zeros_like();
    }
}
