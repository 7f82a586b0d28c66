//! Array geometry, candidate DOA grid, TDOAs and the SRP-PHAT steering matrix.
//!
//! Directions are unit vectors pointing from the array origin towards the
//! source. The localization frame puts the DOA halfsphere at `z >= 0`, so a
//! planar array must lie in the `z = 0` plane to be unambiguous.

use std::collections::HashMap;
use std::io::Write;

use nalgebra::{DMatrix, Vector3};
use num_complex::Complex;

use crate::error::{Error, Result};
use crate::scalar::{cis, Real};

/// Four-microphone array positions in centimeters, array plane `y = 0`.
pub const RESPEAKER_TABLE_CM: [[f64; 3]; 4] = [
    [2.9, 0.0, 2.9],
    [2.9, 0.0, -2.9],
    [-2.9, 0.0, 2.9],
    [-2.9, 0.0, -2.9],
];

/// Grid refinement level that yields 1282 halfsphere directions.
pub const DEFAULT_GRID_LEVEL: u32 = 4;

/// Rotation taking the table's array plane (`y = 0`) onto the localization
/// plane (`z = 0`): `(x, y, z) -> (x, z, -y)`.
pub fn table_to_grid_frame(p: [f64; 3]) -> [f64; 3] {
    [p[0], p[2], -p[1]]
}

/// Default array positions in meters, expressed in the localization frame.
pub fn default_mic_positions() -> Vec<[f64; 3]> {
    RESPEAKER_TABLE_CM
        .iter()
        .map(|p| table_to_grid_frame([p[0] / 100.0, p[1] / 100.0, p[2] / 100.0]))
        .collect()
}

/// Ordered microphone pairs `(i, j)` with `i < j`.
pub fn mic_pairs(num_mics: usize) -> Vec<(usize, usize)> {
    (0..num_mics)
        .flat_map(|i| (i + 1..num_mics).map(move |j| (i, j)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicArrayGeometry<T: Real> {
    positions: Vec<Vector3<T>>,
    speed_of_sound: T,
    sample_rate: T,
}

fn check_unit<T: Real>(s: &Vector3<T>) -> Result<()> {
    let n = s.norm().as_f64();
    if (n - 1.0).abs() > 1e-6 {
        return Err(Error::Domain(format!("direction has norm {n}, expected 1")));
    }
    Ok(())
}

impl<T: Real> MicArrayGeometry<T> {
    pub fn new(positions: Vec<Vector3<T>>, speed_of_sound: T, sample_rate: T) -> Result<Self> {
        if positions.len() < 2 {
            return Err(Error::Config("need at least two microphones".into()));
        }
        for (i, j) in mic_pairs(positions.len()) {
            if (positions[i] - positions[j]).norm() == T::zero() {
                return Err(Error::Config(format!("microphones {i} and {j} coincide")));
            }
        }
        if speed_of_sound <= T::zero() || sample_rate <= T::zero() {
            return Err(Error::Config(
                "speed of sound and sample rate must be positive".into(),
            ));
        }
        Ok(Self {
            positions,
            speed_of_sound,
            sample_rate,
        })
    }

    pub fn from_meters(positions: &[[f64; 3]], speed_of_sound: f64, sample_rate: f64) -> Result<Self> {
        Self::new(
            positions
                .iter()
                .map(|p| Vector3::new(T::lit(p[0]), T::lit(p[1]), T::lit(p[2])))
                .collect(),
            T::lit(speed_of_sound),
            T::lit(sample_rate),
        )
    }

    /// The default four-microphone array at 16 kHz and 343 m/s.
    pub fn default_array() -> Self {
        Self::from_meters(&default_mic_positions(), 343.0, 16000.0).expect("valid default array")
    }

    pub fn num_mics(&self) -> usize {
        self.positions.len()
    }

    pub fn num_pairs(&self) -> usize {
        self.num_mics() * (self.num_mics() - 1) / 2
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        mic_pairs(self.num_mics())
    }

    pub fn positions(&self) -> &[Vector3<T>] {
        &self.positions
    }

    pub fn speed_of_sound(&self) -> T {
        self.speed_of_sound
    }

    pub fn sample_rate(&self) -> T {
        self.sample_rate
    }

    fn samples_per_meter(&self) -> T {
        self.sample_rate / self.speed_of_sound
    }

    /// Largest inter-microphone distance in meters.
    pub fn aperture(&self) -> T {
        self.pairs()
            .into_iter()
            .map(|(i, j)| (self.positions[j] - self.positions[i]).norm())
            .fold(T::zero(), |a, b| a.max(b))
    }

    /// `(f_S / c) r_m . s`, in samples.
    pub fn tdoa_origin(&self, s: &Vector3<T>, m: usize) -> Result<T> {
        check_unit(s)?;
        let r = self
            .positions
            .get(m)
            .ok_or_else(|| Error::Domain(format!("no microphone {m}")))?;
        Ok(self.samples_per_meter() * r.dot(s))
    }

    /// `(f_S / c)(r_j - r_i) . s`, in samples.
    pub fn tdoa_pair(&self, s: &Vector3<T>, i: usize, j: usize) -> Result<T> {
        check_unit(s)?;
        if i == j {
            return Err(Error::Domain("pair needs two distinct microphones".into()));
        }
        if i.max(j) >= self.num_mics() {
            return Err(Error::Domain(format!("no microphone {}", i.max(j))));
        }
        Ok(self.pair_tdoa_unchecked(s, i, j))
    }

    fn pair_tdoa_unchecked(&self, s: &Vector3<T>, i: usize, j: usize) -> T {
        self.samples_per_meter() * (self.positions[j] - self.positions[i]).dot(s)
    }
}

/// Candidate directions on the closed upper halfsphere.
#[derive(Debug, Clone, PartialEq)]
pub struct DoaGrid<T: Real> {
    directions: Vec<Vector3<T>>,
    refinement_level: u32,
}

impl<T: Real> DoaGrid<T> {
    pub fn from_directions(directions: Vec<Vector3<T>>, refinement_level: u32) -> Result<Self> {
        for s in &directions {
            check_unit(s)?;
        }
        Ok(Self {
            directions,
            refinement_level,
        })
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn directions(&self) -> &[Vector3<T>] {
        &self.directions
    }

    pub fn direction(&self, q: usize) -> &Vector3<T> {
        &self.directions[q]
    }

    pub fn refinement_level(&self) -> u32 {
        self.refinement_level
    }

    /// Index of the grid direction closest in angle to `s`, lowest index on ties.
    pub fn nearest(&self, s: &Vector3<T>) -> usize {
        let mut best = 0;
        let mut best_dot = -T::max_value().unwrap();
        for (q, d) in self.directions.iter().enumerate() {
            let dot = d.dot(s);
            if dot > best_dot {
                best_dot = dot;
                best = q;
            }
        }
        best
    }

    /// CSV with header `q,x,y,z`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "q,x,y,z")?;
        for (q, s) in self.directions.iter().enumerate() {
            writeln!(out, "{q},{},{},{}", s.x, s.y, s.z)?;
        }
        Ok(())
    }
}

fn icosahedron() -> (Vec<[f64; 3]>, Vec<[usize; 3]>) {
    let h = 5f64.sqrt() / 5.0;
    let r = 2.0 * h;
    let mut v = vec![[0.0, 0.0, 1.0]];
    let tau = std::f64::consts::TAU;
    for i in 0..5 {
        let a = tau * i as f64 / 5.0;
        v.push([r * a.cos(), r * a.sin(), h]);
    }
    for i in 0..5 {
        let a = tau * i as f64 / 5.0 + tau / 10.0;
        v.push([r * a.cos(), r * a.sin(), -h]);
    }
    v.push([0.0, 0.0, -1.0]);
    let mut faces = Vec::with_capacity(20);
    for i in 0..5 {
        let j = (i + 1) % 5;
        faces.push([0, 1 + i, 1 + j]);
        faces.push([11, 6 + j, 6 + i]);
        faces.push([1 + i, 6 + i, 1 + j]);
        faces.push([1 + j, 6 + i, 6 + j]);
    }
    (v, faces)
}

fn normalize(p: [f64; 3]) -> [f64; 3] {
    let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    [p[0] / n, p[1] / n, p[2] / n]
}

/// Full-sphere geodesic points after `level` rounds of edge-midpoint subdivision.
fn geodesic_sphere(level: u32) -> Vec<[f64; 3]> {
    let (mut verts, mut faces) = icosahedron();
    for _ in 0..level {
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
        let mut mid = |a: usize, b: usize, verts: &mut Vec<[f64; 3]>| -> usize {
            *midpoints.entry((a.min(b), a.max(b))).or_insert_with(|| {
                let (p, q) = (verts[a], verts[b]);
                verts.push(normalize([p[0] + q[0], p[1] + q[1], p[2] + q[2]]));
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = mid(a, b, &mut verts);
            let bc = mid(b, c, &mut verts);
            let ca = mid(c, a, &mut verts);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    verts
}

/// Near-uniform directions on the closed halfsphere `z >= 0`.
///
/// An icosahedron is refined `level` times by edge-midpoint subdivision with
/// projection onto the unit sphere (shared midpoints are created once). The
/// sphere is then oriented with exactly one antipodal vertex pair on the
/// equator, which yields `10 * 4^level / 2 + 2` points; level 4 gives 1282.
pub fn build_doa_grid<T: Real>(refinement_level: u32) -> DoaGrid<T> {
    let (sin30, cos30) = (0.5f64, 3f64.sqrt() / 2.0);
    let directions = geodesic_sphere(refinement_level)
        .into_iter()
        .map(|[x, y, z]| {
            // Spin 30 degrees about z, then tilt the poles onto the equator.
            let (xr, yr) = (x * cos30 - y * sin30, x * sin30 + y * cos30);
            let p = [z, yr, -xr];
            if p[2].abs() < 1e-12 {
                [p[0], p[1], 0.0]
            } else {
                p
            }
        })
        .filter(|p| p[2] >= 0.0)
        .map(|p| Vector3::new(T::lit(p[0]), T::lit(p[1]), T::lit(p[2])))
        .collect();
    DoaGrid {
        directions,
        refinement_level,
    }
}

/// `W`: one row per candidate direction, columns pair-major then bin.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringMatrix<T: Real> {
    entries: DMatrix<Complex<T>>,
    pairs: Vec<(usize, usize)>,
    num_bins: usize,
}

impl<T: Real> SteeringMatrix<T> {
    pub fn from_parts(entries: DMatrix<Complex<T>>, pairs: Vec<(usize, usize)>, num_bins: usize) -> Result<Self> {
        if entries.ncols() != pairs.len() * num_bins {
            return Err(Error::Dimension(format!(
                "{} columns for {} pairs x {} bins",
                entries.ncols(),
                pairs.len(),
                num_bins
            )));
        }
        Ok(Self {
            entries,
            pairs,
            num_bins,
        })
    }

    pub fn entries(&self) -> &DMatrix<Complex<T>> {
        &self.entries
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn num_directions(&self) -> usize {
        self.entries.nrows()
    }

    /// Length `P (N/2 + 1)` of a cross-spectra vector.
    pub fn width(&self) -> usize {
        self.entries.ncols()
    }

    pub fn column(&self, pair: usize, bin: usize) -> usize {
        pair * self.num_bins + bin
    }

    /// `Re{W_q X}`.
    pub fn row_energy(&self, q: usize, x: &[Complex<T>]) -> T {
        self.entries
            .row(q)
            .iter()
            .zip(x)
            .fold(T::zero(), |acc, (w, v)| acc + w.re * v.re - w.im * v.im)
    }
}

/// `W_{q,i,j}[k] = exp(+2 pi sqrt(-1) k tau_{q,i,j} / N)`.
pub fn build_steering_matrix<T: Real>(
    geom: &MicArrayGeometry<T>,
    grid: &DoaGrid<T>,
    frame_size: usize,
) -> SteeringMatrix<T> {
    let pairs = geom.pairs();
    let num_bins = frame_size / 2 + 1;
    let two_pi_over_n = T::two_pi() / T::from_usize_lossy(frame_size);
    let mut entries = DMatrix::from_element(
        grid.len(),
        pairs.len() * num_bins,
        Complex::new(T::one(), T::zero()),
    );
    for (q, s) in grid.directions().iter().enumerate() {
        for (p, &(i, j)) in pairs.iter().enumerate() {
            let tau = geom.pair_tdoa_unchecked(s, i, j);
            for k in 1..num_bins {
                entries[(q, p * num_bins + k)] = cis(two_pi_over_n * T::from_usize_lossy(k) * tau);
            }
        }
    }
    SteeringMatrix {
        entries,
        pairs,
        num_bins,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::modulus;
    use proptest::prelude::*;

    fn table_geometry() -> MicArrayGeometry<f64> {
        let pos: Vec<[f64; 3]> = RESPEAKER_TABLE_CM
            .iter()
            .map(|p| [p[0] / 100.0, p[1] / 100.0, p[2] / 100.0])
            .collect();
        MicArrayGeometry::from_meters(&pos, 343.0, 16000.0).unwrap()
    }

    #[test]
    fn tdoa_hand_values() {
        let g = table_geometry();
        assert_eq!(g.tdoa_origin(&Vector3::new(0.0, 1.0, 0.0), 0).unwrap(), 0.0);
        let t = g.tdoa_origin(&Vector3::x(), 0).unwrap();
        assert!((t - 16000.0 / 343.0 * 0.029).abs() < 1e-12);
        assert!((t - 1.35277).abs() < 1e-5);
        let p = g.tdoa_pair(&Vector3::x(), 0, 2).unwrap();
        assert!((p + 2.70554).abs() < 1e-5);
        assert_eq!(g.tdoa_pair(&Vector3::z(), 0, 2).unwrap(), 0.0);
    }

    #[test]
    fn tdoa_scales_with_sample_rate() {
        let g = table_geometry();
        let g2 = MicArrayGeometry::new(g.positions().to_vec(), 343.0, 32000.0).unwrap();
        let s = Vector3::new(0.6, 0.0, 0.8);
        for m in 0..4 {
            assert_eq!(g2.tdoa_origin(&s, m).unwrap(), 2.0 * g.tdoa_origin(&s, m).unwrap());
        }
    }

    #[test]
    fn tdoa_errors() {
        let g = table_geometry();
        assert!(matches!(g.tdoa_origin(&Vector3::new(1.0, 1.0, 0.0), 0), Err(Error::Domain(_))));
        assert!(matches!(g.tdoa_pair(&Vector3::x(), 1, 1), Err(Error::Domain(_))));
        assert!(MicArrayGeometry::<f64>::from_meters(&[[0.0; 3]], 343.0, 16000.0).is_err());
        assert!(MicArrayGeometry::<f64>::from_meters(&[[0.0; 3], [0.0; 3]], 343.0, 16000.0).is_err());
        assert!(MicArrayGeometry::<f64>::from_meters(&[[0.0; 3], [1.0, 0.0, 0.0]], 0.0, 16000.0).is_err());
    }

    #[test]
    fn grid_has_expected_counts() {
        let g = build_doa_grid::<f64>(DEFAULT_GRID_LEVEL);
        assert_eq!(g.len(), 1282);
        assert_eq!(g.refinement_level(), 4);
        for level in 0..=4 {
            let g = build_doa_grid::<f64>(level);
            assert_eq!(g.len(), 5 * 4usize.pow(level) + 2, "level {level}");
        }
    }

    #[test]
    fn grid_points_are_unit_distinct_and_upper() {
        for level in 0..=4 {
            let g = build_doa_grid::<f64>(level);
            for s in g.directions() {
                assert!((s.norm() - 1.0).abs() < 1e-12);
                assert!(s.z >= -1e-12);
            }
            let d = g.directions();
            for a in 0..d.len() {
                for b in a + 1..d.len() {
                    assert!((d[a] - d[b]).norm() > 1e-9);
                }
            }
        }
    }

    #[test]
    fn grid_is_near_equidistant() {
        for level in 1..=4 {
            let g = build_doa_grid::<f64>(level);
            let d = g.directions();
            let nn: Vec<f64> = (0..d.len())
                .map(|a| {
                    (0..d.len())
                        .filter(|&b| b != a)
                        .map(|b| d[a].dot(&d[b]).clamp(-1.0, 1.0).acos())
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            let max = nn.iter().cloned().fold(0.0, f64::max);
            let min = nn.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(max / min <= 2.0, "level {level}: {}", max / min);
        }
    }

    #[test]
    fn grid_csv_export() {
        let g = build_doa_grid::<f64>(0);
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("q,x,y,z\n"));
        assert_eq!(text.lines().count(), g.len() + 1);
    }

    #[test]
    fn steering_matrix_structure() {
        let geom = MicArrayGeometry::<f64>::default_array();
        let grid = build_doa_grid::<f64>(2);
        let w = build_steering_matrix(&geom, &grid, 256);
        assert_eq!(w.num_directions(), grid.len());
        assert_eq!(w.width(), 6 * 129);
        for q in 0..grid.len() {
            for p in 0..6 {
                assert_eq!(w.entries()[(q, w.column(p, 0))], Complex::new(1.0, 0.0));
            }
        }
        assert!(w.entries().iter().all(|z| (modulus(*z) - 1.0).abs() < 1e-12));
        for (q, s) in grid.directions().iter().enumerate() {
            let (i, j) = w.pairs()[1];
            let tau = geom.tdoa_pair(s, i, j).unwrap();
            let k = 17;
            let expect = cis(2.0 * std::f64::consts::PI * k as f64 * tau / 256.0);
            assert!((w.entries()[(q, w.column(1, k))] - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn broadside_row_is_all_ones() {
        // The zenith is orthogonal to every baseline of the planar default array.
        let geom = MicArrayGeometry::<f64>::default_array();
        let grid = DoaGrid::from_directions(vec![Vector3::z()], 0).unwrap();
        let w = build_steering_matrix(&geom, &grid, 64);
        assert!(w.entries().iter().all(|z| (*z - Complex::new(1.0, 0.0)).norm() < 1e-15));
    }

    #[test]
    fn opposite_direction_conjugates_row() {
        let geom = table_geometry();
        let s = Vector3::new(0.48, 0.6, 0.64);
        let grid = DoaGrid::from_directions(vec![s, -s, Vector3::new(-s.x, s.y, s.z)], 0).unwrap();
        let w = build_steering_matrix(&geom, &grid, 64);
        for c in 0..w.width() {
            assert!((w.entries()[(1, c)] - w.entries()[(0, c)].conj()).norm() < 1e-12);
        }
        // Flipping x conjugates the pairs whose baseline lies along x, (0,2) and (1,3),
        // and leaves the z baselines (0,1) and (2,3) untouched.
        for (p, &(i, j)) in w.pairs().iter().enumerate() {
            for k in 0..33 {
                let c = w.column(p, k);
                let (a, b) = (w.entries()[(0, c)], w.entries()[(2, c)]);
                match (i, j) {
                    (0, 2) | (1, 3) => assert!((b - a.conj()).norm() < 1e-12),
                    (0, 1) | (2, 3) => assert!((b - a).norm() < 1e-12),
                    _ => {}
                }
            }
        }
    }

    #[test]
    fn tdoa_bounded_by_aperture() {
        let geom = table_geometry();
        let bound = 16000.0 / 343.0 * geom.aperture();
        assert!((bound - 16000.0 / 343.0 * 0.082).abs() < 0.01);
        assert!(bound <= 3.83);
        for s in build_doa_grid::<f64>(3).directions() {
            for (i, j) in geom.pairs() {
                assert!(geom.tdoa_pair(s, i, j).unwrap().abs() <= bound + 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn pair_tdoa_is_difference_and_antisymmetric(
            az in 0.0f64..std::f64::consts::TAU,
            el in -1.5f64..1.5,
            i in 0usize..4,
            j in 0usize..4,
        ) {
            prop_assume!(i != j);
            let g = table_geometry();
            let s = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            let tij = g.tdoa_pair(&s, i, j).unwrap();
            let diff = g.tdoa_origin(&s, j).unwrap() - g.tdoa_origin(&s, i).unwrap();
            prop_assert!((tij - diff).abs() < 1e-12);
            prop_assert!((tij + g.tdoa_pair(&s, j, i).unwrap()).abs() < 1e-12);
        }
    }
}
