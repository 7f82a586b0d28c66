use std::sync::{Arc, OnceLock};
use std::time::Instant;

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_chacha::ChaCha8Rng;

use sslkit::correlation::{CorrelationSet, CrossSpectraVector};
use sslkit::dsvd::{brute_force_srp, srp_energies, DsvdPhat, SearchBackend, SvdIndex};
use sslkit::estimate::Localizer;
use sslkit::eval::{angle_error, prepare_scene, MethodSuite, PipelineConfig, SceneConfig};
use sslkit::geometry::MicArrayGeometry;
use sslkit::simroom::{sample_free_field, ArrayMount};
use sslkit::MultichannelSignal;

fn suite() -> &'static MethodSuite {
    static SUITE: OnceLock<MethodSuite> = OnceLock::new();
    SUITE.get_or_init(|| {
        let t = Instant::now();
        let s = MethodSuite::build(MicArrayGeometry::default_array(), PipelineConfig::default()).unwrap();
        println!("K = {} in {:?}", s.index.rank(), t.elapsed());
        s
    })
}

fn random_phasors(rng: &mut ChaCha8Rng, n: usize) -> CrossSpectraVector<f64> {
    CrossSpectraVector {
        values: (0..n)
            .map(|_| Complex::from_polar(1.0, rng.random_range(0.0..std::f64::consts::TAU)))
            .collect(),
    }
}

#[test]
fn default_configuration_rank() {
    let idx = &suite().index;
    assert_eq!(idx.rank(), 23);
    assert_eq!(idx.grid().len(), 1282);
    assert_eq!(idx.steering().width(), 6 * 129);
    let svd = idx.svd();
    assert!(svd.satisfies_energy_bound(23));
    assert!(!svd.satisfies_energy_bound(22));
    assert!((svd.total_energy - (1282 * 774) as f64).abs() < 1e-6);
}

#[test]
fn tree_search_matches_dense_srp() {
    let idx = &suite().index;
    let scan = idx.with_backend(SearchBackend::LinearScan);
    let bound = 10.0 * idx.delta().sqrt() * idx.steering().width() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut agree = 0;
    for i in 0..1000 {
        let x = random_phasors(&mut rng, idx.steering().width());
        let est = idx.localize(&x, i).unwrap().unwrap();
        let (q, y) = brute_force_srp(idx.steering(), &x);
        let z = idx.project(&x).unwrap();
        assert_eq!(scan.nearest_direction(&z), Some(est.grid_index));
        if est.grid_index == q {
            agree += 1;
        } else {
            assert!((y - est.amplitude).abs() <= bound, "{} vs {}", y, est.amplitude);
        }
        let dense = srp_energies(idx.steering(), &x);
        assert!((dense[est.grid_index] - est.amplitude).abs() < 1e-9);
    }
    println!("tree and dense argmax agree on {agree}/1000");
    assert!(agree >= 950, "{agree}/1000");
}

#[test]
fn conjugate_rows_are_recovered() {
    let idx = &suite().index;
    let width = idx.steering().width() as f64;
    for q in (0..idx.grid().len()).step_by(37) {
        let x = CrossSpectraVector {
            values: idx.steering().entries().row(q).iter().map(|z| z.conj()).collect(),
        };
        let est = idx.localize(&x, 0).unwrap().unwrap();
        assert_eq!(est.grid_index, q);
        assert!((est.amplitude - width).abs() < 1e-9);
    }
}

#[test]
fn serialized_index_is_byte_identical() {
    let idx = &suite().index;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("index.bin");
    idx.write_to(std::fs::File::create(&path).unwrap()).unwrap();
    let back = SvdIndex::<f64>::read_from(std::fs::File::open(&path).unwrap()).unwrap();
    assert_eq!(back.rank(), 23);
    let mut a = Vec::new();
    let mut b = Vec::new();
    idx.write_to(&mut a).unwrap();
    back.write_to(&mut b).unwrap();
    assert_eq!(a, std::fs::read(&path).unwrap());
    assert_eq!(a, b);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let x = random_phasors(&mut rng, idx.steering().width());
        assert_eq!(idx.localize(&x, 0).unwrap(), back.localize(&x, 0).unwrap());
    }
}

#[test]
fn noiseless_free_field_source_lands_on_its_grid_point() {
    let s = suite();
    let dirs: Vec<[f64; 3]> = s.grid.directions().iter().map(|d| [d.x, d.y, d.z]).collect();
    let cfg = SceneConfig { duration_secs: 1.5, ..SceneConfig::default() };
    for scenario in sample_free_field(3, f64::INFINITY, &dirs, 2.0, ArrayMount::Upright, 8) {
        let scene = prepare_scene(&scenario, &s.geometry, &cfg).unwrap();
        let q = s.grid.nearest(&scene.true_doa);
        assert!((s.grid.direction(q) - scene.true_doa).norm() < 1e-9);
        let frames = s.stft.analyze(&scene.signal).unwrap();
        let mut loc = DsvdPhat::plain(s.index.clone(), s.config.alpha).unwrap();
        let mut hits = 0;
        let mut total = 0;
        for (l, f) in frames.iter().enumerate() {
            let est = loc.process(f).unwrap();
            if l >= s.default_warmup() {
                let est = est.expect("reverberant tail keeps the state non-zero");
                total += 1;
                hits += usize::from(est.grid_index == q);
            }
        }
        assert!(hits as f64 >= 0.95 * total as f64, "{hits}/{total}");
    }
}

fn median_amplitude(loc: &mut DsvdPhat<f64>, frames: &[sslkit::SpectraFrame], warmup: usize) -> f64 {
    let mut amps: Vec<f64> = frames
        .iter()
        .enumerate()
        .filter_map(|(l, f)| loc.process(f).unwrap().filter(|_| l >= warmup))
        .map(|e| e.amplitude)
        .collect();
    amps.sort_by(f64::total_cmp);
    amps[amps.len() / 2]
}

fn white_noise(len: usize, seed: u64) -> MultichannelSignal {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..4)
        .map(|_| (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    MultichannelSignal::new(samples, 16000.0).unwrap()
}

#[test]
fn white_noise_only_amplitude_is_small() {
    let s = suite();
    let noise = s.noise_correlation(&white_noise(128000, 1)).unwrap();
    let frames = s.stft.analyze(&white_noise(64000, 2)).unwrap();
    let mut loc = DsvdPhat::new(s.index.clone(), noise).unwrap();
    let median = median_amplitude(&mut loc, &frames, s.default_warmup());
    // Reference: the SRP peak of structureless unit phasors.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut peaks: Vec<f64> = (0..200)
        .map(|_| brute_force_srp(s.index.steering(), &random_phasors(&mut rng, s.index.steering().width())).1)
        .collect();
    peaks.sort_by(f64::total_cmp);
    let reference = peaks[100];
    let width = s.index.steering().width() as f64;
    println!("white noise-only median amplitude {median:.2}, random phasor peak {reference:.2}, of {width}");
    assert!(median < 1.25 * reference);
    assert!(median < 0.1 * width);
}

#[test]
fn fan_noise_only_amplitude_drops_with_subtraction() {
    let s = suite();
    let cfg = SceneConfig::default();
    let noise = s.noise_correlation(&MultichannelSignal::new(cfg.noise.render(&s.geometry, 128000, 1), 16000.0).unwrap()).unwrap();
    let input = MultichannelSignal::new(cfg.noise.render(&s.geometry, 64000, 2), 16000.0).unwrap();
    let frames = s.stft.analyze(&input).unwrap();
    let dsvd = median_amplitude(&mut DsvdPhat::new(s.index.clone(), noise).unwrap(), &frames, s.default_warmup());
    let plain = median_amplitude(&mut DsvdPhat::plain(s.index.clone(), s.config.alpha).unwrap(), &frames, s.default_warmup());
    println!("fan noise-only median amplitude {dsvd:.2}, without subtraction {plain:.2}");
    assert!(dsvd < plain);
    assert!(dsvd < 0.2 * s.index.steering().width() as f64);
}

#[test]
fn noise_subtraction_helps_at_low_snr() {
    let s = suite();
    let dirs: Vec<[f64; 3]> = s.grid.directions().iter().map(|d| [d.x, d.y, d.z]).collect();
    let cfg = SceneConfig::default();
    let (mut dsvd, mut plain) = (0usize, 0usize);
    for scenario in sample_free_field(4, -5.0, &dirs, 2.0, ArrayMount::Upright, 21) {
        let scene = prepare_scene(&scenario, &s.geometry, &cfg).unwrap();
        let frames = s.stft.analyze(&scene.signal).unwrap();
        let noise = s.noise_correlation(&scene.calibration).unwrap();
        let zero = CorrelationSet::new(4, 129, s.config.alpha).unwrap();
        for (rnn, count) in [(noise, &mut dsvd), (zero, &mut plain)] {
            let mut loc = DsvdPhat::new(s.index.clone(), rnn).unwrap();
            for (l, f) in frames.iter().enumerate() {
                if let Some(e) = loc.process(f).unwrap() {
                    if l >= s.default_warmup() && angle_error(&e.direction, &scene.true_doa).unwrap() <= 0.2 {
                        *count += 1;
                    }
                }
            }
        }
    }
    println!("valid frames: dsvd {dsvd}, plain {plain}");
    assert!(dsvd >= plain);
}

#[test]
fn shared_index_across_threads() {
    let idx: Arc<SvdIndex<f64>> = suite().index.clone();
    let handles: Vec<_> = (0..3)
        .map(|t| {
            let idx = idx.clone();
            std::thread::spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(t);
                let x = random_phasors(&mut rng, idx.steering().width());
                idx.localize(&x, 0).unwrap().unwrap()
            })
        })
        .collect();
    for (t, h) in handles.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
        let x = random_phasors(&mut rng, idx.steering().width());
        assert_eq!(h.join().unwrap(), idx.localize(&x, 0).unwrap().unwrap());
    }
}
