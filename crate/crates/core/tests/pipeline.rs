use neundiff::detection::{detect, local_minima, DetectionConfig, DetectionParams};
use neundiff::diffusion::{pm_run, DiffusionParams};
use neundiff::raster::{load_raster, save_raster};
use neundiff::synth::{generate, SynthSpec};
use neundiff::Raster;
use proptest::prelude::*;

fn small_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        width: 160,
        height: 160,
        n_cells: 12,
        speckle_count: 5,
        seed,
        ..Default::default()
    }
}

fn params(threshold: f64, min_blob_area: usize) -> DetectionParams {
    DetectionParams::new(DetectionConfig {
        intensity_threshold: threshold,
        min_blob_area,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn synth_is_deterministic_per_seed() {
    let a = generate(&small_spec(5)).unwrap();
    let b = generate(&small_spec(5)).unwrap();
    let c = generate(&small_spec(6)).unwrap();
    assert_eq!(a.raster, b.raster);
    assert_eq!(a.truth, b.truth);
    assert_ne!(a.raster, c.raster);
}

#[test]
fn every_detection_is_a_candidate() {
    let s = generate(&small_spec(1)).unwrap();
    let p = params(200.0, 30);
    let minima = local_minima(&pm_run(&s.raster, p.diffusion()));
    let d = detect(&s.raster, &p);
    assert!(d.points.iter().all(|q| minima.points().contains(&q)));
    assert_eq!(d.raw_minima(), minima.len());
}

#[test]
fn detection_survives_png_round_trip() {
    let s = generate(&small_spec(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scene.png");
    save_raster(&s.raster, &path).unwrap();
    let loaded = load_raster(&path).unwrap();
    let quantised = Raster::new(
        s.raster.width(),
        s.raster.height(),
        s.raster.to_u8().into_iter().map(f64::from).collect(),
    )
    .unwrap();
    let p = params(205.0, 60);
    assert_eq!(detect(&loaded, &p).points, detect(&quantised, &p).points);
}

#[test]
fn diffusion_is_deterministic() {
    let s = generate(&small_spec(3)).unwrap();
    let p = DiffusionParams::default();
    assert_eq!(pm_run(&s.raster, &p), pm_run(&s.raster.clone(), &p));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn raising_threshold_never_loses_detections(seed in 0u64..1000, lo in 100.0f64..200.0, step in 0.0f64..50.0) {
        let s = generate(&small_spec(seed)).unwrap();
        let strict = detect(&s.raster, &params(lo, 60)).points;
        let loose = detect(&s.raster, &params((lo + step).min(255.0), 60)).points;
        prop_assert!(strict.iter().all(|p| loose.points().contains(&p)));
    }

    #[test]
    fn raising_min_area_never_adds_detections(seed in 0u64..1000, area in 1usize..200, extra in 0usize..200) {
        let s = generate(&small_spec(seed)).unwrap();
        let small = detect(&s.raster, &params(205.0, area)).points;
        let large = detect(&s.raster, &params(205.0, area + extra)).points;
        prop_assert!(large.iter().all(|p| small.points().contains(&p)));
    }

    #[test]
    fn truth_lies_inside_the_raster(seed in 0u64..1000) {
        let s = generate(&small_spec(seed)).unwrap();
        prop_assert!(s.truth.check_bounds(160, 160).is_ok());
        prop_assert_eq!(s.truth.len(), 12);
        prop_assert!(s.raster.min() >= 0.0 && s.raster.max() <= 255.0);
    }
}
