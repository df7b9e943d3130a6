mod common;

use common::rng;
use proptest::prelude::*;
use rand_distr::{Distribution, Normal};
use tempro_core::container::write_dataset;
use tempro_core::profile::{correlation, TemporalProfile};
use tempro_core::simulator::{
    apply_noise, generate_dataset, measure_snr, sample_noise, target_mask, BackgroundClass,
    BackgroundSpec, DatasetSpec, GroupSpec, NoiseConfig, NoiseSpec, Split, TargetSpec,
};
use tempro_core::Tensor;

fn moments(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[test]
fn noise_components_match_their_distributions() {
    let cfg = NoiseConfig {
        sigma_n: 8.0,
        sigma_g: 0.15,
        sigma_o: 1.3,
        seed: 21,
    };
    let f = sample_noise(&cfg, 1, 1000, 1000).unwrap();
    for (name, v, mean, std) in [
        ("temporal", &f.temporal, 0.0, cfg.sigma_n),
        ("gain", &f.gain, 1.0, cfg.sigma_g / 3f64.sqrt()),
        ("offset", &f.offset, 0.0, cfg.sigma_o),
    ] {
        assert_eq!(v.len(), 1_000_000);
        let (m, s) = moments(v);
        // Relative to the mean where it is nonzero, otherwise to the spread.
        let mean_err = if mean == 0.0 {
            m.abs() / std
        } else {
            (m - mean).abs() / mean
        };
        assert!(mean_err < 0.02, "{name}: mean {m}");
        assert!((s - std).abs() / std < 0.05, "{name}: std {s} vs {std}");
    }
    let (m, _) = moments(&f.temporal);
    assert!(m.abs() < 0.05 * cfg.sigma_n);
}

#[test]
fn fixed_pattern_noise_is_constant_in_time() {
    let (t, h, w) = (16, 5, 7);
    let scene = Tensor::from_fn(&[t, h, w], |i| 50.0 + (i % (h * w)) as f64);
    let cfg = NoiseConfig {
        sigma_n: 0.0,
        sigma_g: 0.15,
        sigma_o: 1.3,
        seed: 3,
    };
    let noisy = apply_noise(&scene, &cfg).unwrap();
    for p in 0..h * w {
        let first = noisy.data()[p];
        assert!((1..t).all(|f| noisy.data()[f * h * w + p] == first));
    }
    assert_ne!(noisy, scene);
}

fn white_profile(seed: u64, n: usize) -> TemporalProfile {
    let mut r = rng(seed);
    let d = Normal::new(0.0, 1.0).unwrap();
    TemporalProfile::from_values((0..n).map(|_| d.sample(&mut r)).collect())
}

#[test]
fn white_noise_correlation_stays_below_the_bound() {
    let n = 1000;
    let bound = 3.0 / (n as f64).sqrt();
    let mut within = vec![0usize; 2 * n - 1];
    for seed in 0..100 {
        let c = correlation(&white_profile(seed, n)).unwrap();
        let r0 = c.zero_lag();
        for (k, v) in c.values.iter().enumerate() {
            if (v / r0).abs() < bound {
                within[k] += 1;
            }
        }
    }
    for (k, &count) in within.iter().enumerate() {
        if k != n - 1 {
            assert!(
                count >= 95,
                "lag {}: bound held in {count} of 100 seeds",
                k as i64 - (n as i64 - 1)
            );
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn correlation_is_symmetric_with_its_peak_at_zero(values in prop::collection::vec(-100.0f64..100.0, 1..80)) {
        let c = correlation(&TemporalProfile::from_values(values)).unwrap();
        let n = c.values.len();
        for k in 0..n {
            prop_assert_eq!(c.values[k], c.values[n - 1 - k]);
            prop_assert_eq!(c.lags[k], -c.lags[n - 1 - k]);
        }
        let r0 = c.zero_lag();
        prop_assert!(c.values.iter().all(|&v| v <= r0 * (1.0 + 1e-12)));
    }
}

fn group(name: &str, count: usize, split: Split, snr: [f64; 2]) -> GroupSpec {
    GroupSpec {
        name: name.into(),
        count,
        split,
        background: BackgroundSpec {
            classes: vec![
                BackgroundClass::Constant,
                BackgroundClass::Cloud,
                BackgroundClass::Flicker,
            ],
            level: [80.0, 120.0],
            contrast: [4.0, 10.0],
            cloud_scale: 4.0,
            max_drift: 0.3,
            flicker_period: [6.0, 20.0],
        },
        targets: TargetSpec {
            count: [1, 2],
            sigma: [0.7, 1.2],
            speed: [0.2, 1.0],
            snr,
            min_duration: 0.5,
            margin: 3.0,
        },
        noise: NoiseSpec {
            sigma_n: 4.0,
            sigma_g: 0.05,
            sigma_o: 1.0,
        },
    }
}

fn small_spec() -> DatasetSpec {
    DatasetSpec {
        frames: 12,
        height: 32,
        width: 32,
        groups: vec![
            group("train", 3, Split::Train, [2.0, 6.0]),
            group("dim", 3, Split::Test, [1.5, 3.0]),
        ],
    }
}

#[test]
fn same_seed_gives_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let spec = small_spec();
    let fa = write_dataset(a.path(), &generate_dataset(&spec, 7).unwrap()).unwrap();
    let fb = write_dataset(b.path(), &generate_dataset(&spec, 7).unwrap()).unwrap();
    assert_eq!(fa.len(), fb.len());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.file_name(), y.file_name());
        assert_eq!(
            std::fs::read(x).unwrap(),
            std::fs::read(y).unwrap(),
            "{x:?}"
        );
    }
    let other = generate_dataset(&spec, 8).unwrap();
    assert_ne!(
        other[0].sequence.frames,
        generate_dataset(&spec, 7).unwrap()[0].sequence.frames
    );
}

#[test]
fn dim_groups_measure_at_most_snr_three() {
    let data = generate_dataset(&small_spec(), 3).unwrap();
    let snrs: Vec<f64> = data
        .iter()
        .filter(|g| g.group == "dim")
        .map(|g| measure_snr(&g.sequence).unwrap())
        .collect();
    let mean = snrs.iter().sum::<f64>() / snrs.len() as f64;
    assert!(mean <= 3.0 + 0.5, "{snrs:?}");
}

#[test]
fn every_visible_track_frame_has_mask_pixels() {
    let spec = small_spec();
    for g in generate_dataset(&spec, 5).unwrap() {
        let seq = &g.sequence;
        let masks = seq.masks.as_ref().unwrap();
        let [t, h, w] = seq.dims();
        for track in &seq.tracks {
            for f in 0..t {
                let (cx, cy) = track.center(f);
                let inside = cx >= 0.0 && cy >= 0.0 && cx <= (w - 1) as f64 && cy <= (h - 1) as f64;
                if track.active(f) && inside {
                    let own = target_mask(track, f, h, w);
                    assert!(own.iter().any(|&m| m), "{} frame {f}", seq.name);
                    let frame = masks.frame(f);
                    assert!(own.iter().zip(frame).all(|(&o, &m)| !o || m == 1.0));
                }
            }
        }
    }
}
