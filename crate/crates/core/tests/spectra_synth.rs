use proptest::prelude::*;
use weaksig::catalog::{assign_label, carbon_ratio, ClassLabel};
use weaksig::spectra_synth::*;
use weaksig::Error;

fn single_line_cfg(center: f64) -> GeneratorConfig {
    GeneratorConfig {
        line_catalog: vec![Line { center, depth: 0.6, width: 3.0, driver: LineDriver::CH }],
        ..Default::default()
    }
}

fn solar(rv: f64) -> StellarParams {
    StellarParams { t_eff: 5800.0, log_g: 4.4, fe_h: 0.0, c_h: 0.0, rv }
}

fn nearest_index(xs: &[f64], target: f64) -> usize {
    (0..xs.len()).min_by(|&a, &b| (xs[a] - target).abs().total_cmp(&(xs[b] - target).abs())).unwrap()
}

fn argmin(xs: &[f64]) -> usize {
    (0..xs.len()).min_by(|&a, &b| xs[a].total_cmp(&xs[b])).unwrap()
}

#[test]
fn noise_free_line_free_flux_is_the_continuum() {
    let cfg = GeneratorConfig { line_catalog: vec![], ..Default::default() };
    let p = solar(37.0);
    let s = generate_spectrum(&p, f64::INFINITY, &cfg, 1).unwrap();
    let wl = cfg.grid.wavelengths();
    for (i, f) in s.fluxes.iter().enumerate() {
        let expect = continuum(wl[i] / (1.0 + p.rv / C_KM_S), p.t_eff, &cfg.grid);
        assert!(*f > 0.0);
        assert_eq!(*f, expect);
    }
}

#[test]
fn unshifted_line_minimum_sits_at_its_center() {
    let cfg = single_line_cfg(4300.0);
    let s = generate_spectrum(&solar(0.0), f64::INFINITY, &cfg, 1).unwrap();
    assert_eq!(argmin(&s.fluxes), nearest_index(&s.wavelengths, 4300.0));
}

#[test]
fn tenth_of_light_speed_moves_line_to_4730() {
    let cfg = single_line_cfg(4300.0);
    let wl = cfg.grid.wavelengths();
    let (flux, _) = noise_free_flux(&wl, &solar(0.0), C_KM_S / 10.0, &cfg).unwrap();
    let deepest = argmin(&flux);
    assert_eq!(deepest, nearest_index(&wl, 4730.0));
    assert!((wl[deepest] - 4730.0).abs() <= 0.5);
}

#[test]
fn out_of_range_params_and_bad_snr_are_rejected() {
    let cfg = GeneratorConfig::default();
    let mut p = solar(0.0);
    p.t_eff = 12000.0;
    assert!(matches!(generate_spectrum(&p, 50.0, &cfg, 0), Err(Error::Validation(_))));
    assert!(matches!(generate_spectrum(&solar(0.0), 0.0, &cfg, 0), Err(Error::Validation(_))));
    assert!(matches!(generate_spectrum(&solar(0.0), -3.0, &cfg, 0), Err(Error::Validation(_))));
    assert!(noise_free_flux(&[5000.0], &solar(0.0), C_KM_S, &cfg).is_err());
}

fn flat(fluxes: Vec<f64>) -> RawSpectrum {
    let wl = (0..fluxes.len()).map(|i| 4000.0 + i as f64).collect();
    RawSpectrum::new(wl, fluxes, solar(0.0), 10.0, None).unwrap()
}

#[test]
fn measured_snr_anchors() {
    let ones = vec![1.0; 200];
    assert_eq!(measure_snr(&flat(ones.clone()), &ones).unwrap(), SnrEstimate::NoiseFree);
    // residual alternating ±0.02 has population std 0.02
    let f: Vec<f64> = (0..200).map(|i| if i % 2 == 0 { 1.02 } else { 0.98 }).collect();
    match measure_snr(&flat(f), &ones).unwrap() {
        SnrEstimate::Finite(v) => assert!((v - 50.0).abs() < 1e-9),
        other => panic!("{other:?}"),
    }
}

#[test]
fn doubling_noise_halves_measured_snr() {
    let cfg = GeneratorConfig::default();
    let p = solar(0.0);
    let wl = cfg.grid.wavelengths();
    let (clean, cont) = noise_free_flux(&wl, &p, p.rv, &cfg).unwrap();
    let noisy = generate_spectrum(&p, 40.0, &cfg, 5).unwrap();
    let doubled: Vec<f64> = noisy.fluxes.iter().zip(&clean).map(|(f, c)| c + 2.0 * (f - c)).collect();
    let model = |s: &RawSpectrum| -> f64 {
        // residual against the noise-free model, scaled back to the continuum
        let r: Vec<f64> = s.fluxes.iter().zip(&clean).zip(&cont).map(|((f, c), k)| k + (f - c)).collect();
        match measure_snr(&flat(r), &cont).unwrap() {
            SnrEstimate::Finite(v) => v,
            SnrEstimate::NoiseFree => f64::INFINITY,
        }
    };
    let a = model(&noisy);
    let b = model(&flat(doubled));
    assert!((a / b - 2.0).abs() < 1e-9, "{a} vs {b}");
}

#[test]
fn dataset_class_counts_follow_apportionment() {
    let cfg = GeneratorConfig { n_samples: 1316, ..Default::default() };
    let data = generate_dataset(&cfg).unwrap();
    let mut counts = [0usize; 3];
    for s in &data {
        counts[s.class_label.unwrap().code()] += 1;
    }
    for (c, target) in counts.iter().zip([664, 23, 629]) {
        assert!(c.abs_diff(target) <= 1, "{counts:?}");
    }
}

#[test]
fn single_class_proportions_label_everything_nmp() {
    let cfg = GeneratorConfig { n_samples: 30, class_proportions: [1.0, 0.0, 0.0], ..Default::default() };
    assert!(generate_dataset(&cfg).unwrap().iter().all(|s| s.class_label == Some(ClassLabel::Nmp)));
}

#[test]
fn starved_class_is_infeasible() {
    let cfg = GeneratorConfig { n_samples: 40, ..Default::default() };
    assert!(matches!(generate_dataset(&cfg), Err(Error::Validation(_))));
}

#[test]
fn sixty_percent_low_snr_mixture_is_reproduced() {
    let cfg = GeneratorConfig {
        n_samples: 2000,
        snr_mixture: vec![
            SnrComponent { lo: 5.0, hi: 50.0, weight: 0.6 },
            SnrComponent { lo: 50.0, hi: 300.0, weight: 0.4 },
        ],
        grid: Grid { min: 3800.0, max: 9100.0, n_points: 64 },
        ..Default::default()
    };
    let data = generate_dataset(&cfg).unwrap();
    let frac = data.iter().filter(|s| s.snr < 50.0).count() as f64 / data.len() as f64;
    assert!((0.58..=0.62).contains(&frac), "{frac}");
    let shipped = GeneratorConfig::default();
    assert!(shipped.snr_mass_below(50.0) > 0.55);
}

#[test]
fn every_sample_satisfies_the_labeling_rule() {
    let cfg = GeneratorConfig { n_samples: 400, grid: Grid { min: 3800.0, max: 9100.0, n_points: 64 }, ..Default::default() };
    for s in generate_dataset(&cfg).unwrap() {
        let p = s.params;
        p.validate().unwrap();
        assert_eq!(Some(assign_label(p.fe_h, carbon_ratio(p.c_h, p.fe_h).unwrap()).unwrap()), s.class_label);
    }
}

#[test]
fn datasets_are_bit_identical_under_a_fixed_seed() {
    let cfg = GeneratorConfig { n_samples: 200, grid: Grid { min: 3800.0, max: 9100.0, n_points: 256 }, ..Default::default() };
    let a = generate_dataset(&cfg).unwrap();
    let b = generate_dataset(&cfg).unwrap();
    let bits = |d: &[RawSpectrum]| d.iter().flat_map(|s| s.fluxes.iter().map(|f| f.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a, b);
    let c = generate_dataset(&GeneratorConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn sample_params_respects_class_and_ranges() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    for class in ClassLabel::ALL {
        for _ in 0..200 {
            let p = sample_params(class, &mut rng).unwrap();
            p.validate().unwrap();
            assert_eq!(assign_label(p.fe_h, p.c_fe()).unwrap(), class);
        }
    }
}

proptest! {
    #[test]
    fn lower_snr_strictly_increases_residual_spread(seed in 0u64..1000, snr in 5.0f64..200.0, factor in 1.05f64..4.0) {
        let cfg = GeneratorConfig { grid: Grid { min: 3800.0, max: 9100.0, n_points: 256 }, ..Default::default() };
        let p = solar(20.0);
        let (clean, _) = noise_free_flux(&cfg.grid.wavelengths(), &p, p.rv, &cfg).unwrap();
        let spread = |snr: f64| {
            let s = generate_spectrum(&p, snr, &cfg, seed).unwrap();
            let r: Vec<f64> = s.fluxes.iter().zip(&clean).map(|(f, c)| f - c).collect();
            let m = r.iter().sum::<f64>() / r.len() as f64;
            r.iter().map(|v| (v - m).powi(2)).sum::<f64>()
        };
        prop_assert!(spread(snr / factor) > spread(snr));
    }

    #[test]
    fn generated_flux_is_finite_and_shaped(seed in 0u64..500, snr in 5.0f64..300.0) {
        let cfg = GeneratorConfig { grid: Grid { min: 3800.0, max: 9100.0, n_points: 128 }, ..Default::default() };
        let s = generate_spectrum(&solar(-120.0), snr, &cfg, seed).unwrap();
        prop_assert_eq!(s.fluxes.len(), 128);
        prop_assert!(s.fluxes.iter().all(|f| f.is_finite()));
        prop_assert!(s.wavelengths.windows(2).all(|w| w[1] > w[0]));
    }
}

#[test]
fn config_file_overrides_defaults() {
    let kv = weaksig::kv::KvMap::parse(
        "n_samples = 50\nseed = 4\nsnr_mixture = 5:50:0.6,50:300:0.4\ngrid = 4000,8000,128\nlines = 4300:0.5:2:c_h\n",
        "test",
    )
    .unwrap();
    let cfg = GeneratorConfig::from_kv(kv).unwrap();
    assert_eq!(cfg.n_samples, 50);
    assert_eq!(cfg.seed, 4);
    assert_eq!(cfg.grid, Grid { min: 4000.0, max: 8000.0, n_points: 128 });
    assert_eq!(cfg.line_catalog.len(), 1);
    assert!((cfg.snr_mass_below(50.0) - 0.6).abs() < 1e-12);
    let bad = weaksig::kv::KvMap::parse("snr_mixture = 5:50:0.5\n", "test").unwrap();
    assert!(GeneratorConfig::from_kv(bad).is_err());
}
