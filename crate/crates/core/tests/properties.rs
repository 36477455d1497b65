use mmccd_core::diffusion::{ddim_reverse_step, ddpm_reverse_step, forward_step, marginal_sample, posterior_params, ReverseNoise};
use mmccd_core::masking::{aggregate_anomaly, apply_mask_noise, apply_strip_noise};
use mmccd_core::metrics::{assd, auc, dice, jaccard, precision, recall};
use mmccd_core::normalize::{brain_stats, normalize_volume, Modality};
use mmccd_core::phantom::{generate_phantom, AnomalyMode, PhantomSpec};
use mmccd_core::resample::{resample_bilinear, resample_nearest};
use mmccd_core::slices::{split_subjects, Split};
use mmccd_core::{BinaryMask, Image, MaskSet, MaskStrip, NoiseSchedule, Orientation};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn schedule() -> impl Strategy<Value = NoiseSchedule> {
    (1usize..200, 1e-5f64..0.05, 0.0f64..0.3).prop_map(|(t, b0, span)| {
        NoiseSchedule::linear(t, b0, (b0 + span).min(0.999)).unwrap()
    })
}

fn image(h: usize, w: usize) -> impl Strategy<Value = Image> {
    proptest::collection::vec(-3.0f64..3.0, h * w).prop_map(move |v| Image::from_vec(h, w, v).unwrap())
}

fn mask(h: usize, w: usize) -> impl Strategy<Value = BinaryMask> {
    proptest::collection::vec(any::<bool>(), h * w).prop_map(move |v| BinaryMask::from_vec(h, w, v).unwrap())
}

fn normal_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    Image::from_fn(h, w, |_, _| rng.sample(StandardNormal))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_invariants(s in schedule()) {
        let mut prev = 1.0;
        for t in 1..=s.steps() {
            prop_assert!(s.alpha(t) > 0.0 && s.alpha(t) < 1.0);
            prop_assert_eq!(s.beta(t) + s.alpha(t), 1.0);
            prop_assert!(s.alpha_bar(t) < prev);
            prop_assert_eq!(s.alpha_bar(t), prev * s.alpha(t));
            prev = s.alpha_bar(t);
        }
    }

    #[test]
    fn posterior_variance_nonnegative_and_zero_at_first_step(s in schedule()) {
        for t in 1..=s.steps() {
            let p = s.posterior(t).unwrap();
            prop_assert!(p.variance >= 0.0);
        }
        prop_assert_eq!(s.posterior(1).unwrap().variance, 0.0);
    }

    #[test]
    fn posterior_mean_of_noise_free_pair_is_scaled_clean_image(s in schedule(), c in -5.0f64..5.0) {
        let y0 = Image::filled(2, 2, c);
        for t in 1..=s.steps() {
            let yt = Image::filled(2, 2, s.alpha_bar(t).sqrt() * c);
            let (mu, _) = posterior_params(&y0, &yt, t, &s).unwrap();
            let expect = if t == 1 { c } else { s.alpha_bar(t - 1).sqrt() * c };
            for &v in mu.as_slice() {
                prop_assert!((v - expect).abs() <= 1e-9 * c.abs().max(1.0));
            }
        }
    }

    #[test]
    fn ddim_step_is_pure(s in schedule(), yt in image(4, 4), y0 in image(4, 4), frac in 0.0f64..1.0) {
        let t = s.steps();
        let prev = ((t as f64 * frac) as usize).min(t - 1);
        let a = ddim_reverse_step(&yt, &y0, t, prev, &s).unwrap();
        let b = ddim_reverse_step(&yt.clone(), &y0.clone(), t, prev, &s).unwrap();
        prop_assert!(a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn ddpm_first_step_ignores_noise(s in schedule(), yt in image(3, 3), y0 in image(3, 3), eps in image(3, 3)) {
        let out = ddpm_reverse_step(&yt, &y0, 1, &s, &eps, ReverseNoise::Posterior).unwrap();
        prop_assert_eq!(out, y0);
    }

    #[test]
    fn mask_noise_leaves_unmasked_pixels_untouched(x in image(8, 8), eps in image(8, 8), m in mask(8, 8)) {
        let out = apply_mask_noise(&x, &m.to_image(), &eps).unwrap();
        for i in 0..64 {
            let expect = if m.as_slice()[i] { eps.as_slice()[i] } else { x.as_slice()[i] };
            prop_assert_eq!(out.as_slice()[i].to_bits(), expect.to_bits());
        }
    }

    #[test]
    fn strip_noise_matches_select(x in image(8, 8), eps in image(8, 8), off in 0usize..6, ext in 1usize..3, vertical in any::<bool>()) {
        let o = if vertical { Orientation::Vertical } else { Orientation::Horizontal };
        let strip = MaskStrip::new(o, off, ext, 8, 8).unwrap();
        let out = apply_strip_noise(&x, &strip, &eps).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let expect = if strip.contains(r, c) { eps.get(r, c) } else { x.get(r, c) };
                prop_assert_eq!(out.get(r, c).to_bits(), expect.to_bits());
            }
        }
    }

    #[test]
    fn aggregation_matches_brute_force_and_ignores_order(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let strips: Vec<MaskStrip> = (0..n)
            .map(|_| {
                let o = if rng.random::<bool>() { Orientation::Vertical } else { Orientation::Horizontal };
                let ext = rng.random_range(1..=8);
                MaskStrip::new(o, rng.random_range(0..=8 - ext), ext, 8, 8).unwrap()
            })
            .collect();
        let errors: Vec<Image> = (0..n).map(|_| Image::from_fn(8, 8, |_, _| rng.random::<f64>())).collect();
        let set = MaskSet::from_strips(8, 8, strips.clone()).unwrap();
        let agg = aggregate_anomaly(&errors, &set).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let covering: Vec<f64> = strips.iter().zip(&errors).filter(|(s, _)| s.contains(r, c)).map(|(_, e)| e.get(r, c)).collect();
                let expect = if covering.is_empty() { 0.0 } else { covering.iter().sum::<f64>() / covering.len() as f64 };
                prop_assert!((agg.score.get(r, c) - expect).abs() <= 1e-15);
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.reverse();
        order.rotate_left(seed as usize % n);
        let permuted = MaskSet::from_strips(8, 8, order.iter().map(|&i| strips[i]).collect()).unwrap();
        let errs: Vec<Image> = order.iter().map(|&i| errors[i].clone()).collect();
        let agg2 = aggregate_anomaly(&errs, &permuted).unwrap();
        for (a, b) in agg.score.as_slice().iter().zip(agg2.score.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn mask_sets_with_stride_within_extent_cover_every_pixel(size in 8usize..64, ext_frac in 0.05f64..1.0, stride in 1usize..8) {
        let ext = ((size as f64 * ext_frac) as usize).clamp(1, size);
        let stride = stride.min(ext);
        let set = MaskSet::build(size, size, ext, stride, &[Orientation::Horizontal, Orientation::Vertical]).unwrap();
        prop_assert_eq!(set.uncovered_pixels(), 0);
    }

    #[test]
    fn dice_jaccard_identity(p in mask(6, 6), g in mask(6, 6)) {
        let d = dice(&p, &g).unwrap();
        match jaccard(&p, &g).unwrap() {
            Some(j) => prop_assert!((d - 2.0 * j / (1.0 + j)).abs() <= 1e-12),
            None => prop_assert_eq!(d, 1.0),
        }
        if let Some(j) = jaccard(&p, &g).unwrap() {
            prop_assert!(j <= d + 1e-15);
        }
    }

    #[test]
    fn auc_is_invariant_under_monotone_maps(scores in proptest::collection::vec(0.0f64..1.0, 30), labels in proptest::collection::vec(any::<bool>(), 30)) {
        let mapped: Vec<f64> = scores.iter().map(|s| 2.0 * s + 1.0).collect();
        prop_assert_eq!(auc(&scores, &labels).unwrap(), auc(&mapped, &labels).unwrap());
    }

    #[test]
    fn assd_is_symmetric(a in mask(7, 7), b in mask(7, 7)) {
        prop_assert_eq!(assd(&a, &b).unwrap(), assd(&b, &a).unwrap());
    }

    #[test]
    fn precision_recall_bounds(p in mask(5, 5), g in mask(5, 5)) {
        for v in [precision(&p, &g).unwrap(), recall(&p, &g).unwrap()].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn normalized_window_has_zero_mean_unit_std(seed in any::<u64>(), flair in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vol: Vec<f64> = (0..2000).map(|i| if i % 5 == 0 { 0.0 } else { rng.random_range(0.1..10.0) }).collect();
        let modality = if flair { Modality::Flair } else { Modality::T2 };
        let stats = brain_stats(&vol, modality).unwrap();
        let out = normalize_volume(&vol, modality).unwrap();
        let s: Vec<f64> = vol.iter().zip(&out).filter(|(v, _)| **v > 0.0 && **v >= stats.low && **v <= stats.high).map(|(_, o)| *o).collect();
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        let std = (s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / s.len() as f64).sqrt();
        prop_assert!(mean.abs() < 1e-6);
        prop_assert!((std - 1.0).abs() < 1e-6);
        for (v, o) in vol.iter().zip(&out) {
            if *v == 0.0 {
                prop_assert_eq!(*o, 0.0);
            }
        }
    }

    #[test]
    fn resampling_constant_stays_constant(size in 2usize..40, target in 2usize..40, c in -2.0f64..2.0) {
        let out = resample_bilinear(&Image::filled(size, size, c), target).unwrap();
        prop_assert!(out.as_slice().iter().all(|v| (v - c).abs() < 1e-12));
    }

    #[test]
    fn subject_split_is_a_partition(n in 1usize..200, seed in any::<u64>()) {
        let ids: Vec<u32> = (0..n as u32).collect();
        let (tr, va, te) = split_subjects(&ids, seed);
        let mut all: Vec<u32> = tr.iter().chain(&va).chain(&te).copied().collect();
        all.sort();
        prop_assert_eq!(all, ids);
        prop_assert_eq!(va.len(), te.len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn phantom_is_deterministic_and_train_is_clean(seed in any::<u64>()) {
        let spec = PhantomSpec { size: 32, seed, ..PhantomSpec::default() };
        let a = generate_phantom(&spec, 3, Split::Train).unwrap();
        let b = generate_phantom(&spec, 3, Split::Train).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.iter().all(|p| p.anomaly.is_empty_set()));
    }

    #[test]
    fn camouflage_matches_x_but_not_y(seed in any::<u64>()) {
        let spec = PhantomSpec { seed, noise_sigma: 0.0, anomaly_modes: vec![AnomalyMode::Camouflage], ..PhantomSpec::default() };
        for p in generate_phantom(&spec, 2, Split::Test).unwrap() {
            let n = p.anomaly.count() as f64;
            prop_assume!(n > 0.0);
            let mean = |img: &Image| img.as_slice().iter().zip(p.anomaly.as_slice()).filter(|(_, m)| **m).map(|(v, _)| v).sum::<f64>() / n;
            let (mx, my) = (mean(&p.x), mean(&p.y));
            let matched = spec.classes.iter().find(|c| (c.intensity_x - mx).abs() < 0.01);
            prop_assert!(matched.is_some(), "x mean {mx} matches no class");
            prop_assert!((matched.unwrap().intensity_y - my).abs() > 0.5);
        }
    }
}

#[test]
fn forward_composition_matches_marginal() {
    let s = NoiseSchedule::linear(50, 1e-3, 0.05).unwrap();
    let t = 50;
    let trials = 20_000;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let y0 = Image::filled(1, 1, 0.7);
    let (mut chain, mut direct) = (Vec::with_capacity(trials), Vec::with_capacity(trials));
    for _ in 0..trials {
        let mut y = y0.clone();
        for step in 1..=t {
            y = forward_step(&y, step, &normal_image(&mut rng, 1, 1), &s).unwrap();
        }
        chain.push(y.get(0, 0));
        direct.push(marginal_sample(&y0, t, &normal_image(&mut rng, 1, 1), &s).unwrap().get(0, 0));
    }
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64)
    };
    let ((m1, v1), (m2, v2)) = (stats(&chain), stats(&direct));
    let n = trials as f64;
    let se_mean = ((v1 + v2) / n).sqrt();
    let se_var = (2.0 * v1 * v1 / (n - 1.0) + 2.0 * v2 * v2 / (n - 1.0)).sqrt();
    assert!((m1 - m2).abs() < 3.0 * se_mean, "means {m1} vs {m2}");
    assert!((v1 - v2).abs() < 3.0 * se_var, "variances {v1} vs {v2}");
    let ab = s.alpha_bar(t);
    assert!((m2 - ab.sqrt() * 0.7).abs() < 3.0 * (v2 / n).sqrt());
}

#[test]
fn nearest_resample_of_checkerboard_is_binary() {
    let m = BinaryMask::from_fn(256, 256, |r, c| (r / 8 + c / 8) % 2 == 0);
    let out = resample_nearest(&m, 128).unwrap();
    assert_eq!(out.shape(), (128, 128));
    assert!(out.count() > 0 && out.count() < 128 * 128);
}
