use mmccd::models::{Network, NetworkRole};
use mmccd::nn::{Latent, Tensor, UnetConfig};
use mmccd::pipelines::{
    check_collapse, fit, infer_cyclic_unet, infer_ddpm_uncond, infer_mmccd, infer_reconstruction, l2_loss,
    train_step_mmccd, train_step_reconstruction, train_step_translation, ErrorKind, InferenceResult, Objective,
    PipelineError, SamplerConfig, SamplerKind, TrainConfig, TranslateFn,
};
use mmccd_core::phantom::{generate_phantom, PhantomSpec, SlicePair};
use mmccd_core::slices::Split;
use mmccd_core::{BinaryMask, Image, MaskSet, NoiseSchedule, Orientation, ScheduleDescriptor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_config(size: usize, seed: u64) -> UnetConfig {
    UnetConfig {
        base_width: 4,
        depth: 2,
        input_size: size,
        seed,
        ..UnetConfig::default()
    }
}

fn short_schedule() -> ScheduleDescriptor {
    ScheduleDescriptor {
        steps: 100,
        beta_start: 1e-3,
        beta_end: 0.2,
        ..ScheduleDescriptor::default()
    }
}

fn phantom(size: usize, noise_sigma: f64, seed: u64) -> PhantomSpec {
    PhantomSpec {
        size,
        noise_sigma,
        seed,
        ..PhantomSpec::default()
    }
}

/// Exact inverse of the noise-free phantom pairing, background included.
fn oracle_backward(spec: &PhantomSpec) -> impl FnMut(&[Image]) -> mmccd::pipelines::Result<Vec<Image>> {
    let classes = spec.classes.clone();
    move |ys: &[Image]| {
        Ok(ys
            .iter()
            .map(|y| {
                y.map(|v| {
                    if v == 0.0 {
                        return 0.0;
                    }
                    let c = classes
                        .iter()
                        .min_by(|a, b| (a.intensity_y - v).abs().total_cmp(&(b.intensity_y - v).abs()))
                        .unwrap();
                    c.intensity_x
                })
            })
            .collect())
    }
}

fn dyadic_image(h: usize, w: usize, k: usize) -> Image {
    Image::from_fn(h, w, |r, c| ((r * 7 + c * 3 + k) % 16) as f64 / 16.0)
}

fn tensor_of(images: &[&Image]) -> Tensor<f32> {
    let (h, w) = images[0].shape();
    let data = images.iter().flat_map(|i| i.as_slice().iter().map(|&v| v as f32)).collect();
    Tensor::from_data(1, images.len(), h, w, data)
}

#[test]
fn oracle_prediction_has_zero_loss() {
    let ys: Vec<Image> = (0..3).map(|k| dyadic_image(8, 8, k)).collect();
    let refs: Vec<&Image> = ys.iter().collect();
    let (loss, grad) = l2_loss(&tensor_of(&refs), &refs);
    assert_eq!(loss, 0.0);
    assert!(grad.data.iter().all(|&g| g == 0.0));
}

#[test]
fn identity_on_identical_modalities_has_zero_loss() {
    let xs: Vec<Image> = (0..2).map(|k| dyadic_image(4, 4, k)).collect();
    let ys = xs.clone();
    let pred = tensor_of(&xs.iter().collect::<Vec<_>>());
    let (loss, _) = l2_loss(&pred, &ys.iter().collect::<Vec<_>>());
    assert_eq!(loss, 0.0);
}

#[test]
fn zero_output_loss_is_mean_target_norm() {
    let unit = Image::from_fn(4, 4, |r, c| if (r + c) % 2 == 0 { 0.25 } else { -0.25 });
    let zeros = Tensor::<f32>::zeros(1, 2, 4, 4);
    let (loss, _) = l2_loss(&zeros, &[&unit, &unit]);
    assert!((loss - 1.0).abs() < 1e-12);

    let a = Image::filled(4, 4, 0.5);
    let b = Image::filled(4, 4, 1.5);
    let (loss, _) = l2_loss(&zeros, &[&a, &b]);
    assert!((loss - (2.0 + 6.0) / 2.0).abs() < 1e-12);
}

#[test]
fn first_mmccd_step_of_zero_head_network_reports_mean_target_norm() {
    let spec = phantom(16, 0.02, 1);
    let data = generate_phantom(&spec, 4, Split::Train).unwrap();
    let batch: Vec<&SlicePair> = data.iter().collect();
    let schedule = NoiseSchedule::new(short_schedule()).unwrap();
    let masks = MaskSet::build(16, 16, 4, 2, &[Orientation::Horizontal, Orientation::Vertical]).unwrap();
    let mut f = Network::new(NetworkRole::Denoiser, tiny_config(16, 2), Some(short_schedule())).unwrap();
    let mut opt = TrainConfig::default().optimizer();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let loss = train_step_mmccd(&mut f, &mut opt, &batch, &schedule, &masks, &mut rng).unwrap();
    let expected = data
        .iter()
        .map(|p| p.y.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum::<f64>()
        / data.len() as f64;
    assert!((loss - expected).abs() < 1e-4 * expected, "{loss} vs {expected}");
    assert_eq!(f.step, 1);
}

#[test]
fn non_finite_loss_reports_divergence() {
    let spec = phantom(16, 0.0, 1);
    let mut data = generate_phantom(&spec, 1, Split::Train).unwrap();
    data[0].y.set(3, 3, f64::NAN);
    let batch: Vec<&SlicePair> = data.iter().collect();
    let schedule = NoiseSchedule::new(short_schedule()).unwrap();
    let masks = MaskSet::full(16, 16).unwrap();
    let mut f = Network::new(NetworkRole::Denoiser, tiny_config(16, 2), Some(short_schedule())).unwrap();
    let mut opt = TrainConfig::default().optimizer();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let err = train_step_mmccd(&mut f, &mut opt, &batch, &schedule, &masks, &mut rng).unwrap_err();
    assert!(matches!(err, PipelineError::Diverged { .. }), "{err}");
}

#[test]
fn tiny_mmccd_training_halves_its_loss() {
    let spec = phantom(16, 0.02, 3);
    let data = generate_phantom(&spec, 32, Split::Train).unwrap();
    let masks = MaskSet::build(16, 16, 4, 2, &[Orientation::Horizontal, Orientation::Vertical]).unwrap();
    let objective = Objective::Mmccd {
        schedule: NoiseSchedule::new(short_schedule()).unwrap(),
        masks,
    };
    let config = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 8,
        max_steps: 500,
        ..TrainConfig::default()
    };
    let mut f = Network::new(NetworkRole::Denoiser, tiny_config(16, 4), Some(short_schedule())).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let losses = fit(&mut f, &objective, &data, &config, &mut rng, |_, _| Ok(())).unwrap();
    assert_eq!(losses.len(), 500);
    let head = losses[..10].iter().sum::<f64>() / 10.0;
    let tail = losses[490..].iter().sum::<f64>() / 10.0;
    assert!(tail <= 0.5 * head, "first-10 mean {head:.4}, last-10 mean {tail:.4}");
}

#[test]
fn backward_translator_learns_the_phantom_inverse() {
    let spec = phantom(16, 0.02, 4);
    let train = generate_phantom(&spec, 64, Split::Train).unwrap();
    let held_out = generate_phantom(&PhantomSpec { seed: 99, ..spec.clone() }, 16, Split::Train).unwrap();
    let config = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 8,
        max_steps: 2000,
        ..TrainConfig::default()
    };
    let mut g = Network::new(NetworkRole::Translator, tiny_config(16, 6), None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    fit(&mut g, &Objective::Translate { forward: false }, &train, &config, &mut rng, |_, _| Ok(())).unwrap();
    let ys: Vec<&Image> = held_out.iter().map(|p| &p.y).collect();
    let preds = g.predict(&[ys], None).unwrap();
    let n = (held_out.len() * 256) as f64;
    let mae = preds
        .iter()
        .zip(&held_out)
        .map(|(p, pair)| p.abs_error(&pair.x).unwrap().as_slice().iter().sum::<f64>())
        .sum::<f64>()
        / n;
    assert!(mae < 0.05, "held-out translation error {mae:.4}");
}

#[test]
fn single_full_mask_scores_the_single_generation() {
    let x = dyadic_image(8, 8, 1);
    let generated = dyadic_image(8, 8, 5);
    let masks = MaskSet::full(8, 8).unwrap();
    let schedule = NoiseSchedule::new(short_schedule()).unwrap();
    let g_out = generated.clone();
    let mut f = move |noisy: &[Image], _: Option<&[Image]>, _t: usize| Ok(vec![g_out.clone(); noisy.len()]);
    let mut g = TranslateFn(|ys: &[Image]| Ok(ys.to_vec()));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (result, _) = infer_mmccd(
        &mut f,
        &mut g,
        &x,
        &masks,
        &schedule,
        &SamplerConfig::default(),
        ErrorKind::Squared,
        &mut rng,
        false,
    )
    .unwrap();
    let expected = generated.squared_error(&x).unwrap();
    let errors = result.per_mask_errors.as_ref().unwrap();
    assert_eq!(errors.len(), 1);
    for (a, b) in result.anomaly_score.as_slice().iter().zip(expected.as_slice()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(result.uncovered, 0);
}

#[test]
fn oracle_cycle_scores_normal_slice_near_zero() {
    let spec = phantom(32, 0.0, 7);
    let pair = generate_phantom(&spec, 1, Split::Train).unwrap().remove(0);
    let schedule = NoiseSchedule::new(short_schedule()).unwrap();
    let masks = MaskSet::build(32, 32, 8, 4, &[Orientation::Horizontal, Orientation::Vertical]).unwrap();
    let y = pair.y.clone();
    let mut f = move |noisy: &[Image], conds: Option<&[Image]>, _t: usize| {
        assert_eq!(conds.map(<[Image]>::len), Some(noisy.len()));
        Ok(vec![y.clone(); noisy.len()])
    };
    let mut seen = Vec::new();
    let mut inverse = oracle_backward(&spec);
    let mut g = TranslateFn(|ys: &[Image]| {
        seen.extend_from_slice(ys);
        inverse(ys)
    });
    let sampler = SamplerConfig {
        kind: SamplerKind::Ddim,
        steps: 10,
        ..SamplerConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (result, trace) = infer_mmccd(
        &mut f,
        &mut g,
        &pair.x,
        &masks,
        &schedule,
        &sampler,
        ErrorKind::Squared,
        &mut rng,
        true,
    )
    .unwrap();
    let max = result.anomaly_score.as_slice().iter().fold(0.0f64, |m, &v| m.max(v));
    assert!(max < 1e-3, "max score {max}");
    // g sees the generated images themselves, never a masked variant
    let trace = trace.unwrap();
    assert_eq!(seen.len(), masks.len());
    assert_eq!(seen, trace.generated);
    for generated in &seen {
        for (a, b) in generated.as_slice().iter().zip(pair.y.as_slice()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn inconsistent_sampler_is_rejected() {
    let x = Image::zeros(8, 8);
    let masks = MaskSet::full(8, 8).unwrap();
    let schedule = NoiseSchedule::new(short_schedule()).unwrap();
    let mut f = |noisy: &[Image], _: Option<&[Image]>, _t: usize| Ok(noisy.to_vec());
    let mut g = TranslateFn(|ys: &[Image]| Ok(ys.to_vec()));
    let sampler = SamplerConfig {
        steps: 101,
        ..SamplerConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let err = infer_mmccd(&mut f, &mut g, &x, &masks, &schedule, &sampler, ErrorKind::Squared, &mut rng, false).unwrap_err();
    assert!(matches!(err, PipelineError::Config(_)));
}

#[test]
fn identity_cycle_collapses() {
    let spec = phantom(16, 0.02, 2);
    let slices = generate_phantom(&spec, 3, Split::Test).unwrap();
    let mut scores = Vec::new();
    for pair in &slices {
        let mut f = TranslateFn(|v: &[Image]| Ok(v.to_vec()));
        let mut g = TranslateFn(|v: &[Image]| Ok(v.to_vec()));
        let r = infer_cyclic_unet(&mut f, &mut g, &pair.x, ErrorKind::Squared).unwrap();
        assert!(r.anomaly_score.as_slice().iter().all(|&v| v == 0.0));
        scores.push(r.anomaly_score);
    }
    assert!(check_collapse(&scores));
    scores[0].set(0, 0, 0.1);
    assert!(!check_collapse(&scores));
}

#[test]
fn exact_inverse_cycle_scores_normal_slices_zero() {
    let spec = phantom(16, 0.0, 2);
    let classes = spec.classes.clone();
    let pair = generate_phantom(&spec, 1, Split::Train).unwrap().remove(0);
    let mut f = TranslateFn(move |xs: &[Image]| {
        Ok(xs
            .iter()
            .map(|x| {
                x.map(|v| {
                    classes
                        .iter()
                        .find(|c| c.intensity_x == v)
                        .map_or(0.0, |c| c.intensity_y)
                })
            })
            .collect())
    });
    let mut g = TranslateFn(oracle_backward(&spec));
    let r = infer_cyclic_unet(&mut f, &mut g, &pair.x, ErrorKind::Squared).unwrap();
    assert!(r.anomaly_score.as_slice().iter().all(|&v| v < 1e-12));
}

#[test]
fn autoencoder_reconstructs_constant_images() {
    let constant = Image::filled(16, 16, 0.5);
    let data: Vec<SlicePair> = (0..4)
        .map(|i| SlicePair {
            x: constant.clone(),
            y: constant.clone(),
            anomaly: BinaryMask::empty(16, 16),
            subject_id: format!("c{i}"),
            slice_index: i,
            split: Split::Train,
            mode: None,
        })
        .collect();
    let cfg = UnetConfig {
        skip_connections: false,
        latent: Latent::Bottleneck(4),
        ..tiny_config(16, 8)
    };
    let mut ae = Network::new(NetworkRole::Autoencoder, cfg, None).unwrap();
    let config = TrainConfig {
        learning_rate: 3e-3,
        batch_size: 4,
        max_steps: 1500,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let objective = Objective::Reconstruct { noise_sigma: 0.0, kl_weight: 0.0 };
    fit(&mut ae, &objective, &data, &config, &mut rng, |_, _| Ok(())).unwrap();
    // the norm loss keeps a unit gradient near its minimum; settle with a small step
    let settle = TrainConfig {
        learning_rate: 1e-4,
        max_steps: 2500,
        ..config
    };
    fit(&mut ae, &objective, &data, &settle, &mut rng, |_, _| Ok(())).unwrap();
    let r = infer_reconstruction(&mut ae, &constant, ErrorKind::Squared).unwrap();
    let max = r.anomaly_score.as_slice().iter().fold(0.0f64, |m, &v| m.max(v));
    assert!(max < 1e-5, "max reconstruction error {max}");
}

#[test]
fn noise_free_dae_matches_plain_reconstruction() {
    let spec = phantom(16, 0.02, 5);
    let data = generate_phantom(&spec, 4, Split::Train).unwrap();
    let xs: Vec<&Image> = data.iter().map(|p| &p.x).collect();
    let mut dae = Network::new(NetworkRole::DenoisingAutoencoder, tiny_config(16, 9), None).unwrap();
    let mut plain = dae.clone();
    let config = TrainConfig {
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let (mut opt_a, mut opt_b) = (config.optimizer(), config.optimizer());
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..5 {
        let a = train_step_reconstruction(&mut dae, &mut opt_a, &xs, 0.0, 0.0, &mut rng).unwrap();
        let b = train_step_translation(&mut plain, &mut opt_b, &xs, &xs).unwrap();
        assert_eq!(a, b);
    }
    let probe = [xs[0]];
    assert_eq!(dae.predict(&[probe.to_vec()], None).unwrap(), plain.predict(&[probe.to_vec()], None).unwrap());
}

#[test]
fn binary_mask_is_score_above_threshold() {
    let score = Image::from_fn(6, 6, |r, c| (r * 6 + c) as f64 / 35.0);
    let mut result = InferenceResult::new(score.clone(), None, 0);
    assert!(result.binary_mask.is_empty_set());
    for h in [0.0, 14.0 / 35.0, 0.5, 1.0] {
        result.set_threshold(h);
        for (m, &s) in result.binary_mask.as_slice().iter().zip(score.as_slice()) {
            assert_eq!(*m, s > h);
        }
    }
}

fn randomized(role: NetworkRole, cfg: UnetConfig, schedule: Option<ScheduleDescriptor>) -> Network {
    let mut net = Network::new(role, cfg, schedule).unwrap();
    // leave the zero head so outputs depend on the body
    let mut k = 0u32;
    net.unet.visit_params(&mut |name, p| {
        if name.starts_with("conv_out") {
            for v in p.value.iter_mut() {
                k = k.wrapping_mul(1_103_515_245).wrapping_add(12345);
                *v = (f64::from(k >> 16) / 65536.0 - 0.5) as f32 * 0.2;
            }
        }
    });
    net
}

#[test]
fn mmccd_inference_is_reproducible() {
    let spec = phantom(16, 0.02, 6);
    let pair = generate_phantom(&spec, 1, Split::Test).unwrap().remove(0);
    let schedule = NoiseSchedule::new(short_schedule()).unwrap();
    let masks = MaskSet::build(16, 16, 4, 4, &[Orientation::Horizontal]).unwrap();
    for kind in [SamplerKind::Ddim, SamplerKind::Ddpm] {
        let sampler = SamplerConfig {
            kind,
            steps: 5,
            mask_batch: 3,
            ..SamplerConfig::default()
        };
        let run = || {
            let mut f = randomized(NetworkRole::Denoiser, tiny_config(16, 11), Some(short_schedule()));
            let mut g = randomized(NetworkRole::Translator, tiny_config(16, 12), None);
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            infer_mmccd(&mut f, &mut g, &pair.x, &masks, &schedule, &sampler, ErrorKind::Squared, &mut rng, false)
                .unwrap()
                .0
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.anomaly_score.as_slice().iter().any(|&v| v > 0.0));
    }
}

#[test]
fn unconditional_ddpm_inference_is_reproducible() {
    let spec = phantom(16, 0.02, 6);
    let pair = generate_phantom(&spec, 1, Split::Test).unwrap().remove(0);
    let schedule = NoiseSchedule::new(short_schedule()).unwrap();
    let sampler = SamplerConfig::default();
    let run = || {
        let mut net = randomized(NetworkRole::UnconditionalDenoiser, tiny_config(16, 13), Some(short_schedule()));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        infer_ddpm_uncond(&mut net, &pair.x, &schedule, 50, &sampler, ErrorKind::Squared, &mut rng).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn every_network_type_is_deterministic_in_eval() {
    let x = dyadic_image(16, 16, 2);
    let cases = [
        (NetworkRole::Translator, tiny_config(16, 1)),
        (
            NetworkRole::Autoencoder,
            UnetConfig {
                skip_connections: false,
                latent: Latent::Bottleneck(2),
                ..tiny_config(16, 1)
            },
        ),
        (
            NetworkRole::VariationalAutoencoder,
            UnetConfig {
                skip_connections: false,
                latent: Latent::Variational(2),
                ..tiny_config(16, 1)
            },
        ),
        (NetworkRole::DenoisingAutoencoder, tiny_config(16, 1)),
    ];
    for (role, cfg) in cases {
        let mut net = randomized(role, cfg, None);
        let a = net.predict(&[vec![&x]], None).unwrap();
        let b = net.predict(&[vec![&x]], None).unwrap();
        assert_eq!(a, b, "{role:?}");
        assert_eq!(a[0].shape(), (16, 16));
    }
    let mut f = randomized(NetworkRole::Denoiser, tiny_config(16, 1), Some(short_schedule()));
    let a = f.predict(&[vec![&x], vec![&x]], Some(&[17])).unwrap();
    assert_eq!(a, f.predict(&[vec![&x], vec![&x]], Some(&[17])).unwrap());
}

#[test]
fn training_refuses_anomalous_slices() {
    let spec = phantom(16, 0.02, 1);
    let data = generate_phantom(&spec, 2, Split::Test).unwrap();
    let mut g = Network::new(NetworkRole::Translator, tiny_config(16, 1), None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let err = fit(&mut g, &Objective::Translate { forward: true }, &data, &TrainConfig::default(), &mut rng, |_, _| Ok(()))
        .unwrap_err();
    assert!(matches!(err, PipelineError::Config(_)));
}
