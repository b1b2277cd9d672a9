mod common;

use common::{assert_close, check_with_params};
use cymba_core::diffusion::{
    latent_scale, ldm_loss, p_sample_loop, stack, timestep_embedding, Denoiser, DenoiserConfig, LatentDiffusion,
    NoiseSchedule,
};
use cymba_core::nn::{Binder, Mode, ParamStore};
use cymba_core::vae::{Lmn, VaeConfig};
use cymba_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(100, 1e-4, 2e-2).unwrap()
}

fn tiny_cfg() -> DenoiserConfig {
    let mut cfg = DenoiserConfig::new(2, 3, [4, 4, 2]);
    cfg.widths = [4, 4, 4];
    cfg.blocks_per_stage = 1;
    cfg.d_state = 2;
    cfg
}

/// Tiny denoiser with a non-zero output layer, so gradients reach every weight.
fn tiny_denoiser(store: &mut ParamStore, seed: u64) -> Denoiser {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Denoiser::new(store, "den", tiny_cfg(), &mut rng).unwrap();
    let name = "den.conv_out.weight";
    let shape = store.get(name).unwrap().shape().to_vec();
    store.set(name, Tensor::randn(shape, 0.3, &mut rng)).unwrap();
    d
}

#[test]
fn schedule_matches_its_definition() {
    let s = schedule();
    assert_eq!(s.steps(), 100);
    assert!((s.betas()[0] - 1e-4).abs() < 1e-15);
    assert!((s.betas()[99] - 2e-2).abs() < 1e-15);
    let mut prod = 1.0;
    for t in 0..100 {
        prod *= 1.0 - s.betas()[t];
        assert!((s.alpha_bars()[t] - prod).abs() < 1e-14);
        if t > 0 {
            assert!(s.betas()[t] > s.betas()[t - 1]);
            assert!(s.alpha_bars()[t] < s.alpha_bars()[t - 1]);
        }
    }
    assert!(s.alpha_bars()[0] > 0.9998);
}

#[test]
fn bad_schedules_are_rejected() {
    assert!(NoiseSchedule::linear(0, 1e-4, 2e-2).is_err());
    assert!(NoiseSchedule::linear(10, 2e-2, 1e-4).is_err());
    assert!(NoiseSchedule::linear(10, 0.0, 2e-2).is_err());
    assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
}

#[test]
fn q_sample_limits_and_range() {
    let s = schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x0 = Tensor::randn([50], 1.0, &mut rng);
    let eps = Tensor::randn([50], 1.0, &mut rng);
    let near = s.q_sample(&x0, 0, &eps).unwrap();
    assert!(near.max_abs_diff(&x0).unwrap() < 0.05);
    let det = s.q_sample(&x0, 40, &Tensor::zeros([50])).unwrap();
    assert_close(&det, &x0.map(|v| v * s.alpha_bars()[40].sqrt()), 1e-15);
    assert!(s.q_sample(&x0, 100, &eps).is_err());
    assert!(s.predict_x0(&x0, 100, &eps).is_err());
}

#[test]
fn q_sample_variance_matches_one_minus_alpha_bar() {
    let s = schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0 = Tensor::from_fn([4], |i| i as f64 - 1.5);
    for t in [10, 50, 99] {
        let draws = 10_000;
        let mut sums = [0.0; 4];
        let mut sq = [0.0; 4];
        for _ in 0..draws {
            let xt = s.q_sample(&x0, t, &Tensor::randn([4], 1.0, &mut rng)).unwrap();
            for (k, v) in xt.data().iter().enumerate() {
                sums[k] += v;
                sq[k] += v * v;
            }
        }
        let want = 1.0 - s.alpha_bars()[t];
        for k in 0..4 {
            let m = sums[k] / draws as f64;
            let var = sq[k] / draws as f64 - m * m;
            assert!((var / want - 1.0).abs() < 0.05, "t={t} var {var} want {want}");
        }
    }
}

#[test]
fn single_step_schedule_uses_the_one_step_formula() {
    let s = NoiseSchedule::linear(1, 0.3, 0.3).unwrap();
    let xt = Tensor::from_fn([3], |i| i as f64);
    let eps = Tensor::from_fn([3], |i| 0.5 - i as f64);
    let z = Tensor::full([3], 9.0);
    let got = s.p_step(&xt, 0, &eps, &z).unwrap();
    // ᾱ = α = 0.7: x0 = (x − sqrt(0.3)·ε) / sqrt(0.7), no noise added.
    let want = Tensor::from_fn([3], |i| (i as f64 - 0.3f64.sqrt() * (0.5 - i as f64)) / 0.7f64.sqrt());
    assert_close(&got, &want, 1e-14);
}

#[test]
fn ldm_loss_of_perfect_and_null_predictors() {
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let eps = Tensor::randn([20_000], 1.0, &mut rng);
    let e = tape.constant(eps.clone());
    assert_eq!(ldm_loss(e, e).unwrap().value().item().unwrap(), 0.0);
    let null = ldm_loss(tape.constant(Tensor::zeros([20_000])), e).unwrap().value().item().unwrap();
    let mean_sq = eps.data().iter().map(|v| v * v).sum::<f64>() / 20_000.0;
    assert!((null - mean_sq).abs() < 1e-12);
    assert!((null - 1.0).abs() < 0.05);
}

#[test]
fn embedding_rows_are_sines_and_cosines() {
    let e = timestep_embedding(&[0, 7], 6);
    assert_eq!(e.shape(), [2, 6]);
    assert_eq!(&e.data()[..6], &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    let f = (-(10_000f64).ln() / 3.0).exp();
    assert!((e.data()[7] - (7.0 * f).sin()).abs() < 1e-15);
    assert!((e.data()[10] - (7.0 * f).cos()).abs() < 1e-15);
}

#[test]
fn stage_dims_halve_even_axes() {
    let cfg = DenoiserConfig::new(4, 12, [16, 16, 2]);
    assert_eq!(cfg.stage_dims(), [[16, 16, 2], [8, 8, 1], [4, 4, 1]]);
}

#[test]
fn zero_output_layer_predicts_zero_noise() {
    let mut store = ParamStore::new();
    let d = Denoiser::new(&mut store, "den", tiny_cfg(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let tape = Tape::new();
    let p = Binder::new(&tape, &store, Mode::Eval);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = tape.constant(Tensor::randn([2, 2, 4, 4, 2], 1.0, &mut rng));
    let c = tape.constant(Tensor::randn([2, 3, 4, 4, 2], 1.0, &mut rng));
    let out = d.forward(&p, x, &[3, 40], c).unwrap();
    assert_eq!(out.shape(), [2, 2, 4, 4, 2]);
    assert!(out.value().data().iter().all(|&v| v == 0.0));
    assert!(d.forward(&p, x, &[3], c).is_err());
    assert!(d.forward(&p, c, &[3, 40], c).is_err());
}

#[test]
fn denoiser_gradient() {
    let mut store = ParamStore::new();
    let d = tiny_denoiser(&mut store, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::randn([1, 2, 4, 4, 2], 1.0, &mut rng);
    let c = Tensor::randn([1, 3, 4, 4, 2], 1.0, &mut rng);
    let eps = Tensor::randn([1, 2, 4, 4, 2], 1.0, &mut rng);
    let report = check_with_params(&store, Mode::Train { epoch: 1 }, &[x, c], 24, 2, |p, v| {
        let pred = d.forward(p, v[0], &[17], v[1])?;
        ldm_loss(pred, p.tape().constant(eps.clone()))
    });
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn perfect_noise_prediction_inverts_q_sample() {
    let s = schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x0 = Tensor::randn([30], 1.0, &mut rng);
    let eps = Tensor::randn([30], 1.0, &mut rng);
    for t in [0, 1, 50, 99] {
        let xt = s.q_sample(&x0, t, &eps).unwrap();
        assert_close(&s.predict_x0(&xt, t, &eps).unwrap(), &x0, 1e-10);
    }
}

fn tiny_model(store: &mut ParamStore) -> LatentDiffusion {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let vcfg = VaeConfig {
        num_classes: 2,
        latent_channels: 2,
        widths: [2, 2],
    };
    let lmn = Lmn::new(store, "lmn", vcfg, &mut rng);
    // LMN gives 2 channels and the SSEN logits 2 more.
    let mut cfg = tiny_cfg();
    cfg.cond_channels = 4;
    cfg.latent_dims = [2, 2, 1];
    let denoiser = Denoiser::new(store, "den", cfg, &mut rng).unwrap();
    let name = "den.conv_out.weight";
    let shape = store.get(name).unwrap().shape().to_vec();
    store.set(name, Tensor::randn(shape, 0.3, &mut rng)).unwrap();
    LatentDiffusion {
        lmn,
        denoiser,
        schedule: NoiseSchedule::linear(5, 1e-3, 0.2).unwrap(),
    }
}

#[test]
fn sampling_is_reproducible_per_seed() {
    let mut store = ParamStore::new();
    let model = tiny_model(&mut store);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let lifted = Tensor::randn([1, 3, 8, 8, 4], 1.0, &mut rng);
    let logits = Tensor::randn([1, 2, 2, 2, 1], 1.0, &mut rng);
    let a = model.sample(&store, &lifted, &logits, 11).unwrap();
    let b = model.sample(&store, &lifted, &logits, 11).unwrap();
    let c = model.sample(&store, &lifted, &logits, 12).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.shape(), [1, 2, 2, 2, 1]);
    assert!(a.is_finite());
}

#[test]
fn sampling_with_an_oracle_denoiser_follows_the_step_formula() {
    // With the output layer zeroed every step predicts ε = 0, so the loop is
    // x ← x / sqrt(α_t) + sqrt(β_t)·z replayed from the same generator.
    let mut store = ParamStore::new();
    let d = Denoiser::new(&mut store, "den", tiny_cfg(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let s = NoiseSchedule::linear(4, 0.01, 0.1).unwrap();
    let cond = Tensor::zeros([1, 3, 4, 4, 2]);
    let got = p_sample_loop(&d, &store, &s, &cond, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let shape = [1, 2, 4, 4, 2];
    let mut x = Tensor::randn(shape, 1.0, &mut rng);
    for t in (0..4).rev() {
        let z = if t > 0 { Tensor::randn(shape, 1.0, &mut rng) } else { Tensor::zeros(shape) };
        let (a, b) = (s.alphas()[t], s.betas()[t]);
        let noise = if t > 0 { b.sqrt() } else { 0.0 };
        x = x.zip_map(&z, |v, n| v / a.sqrt() + noise * n).unwrap();
    }
    assert_close(&got, &x, 1e-12);
}

#[test]
fn training_loss_has_gradients_for_lmn_and_denoiser() {
    let mut store = ParamStore::new();
    let model = tiny_model(&mut store);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x0 = Tensor::randn([2, 2, 2, 2, 1], 1.0, &mut rng);
    let lifted = Tensor::randn([2, 3, 8, 8, 4], 1.0, &mut rng);
    let logits = Tensor::randn([2, 2, 2, 2, 1], 1.0, &mut rng);
    let tape = Tape::new();
    let p = Binder::new(&tape, &store, Mode::Train { epoch: 1 });
    let loss = model
        .loss(&p, &x0, tape.constant(lifted), tape.constant(logits), &mut rng)
        .unwrap();
    let g = tape.backward(loss).unwrap();
    let grads = p.grads(&g);
    for (param, g) in store.params().iter().zip(&grads) {
        // The LMN keeps only the mean head, so its log-variance head stays idle.
        let lmn = param.name.starts_with("lmn.") && !param.name.starts_with("lmn.logvar") && param.name.ends_with("weight");
        if param.trainable && (lmn || param.name.starts_with("den.conv")) {
            let g = g.as_ref().unwrap_or_else(|| panic!("no gradient for {}", param.name));
            assert!(g.data().iter().any(|&v| v != 0.0), "zero gradient for {}", param.name);
        }
    }
}

#[test]
fn stack_and_scale_helpers() {
    let a = Tensor::from_fn([2, 3], |i| i as f64);
    let b = Tensor::from_fn([2, 3], |i| -(i as f64));
    let s = stack(&[&a, &b]).unwrap();
    assert_eq!(s.shape(), [2, 2, 3]);
    assert_eq!(&s.data()[6..], b.data());
    assert!(stack(&[&a, &Tensor::zeros([3, 2])]).is_err());
    let k = latent_scale(&[a.map(|v| v * 3.0), b.map(|v| v * 3.0)]).unwrap();
    let scaled: Vec<f64> = a.data().iter().chain(b.data()).map(|v| v * 3.0 * k).collect();
    let m = scaled.iter().sum::<f64>() / 12.0;
    let var = scaled.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 11.0;
    assert!((var - 1.0).abs() < 1e-12);
    assert!(latent_scale(&[Tensor::zeros([4])]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn q_sample_is_affine_in_its_inputs(t in 0usize..100, a in -3.0f64..3.0, e in -3.0f64..3.0) {
        let s = schedule();
        let got = s.q_sample(&Tensor::full([1], a), t, &Tensor::full([1], e)).unwrap().data()[0];
        let ab = s.alpha_bars()[t];
        prop_assert!((got - (ab.sqrt() * a + (1.0 - ab).sqrt() * e)).abs() < 1e-12);
    }
}
