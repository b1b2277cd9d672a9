mod common;

use common::{assert_close, check_with_params};
use cymba_core::nn::{cross_entropy, Binder, Mode, ParamStore};
use cymba_core::vae::{
    argmax_grids, batch_targets, kl_divergence, lovasz_from_probs, lovasz_softmax, one_hot_batch, vae_loss, Latent,
    Lmn, Vae, VaeConfig, VaeLossWeights,
};
use cymba_core::voxel::VoxelGrid;
use cymba_core::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_cfg(c: u16) -> VaeConfig {
    VaeConfig {
        num_classes: c,
        latent_channels: 2,
        widths: [2, 3],
    }
}

fn random_grid(dims: [usize; 3], c: u16, rng: &mut impl Rng) -> VoxelGrid {
    let n = dims.iter().product();
    VoxelGrid::new(dims, (0..n).map(|_| rng.random_range(0..c)).collect(), c).unwrap()
}

/// Jaccard loss of mispredicting the set `s` for foreground `fg`: |S| / |F ∪ S|.
fn jaccard_set_loss(fg: &[bool], s: &[bool]) -> f64 {
    let size = s.iter().filter(|&&x| x).count();
    let union = fg.iter().zip(s).filter(|(&f, &x)| f || x).count();
    if union == 0 {
        0.0
    } else {
        size as f64 / union as f64
    }
}

/// Lovász extension evaluated as an integral over level sets of the errors.
fn lovasz_oracle(probs: &[Vec<f64>], targets: &[u16]) -> f64 {
    let c = probs[0].len();
    let mut total = 0.0;
    let mut present = 0;
    for k in 0..c {
        let fg: Vec<bool> = targets.iter().map(|&t| t as usize == k).collect();
        if !fg.iter().any(|&f| f) {
            continue;
        }
        present += 1;
        let e: Vec<f64> = probs
            .iter()
            .zip(&fg)
            .map(|(p, &f)| if f { 1.0 - p[k] } else { p[k] })
            .collect();
        let mut levels = e.clone();
        levels.sort_by(|a, b| b.total_cmp(a));
        levels.dedup();
        levels.push(0.0);
        for w in levels.windows(2) {
            let set: Vec<bool> = e.iter().map(|&x| x >= w[0]).collect();
            total += (w[0] - w[1]) * jaccard_set_loss(&fg, &set);
        }
    }
    total / present as f64
}

fn value(v: Var<'_>) -> f64 {
    v.value().item().unwrap()
}

#[test]
fn full_size_latent_is_a_quarter() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let cfg = VaeConfig::new(8);
    let vae = Vae::new(&mut store, "vae", cfg, &mut rng);
    assert_eq!(cfg.latent_shape([64, 64, 8]).unwrap(), [4, 16, 16, 2]);
    let g = random_grid([64, 64, 8], 8, &mut rng);
    let tape = Tape::new();
    let p = Binder::new(&tape, &store, Mode::Eval);
    let x = tape.constant(one_hot_batch(&[&g]).unwrap());
    let (latent, logits) = vae.forward(&p, x, &mut rng).unwrap();
    assert_eq!(latent.mean.shape(), [1, 4, 16, 16, 2]);
    assert_eq!(logits.shape(), [1, 8, 64, 64, 8]);
    assert!(cfg.latent_shape([64, 64, 6]).is_err());
}

#[test]
fn indivisible_dims_and_wrong_latent_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let vae = Vae::new(&mut store, "vae", tiny_cfg(3), &mut rng);
    let tape = Tape::new();
    let p = Binder::new(&tape, &store, Mode::Eval);
    assert!(vae.encode(&p, tape.constant(Tensor::zeros([1, 3, 8, 8, 6]))).is_err());
    assert!(vae.encode(&p, tape.constant(Tensor::zeros([1, 4, 8, 8, 4]))).is_err());
    assert!(vae.decode(&p, tape.constant(Tensor::zeros([1, 3, 2, 2, 1]))).is_err());
}

#[test]
fn zero_latent_decodes_to_finite_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let vae = Vae::new(&mut store, "vae", tiny_cfg(3), &mut rng);
    let tape = Tape::new();
    let p = Binder::new(&tape, &store, Mode::Eval);
    let out = vae.decode(&p, tape.constant(Tensor::zeros([1, 2, 2, 2, 1]))).unwrap();
    assert_eq!(out.shape(), [1, 3, 8, 8, 4]);
    assert!(out.value().is_finite());
    let grids = argmax_grids(&out.value()).unwrap();
    assert!(grids[0].labels().iter().all(|&l| l < 3));
}

#[test]
fn extreme_logvar_is_clamped() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let vae = Vae::new(&mut store, "vae", tiny_cfg(3), &mut rng);
    store.set("vae.encoder.logvar.bias", Tensor::full([2], 1e4)).unwrap();
    let g = random_grid([8, 8, 4], 3, &mut rng);
    let tape = Tape::new();
    let p = Binder::new(&tape, &store, Mode::Train { epoch: 0 });
    let latent = vae.encode(&p, tape.constant(one_hot_batch(&[&g]).unwrap())).unwrap();
    assert!(latent.logvar.value().data().iter().all(|&v| v == 20.0));
    let z = latent.sample(true, &mut rng).unwrap();
    assert!(z.value().is_finite());
    // Evaluation uses the mean.
    let pe = Binder::new(&tape, &store, Mode::Eval);
    let le = vae.encode(&pe, tape.constant(one_hot_batch(&[&g]).unwrap())).unwrap();
    assert_eq!(le.sample(false, &mut rng).unwrap().value(), le.mean.value());
}

#[test]
fn encoder_gradient_through_reparameterization() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let vae = Vae::new(&mut store, "vae", tiny_cfg(3), &mut rng);
    let grids = [random_grid([8, 8, 4], 3, &mut rng), random_grid([8, 8, 4], 3, &mut rng)];
    let x = one_hot_batch(&[&grids[0], &grids[1]]).unwrap();
    let eps = Tensor::randn([2, 2, 2, 2, 1], 1.0, &mut rng);
    let r = Tensor::randn([2, 2, 2, 2, 1], 1.0, &mut rng);
    let report = check_with_params(&store, Mode::Train { epoch: 0 }, &[x], 24, 6, |p, v| {
        let latent = vae.encode(p, v[0])?;
        let z = latent.reparameterize(&eps)?;
        Ok(z.mul(p.tape().constant(r.clone()))?.sum())
    });
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn decoder_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let vae = Vae::new(&mut store, "vae", tiny_cfg(3), &mut rng);
    let z = Tensor::randn([2, 2, 2, 2, 1], 1.0, &mut rng);
    let targets: Vec<u16> = (0..2 * 8 * 8 * 4).map(|_| rng.random_range(0..3)).collect();
    let report = check_with_params(&store, Mode::Train { epoch: 0 }, &[z], 24, 8, |p, v| {
        cross_entropy(vae.decode(p, v[0])?, &targets, None)
    });
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn lmn_gradient_and_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let lmn = Lmn::new(&mut store, "lmn", tiny_cfg(3), &mut rng);
    let cond = Tensor::uniform([2, 4, 8, 8, 4], 1.0, &mut rng);
    let r = Tensor::randn([2, 2, 2, 2, 1], 1.0, &mut rng);
    {
        let tape = Tape::new();
        let p = Binder::new(&tape, &store, Mode::Eval);
        let zero = lmn.forward(&p, tape.constant(Tensor::zeros([1, 4, 8, 8, 4]))).unwrap();
        assert_eq!(zero.shape(), [1, 2, 2, 2, 1]);
        assert!(zero.value().is_finite());
    }
    let report = check_with_params(&store, Mode::Train { epoch: 0 }, &[cond], 24, 10, |p, v| {
        Ok(lmn.forward(p, v[0])?.mul(p.tape().constant(r.clone()))?.sum())
    });
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn full_objective_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let vae = Vae::new(&mut store, "vae", tiny_cfg(3), &mut rng);
    let grids = [random_grid([8, 8, 4], 3, &mut rng), random_grid([8, 8, 4], 3, &mut rng)];
    let refs = [&grids[0], &grids[1]];
    let x = one_hot_batch(&refs).unwrap();
    let targets = batch_targets(&refs);
    let eps = Tensor::randn([2, 2, 2, 2, 1], 1.0, &mut rng);
    let w = VaeLossWeights::new(1.0, 0.1).unwrap();
    // The one-hot batch is data, so only parameters are probed here.
    let report = check_with_params(&store, Mode::Train { epoch: 0 }, &[], 24, 12, |p, _| {
        let latent = vae.encode(p, p.tape().constant(x.clone()))?;
        let logits = vae.decode(p, latent.reparameterize(&eps)?)?;
        Ok(vae_loss(logits, &targets, &latent, w)?.total)
    });
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn uniform_logits_give_log_four() {
    let tape = Tape::new();
    let logits = tape.constant(Tensor::zeros([1, 4, 2, 2, 2]));
    let t: Vec<u16> = (0..8).map(|i| (i % 4) as u16).collect();
    assert!((value(cross_entropy(logits, &t, None).unwrap()) - 4f64.ln()).abs() < 1e-10);
}

#[test]
fn kl_vanishes_at_the_prior_and_matches_closed_form() {
    let tape = Tape::new();
    let zero = Latent {
        mean: tape.constant(Tensor::zeros([2, 3, 2, 2, 1])),
        logvar: tape.constant(Tensor::zeros([2, 3, 2, 2, 1])),
    };
    assert_eq!(value(kl_divergence(&zero).unwrap()), 0.0);
    // Two samples, one element each: mean 1, logvar ln 2 gives 0.5(1 + 2 - 1 - ln 2).
    let l = Latent {
        mean: tape.constant(Tensor::new([2, 1], vec![1.0, 0.0]).unwrap()),
        logvar: tape.constant(Tensor::new([2, 1], vec![2f64.ln(), 0.0]).unwrap()),
    };
    let expect = 0.5 * (2.0 - 2f64.ln()) / 2.0;
    assert!((value(kl_divergence(&l).unwrap()) - expect).abs() < 1e-15);
}

#[test]
fn perfect_hard_prediction_has_zero_lovasz() {
    let tape = Tape::new();
    let targets = [0u16, 2, 1, 1, 2, 0];
    let probs = Tensor::from_fn([6, 3], |i| if targets[i / 3] as usize == i % 3 { 1.0 } else { 0.0 });
    assert_eq!(value(lovasz_from_probs(tape.constant(probs), &targets).unwrap()), 0.0);
}

#[test]
fn six_voxel_binary_case_matches_level_sets() {
    let tape = Tape::new();
    let targets = [1u16, 1, 0, 1, 0, 0];
    let p1 = [0.9, 0.4, 0.7, 0.2, 0.1, 0.55];
    let probs: Vec<Vec<f64>> = p1.iter().map(|&p| vec![1.0 - p, p]).collect();
    let t = Tensor::new([6, 2], probs.concat()).unwrap();
    let got = value(lovasz_from_probs(tape.constant(t), &targets).unwrap());
    assert!((got - lovasz_oracle(&probs, &targets)).abs() < 1e-12);
}

#[test]
fn lovasz_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let logits = Tensor::randn([2, 4, 3, 2, 1], 1.0, &mut rng);
    let targets: Vec<u16> = (0..12).map(|_| rng.random_range(0..3)).collect();
    let report = cymba_core::tensor::gradcheck::check::<cymba_core::Error, _>(&[logits], 24, 1e-6, 14, |_, v| {
        lovasz_softmax(v[0], &targets)
    })
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn one_hot_batch_round_trips_through_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let grids = [random_grid([4, 4, 4], 5, &mut rng), random_grid([4, 4, 4], 5, &mut rng)];
    let x = one_hot_batch(&[&grids[0], &grids[1]]).unwrap();
    assert_eq!(argmax_grids(&x).unwrap(), grids.to_vec());
    let other = VoxelGrid::empty([4, 4, 8], 5);
    assert!(one_hot_batch(&[&grids[0], &other]).is_err());
}

#[test]
fn loss_terms_combine_with_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let tape = Tape::new();
    let logits = tape.constant(Tensor::randn([1, 3, 2, 2, 2], 1.0, &mut rng));
    let latent = Latent {
        mean: tape.constant(Tensor::randn([1, 2, 1, 1, 1], 1.0, &mut rng)),
        logvar: tape.constant(Tensor::randn([1, 2, 1, 1, 1], 1.0, &mut rng)),
    };
    let t: Vec<u16> = (0..8).map(|_| rng.random_range(0..3)).collect();
    let w = VaeLossWeights::default();
    assert_eq!((w.gamma, w.beta), (1.0, 0.001));
    let l = vae_loss(logits, &t, &latent, w).unwrap();
    let expect = value(l.ce) + value(l.lovasz) + 0.001 * value(l.kl) / 8.0;
    assert!((value(l.total) - expect).abs() < 1e-14);
    assert!(VaeLossWeights::new(-1.0, 0.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lovasz_matches_level_set_oracle(seed in any::<u64>(), n in 1usize..=8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let targets: Vec<u16> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let probs: Vec<Vec<f64>> = (0..n).map(|_| { let p: f64 = rng.random(); vec![1.0 - p, p] }).collect();
        let tape = Tape::new();
        let t = Tensor::new([n, 2], probs.concat()).unwrap();
        let got = value(lovasz_from_probs(tape.constant(t), &targets).unwrap());
        prop_assert!((got - lovasz_oracle(&probs, &targets)).abs() < 1e-9);
    }

    #[test]
    fn kl_is_non_negative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::new();
        let l = Latent {
            mean: tape.constant(Tensor::randn([2, 2, 2], 2.0, &mut rng)),
            logvar: tape.constant(Tensor::randn([2, 2, 2], 3.0, &mut rng)),
        };
        prop_assert!(value(kl_divergence(&l).unwrap()) >= 0.0);
    }

    #[test]
    fn raising_the_target_logit_lowers_ce(seed in any::<u64>(), bump in 0.01f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn([1, 4, 1], 1.0, &mut rng);
        let target = rng.random_range(0..4u16);
        let tape = Tape::new();
        let before = value(cross_entropy(tape.constant(x.clone()), &[target], None).unwrap());
        let mut raised = x.to_vec();
        raised[target as usize] += bump;
        let after = value(cross_entropy(tape.constant(Tensor::new([1, 4, 1], raised).unwrap()), &[target], None).unwrap());
        prop_assert!(after < before);
    }

    #[test]
    fn constant_logit_shift_keeps_softmax_and_lovasz(seed in any::<u64>(), shift in -20.0f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn([1, 3, 6], 1.0, &mut rng);
        let targets: Vec<u16> = (0..6).map(|_| rng.random_range(0..3)).collect();
        let tape = Tape::new();
        let a = tape.constant(x.clone());
        let b = tape.constant(x.map(|v| v + shift));
        let pa = cymba_core::nn::class_rows(a).unwrap().softmax().unwrap().value();
        let pb = cymba_core::nn::class_rows(b).unwrap().softmax().unwrap().value();
        assert_close(&pa, &pb, 1e-12);
        let la = value(lovasz_softmax(a, &targets).unwrap());
        let lb = value(lovasz_softmax(b, &targets).unwrap());
        prop_assert!((la - lb).abs() < 1e-12);
    }
}
