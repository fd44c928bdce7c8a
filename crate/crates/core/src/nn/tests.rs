use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{grad_check, AdamConfig, ParamStore, Tape, Var};
use crate::grid::Tensor;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn randomize(store: &mut ParamStore<f64>, seed: u64, amp: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = rng.random_range(-amp..amp);
        }
    }
}

/// Scalar probe `sum(out * w)` with fixed random weights.
fn probe(tape: &mut Tape<f64>, out: Var, seed: u64) -> crate::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(tape.shape(out), &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

fn conv_count(cin: usize, cout: usize, k: usize) -> usize {
    cin * cout * k * k + cout
}

fn block_count(cin: usize, cout: usize, k: usize) -> usize {
    conv_count(cin, cout, k) + 2 * cout
}

fn attention_count(c: usize, cond: usize, cfg: &AttentionConfig) -> usize {
    let k2 = cfg.kernel * cfg.kernel;
    let hid = c.div_ceil(cfg.reduction);
    2 * (c * k2 + c) + conv_count(c, c, 1) + (c + cond) * hid + hid + hid * c + c
}

fn translator_count(c: usize, cond: usize, cfg: &AttentionConfig) -> usize {
    attention_count(c, cond, cfg) + conv_count(c, 2 * c, 1) + conv_count(2 * c, c, 1)
}

fn mean_count(cfg: &MeanNetConfig) -> usize {
    let k = cfg.kernel;
    let w = &cfg.widths;
    let mut n = 0;
    let mut prev = cfg.c_in;
    for &wl in w {
        n += block_count(prev, wl, k) + block_count(wl, wl, k);
        prev = wl;
    }
    let top = *w.last().unwrap();
    let hid = cfg.translator_channels;
    n += conv_count(cfg.t_in * top, hid, 1);
    n += cfg.translator_blocks * translator_count(hid, 0, &cfg.attention);
    n += conv_count(hid, top, 1);
    for l in 0..w.len() - 1 {
        n += block_count(w[l] + w[l + 1], w[l], k) + block_count(w[l], w[l], k);
    }
    let mut prev = w[0];
    for &u in &cfg.up_widths {
        n += block_count(prev, u, k);
        prev = u;
    }
    n + conv_count(prev, cfg.c_out, k)
}

fn dense_block_count(c: usize, g: usize, k: usize) -> usize {
    (0..3).map(|i| conv_count(c + i * g, g, k)).sum::<usize>() + conv_count(c + 3 * g, c, 1)
}

fn denoiser_count(cfg: &DenoiserConfig) -> usize {
    let (k, e, w, g) = (cfg.kernel, cfg.embed_dim, &cfg.widths, &cfg.growth);
    let mut n = 2 * cfg.fourier_features * e + e + e * e + e;
    for l in 0..w.len() {
        let cin = if l == 0 { cfg.channels + cfg.cond_channels } else { w[l - 1] };
        n += conv_count(cin, w[l], k) + e * w[l] + w[l] + dense_block_count(w[l], g[l], k);
    }
    let top = *w.last().unwrap();
    n += cfg.translator_blocks * translator_count(top, cfg.cond_channels, &cfg.attention);
    for l in 0..w.len() - 1 {
        n += conv_count(w[l] + w[l + 1], w[l], k) + dense_block_count(w[l], g[l], k);
    }
    n + conv_count(w[0], cfg.channels, k)
}

#[test]
fn single_conv_count() {
    let mut store = ParamStore::<f32>::new();
    let mut init = Init::new(&mut store, 0);
    Conv::new(&mut init, "c", 2, 4, 3, true).unwrap();
    assert_eq!(count_params(&store), 76);
}

#[test]
fn desk_counts_match_layer_arithmetic() {
    let mut store = ParamStore::<f32>::new();
    MeanNet::new(MeanNetConfig::default(), &mut store, 0).unwrap();
    assert_eq!(count_params(&store), mean_count(&MeanNetConfig::default()));
    assert!(count_params(&store) <= 1_000_000);

    let mut store = ParamStore::<f32>::new();
    DenoiserNet::new(DenoiserConfig::default(), &mut store, 0).unwrap();
    assert_eq!(count_params(&store), denoiser_count(&DenoiserConfig::default()));
    assert!(count_params(&store) <= 200_000);
}

#[test]
fn full_scale_counts_fall_in_range() {
    let mut store = ParamStore::<f32>::new();
    MeanNet::new(MeanNetConfig::full_scale(), &mut store, 0).unwrap();
    let n = count_params(&store);
    assert!((5_000_000..=50_000_000).contains(&n), "mean {n}");
    let mut store = ParamStore::<f32>::new();
    DenoiserNet::new(DenoiserConfig::full_scale(), &mut store, 0).unwrap();
    let n = count_params(&store);
    assert!((500_000..=5_000_000).contains(&n), "denoiser {n}");
}

#[test]
fn tau_identity_initialization() {
    let mut store = ParamStore::<f64>::new();
    let tau = TauBlock::new(&mut Init::new(&mut store, 1), "t", 4, &AttentionConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&[2, 4, 8, 8], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = tau.forward(&mut tape, &store, xv).unwrap();
    assert_eq!(tape.value(y), &x);
    let wrong = tape.constant(Tensor::zeros(&[1, 3, 8, 8]));
    assert!(tau.forward(&mut tape, &store, wrong).is_err());
}

#[test]
fn tau_weights_are_bounded_and_gradients_match() {
    let mut store = ParamStore::<f64>::new();
    let tau = TauBlock::new(&mut Init::new(&mut store, 1), "t", 4, &AttentionConfig::default()).unwrap();
    randomize(&mut store, 9, 3.0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&[1, 4, 8, 8], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let da = tau.dynamical_weights(&mut tape, &store, xv).unwrap();
    assert!(tape.value(da).data().iter().all(|&d| d > 0.0 && d < 1.0));

    randomize(&mut store, 9, 0.5);
    let report = grad_check(&mut store, 1e-4, |tape, store| {
        let xv = tape.constant(x.clone());
        let y = tau.forward(tape, store, xv)?;
        probe(tape, y, 5)
    })
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn cau_identity_and_conditioning() {
    let cfg = AttentionConfig::default();
    let mut store = ParamStore::<f64>::new();
    let cau = CauBlock::new(&mut Init::new(&mut store, 1), "c", 4, 2, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&[1, 4, 8, 8], &mut rng);
    let cond = rand_tensor(&[1, 2, 8, 8], &mut rng);
    let mut tape = Tape::new();
    let (xv, cv) = (tape.constant(x.clone()), tape.constant(cond.clone()));
    let y = cau.forward(&mut tape, &store, xv, cv).unwrap();
    assert_eq!(tape.value(y), &x);
    let bad = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
    assert!(cau.forward(&mut tape, &store, xv, bad).is_err());

    randomize(&mut store, 2, 1.0);
    let mut swapped = cond.clone();
    let plane = 64;
    let (a, b) = swapped.data_mut().split_at_mut(plane);
    a.swap_with_slice(b);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let (c1, c2) = (tape.constant(cond.clone()), tape.constant(swapped));
    let d1 = cau.dynamical_weights(&mut tape, &store, xv, c1).unwrap();
    let d2 = cau.dynamical_weights(&mut tape, &store, xv, c2).unwrap();
    assert_ne!(tape.value(d1), tape.value(d2));
    let y2 = cau.forward(&mut tape, &store, xv, c2).unwrap();
    assert_eq!(tape.shape(y2), &[1, 4, 8, 8]);
}

#[test]
fn cau_gradients_through_input_and_conditioning() {
    let mut store = ParamStore::<f64>::new();
    let cau = CauBlock::new(&mut Init::new(&mut store, 1), "c", 4, 2, &AttentionConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = store.add("x", rand_tensor(&[1, 4, 8, 8], &mut rng)).unwrap();
    let cond = store.add("cond", rand_tensor(&[1, 2, 8, 8], &mut rng)).unwrap();
    randomize(&mut store, 3, 0.5);
    let report = grad_check(&mut store, 1e-4, |tape, store| {
        let (xv, cv) = (tape.param(store, x), tape.param(store, cond));
        let y = cau.forward(tape, store, xv, cv)?;
        probe(tape, y, 8)
    })
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn translator_and_conv_blocks_pass_grad_check() {
    let mut store = ParamStore::<f64>::new();
    let mut init = Init::new(&mut store, 1);
    let tb = TranslatorBlock::new(&mut init, "tb", 4, 0, &AttentionConfig::default()).unwrap();
    let cb = ConvBlock::new(&mut init, "cb", 4, 4, 3, 2).unwrap();
    randomize(&mut store, 11, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_tensor(&[2, 4, 6, 6], &mut rng);
    let report = grad_check(&mut store, 1e-4, |tape, store| {
        let xv = tape.constant(x.clone());
        let h = cb.forward(tape, store, xv)?;
        let y = tb.forward(tape, store, h, None)?;
        probe(tape, y, 13)
    })
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

fn tiny_mean() -> MeanNetConfig {
    MeanNetConfig {
        t_in: 2,
        c_in: 3,
        c_out: 2,
        factor: 2,
        widths: vec![4, 4],
        translator_channels: 4,
        translator_blocks: 1,
        up_widths: vec![4],
        kernel: 3,
        norm_groups: 2,
        attention: AttentionConfig::default(),
        input_skip: true,
    }
}

fn tiny_denoiser() -> DenoiserConfig {
    DenoiserConfig {
        widths: vec![4, 4],
        growth: vec![2, 2],
        translator_blocks: 1,
        fourier_features: 2,
        embed_dim: 4,
        ..DenoiserConfig::default()
    }
}

#[test]
fn mean_net_passes_grad_check() {
    let mut store = ParamStore::<f64>::new();
    let net = MeanNet::new(tiny_mean(), &mut store, 3).unwrap();
    randomize(&mut store, 14, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = rand_tensor(&[1, 2, 3, 4, 4], &mut rng);
    let report = grad_check(&mut store, 1e-4, |tape, store| {
        let xv = tape.constant(x.clone());
        let y = net.forward(tape, store, xv)?;
        probe(tape, y, 16)
    })
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn denoiser_passes_grad_check() {
    let mut store = ParamStore::<f64>::new();
    let net = DenoiserNet::new(tiny_denoiser(), &mut store, 3).unwrap();
    randomize(&mut store, 17, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x = rand_tensor(&[1, 2, 8, 8], &mut rng);
    let cond = rand_tensor(&[1, 2, 8, 8], &mut rng);
    let report = grad_check(&mut store, 1e-4, |tape, store| {
        let xv = tape.constant(x.clone());
        let cv = tape.constant(cond.clone());
        let y = net.forward(tape, store, xv, cv, &[0.7])?;
        probe(tape, y, 19)
    })
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn mean_net_shape_contract_and_zero_head() {
    let mut store = ParamStore::<f32>::new();
    let net = MeanNet::new(MeanNetConfig::default(), &mut store, 0).unwrap();
    let x = Tensor::<f32>::zeros(&[4, 3, 16, 16]);
    let y = net.predict(&store, &x).unwrap();
    assert_eq!(y.shape(), &[2, 64, 64]);
    assert!(y.data().iter().all(|&v| v == 0.0));
    assert!(net.predict(&store, &Tensor::zeros(&[3, 3, 16, 16])).is_err());
    assert!(net.predict(&store, &Tensor::zeros(&[4, 2, 16, 16])).is_err());
}

#[test]
fn mean_net_is_deterministic() {
    let mut s1 = ParamStore::<f32>::new();
    let net = MeanNet::new(tiny_mean(), &mut s1, 5).unwrap();
    let mut s2 = ParamStore::<f32>::new();
    MeanNet::new(tiny_mean(), &mut s2, 5).unwrap();
    let mut s64 = s1.cast::<f64>();
    randomize(&mut s64, 1, 0.3);
    s1.load_values_from(&s64).unwrap();
    s2.load_values_from(&s64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&[2, 3, 8, 8], &mut rng).cast::<f32>();
    let a = net.predict(&s1, &x).unwrap();
    let b = net.predict(&s2, &x).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn mean_net_fits_a_single_batch() {
    let cfg = MeanNetConfig {
        widths: vec![8, 16],
        translator_channels: 16,
        up_widths: vec![8],
        norm_groups: 4,
        ..tiny_mean()
    };
    let mut store = ParamStore::<f32>::new();
    let net = MeanNet::new(cfg, &mut store, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&[4, 2, 3, 8, 8], &mut rng).cast::<f32>();
    let y = rand_tensor(&[4, 2, 16, 16], &mut rng).cast::<f32>();
    let adam = AdamConfig {
        lr: 3e-3,
        ..AdamConfig::default()
    };
    let mut losses = Vec::new();
    for _ in 0..50 {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let p = net.forward(&mut tape, &store, xv).unwrap();
        let l = tape.mse(p, yv).unwrap();
        losses.push(tape.value(l).data()[0]);
        let g = tape.backward(l).unwrap();
        store.set_grads(&g);
        store.adam_step(&adam).unwrap();
    }
    assert!(losses[49] <= 0.5 * losses[0], "{} -> {}", losses[0], losses[49]);
}

#[test]
fn denoiser_contract() {
    let mut store = ParamStore::<f64>::new();
    let net = DenoiserNet::new(tiny_denoiser(), &mut store, 1).unwrap();
    randomize(&mut store, 2, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&[1, 2, 8, 8], &mut rng);
    let c = rand_tensor(&[1, 2, 8, 8], &mut rng);
    let mut tape = Tape::new();
    let (xv, cv) = (tape.constant(x), tape.constant(c));
    let a = net.forward(&mut tape, &store, xv, cv, &[0.1]).unwrap();
    let b = net.forward(&mut tape, &store, xv, cv, &[10.0]).unwrap();
    assert_eq!(tape.shape(a), &[1, 2, 8, 8]);
    assert_ne!(tape.value(a), tape.value(b));
    assert!(net.forward(&mut tape, &store, xv, cv, &[0.0]).is_err());
    assert!(net.forward(&mut tape, &store, xv, cv, &[-1.0]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn shape_contract_over_random_configs(
        t_in in 1usize..4,
        levels in 1usize..3,
        base in 1usize..3,
        factor_pow in 0u32..3,
        n in 1usize..3,
        side in 1usize..3,
        seed in 0u64..100,
    ) {
        let widths: Vec<usize> = (0..levels).map(|l| 2 * base * (l + 1)).collect();
        let factor = 1usize << factor_pow;
        let mcfg = MeanNetConfig {
            t_in,
            factor,
            widths: widths.clone(),
            translator_channels: 4,
            up_widths: vec![4; factor_pow as usize],
            norm_groups: 2,
            ..tiny_mean()
        };
        let mut store = ParamStore::<f32>::new();
        let net = MeanNet::new(mcfg.clone(), &mut store, seed).unwrap();
        let h = side * mcfg.coarse_multiple() * 2;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[n, t_in, 3, h, h]));
        let y = net.forward(&mut tape, &store, x).unwrap();
        prop_assert_eq!(tape.shape(y), &[n, 2, h * factor, h * factor]);

        let dcfg = DenoiserConfig {
            widths: widths.clone(),
            growth: vec![2; levels],
            ..tiny_denoiser()
        };
        let mut store = ParamStore::<f32>::new();
        let den = DenoiserNet::new(dcfg, &mut store, seed).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[n, 2, h, h]));
        let c = tape.constant(Tensor::zeros(&[n, 2, h, h]));
        let y = den.forward(&mut tape, &store, x, c, &vec![1.0; n]).unwrap();
        prop_assert_eq!(tape.shape(y), &[n, 2, h, h]);
    }
}
