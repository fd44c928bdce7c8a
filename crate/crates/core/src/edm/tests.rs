use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::autodiff::{ParamStore, Tape};
use crate::error::Error;
use crate::grid::{FieldSequence, Tensor};
use crate::nn::{DenoiserConfig, DenoiserNet};

fn normal(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| StandardNormal.sample(&mut rng))
}

fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

#[test]
fn schedule_endpoints_and_formula() {
    let s = NoiseSchedule::default().with_steps(2);
    assert_eq!(karras_sigmas(&s).unwrap(), vec![80.0, 0.002, 0.0]);
    assert_eq!(karras_sigmas(&s.with_steps(1)).unwrap(), vec![80.0, 0.0]);

    let s = NoiseSchedule::default().with_steps(10);
    let sig = karras_sigmas(&s).unwrap();
    let oracle = {
        let a = 80f64.powf(1.0 / 7.0);
        let b = 0.002f64.powf(1.0 / 7.0);
        (a + 5.0 / 9.0 * (b - a)).powi(7)
    };
    assert!((sig[5] - oracle).abs() < 1e-12);
    assert!(NoiseSchedule { sigma_min: 1.0, sigma_max: 0.5, ..s }.validate().is_err());
    assert!(NoiseSchedule { rho: 0.5, ..s }.validate().is_err());
}

proptest! {
    #[test]
    fn schedules_decrease_strictly(
        smin in 1e-4f64..0.5,
        ratio in 1.5f64..1e4,
        rho in 1.0f64..10.0,
        n in 1usize..64,
    ) {
        let s = NoiseSchedule { sigma_min: smin, sigma_max: smin * ratio, rho, n_steps: n };
        let sig = karras_sigmas(&s).unwrap();
        prop_assert_eq!(sig.len(), n + 1);
        prop_assert_eq!(sig[0], s.sigma_max);
        if n > 1 {
            prop_assert_eq!(sig[n - 1], s.sigma_min);
        }
        prop_assert!(sig.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn preconditioning_identities(sd in 0.05f64..5.0, sigma in 1e-3f64..100.0) {
        let p = Preconditioner::new(sd).unwrap();
        let s2 = sigma * sigma + sd * sd;
        prop_assert!((p.c_skip(sigma) * s2 - sd * sd).abs() <= 1e-12 * s2.max(1.0));
        prop_assert!((p.c_out(sigma).powi(2) * s2 - sigma * sigma * sd * sd).abs() <= 1e-12 * (sigma * sigma * sd * sd * s2).max(1.0));
        prop_assert!([p.c_skip(sigma), p.c_out(sigma), p.c_in(sigma), p.c_noise(sigma)].iter().all(|c| c.is_finite()));
    }
}

#[test]
fn preconditioner_examples() {
    let p = Preconditioner::new(0.5).unwrap();
    assert_eq!(p.c_skip(0.5), 0.5);
    assert!((p.c_skip(1e-6) - 1.0).abs() < 1e-11);
    assert!(p.c_out(1e-6) < 1e-5);
    assert!(Preconditioner::new(0.0).is_err());

    // zero network output leaves only the skip path
    let mut store = ParamStore::<f32>::new();
    let net = DenoiserNet::new(DenoiserConfig::default(), &mut store, 0).unwrap();
    let x = normal(&[1, 2, 8, 8], 1);
    let den = NetDenoiser::new(&net, &store, p, Tensor::zeros(&[1, 2, 8, 8]));
    let d = den.denoise(&x, &[1.3]).unwrap();
    let cs = p.c_skip(1.3);
    assert!(d.data().iter().zip(x.data()).all(|(a, b)| (a - cs * b).abs() < 1e-12));
    assert!(den.denoise(&x, &[0.0]).is_err());
    let d = den.denoise(&x, &[1e-6]).unwrap();
    assert!(d.data().iter().zip(x.data()).all(|(a, b)| (a - b).abs() < 1e-9));
    assert_eq!(den.evaluations(), 2);
}

#[test]
fn gaussian_oracle_loss_is_bayes_optimal() {
    // lambda(sigma) times the posterior variance sigma^2 sd^2 / (sigma^2 + sd^2) is exactly 1
    let sd = 0.7;
    let p = Preconditioner::new(sd).unwrap();
    let n = 10_000;
    let r = normal(&[n, 1], 2).map(|v| v * sd);
    let noise = normal(&[n, 1], 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sigmas: Vec<f64> = (0..n).map(|_| SigmaSampler::default().sample(&mut rng)).collect();
    let loss = score_loss_value(&p, &GaussianDenoiser { sigma_data: sd }, &r, &sigmas, &noise).unwrap();
    assert!((loss - 1.0).abs() < 0.05, "loss {loss}");
}

#[test]
fn zero_net_loss_matches_direct_expectation() {
    let sd = 0.5;
    let p = Preconditioner::new(sd).unwrap();
    let mut store = ParamStore::<f32>::new();
    let net = DenoiserNet::new(DenoiserConfig::default(), &mut store, 0).unwrap();
    let noise = normal(&[2, 2, 8, 8], 5).cast::<f32>();
    let r = Tensor::<f32>::zeros(&[2, 2, 8, 8]);
    let mut tape = Tape::new();
    let l = score_loss(&mut tape, &store, &net, &p, &r, &r, &[sd, sd], &noise).unwrap();
    let got = tape.value(l).data()[0] as f64;
    let cs = p.c_skip(sd);
    let direct = p.loss_weight(sd)
        * noise.data().iter().map(|&e| (cs * sd * e as f64).powi(2)).sum::<f64>()
        / noise.len() as f64;
    assert!((got - direct).abs() < 1e-6 * direct);
    assert!(got >= 0.0);
    let via_value = score_loss_value(&p, &ZeroDenoiser, &r.to_f64(), &[sd, sd], &noise.to_f64()).unwrap();
    assert!(via_value >= 0.0);
}

#[test]
fn score_loss_backpropagates_into_the_network() {
    let p = Preconditioner::new(0.5).unwrap();
    let mut store = ParamStore::<f32>::new();
    let net = DenoiserNet::new(DenoiserConfig::default(), &mut store, 0).unwrap();
    let r = normal(&[2, 2, 8, 8], 6).cast::<f32>();
    let noise = normal(&[2, 2, 8, 8], 7).cast::<f32>();
    let mut tape = Tape::new();
    let l = score_loss(&mut tape, &store, &net, &p, &r, &r, &[0.3, 2.0], &noise).unwrap();
    let g = tape.backward(l).unwrap();
    let head = store.id("den.head.w").unwrap();
    assert!(g.param(head).unwrap().max_abs() > 0.0);
    assert!(score_loss(&mut tape, &store, &net, &p, &r, &r, &[0.3], &noise).is_err());
}

/// Gain applied to the initial unit noise by the deterministic sampler on Gaussian data,
/// by direct scalar recursion.
fn scalar_gain(n: usize, sd: f64) -> f64 {
    let s = NoiseSchedule::default().with_steps(n);
    let (a, b) = (s.sigma_max.powf(1.0 / s.rho), s.sigma_min.powf(1.0 / s.rho));
    let mut sig: Vec<f64> = (0..n)
        .map(|i| if n == 1 { s.sigma_max } else { (a + i as f64 / (n - 1) as f64 * (b - a)).powf(s.rho) })
        .collect();
    sig.push(0.0);
    let d = |x: f64, t: f64| sd * sd * x / (sd * sd + t * t);
    let mut x = sig[0];
    for i in 0..n {
        let (t, tn) = (sig[i], sig[i + 1]);
        let k0 = (x - d(x, t)) / t;
        let mut xe = x + (tn - t) * k0;
        if tn > 0.0 {
            let k1 = (xe - d(xe, tn)) / tn;
            xe = x + (tn - t) * 0.5 * (k0 + k1);
        }
        x = xe;
    }
    x
}

#[test]
fn heun_matches_scalar_recursion_and_reproduces_gaussian_data() {
    let sd = 0.8;
    let den = GaussianDenoiser { sigma_data: sd };
    let cfg = SamplerConfig {
        seed: 11,
        ..SamplerConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let noise: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
    for n in [18usize, 256] {
        let x = heun_sample(&den, &[10_000], &NoiseSchedule::default().with_steps(n), &cfg).unwrap();
        let g = scalar_gain(n, sd);
        for (a, e) in x.data().iter().zip(&noise) {
            assert!((a - g * e).abs() <= 1e-9 * (1.0 + a.abs()));
        }
    }
    // the N=18 discretization inflates the spread by a few percent; the fine schedule is exact to 2%
    let x = heun_sample(&den, &[10_000], &NoiseSchedule::default().with_steps(256), &cfg).unwrap();
    let (m, s) = moments(x.data());
    assert!((s / sd - 1.0).abs() < 0.02, "std {s}");
    assert!(m.abs() < 0.02 * sd, "mean {m}");
}

fn heun_error(n: usize, reference: &Tensor<f64>) -> f64 {
    let den = GaussianDenoiser { sigma_data: 1.0 };
    let cfg = SamplerConfig::default();
    let x = heun_sample(&den, &[256], &NoiseSchedule::default().with_steps(n), &cfg).unwrap();
    x.data().iter().zip(reference.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

#[test]
fn heun_converges_at_second_order() {
    let den = GaussianDenoiser { sigma_data: 1.0 };
    let reference = heun_sample(&den, &[256], &NoiseSchedule::default().with_steps(256), &SamplerConfig::default()).unwrap();
    let ns = [8usize, 16, 32, 64];
    let pts: Vec<(f64, f64)> = ns.iter().map(|&n| ((n as f64).ln(), heun_error(n, &reference).ln())).collect();
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / 4.0;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / 4.0;
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
        / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    assert!(slope <= -1.8, "slope {slope}");
}

#[test]
fn one_step_zero_denoiser_lands_on_zero() {
    let s = NoiseSchedule::default().with_steps(1);
    let x = heun_sample(&ZeroDenoiser, &[5], &s, &SamplerConfig::default()).unwrap();
    assert!(x.data().iter().all(|&v| v == 0.0));
}

#[test]
fn sampler_is_reproducible_and_seeded() {
    let den = GaussianDenoiser { sigma_data: 1.0 };
    let s = NoiseSchedule::default().with_steps(6);
    let cfg = SamplerConfig {
        seed: 3,
        ..SamplerConfig::default()
    };
    let a = heun_sample(&den, &[16], &s, &cfg).unwrap();
    let b = heun_sample(&den, &[16], &s, &cfg).unwrap();
    assert_eq!(a, b);

    let one = sample_ensemble(&den, &[16], &s, &cfg, 1).unwrap();
    let single = heun_sample(&den, &[16], &s, &SamplerConfig { seed: member_seed(3, 0), ..cfg }).unwrap();
    assert_eq!(one[0], single);

    let stoch = SamplerConfig {
        mode: SamplerMode::Stochastic,
        ..cfg
    };
    let members = sample_ensemble(&den, &[16], &s, &stoch, 3).unwrap();
    assert_ne!(members[0], members[1]);
    assert_ne!(members[1], members[2]);
    assert!(sample_ensemble(&den, &[16], &s, &cfg, 0).is_err());
}

struct Exploding;

impl Denoiser for Exploding {
    fn denoise(&self, x: &Tensor<f64>, sigma: &[f64]) -> crate::Result<Tensor<f64>> {
        let blow = sigma[0] < 1.0;
        Ok(x.map(|v| if blow { f64::NAN } else { v }))
    }
}

#[test]
fn non_finite_state_names_the_step() {
    let err = heun_sample(&Exploding, &[4], &NoiseSchedule::default(), &SamplerConfig::default()).unwrap_err();
    assert!(err.to_string().contains("step"), "{err}");
}

#[test]
fn ensemble_mean_beats_single_members() {
    // y_mean + r with r ~ N(0, sd^2): the ensemble mean is closer to y_mean + E[r] = y_mean
    let sd = 0.5;
    let den = GaussianDenoiser { sigma_data: sd };
    let s = NoiseSchedule::default();
    let cfg = SamplerConfig {
        seed: 21,
        ..SamplerConfig::default()
    };
    let y_mean = normal(&[64], 22);
    let members = sample_ensemble(&den, &[64], &s, &cfg, 64).unwrap();
    let finals: Vec<Tensor<f64>> = members
        .iter()
        .map(|r| r.zip_map(&y_mean, |a, b| a + b).unwrap())
        .collect();
    let l2 = |t: &Tensor<f64>| {
        t.data().iter().zip(y_mean.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    };
    let mut avg = Tensor::zeros(&[64]);
    for f in &finals {
        avg = avg.zip_map(f, |a, b| a + b / 64.0).unwrap();
    }
    let best_single = finals.iter().map(l2).fold(f64::INFINITY, f64::min);
    assert!(l2(&avg) < best_single);
}

fn tiny_sequences() -> (FieldSequence, FieldSequence, FieldSequence) {
    use crate::data::{gen_synthetic, make_pairs, SynthConfig};
    use crate::spectral::FilterSpec;
    let truth = gen_synthetic(&SynthConfig {
        n_lat: 16,
        n_lon: 16,
        steps: 24,
        seed: 3,
        ..SynthConfig::default()
    })
    .unwrap();
    let pairs = make_pairs(&truth, 2, 4, &FilterSpec::SpectralCutoff { k_c: 1.0 }).unwrap();
    // a crude stand-in for mean predictions: the interpolated coarse winds
    let guides = end2end_guides(&pairs.coarse, 2, 4).unwrap();
    let mut uv = Vec::new();
    for i in 0..guides.shape()[0] {
        uv.push(guides.index_axis0(i).unwrap().data()[..2 * 256].to_vec());
    }
    let mut meta = truth.meta.clone();
    meta.channel_names = vec!["u".into(), "v".into()];
    let mean = FieldSequence::new(meta, Tensor::new(&[23, 2, 16, 16], uv.concat()).unwrap()).unwrap();
    (truth, pairs.coarse, mean)
}

fn tiny_denoiser(store: &mut ParamStore<f32>, cond_channels: usize) -> DenoiserNet {
    let cfg = DenoiserConfig {
        cond_channels,
        widths: vec![8, 8],
        growth: vec![4, 4],
        translator_blocks: 1,
        embed_dim: 8,
        ..DenoiserConfig::default()
    };
    DenoiserNet::new(cfg, store, 4).unwrap()
}

#[test]
fn residual_closure_is_exact() {
    let (truth, _, mean) = tiny_sequences();
    let set = DiffusionSet::correction(&mean, &truth, 2).unwrap();
    assert_eq!(set.len(), 23);
    for i in [0usize, 11, 22] {
        let back = set.cond.index_axis0(i).unwrap().zip_map(&set.target.index_axis0(i).unwrap(), |a, b| a + b).unwrap();
        for (c, name) in ["u", "v"].iter().enumerate() {
            let ch = truth.meta.channel(name).unwrap();
            let want = truth.plane(i + 1, ch);
            let got = &back.data()[c * 256..(c + 1) * 256];
            for (a, b) in got.iter().zip(want) {
                // one rounding in the subtraction, one in the addition
                assert!((a - b).abs() <= 2.0 * f32::EPSILON * a.abs().max(b.abs()).max(1.0));
            }
        }
    }
}

#[test]
fn sigma_data_is_pooled_target_spread() {
    let (truth, _, mean) = tiny_sequences();
    let set = DiffusionSet::correction(&mean, &truth, 2).unwrap();
    let idx: Vec<usize> = (0..set.len()).collect();
    let vals: Vec<f64> = set.target.data().iter().map(|&v| v as f64).collect();
    // two-pass population spread
    let m = vals.iter().sum::<f64>() / vals.len() as f64;
    let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
    assert!((set.sigma_data(&idx).unwrap() - sd).abs() < 1e-9 * sd.max(1.0));
}

#[test]
fn diffusion_training_runs_and_is_reproducible() {
    let (truth, coarse, mean) = tiny_sequences();
    let cfg = DiffTrainConfig {
        epochs: 2,
        batch: 4,
        seed: 9,
        ..DiffTrainConfig::default()
    };
    for set in [
        DiffusionSet::correction(&mean, &truth, 2).unwrap(),
        DiffusionSet::end2end(&coarse, &truth, 2, 4).unwrap(),
    ] {
        let run = || {
            let mut store = ParamStore::new();
            let net = tiny_denoiser(&mut store, set.cond.shape()[1]);
            let (best, sd, log) = train_diffusion(&set, &net, &mut store, &cfg).unwrap();
            (best.encode_wts1(), sd, log.steps_csv())
        };
        let a = run();
        assert!(a.1 > 0.0);
        assert!(a.2.lines().count() > 2);
        assert_eq!(a, run());
    }
}

#[test]
fn wrong_guide_channels_are_rejected() {
    let (truth, coarse, _) = tiny_sequences();
    let set = DiffusionSet::end2end(&coarse, &truth, 2, 4).unwrap();
    let mut store = ParamStore::new();
    let net = tiny_denoiser(&mut store, 2);
    assert!(matches!(
        train_diffusion(&set, &net, &mut store, &DiffTrainConfig::default()),
        Err(Error::Shape(_))
    ));
}

#[test]
fn field_sampling_counts_evaluations() {
    let (_, _, mean) = tiny_sequences();
    let mut store = ParamStore::new();
    let net = tiny_denoiser(&mut store, 2);
    let meta = DiffusionMeta {
        mode: DiffusionMode::Correction,
        sigma_data: 0.5,
        t_in: 2,
        factor: 2,
        net: net.config.clone(),
    };
    let cond = mean.window(0, 3).unwrap().into_data();
    let cfg = SamplerConfig::default();
    let mut per_field = Vec::new();
    for n in [4usize, 8] {
        let sched = NoiseSchedule::default().with_steps(n);
        // one batch holds all 3 frames x 2 members
        let (fields, evals) = sample_fields(&net, &store, &meta, &cond, &sched, &cfg, 2, 6).unwrap();
        assert_eq!(fields.len(), 2);
        assert_eq!(fields[0].shape(), &[3, 2, 16, 16]);
        assert_ne!(fields[0], fields[1]);
        per_field.push(evals / 6);
    }
    // Heun: two evaluations per step, one on the final step into sigma = 0
    assert_eq!(per_field, vec![2 * 4 - 1, 2 * 8 - 1]);
    // splitting into batches does not change the samples
    let sched = NoiseSchedule::default().with_steps(4);
    let (a, _) = sample_fields(&net, &store, &meta, &cond, &sched, &cfg, 2, 6).unwrap();
    let (b, evals) = sample_fields(&net, &store, &meta, &cond, &sched, &cfg, 2, 1).unwrap();
    assert_eq!(evals, 6 * 7);
    for (x, y) in a.iter().zip(&b) {
        let err = x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()).fold(0.0f32, f32::max);
        assert!(err < 1e-4, "{err}");
    }
}

#[test]
fn diffusion_meta_sidecar_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("diff.wts");
    let meta = DiffusionMeta {
        mode: DiffusionMode::End2end,
        sigma_data: 0.75,
        t_in: 4,
        factor: 4,
        net: DenoiserConfig::default(),
    };
    meta.save(&ckpt).unwrap();
    assert!(dir.path().join("diff.wts.json").exists());
    assert_eq!(DiffusionMeta::load(&ckpt).unwrap(), meta);
}
