use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::grid::Tensor;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn add_zero_is_identity() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
    let z = tape.constant(Tensor::zeros(&[3]));
    let y = tape.add(x, z).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
    let y = tape.softmax(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn identity_center_kernel_reproduces_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&[1, 2, 6, 7], &mut rng);
    let mut w = Tensor::zeros(&[2, 2, 3, 3]);
    for c in 0..2 {
        w.data_mut()[(c * 2 + c) * 9 + 4] = 1.0;
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w);
    let y = tape.conv2d(xv, wv, None).unwrap();
    assert_eq!(tape.value(y), &x);

    // off-center tap: shift by one column with zero fill at the border
    let mut w = Tensor::zeros(&[1, 1, 3, 3]);
    w.data_mut()[5] = 1.0; // reads x[i, j + 1]
    let x1 = rand_tensor(&[1, 1, 4, 4], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x1.clone());
    let wv = tape.constant(w);
    let y = tape.conv2d(xv, wv, None).unwrap();
    let yv = tape.value(y).data();
    for i in 0..4 {
        for j in 0..4 {
            let want = if j + 1 < 4 { x1.data()[i * 4 + j + 1] } else { 0.0 };
            assert_eq!(yv[i * 4 + j], want);
        }
    }
}

#[test]
fn square_derivative() {
    let mut tape = Tape::<f64>::new();
    let x = tape.variable(Tensor::scalar(3.0));
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[6.0]);
}

#[test]
fn linear_map_weight_gradient() {
    // y = sum(W x), W: [2, 3], x: [3, 1]  =>  dW[i][j] = x[j]
    let mut store = ParamStore::<f64>::new();
    let wid = store
        .add("w", Tensor::new(&[2, 3], vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]).unwrap())
        .unwrap();
    let xs = vec![1.5, -2.0, 0.25];
    let mut tape = Tape::new();
    let w = tape.param(&store, wid);
    let x = tape.constant(Tensor::new(&[3, 1], xs.clone()).unwrap());
    let y = tape.matmul(w, x).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    let dw = g.param(wid).unwrap();
    assert_eq!(dw.data(), &[1.5, -2.0, 0.25, 1.5, -2.0, 0.25]);
}

#[test]
fn backward_on_foreign_or_reset_tape_is_a_state_error() {
    let mut a = Tape::<f64>::new();
    let x = a.variable(Tensor::scalar(1.0));
    let b = Tape::<f64>::new();
    assert!(matches!(b.backward(x), Err(Error::State(_))));
    a.reset();
    assert!(matches!(a.backward(x), Err(Error::State(_))));
}

#[test]
fn unreachable_parameters_get_zero() {
    let mut store = ParamStore::<f64>::new();
    let used = store.add("used", Tensor::scalar(2.0)).unwrap();
    let unused = store.add("unused", Tensor::scalar(5.0)).unwrap();
    let mut tape = Tape::new();
    let p = tape.param(&store, used);
    let y = tape.square(p).unwrap();
    let g = tape.backward(y).unwrap();
    store.set_grads(&g);
    assert_eq!(store.grad(used).unwrap().data(), &[4.0]);
    assert_eq!(store.grad(unused).unwrap().data(), &[0.0]);
}

#[test]
fn shape_errors_name_the_op() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[3, 2]));
    match tape.add(a, b) {
        Err(Error::Shape(msg)) => assert!(msg.starts_with("add"), "{msg}"),
        other => panic!("{other:?}"),
    }
    match tape.matmul(a, a) {
        Err(Error::Shape(msg)) => assert!(msg.contains("matmul") && msg.contains("[2, 3]")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn sigmoid_grad_check_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let id = store.add("x", rand_tensor(&[5], &mut rng)).unwrap();
    let r = rand_tensor(&[5], &mut rng);
    let report = grad_check(&mut store, 1e-8, |t, s| {
        let x = t.param(s, id);
        let y = t.sigmoid(x)?;
        let rv = t.constant(r.clone());
        let p = t.mul(y, rv)?;
        t.sum(p)
    })
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn groupnorm_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let x = store.add("x", rand_tensor(&[2, 4, 3, 3], &mut rng)).unwrap();
    let g = store.add("gamma", rand_tensor(&[4], &mut rng)).unwrap();
    let b = store.add("beta", rand_tensor(&[4], &mut rng)).unwrap();
    let r = rand_tensor(&[2, 4, 3, 3], &mut rng);
    let report = grad_check(&mut store, 1e-6, |t, s| {
        let (xv, gv, bv) = (t.param(s, x), t.param(s, g), t.param(s, b));
        let y = t.group_norm(xv, gv, bv, 2)?;
        let rv = t.constant(r.clone());
        let p = t.mul(y, rv)?;
        t.sum(p)
    })
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn zero_parameter_graph_passes_vacuously() {
    let mut store = ParamStore::<f64>::new();
    let report = grad_check(&mut store, 1e-4, |t, _| {
        let c = t.constant(Tensor::scalar(2.0));
        t.square(c)
    })
    .unwrap();
    assert!(report.passed());
    assert_eq!(report.entries_checked, 0);
}

#[test]
fn adam_examples() {
    let cfg = AdamConfig {
        lr: 0.1,
        ..AdamConfig::default()
    };
    let mut store = ParamStore::<f64>::new();
    let id = store.add("p", Tensor::scalar(1.0)).unwrap();
    assert!(matches!(
        store.adam_step(&cfg),
        Err(Error::MissingGradient(name)) if name == "p"
    ));
    store.zero_grad();
    store.adam_step(&cfg).unwrap();
    assert_eq!(store.value(id).data(), &[1.0]);

    let mut store = ParamStore::<f64>::new();
    let id = store.add("p", Tensor::scalar(1.0)).unwrap();
    store.zero_grad();
    store.grad_set_for_test(id, 1.0);
    store.adam_step(&cfg).unwrap();
    // fresh moments: m_hat = 1, v_hat = 1, step = lr / (1 + eps)
    let want = 1.0 - 0.1 / (1.0 + 1e-8);
    assert!((store.value(id).data()[0] - want).abs() < 1e-15);
    assert_eq!(store.step_count(), 1);

    // two steps on f(p) = (p - 3)^2 from p = 0
    let mut store = ParamStore::<f64>::new();
    let id = store.add("p", Tensor::scalar(0.0)).unwrap();
    let loss = |p: f64| (p - 3.0) * (p - 3.0);
    let before = loss(0.0);
    for _ in 0..2 {
        let p = store.value(id).data()[0];
        store.zero_grad();
        store.grad_set_for_test(id, 2.0 * (p - 3.0));
        store.adam_step(&cfg).unwrap();
    }
    assert!(loss(store.value(id).data()[0]) < before);
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", rand_tensor(&[2, 3, 3, 3], &mut rng)).unwrap();
    let x = rand_tensor(&[1, 3, 5, 5], &mut rng);
    let build = |t: &mut Tape<f64>, which: u8| {
        let wv = t.param(&store, w);
        let xv = t.constant(x.clone());
        let y = t.conv2d(xv, wv, None).unwrap();
        let a = t.silu(y).unwrap();
        let l1 = t.mean(a).unwrap();
        let sq = t.square(y).unwrap();
        let l2 = t.sum(sq).unwrap();
        match which {
            1 => l1,
            2 => l2,
            _ => t.add(l1, l2).unwrap(),
        }
    };
    let mut grads = Vec::new();
    for which in [1, 2, 3] {
        let mut t = Tape::new();
        let out = build(&mut t, which);
        grads.push(t.backward(out).unwrap().param(w).unwrap());
    }
    for k in 0..grads[0].len() {
        let sum = grads[0].data()[k] + grads[1].data()[k];
        assert!((sum - grads[2].data()[k]).abs() < 1e-12 * (1.0 + sum.abs()));
    }
}

#[test]
fn wts1_roundtrip() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f32>::new();
    store.add("enc.conv.w", rand_tensor(&[4, 2, 3, 3], &mut rng).cast()).unwrap();
    store.add("enc.conv.b", rand_tensor(&[4], &mut rng).cast()).unwrap();
    let bytes = store.encode_wts1();
    assert_eq!(&bytes[..4], b"WTS1");
    let back = ParamStore::<f32>::decode_wts1(&bytes).unwrap();
    assert_eq!(back.count(), store.count());
    for id in store.ids() {
        let bid = back.id(store.name(id)).unwrap();
        assert_eq!(back.value(bid), store.value(id));
    }
    assert!(ParamStore::<f32>::decode_wts1(&bytes[..bytes.len() - 1]).is_err());
}
