use htr_core::gradcheck::{check, GradCheckOptions};
use htr_core::tensor::{Graph, ParamStore, Tensor, Var};
use htr_core::HtrError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Projects an op output onto fixed random weights so every output element
/// influences the checked scalar.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> htr_core::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = rand_vec(&mut rng, g.value(out).numel());
    let p = g.mul_const(out, w)?;
    Ok(g.sum(p))
}

fn inputs(rng: &mut ChaCha8Rng, spec: &[(&str, &[usize])]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (name, shape) in spec {
        let n = shape.iter().product();
        s.add(*name, t(shape, &rand_vec(rng, n)), true);
    }
    s
}

fn assert_check(name: &str, store: &ParamStore<f64>, f: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> htr_core::Result<Var>) {
    let r = check(name, store, f, GradCheckOptions::default()).unwrap();
    assert!(r.passed, "{r} worst {:?}", r.worst);
}

#[test]
fn affine_examples() {
    let mut g = Graph::<f64>::new();
    let w = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let x = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
    let b0 = g.constant(t(&[2], &[0., 0.]));
    let y = g.affine(x, w, b0).unwrap();
    assert_eq!(g.data(y), &[1., 2., 3., 4.]);

    let x1 = g.constant(t(&[1, 2], &[1., 1.]));
    let b10 = g.constant(t(&[2], &[10., 10.]));
    let y = g.affine(x1, w, b10).unwrap();
    assert_eq!(g.data(y), &[14., 16.]);

    let wz = g.constant(Tensor::zeros(&[2, 3]));
    let bz = g.constant(Tensor::zeros(&[3]));
    let y = g.affine(x, wz, bz).unwrap();
    assert!(g.data(y).iter().all(|&v| v == 0.0));

    let bad = g.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(g.affine(x, bad, b0), Err(HtrError::Dimension(_))));
}

#[test]
fn conv2d_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
    let ident = g.constant(t(&[1, 1, 1, 1], &[1.]));
    let y = g.conv2d(x, ident, (0, 0)).unwrap();
    assert_eq!(g.data(y), g.data(x));

    let ones = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
    let y = g.conv2d(x, ones, (0, 0)).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 1, 1]);
    assert_eq!(g.data(y), &[10.]);

    let big = g.constant(Tensor::zeros(&[1, 1, 32, 100]));
    let k = g.constant(Tensor::zeros(&[5, 1, 3, 3]));
    let y = g.conv2d(big, k, (1, 1)).unwrap();
    assert_eq!(g.shape(y), &[1, 5, 32, 100]);

    let k3 = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
    assert!(matches!(g.conv2d(x, k3, (0, 0)), Err(HtrError::Dimension(_))));
}

#[test]
fn conv2d_is_cross_correlation() {
    // A kernel with a single tap at (0,1) reads the right-hand neighbour.
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[1, 1, 1, 3], &[1., 2., 3.]));
    let k = g.constant(t(&[1, 1, 1, 2], &[0., 1.]));
    let y = g.conv2d(x, k, (0, 0)).unwrap();
    assert_eq!(g.data(y), &[2., 3.]);
}

#[test]
fn maxpool_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
    let y = g.maxpool2d(x, 2, 2).unwrap();
    assert_eq!(g.data(y), &[4.]);
    let y = g.maxpool2d(x, 2, 1).unwrap();
    assert_eq!(g.data(y), &[3., 4.]);
    let c = g.constant(Tensor::full(&[1, 2, 4, 6], 0.5));
    let y = g.maxpool2d(c, 2, 2).unwrap();
    assert_eq!(g.shape(y), &[1, 2, 2, 3]);
    assert!(g.data(y).iter().all(|&v| v == 0.5));
    assert!(matches!(g.maxpool2d(x, 3, 1), Err(HtrError::Dimension(_))));
}

#[test]
fn maxpool_ties_route_gradient_to_first_index() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::full(&[1, 1, 2, 2], 1.0));
    let y = g.maxpool2d(x, 2, 2).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[1., 0., 0., 0.]);
}

#[test]
fn maxpool_drops_trailing_cells() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 5, 7]));
    let y = g.maxpool2d(x, 2, 2).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 2, 3]);
}

#[test]
fn leaky_relu_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t(&[2], &[5., -1.]));
    let y = g.leaky_relu(x, 0.01);
    assert_eq!(g.data(y)[0], 5.0);
    assert!((g.data(y)[1] + 0.01).abs() < 1e-15);

    let mut s = ParamStore::new();
    s.add("x", t(&[1], &[-2.0]), true);
    let r = check("leaky", &s, |g, s| {
        let x = g.param(s, s.id("x").unwrap());
        let y = g.leaky_relu(x, 0.01);
        Ok(g.sum(y))
    }, GradCheckOptions::default())
    .unwrap();
    assert!(r.passed);
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t(&[1], &[-2.0]));
    let y = g.leaky_relu(x, 0.01);
    let l = g.sum(y);
    let d = g.backward(l).unwrap().get(x).unwrap()[0];
    assert!((d - 0.01).abs() < 1e-6);
}

#[test]
fn batch_norm_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[2, 3, 2, 4], &rand_vec(&mut rng, 48)));
    let one = g.constant(Tensor::full(&[3], 1.0));
    let zero = g.constant(Tensor::zeros(&[3]));
    let bn = g.batch_norm_train(x, one, zero, 1e-5, None).unwrap();
    let y = g.data(bn.out);
    for c in 0..3 {
        let vals: Vec<f64> = (0..2).flat_map(|b| y[(b * 3 + c) * 8..(b * 3 + c + 1) * 8].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / 16.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-3, "{var}");
    }

    let beta = g.constant(t(&[3], &[0.1, -0.2, 0.3]));
    let bn = g.batch_norm_train(x, zero, beta, 1e-5, None).unwrap();
    for (i, v) in g.data(bn.out).iter().enumerate() {
        assert_eq!(*v, [0.1, -0.2, 0.3][(i / 8) % 3]);
    }

    let c = g.constant(Tensor::full(&[2, 3, 2, 4], 7.0));
    let bn = g.batch_norm_train(c, one, beta, 1e-5, None).unwrap();
    for (i, v) in g.data(bn.out).iter().enumerate() {
        assert_eq!(*v, [0.1, -0.2, 0.3][(i / 8) % 3]);
    }
}

#[test]
fn batch_norm_train_requires_two_positions() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 1, 1]));
    let one = g.constant(Tensor::full(&[1], 1.0));
    let zero = g.constant(Tensor::zeros(&[1]));
    assert!(matches!(g.batch_norm_train(x, one, zero, 1e-5, None), Err(HtrError::Contract(_))));
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f64>::new();
    let one = g.constant(Tensor::full(&[2], 1.0));
    let zero = g.constant(Tensor::zeros(&[2]));
    let x = g.constant(t(&[2, 2], &[1., 1., 1., 3.]));
    let y = g.layer_norm(x, one, zero, 1e-5).unwrap();
    assert_eq!(&g.data(y)[..2], &[0., 0.]);
    assert!((g.data(y)[2] + 1.0).abs() < 1e-4);
    assert!((g.data(y)[3] - 1.0).abs() < 1e-4);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let onev = g.constant(Tensor::full(&[7], 1.0));
    let zv = g.constant(Tensor::zeros(&[7]));
    let x = g.constant(t(&[3, 7], &rand_vec(&mut rng, 21)));
    let y = g.layer_norm(x, onev, zv, 1e-5).unwrap();
    for row in g.data(y).chunks(7) {
        let m = row.iter().sum::<f64>() / 7.0;
        let v = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 7.0;
        assert!(m.abs() < 1e-5 && (v - 1.0).abs() < 1e-3);
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 4]));
    let y = g.softmax(x).unwrap();
    assert!(g.data(y).iter().all(|&v| (v - 0.25).abs() < 1e-15));
    let x = g.constant(t(&[1, 2], &[0.0, 3f64.ln()]));
    let y = g.softmax(x).unwrap();
    assert!((g.data(y)[0] - 0.25).abs() < 1e-12 && (g.data(y)[1] - 0.75).abs() < 1e-12);
}

#[test]
fn dropout_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[100_000], 1.0));
    assert_eq!(g.dropout(x, 0.0, true, &mut rng).unwrap(), x);
    assert_eq!(g.dropout(x, 0.0, false, &mut rng).unwrap(), x);
    assert_eq!(g.dropout(x, 0.5, false, &mut rng).unwrap(), x);
    let y = g.dropout(x, 0.5, true, &mut rng).unwrap();
    let d = g.data(y);
    let survivors = d.iter().filter(|&&v| v != 0.0).count() as f64 / d.len() as f64;
    assert!((survivors - 0.5).abs() < 0.01, "{survivors}");
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    assert!((mean - 1.0).abs() < 0.02, "{mean}");
    assert!(g.dropout(x, 1.0, true, &mut rng).is_err());
}

#[test]
fn backward_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t(&[1], &[3.0]));
    let y = g.square(x);
    let l = g.sum(y);
    assert_eq!(g.backward(l).unwrap().get(x).unwrap(), &[6.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t(&[3, 5], &rand_vec(&mut rng, 15)));
    let y = g.softmax(x).unwrap();
    let l = g.sum(y);
    assert!(g.backward(l).unwrap().get(x).unwrap().iter().all(|v| v.abs() < 1e-12));

    let nonscalar = g.leaf(Tensor::zeros(&[2]));
    assert!(matches!(g.backward(nonscalar), Err(HtrError::Contract(_))));
}

#[test]
fn fan_out_gradients_accumulate() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t(&[1], &[2.0]));
    let y = g.mul(x, x).unwrap();
    let z = g.add(y, x).unwrap();
    let l = g.sum(z);
    assert_eq!(g.backward(l).unwrap().get(x).unwrap(), &[5.0]);
}

#[test]
fn composite_three_layer_gradients() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = inputs(&mut rng, &[("x", &[3, 4]), ("w1", &[4, 5]), ("b1", &[5]), ("w2", &[5, 5]), ("b2", &[5]), ("w3", &[5, 3]), ("b3", &[3])]);
        assert_check("mlp", &s, |g, s| {
            let p = |n: &str, g: &mut Graph<f64>| g.param(s, s.id(n).unwrap());
            let x = p("x", g);
            let (w1, b1, w2, b2, w3, b3) = (p("w1", g), p("b1", g), p("w2", g), p("b2", g), p("w3", g), p("b3", g));
            let h = g.affine(x, w1, b1)?;
            let h = g.tanh(h);
            let h = g.affine(h, w2, b2)?;
            let h = g.sigmoid(h);
            let o = g.affine(h, w3, b3)?;
            let o = g.log_softmax(o)?;
            project(g, o, seed)
        });
    }
}

#[test]
fn op_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let s = inputs(&mut rng, &[("x", &[2, 2, 5, 6]), ("k", &[3, 2, 3, 3])]);
    assert_check("conv2d pad", &s, |g, s| {
        let x = g.param(s, s.id("x").unwrap());
        let k = g.param(s, s.id("k").unwrap());
        let y = g.conv2d(x, k, (1, 1))?;
        project(g, y, 1)
    });
    assert_check("conv2d valid", &s, |g, s| {
        let x = g.param(s, s.id("x").unwrap());
        let k = g.param(s, s.id("k").unwrap());
        let y = g.conv2d(x, k, (0, 0))?;
        project(g, y, 2)
    });

    let s = inputs(&mut rng, &[("x", &[2, 3, 4, 6])]);
    assert_check("maxpool", &s, |g, s| {
        let x = g.param(s, s.id("x").unwrap());
        let y = g.maxpool2d(x, 2, 2)?;
        let y = g.maxpool2d(y, 2, 1)?;
        project(g, y, 3)
    });

    let s = inputs(&mut rng, &[("x", &[2, 3, 2, 4]), ("gamma", &[3]), ("beta", &[3])]);
    let mask: Vec<bool> = (0..8).map(|i| i % 4 != 3).collect();
    assert_check("batch_norm train", &s, |g, s| {
        let x = g.param(s, s.id("x").unwrap());
        let ga = g.param(s, s.id("gamma").unwrap());
        let be = g.param(s, s.id("beta").unwrap());
        let y = g.batch_norm_train(x, ga, be, 1e-5, Some(&mask))?.out;
        project(g, y, 4)
    });
    assert_check("batch_norm infer", &s, |g, s| {
        let x = g.param(s, s.id("x").unwrap());
        let ga = g.param(s, s.id("gamma").unwrap());
        let be = g.param(s, s.id("beta").unwrap());
        let y = g.batch_norm_infer(x, ga, be, &[0.1, 0.2, -0.3], &[1.5, 0.7, 2.0], 1e-5, None)?;
        project(g, y, 5)
    });

    let s = inputs(&mut rng, &[("x", &[3, 6]), ("gain", &[6]), ("bias", &[6])]);
    assert_check("layer_norm", &s, |g, s| {
        let x = g.param(s, s.id("x").unwrap());
        let ga = g.param(s, s.id("gain").unwrap());
        let bi = g.param(s, s.id("bias").unwrap());
        let y = g.layer_norm(x, ga, bi, 1e-5)?;
        project(g, y, 6)
    });

    let s = inputs(&mut rng, &[("x", &[3, 5])]);
    assert_check("softmax", &s, |g, s| {
        let x = g.param(s, s.id("x").unwrap());
        let y = g.softmax(x)?;
        project(g, y, 7)
    });
    let valid: Vec<bool> = (0..15).map(|i| i % 5 != 1).collect();
    assert_check("masked_softmax", &s, |g, s| {
        let x = g.param(s, s.id("x").unwrap());
        let y = g.masked_softmax(x, &valid)?;
        project(g, y, 8)
    });
    assert_check("leaky/sigmoid/tanh", &s, |g, s| {
        let x = g.param(s, s.id("x").unwrap());
        let a = g.leaky_relu(x, 0.01);
        let b = g.sigmoid(x);
        let c = g.tanh(x);
        let ab = g.mul(a, b)?;
        let y = g.add(ab, c)?;
        project(g, y, 9)
    });

    let s = inputs(&mut rng, &[("a", &[2, 4, 3]), ("v", &[2, 3]), ("alpha", &[2, 4])]);
    assert_check("attention helpers", &s, |g, s| {
        let a = g.param(s, s.id("a").unwrap());
        let v = g.param(s, s.id("v").unwrap());
        let al = g.param(s, s.id("alpha").unwrap());
        let e = g.add_broadcast_steps(a, v)?;
        let e = g.tanh(e);
        let ws = g.weighted_sum(al, e)?;
        project(g, ws, 10)
    });
    let s = inputs(&mut rng, &[("a", &[1, 4, 3]), ("v", &[3, 3]), ("alpha", &[3, 4])]);
    assert_check("attention helpers broadcast", &s, |g, s| {
        let a = g.param(s, s.id("a").unwrap());
        let v = g.param(s, s.id("v").unwrap());
        let al = g.param(s, s.id("alpha").unwrap());
        let e = g.add_broadcast_steps(a, v)?;
        let ws = g.weighted_sum(al, a)?;
        let e = g.reshape(e, &[12, 3])?;
        let s1 = project(g, e, 11)?;
        let s2 = project(g, ws, 12)?;
        g.add(s1, s2)
    });

    let s = inputs(&mut rng, &[("table", &[5, 3]), ("x", &[4, 3])]);
    assert_check("embedding/concat/slice/gather", &s, |g, s| {
        let tb = g.param(s, s.id("table").unwrap());
        let x = g.param(s, s.id("x").unwrap());
        let e = g.embedding(tb, &[1, 3, 1, 0])?;
        let c = g.concat_cols(&[e, x])?;
        let sl = g.slice_cols(c, 1, 4)?;
        let ga = g.gather_rows(sl, &[3, 0, 0])?;
        let bl = g.blend_rows(e, x, &[true, false, true, false])?;
        let a = project(g, ga, 13)?;
        let b = project(g, bl, 14)?;
        g.sub(a, b)
    });

    let s = inputs(&mut rng, &[("x", &[2, 3, 1, 4]), ("y", &[2, 3]), ("r", &[3])]);
    assert_check("sequence plumbing", &s, |g, s| {
        let x = g.param(s, s.id("x").unwrap());
        let y = g.param(s, s.id("y").unwrap());
        let seq = g.map_to_sequence(x)?;
        let st = g.step_of(seq, 2)?;
        let st2 = g.step_of(seq, 0)?;
        let stacked = g.stack_steps(&[st, y, st2])?;
        let sc = g.scale(stacked, 0.5);
        let sq = g.square(sc);
        let r = g.param(s, s.id("r").unwrap());
        let sq = g.add_row(sq, r)?;
        project(g, sq, 15)
    });

    let s = inputs(&mut rng, &[("logits", &[4, 5])]);
    let targets = [Some(1), None, Some(4), Some(0)];
    for gamma in [0.0, 0.5, 2.0] {
        assert_check("focal loss", &s, |g, s| {
            let z = g.param(s, s.id("logits").unwrap());
            g.focal_loss(z, &targets, gamma, 0.5, 1e-12)
        });
    }
}

proptest! {
    #[test]
    fn softmax_rows_normalize_and_are_shift_invariant(v in prop::collection::vec(-30.0f64..30.0, 1..12), c in -50.0f64..50.0) {
        let n = v.len();
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, n], &v));
        let shifted: Vec<f64> = v.iter().map(|a| a + c).collect();
        let xs = g.constant(t(&[1, n], &shifted));
        let y = g.softmax(x).unwrap();
        let ys = g.softmax(xs).unwrap();
        let s: f64 = g.data(y).iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-6);
        for (a, b) in g.data(y).iter().zip(g.data(ys)) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_and_pool_shape_laws(h in 1usize..20, w in 1usize..20, kh in 1usize..4, kw in 1usize..4, ph in 0usize..2, pw in 0usize..2) {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, h, w]));
        let k = g.constant(Tensor::zeros(&[3, 2, kh, kw]));
        match g.conv2d(x, k, (ph, pw)) {
            Ok(y) => prop_assert_eq!(g.shape(y), &[1, 3, h + 2 * ph - kh + 1, w + 2 * pw - kw + 1]),
            Err(_) => prop_assert!(h + 2 * ph < kh || w + 2 * pw < kw),
        }
        match g.maxpool2d(x, kh, kw) {
            Ok(y) => prop_assert_eq!(g.shape(y), &[1, 2, h / kh, w / kw]),
            Err(_) => prop_assert!(h < kh || w < kw),
        }
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = rand_vec(&mut rng, 24);
        let run = || {
            let mut g = Graph::<f32>::new();
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let x = g.constant(Tensor::from_f64(&[4, 6], &v).unwrap());
            let y = g.dropout(x, 0.3, true, &mut r).unwrap();
            let y = g.tanh(y);
            g.data(y).to_vec()
        };
        prop_assert_eq!(run(), run());
    }
}
