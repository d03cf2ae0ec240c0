use emd_core::numerics::{grad_check, Tape, Tensor, Var};
use emd_core::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f32]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.data()[i * k + p] as f64 * b.data()[p * n + j] as f64;
            }
        }
    }
    out
}

#[test]
fn matmul_examples() {
    let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
    let b = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
    assert_eq!(id.matmul(&b).unwrap(), b);
    let r = t(&[1, 2], &[1.0, 2.0]).matmul(&t(&[2, 1], &[3.0, 4.0])).unwrap();
    assert_eq!(r.data(), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4, 2]);
    let got = a.matmul(&b).unwrap();
    for (g, e) in got.data().iter().zip(triple_loop(&a, &b)) {
        assert!((*g as f64 - e).abs() < 1e-6);
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let err = t(&[2, 3], &[0.0; 6]).matmul(&t(&[2, 3], &[0.0; 6])).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2, 3], &[1.0, -2.0, 0.5, 4.0, 0.0, 1.0]));
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap().wrt(&tape, x);
    assert!(g.data().iter().all(|&v| v == 1.0));

    let mut tape = Tape::new();
    let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    let grads = tape.backward(s).unwrap();
    assert_eq!(grads.wrt(&tape, x).data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn unused_tensors_get_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]));
    let unused = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
    let s = tape.sum(x);
    let grads = tape.backward(s).unwrap();
    assert_eq!(grads.wrt(&tape, unused).data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]));
    assert!(tape.backward(x).is_err());
    assert!(grad_check(|_, v| Ok(v), &t(&[2], &[1.0, 2.0]), 1e-3).is_err());
}

#[test]
fn grad_check_of_sum_is_exact() {
    // Dyadic inputs and step keep every perturbed sum exactly representable.
    let h = 1.0 / 1024.0;
    let err = grad_check(|tape, x| Ok(tape.sum(x)), &t(&[4], &[0.5, 0.25, -0.75, 2.0]), h).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn bce_of_sigmoid_linear_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&mut rng, &[4, 3]);
    let w = random(&mut rng, &[3, 1]);
    let y = [1.0, 0.0, 1.0, 0.0];
    let err = grad_check(
        |tape, wv| {
            let xv = tape.constant(x.clone());
            let z = tape.matmul(xv, wv)?;
            let p = tape.sigmoid(z);
            tape.bce(p, &y)
        },
        &w,
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-3, "{err}");
}

/// Projects an arbitrary-shape output to a scalar with fixed random weights so
/// every output coordinate contributes to the checked loss.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(random(&mut rng, &shape));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn check_op(name: &str, shape: &[usize], f: impl Fn(&mut Tape, Var) -> Result<Var>) {
    for point in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + point);
        let x = random(&mut rng, shape);
        let err = grad_check(|tape, v| {
            let y = f(tape, v)?;
            project(tape, y, 7 + point)
        }, &x, 1e-3)
        .unwrap();
        assert!(err < 1e-3, "{name} point {point}: {err}");
    }
}

#[test]
fn every_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = random(&mut rng, &[4, 3]);
    let wt = random(&mut rng, &[3, 4]);
    let other = random(&mut rng, &[2, 3, 4]);
    let bias = random(&mut rng, &[4]);
    let gamma = random(&mut rng, &[4]);
    let mask = [1.0, 1.0, 0.0, 1.0, 0.0, 0.0];

    check_op("matmul", &[2, 3, 4], |tp, x| {
        let w = tp.constant(w.clone());
        tp.matmul(x, w)
    });
    check_op("matmul weight", &[4, 3], |tp, w| {
        let x = tp.constant(other.clone());
        tp.matmul(x, w)
    });
    check_op("matmul_nt", &[2, 3, 4], |tp, x| {
        let w = tp.constant(wt.clone());
        tp.matmul_nt(x, w)
    });
    check_op("matmul_nt weight", &[3, 4], |tp, w| {
        let x = tp.constant(other.clone());
        tp.matmul_nt(x, w)
    });
    check_op("bmm", &[2, 3, 4], |tp, x| {
        let o = tp.constant(other.clone());
        let ot = tp.permute(o, &[0, 2, 1])?;
        tp.bmm(x, ot, false)
    });
    check_op("bmm_nt both", &[2, 3, 4], |tp, x| tp.bmm(x, x, true));
    check_op("add", &[2, 3, 4], |tp, x| {
        let o = tp.constant(other.clone());
        tp.add(x, o)
    });
    check_op("sub", &[2, 3, 4], |tp, x| {
        let o = tp.constant(other.clone());
        tp.sub(o, x)
    });
    check_op("add_bias", &[4], |tp, b| {
        let o = tp.constant(other.clone());
        tp.add_bias(o, b)
    });
    check_op("mul self", &[2, 3, 4], |tp, x| tp.mul(x, x));
    check_op("affine", &[5], |tp, x| Ok(tp.affine(x, -2.5, 1.0)));
    check_op("sigmoid", &[2, 5], |tp, x| {
        let y = tp.affine(x, 3.0, 0.0);
        Ok(tp.sigmoid(y))
    });
    check_op("tanh", &[2, 5], |tp, x| {
        let y = tp.affine(x, 2.0, 0.0);
        Ok(tp.tanh(y))
    });
    check_op("relu", &[2, 5], |tp, x| Ok(tp.relu(x)));
    check_op("gelu", &[2, 5], |tp, x| {
        let y = tp.affine(x, 3.0, 0.0);
        Ok(tp.gelu(y))
    });
    check_op("softmax last", &[2, 3, 4], |tp, x| tp.softmax(x, 2));
    check_op("softmax middle", &[2, 3, 4], |tp, x| tp.softmax(x, 1));
    check_op("cross_entropy", &[4, 6], |tp, x| {
        let y = tp.affine(x, 3.0, 0.0);
        tp.cross_entropy(y, &[0, 5, 2, 2], &[1.0, 1.0, 0.0, 0.5])
    });
    check_op("bce", &[4], |tp, x| {
        let p = tp.sigmoid(x);
        tp.bce(p, &[1.0, 0.0, 0.0, 1.0])
    });
    check_op("layer_norm x", &[3, 4], |tp, x| {
        let g = tp.constant(gamma.clone());
        let b = tp.constant(bias.clone());
        tp.layer_norm(x, g, b, 1e-5)
    });
    check_op("layer_norm gamma", &[4], |tp, g| {
        let x = tp.constant(other.clone());
        let b = tp.constant(bias.clone());
        tp.layer_norm(x, g, b, 1e-5)
    });
    check_op("layer_norm beta", &[4], |tp, b| {
        let x = tp.constant(other.clone());
        let g = tp.constant(gamma.clone());
        tp.layer_norm(x, g, b, 1e-5)
    });
    check_op("embedding", &[5, 3], |tp, table| tp.embedding(table, &[4, 0, 4, 2], &[2, 2]));
    check_op("reshape+permute", &[2, 3, 4], |tp, x| {
        let r = tp.reshape(x, &[2, 3, 2, 2])?;
        tp.permute(r, &[0, 2, 1, 3])
    });
    check_op("slice", &[2, 3, 4], |tp, x| tp.slice(x, 1, 1, 2));
    check_op("concat", &[2, 3, 4], |tp, x| {
        let a = tp.slice(x, 2, 0, 1)?;
        let o = tp.constant(other.clone());
        tp.concat(&[x, o, a], 2)
    });
    check_op("sum_axis", &[2, 3, 4], |tp, x| tp.sum_axis(x, 1));
    check_op("mean", &[2, 3], |tp, x| {
        let m = tp.mean(x);
        Ok(tp.affine(m, 3.0, 0.0))
    });
    check_op("masked_max", &[2, 3, 4], |tp, x| tp.masked_max(x, &mask));
    check_op("unfold", &[2, 3, 4], |tp, x| tp.unfold(x, 3));
}

#[test]
fn softmax_sums_to_one_on_extreme_rows() {
    let x = t(&[2, 3], &[1000.0, -1000.0, 0.0, -50.0, -50.0, -50.0]);
    let s = x.softmax(1).unwrap();
    for row in s.data().chunks(3) {
        let z: f64 = row.iter().map(|&v| v as f64).sum();
        assert!((z - 1.0).abs() < 1e-6);
    }
    assert!(s.is_finite());
}

#[test]
fn ops_are_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let a = tape.leaf(random(&mut rng, &[4, 8]));
        let b = tape.leaf(random(&mut rng, &[8, 5]));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.softmax(c, 1).unwrap();
        let l = tape.cross_entropy(s, &[0, 1, 2, 3], &[1.0; 4]).unwrap();
        let g = tape.backward(l).unwrap();
        (tape.value(l).clone(), g.wrt(&tape, a), g.wrt(&tape, b))
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_normalizes(values in proptest::collection::vec(-80.0f32..80.0, 1..20)) {
        let n = values.len();
        let s = Tensor::new(vec![n], values).unwrap().softmax(0).unwrap();
        let z: f64 = s.data().iter().map(|&v| v as f64).sum();
        prop_assert!((z - 1.0).abs() < 1e-6);
        prop_assert!(s.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn matmul_is_associative(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4, 2]);
        let c = random(&mut rng, &[2, 5]);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        for (x, y) in left.data().iter().zip(right.data()) {
            prop_assert!((x - y).abs() < 1e-5);
        }
    }
}
