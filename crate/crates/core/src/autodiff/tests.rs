use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn vec_t(v: &[f64]) -> Tensor {
    Tensor::vector(v.to_vec()).unwrap()
}

#[test]
fn add_componentwise() {
    let mut g = Graph::new();
    let a = g.constant(vec_t(&[1.0, 2.0]));
    let b = g.constant(vec_t(&[3.0, 4.0]));
    let c = g.forward_op(OpKind::Add, &[a, b]).unwrap();
    assert_eq!(g.value(c).data(), &[4.0, 6.0]);
}

#[test]
fn identity_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = Tensor::from_fn(&[3, 5], |_| rng.gen_range(-1.0..1.0));
    let mut g = Graph::new();
    let i = g.constant(Tensor::identity(3));
    let av = g.constant(a.clone());
    let out = g.matmul(i, av).unwrap();
    assert_eq!(g.value(out), &a);
}

#[test]
fn l2_norm_three_four_five() {
    let mut g = Graph::new();
    let x = g.constant(vec_t(&[3.0, 4.0]));
    let n = g.norm_last(x).unwrap();
    assert_eq!(g.item(n), 5.0);
}

#[test]
fn shape_mismatch_reports_shapes() {
    let mut g = Graph::new();
    let a = g.constant(vec_t(&[1.0, 2.0]));
    let b = g.constant(vec_t(&[1.0, 2.0, 3.0]));
    match g.add(a, b) {
        Err(EdpaError::ShapeMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2]);
            assert_eq!(rhs, vec![3]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn scalar_broadcast_only() {
    let mut g = Graph::new();
    let a = g.param(vec_t(&[1.0, 2.0, 3.0]));
    let s = g.param(Tensor::scalar(2.0));
    let p = g.mul(s, a).unwrap();
    assert_eq!(g.value(p).data(), &[2.0, 4.0, 6.0]);
    let total = g.sum_all(p).unwrap();
    let grads = g.backward(total).unwrap();
    assert_eq!(grads.get(s).unwrap(), &[6.0]);
    assert_eq!(grads.get(a).unwrap(), &[2.0, 2.0, 2.0]);

    let m = g.constant(Tensor::zeros(&[2, 3]));
    assert!(g.add(m, a).is_err());
}

#[test]
fn ln_rejects_non_positive() {
    let mut g = Graph::new();
    let x = g.constant(vec_t(&[1.0, 0.0]));
    assert!(matches!(g.ln(x), Err(EdpaError::NonPositive { index: 1, .. })));
    let y = g.constant(vec_t(&[-2.0]));
    assert!(g.ln(y).is_err());
}

#[test]
fn cosine_examples() {
    let cases = [
        ([1.0, 0.0], [1.0, 0.0], 1.0),
        ([1.0, 0.0], [0.0, 1.0], 0.0),
        ([1.0, 0.0], [-1.0, 0.0], -1.0),
    ];
    for (a, b, want) in cases {
        let mut g = Graph::new();
        let a = g.constant(vec_t(&a));
        let b = g.constant(vec_t(&b));
        let c = cosine_similarity(&mut g, a, b).unwrap();
        assert_eq!(g.item(c), want);
    }
}

#[test]
fn cosine_rejects_length_mismatch() {
    let mut g = Graph::new();
    let a = g.constant(vec_t(&[1.0, 0.0]));
    let b = g.constant(vec_t(&[1.0, 0.0, 0.0]));
    assert!(cosine_similarity(&mut g, a, b).is_err());
}

#[test]
fn cosine_of_zero_vector_is_finite() {
    let mut g = Graph::new();
    let a = g.param(vec_t(&[0.0, 0.0]));
    let b = g.constant(vec_t(&[1.0, 2.0]));
    let c = cosine_similarity(&mut g, a, b).unwrap();
    assert_eq!(g.item(c), 0.0);
    let grads = g.backward(c).unwrap();
    assert!(grads.get(a).unwrap().iter().all(|v| v.is_finite()));
}

#[test]
fn backward_square_sum() {
    let mut g = Graph::new();
    let x = g.param(vec_t(&[1.0, 2.0]));
    let sq = g.mul(x, x).unwrap();
    let y = g.sum_all(sq).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn self_cosine_gradient_vanishes() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let x = Tensor::from_fn(&[6], |_| rng.gen_range(-2.0..2.0));
        let mut g = Graph::new();
        let xv = g.param(x);
        let c = cosine_similarity(&mut g, xv, xv).unwrap();
        let grads = g.backward(c).unwrap();
        for v in grads.get(xv).unwrap() {
            assert!(v.abs() < 1e-12, "{v}");
        }
    }
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut g = Graph::new();
    let x = g.param(vec_t(&[1.0, 2.0]));
    let y = g.exp(x);
    assert!(matches!(g.backward(y), Err(EdpaError::NonScalarRoot(_))));
}

#[test]
fn abs_subgradient_is_zero_at_zero() {
    let mut g = Graph::new();
    let x = g.param(vec_t(&[-1.0, 0.0, 2.0]));
    let a = g.abs(x);
    let s = g.sum_all(a).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[-1.0, 0.0, 1.0]);
}

#[test]
fn fd_of_sum_is_all_ones() {
    let x = Tensor::from_fn(&[5], |k| k as f64 * 0.3 - 1.0);
    let fd = finite_difference_gradient(|t| Ok(t.data().iter().sum()), &x, 1e-4).unwrap();
    for v in fd.data() {
        assert!((v - 1.0).abs() < 1e-10);
    }
}

#[test]
fn fd_of_square() {
    let x = Tensor::scalar(3.0);
    let fd = finite_difference_gradient(|t| Ok(t.item() * t.item()), &x, 1e-4).unwrap();
    assert!((fd.item() - 6.0).abs() < 1e-6);
}

#[test]
fn unused_leaf_gets_zero_tensor() {
    let mut g = Graph::new();
    let x = g.param(vec_t(&[1.0]));
    let unused = g.param(vec_t(&[1.0, 1.0]));
    let y = g.sum_all(x).unwrap();
    let grads = g.backward(y).unwrap();
    assert!(grads.get(unused).is_none());
    assert_eq!(grads.tensor(unused).data(), &[0.0, 0.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let c = g.constant(vec_t(&[1.0, 2.0]));
    let x = g.param(vec_t(&[3.0, 4.0]));
    let p = g.mul(c, x).unwrap();
    let y = g.sum_all(p).unwrap();
    let grads = g.backward(y).unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(x).unwrap(), &[1.0, 2.0]);
}

#[test]
fn paste_and_patchify_shapes() {
    let mut g = Graph::new();
    let img = g.constant(Tensor::full(&[8, 8, 1], 0.5));
    let blocks = g.patchify(img, 8).unwrap();
    assert_eq!(g.shape(blocks), &[1, 64]);
    assert!(g.value(blocks).data().iter().all(|&v| v == 0.5));
    assert!(matches!(
        g.patchify(img, 3),
        Err(EdpaError::NotDivisible {
            height: 8,
            width: 8,
            patch: 3
        })
    ));
}
