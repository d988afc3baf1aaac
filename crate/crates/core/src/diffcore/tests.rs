use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use super::*;
use crate::error::Error;

fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::from_rows(rows)
}

fn uniform(rng: &mut Xoshiro256PlusPlus, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Gradient check of `sum(w ⊙ op(inputs))` with random inputs in [-2, 2] and
/// random fixed weights `w`, so no coordinate has a structurally zero slope.
fn check_primitive<F>(seed: u64, eps: f64, shapes: &[&[usize]], op: F) -> f64
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> crate::Result<Var>,
{
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut ps = ParamStore::new();
    let ids: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| ps.add(format!("x{i}"), uniform(&mut rng, s, -2.0, 2.0)))
        .collect();
    let probe = {
        let mut g = Graph::with_params(&ps);
        let vars: Vec<_> = ids.iter().map(|&id| g.param(id)).collect();
        let out = op(&mut g, &vars).unwrap();
        g.value(out).shape().to_vec()
    };
    let w = uniform(&mut rng, &probe, 0.5, 1.5);
    let rep = finite_diff_check(
        |g| {
            let vars: Vec<_> = ids.iter().map(|&id| g.param(id)).collect();
            let out = op(g, &vars)?;
            let wv = g.constant(w.clone());
            let prod = g.mul(out, wv)?;
            Ok(g.sum(prod))
        },
        &ps,
        &GradCheckConfig {
            eps,
            coords_per_param: 64,
            seed,
        },
    )
    .unwrap();
    rep.max_rel_err
}

#[test]
fn fixed_points() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::scalar(0.0));
    let th = g.tanh(z);
    let sg = g.sigmoid(z);
    assert_eq!(g.value(th).data(), &[0.0]);
    assert_eq!(g.value(sg).data(), &[0.5]);
}

#[test]
fn mean_pool_rows() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[vec![1.0, 3.0], vec![5.0, 7.0]]));
    let m = g.mean(x, 0).unwrap();
    assert_eq!(g.value(m).shape(), &[1, 2]);
    assert_eq!(g.value(m).data(), &[3.0, 5.0]);
    let m1 = g.mean(x, 1).unwrap();
    assert_eq!(g.value(m1).data(), &[2.0, 6.0]);
}

#[test]
fn layer_norm_constant_row_is_zero() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full(&[2, 5], 3.25));
    let y = g.layer_norm(x, None, None).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn softmax_single_open_key() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[vec![0.0, 0.0]]));
    let mask = t(&[vec![0.0, NEG_LARGE]]);
    let y = g.softmax_masked(x, Some(&mask)).unwrap();
    let y = g.value(y).data();
    assert_eq!(y[0], 1.0);
    assert!(y[1] < 1e-9);
}

#[test]
fn softmax_hand_values() {
    // exp(1), exp(2), exp(3) = 2.71828, 7.38906, 20.08554; sum 30.19288.
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]));
    let mask = Tensor::zeros(&[1, 3]);
    let y = g.softmax_masked(x, Some(&mask)).unwrap();
    let expect = [0.0900, 0.2447, 0.6652];
    for (a, b) in g.value(y).data().iter().zip(expect) {
        assert!((f64::from(*a) - b).abs() < 1e-3);
    }
}

#[test]
fn softmax_fully_masked_row_errors() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::from_rows(&[vec![0.0, 1.0], vec![2.0, 3.0]]));
    let mask = Tensor::from_rows(&[vec![0.0, NEG_LARGE], vec![NEG_LARGE, NEG_LARGE]]);
    match g.softmax_masked(x, Some(&mask)) {
        Err(Error::FullyMaskedRow { row }) => assert_eq!(row, 1),
        other => panic!("expected fully-masked error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn softmax_masked_gradient_vanishes() {
    let mut g = Graph::<f64>::new();
    let x = g.input(t(&[vec![0.3, -1.0, 2.0], vec![1.0, 0.5, -0.2]]));
    let mask = t(&[vec![0.0, NEG_LARGE, 0.0], vec![0.0, 0.0, NEG_LARGE]]);
    let y = g.softmax_masked(x, Some(&mask)).unwrap();
    let w = g.constant(t(&[vec![1.0, 2.0, 3.0], vec![-1.0, 4.0, 0.5]]));
    let p = g.mul(y, w).unwrap();
    let s = g.sum(p);
    g.backward(s).unwrap();
    let gx = g.grad(x);
    assert!(gx.at(0, 1).abs() < 1e-9);
    assert!(gx.at(1, 2).abs() < 1e-9);
    for r in 0..2 {
        let sum: f64 = g.value(y).row(r).iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 5]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    let err = g.add(a, b).unwrap_err().to_string();
    assert!(err.contains("add") && err.contains("[4, 5]"), "{err}");
}

#[test]
fn broadcast_rules() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]));
    let row = g.constant(t(&[vec![10.0, 20.0]]));
    let col = g.constant(t(&[vec![1.0], vec![2.0], vec![3.0]]));
    let sc = g.constant(Tensor::scalar(2.0));
    let r = g.add(a, row).unwrap();
    assert_eq!(g.value(r).data(), &[11.0, 22.0, 13.0, 24.0, 15.0, 26.0]);
    let c = g.mul(a, col).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 6.0, 8.0, 15.0, 18.0]);
    let s = g.mul(a, sc).unwrap();
    assert_eq!(g.value(s).data(), &[2.0, 4.0, 6.0, 8.0, 10.0, 12.0]);
    let bad = g.constant(Tensor::zeros(&[2, 2]));
    assert!(g.add(a, bad).is_err());
}

#[test]
fn backward_twice_is_an_error() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::scalar(2.0));
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).data(), &[4.0]);
    assert!(matches!(g.backward(y), Err(Error::BackwardTwice)));
    assert_eq!(g.grad(x).data(), &[4.0]);
}

#[test]
fn unreachable_nodes_have_zero_grad() {
    let mut g = Graph::<f64>::new();
    let x = g.input(t(&[vec![1.0, 2.0]]));
    let unused = g.input(t(&[vec![3.0, 4.0]]));
    let side = g.tanh(unused);
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(unused).data(), &[0.0, 0.0]);
    assert_eq!(g.grad(side).data(), &[0.0, 0.0]);
    assert_eq!(g.grad(x).data(), &[1.0, 1.0]);
}

#[test]
fn sigmoid_gating_gradient() {
    // f = sum(sigmoid(x) ⊙ x) at random x
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
    let mut ps = ParamStore::new();
    let id = ps.add("x", uniform(&mut rng, &[4, 4], -2.0, 2.0));
    let rep = finite_diff_check(
        |g| {
            let x = g.param(id);
            let s = g.sigmoid(x);
            let p = g.mul(s, x)?;
            Ok(g.sum(p))
        },
        &ps,
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-6, "{rep:?}");
}

#[test]
fn blocked_key_gets_no_gradient() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
    let mut g = Graph::<f64>::new();
    let q = g.constant(uniform(&mut rng, &[3, 4], -1.0, 1.0));
    let x = g.input(uniform(&mut rng, &[5, 4], -1.0, 1.0));
    let wk = g.constant(uniform(&mut rng, &[4, 4], -1.0, 1.0));
    let wv = g.constant(uniform(&mut rng, &[4, 4], -1.0, 1.0));
    let k = g.matmul_t(x, wk).unwrap();
    let v = g.matmul_t(x, wv).unwrap();
    let logits = g.matmul_t(q, k).unwrap();
    let mut mask = Tensor::zeros(&[3, 5]);
    for r in 0..3 {
        mask.data_mut()[r * 5 + 2] = NEG_LARGE;
    }
    let a = g.softmax_masked(logits, Some(&mask)).unwrap();
    let out = g.matmul(a, v).unwrap();
    let w = g.constant(uniform(&mut rng, &[3, 4], 0.5, 1.5));
    let p = g.mul(out, w).unwrap();
    let s = g.sum(p);
    g.backward(s).unwrap();
    let gx = g.grad(x);
    assert!(gx.row(2).iter().all(|&x| x == 0.0));
    assert!(gx.row(0).iter().any(|&x| x != 0.0));
}

#[test]
fn gather_scatters_gradient() {
    let mut g = Graph::<f64>::new();
    let table = g.input(t(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]));
    let rows = g.gather(table, &[2, 0, 2]).unwrap();
    assert_eq!(g.value(rows).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
    let s = g.sum(rows);
    g.backward(s).unwrap();
    assert_eq!(g.grad(table).data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
}

#[test]
fn cross_entropy_uniform() {
    let mut g = Graph::<f64>::new();
    let l = g.constant(Tensor::zeros(&[3, 64]));
    let loss = g.cross_entropy(l, &[(0, 5), (2, 63)]).unwrap();
    assert!((g.value(loss).data()[0] - 64f64.ln()).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn primitive_gradients(seed in any::<u64>(), m in 1usize..5, k in 1usize..5, n in 2usize..5) {
        type Prim = Box<dyn Fn(&mut Graph<'_, f64>, &[Var]) -> crate::Result<Var>>;
        let cases: Vec<(&str, Vec<Vec<usize>>, Prim)> = vec![
            ("matmul", vec![vec![m, k], vec![k, n]], Box::new(|g, v| g.matmul(v[0], v[1]))),
            ("matmul_t", vec![vec![m, k], vec![n, k]], Box::new(|g, v| g.matmul_t(v[0], v[1]))),
            ("add", vec![vec![m, n], vec![1, n]], Box::new(|g, v| g.add(v[0], v[1]))),
            ("mul_col", vec![vec![m, n], vec![m, 1]], Box::new(|g, v| g.mul(v[0], v[1]))),
            ("mul_scalar", vec![vec![m, n], vec![1]], Box::new(|g, v| g.mul(v[0], v[1]))),
            ("scale", vec![vec![m, n]], Box::new(|g, v| Ok(g.scale(v[0], -1.7)))),
            ("tanh", vec![vec![m, n]], Box::new(|g, v| Ok(g.tanh(v[0])))),
            ("sigmoid", vec![vec![m, n]], Box::new(|g, v| Ok(g.sigmoid(v[0])))),
            ("mean0", vec![vec![m, n]], Box::new(|g, v| g.mean(v[0], 0))),
            ("mean1", vec![vec![m, n]], Box::new(|g, v| g.mean(v[0], 1))),
            (
                "layer_norm",
                vec![vec![m, n + 1], vec![1, n + 1], vec![1, n + 1]],
                Box::new(|g, v| g.layer_norm(v[0], Some(v[1]), Some(v[2]))),
            ),
            (
                "softmax_masked",
                vec![vec![m, n]],
                Box::new(move |g, v| {
                    let mut mask = Tensor::zeros(&[m, n]);
                    mask.data_mut()[n - 1] = NEG_LARGE;
                    g.softmax_masked(v[0], Some(&mask))
                }),
            ),
            ("concat_rows", vec![vec![m, n], vec![k, n]], Box::new(|g, v| g.concat_rows(&[v[0], v[1]]))),
            ("concat_cols", vec![vec![m, n], vec![m, k]], Box::new(|g, v| g.concat_cols(&[v[0], v[1]]))),
            ("slice_rows", vec![vec![m + 1, n]], Box::new(move |g, v| g.slice_rows(v[0], 1, m))),
            ("slice_cols", vec![vec![m, n]], Box::new(move |g, v| g.slice_cols(v[0], 1, n - 1))),
            ("gather", vec![vec![n, k]], Box::new(move |g, v| g.gather(v[0], &[0, n - 1, 0]))),
            (
                "cross_entropy",
                vec![vec![m, n]],
                Box::new(move |g, v| {
                    let targets: Vec<_> = (0..m).map(|r| (r, r % n)).collect();
                    g.cross_entropy(v[0], &targets)
                }),
            ),
        ];
        for (name, shapes, op) in &cases {
            let shapes: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
            let coarse = check_primitive(seed, 1e-3, &shapes, op);
            let fine = check_primitive(seed, 1e-4, &shapes, op);
            // Either within tolerance, or the residual is pure O(eps^2)
            // truncation (it must shrink ~100x when eps shrinks 10x).
            prop_assert!(
                coarse < 1e-4 || fine < 1e-6 || fine < coarse / 50.0,
                "{} coarse {} fine {}", name, coarse, fine
            );
        }
    }

    #[test]
    fn softmax_shift_invariance(seed in any::<u64>(), shift in -5.0f64..5.0) {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let x = uniform(&mut rng, &[3, 6], -2.0, 2.0);
        let shifted = Tensor::new(&[3, 6], x.data().iter().map(|v| v + shift).collect()).unwrap();
        let mut mask = Tensor::zeros(&[3, 6]);
        mask.data_mut()[4] = NEG_LARGE;
        let mut g = Graph::<f64>::new();
        let a = g.constant(x);
        let b = g.constant(shifted);
        let ya = g.softmax_masked(a, Some(&mask)).unwrap();
        let yb = g.softmax_masked(b, Some(&mask)).unwrap();
        prop_assert!(g.value(ya).max_abs_diff(g.value(yb)) < 1e-6);
    }
}

