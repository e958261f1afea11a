use proptest::prelude::*;

use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::from_vec(shape, data.to_vec()).unwrap()
}

#[test]
fn tensor_fills() {
    let mut rng = SeededRng::new(0);
    let z = Tensor::new(&[2, 3], Fill::Zeros, &mut rng).unwrap();
    assert_eq!(z.data(), &[0.0; 6]);
    let c = Tensor::new(&[1], Fill::Constant(5.0), &mut rng).unwrap();
    assert_eq!(c.data(), &[5.0]);
    assert!(matches!(
        Tensor::new(&[2, 0], Fill::Zeros, &mut rng),
        Err(EngineError::InvalidShape(_))
    ));
    assert!(matches!(
        Tensor::new(&[], Fill::Zeros, &mut rng),
        Err(EngineError::InvalidShape(_))
    ));
}

#[test]
fn glorot_is_reproducible_and_bounded() {
    let a = Tensor::new(&[4, 4], Fill::GlorotUniform, &mut SeededRng::new(7)).unwrap();
    let b = Tensor::new(&[4, 4], Fill::GlorotUniform, &mut SeededRng::new(7)).unwrap();
    let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    let limit = (6.0f64 / 8.0).sqrt();
    assert!(a.data().iter().all(|v| v.abs() < limit));
    let n = Tensor::new(&[1000], Fill::StandardNormal, &mut SeededRng::new(1)).unwrap();
    let mean = n.sum() / 1000.0;
    assert!(mean.abs() < 0.15);
}

#[test]
fn matmul_identity() {
    let mut g = Graph::new();
    let a = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let i = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let out = g.matmul(a, i).unwrap();
    assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_rectangular() {
    let mut g = Graph::new();
    let a = g.input(t(&[1, 3], &[1.0, 2.0, 3.0]));
    let b = g.input(t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]));
    let out = g.matmul(a, b).unwrap();
    assert_eq!(g.value(out).shape(), &[1, 2]);
    assert_eq!(g.value(out).data(), &[4.0, 5.0]);
}

#[test]
fn sigmoid_at_zero() {
    let mut g = Graph::new();
    let x = g.input(t(&[1], &[0.0]));
    let y = g.sigmoid(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5]);
}

#[test]
fn conv1d_sliding_dot_product() {
    let mut g = Graph::new();
    let x = g.input(t(&[1, 4, 1], &[1.0, 2.0, 3.0, 4.0]));
    let k = g.input(t(&[2, 1, 1], &[1.0, 1.0]));
    let y = g.conv1d(x, k).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 3, 1]);
    assert_eq!(g.value(y).data(), &[3.0, 5.0, 7.0]);
}

#[test]
fn conv2d_full_width_kernel() {
    // [B=1, H=3, W=2, C=1], kernel spanning the full width.
    let mut g = Graph::new();
    let x = g.input(t(&[1, 3, 2, 1], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let k = g.input(t(&[2, 2, 1, 1], &[1.0, 10.0, 100.0, 1000.0]));
    let y = g.conv2d(x, k).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 2, 1, 1]);
    assert_eq!(
        g.value(y).data(),
        &[1.0 + 20.0 + 300.0 + 4000.0, 3.0 + 40.0 + 500.0 + 6000.0]
    );
}

#[test]
fn shape_errors_name_the_op() {
    let mut g = Graph::new();
    let a = g.input(t(&[2, 3], &[0.0; 6]));
    let b = g.input(t(&[2, 3], &[0.0; 6]));
    let err = g.matmul(a, b).unwrap_err();
    match err {
        EngineError::Shape { op, lhs, rhs } => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("unexpected {other:?}"),
    }
    let c = g.input(t(&[3], &[0.0; 3]));
    let d = g.input(t(&[2], &[0.0; 2]));
    assert!(matches!(g.add(c, d), Err(EngineError::Shape { op: "add", .. })));
}

#[test]
fn non_finite_surfaces_as_error() {
    let mut g = Graph::new();
    let a = g.input(t(&[1], &[f64::MAX]));
    let err = g.scalar_mul(a, 10.0).unwrap_err();
    assert!(matches!(err, EngineError::NonFinite { op: "scalar-mul" }));
}

#[test]
fn backward_of_sum_is_ones() {
    let mut params = ParamSet::new();
    let p = params.add("p", t(&[3], &[1.0, -2.0, 3.0]));
    let mut g = Graph::with_params(&params);
    let node = g.param(p);
    let loss = g.reduce_sum(node).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(p).data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_square() {
    let mut params = ParamSet::new();
    let p = params.add("p", t(&[1], &[2.0]));
    let mut g = Graph::with_params(&params);
    let node = g.param(p);
    let sq = g.hadamard(node, node).unwrap();
    let loss = g.reduce_sum(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(p).data(), &[4.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut params = ParamSet::new();
    let p = params.add("p", t(&[2], &[1.0, 2.0]));
    let mut g = Graph::with_params(&params);
    let node = g.param(p);
    let y = g.tanh(node).unwrap();
    assert!(matches!(g.backward(y), Err(EngineError::NotScalar(_))));
}

#[test]
fn unreachable_parameter_gets_zero_gradient() {
    let mut params = ParamSet::new();
    let used = params.add("used", t(&[2], &[1.0, 2.0]));
    let unused = params.add("unused", t(&[2, 2], &[1.0; 4]));
    let mut g = Graph::with_params(&params);
    let node = g.param(used);
    let loss = g.reduce_mean(node).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(used).data(), &[0.5, 0.5]);
    assert_eq!(grads.get(unused).data(), &[0.0; 4]);
    assert_eq!(grads.get(unused).shape(), &[2, 2]);
}

#[test]
fn bias_broadcast_gradient_sums_rows() {
    let mut params = ParamSet::new();
    let x = params.add("x", t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let b = params.add("b", t(&[2], &[0.5, -0.5]));
    let mut g = Graph::with_params(&params);
    let (xn, bn) = (g.param(x), g.param(b));
    let y = g.add(xn, bn).unwrap();
    assert_eq!(g.value(y).data(), &[1.5, 1.5, 3.5, 3.5, 5.5, 5.5]);
    let loss = g.reduce_sum(y).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(b).data(), &[3.0, 3.0]);
}

#[test]
fn gradcheck_linear_map_is_exact() {
    let mut params = ParamSet::new();
    let w = params.add("w", t(&[1, 1], &[1.0]));
    let report = grad_check(
        &params,
        |g| {
            let x = g.input(t(&[1, 1], &[1.0]));
            let wn = g.param(w);
            let y = g.matmul(x, wn)?;
            g.reduce_sum(y)
        },
        1e-5,
        1e-4,
    );
    assert!(report.passed());
    assert!(report.max_rel_error() < 1e-9, "{}", report.max_rel_error());
}

#[test]
fn gradcheck_excludes_pinball_kink() {
    let mut params = ParamSet::new();
    // residual exactly zero in the first slot
    let u = params.add("u", t(&[1, 2], &[0.0, 0.3]));
    let report = grad_check(
        &params,
        |g| {
            let un = g.param(u);
            let l = g.pinball(un, &[0.25, 0.75])?;
            g.reduce_sum(l)
        },
        1e-5,
        1e-4,
    );
    assert!(report.passed());
    assert_eq!(report.blocks[0].excluded, 1);
    assert_eq!(report.blocks[0].checked, 1);
}

#[test]
fn pinball_kink_takes_upper_branch() {
    let mut params = ParamSet::new();
    let u = params.add("u", t(&[1], &[0.0]));
    let mut g = Graph::with_params(&params);
    let un = g.param(u);
    let l = g.pinball(un, &[0.3]).unwrap();
    let loss = g.reduce_sum(l).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(u).data(), &[0.3]);
}

#[test]
fn relu_kink_gradient_is_zero() {
    let mut params = ParamSet::new();
    let u = params.add("u", t(&[2], &[0.0, 1.0]));
    let mut g = Graph::with_params(&params);
    let un = g.param(u);
    let r = g.relu(un).unwrap();
    let loss = g.reduce_sum(r).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(u).data(), &[0.0, 1.0]);
}

fn any_tensor() -> impl Strategy<Value = Tensor> {
    (1usize..4, 1usize..5, 1usize..4).prop_flat_map(|(a, b, c)| {
        proptest::collection::vec(-10.0f64..10.0, a * b * c)
            .prop_map(move |d| Tensor::from_vec(&[a, b, c], d).unwrap())
    })
}

proptest! {
    #[test]
    fn reverse_time_is_an_involution(x in any_tensor()) {
        let mut g = Graph::new();
        let n = g.input(x.clone());
        let r = g.reverse_time(n).unwrap();
        let rr = g.reverse_time(r).unwrap();
        prop_assert_eq!(g.value(rr), &x);
    }

    #[test]
    fn concat_then_slice_recovers_inputs(a in any_tensor(), extra in 1usize..4) {
        let mut shape = a.shape().to_vec();
        shape[1] = extra;
        let n: usize = shape.iter().product();
        let b = Tensor::from_vec(&shape, (0..n).map(|i| i as f64).collect()).unwrap();
        let mut g = Graph::new();
        let (an, bn) = (g.input(a.clone()), g.input(b.clone()));
        let c = g.concat(&[an, bn], 1).unwrap();
        let a_len = a.shape()[1];
        let a_back = g.slice(c, 1, 0, a_len).unwrap();
        let b_back = g.slice(c, 1, a_len, extra).unwrap();
        prop_assert_eq!(g.value(a_back), &a);
        prop_assert_eq!(g.value(b_back), &b);
    }

    #[test]
    fn same_seed_same_ops_bitwise(seed in 0u64..1000) {
        let run = |seed| {
            let mut rng = SeededRng::new(seed);
            let w = Tensor::new(&[3, 4], Fill::GlorotUniform, &mut rng).unwrap();
            let x = Tensor::new(&[2, 3], Fill::StandardNormal, &mut rng).unwrap();
            let mut g = Graph::new();
            let (wn, xn) = (g.input(w), g.input(x));
            let y = g.matmul(xn, wn).unwrap();
            let y = g.tanh(y).unwrap();
            g.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(seed), run(seed));
    }
}
