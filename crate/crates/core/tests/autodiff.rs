#![allow(clippy::needless_range_loop)]

use proptest::prelude::*;

use tlm::{Graph, Reduction, Tensor, Var};

fn tensor(shape: &[usize], values: &[f64]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), values[..n].to_vec()).unwrap()
}

/// Small composite computation over every differentiable op with a smooth
/// derivative; returns the loss and its leaves.
fn build(g: &mut Graph, params: &[Tensor]) -> (Var, Vec<Var>) {
    let leaves: Vec<Var> = params
        .iter()
        .map(|p| g.leaf(p.clone().with_requires_grad(true)))
        .collect();
    let [x, w1, b1, gain, bias, w2, mix] = leaves[..] else {
        unreachable!()
    };
    let h = g.linear(x, w1, Some(b1)).unwrap();
    let h = g.gelu(h);
    let h = g.layer_norm(h, gain, bias, 1e-6).unwrap();
    let gated = g.glu(h).unwrap();
    let s = g.softmax(gated, 1).unwrap();
    let m = g.mul(s, mix).unwrap();
    let left = g.slice_cols(h, 0, 3).unwrap();
    let c = g.concat_cols(&[m, left]).unwrap();
    let logits = g.matmul_nt(c, w2).unwrap();
    let logits = g.scale(logits, 0.7);
    let loss = g
        .cross_entropy(logits, &[Some(1), None, Some(3)], Reduction::Mean)
        .unwrap();
    (loss, leaves)
}

fn shapes() -> Vec<Vec<usize>> {
    vec![
        vec![3, 4],
        vec![6, 4],
        vec![6],
        vec![6],
        vec![6],
        vec![4, 6],
        vec![3, 3],
    ]
}

fn loss_value(params: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let (loss, _) = build(&mut g, params);
    g.value(loss).item().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gradients_match_central_differences(values in proptest::collection::vec(-1.5f64..1.5, 7 * 24)) {
        let params: Vec<Tensor> = shapes()
            .iter()
            .enumerate()
            .map(|(i, s)| tensor(s, &values[i * 24..]))
            .collect();
        let mut g = Graph::new();
        let (loss, leaves) = build(&mut g, &params);
        g.backward(loss).unwrap();
        let step = 1e-5;
        for (pi, &leaf) in leaves.iter().enumerate() {
            let analytic = g.grad(leaf).unwrap().to_vec();
            for i in 0..params[pi].numel() {
                let mut plus = params.clone();
                plus[pi].data_mut()[i] += step;
                let mut minus = params.clone();
                minus[pi].data_mut()[i] -= step;
                let numeric = (loss_value(&plus) - loss_value(&minus)) / (2.0 * step);
                let a = analytic[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
                prop_assert!(rel < 1e-4, "leaf {pi}[{i}]: analytic {a}, numeric {numeric}");
            }
        }
    }

    #[test]
    fn softmax_normalized_and_shift_invariant(
        (rows, cols) in (1usize..5, 1usize..7),
        values in proptest::collection::vec(-30.0f64..30.0, 24),
        shift in -500.0f64..500.0,
    ) {
        let x = tensor(&[rows, cols], &values);
        let s = x.softmax(1).unwrap();
        for r in 0..rows {
            let total: f64 = s.row(r).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
        let shifted = Tensor::from_fn([rows, cols], |i| x.data()[i] + shift);
        prop_assert!(shifted.softmax(1).unwrap().max_abs_diff(&s) < 1e-12);
    }

    #[test]
    fn matmul_associative_with_identity(
        (m, k, n, p) in (1usize..5, 1usize..5, 1usize..5, 1usize..5),
        values in proptest::collection::vec(-2.0f64..2.0, 75),
    ) {
        let a = tensor(&[m, k], &values);
        let b = tensor(&[k, n], &values[25..]);
        let c = tensor(&[n, p], &values[50..]);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) < 1e-12);
        prop_assert!(a.matmul(&Tensor::identity(k)).unwrap().max_abs_diff(&a) < 1e-12);
        prop_assert!(Tensor::identity(m).matmul(&a).unwrap().max_abs_diff(&a) < 1e-12);
    }
}
