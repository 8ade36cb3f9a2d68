//! Forward examples and finite-difference checks for every tape operation.

use dan::tensor::{Graph, Tensor, Var};
use dan::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Builds `loss = Σ w ⊙ f(inputs)` with fixed random weights `w`, differentiates
/// it, and compares every input gradient against central differences.
fn check_op<F>(inputs: Vec<Tensor<f64>>, f: F)
where
    F: Fn(&mut Graph<'static, f64>, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eval = |ts: &[Tensor<f64>], w: Option<&Tensor<f64>>| -> (f64, Option<Vec<Tensor<f64>>>, Tensor<f64>) {
        let mut g = Graph::standalone();
        let vars: Vec<Var> = ts.iter().map(|t| g.variable(t.clone())).collect();
        let y = f(&mut g, &vars);
        let shape = g.shape(y).to_vec();
        let wt = match w {
            Some(w) => w.clone(),
            None => Tensor::full(shape.clone(), 0.0),
        };
        let wv = g.constant(wt.clone());
        let prod = g.mul(y, wv).unwrap();
        let loss = g.sum(prod).unwrap();
        let l = g.value(loss).item();
        let grads = w.map(|_| {
            let gr = g.backward(loss).unwrap();
            vars.iter()
                .map(|&v| gr.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v).to_vec())))
                .collect()
        });
        (l, grads, Tensor::zeros(shape))
    };
    let (_, _, out_shape) = eval(&inputs, None);
    let w = rand_tensor(&mut rng, out_shape.shape());
    let (_, analytic, _) = eval(&inputs, Some(&w));
    let analytic = analytic.unwrap();

    let h = 1e-6;
    for (k, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[j] -= h;
            let numeric = (eval(&plus, Some(&w)).0 - eval(&minus, Some(&w)).0) / (2.0 * h);
            let a = analytic[k].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            assert!(rel < 1e-5, "input {k} elem {j}: analytic {a} numeric {numeric}");
        }
    }
}

#[test]
fn linear_examples() {
    let mut g = Graph::<f32>::standalone();
    let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
    let eye = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let y = g.linear(x, eye, None).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0]);

    let x = g.constant(Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap());
    let w = g.constant(Tensor::from_rows(&[vec![2.0], vec![3.0]]).unwrap());
    let b = g.constant(Tensor::vector(vec![1.0]).unwrap());
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[6.0]);
    assert_eq!(g.shape(y), &[1, 1]);
}

#[test]
fn linear_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[4, 3]).cast::<f32>();
    let w = rand_tensor(&mut rng, &[3, 2]).cast::<f32>();
    let mut g = Graph::<f32>::standalone();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.linear(xv, wv, None).unwrap();
    for i in 0..4 {
        for j in 0..2 {
            let mut acc = 0.0f32;
            for p in 0..3 {
                acc += x.data()[i * 3 + p] * w.data()[p * 2 + j];
            }
            assert_eq!(g.value(y).data()[i * 2 + j], acc);
        }
    }
}

#[test]
fn linear_shape_mismatch_reports_both_shapes() {
    let mut g = Graph::<f32>::standalone();
    let x = g.constant(Tensor::zeros(vec![1, 2]));
    let w = g.constant(Tensor::zeros(vec![3, 2]));
    match g.linear(x, w, None) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![1, 2]);
            assert_eq!(rhs, vec![3, 2]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f32>::standalone();
    let a = g.constant(Tensor::vector(vec![0.0, 0.0]).unwrap());
    let s = g.softmax(a).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);

    let a = g.constant(Tensor::vector(vec![2f32.ln(), 0.0]).unwrap());
    let s = g.softmax(a).unwrap();
    let d = g.value(s).data();
    assert!((d[0] - 2.0 / 3.0).abs() < 1e-6 && (d[1] - 1.0 / 3.0).abs() < 1e-6);

    let a = g.constant(Tensor::vector(vec![1000.0, 0.0]).unwrap());
    let s = g.softmax(a).unwrap();
    let d = g.value(s).data();
    assert_eq!(d[0], 1.0);
    assert!(d[1] < 1e-30);

    let scalar = g.constant(Tensor::scalar(1.0));
    assert!(matches!(g.softmax(scalar), Err(Error::Dimension { .. })));
}

#[test]
fn softmax_rows_sum_to_one_for_large_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::<f32>::standalone();
    let data: Vec<f32> = (0..60).map(|_| rng.random_range(-1e4..1e4)).collect();
    let a = g.constant(Tensor::new(vec![6, 10], data).unwrap());
    let s = g.softmax(a).unwrap();
    for r in 0..6 {
        let row = g.value(s).row_slice(r);
        let sum: f32 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f32>::standalone();
    let ones = g.constant(Tensor::full(vec![2], 1.0));
    let zeros = g.constant(Tensor::zeros(vec![2]));
    let x = g.constant(Tensor::row(vec![1.0, 3.0]).unwrap());
    let y = g.layer_norm(x, ones, zeros, 1e-5).unwrap();
    let d = g.value(y).data();
    assert!((d[0] + 1.0).abs() < 1e-4 && (d[1] - 1.0).abs() < 1e-4);

    let ones = g.constant(Tensor::full(vec![3], 1.0));
    let zeros = g.constant(Tensor::zeros(vec![3]));
    let x = g.constant(Tensor::row(vec![5.0, 5.0, 5.0]).unwrap());
    let y = g.layer_norm(x, ones, zeros, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);

    let single = g.constant(Tensor::row(vec![1.0]).unwrap());
    let one = g.constant(Tensor::full(vec![1], 1.0));
    assert!(g.layer_norm(single, one, one, 1e-5).is_err());
}

#[test]
fn layer_norm_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[3, 7]);
    let gain = rand_tensor(&mut rng, &[7]);
    let bias = rand_tensor(&mut rng, &[7]);
    let mut g = Graph::<f64>::standalone();
    let (xv, gv, bv) = (g.constant(x.clone()), g.constant(gain.clone()), g.constant(bias.clone()));
    let y = g.layer_norm(xv, gv, bv, 1e-5).unwrap();
    for r in 0..3 {
        let row = x.row_slice(r);
        let mean = row.iter().sum::<f64>() / 7.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
        for j in 0..7 {
            let want = (row[j] - mean) / (var + 1e-5).sqrt() * gain.data()[j] + bias.data()[j];
            assert!((g.value(y).data()[r * 7 + j] - want).abs() < 1e-12);
        }
    }

    // Unit gain and zero bias: zero mean, unit variance per row.
    let ones = g.constant(Tensor::full(vec![7], 1.0));
    let zeros = g.constant(Tensor::zeros(vec![7]));
    let y = g.layer_norm(xv, ones, zeros, 1e-5).unwrap();
    for r in 0..3 {
        let row = g.value(y).row_slice(r);
        let mean = row.iter().sum::<f64>() / 7.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::<f32>::standalone();
    let a = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]).unwrap());
    let r = g.relu(a).unwrap();
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);

    let a = g.constant(Tensor::vector(vec![2.0, 3.0]).unwrap());
    let b = g.constant(Tensor::vector(vec![4.0, 5.0]).unwrap());
    let m = g.mul(a, b).unwrap();
    assert_eq!(g.value(m).data(), &[8.0, 15.0]);
    let s = g.add(a, b).unwrap();
    assert_eq!(g.value(s).data(), &[6.0, 8.0]);

    let a = g.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
    let b = g.constant(Tensor::vector(vec![3.0]).unwrap());
    let c = g.concat(&[a, b], 0).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);

    assert!(matches!(g.mul(a, b), Err(Error::Dimension { .. })));
    let m2 = g.constant(Tensor::zeros(vec![2, 2]));
    let m3 = g.constant(Tensor::zeros(vec![3, 3]));
    assert!(g.concat(&[m2, m3], 0).is_err());
}

#[test]
fn backward_examples() {
    let mut g = Graph::<f32>::standalone();
    let x = g.variable(Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap());
    let s = g.sum(x).unwrap();
    let gr = g.backward(s).unwrap();
    assert_eq!(gr.wrt(x).unwrap().data(), &[1.0; 6]);

    let mut g = Graph::<f32>::standalone();
    let x = g.variable(Tensor::vector(vec![1.0, 2.0]).unwrap());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    let gr = g.backward(s).unwrap();
    assert_eq!(gr.wrt(x).unwrap().data(), &[2.0, 4.0]);

    assert!(matches!(g.backward(x), Err(Error::Usage(_))));
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut g = Graph::<f32>::standalone();
    let a = g.constant(Tensor::vector(vec![f32::MAX, 1.0]).unwrap());
    let b = g.constant(Tensor::vector(vec![f32::MAX, 1.0]).unwrap());
    assert!(matches!(g.add(a, b), Err(Error::NonFinite { .. })));
}

#[test]
fn gradients_for_every_operation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let m23 = rand_tensor(&mut rng, &[2, 3]);
    let m32 = rand_tensor(&mut rng, &[3, 2]);
    let m23b = rand_tensor(&mut rng, &[2, 3]);
    let v3 = rand_tensor(&mut rng, &[3]);
    let v2 = rand_tensor(&mut rng, &[2]);
    let m44 = rand_tensor(&mut rng, &[4, 4]);

    check_op(vec![m23.clone(), m32.clone()], |g, v| g.matmul(v[0], v[1]).unwrap());
    check_op(vec![m23.clone(), m32.clone(), v2.clone()], |g, v| {
        g.linear(v[0], v[1], Some(v[2])).unwrap()
    });
    check_op(vec![m23.clone()], |g, v| g.transpose(v[0]).unwrap());
    check_op(vec![m23.clone(), m23b.clone()], |g, v| g.add(v[0], v[1]).unwrap());
    check_op(vec![m23.clone(), m23b.clone()], |g, v| g.mul(v[0], v[1]).unwrap());
    check_op(vec![m23.clone(), v3.clone()], |g, v| g.add_row(v[0], v[1]).unwrap());
    check_op(vec![m23.clone(), v3.clone()], |g, v| g.mul_row(v[0], v[1]).unwrap());
    check_op(vec![m23.clone(), v2.clone()], |g, v| g.mul_col(v[0], v[1]).unwrap());
    check_op(vec![m23.clone()], |g, v| g.scale(v[0], -2.5).unwrap());
    check_op(vec![m23.clone()], |g, v| g.relu(v[0]).unwrap());
    check_op(vec![m23.clone()], |g, v| g.sigmoid(v[0]).unwrap());
    check_op(vec![m23.clone()], |g, v| g.tanh(v[0]).unwrap());
    check_op(vec![m44.clone()], |g, v| g.softmax(v[0]).unwrap());
    check_op(vec![m23.clone(), v3.clone(), v3.clone()], |g, v| {
        g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()
    });
    check_op(vec![m23.clone(), m23b.clone()], |g, v| g.concat(&[v[0], v[1]], 0).unwrap());
    check_op(vec![m23.clone(), m44.clone().reshape(vec![2, 8]).unwrap()], |g, v| {
        g.concat(&[v[0], v[1]], 1).unwrap()
    });
    check_op(vec![m44.clone()], |g, v| g.narrow(v[0], 1, 1, 2).unwrap());
    check_op(vec![m44.clone()], |g, v| g.narrow(v[0], 0, 2, 2).unwrap());
    check_op(vec![m44.clone()], |g, v| g.gather_rows(v[0], &[3, 0, 3]).unwrap());
    check_op(vec![m44.clone()], |g, v| g.reshape(v[0], vec![2, 8]).unwrap());
    check_op(vec![m44.clone()], |g, v| g.mean(v[0]).unwrap());
    check_op(vec![rand_tensor(&mut rng, &[1, 5])], |g, v| g.cross_entropy(v[0], 2).unwrap());
}

#[test]
fn composite_graph_in_single_precision() {
    // A shallow composite in f32: relative error < 1e-3 with step 1e-3 on a
    // loss whose gradients are O(1).
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = rand_tensor(&mut rng, &[2, 4]).cast::<f32>();
    let w = rand_tensor(&mut rng, &[4, 3]).cast::<f32>();
    let loss = |w: &Tensor<f32>| -> (f32, Tensor<f32>) {
        let mut g = Graph::<f32>::standalone();
        let xv = g.constant(x.clone());
        let wv = g.variable(w.clone());
        let y = g.matmul(xv, wv).unwrap();
        let t = g.tanh(y).unwrap();
        let s = g.sum(t).unwrap();
        let gr = g.backward(s).unwrap();
        (g.value(s).item(), gr.wrt(wv).unwrap().clone())
    };
    let (_, analytic) = loss(&w);
    let h = 1e-3f32;
    for j in 0..w.numel() {
        let mut p = w.clone();
        p.data_mut()[j] += h;
        let mut m = w.clone();
        m.data_mut()[j] -= h;
        let numeric = (loss(&p).0 - loss(&m).0) / (2.0 * h);
        let a = analytic.data()[j];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-2);
        assert!(rel < 1e-3, "elem {j}: {a} vs {numeric}");
    }
}

#[test]
fn inference_graph_refuses_backward() {
    let store = dan::params::ParamStore::<f32>::new();
    let mut g = Graph::inference(&store);
    let x = g.variable(Tensor::scalar(1.0));
    assert!(g.backward(x).is_err());
}
