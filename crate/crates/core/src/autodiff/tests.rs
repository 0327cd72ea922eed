use super::*;
use crate::rng;
use crate::testutil::{check_gradients, rel_err};

fn m(r: usize, c: usize, d: &[f64]) -> Tensor {
    Tensor::matrix(r, c, d.to_vec()).unwrap()
}

#[test]
fn matmul_identity_and_scalar() {
    let tape = Tape::new();
    let i = tape.constant(m(2, 2, &[1.0, 0.0, 0.0, 1.0]));
    let b = tape.constant(m(2, 2, &[3.0, 4.0, 5.0, 6.0]));
    assert_eq!(i.matmul(&b).unwrap().value().data(), &[3.0, 4.0, 5.0, 6.0]);
    let x = tape.constant(m(1, 1, &[2.0]));
    let y = tape.constant(m(1, 1, &[3.0]));
    assert_eq!(x.matmul(&y).unwrap().item(), 6.0);
}

#[test]
fn matmul_shape_mismatch() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(a.matmul(&b).is_err());
}

#[test]
fn matmul_sum_gradient_is_ones_times_bt() {
    let mut r = rng::from_seed(3);
    let a = Tensor::uniform(&[4, 5], -1.0, 1.0, &mut r);
    let b = Tensor::uniform(&[5, 3], -1.0, 1.0, &mut r);
    let tape = Tape::new();
    let av = tape.leaf(a.clone().with_grad(true));
    let bv = tape.constant(b.clone());
    let loss = av.matmul(&bv).unwrap().sum().unwrap();
    let g = tape.backward(loss).unwrap();
    let expected = matmul(&Tensor::ones(&[4, 3]), &b.transpose2()).unwrap();
    for (x, y) in g.get(av).unwrap().data().iter().zip(expected.data()) {
        assert!((x - y).abs() < 1e-12);
    }
    let worst = check_gradients(&[a, b], |_, v| v[0].matmul(&v[1])?.sum());
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn elementwise_examples() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
    assert_eq!(x.relu().unwrap().value().data(), &[0.0, 0.0, 2.0]);
    let zero = tape.constant(Tensor::scalar(0.0));
    assert_eq!(x.add(&zero).unwrap().value().data(), x.value().data());
    let y = tape.constant(Tensor::zeros(&[2]));
    assert!(x.add(&y).is_err());
    assert!(x.elementwise(Elementwise::Mul, None).is_err());
    let r = x.elementwise(Elementwise::Relu, None).unwrap();
    assert_eq!(r.value().data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn mul_gradient_matches_finite_differences() {
    let mut r = rng::from_seed(11);
    let a = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut r);
    let b = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut r);
    let w = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut r);
    let worst = check_gradients(&[a, b, w], |_, v| v[0].mul(&v[1])?.mul(&v[2])?.sum());
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn cross_entropy_examples() {
    let tape = Tape::new();
    let uniform = tape.constant(Tensor::zeros(&[1, 4]));
    let l = uniform.softmax_cross_entropy(&[2]).unwrap().item();
    assert!((l - 4f64.ln()).abs() < 1e-12);

    let mut d = vec![0.0; 4];
    d[1] = 1000.0;
    let peaked = tape.constant(m(1, 4, &d));
    assert!(peaked.softmax_cross_entropy(&[1]).unwrap().item() < 1e-12);
    assert!(peaked.softmax_cross_entropy(&[4]).is_err());
    let single = tape.constant(Tensor::zeros(&[1, 1]));
    assert!(single.softmax_cross_entropy(&[0]).is_err());
}

#[test]
fn cross_entropy_matches_direct_formula() {
    let mut r = rng::from_seed(5);
    let logits = Tensor::uniform(&[3, 5], -2.0, 2.0, &mut r);
    let targets = [4usize, 0, 2];
    let mut expected = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row: Vec<f64> = (0..5).map(|j| logits.get2(i, j)).collect();
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        expected += -(row[t].exp() / z).ln();
    }
    expected /= 3.0;
    let tape = Tape::new();
    let got = tape
        .constant(logits.clone())
        .softmax_cross_entropy(&targets)
        .unwrap()
        .item();
    assert!((got - expected).abs() < 1e-12);
    let worst = check_gradients(&[logits], |_, v| v[0].softmax_cross_entropy(&targets));
    assert!(worst < 1e-4);
}

#[test]
fn kl_examples() {
    let tape = Tape::new();
    let p = m(1, 3, &[0.2, 0.3, 0.5]);
    let logp = m(1, 3, &[0.2f64.ln(), 0.3f64.ln(), 0.5f64.ln()]);
    assert!(tape.constant(logp).kl_divergence(&p).unwrap().item().abs() < 1e-15);

    let target = m(1, 2, &[1.0, 0.0]);
    let half = m(1, 2, &[0.5f64.ln(), 0.5f64.ln()]);
    let kl = tape.constant(half.clone()).kl_divergence(&target).unwrap().item();
    assert!((kl - 2f64.ln()).abs() < 1e-15);

    let negative = m(1, 2, &[1.5, -0.5]);
    assert!(tape.constant(half).kl_divergence(&negative).is_err());
}

#[test]
fn kl_matches_direct_sum() {
    let mut r = rng::from_seed(21);
    let normalize = |t: Tensor| {
        let c = t.cols();
        let mut d = t.data().to_vec();
        for row in d.chunks_mut(c) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        Tensor::new(t.shape().to_vec(), d).unwrap()
    };
    let p = normalize(Tensor::uniform(&[4, 6], 0.01, 1.0, &mut r));
    let q = normalize(Tensor::uniform(&[4, 6], 0.01, 1.0, &mut r));
    let logq = Tensor::new(vec![4, 6], q.data().iter().map(|v| v.ln()).collect()).unwrap();
    let mut expected = 0.0;
    for (pi, qi) in p.data().iter().zip(q.data()) {
        expected += pi * (pi / qi).ln();
    }
    expected /= 4.0;
    let tape = Tape::new();
    let got = tape.constant(logq.clone()).kl_divergence(&p).unwrap().item();
    assert!((got - expected).abs() < 1e-10);
    let worst = check_gradients(&[logq], |_, v| v[0].kl_divergence(&p));
    assert!(worst < 1e-4);
}

#[test]
fn backward_examples() {
    let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
    let tape = Tape::new();
    let xv = tape.leaf(x.clone().with_grad(true));
    let g = tape.backward(xv.sum().unwrap()).unwrap();
    assert_eq!(g.get(xv).unwrap().data(), &[1.0, 1.0, 1.0]);

    let tape = Tape::new();
    let xv = tape.leaf(x.clone().with_grad(true));
    let g = tape.backward(xv.mul(&xv).unwrap().sum().unwrap()).unwrap();
    assert_eq!(g.get(xv).unwrap().data(), &[2.0, -4.0, 1.0]);

    let tape = Tape::new();
    let xv = tape.leaf(x.with_grad(true));
    assert!(tape.backward(xv).is_err());
}

#[test]
fn tape_is_consumed_once() {
    let tape = Tape::new();
    let xv = tape.leaf(Tensor::scalar(2.0).with_grad(true));
    let l = xv.mul(&xv).unwrap();
    assert!(tape.backward(l).is_ok());
    assert!(tape.backward(l).is_err());
}

#[test]
fn frozen_leaves_get_no_gradient() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::ones(&[2, 2]));
    let b = tape.leaf(Tensor::ones(&[2, 2]).with_grad(true));
    let l = a.matmul(&b).unwrap().sum().unwrap();
    let g = tape.backward(l).unwrap();
    assert!(g.get(a).is_none());
    assert!(g.get(b).is_some());
}

#[test]
fn sgd_examples() {
    let mut p = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
    let g = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
    sgd_step(&mut p, &g, 0.5).unwrap();
    assert_eq!(p.data(), &[0.5, 1.5]);
    sgd_step(&mut p, &g, 0.0).unwrap();
    assert_eq!(p.data(), &[0.5, 1.5]);
    assert!(sgd_step(&mut p, &Tensor::zeros(&[3]), 0.1).is_err());
}

#[test]
fn sgd_on_quadratic_decays_geometrically() {
    let lr = 0.3;
    let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 4.0]).unwrap();
    let start = p.clone();
    let mut prev = f64::INFINITY;
    for k in 1..=2 {
        let tape = Tape::new();
        let v = tape.leaf(p.clone().with_grad(true));
        let loss = v.mul(&v).unwrap().sum().unwrap().scale(0.5).unwrap();
        let g = tape.backward(loss).unwrap();
        sgd_step(&mut p, g.get(v).unwrap(), lr).unwrap();
        let norm: f64 = p.data().iter().map(|x| x * x).sum();
        assert!(norm < prev);
        prev = norm;
        for (x, x0) in p.data().iter().zip(start.data()) {
            assert!((x - x0 * (1.0f64 - lr).powi(k)).abs() < 1e-14);
        }
    }
}

fn random_inputs(seed: u64, shapes: &[&[usize]]) -> Vec<Tensor> {
    let mut r = rng::from_seed(seed);
    shapes.iter().map(|s| Tensor::uniform(s, -1.0, 1.0, &mut r)).collect()
}

/// Every differentiable op against central differences on 100 random inputs.
#[test]
fn all_ops_match_finite_differences() {
    type Case = (
        &'static str,
        Vec<Vec<usize>>,
        Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> crate::Result<Var<'t>>>,
    );
    let cases: Vec<Case> = vec![
        (
            "matmul",
            vec![vec![3, 4], vec![4, 2]],
            Box::new(|_, v| v[0].matmul(&v[1])?.tanh()?.sum()),
        ),
        (
            "matmul_t",
            vec![vec![3, 4], vec![2, 4]],
            Box::new(|_, v| v[0].matmul_t(&v[1])?.tanh()?.sum()),
        ),
        (
            "transpose",
            vec![vec![2, 3], vec![2, 3]],
            Box::new(|_, v| v[0].transpose()?.matmul(&v[1])?.tanh()?.sum()),
        ),
        (
            "add",
            vec![vec![2, 3], vec![2, 3]],
            Box::new(|_, v| v[0].add(&v[1])?.tanh()?.sum()),
        ),
        (
            "add_scalar_bcast",
            vec![vec![1], vec![2, 3]],
            Box::new(|_, v| v[0].add(&v[1])?.tanh()?.sum()),
        ),
        (
            "sub",
            vec![vec![2, 3], vec![1]],
            Box::new(|_, v| v[0].sub(&v[1])?.tanh()?.sum()),
        ),
        (
            "mul",
            vec![vec![2, 3], vec![2, 3]],
            Box::new(|_, v| v[0].mul(&v[1])?.tanh()?.sum()),
        ),
        (
            "mul_scalar_bcast",
            vec![vec![2, 3], vec![1]],
            Box::new(|_, v| v[0].mul(&v[1])?.tanh()?.sum()),
        ),
        (
            "scale_shift",
            vec![vec![2, 3]],
            Box::new(|_, v| v[0].scale(1.7)?.add_scalar(0.3)?.tanh()?.sum()),
        ),
        (
            "add_row",
            vec![vec![3, 4], vec![1, 4]],
            Box::new(|_, v| v[0].add_row(&v[1])?.tanh()?.sum()),
        ),
        (
            "relu",
            vec![vec![2, 5]],
            Box::new(|_, v| v[0].relu()?.mul(&v[0])?.sum()),
        ),
        (
            "gelu",
            vec![vec![2, 5]],
            Box::new(|_, v| v[0].gelu()?.mul(&v[0])?.sum()),
        ),
        (
            "tanh",
            vec![vec![2, 5]],
            Box::new(|_, v| v[0].tanh()?.mul(&v[0])?.sum()),
        ),
        ("mean", vec![vec![2, 5]], Box::new(|_, v| v[0].mul(&v[0])?.mean())),
        (
            "mean_rows",
            vec![vec![3, 4]],
            Box::new(|_, v| v[0].mean_rows()?.tanh()?.sum()),
        ),
        (
            "softmax_rows",
            vec![vec![3, 4], vec![3, 4]],
            Box::new(|_, v| v[0].softmax_rows()?.mul(&v[1])?.sum()),
        ),
        (
            "log_softmax_rows",
            vec![vec![3, 4], vec![3, 4]],
            Box::new(|_, v| v[0].log_softmax_rows()?.mul(&v[1])?.sum()),
        ),
        (
            "gather_rows",
            vec![vec![4, 3]],
            Box::new(|_, v| v[0].gather_rows(&[2, 0, 2])?.tanh()?.sum()),
        ),
        (
            "concat_rows",
            vec![vec![1, 3], vec![2, 3]],
            Box::new(|_, v| concat_rows(&[v[0], v[1], v[0]])?.tanh()?.sum()),
        ),
        (
            "reshape",
            vec![vec![2, 3], vec![3, 2]],
            Box::new(|_, v| v[0].reshape(&[3, 2])?.mul(&v[1])?.tanh()?.sum()),
        ),
        (
            "cross_entropy",
            vec![vec![3, 4]],
            Box::new(|_, v| v[0].softmax_cross_entropy(&[1, 3, 0])),
        ),
        (
            "mse",
            vec![vec![2, 3]],
            Box::new(|_, v| v[0].mse(&Tensor::filled(&[2, 3], 0.25))),
        ),
    ];
    for (name, shapes, f) in &cases {
        let shapes: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        for seed in 0..100 {
            let inputs = random_inputs(seed * 31 + name.len() as u64, &shapes);
            let worst = check_gradients(&inputs, |t, v| f(t, v));
            assert!(worst < 1e-4, "{name} seed {seed}: rel err {worst}");
        }
    }
}

#[test]
fn gradients_are_linear_in_the_loss() {
    let inputs = random_inputs(9, &[&[3, 4], &[4, 2]]);
    fn l1<'t>(v: &[Var<'t>]) -> crate::Result<Var<'t>> {
        v[0].matmul(&v[1])?.tanh()?.sum()
    }
    fn l2<'t>(v: &[Var<'t>]) -> crate::Result<Var<'t>> {
        v[0].gelu()?.mean()
    }
    let run = |which: u8| {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad(true))).collect();
        let loss = match which {
            0 => l1(&vars).unwrap(),
            1 => l2(&vars).unwrap(),
            _ => l1(&vars).unwrap().add(&l2(&vars).unwrap()).unwrap(),
        };
        let mut g = tape.backward(loss).unwrap();
        vars.iter()
            .map(|v| g.take(*v).unwrap_or_else(|| Tensor::zeros(&v.shape())))
            .collect::<Vec<_>>()
    };
    let (a, b, both) = (run(0), run(1), run(2));
    for i in 0..2 {
        for j in 0..a[i].numel() {
            let sep = a[i].data()[j] + b[i].data()[j];
            assert!((sep - both[i].data()[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn large_inputs_stay_finite() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![2, 3], vec![1e6, -1e6, 0.0, -1e6, 1e6, 5e5]).unwrap());
    for v in [x.relu(), x.gelu(), x.softmax_rows(), x.log_softmax_rows(), x.tanh()] {
        assert!(v.unwrap().value().is_finite());
    }
    assert!(x.softmax_cross_entropy(&[1, 0]).unwrap().item().is_finite());
}

#[test]
fn non_finite_results_are_errors() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::scalar(1e200));
    assert!(matches!(x.mul(&x), Err(crate::Error::NonFinite { .. })));
}

#[test]
fn rel_err_floor() {
    assert!(rel_err(1e-9, 2e-9) < 1e-4);
    assert!(rel_err(1.0, 1.1) > 1e-2);
}
