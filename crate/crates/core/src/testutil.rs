//! Finite-difference gradient oracle shared by unit tests.

use std::collections::BTreeMap;

use crate::autodiff::{Binding, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Central differences of a scalar function of several tensors.
pub fn numeric_grads<F>(inputs: &[Tensor], f: F) -> Vec<Vec<f64>>
where
    F: Fn(&[Tensor]) -> f64,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::new();
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].numel()];
        for j in 0..g.len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let up = f(&work);
            work[i].data_mut()[j] = orig - FD_STEP;
            let down = f(&work);
            work[i].data_mut()[j] = orig;
            g[j] = (up - down) / (2.0 * FD_STEP);
        }
        out.push(g);
    }
    out
}

/// Compares tape gradients of `f` against central differences and returns
/// the worst relative error.
pub fn check_gradients<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad(true))).collect();
    let loss = f(&tape, &vars).expect("forward");
    let mut grads = tape.backward(loss).expect("backward");
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|v| grads.take(*v).unwrap_or_else(|| Tensor::zeros(&v.shape())))
        .collect();
    let numeric = numeric_grads(inputs, |xs| {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).expect("forward").item()
    });
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (x, y) in a.data().iter().zip(n) {
            worst = worst.max(rel_err(*x, *y));
        }
    }
    worst
}

/// Same check for a loss over a parameter store; every trainable parameter
/// is perturbed.
pub fn check_store_gradients<F>(store: &ParamStore, f: F) -> f64
where
    F: for<'t> Fn(&Binding<'t>) -> Result<Var<'t>>,
{
    let (_, analytic) = crate::autodiff::value_and_grad(store, |b| f(b)).expect("forward");
    let mut worst: f64 = 0.0;
    let mut work = store.clone();
    let eval = |s: &ParamStore| {
        let tape = Tape::new();
        let b = Binding::new(&tape, s);
        f(&b).expect("forward").item()
    };
    let names: BTreeMap<String, Tensor> = analytic;
    for (name, g) in &names {
        for j in 0..g.numel() {
            let orig = work.get(name).unwrap().data()[j];
            work.get_mut(name).unwrap().data_mut()[j] = orig + FD_STEP;
            let up = eval(&work);
            work.get_mut(name).unwrap().data_mut()[j] = orig - FD_STEP;
            let down = eval(&work);
            work.get_mut(name).unwrap().data_mut()[j] = orig;
            let n = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g.data()[j], n));
        }
    }
    worst
}
