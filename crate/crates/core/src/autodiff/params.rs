use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named model parameters with a per-name freeze flag.
///
/// Names sort lexicographically, which fixes checkpoint write order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        self.frozen.remove(&name);
        self.tensors.insert(name, tensor.with_grad(false));
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.frozen.remove(name);
        self.tensors.remove(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn freeze(&mut self, name: &str) -> Result<()> {
        self.get(name)?;
        self.frozen.insert(name.to_string());
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        self.frozen = self.tensors.keys().cloned().collect();
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.tensors.contains_key(name) && !self.frozen.contains(name)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.tensors
            .keys()
            .filter(|n| !self.frozen.contains(*n))
            .cloned()
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| !self.frozen.contains(*n))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Parameters whose names start with `prefix`, as a new store.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (n, t) in self.tensors.iter().filter(|(n, _)| n.starts_with(prefix)) {
            out.insert(n.clone(), t.clone());
            if self.frozen.contains(n) {
                out.frozen.insert(n.clone());
            }
        }
        out
    }

    /// Copies every parameter of `other` into `self`, overwriting.
    pub fn extend(&mut self, other: &ParamStore) {
        for (n, t) in &other.tensors {
            self.tensors.insert(n.clone(), t.clone());
            if other.frozen.contains(n) {
                self.frozen.insert(n.clone());
            } else {
                self.frozen.remove(n);
            }
        }
    }

    /// Applies `p ← p − lr·g` to every named gradient.
    pub fn sgd_step(&mut self, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            if self.frozen.contains(name) {
                return Err(Error::invalid(format!("gradient step on frozen parameter {name:?}")));
            }
            sgd_step(self.get_mut(name)?, g, lr)?;
        }
        Ok(())
    }
}

/// `param ← param − lr·grad`.
pub fn sgd_step(param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::shape(
            "sgd_step",
            format!("param {:?} vs grad {:?}", param.shape(), grad.shape()),
        ));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!(
            "learning rate must be finite and non-negative, got {lr}"
        )));
    }
    for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
        *p -= lr * g;
    }
    Ok(())
}

/// Accumulates `src` into `dst` by name (`dst += src`).
pub fn accumulate_grads(dst: &mut BTreeMap<String, Tensor>, src: BTreeMap<String, Tensor>) -> Result<()> {
    for (name, g) in src {
        match dst.get_mut(&name) {
            Some(d) => {
                if d.shape() != g.shape() {
                    return Err(Error::shape("accumulate_grads", name));
                }
                for (a, b) in d.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => {
                dst.insert(name, g);
            }
        }
    }
    Ok(())
}

/// Lazily records store parameters as tape leaves, once per name.
pub struct Binding<'t> {
    tape: &'t Tape,
    store: &'t ParamStore,
    vars: RefCell<BTreeMap<String, Var<'t>>>,
}

impl<'t> Binding<'t> {
    pub fn new(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Binding {
            tape,
            store,
            vars: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'t ParamStore {
        self.store
    }

    pub fn param(&self, name: &str) -> Result<Var<'t>> {
        if let Some(v) = self.vars.borrow().get(name) {
            return Ok(*v);
        }
        let t = self.store.get(name)?.clone();
        let v = self.tape.leaf(t.with_grad(self.store.is_trainable(name)));
        self.vars.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    /// Gradients of every bound trainable parameter. Parameters that were
    /// bound but did not influence the loss get zero gradients.
    pub fn grads(&self, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        let vars = self.vars.borrow();
        vars.iter()
            .filter(|(n, _)| self.store.is_trainable(n))
            .map(|(n, v)| {
                let g = grads.take(*v).unwrap_or_else(|| Tensor::zeros(&v.shape()));
                (n.clone(), g)
            })
            .collect()
    }
}

/// Records a loss on a fresh tape, runs backward and returns
/// `(loss value, gradients of trainable parameters)`.
pub fn value_and_grad<F>(store: &ParamStore, f: F) -> Result<(f64, BTreeMap<String, Tensor>)>
where
    F: for<'t> FnOnce(&Binding<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let binding = Binding::new(&tape, store);
    let loss = f(&binding)?;
    let value = loss.item();
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    let mut g = tape.backward(loss)?;
    Ok((value, binding.grads(&mut g)))
}
