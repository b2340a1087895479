//! Named parameter storage shared by all networks.

use std::ops::Index;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Learnable weight.
    Weight,
    /// Non-learnable state such as running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Arc<Tensor<T>>,
    pub kind: ParamKind,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BindMode {
    /// Trainable weights require gradients.
    Train,
    /// Everything is a constant; gradients may still flow through to inputs.
    Frozen,
}

/// Parameters placed on a tape for one forward/backward pass.
pub struct Bound<'t, T: Scalar> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> Index<usize> for Bound<'t, T> {
    type Output = Var<'t, T>;

    fn index(&self, i: usize) -> &Var<'t, T> {
        &self.vars[i]
    }
}

impl<'t, T: Scalar> Bound<'t, T> {
    /// Per-parameter gradients, aligned with the owning [`ParamSet`].
    pub fn grads(&self, g: &Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.vars.iter().map(|&v| g.get(v).cloned()).collect()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> usize {
        let name = name.into();
        assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param { name, value: Arc::new(value), kind, trainable: kind == ParamKind::Weight });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn get(&self, i: usize) -> &Param<T> {
        &self.params[i]
    }

    pub fn value(&self, i: usize) -> &Tensor<T> {
        &self.params[i].value
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn set_value(&mut self, i: usize, value: Tensor<T>) {
        assert_eq!(value.shape(), self.params[i].value.shape(), "parameter {} shape", self.params[i].name);
        self.params[i].value = Arc::new(value);
    }

    /// Mutable access for in-place optimizer updates.
    pub fn value_mut(&mut self, i: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[i].value)
    }

    pub fn is_trainable(&self, i: usize) -> bool {
        self.params[i].kind == ParamKind::Weight && self.params[i].trainable
    }

    /// Marks weights trainable iff `keep(name)`.
    pub fn set_trainable_where(&mut self, keep: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            p.trainable = p.kind == ParamKind::Weight && keep(&p.name);
        }
    }

    pub fn freeze_all(&mut self) {
        self.set_trainable_where(|_| false);
    }

    /// Scalar count over all weights.
    pub fn weight_count(&self) -> usize {
        self.params.iter().filter(|p| p.kind == ParamKind::Weight).map(|p| p.value.numel()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        (0..self.params.len()).filter(|&i| self.is_trainable(i)).map(|i| self.params[i].value.numel()).sum()
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, mode: BindMode) -> Bound<'t, T> {
        let vars = (0..self.params.len())
            .map(|i| {
                let rg = mode == BindMode::Train && self.is_trainable(i);
                tape.leaf_shared(self.params[i].value.clone(), rg)
            })
            .collect();
        Bound { vars }
    }

    /// SHA-256 over names and values of the parameters selected by `select`.
    pub fn digest(&self, select: impl Fn(&Param<T>) -> bool) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| select(p)) {
            h.update(p.name.as_bytes());
            h.update([0]);
            for &v in p.value.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn digest_all(&self) -> String {
        self.digest(|_| true)
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: Arc::new(p.value.cast()),
                    kind: p.kind,
                    trainable: p.trainable,
                })
                .collect(),
        }
    }
}

pub(crate) fn normal_tensor<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::of(dist.sample(rng))).collect())
}
