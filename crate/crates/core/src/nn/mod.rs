//! Parameter storage and the encoder / projector / predictor networks.

mod branch;
mod encoder;
mod head;

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{BnMode, Gradients, Scalar, Tape, Tensor, Var};

pub use branch::{DualBranch, Network};
pub use encoder::{Encoder, EncoderDef, EncoderStage};
pub use head::{HeadDef, Mlp};

/// Batch-norm running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Conv / linear weights.
    Weight,
    /// Norm affine parameters and biases.
    NormOrBias,
    /// Non-trainable running statistics.
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::Buffer)
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub kind: ParamKind,
}

/// Named parameters and buffers of one network branch.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            value,
            grad: None,
            kind,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind.trainable())
            .map(|e| e.value.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    /// Adds parameter gradients (keyed by `ParamId::index`) into `grad`.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (key, g) in grads.params() {
            let e = &mut self.entries[key];
            match &mut e.grad {
                Some(acc) => acc.add_assign(g),
                slot => *slot = Some(g.clone()),
            }
        }
    }

    /// Global Euclidean norm over all present gradients.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .filter_map(|e| e.grad.as_ref())
            .map(|g| g.sq_norm().to_f64().unwrap_or(f64::NAN))
            .sum::<f64>()
            .sqrt()
    }

    /// Copies every value whose name (after `from_prefix` / `to_prefix`)
    /// appears in both stores.
    pub fn copy_matching(&mut self, src: &ParamStore<T>, src_prefix: &str, dst_prefix: &str) -> usize {
        let mut copied = 0;
        for e in &mut self.entries {
            let Some(rest) = e.name.strip_prefix(dst_prefix) else { continue };
            if let Some(s) = src.find(&format!("{src_prefix}{rest}")) {
                e.value = src.get(s).clone();
                copied += 1;
            }
        }
        copied
    }

    /// Replaces values from `(name, tensor)` pairs, checking shapes.
    pub fn load_named(&mut self, tensors: &[(String, Tensor<T>)]) -> Result<usize> {
        let mut loaded = 0;
        for (name, t) in tensors {
            if let Some(id) = self.find(name) {
                if self.get(id).shape() != t.shape() {
                    return Err(Error::shape(
                        "load",
                        format!("{name}: stored {:?} vs model {:?}", t.shape(), self.get(id).shape()),
                    ));
                }
                *self.get_mut(id) = t.clone();
                loaded += 1;
            }
        }
        Ok(loaded)
    }
}

/// Whether batch norms use batch statistics or running averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnPhase {
    Train,
    Eval,
}

/// Everything a forward pass needs: the tape it records on, the parameters
/// it reads, and whether those parameters are differentiated.
pub struct Ctx<'a, T> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a mut ParamStore<T>,
    pub phase: BnPhase,
    trainable: bool,
    bound: HashMap<ParamId, Var>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    /// Parameters become gradient-tracked leaves.
    pub fn trainable(tape: &'a mut Tape<T>, store: &'a mut ParamStore<T>, phase: BnPhase) -> Self {
        Self {
            tape,
            store,
            phase,
            trainable: true,
            bound: HashMap::new(),
        }
    }

    /// Parameters enter the tape as constants.
    pub fn frozen(tape: &'a mut Tape<T>, store: &'a mut ParamStore<T>, phase: BnPhase) -> Self {
        Self {
            tape,
            store,
            phase,
            trainable: false,
            bound: HashMap::new(),
        }
    }

    pub fn bind(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let e = self.store.entry(id);
        let v = if self.trainable && e.kind.trainable() {
            self.tape.param(e.value.clone(), id.0)
        } else {
            self.tape.constant(e.value.clone())
        };
        self.bound.insert(id, v);
        v
    }
}

/// Affine batch norm with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

impl BatchNorm {
    pub fn build<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::ones(&[channels]), ParamKind::NormOrBias),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[channels]), ParamKind::NormOrBias),
            running_mean: store.add(format!("{prefix}.running_mean"), Tensor::zeros(&[channels]), ParamKind::Buffer),
            running_var: store.add(format!("{prefix}.running_var"), Tensor::ones(&[channels]), ParamKind::Buffer),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let gamma = ctx.bind(self.gamma);
        let beta = ctx.bind(self.beta);
        match ctx.phase {
            BnPhase::Train => {
                let (y, stats) = ctx.tape.batch_norm(x, gamma, beta, BnMode::Train)?;
                let stats = stats.expect("train mode yields stats");
                let mom = T::lit(BN_MOMENTUM);
                // running variance tracks the unbiased estimate
                let unbias = if stats.count > 1 {
                    T::lit(stats.count as f64 / (stats.count - 1) as f64)
                } else {
                    T::one()
                };
                let rm = ctx.store.get_mut(self.running_mean).data_mut();
                for (r, &m) in rm.iter_mut().zip(&stats.mean) {
                    *r = (T::one() - mom) * *r + mom * m;
                }
                let rv = ctx.store.get_mut(self.running_var).data_mut();
                for (r, &v) in rv.iter_mut().zip(&stats.var) {
                    *r = (T::one() - mom) * *r + mom * v * unbias;
                }
                Ok(y)
            }
            BnPhase::Eval => {
                let mean = ctx.store.get(self.running_mean).data().to_vec();
                let var = ctx.store.get(self.running_var).data().to_vec();
                let (y, _) = ctx.tape.batch_norm(x, gamma, beta, BnMode::Infer { mean: &mean, var: &var })?;
                Ok(y)
            }
        }
    }
}

/// He-normal initialised tensor for a layer with `fan_in` inputs.
pub(crate) fn he_normal<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| T::lit(normal.sample(rng)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_lookup_and_grad_accumulation() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a.w", Tensor::ones(&[2]), ParamKind::Weight);
        let b = store.add("a.running_mean", Tensor::zeros(&[2]), ParamKind::Buffer);
        assert_eq!(store.find("a.w"), Some(a));
        assert_eq!(store.num_trainable(), 2);

        let mut tape = Tape::new();
        let mut ctx = Ctx::trainable(&mut tape, &mut store, BnPhase::Train);
        let va = ctx.bind(a);
        let vb = ctx.bind(b);
        assert_eq!(ctx.bind(a), va);
        assert!(!tape.requires_grad(vb));
        let s = tape.sum(va);
        let g = tape.backward(s).unwrap();
        store.accumulate(&g);
        store.accumulate(&g);
        assert_eq!(store.entry(a).grad.as_ref().unwrap().data(), &[2.0, 2.0]);
        assert!((store.grad_norm() - 8f64.sqrt()).abs() < 1e-12);
        store.zero_grad();
        assert_eq!(store.grad_norm(), 0.0);
    }
}
