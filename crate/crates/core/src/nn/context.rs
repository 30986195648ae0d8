use std::cell::{RefCell, RefMut};

use super::params::{ParamId, ParamKind, ParamStore};
use crate::autodiff::{Element, Gradients, Tape, Tensor, Var};
use crate::error::{config_err, Result};
use crate::rng::{rng_from_seed, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, batch norm uses batch statistics.
    Train,
    /// Deterministic inference.
    Eval,
}

/// State for one forward pass: the tape, read-only parameters, and the
/// per-pass randomness and buffer updates.
///
/// Parameters are bound to tape leaves on first use. Frozen groups and eval
/// mode bind them as constants so no gradient is computed for them.
pub struct Ctx<'t, F: Element> {
    pub tape: &'t Tape<F>,
    pub store: &'t ParamStore<F>,
    pub mode: Mode,
    rng: RefCell<Rng>,
    trainable_groups: Option<Vec<bool>>,
    bound: RefCell<Vec<Option<Var<'t, F>>>>,
    buffer_updates: RefCell<Vec<(ParamId, Tensor<F>)>>,
}

impl<'t, F: Element> Ctx<'t, F> {
    pub fn new(tape: &'t Tape<F>, store: &'t ParamStore<F>, mode: Mode, seed: u64) -> Self {
        Ctx {
            tape,
            store,
            mode,
            rng: RefCell::new(rng_from_seed(seed)),
            trainable_groups: None,
            bound: RefCell::new(vec![None; store.len()]),
            buffer_updates: RefCell::new(Vec::new()),
        }
    }

    /// Restricts gradient tracking to the groups flagged `true`.
    pub fn with_trainable_groups(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.store.num_groups() {
            return Err(config_err!("freeze mask has {} entries for {} groups", mask.len(), self.store.num_groups()));
        }
        self.trainable_groups = Some(mask);
        Ok(self)
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn rng(&self) -> RefMut<'_, Rng> {
        self.rng.borrow_mut()
    }

    fn tracks(&self, id: ParamId) -> bool {
        let p = self.store.param(id);
        p.kind == ParamKind::Trainable
            && self.trainable_groups.as_ref().is_none_or(|m| m[p.group])
    }

    /// The tape variable for parameter `id`.
    pub fn param(&self, id: ParamId) -> Var<'t, F> {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let value = self.store.value(id).clone();
        let v = if self.tracks(id) {
            self.tape.leaf(value, true)
        } else {
            self.tape.constant(value)
        };
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    pub fn input(&self, x: Tensor<F>) -> Var<'t, F> {
        self.tape.constant(x)
    }

    pub(crate) fn push_buffer_update(&self, id: ParamId, value: Tensor<F>) {
        self.buffer_updates.borrow_mut().push((id, value));
    }

    /// Buffer values computed during this pass (running statistics).
    pub fn take_buffer_updates(&self) -> Vec<(ParamId, Tensor<F>)> {
        std::mem::take(&mut self.buffer_updates.borrow_mut())
    }

    /// Gradients of all bound, tracked parameters, in parameter order.
    pub fn param_grads(&self, grads: &Gradients<F>) -> Vec<(ParamId, Tensor<F>)> {
        self.bound
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                v.requires_grad().then(|| (ParamId(i), grads.wrt(v)))
            })
            .collect()
    }
}
