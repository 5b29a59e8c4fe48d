use std::collections::{BTreeSet, HashMap};

use super::layer::{Layer, BN_EPS, BN_MOMENTUM};
use super::store::{ParamKind, ParamStore};
use crate::autodiff::{Graph, NormMode, Var};
use crate::error::Result;
use crate::tensor::{Float, ParamId, Tensor};

/// One forward/backward pass over a [`ParamStore`].
///
/// Each parameter enters the tape once as a leaf, however many networks use it.
/// Parameters outside `trainable` enter as constants. In training mode with
/// `update_stats` set, batch-norm layers fold their batch statistics into the
/// stored running estimates.
pub struct Session<'a, T: Float = f32> {
    pub graph: Graph<T>,
    store: &'a mut ParamStore<T>,
    pub mode: NormMode,
    pub update_stats: bool,
    trainable: Option<BTreeSet<ParamId>>,
    frozen_buffers: BTreeSet<ParamId>,
    leaves: HashMap<ParamId, Var>,
}

impl<'a, T: Float> Session<'a, T> {
    /// Training mode: every trainable parameter collects a gradient.
    pub fn train(store: &'a mut ParamStore<T>) -> Self {
        Self {
            graph: Graph::new(),
            store,
            mode: NormMode::Train,
            update_stats: true,
            trainable: None,
            frozen_buffers: BTreeSet::new(),
            leaves: HashMap::new(),
        }
    }

    /// Evaluation mode: running statistics, no gradients.
    pub fn eval(store: &'a mut ParamStore<T>) -> Self {
        Self {
            mode: NormMode::Eval,
            update_stats: false,
            trainable: Some(BTreeSet::new()),
            ..Self::train(store)
        }
    }

    /// Restricts gradient collection to `ids`.
    pub fn with_trainable(mut self, ids: BTreeSet<ParamId>) -> Self {
        self.trainable = Some(ids);
        self
    }

    pub fn with_stat_updates(mut self, on: bool) -> Self {
        self.update_stats = on;
        self
    }

    /// Running statistics in `ids` are left untouched by training-mode passes.
    pub fn with_frozen_buffers(mut self, ids: BTreeSet<ParamId>) -> Self {
        self.frozen_buffers = ids;
        self
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    fn is_trainable(&self, id: ParamId) -> bool {
        self.store.kind(id) == Some(ParamKind::Trainable)
            && self.trainable.as_ref().is_none_or(|s| s.contains(&id))
    }

    /// Tape leaf for a slot.
    pub fn param(&mut self, slot: &str) -> Result<Var> {
        let id = self.store.resolve(slot)?;
        if let Some(&v) = self.leaves.get(&id) {
            return Ok(v);
        }
        let tensor = self.store.get(id)?.clone();
        let trainable = self.is_trainable(id);
        let v = self.graph.param(id, tensor, trainable);
        self.leaves.insert(id, v);
        Ok(v)
    }

    pub fn input(&mut self, x: Tensor<T>) -> Var {
        self.graph.constant(x)
    }

    pub(crate) fn batch_norm(&mut self, layer: &Layer, x: Var) -> Result<Var> {
        let gamma = self.param(&layer.slot("gamma"))?;
        let beta = self.param(&layer.slot("beta"))?;
        match self.mode {
            NormMode::Eval => {
                let rm = self.param(&layer.slot("running_mean"))?;
                let rv = self.param(&layer.slot("running_var"))?;
                self.graph.batch_norm2d_eval(x, gamma, beta, rm, rv, BN_EPS)
            }
            NormMode::Train => {
                let (y, stats) = self.graph.batch_norm2d_train(x, gamma, beta, BN_EPS)?;
                if self.update_stats {
                    let m = T::of(BN_MOMENTUM);
                    let keep = T::one() - m;
                    let n = stats.count.max(2);
                    let unbias = T::of(n as f64 / (n - 1) as f64);
                    let id = self.store.resolve(&layer.slot("running_mean"))?;
                    if self.frozen_buffers.contains(&id) {
                        return Ok(y);
                    }
                    let rm = self.store.get_mut(id)?.data_mut();
                    for (r, &b) in rm.iter_mut().zip(&stats.mean) {
                        *r = keep * *r + m * b;
                    }
                    let id = self.store.resolve(&layer.slot("running_var"))?;
                    let rv = self.store.get_mut(id)?.data_mut();
                    for (r, &b) in rv.iter_mut().zip(&stats.var) {
                        *r = keep * *r + m * b * unbias;
                    }
                }
                Ok(y)
            }
        }
    }
}
