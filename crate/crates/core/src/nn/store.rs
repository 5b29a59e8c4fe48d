use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, ParamId, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Updated by forward passes (batch-norm running statistics).
    Buffer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TieGroupId(pub usize);

#[derive(Debug, Clone)]
struct Entry<T: Float> {
    name: String,
    kind: ParamKind,
    tensor: Tensor<T>,
}

/// Named parameter slots resolving to shared tensors.
///
/// A slot is the place a layer looks its weight up under (`enc_src.0.weight`). Tied
/// slots resolve to one [`ParamId`], so an update through either is visible to
/// both and their gradients arrive summed.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Float = f32> {
    entries: BTreeMap<ParamId, Entry<T>>,
    slots: BTreeMap<String, ParamId>,
    groups: BTreeMap<TieGroupId, BTreeSet<String>>,
    next_id: usize,
    next_group: usize,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            entries: BTreeMap::new(),
            slots: BTreeMap::new(),
            groups: BTreeMap::new(),
            next_id: 0,
            next_group: 0,
        }
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, slot: &str, tensor: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        if self.slots.contains_key(slot) {
            return Err(Error::Param(format!("slot `{slot}` already registered")));
        }
        let id = ParamId(self.next_id);
        self.next_id += 1;
        self.entries.insert(
            id,
            Entry {
                name: slot.to_string(),
                kind,
                tensor,
            },
        );
        self.slots.insert(slot.to_string(), id);
        Ok(id)
    }

    pub fn resolve(&self, slot: &str) -> Result<ParamId> {
        self.slots
            .get(slot)
            .copied()
            .ok_or_else(|| Error::Param(format!("unknown slot `{slot}`")))
    }

    pub fn get(&self, id: ParamId) -> Result<&Tensor<T>> {
        self.entries
            .get(&id)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::Param(format!("unknown parameter {}", id.0)))
    }

    pub fn slot(&self, slot: &str) -> Result<&Tensor<T>> {
        self.get(self.resolve(slot)?)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(&id)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| Error::Param(format!("unknown parameter {}", id.0)))
    }

    pub fn set(&mut self, id: ParamId, tensor: Tensor<T>) -> Result<()> {
        let slot = self.get_mut(id)?;
        if slot.shape() != tensor.shape() {
            return Err(Error::shape(
                "param_set",
                format!("{:?} vs {:?}", slot.shape(), tensor.shape()),
            ));
        }
        *slot = tensor;
        Ok(())
    }

    pub fn kind(&self, id: ParamId) -> Option<ParamKind> {
        self.entries.get(&id).map(|e| e.kind)
    }

    /// Canonical name of a parameter: the slot that created it.
    pub fn name(&self, id: ParamId) -> Option<&str> {
        self.entries.get(&id).map(|e| e.name.as_str())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.entries.keys().copied()
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.entries
            .iter()
            .filter(|(_, e)| e.kind == ParamKind::Trainable)
            .map(|(&id, _)| id)
    }

    pub fn slots(&self) -> &BTreeMap<String, ParamId> {
        &self.slots
    }

    /// Slots whose name starts with `prefix`.
    pub fn slots_with_prefix<'a>(
        &'a self,
        prefix: &'a str,
    ) -> impl Iterator<Item = (&'a str, ParamId)> + 'a {
        self.slots
            .range(prefix.to_string()..)
            .take_while(move |(k, _)| k.starts_with(prefix))
            .map(|(k, &v)| (k.as_str(), v))
    }

    /// Number of distinct tensors (tied slots count once).
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total trainable scalar count over distinct tensors.
    pub fn trainable_numel(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn groups(&self) -> &BTreeMap<TieGroupId, BTreeSet<String>> {
        &self.groups
    }

    /// Binds slot `b` to slot `a`'s tensor. `b`'s previous tensor is dropped.
    pub fn tie(&mut self, a: &str, b: &str) -> Result<TieGroupId> {
        let ida = self.resolve(a)?;
        let idb = self.resolve(b)?;
        let (sa, sb) = (
            self.get(ida)?.shape().to_vec(),
            self.get(idb)?.shape().to_vec(),
        );
        if sa != sb {
            return Err(Error::shape(
                "tie_parameters",
                format!("`{a}` {sa:?} vs `{b}` {sb:?}"),
            ));
        }
        if ida != idb {
            for id in self.slots.values_mut() {
                if *id == idb {
                    *id = ida;
                }
            }
            self.entries.remove(&idb);
        }
        let existing: Vec<TieGroupId> = self
            .groups
            .iter()
            .filter(|(_, s)| s.contains(a) || s.contains(b))
            .map(|(&g, _)| g)
            .collect();
        let mut members: BTreeSet<String> = [a.to_string(), b.to_string()].into();
        for g in &existing {
            members.extend(self.groups.remove(g).unwrap_or_default());
        }
        let group = existing.first().copied().unwrap_or_else(|| {
            let g = TieGroupId(self.next_group);
            self.next_group += 1;
            g
        });
        self.groups.insert(group, members);
        Ok(group)
    }

    /// Gives every member after the first (in slot order) its own copy of the
    /// shared tensor. Returns the resulting ids, one per member.
    pub fn untie(&mut self, group: TieGroupId) -> Result<Vec<ParamId>> {
        let members = self
            .groups
            .remove(&group)
            .ok_or_else(|| Error::Param(format!("unknown tie group {}", group.0)))?;
        let mut ids = Vec::with_capacity(members.len());
        for (i, slot) in members.iter().enumerate() {
            let shared = self.resolve(slot)?;
            if i == 0 {
                self.entries.get_mut(&shared).expect("resolved").name = slot.clone();
                ids.push(shared);
                continue;
            }
            let entry = self.entries[&shared].clone();
            let id = ParamId(self.next_id);
            self.next_id += 1;
            self.entries.insert(
                id,
                Entry {
                    name: slot.clone(),
                    ..entry
                },
            );
            self.slots.insert(slot.clone(), id);
            ids.push(id);
        }
        Ok(ids)
    }

    /// Tie group containing `slot`, if any.
    pub fn group_of(&self, slot: &str) -> Option<TieGroupId> {
        self.groups
            .iter()
            .find(|(_, members)| members.contains(slot))
            .map(|(&g, _)| g)
    }

    /// Restores a store from its serialized parts (see the checkpoint module).
    pub(crate) fn from_parts(
        tensors: Vec<(String, ParamKind, Tensor<T>)>,
        slots: &BTreeMap<String, String>,
        groups: &[Vec<String>],
    ) -> Result<Self> {
        let mut store = Self::new();
        let mut by_name = BTreeMap::new();
        for (name, kind, tensor) in tensors {
            let id = store.register(&name, tensor, kind)?;
            by_name.insert(name, id);
        }
        for (slot, canonical) in slots {
            let id = *by_name.get(canonical).ok_or_else(|| {
                Error::Checkpoint(format!(
                    "slot `{slot}` refers to missing tensor `{canonical}`"
                ))
            })?;
            store.slots.insert(slot.clone(), id);
        }
        for members in groups {
            let g = TieGroupId(store.next_group);
            store.next_group += 1;
            store.groups.insert(g, members.iter().cloned().collect());
        }
        Ok(store)
    }
}
