//! Binary checkpoints: parameters, optimizer moments and the run state.
//!
//! Layout (little-endian): `b"I2IA"`, `u32` version, `u32` tensor count, then
//! per tensor `u16` name length, UTF-8 name, `u8` rank, `u32` dims, `f32`
//! payload; then a `u32` length and a JSON document with everything else.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{RoutingRules, StagePlan, TermValues};
use crate::models::{ModelBundle, Networks};
use crate::nn::{ParamKind, ParamStore};
use crate::tensor::Tensor;
use crate::trainer::{AdamMoments, TrainConfig, TrainState, Trainer};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"I2IA";
pub const CHECKPOINT_VERSION: u32 = 1;

const MOMENT_M: &str = "adam.m/";
const MOMENT_V: &str = "adam.v/";

/// Hex SHA-256 of the resolved configuration text.
pub fn config_hash(config: &str) -> String {
    Sha256::digest(config.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// A complete, resumable snapshot of a run.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub bundle: ModelBundle<f32>,
    pub train: TrainConfig,
    pub plan: StagePlan,
    pub state: TrainState,
    /// Resolved experiment configuration the run was started from.
    pub config: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    kinds: BTreeMap<String, ParamKind>,
    /// Slot -> name of the tensor it resolves to.
    slots: BTreeMap<String, String>,
    tie_groups: Vec<Vec<String>>,
    networks: Networks,
    plan: StagePlan,
    train: TrainConfig,
    routing: RoutingRules,
    state: StateMeta,
    config_hash: String,
    config: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateMeta {
    step: u64,
    stage: usize,
    stage_step: u64,
    stage_entered: bool,
    /// Adam timestep per parameter name.
    adam_steps: BTreeMap<String, u64>,
    frozen: BTreeSet<String>,
    history: Vec<TermValues>,
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer, config: &str) -> Self {
        Self {
            bundle: trainer.bundle.clone(),
            train: trainer.cfg.clone(),
            plan: trainer.plan.clone(),
            state: trainer.state.clone(),
            config: config.to_string(),
        }
    }

    pub fn into_trainer(self) -> Trainer {
        Trainer {
            bundle: self.bundle,
            cfg: self.train,
            plan: self.plan,
            state: self.state,
        }
    }

    pub fn config_hash(&self) -> String {
        config_hash(&self.config)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let store = &self.bundle.store;
        let name = |id| {
            store
                .name(id)
                .map(str::to_string)
                .ok_or_else(|| Error::Checkpoint(format!("parameter {id:?} has no name")))
        };
        let mut tensors: BTreeMap<String, &Tensor<f32>> = BTreeMap::new();
        let mut kinds = BTreeMap::new();
        for id in store.ids() {
            let n = name(id)?;
            kinds.insert(n.clone(), store.kind(id).expect("listed id"));
            tensors.insert(n, store.get(id)?);
        }
        let mut adam_steps = BTreeMap::new();
        for (&id, m) in &self.state.moments {
            let n = name(id)?;
            tensors.insert(format!("{MOMENT_M}{n}"), &m.m);
            tensors.insert(format!("{MOMENT_V}{n}"), &m.v);
            adam_steps.insert(n, m.t);
        }
        let slots = store
            .slots()
            .iter()
            .map(|(slot, &id)| Ok((slot.clone(), name(id)?)))
            .collect::<Result<_>>()?;
        let meta = Meta {
            kinds,
            slots,
            tie_groups: store
                .groups()
                .values()
                .map(|g| g.iter().cloned().collect())
                .collect(),
            networks: self.bundle.nets.clone(),
            plan: self.plan.clone(),
            train: self.train.clone(),
            routing: self.train.routing,
            state: StateMeta {
                step: self.state.step,
                stage: self.state.stage,
                stage_step: self.state.stage_step,
                stage_entered: self.state.stage_entered,
                adam_steps,
                frozen: self
                    .state
                    .frozen
                    .iter()
                    .map(|&id| name(id))
                    .collect::<Result<_>>()?,
                history: self.state.history.iter().copied().collect(),
            },
            config_hash: self.config_hash(),
            config: self.config.clone(),
        };

        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend(CHECKPOINT_VERSION.to_le_bytes());
        out.extend((tensors.len() as u32).to_le_bytes());
        for (n, t) in &tensors {
            let len = u16::try_from(n.len())
                .map_err(|_| Error::Checkpoint(format!("name too long: {n}")))?;
            out.extend(len.to_le_bytes());
            out.extend(n.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend((d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        let json = serde_json::to_vec(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        out.extend((json.len() as u32).to_le_bytes());
        out.extend(json);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().expect("two bytes")) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
                .collect();
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        let len = r.u32()? as usize;
        let meta: Meta =
            serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        if meta.config_hash != config_hash(&meta.config) {
            return Err(Error::Checkpoint(
                "config hash does not match the stored config".into(),
            ));
        }

        let mut params = Vec::new();
        for (name, kind) in &meta.kinds {
            let t = tensors
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            params.push((name.clone(), *kind, t));
        }
        let store = ParamStore::from_parts(params, &meta.slots, &meta.tie_groups)?;
        let id_of = |name: &str| {
            store
                .resolve(name)
                .map_err(|_| Error::Checkpoint(format!("unknown parameter `{name}`")))
        };
        let mut moments = BTreeMap::new();
        for (name, &t) in &meta.state.adam_steps {
            let mut part = |prefix: &str| {
                tensors
                    .remove(&format!("{prefix}{name}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing moments of `{name}`")))
            };
            let (m, v) = (part(MOMENT_M)?, part(MOMENT_V)?);
            moments.insert(id_of(name)?, AdamMoments { m, v, t });
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        let frozen = meta
            .state
            .frozen
            .iter()
            .map(|n| id_of(n))
            .collect::<Result<_>>()?;
        let state = TrainState {
            step: meta.state.step,
            stage: meta.state.stage,
            stage_step: meta.state.stage_step,
            stage_entered: meta.state.stage_entered,
            moments,
            frozen,
            history: VecDeque::from(meta.state.history),
        };
        Ok(Self {
            bundle: ModelBundle {
                nets: meta.networks,
                store,
            },
            train: TrainConfig {
                routing: meta.routing,
                ..meta.train
            },
            plan: meta.plan,
            state,
            config: meta.config,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("four bytes"),
        ))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_domain_pair, SyntheticSpec};
    use crate::losses::preset;
    use crate::models::{ArchSpec, CriticNorm, SharingPlan};
    use crate::trainer::NoHooks;

    fn trained(steps: u64) -> Trainer {
        let (s, t) = synth_domain_pair(&SyntheticSpec::gaussian(4, 128, 128, 30.0, 2)).unwrap();
        let bundle =
            ModelBundle::build(ArchSpec::dense(2, 4, 16, 8), SharingPlan::default(), 5).unwrap();
        let cfg = TrainConfig {
            total_steps: 10,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let mut tr = Trainer::new(bundle, cfg, preset("adda").unwrap()).unwrap();
        tr.run_until(&s, t.unlabeled(), Some(steps), &mut NoHooks)
            .unwrap();
        tr
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let tr = trained(7);
        let a = Checkpoint::from_trainer(&tr, "seed = 1\n")
            .to_bytes()
            .unwrap();
        let back = Checkpoint::from_bytes(&a).unwrap();
        assert_eq!(back.to_bytes().unwrap(), a);
        assert_eq!(back.state.step, 7);
        for id in tr.bundle.store.ids() {
            let n = tr.bundle.store.name(id).unwrap();
            let got = back.bundle.store.slot(n).unwrap();
            let want = tr.bundle.store.get(id).unwrap();
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(got), bits(want));
        }
    }

    #[test]
    fn tied_tensors_stored_once() {
        let b = ModelBundle::<f32>::build(
            ArchSpec::compact(10, CriticNorm::None),
            SharingPlan::default(),
            1,
        )
        .unwrap();
        let tr = Trainer::new(b, TrainConfig::default(), preset("i2i_full").unwrap()).unwrap();
        let ck = Checkpoint::from_trainer(&tr, "");
        let bytes = ck.to_bytes().unwrap();
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(count, tr.bundle.store.len());
        assert!(count < tr.bundle.store.slots().len());
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(
            back.bundle.store.groups().len(),
            tr.bundle.store.groups().len()
        );
        for slot in tr.bundle.store.slots().keys() {
            let (a, b) = (
                tr.bundle.store.group_of(slot).is_some(),
                back.bundle.store.group_of(slot).is_some(),
            );
            assert_eq!(a, b, "{slot}");
        }
        let enc = back
            .bundle
            .nets
            .net(crate::models::Role::TargetEncoder)
            .slots();
        let src = back
            .bundle
            .nets
            .net(crate::models::Role::SourceEncoder)
            .slots();
        assert_eq!(
            back.bundle.store.resolve(&enc[0]).unwrap(),
            back.bundle.store.resolve(&src[0]).unwrap()
        );
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let tr = trained(2);
        let good = Checkpoint::from_trainer(&tr, "").to_bytes().unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad)
            .unwrap_err()
            .to_string()
            .contains("magic"));
        let mut bad = good.clone();
        bad[4] = 9;
        let err = Checkpoint::from_bytes(&bad).unwrap_err();
        assert!(matches!(err, Error::CheckpointVersion { found: 9, .. }));
        assert_eq!(err.exit_code(), 2);
        assert!(Checkpoint::from_bytes(&good[..good.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(&good[..40]).is_err());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (s, t) = synth_domain_pair(&SyntheticSpec::gaussian(4, 128, 128, 30.0, 2)).unwrap();
        let full = trained(10);
        // Stop inside the first stage so the untie/freeze actions run after restore.
        let half = trained(4);
        let bytes = Checkpoint::from_trainer(&half, "").to_bytes().unwrap();
        let mut resumed = Checkpoint::from_bytes(&bytes).unwrap().into_trainer();
        resumed.run(&s, t.unlabeled(), &mut NoHooks).unwrap();
        let trace = |tr: &Trainer| {
            tr.state
                .history
                .iter()
                .map(|v| v.total.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(trace(&full), trace(&resumed));
        let a = Checkpoint::from_trainer(&full, "").to_bytes().unwrap();
        let b = Checkpoint::from_trainer(&resumed, "").to_bytes().unwrap();
        assert_eq!(a, b);
    }
}
