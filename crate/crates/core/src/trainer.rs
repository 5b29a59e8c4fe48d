//! Alternating critic/generator optimisation with Adam, staged plans and
//! exact resumability.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, UnlabeledView};
use crate::error::{Error, Result};
use crate::losses::{LambdaConfig, LossGraph, RoutingRules, StageAction, StagePlan, TermValues};
use crate::models::{ModelBundle, Role};
use crate::nn::Session;
use crate::tensor::{Float, ParamId, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    /// Critic updates per generator update.
    pub n_critic: usize,
    pub seed: u64,
    /// Per-network learning rates overriding `learning_rate`.
    pub learning_rates: BTreeMap<Role, f64>,
    /// Optional global gradient-norm clip per phase.
    pub grad_clip: Option<f64>,
    /// Configured in the loss block; stored separately in checkpoints.
    #[serde(skip)]
    pub routing: RoutingRules,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 64,
            total_steps: 2000,
            n_critic: 1,
            seed: 0,
            learning_rates: BTreeMap::new(),
            grad_clip: None,
            routing: RoutingRules::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("trainer.{field}"), msg))
            }
        };
        check(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            "learning_rate",
            "must be > 0",
        )?;
        check(
            (0.0..1.0).contains(&self.adam_beta1),
            "adam_beta1",
            "must lie in [0, 1)",
        )?;
        check(
            (0.0..1.0).contains(&self.adam_beta2),
            "adam_beta2",
            "must lie in [0, 1)",
        )?;
        check(self.adam_eps > 0.0, "adam_eps", "must be > 0")?;
        check(self.batch_size > 0, "batch_size", "must be > 0")?;
        check(self.n_critic >= 1, "n_critic", "must be >= 1")?;
        for (role, lr) in &self.learning_rates {
            check(
                *lr >= 0.0 && lr.is_finite(),
                &format!("learning_rates.{}", role.prefix()),
                "must be >= 0",
            )?;
        }
        if let Some(c) = self.grad_clip {
            check(c > 0.0, "grad_clip", "must be > 0")?;
        }
        Ok(())
    }
}

/// First and second moment estimates of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments<T: Float = f32> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub t: u64,
}

impl<T: Float> AdamMoments<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape.to_vec()),
            v: Tensor::zeros(shape.to_vec()),
            t: 0,
        }
    }
}

/// One bias-corrected Adam step.
pub fn adam_update<T: Float>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut AdamMoments<T>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.m.shape() {
        return Err(Error::shape(
            "adam_update",
            format!(
                "param {:?}, grad {:?}, moments {:?}",
                param.shape(),
                grad.shape(),
                state.m.shape()
            ),
        ));
    }
    state.t += 1;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    let (b1, b2) = (T::of(beta1), T::of(beta2));
    let (g1, g2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
    let step = T::of(lr / c1);
    let c2 = T::of(c2);
    let eps = T::of(eps);
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    let p = param.data_mut();
    for i in 0..p.len() {
        let g = grad.data()[i];
        m[i] = b1 * m[i] + g1 * g;
        v[i] = b2 * v[i] + g2 * g * g;
        p[i] -= step * m[i] / ((v[i] / c2).sqrt() + eps);
    }
    Ok(())
}

/// Everything beyond the parameters needed to continue a run exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    /// Completed generator steps.
    pub step: u64,
    pub stage: usize,
    pub stage_step: u64,
    /// Whether the current stage's actions have been applied.
    pub stage_entered: bool,
    pub moments: BTreeMap<ParamId, AdamMoments<f32>>,
    pub frozen: BTreeSet<ParamId>,
    pub history: VecDeque<TermValues>,
}

pub const HISTORY_LEN: usize = 256;

impl TrainState {
    pub fn new() -> Self {
        Self {
            step: 0,
            stage: 0,
            stage_step: 0,
            stage_entered: false,
            moments: BTreeMap::new(),
            frozen: BTreeSet::new(),
            history: VecDeque::new(),
        }
    }
}

impl Default for TrainState {
    fn default() -> Self {
        Self::new()
    }
}

/// SplitMix64 finaliser: decorrelates seeds derived from `(seed, tag)`.
pub fn mix_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const SOURCE_STREAM: u64 = 1;
const TARGET_STREAM: u64 = 2;
const PENALTY_STREAM: u64 = 3;

/// Observers of a training run.
pub trait Hooks {
    fn on_step(&mut self, _trainer: &Trainer, _values: &TermValues) -> Result<()> {
        Ok(())
    }
    fn on_stage_end(&mut self, _trainer: &Trainer, _stage: usize) -> Result<()> {
        Ok(())
    }
}

/// Hooks that do nothing.
pub struct NoHooks;
impl Hooks for NoHooks {}

pub struct Trainer {
    pub bundle: ModelBundle<f32>,
    pub cfg: TrainConfig,
    pub plan: StagePlan,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(bundle: ModelBundle<f32>, cfg: TrainConfig, plan: StagePlan) -> Result<Self> {
        cfg.validate()?;
        plan.validate(bundle.nets.sharing.tie_encoders)?;
        Ok(Self {
            bundle,
            cfg,
            plan,
            state: TrainState::new(),
        })
    }

    pub fn lambdas(&self) -> &LambdaConfig {
        &self.plan.stages[self.state.stage.min(self.plan.stages.len() - 1)].lambdas
    }

    /// Excludes `ids` from optimizer updates. Gradients are still computed.
    pub fn freeze(&mut self, ids: &[ParamId]) -> Result<()> {
        for &id in ids {
            self.bundle.store.get(id)?;
            self.state.frozen.insert(id);
        }
        Ok(())
    }

    pub fn unfreeze(&mut self, ids: &[ParamId]) -> Result<()> {
        for &id in ids {
            self.bundle.store.get(id)?;
            self.state.frozen.remove(&id);
        }
        Ok(())
    }

    fn role_ids(&self, roles: &[Role]) -> Result<Vec<ParamId>> {
        let (nets, store) = (&self.bundle.nets, &self.bundle.store);
        let mut ids: Vec<ParamId> = nets.param_ids(store, roles)?.into_iter().collect();
        ids.extend(nets.buffer_ids(store, roles)?);
        Ok(ids)
    }

    fn apply_action(&mut self, action: &StageAction) -> Result<()> {
        match action {
            StageAction::UntieEncoders => self.bundle.untie_encoders(),
            StageAction::Freeze(roles) => {
                let ids = self.role_ids(roles)?;
                self.freeze(&ids)
            }
            StageAction::Unfreeze(roles) => {
                let ids = self.role_ids(roles)?;
                self.unfreeze(&ids)
            }
        }
    }

    fn learning_rate(&self, id: ParamId) -> Result<f64> {
        for (role, lr) in &self.cfg.learning_rates {
            if self.bundle.param_ids(&[*role])?.contains(&id) {
                return Ok(*lr);
            }
        }
        Ok(self.cfg.learning_rate)
    }

    fn optimizer_step(
        &mut self,
        grads: BTreeMap<ParamId, Tensor<f32>>,
        allowed: &BTreeSet<ParamId>,
    ) -> Result<()> {
        let scale = match self.cfg.grad_clip {
            Some(clip) => {
                let norm = grads
                    .values()
                    .flat_map(|g| g.data().iter())
                    .map(|&v| (v as f64) * (v as f64))
                    .sum::<f64>()
                    .sqrt();
                (norm > clip).then(|| clip / norm)
            }
            None => None,
        };
        for (id, mut grad) in grads {
            if !allowed.contains(&id) || self.state.frozen.contains(&id) {
                continue;
            }
            if let Some(s) = scale {
                grad = grad.map(|v| v * s as f32);
            }
            let lr = self.learning_rate(id)?;
            let (b1, b2, eps) = (self.cfg.adam_beta1, self.cfg.adam_beta2, self.cfg.adam_eps);
            let moments = self
                .state
                .moments
                .entry(id)
                .or_insert_with(|| AdamMoments::zeros(grad.shape()));
            let param = self.bundle.store.get_mut(id)?;
            adam_update(param, &grad, moments, lr, b1, b2, eps)?;
            if !param.is_finite() {
                return Err(Error::NonFinite {
                    index: id.0,
                    op: "adam_update",
                    phase: "optimizer",
                });
            }
        }
        Ok(())
    }

    fn check_finite(v: f64, what: &'static str) -> Result<()> {
        if v.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                index: 0,
                op: what,
                phase: "loss",
            })
        }
    }

    /// One critic phase (`n_critic` updates) followed by one generator update.
    pub fn train_step(
        &mut self,
        source: &Dataset,
        target: UnlabeledView<'_>,
    ) -> Result<TermValues> {
        let lambdas = *self.lambdas();
        let cfg = self.cfg.clone();
        let step = self.state.step;
        let critic_ids = self.bundle.param_ids(&Role::CRITICS)?;
        let generator_ids = self.bundle.param_ids(&Role::GENERATORS)?;
        let frozen_buffers: BTreeSet<ParamId> = self.state.frozen.clone();
        let adversarial = lambdas.latent_adversarial > 0.0 || lambdas.translation_adversarial > 0.0;
        let mut critic_values = (0.0, 0.0, 0.0);
        let bs = |n: usize| cfg.batch_size.min(n);

        let mut data_step = step * cfg.n_critic as u64;
        if adversarial {
            for k in 0..cfg.n_critic as u64 {
                data_step = step * cfg.n_critic as u64 + k;
                let xb = source.batch(
                    bs(source.len()),
                    mix_seed(cfg.seed, SOURCE_STREAM),
                    data_step,
                )?;
                let yb = target.batch(
                    bs(target.len()),
                    mix_seed(cfg.seed, TARGET_STREAM),
                    data_step,
                )?;
                let (nets, store) = self.bundle.parts();
                let mut sess = Session::train(store)
                    .with_trainable(critic_ids.clone())
                    .with_stat_updates(false);
                let mut lg = LossGraph::new(
                    nets,
                    &mut sess,
                    xb.images,
                    xb.labels.as_deref(),
                    yb.images,
                    cfg.routing,
                );
                let losses =
                    lg.critics(&lambdas, mix_seed(cfg.seed ^ PENALTY_STREAM, data_step))?;
                critic_values = losses.values(&sess);
                Self::check_finite(
                    critic_values.0 + critic_values.1 + critic_values.2,
                    "critic_loss",
                )?;
                let Some(total) = losses.sum(&mut sess)? else {
                    break;
                };
                if !sess.graph.requires_grad(total) {
                    break;
                }
                let grads = sess.graph.backward(total)?.into_params();
                drop(sess);
                self.optimizer_step(grads, &critic_ids)?;
            }
        }

        let xb = source.batch(
            bs(source.len()),
            mix_seed(cfg.seed, SOURCE_STREAM),
            data_step,
        )?;
        let yb = target.batch(
            bs(target.len()),
            mix_seed(cfg.seed, TARGET_STREAM),
            data_step,
        )?;
        let (nets, store) = self.bundle.parts();
        let mut sess = Session::train(store)
            .with_trainable(generator_ids.clone())
            .with_frozen_buffers(frozen_buffers);
        let mut lg = LossGraph::new(
            nets,
            &mut sess,
            xb.images,
            xb.labels.as_deref(),
            yb.images,
            cfg.routing,
        );
        let (total, mut values) = lg.total(&lambdas)?;
        Self::check_finite(values.total, "total_loss")?;
        let grads = if sess.graph.requires_grad(total) {
            Some(sess.graph.backward(total)?.into_params())
        } else {
            None
        };
        drop(sess);
        if let Some(grads) = grads {
            self.optimizer_step(grads, &generator_ids)?;
        }
        (values.d_x, values.d_y, values.d_z) = critic_values;
        self.state.step += 1;
        self.state.stage_step += 1;
        if self.state.history.len() == HISTORY_LEN {
            self.state.history.pop_front();
        }
        self.state.history.push_back(values);
        Ok(values)
    }

    pub fn finished(&self) -> bool {
        self.state.stage >= self.plan.stages.len()
    }

    /// Runs the plan until `total_steps` or `stop_at` completed steps, whichever
    /// comes first. Stage actions apply on entry; `on_stage_end` fires at each
    /// completed stage boundary.
    pub fn run_until(
        &mut self,
        source: &Dataset,
        target: UnlabeledView<'_>,
        stop_at: Option<u64>,
        hooks: &mut dyn Hooks,
    ) -> Result<()> {
        let split = self.plan.step_split(self.cfg.total_steps);
        while !self.finished() {
            let stage = self.state.stage;
            if self.state.stage_step >= split[stage] as u64 {
                hooks.on_stage_end(self, stage)?;
                self.state.stage += 1;
                self.state.stage_step = 0;
                self.state.stage_entered = false;
                continue;
            }
            if stop_at.is_some_and(|s| self.state.step >= s) {
                return Ok(());
            }
            if !self.state.stage_entered {
                let actions = self.plan.stages[stage].actions.clone();
                for a in &actions {
                    self.apply_action(a)?;
                }
                self.state.stage_entered = true;
            }
            let values = self.train_step(source, target)?;
            hooks.on_step(self, &values)?;
        }
        Ok(())
    }

    pub fn run(
        &mut self,
        source: &Dataset,
        target: UnlabeledView<'_>,
        hooks: &mut dyn Hooks,
    ) -> Result<()> {
        self.run_until(source, target, None, hooks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_domain_pair, SyntheticSpec};
    use crate::losses::preset;
    use crate::models::{ArchSpec, SharingPlan};

    #[test]
    fn zero_gradient_changes_nothing() {
        let mut p = Tensor::<f64>::from_f64(vec![2], &[1.0, -2.0]).unwrap();
        let mut st = AdamMoments::zeros(&[2]);
        adam_update(
            &mut p,
            &Tensor::zeros(vec![2]),
            &mut st,
            0.1,
            0.5,
            0.999,
            1e-8,
        )
        .unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(st.v.data(), &[0.0, 0.0]);
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = Tensor::<f64>::from_f64(vec![1], &[0.0]).unwrap();
        let mut st = AdamMoments::zeros(&[1]);
        adam_update(
            &mut p,
            &Tensor::ones(vec![1]),
            &mut st,
            0.1,
            0.5,
            0.999,
            1e-8,
        )
        .unwrap();
        // m = 0.5, v = 0.001; m_hat = 1, v_hat = 1
        let expect = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p.data()[0] - expect).abs() < 1e-15);
        adam_update(
            &mut p,
            &Tensor::ones(vec![1]),
            &mut st,
            0.1,
            0.5,
            0.999,
            1e-8,
        )
        .unwrap();
        assert!(p.data()[0] < expect);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Tensor::<f32>::zeros(vec![2]);
        let mut st = AdamMoments::zeros(&[2]);
        assert!(adam_update(
            &mut p,
            &Tensor::zeros(vec![3]),
            &mut st,
            0.1,
            0.5,
            0.9,
            1e-8
        )
        .is_err());
    }

    fn planar() -> (Dataset, Dataset) {
        synth_domain_pair(&SyntheticSpec::gaussian(4, 256, 256, 45.0, 1)).unwrap()
    }

    fn trainer(name: &str, steps: usize) -> Trainer {
        let bundle =
            ModelBundle::build(ArchSpec::dense(2, 4, 16, 8), SharingPlan::default(), 3).unwrap();
        let cfg = TrainConfig {
            total_steps: steps,
            batch_size: 32,
            ..TrainConfig::default()
        };
        Trainer::new(bundle, cfg, preset(name).unwrap()).unwrap()
    }

    #[test]
    fn freeze_all_is_a_no_op() {
        let (s, t) = planar();
        let mut tr = trainer("i2i_full", 3);
        let before = tr.bundle.store.clone();
        let ids: Vec<ParamId> = tr.bundle.store.trainable_ids().collect();
        tr.freeze(&ids).unwrap();
        tr.run(&s, t.unlabeled(), &mut NoHooks).unwrap();
        for id in before.trainable_ids() {
            assert_eq!(before.get(id).unwrap(), tr.bundle.store.get(id).unwrap());
        }
        tr.unfreeze(&ids).unwrap();
        tr.cfg.total_steps = 4;
        tr.state.stage = 0;
        tr.run(&s, t.unlabeled(), &mut NoHooks).unwrap();
        let moved = before
            .trainable_ids()
            .any(|id| before.get(id).unwrap() != tr.bundle.store.get(id).unwrap());
        assert!(moved);
        assert!(tr.freeze(&[ParamId(usize::MAX)]).is_err());
    }

    #[test]
    fn adda_freezes_source_encoder() {
        let (s, t) = planar();
        let mut tr = trainer("adda", 20);
        struct Snap(Option<crate::nn::ParamStore<f32>>);
        impl Hooks for Snap {
            fn on_stage_end(&mut self, tr: &Trainer, stage: usize) -> Result<()> {
                if stage == 0 {
                    self.0 = Some(tr.bundle.store.clone());
                }
                Ok(())
            }
        }
        let mut snap = Snap(None);
        tr.run(&s, t.unlabeled(), &mut snap).unwrap();
        let stage1 = snap.0.unwrap();
        let nets = &tr.bundle.nets;
        for slot in nets.net(Role::SourceEncoder).slots() {
            assert_eq!(
                stage1.slot(&slot).unwrap(),
                tr.bundle.store.slot(&slot).unwrap(),
                "{slot}"
            );
        }
        let moved = nets
            .net(Role::TargetEncoder)
            .slots()
            .iter()
            .any(|slot| stage1.slot(slot).unwrap() != tr.bundle.store.slot(slot).unwrap());
        assert!(moved);
    }

    #[test]
    fn zero_lambdas_change_nothing() {
        let (s, t) = planar();
        let bundle =
            ModelBundle::build(ArchSpec::dense(2, 4, 16, 8), SharingPlan::default(), 3).unwrap();
        let cfg = TrainConfig {
            total_steps: 5,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let mut tr = Trainer::new(bundle, cfg, StagePlan::single(LambdaConfig::zero())).unwrap();
        let before = tr.bundle.store.clone();
        tr.run(&s, t.unlabeled(), &mut NoHooks).unwrap();
        for id in before.ids() {
            assert_eq!(before.get(id).unwrap(), tr.bundle.store.get(id).unwrap());
        }
        assert_eq!(tr.state.step, 5);
    }

    #[test]
    fn identical_seeds_identical_traces() {
        let (s, t) = planar();
        let trace = || {
            let mut tr = trainer("i2i_full", 25);
            tr.run(&s, t.unlabeled(), &mut NoHooks).unwrap();
            (
                tr.state
                    .history
                    .iter()
                    .map(|v| v.total.to_bits())
                    .collect::<Vec<_>>(),
                tr.bundle.store,
            )
        };
        let (a, sa) = trace();
        let (b, sb) = trace();
        assert_eq!(a.len(), 25);
        assert_eq!(a, b);
        for id in sa.ids() {
            assert_eq!(sa.get(id).unwrap(), sb.get(id).unwrap());
        }
    }

    #[test]
    fn frozen_subset_and_phase_isolation() {
        let (s, t) = planar();
        let mut tr = trainer("i2i_full", 10);
        let frozen: Vec<ParamId> = tr
            .bundle
            .param_ids(&[Role::SourceDecoder])
            .unwrap()
            .into_iter()
            .collect();
        tr.freeze(&frozen).unwrap();
        let before = tr.bundle.store.clone();
        tr.run(&s, t.unlabeled(), &mut NoHooks).unwrap();
        let moved = |ids: &BTreeSet<ParamId>| {
            ids.iter()
                .filter(|id| before.get(**id).unwrap() != tr.bundle.store.get(**id).unwrap())
                .count()
        };
        let frozen: BTreeSet<ParamId> = frozen.into_iter().collect();
        assert_eq!(moved(&frozen), 0);
        assert!(moved(&tr.bundle.param_ids(&[Role::Classifier]).unwrap()) > 0);
        assert!(moved(&tr.bundle.param_ids(&[Role::TargetCritic]).unwrap()) > 0);
    }

    #[test]
    fn critic_phase_touches_only_critics() {
        let (s, t) = planar();
        let mut tr = trainer("i2i_full", 1);
        let gens: Vec<ParamId> = tr
            .bundle
            .param_ids(&Role::GENERATORS)
            .unwrap()
            .into_iter()
            .collect();
        tr.freeze(&gens).unwrap();
        let before = tr.bundle.store.clone();
        tr.run(&s, t.unlabeled(), &mut NoHooks).unwrap();
        for id in gens {
            assert_eq!(before.get(id).unwrap(), tr.bundle.store.get(id).unwrap());
        }
        let critics = tr.bundle.param_ids(&Role::CRITICS).unwrap();
        assert!(critics
            .iter()
            .any(|id| before.get(*id).unwrap() != tr.bundle.store.get(*id).unwrap()));
    }

    #[test]
    fn classifier_fits_separable_source() {
        let (s, t) = planar();
        let mut tr = trainer("fcns_wild", 500);
        tr.cfg.learning_rate = 1e-3;
        tr.run(&s, t.unlabeled(), &mut NoHooks).unwrap();
        let tail: Vec<f64> = tr
            .state
            .history
            .iter()
            .rev()
            .take(20)
            .map(|v| v.q_c)
            .collect();
        let mean = tail.iter().sum::<f64>() / tail.len() as f64;
        assert!(mean < 0.1, "q_c = {mean}");
    }

    #[test]
    fn non_finite_loss_aborts() {
        let (s, t) = planar();
        let mut tr = trainer("source_only", 3);
        let id = tr
            .bundle
            .param_ids(&[Role::Classifier])
            .unwrap()
            .into_iter()
            .next()
            .unwrap();
        tr.bundle.store.get_mut(id).unwrap().data_mut()[0] = f32::NAN;
        let err = tr.run(&s, t.unlabeled(), &mut NoHooks).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    }
}
