//! Which parameters each objective may move, checked against what training
//! actually moves.

use std::collections::BTreeSet;

use i2i_core::data::{synth_domain_pair, Dataset, SyntheticSpec};
use i2i_core::losses::{preset, GeneratorSide, LossGraph, RoutingRules, PRESET_NAMES};
use i2i_core::models::{ArchSpec, CriticNorm, ModelBundle, Role, SharingPlan};
use i2i_core::nn::{ParamStore, Session};
use i2i_core::trainer::{mix_seed, Hooks, TrainConfig, Trainer};
use i2i_core::{ParamId, Result, Tensor};

pub const STEPS: usize = 10;

/// Roles whose parameters the enabled terms of `preset` reach, generator and
/// critic phases together, written out by hand from the objective definitions.
pub fn reachable_roles(preset: &str) -> &'static [Role] {
    use Role::*;
    match preset {
        "fcns_wild" | "adda" => &[
            SourceEncoder,
            TargetEncoder,
            Classifier,
            LatentDiscriminator,
        ],
        "drcn" => &[SourceEncoder, TargetEncoder, Classifier, TargetDecoder],
        "cyclegan" => &[
            SourceEncoder,
            TargetEncoder,
            SourceDecoder,
            TargetDecoder,
            SourceCritic,
            TargetCritic,
        ],
        "i2i_full" => &Role::ALL,
        other => panic!("no reachability row for `{other}`"),
    }
}

/// Slots whose tensors no enabled term reaches.
pub fn unreachable_slots(bundle: &ModelBundle<f32>, preset: &str) -> Vec<String> {
    let reach = reachable_roles(preset);
    let reached: BTreeSet<ParamId> = bundle.param_ids(reach).unwrap();
    let store = &bundle.store;
    Role::ALL
        .iter()
        .filter(|r| !reach.contains(r))
        .flat_map(|&r| bundle.nets.net(r).slots())
        .filter(|slot| {
            let id = store.resolve(slot).unwrap();
            store.kind(id) == Some(i2i_core::nn::ParamKind::Trainable) && !reached.contains(&id)
        })
        .collect()
}

pub fn shapes_data(seed: u64) -> (Dataset, Dataset) {
    synth_domain_pair(&SyntheticSpec::shapes(3, 24, 24, seed)).unwrap()
}

pub fn compact_bundle(seed: u64, sharing: SharingPlan) -> ModelBundle<f32> {
    ModelBundle::build(ArchSpec::compact(3, CriticNorm::None), sharing, seed).unwrap()
}

struct StageSnapshot(Option<ParamStore<f32>>);

impl Hooks for StageSnapshot {
    fn on_stage_end(&mut self, tr: &Trainer, stage: usize) -> Result<()> {
        if stage == 0 {
            self.0 = Some(tr.bundle.store.clone());
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct PresetReport {
    /// Unreachable slots that changed over the run.
    pub moved: Vec<String>,
    /// Unreachable slots with a nonzero gradient on some direct evaluation.
    pub nonzero_grad: Vec<String>,
    pub unreachable: usize,
    /// Stage-2 source-encoder slots that changed (two-stage plans only).
    pub stage2_moved: Vec<String>,
}

fn nonzero(t: Option<&Tensor<f32>>) -> bool {
    t.is_some_and(|g| g.data().iter().any(|&v| v != 0.0))
}

/// Trains `preset` for [`STEPS`] steps and evaluates the gradients of every
/// enabled term on [`STEPS`] random batch pairs.
pub fn preset_fidelity(name: &str, seed: u64) -> PresetReport {
    let (src, tgt) = shapes_data(seed);
    let bundle = compact_bundle(seed, SharingPlan::default());
    let slots = unreachable_slots(&bundle, name);
    let mut report = PresetReport {
        unreachable: slots.len(),
        ..PresetReport::default()
    };
    let plan = preset(name).unwrap();

    // Direct gradients of each stage's generator and critic objectives.
    for stage in &plan.stages {
        let mut b = bundle.clone();
        for k in 0..STEPS as u64 {
            let xb = src.batch(4, mix_seed(seed, 1), k).unwrap();
            let yb = tgt.unlabeled().batch(4, mix_seed(seed, 2), k).unwrap();
            let (nets, store) = b.parts();
            let mut sess = Session::train(store);
            let mut lg = LossGraph::new(
                nets,
                &mut sess,
                xb.images,
                xb.labels.as_deref(),
                yb.images,
                RoutingRules::default(),
            );
            let (total, _) = lg.total(&stage.lambdas).unwrap();
            let critics = lg.critics(&stage.lambdas, k).unwrap();
            let critic_total = critics.sum(&mut sess).unwrap();
            for loss in std::iter::once(total).chain(critic_total) {
                if !sess.graph.requires_grad(loss) {
                    continue;
                }
                let grads = sess.graph.backward(loss).unwrap();
                for slot in &slots {
                    let id = sess.store().resolve(slot).unwrap();
                    if nonzero(grads.param(id)) && !report.nonzero_grad.contains(slot) {
                        report.nonzero_grad.push(slot.clone());
                    }
                }
            }
        }
    }

    // End to end through the trainer.
    let cfg = TrainConfig {
        total_steps: STEPS,
        batch_size: 4,
        seed,
        ..TrainConfig::default()
    };
    let before = bundle.store.clone();
    let mut tr = Trainer::new(bundle, cfg, plan).unwrap();
    let mut snap = StageSnapshot(None);
    tr.run(&src, tgt.unlabeled(), &mut snap).unwrap();
    for slot in &slots {
        if before.slot(slot).unwrap() != tr.bundle.store.slot(slot).unwrap() {
            report.moved.push(slot.clone());
        }
    }
    if let Some(stage1) = snap.0 {
        for slot in tr.bundle.nets.net(Role::SourceEncoder).slots() {
            if stage1.slot(&slot).unwrap() != tr.bundle.store.slot(&slot).unwrap() {
                report.stage2_moved.push(slot);
            }
        }
    }
    report
}

pub fn all_presets() -> impl Iterator<Item = &'static str> {
    PRESET_NAMES.into_iter()
}

#[derive(Debug, Clone, Copy)]
pub struct RoutingReport {
    /// Gradient reaching the first encoder from the translated-classification term.
    pub trc_source_encoder: bool,
    /// Gradient reaching the target decoder from the translated-classification term.
    pub trc_target_decoder: bool,
    /// Sanity: the second encoder does learn from the term.
    pub trc_target_encoder: bool,
    /// Gradient reaching the source encoder from the encoder-side latent term.
    pub z_source_encoder: bool,
    pub z_target_encoder: bool,
}

/// Per-term gradients with separate encoders, so that each encoder's share is
/// observable.
pub fn routing(rules: RoutingRules, seed: u64) -> RoutingReport {
    let (src, tgt) = shapes_data(seed);
    let mut b = compact_bundle(
        seed,
        SharingPlan {
            tie_encoders: false,
            shared_decoder_layers: 0,
        },
    );
    let xb = src.batch(8, seed, 0).unwrap();
    let yb = tgt.unlabeled().batch(8, seed, 1).unwrap();
    let ids = |b: &ModelBundle<f32>, r: Role| b.param_ids(&[r]).unwrap();
    let (senc, tenc, tdec) = (
        ids(&b, Role::SourceEncoder),
        ids(&b, Role::TargetEncoder),
        ids(&b, Role::TargetDecoder),
    );
    let (nets, store) = b.parts();
    let mut sess = Session::train(store);
    let mut lg = LossGraph::new(
        nets,
        &mut sess,
        xb.images,
        xb.labels.as_deref(),
        yb.images,
        rules,
    );
    let trc = lg.q_translated_classification().unwrap();
    let z = lg
        .q_feature_adversarial(i2i_core::losses::FeatureGan::LeastSquares)
        .unwrap();
    let g_trc = sess.graph.backward(trc).unwrap();
    let g_z = sess.graph.backward(z).unwrap();
    let any = |g: &i2i_core::autodiff::Gradients<f32>, set: &BTreeSet<ParamId>| {
        set.iter().any(|&id| nonzero(g.param(id)))
    };
    RoutingReport {
        trc_source_encoder: any(&g_trc, &senc),
        trc_target_decoder: any(&g_trc, &tdec),
        trc_target_encoder: any(&g_trc, &tenc),
        z_source_encoder: any(&g_z, &senc),
        z_target_encoder: any(&g_z, &tenc),
    }
}

/// Rules that let every gradient through, for control runs.
pub fn open_routing() -> RoutingRules {
    RoutingRules {
        latent_generator_side: GeneratorSide::Both,
        stop_before_second_encode: false,
    }
}
