//! Randomized invariants over losses, models and metrics.

use i2i_core::eval::{accuracy, confusion_matrix};
use i2i_core::losses::{gradient_penalty, LambdaConfig, LossGraph, RoutingRules};
use i2i_core::models::{ArchSpec, CriticNorm, ModelBundle, Role, SharingPlan};
use i2i_core::nn::{LayerSpec, Network, ParamStore, Session};
use i2i_core::Tensor;
use proptest::prelude::*;

fn unit_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, n)
}

fn dense_bundle(seed: u64) -> ModelBundle<f64> {
    ModelBundle::build(ArchSpec::dense(2, 3, 8, 4), SharingPlan::default(), seed).unwrap()
}

/// Weighted objective value with exactly one nonzero coefficient.
fn single_term_total(
    seed: u64,
    xs: &[f64],
    ys: &[f64],
    labels: &[usize],
    term: usize,
    weight: f64,
) -> f64 {
    let mut b = dense_bundle(seed);
    let (nets, store) = b.parts();
    let mut s = Session::train(store);
    let n = labels.len();
    let x = Tensor::from_f64(vec![n, 2], xs).unwrap();
    let y = Tensor::from_f64(vec![n, 2], ys).unwrap();
    let mut cfg = LambdaConfig::zero();
    *[
        &mut cfg.classification,
        &mut cfg.latent_adversarial,
        &mut cfg.translation_adversarial,
        &mut cfg.source_identity,
        &mut cfg.target_identity,
        &mut cfg.cycle,
        &mut cfg.translated_classification,
    ][term] = weight;
    let mut lg = LossGraph::new(nets, &mut s, x, Some(labels), y, RoutingRules::default());
    lg.total(&cfg).unwrap().1.total
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn objective_is_linear_in_each_coefficient(
        seed in 0u64..1000,
        xs in unit_vec(8),
        ys in unit_vec(8),
        labels in prop::collection::vec(0usize..3, 4),
        term in 0usize..7,
        weight in 0.01f64..3.0,
    ) {
        let one = single_term_total(seed, &xs, &ys, &labels, term, weight);
        let two = single_term_total(seed, &xs, &ys, &labels, term, 2.0 * weight);
        prop_assert!((two - 2.0 * one).abs() <= 1e-9 * one.abs().max(1.0), "{one} vs {two}");
    }

    #[test]
    fn penalty_is_nonnegative(
        seed in 0u64..1000,
        real in unit_vec(12),
        fake in unit_vec(12),
    ) {
        let mut store = ParamStore::<f64>::new();
        let specs = [LayerSpec::linear(4, 5), LayerSpec::linear(5, 1)];
        let net = Network::build("c", &specs, &mut store, seed).unwrap();
        let mut s = Session::train(&mut store);
        let r = Tensor::from_f64(vec![3, 4], &real).unwrap();
        let f = Tensor::from_f64(vec![3, 4], &fake).unwrap();
        let p = gradient_penalty(&mut s, &net, &r, &f, seed).unwrap();
        prop_assert!(s.graph.value(p).item() >= 0.0);
    }

    #[test]
    fn tied_encoders_agree_and_outputs_are_finite(seed in 0u64..1000, v in unit_vec(2 * 32 * 32)) {
        let mut b = ModelBundle::<f32>::build(ArchSpec::compact(3, CriticNorm::None), SharingPlan::default(), seed).unwrap();
        let (nets, store) = b.parts();
        let mut s = Session::eval(store);
        let x = s.input(Tensor::from_f64(vec![2, 1, 32, 32], &v).unwrap());
        let zx = nets.encode(&mut s, Role::SourceEncoder, x).unwrap();
        let zy = nets.encode(&mut s, Role::TargetEncoder, x).unwrap();
        prop_assert_eq!(s.graph.value(zx).data(), s.graph.value(zy).data());
        for role in Role::ALL {
            let takes_image = matches!(
                role,
                Role::SourceEncoder | Role::TargetEncoder | Role::SourceCritic | Role::TargetCritic
            );
            let input = if takes_image { x } else { zx };
            let out = nets.run(&mut s, role, input).unwrap();
            prop_assert!(s.graph.value(out).data().iter().all(|v| v.is_finite()), "{role:?}");
        }
    }

    #[test]
    fn accuracy_and_confusion_are_consistent(
        pairs in prop::collection::vec((0usize..5, 0usize..5), 1..200),
    ) {
        let (preds, labels): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let a = accuracy(&preds, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        let m = confusion_matrix(&preds, &labels, 5).unwrap();
        for (c, row) in m.iter().enumerate() {
            prop_assert_eq!(row.iter().sum::<usize>(), labels.iter().filter(|&&l| l == c).count());
        }
        let diag: usize = (0..5).map(|c| m[c][c]).sum();
        prop_assert_eq!(diag as f64 / labels.len() as f64, a);
    }
}
