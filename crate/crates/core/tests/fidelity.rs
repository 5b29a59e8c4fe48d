mod common;

use common::fidelity::{all_presets, open_routing, preset_fidelity, routing};
use i2i_core::losses::RoutingRules;

#[test]
fn disabled_terms_leave_their_parameters_untouched() {
    for name in all_presets() {
        let r = preset_fidelity(name, 7);
        assert!(
            r.nonzero_grad.is_empty(),
            "{name}: gradient on {:?}",
            r.nonzero_grad
        );
        assert!(r.moved.is_empty(), "{name}: moved {:?}", r.moved);
        if name != "i2i_full" {
            assert!(r.unreachable > 0, "{name}: nothing to check");
        }
    }
}

#[test]
fn two_stage_plan_freezes_the_stage_one_source_encoder() {
    let r = preset_fidelity("adda", 3);
    assert!(r.stage2_moved.is_empty(), "{:?}", r.stage2_moved);
}

#[test]
fn default_routing_blocks_the_documented_paths() {
    let r = routing(RoutingRules::default(), 5);
    assert!(!r.trc_source_encoder && !r.trc_target_decoder, "{r:?}");
    assert!(!r.z_source_encoder, "{r:?}");
    assert!(r.trc_target_encoder && r.z_target_encoder, "{r:?}");
}

#[test]
fn open_routing_lets_gradients_through() {
    // The blocked paths are real paths: without the rules they carry gradient.
    let r = routing(open_routing(), 5);
    assert!(
        r.trc_source_encoder && r.trc_target_decoder && r.z_source_encoder,
        "{r:?}"
    );
}
