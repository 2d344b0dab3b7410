mod common;

#[test]
fn payment_conservation() {
    common::payment_conservation().unwrap();
}

#[test]
fn summary_determinism() {
    common::summary_determinism().unwrap();
}

#[test]
fn routing_soundness() {
    common::routing_soundness().unwrap();
}

#[test]
fn sortition_composition() {
    common::sortition_composition().unwrap();
}

#[test]
fn vrf_completeness_and_soundness() {
    common::vrf_completeness_soundness().unwrap();
}

#[test]
fn gating_soundness() {
    common::gating_soundness().unwrap();
}

#[test]
fn twin_run_equivalence() {
    common::twin_run_equivalence().unwrap();
}
