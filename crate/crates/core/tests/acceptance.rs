use trilinear_cim::verify::{self, CriterionResult, VerifyOptions};

fn report(r: &CriterionResult) {
    println!("{}", r.line());
    assert!(r.passed(), "criterion {} ({}) failed: {}", r.id, r.name, r.detail);
}

#[test]
fn c01_write_volume() {
    report(&verify::write_volume_reproduction());
}

#[test]
fn c02_trilinear_write_freedom() {
    report(&verify::trilinear_write_freedom());
}

#[test]
fn c03_fused_dataflow_equivalence() {
    report(&verify::fused_equivalence(&VerifyOptions::default()));
}

#[test]
fn c04_device_identities() {
    report(&verify::device_identities());
}

#[test]
fn c05_quant_round_trip() {
    report(&verify::quant_round_trip());
}

#[test]
fn c06_sfu_accuracy() {
    report(&verify::sfu_accuracy());
}

#[test]
fn c07_scaling_laws() {
    report(&verify::scaling_laws());
}

#[test]
fn c08_buffer_residency() {
    report(&verify::buffer_ratio());
}

#[test]
fn c09_baseline_cancellation() {
    report(&verify::baseline_cancellation());
}

#[test]
fn c10_absolute_ppa_declared() {
    report(&verify::absolute_ppa());
}

#[test]
fn fault_injection_breaks_equivalence() {
    let r = verify::fused_equivalence(&VerifyOptions { eta_perturbation: 1.01 });
    println!("{}", r.line());
    assert!(!r.passed(), "perturbed sensitivity went undetected");
}
