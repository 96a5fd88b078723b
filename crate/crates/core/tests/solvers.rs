use minbackprop::properties::{essential_recovery, kabsch_so3};

#[test]
fn five_point_recovers_ground_truth_on_every_sample() {
    let c = essential_recovery(1000, 21);
    assert!(c.pass, "{}", c.detail);
}

#[test]
fn kabsch_returns_proper_rotations() {
    let c = kabsch_so3(1000, 22);
    assert!(c.pass, "{}", c.detail);
}
