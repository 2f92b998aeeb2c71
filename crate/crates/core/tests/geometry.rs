mod common;

#[test]
fn constructed_pairs_are_recovered_exactly() {
    let o = common::similarity_exact(200, 3);
    assert!(o.passed(), "{:#?}", o.failures);
}

#[test]
fn noisy_pairs_agree_with_grid_search() {
    let o = common::similarity_grid_oracle(5, 3);
    assert!(o.passed(), "{:#?}", o.failures);
}

#[test]
fn common_translation_leaves_rotation_and_scale() {
    let o = common::similarity_equivariance(50, 3);
    assert!(o.passed(), "{:#?}", o.failures);
}

#[test]
fn warp_identity_shift_and_roundtrip() {
    let o = common::warp_properties(5, 3);
    assert!(o.passed(), "{:#?}", o.failures);
}
