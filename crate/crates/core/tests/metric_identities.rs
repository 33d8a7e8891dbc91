mod common;

#[test]
fn divergence_bounds_and_nrmse_invariance() {
    let m = common::metric_identities();
    assert_eq!(m.identical_jsd, 0.0);
    assert_eq!(m.identical_tv, 0.0);
    assert!((m.disjoint_jsd - 1.0).abs() <= 1e-10, "{m:?}");
    assert!((m.disjoint_tv - 1.0).abs() <= 1e-10, "{m:?}");
    assert!(m.affine_err <= 1e-10, "{m:?}");
}
