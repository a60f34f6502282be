mod common;

#[test]
fn projections_match_dense_oracle() {
    for (name, dev) in common::projection_sweep(40, 7) {
        assert!(dev <= 1e-6, "{name}: deviation {dev:e}");
    }
}
