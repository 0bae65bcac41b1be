use gmbinet_core::gradcheck::{ablation_grid, check_network, op_suite, TOLERANCE};

#[test]
fn every_op_matches_finite_differences() {
    for r in op_suite(17).unwrap() {
        assert!(r.passed(TOLERANCE), "{}: max rel error {:e} at {}", r.name, r.max_rel_error, r.worst);
    }
}

#[test]
fn toy_network_gradients_under_every_ablation() {
    for (name, cfg) in ablation_grid() {
        let r = check_network(&name, &cfg, 2, 5).unwrap();
        assert!(r.passed(TOLERANCE), "{name}: max rel error {:e} at {} ({} probes, {} skipped)", r.max_rel_error, r.worst, r.probes, r.skipped);
    }
}
