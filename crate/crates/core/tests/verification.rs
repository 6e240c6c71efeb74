use bmip_core::verify::{gradcheck_suite, oracle_suite, ORACLE_TOLERANCE, TOLERANCE};

#[test]
fn every_gradient_matches_central_differences() {
    let checks = gradcheck_suite(&[1, 2, 3]).unwrap();
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
    for c in &failed {
        eprintln!("{} seed {} rel {:.3e}", c.name, c.seed, c.rel_error);
    }
    assert!(failed.is_empty());
    assert!(checks.iter().all(|c| c.rel_error < TOLERANCE));
    assert!(checks.iter().any(|c| c.name == "interactive_forward[bmip]"));
}

#[test]
fn tape_forward_matches_naive_loops() {
    let checks = oracle_suite(&[1, 2]).unwrap();
    assert_eq!(checks.len(), 2 * 3 * 6);
    for c in &checks {
        assert!(
            c.max_abs_diff <= ORACLE_TOLERANCE,
            "{} J={} seed {}: {:.3e}",
            c.strategy,
            c.depth,
            c.seed,
            c.max_abs_diff
        );
    }
}
