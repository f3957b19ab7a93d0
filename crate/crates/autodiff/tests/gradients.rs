use cropformer_autodiff::gradcheck::op_cases;
use cropformer_autodiff::Real;

fn tolerance() -> f64 {
    if std::mem::size_of::<Real>() == 4 {
        1e-3
    } else {
        1e-5
    }
}

#[test]
fn every_op_matches_finite_differences() {
    let mut failures = Vec::new();
    for case in op_cases() {
        for seed in 0..20 {
            let report = case.run(seed).unwrap_or_else(|e| panic!("{} seed {seed}: {e}", case.name));
            assert!(report.checked > 0);
            if !(report.rel_error < tolerance()) {
                failures.push(format!("{} seed {seed}: rel error {:.3e}", case.name, report.rel_error));
            }
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}
