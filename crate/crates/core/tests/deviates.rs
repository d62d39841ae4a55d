mod common;

use common::fd::fd_discrepancies;

#[test]
fn closed_form_deviates_match_refits() {
    for (est, target, dc, ds) in fd_discrepancies(3, 70, 50) {
        println!("{est:?} {target:?}: cohort {dc:.2e} survey {ds:.2e}");
        assert!(dc < 1e-3 && ds < 1e-3, "{est:?} {target:?}: cohort {dc:e} survey {ds:e}");
    }
}
