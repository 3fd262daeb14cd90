mod common;

#[test]
fn analytic_gradients_match_central_differences() {
    for seed in [1, 2] {
        let worst = common::gradient_check(100, seed);
        assert!(worst < 1e-4, "seed {seed}: relative error {worst:e}");
    }
}
