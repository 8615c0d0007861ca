mod common;

use common::oracles;
use ircount::explorer::pareto_indices;

#[test]
fn matches_brute_force_on_random_clouds() {
    for seed in 0..20 {
        oracles::check_pareto(seed, 1000).unwrap();
    }
    for seed in 100..400 {
        oracles::check_pareto(seed, 12).unwrap();
    }
}

#[test]
fn duplicates_keep_the_smallest_name() {
    let pts = [(10, 0.5, "b"), (10, 0.5, "a"), (5, 0.4, "c"), (20, 0.5, "d")];
    assert_eq!(pareto_indices(&pts), vec![2, 1]);
}

#[test]
fn front_is_increasing_in_both_axes() {
    let pts = [(1, 0.1, "a"), (3, 0.3, "b"), (2, 0.2, "c"), (4, 0.25, "d")];
    let f = pareto_indices(&pts);
    assert_eq!(f, vec![0, 2, 1]);
}
