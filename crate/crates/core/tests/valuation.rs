use statrs::distribution::{ContinuousCDF, Normal};
use swingnet::policy::SpotRule;
use swingnet::valuation::{evaluate_on_paths, evaluate_policy};
use swingnet::{ContractSpec, FactorModel, QGrid, StateProcess, VolumeConstraints};

fn model(t0: f64, n: usize) -> FactorModel {
    FactorModel::uniform(vec![4.0], vec![0.7], vec![vec![1.0]], 20.0, t0, 1.0, n).unwrap()
}

fn base() -> (FactorModel, ContractSpec, QGrid) {
    let c = ContractSpec::take_or_pay(20.0, VolumeConstraints::firm(0, 1, 20, 25, 30));
    let g = QGrid::new(c.volume).unwrap();
    (model(0.0, 30), c, g)
}

#[test]
fn single_date_call_matches_black_formula() {
    let m = model(0.5, 1);
    let c = ContractSpec::take_or_pay(21.0, VolumeConstraints::firm(0, 1, 0, 1, 1));
    let g = QGrid::new(c.volume).unwrap();
    let rule = SpotRule(|_, s: f64, _| s > 21.0);
    let r = evaluate_policy(&rule, &m, &c, &g, 400_000, 3).unwrap();
    let lambda = m.lambda_sq(0).sqrt();
    let phi = Normal::standard();
    let d1 = ((20.0f64 / 21.0).ln() + 0.5 * lambda * lambda) / lambda;
    let exact = 20.0 * phi.cdf(d1) - 21.0 * phi.cdf(d1 - lambda);
    assert!((r.price - exact).abs() <= 3.0 * r.stderr, "{} vs {exact}", r.price);
    assert!(r.ci_low <= r.price && r.price <= r.ci_high);
}

#[test]
fn same_seed_same_result() {
    let (m, c, g) = base();
    let rule = SpotRule(|_, s: f64, _| s > 20.5);
    let a = evaluate_policy(&rule, &m, &c, &g, 10_000, 11).unwrap();
    let b = evaluate_policy(&rule, &m, &c, &g, 10_000, 11).unwrap();
    assert_eq!(a, b);
    let other = evaluate_policy(&rule, &m, &c, &g, 10_000, 12).unwrap();
    assert_ne!(a.price, other.price);
}

#[test]
fn chunked_reduction_matches_single_pass() {
    let (m, c, g) = base();
    let rule = SpotRule(|_, s: f64, _| s > 20.5);
    let count = 10_000;
    let chunked = evaluate_policy(&rule, &m, &c, &g, count, 5).unwrap();
    let all = m.fill_paths(5, 0, count, 0).unwrap();
    let single = evaluate_on_paths(&rule, &m, &c, &g, &all, 5).unwrap();
    assert!((chunked.price - single.price).abs() <= 1e-9);
    assert!((chunked.stderr - single.stderr).abs() <= 1e-9);
}

#[test]
fn standard_error_halves_with_four_times_the_paths() {
    let (m, c, g) = base();
    let rule = SpotRule(|_, s: f64, _| s > 20.0);
    let small = evaluate_policy(&rule, &m, &c, &g, 20_000, 8).unwrap();
    let large = evaluate_policy(&rule, &m, &c, &g, 80_000, 9).unwrap();
    let ratio = large.stderr / small.stderr;
    assert!((ratio - 0.5).abs() <= 0.1, "ratio {ratio}");
}

#[test]
fn firm_bounds_hold_for_any_rule() {
    let (m, c, g) = base();
    for threshold in [0.0, 15.0, 19.0, 20.0, 21.0, 25.0, 1e9] {
        let rule = SpotRule(move |k, s: f64, q| s > threshold || (k + q as usize) % 3 == 0);
        let r = evaluate_policy(&rule, &m, &c, &g, 5_000, 1).unwrap();
        assert!(r.min_final_volume >= 20 && r.max_final_volume <= 25, "{threshold}: {r:?}");
    }
}

#[test]
fn deterministic_greedy_optimum() {
    let m = FactorModel::uniform(vec![4.0], vec![1e-8], vec![vec![1.0]], 20.0, 0.0, 1.0, 30).unwrap();
    let c = ContractSpec::take_or_pay(19.0, VolumeConstraints::firm(0, 1, 20, 25, 30));
    let g = QGrid::new(c.volume).unwrap();
    let r = evaluate_policy(&SpotRule(|_, s: f64, _| s > 19.0), &m, &c, &g, 10_000, 2).unwrap();
    assert!((r.price - 25.0).abs() < 1e-4, "{}", r.price);
}

#[test]
fn model_and_contract_date_counts_must_agree() {
    let (_, c, g) = base();
    let m = model(0.0, 10);
    assert!(evaluate_policy(&SpotRule(|_, _, _| true), &m, &c, &g, 100, 1).is_err());
}
