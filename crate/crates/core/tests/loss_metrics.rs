//! Identities and hand-computed oracles for the composite training loss and
//! the normalized quantile-loss metrics.

use proptest::prelude::*;
use ssdnet::loss::{
    composite_loss, composite_loss_nodes, evaluate_forecast, pinball, quantile_loss, LossConfig,
    MetricsAccumulator,
};
use ssdnet::ssm::ForecastPath;
use ssdnet::tensor::{Graph, Tensor};

#[test]
fn weight_zero_reduces_to_mae() {
    let means = vec![1.0, 2.0, -0.5];
    let variances = vec![0.3, 1.7, 0.9];
    let targets = vec![1.5, 1.0, 0.5];
    let loss = composite_loss(&means, &variances, &targets, &LossConfig { a: 0.0 }).unwrap();
    let mae = (0.5 + 1.0 + 1.0) / 3.0;
    assert_eq!(loss, mae, "a = 0 must give exactly the MAE");
}

#[test]
fn perfect_unit_variance_prediction_gives_half_log_tau() {
    // Per-step negative log likelihood of a spot-on unit-variance Gaussian:
    // ln(2*pi)/2 = 0.9189385...
    let targets = vec![0.3, -1.2, 4.5, 0.0];
    let loss =
        composite_loss(&targets, &vec![1.0; 4], &targets, &LossConfig { a: 1.0 }).unwrap();
    assert!((loss - 0.9189385332046727).abs() < 1e-6);
}

#[test]
fn composite_loss_rejects_bad_variance() {
    assert!(composite_loss(&[0.0], &[0.0], &[0.0], &LossConfig { a: 0.5 }).is_err());
    assert!(composite_loss(&[0.0], &[-1.0], &[0.0], &LossConfig { a: 0.5 }).is_err());
}

#[test]
fn graph_loss_matches_pure_loss() {
    let means = vec![0.4, -0.8, 1.2];
    let variances = vec![0.5, 1.3, 2.0];
    let targets = vec![0.0, -1.0, 1.0];
    let cfg = LossConfig { a: 0.5 };
    let pure = composite_loss(&means, &variances, &targets, &cfg).unwrap();

    let mut g = Graph::eval();
    let m: Vec<_> = means
        .iter()
        .map(|&v| g.leaf(Tensor::new(vec![1, 1], vec![v]).unwrap()))
        .collect();
    let v: Vec<_> = variances
        .iter()
        .map(|&v| g.leaf(Tensor::new(vec![1, 1], vec![v]).unwrap()))
        .collect();
    let node = composite_loss_nodes(&mut g, &m, &v, &targets, &cfg).unwrap();
    assert!((g.value(node).item().unwrap() - pure).abs() < 1e-12);
}

#[test]
fn pinball_hand_values() {
    assert_eq!(pinball(2.0, 1.0, 0.5), 0.5);
    assert_eq!(pinball(1.0, 2.0, 0.5), 0.5);
    assert_eq!(pinball(2.0, 1.0, 0.9), 0.9);
    assert_eq!(pinball(1.0, 1.0, 0.7), 0.0);
}

#[test]
fn quantile_loss_hand_cases() {
    // y = [2, -1], yhat = [1, 1], rho = 0.5:
    // pinballs 0.5 and 1.0 -> 2 * 1.5 / 3 = 1.0
    let ql = quantile_loss(&[2.0, -1.0], &[1.0, 1.0], 0.5).unwrap();
    assert_eq!(ql, 1.0);
    // y = [2], yhat = [1], rho = 0.9: 2 * 0.9 / 2 = 0.9
    let ql = quantile_loss(&[2.0], &[1.0], 0.9).unwrap();
    assert_eq!(ql, 0.9);
}

#[test]
fn quantile_loss_rejects_degenerate_inputs() {
    assert!(quantile_loss(&[0.0, 0.0], &[1.0, 1.0], 0.5).is_err(), "all-zero targets");
    assert!(quantile_loss(&[1.0], &[1.0, 2.0], 0.5).is_err(), "length mismatch");
    assert!(quantile_loss(&[1.0], &[1.0], 0.0).is_err(), "rho outside (0,1)");
}

#[test]
fn median_quantile_loss_is_scaled_absolute_error() {
    let mut rng_state = 0x12345u64;
    let mut next = move || {
        // Small deterministic LCG keeps this oracle self-contained.
        rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((rng_state >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0
    };
    for _ in 0..1000 {
        let n = 1 + (next().abs() * 10.0) as usize;
        let y: Vec<f64> = (0..n).map(|_| next()).collect();
        if y.iter().map(|v| v.abs()).sum::<f64>() == 0.0 {
            continue;
        }
        let p: Vec<f64> = (0..n).map(|_| next()).collect();
        let ql = quantile_loss(&y, &p, 0.5).unwrap();
        let sae: f64 = y.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum();
        let expect = sae / y.iter().map(|v| v.abs()).sum::<f64>();
        assert!((ql - expect).abs() < 1e-12);
    }
}

#[test]
fn accumulator_reports_per_series_breakdown_only_for_multiple_series() {
    let mut acc = MetricsAccumulator::new();
    acc.push_points("a", &[1.0, 2.0], &[1.5, 2.5]).unwrap();
    let single = acc.finish().unwrap();
    assert!(single.per_series.is_empty());

    acc.push_points("b", &[0.0], &[1.0]).unwrap();
    let multi = acc.finish().unwrap();
    assert_eq!(multi.per_series.len(), 2);
    assert!(multi.per_series.contains_key("a") && multi.per_series.contains_key("b"));
}

#[test]
fn metrics_report_serializes_flat_keys() {
    let mut acc = MetricsAccumulator::new();
    acc.push_points("a", &[1.0], &[2.0]).unwrap();
    acc.push_points("b", &[1.0], &[3.0]).unwrap();
    let report = acc.finish().unwrap();
    let json = serde_json::to_value(&report).unwrap();
    let obj = json.as_object().unwrap();
    for key in ["rho50", "rho90", "mae", "series_a_rho50", "series_b_mae"] {
        assert!(obj.contains_key(key), "missing key {key}: {obj:?}");
    }
}

#[test]
fn forecast_evaluation_uses_path_quantiles() {
    let path = ForecastPath {
        means: vec![1.0, 2.0],
        variances: vec![1.0, 1.0],
        trends: vec![0.5, 1.0],
        seasonals: vec![0.5, 1.0],
        q50: vec![1.0, 2.0],
        q90: vec![2.0, 3.0],
    };
    let report = evaluate_forecast(&path, &[1.0, 2.0]).unwrap();
    assert_eq!(report.rho50, 0.0, "exact medians give zero rho-0.5 loss");
    assert!(report.rho90 > 0.0, "inflated q90 is penalized");
}

proptest! {
    #[test]
    fn composite_loss_is_mae_plus_weighted_nll(
        a in 0.0f64..2.0,
        targets in proptest::collection::vec(-3.0f64..3.0, 1..8),
    ) {
        let n = targets.len();
        let means: Vec<f64> = targets.iter().map(|v| v + 0.1).collect();
        let variances = vec![0.7; n];
        let full = composite_loss(&means, &variances, &targets, &LossConfig { a }).unwrap();
        let mae = composite_loss(&means, &variances, &targets, &LossConfig { a: 0.0 }).unwrap();
        let nll = composite_loss(&means, &variances, &targets, &LossConfig { a: 1.0 }).unwrap() - mae;
        prop_assert!((full - (a * nll + mae)).abs() < 1e-12);
    }

    #[test]
    fn pinball_is_nonnegative_and_zero_only_at_match(
        y in -5.0f64..5.0,
        yhat in -5.0f64..5.0,
        rho in 0.01f64..0.99,
    ) {
        let p = pinball(y, yhat, rho);
        prop_assert!(p >= 0.0);
        if (y - yhat).abs() > 1e-12 {
            prop_assert!(p > 0.0);
        }
    }
}
