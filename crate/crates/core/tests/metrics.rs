mod common;

use common::randn;
use difflab::autodiff::Tensor;
use difflab::metrics::{energy_distance, median_bandwidth, mmd_rbf, nearest_neighbor_recall, MetricReport};

fn shifted(x: &Tensor<f64>, by: f64) -> Tensor<f64> {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v + by).collect()).unwrap()
}

#[test]
fn same_distribution_gives_near_zero_energy_distance() {
    let a = randn::<f64>(&[10_000, 1], 1);
    let b = randn::<f64>(&[10_000, 1], 2);
    let ed = energy_distance(&a, &b).unwrap();
    assert!(ed < 0.02, "{ed}");
    assert_eq!(energy_distance(&a, &a).unwrap(), 0.0);
}

#[test]
fn shifted_gaussians_match_the_closed_form() {
    // For N(0,1) vs N(μ,1): 2·E|X−Y| − 2·E|X−X′| with X−Y ~ N(μ, 2).
    let a = randn::<f64>(&[3000, 1], 3);
    let b = shifted(&randn::<f64>(&[3000, 1], 4), 1.0);
    let (mu, sd) = (1.0f64, 2f64.sqrt());
    let phi = |z: f64| 0.5 * (1.0 + libm_erf(z / 2f64.sqrt()));
    let folded = sd * (2.0 / std::f64::consts::PI).sqrt() * (-mu * mu / (2.0 * sd * sd)).exp() + mu * (1.0 - 2.0 * phi(-mu / sd));
    let expect = 2.0 * folded - 2.0 * 2.0 / std::f64::consts::PI.sqrt();
    let ed = energy_distance(&a, &b).unwrap();
    assert!((ed - expect).abs() < 0.05, "{ed} vs {expect}");
}

/// Abramowitz–Stegun 7.1.26, accurate to 1.5e-7.
fn libm_erf(x: f64) -> f64 {
    let t = 1.0 / (1.0 + 0.3275911 * x.abs());
    let y = 1.0 - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t + 0.254829592) * t * (-x * x).exp();
    y.copysign(x)
}

#[test]
fn distances_are_symmetric_and_grow_with_the_shift() {
    let a = randn::<f64>(&[400, 2], 5);
    let b = randn::<f64>(&[300, 2], 6);
    assert!((energy_distance(&a, &b).unwrap() - energy_distance(&b, &a).unwrap()).abs() < 1e-12);
    assert!((mmd_rbf(&a, &b, None).unwrap() - mmd_rbf(&b, &a, None).unwrap()).abs() < 1e-12);
    let mut last = (energy_distance(&a, &b).unwrap(), mmd_rbf(&a, &b, Some(1.0)).unwrap());
    for shift in [0.5, 1.0, 2.0] {
        let c = shifted(&b, shift);
        let now = (energy_distance(&a, &c).unwrap(), mmd_rbf(&a, &c, Some(1.0)).unwrap());
        assert!(now.0 > last.0 && now.1 > last.1, "shift {shift}");
        last = now;
    }
}

#[test]
fn median_bandwidth_matches_a_sorted_scan() {
    let a = Tensor::new([3, 1], vec![0.0, 1.0, 3.0]).unwrap();
    let b = Tensor::new([2, 1], vec![6.0, 10.0]).unwrap();
    // Pairwise distances sorted: 1 2 3 3 4 5 6 7 9 10; the upper median of an
    // even count is taken.
    assert_eq!(median_bandwidth(&a, &b).unwrap(), 5.0);
}

#[test]
fn recall_counts_covered_reference_points() {
    let real = Tensor::new([4, 1], vec![0.0, 1.0, 2.0, 100.0]).unwrap();
    let generated = Tensor::new([4, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    // Only the far-away reference point is outside every generated k-ball.
    assert_eq!(nearest_neighbor_recall(&generated, &real, 1).unwrap(), 0.75);
    assert_eq!(nearest_neighbor_recall(&real, &real, 3).unwrap(), 1.0);
}

#[test]
fn report_rows_are_csv_fields() {
    let a = randn::<f32>(&[50, 2], 7);
    let b = randn::<f32>(&[50, 2], 8);
    let r = MetricReport::compute(&a, &b).unwrap();
    assert_eq!(r.csv_fields().split(',').count(), 3);
    assert!(energy_distance(&a, &randn::<f32>(&[50, 3], 9)).is_err());
}
