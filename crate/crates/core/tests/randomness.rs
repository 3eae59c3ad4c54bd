use mfjump::grid::TimeGrid;
use mfjump::randomness::{compensated_integral, sample_driver, InitialSampler, LevyModel};
use mfjump::report::mean_and_se;

const PATHS: u64 = 4000;

fn grid() -> TimeGrid {
    TimeGrid::new(0.0, 2.0, 16).unwrap()
}

#[test]
fn brownian_increments_have_mean_zero_and_variance_delta() {
    let g = grid();
    let levy = LevyModel::none();
    let mut inc = Vec::new();
    for s in 0..PATHS {
        inc.extend(sample_driver(&g, 1, &levy, s, 5).brownian);
    }
    let (mean, se) = mean_and_se(&inc);
    assert!(mean.abs() < 5.0 * se, "{mean} ± {se}");
    let sq: Vec<f64> = inc.iter().map(|v| v * v).collect();
    let (var, se) = mean_and_se(&sq);
    assert!((var - g.delta()).abs() < 5.0 * se, "{var} vs {}", g.delta());
}

#[test]
fn jump_counts_are_poisson() {
    let g = grid();
    let rate = 1.5;
    let levy = LevyModel::single_atom(rate, 0.5).unwrap();
    let counts: Vec<f64> = (0..PATHS).map(|s| sample_driver(&g, 1, &levy, s, 9).events.len() as f64).collect();
    let lam = rate * g.horizon();
    let (mean, se) = mean_and_se(&counts);
    assert!((mean - lam).abs() < 5.0 * se, "{mean} vs {lam}");
    let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (counts.len() - 1) as f64;
    // Var of the sample variance of a Poisson(λ) is about (λ + 2λ²)/n
    let var_se = ((lam + 2.0 * lam * lam) / counts.len() as f64).sqrt();
    assert!((var - lam).abs() < 5.0 * var_se, "{var} vs {lam}");
}

#[test]
fn event_times_are_sorted_and_inside_their_steps() {
    let g = grid();
    let levy = LevyModel::uniform(3.0, 0.2, 1.0, 4).unwrap();
    for s in 0..50 {
        let p = sample_driver(&g, 2, &levy, s, 1);
        assert!(p.events.windows(2).all(|w| w[0].time <= w[1].time));
        for i in 0..g.n_steps() {
            for ev in p.events_in_step(i) {
                assert!(ev.time > g.node(i) - 1e-12 && ev.time <= g.node(i + 1) + 1e-12);
                assert!(ev.mark >= 0.2 && ev.mark <= 1.0);
            }
        }
    }
}

#[test]
fn compensated_integral_is_centered() {
    let g = grid();
    let levy = LevyModel::atoms(2.0, vec![-0.5, 1.0], vec![0.3, 0.7]).unwrap();
    let totals: Vec<f64> = (0..PATHS)
        .map(|s| compensated_integral(&sample_driver(&g, 1, &levy, s, 3), |_, e| e * e + e, &levy).iter().sum())
        .collect();
    let (mean, se) = mean_and_se(&totals);
    assert!(mean.abs() < 5.0 * se, "{mean} ± {se}");
    // isometry: E[(∫∫ g dÑ)²] = T ∫ g² dλ
    let g2 = levy.integrate(|e| (e * e + e).powi(2)) * g.horizon();
    let sq: Vec<f64> = totals.iter().map(|v| v * v).collect();
    let (m2, se2) = mean_and_se(&sq);
    assert!((m2 - g2).abs() < 5.0 * se2, "{m2} vs {g2}");
}

#[test]
fn streams_are_reproducible_and_distinct() {
    let g = grid();
    let levy = LevyModel::single_atom(1.0, 0.3).unwrap();
    assert_eq!(sample_driver(&g, 2, &levy, 7, 11), sample_driver(&g, 2, &levy, 7, 11));
    assert_ne!(sample_driver(&g, 2, &levy, 7, 11).brownian, sample_driver(&g, 2, &levy, 8, 11).brownian);
    assert_ne!(sample_driver(&g, 2, &levy, 7, 11).brownian, sample_driver(&g, 2, &levy, 7, 12).brownian);
}

#[test]
fn coarsening_sums_increments_and_keeps_events() {
    let fine = TimeGrid::new(0.0, 1.0, 8).unwrap();
    let levy = LevyModel::single_atom(4.0, 0.3).unwrap();
    let p = sample_driver(&fine, 1, &levy, 3, 2);
    let c = p.coarsen(4).unwrap();
    assert_eq!(c.n_steps(), 2);
    let first: f64 = p.brownian[..4].iter().sum();
    assert!((c.brownian[0] - first).abs() < 1e-15);
    assert_eq!(c.events, p.events);
}

#[test]
fn initial_samplers_match_their_moments() {
    for xi in [
        InitialSampler::Normal { mean: 0.5, std: 2.0 },
        InitialSampler::Uniform { lo: -1.0, hi: 3.0 },
        InitialSampler::Point { value: 0.25 },
    ] {
        let xs: Vec<f64> = (0..PATHS).map(|i| xi.sample(1, i, 4)[0]).collect();
        let (mean, se) = mean_and_se(&xs);
        assert!((mean - xi.mean()).abs() <= 5.0 * se + 1e-15, "{xi:?}: {mean}");
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        assert!((var - xi.variance()).abs() <= 0.1 * xi.variance() + 1e-15, "{xi:?}: {var}");
    }
}
