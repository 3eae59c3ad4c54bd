use mfjump::measures::{lifted_grad, lifted_grad_y, w2, EmpiricalMeasure, W2Mode};
use proptest::prelude::*;

/// Minimum over all permutations, by recursion over the unused targets.
fn brute_w2(a: &[f64], b: &[f64], dim: usize) -> f64 {
    fn go(i: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64, cost: &dyn Fn(usize, usize) -> f64) {
        let n = used.len();
        if i == n {
            *best = best.min(acc);
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                go(i + 1, used, acc + cost(i, j), best, cost);
                used[j] = false;
            }
        }
    }
    let n = a.len() / dim;
    let cost = |i: usize, j: usize| (0..dim).map(|k| (a[i * dim + k] - b[j * dim + k]).powi(2)).sum::<f64>();
    let mut best = f64::INFINITY;
    go(0, &mut vec![false; n], 0.0, &mut best, &cost);
    (best / n as f64).sqrt()
}

fn cloud_pair(max_n: usize) -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>)> {
    (1..=3usize, 1..=max_n).prop_flat_map(|(dim, n)| {
        (Just(dim), prop::collection::vec(-3.0..3.0f64, n * dim), prop::collection::vec(-3.0..3.0f64, n * dim))
    })
}

fn cloud(dim: usize, v: Vec<f64>) -> EmpiricalMeasure {
    EmpiricalMeasure::uniform(dim, v).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exact_w2_matches_permutation_minimum((dim, a, b) in cloud_pair(6)) {
        let got = w2(&cloud(dim, a.clone()), &cloud(dim, b.clone())).unwrap();
        prop_assert!(matches!(got.mode, W2Mode::Exact1d | W2Mode::Assignment));
        prop_assert!((got.distance - brute_w2(&a, &b, dim)).abs() < 1e-12);
    }

    #[test]
    fn triangle_inequality((dim, a, b) in cloud_pair(6), shift in -1.0..1.0f64) {
        let c: Vec<f64> = a.iter().rev().map(|v| v * 0.5 + shift).collect();
        let (a, b, c) = (cloud(dim, a), cloud(dim, b), cloud(dim, c));
        let ab = w2(&a, &b).unwrap().distance;
        let bc = w2(&b, &c).unwrap().distance;
        let ac = w2(&a, &c).unwrap().distance;
        prop_assert!(ac <= ab + bc + 1e-12);
    }

    #[test]
    fn translation_moves_by_the_shift_norm((dim, a, _b) in cloud_pair(8), s in prop::collection::vec(-2.0..2.0f64, 3)) {
        let mu = cloud(dim, a);
        let nu = mu.shifted(&s[..dim]);
        let norm = s[..dim].iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((w2(&mu, &nu).unwrap().distance - norm).abs() < 1e-9);
    }

    #[test]
    fn symmetric_and_zero_on_the_diagonal((dim, a, b) in cloud_pair(6)) {
        let (a, b) = (cloud(dim, a), cloud(dim, b));
        prop_assert!((w2(&a, &b).unwrap().distance - w2(&b, &a).unwrap().distance).abs() < 1e-12);
        prop_assert!(w2(&a, &a).unwrap().distance < 1e-12);
    }

    #[test]
    fn canonical_form_ignores_sample_order((dim, a, _b) in cloud_pair(8)) {
        let n = a.len() / dim;
        let mut rev = Vec::with_capacity(a.len());
        for i in (0..n).rev() {
            rev.extend_from_slice(&a[i * dim..(i + 1) * dim]);
        }
        prop_assert_eq!(cloud(dim, a).canonical().digest(), cloud(dim, rev).canonical().digest());
    }
}

#[test]
fn lifted_gradient_of_linear_and_quadratic_functionals() {
    let mu = cloud(1, vec![-1.0, 0.2, 0.7, 1.5]);
    // φ(μ) = ⟨sin⟩: ∂_μφ(y) = cos y
    let g = lifted_grad(|m| m.integrate(|x| x[0].sin()), &mu, 2, 1e-5).unwrap();
    assert!((g[0] - 0.7f64.cos()).abs() < 1e-8);
    // φ(μ) = (mean)²: ∂_μφ(y) = 2·mean, independent of y
    let mean = mu.mean()[0];
    let g = lifted_grad(|m| m.mean()[0].powi(2), &mu, 0, 1e-4).unwrap();
    assert!((g[0] - 2.0 * mean).abs() < 1e-6);
    // ∂_y∂_μ⟨x³⟩ = 6y
    let h = lifted_grad_y(|m| m.integrate(|x| x[0].powi(3)), &mu, 3, 1e-3).unwrap();
    assert!((h[0][0] - 6.0 * 1.5).abs() < 1e-5);
}

#[test]
fn lifted_gradient_in_two_dimensions() {
    let mu = cloud(2, vec![0.0, 1.0, 0.5, -0.5, 1.0, 0.25]);
    // φ(μ) = ⟨x₀ x₁⟩: ∂_μφ(y) = (y₁, y₀); the mixed y-derivative is 1
    let phi = |m: &EmpiricalMeasure| m.integrate(|x| x[0] * x[1]);
    let g = lifted_grad(phi, &mu, 1, 1e-5).unwrap();
    assert!((g[0] + 0.5).abs() < 1e-8 && (g[1] - 0.5).abs() < 1e-8, "{g:?}");
    let h = lifted_grad_y(phi, &mu, 1, 1e-3).unwrap();
    assert!((h[0][1] - 1.0).abs() < 1e-6 && h[0][0].abs() < 1e-6, "{h:?}");
}

#[test]
fn unequal_sizes_are_resampled() {
    let a = cloud(1, vec![0.0, 1.0]);
    let b = cloud(1, vec![0.0, 0.0, 1.0, 1.0]);
    let r = w2(&a, &b).unwrap();
    assert!(r.resampled);
    assert!(r.distance < 1e-12);
}
