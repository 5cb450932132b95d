//! Capped-simplex projection and the top-n threshold against independent oracles.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rcl_core::coreset::{project_capped_simplex, st_threshold};

/// Exact projection by sweeping the breakpoints of `λ ↦ Σ clip(v − λ, 0, 1)`.
/// The map is piecewise linear and non-increasing with kinks at `v_i` and
/// `v_i − 1`, so the crossing of `n` is found by interpolating inside the
/// bracketing pair of breakpoints.
fn breakpoint_oracle(v: &[f64], n: usize) -> Vec<f64> {
    let s = |l: f64| v.iter().map(|&x| (x - l).clamp(0.0, 1.0)).sum::<f64>();
    let mut grid: Vec<f64> = v.iter().flat_map(|&x| [x, x - 1.0]).collect();
    grid.sort_by(f64::total_cmp);
    let target = n as f64;
    let mut lambda = grid[0];
    for pair in grid.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let (sa, sb) = (s(a), s(b));
        if sa >= target && sb <= target {
            lambda = if sa == sb { a } else { a + (sa - target) / (sa - sb) * (b - a) };
            break;
        }
    }
    v.iter().map(|&x| (x - lambda).clamp(0.0, 1.0)).collect()
}

fn instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, usize) {
    let len = rng.random_range(1..=40);
    let scale = [0.1, 1.0, 10.0][rng.random_range(0..3)];
    let v = (0..len).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
    (v, rng.random_range(1..=len))
}

#[test]
fn matches_breakpoint_oracle_on_1000_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..1000 {
        let (v, n) = instance(&mut rng);
        let w = project_capped_simplex(&v, n).unwrap();
        let o = breakpoint_oracle(&v, n);
        for (i, (a, b)) in w.as_slice().iter().zip(&o).enumerate() {
            assert!((a - b).abs() <= 1e-6, "case {case} coord {i}: {a} vs {b}");
        }
    }
}

#[test]
fn feasible_and_idempotent_on_1000_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..1000 {
        let (v, n) = instance(&mut rng);
        let w = project_capped_simplex(&v, n).unwrap();
        assert!(w.as_slice().iter().all(|&x| (0.0..=1.0).contains(&x)));
        let total: f64 = w.as_slice().iter().sum();
        assert!((total - n as f64).abs() <= 1e-9 * n as f64, "sum {total} vs {n}");
        let again = project_capped_simplex(w.as_slice(), n).unwrap();
        for (a, b) in again.as_slice().iter().zip(w.as_slice()) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }
}

/// The projection is no farther from `v` than any of 10k random feasible
/// points, and satisfies the variational inequality `(v − w)·(u − w) ≤ 0`.
#[test]
fn closer_than_random_feasible_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let v: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
    let n = 5;
    let w = project_capped_simplex(&v, n).unwrap().into_vec();
    let dist = |u: &[f64]| u.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    let dw = dist(&w);
    for _ in 0..10_000 {
        // random feasible point: project a random vector
        let r: Vec<f64> = (0..12).map(|_| rng.random_range(-3.0..3.0)).collect();
        let u = project_capped_simplex(&r, n).unwrap().into_vec();
        assert!(dw <= dist(&u) + 1e-12);
        let vi: f64 = (0..12).map(|i| (v[i] - w[i]) * (u[i] - w[i])).sum();
        assert!(vi <= 1e-9, "variational inequality violated: {vi}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn threshold_has_exactly_n_ones(w in prop::collection::vec(-5.0f64..5.0, 1..30), frac in 0.0f64..1.0) {
        let n = 1 + ((w.len() - 1) as f64 * frac) as usize;
        let m = st_threshold(&w, n);
        prop_assert_eq!(m.iter().filter(|&&x| x == 1.0).count(), n);
        prop_assert!(m.iter().all(|&x| x == 0.0 || x == 1.0));
        // every selected weight is at least every unselected one
        let min_in = w.iter().zip(&m).filter(|p| *p.1 == 1.0).map(|p| *p.0).fold(f64::INFINITY, f64::min);
        let max_out = w.iter().zip(&m).filter(|p| *p.1 == 0.0).map(|p| *p.0).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min_in >= max_out);
    }

    #[test]
    fn threshold_ignores_positive_scaling_and_shift(
        w in prop::collection::vec(-5.0f64..5.0, 1..30),
        a in 0.1f64..10.0,
        b in -3.0f64..3.0,
        frac in 0.0f64..1.0,
    ) {
        let n = 1 + ((w.len() - 1) as f64 * frac) as usize;
        let scaled: Vec<f64> = w.iter().map(|x| a * x + b).collect();
        prop_assert_eq!(st_threshold(&w, n), st_threshold(&scaled, n));
    }

    #[test]
    fn projection_is_translation_equivariant_in_its_output(
        v in prop::collection::vec(-2.0f64..2.0, 2..20),
        c in -5.0f64..5.0,
        frac in 0.0f64..1.0,
    ) {
        // adding a constant to every coordinate only moves λ
        let n = 1 + ((v.len() - 1) as f64 * frac) as usize;
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let a = project_capped_simplex(&v, n).unwrap().into_vec();
        let b = project_capped_simplex(&shifted, n).unwrap().into_vec();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }
}

#[test]
fn ties_break_towards_lower_index() {
    assert_eq!(st_threshold(&[0.5, 0.5, 0.5, 0.5], 2), vec![1.0, 1.0, 0.0, 0.0]);
    assert_eq!(st_threshold(&[0.1, 0.7, 0.7, 0.2], 1), vec![0.0, 1.0, 0.0, 0.0]);
}

/// The brute-force oracle: λ on a 1e-6 grid over `[min(v) − 1, max(v)]`,
/// keeping the grid point where `|Σ clip(v − λ, 0, 1) − n|` is smallest.
/// The sum is non-increasing in λ, so the minimiser is found by bisecting the
/// grid index and comparing the two neighbours of the crossing.
fn lambda_grid_oracle(v: &[f64], n: usize) -> Vec<f64> {
    const STEP: f64 = 1e-6;
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min) - 1.0;
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let at = |k: u64| lo + k as f64 * STEP;
    let gap = |k: u64| v.iter().map(|&x| (x - at(k)).clamp(0.0, 1.0)).sum::<f64>() - n as f64;
    let (mut a, mut b) = (0u64, ((hi - lo) / STEP).ceil() as u64);
    while b - a > 1 {
        let m = (a + b) / 2;
        if gap(m) >= 0.0 {
            a = m;
        } else {
            b = m;
        }
    }
    let k = if gap(a).abs() <= gap(b).abs() { a } else { b };
    v.iter().map(|&x| (x - at(k)).clamp(0.0, 1.0)).collect()
}

#[test]
fn matches_lambda_grid_oracle() {
    let v = [0.9, 0.2, 0.5, 0.4];
    let w = project_capped_simplex(&v, 2).unwrap().into_vec();
    // v already sums to 2 inside the box, so λ = 0 and v is its own projection
    let o = lambda_grid_oracle(&v, 2);
    for (a, b) in w.iter().zip(&o) {
        assert!((a - b).abs() <= 1e-6, "{w:?} vs {o:?}");
    }
    for (a, b) in w.iter().zip(&v) {
        assert!((a - b).abs() <= 1e-12);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for case in 0..1000 {
        let (v, n) = instance(&mut rng);
        let w = project_capped_simplex(&v, n).unwrap().into_vec();
        let o = lambda_grid_oracle(&v, n);
        for (a, b) in w.iter().zip(&o) {
            assert!((a - b).abs() <= 1e-6, "case {case}: {a} vs {b}");
        }
    }
}
