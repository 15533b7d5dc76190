use flowforge::density::GridDensity;
use flowforge::metrics::{chi2_divergence, kl_divergence, l2_distance, wasserstein, WassersteinOrder};
use flowforge::transport::kr_construct;
use proptest::prelude::*;

fn grid_1d() -> impl Strategy<Value = GridDensity> {
    prop::collection::vec(0.05f64..5.0, 8..40)
        .prop_map(|v| GridDensity::new(1, v.len(), v).unwrap())
}

fn grid_2d(m: usize) -> impl Strategy<Value = GridDensity> {
    prop::collection::vec(0.05f64..5.0, m * m).prop_map(move |v| GridDensity::new(2, m, v).unwrap())
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

/// Exhaustive optimal coupling: minimum mean cost, or minimum max cost.
fn brute_force(p: &[Vec<f64>], q: &[Vec<f64>], order: WassersteinOrder) -> f64 {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let n = p.len() as f64;
    permutations(p.len())
        .iter()
        .map(|perm| {
            let costs = perm.iter().enumerate().map(|(i, &j)| dist(&p[i], &q[j]));
            match order {
                WassersteinOrder::One => costs.sum::<f64>() / n,
                WassersteinOrder::Two => (costs.map(|c| c * c).sum::<f64>() / n).sqrt(),
                WassersteinOrder::Infinity => costs.fold(0.0, f64::max),
            }
        })
        .fold(f64::INFINITY, f64::min)
}

fn samples(d: usize, max_n: usize) -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (1..=max_n).prop_flat_map(move |n| {
        let set = prop::collection::vec(prop::collection::vec(0.0f64..1.0, d), n);
        (set.clone(), set)
    })
}

const ORDERS: [WassersteinOrder; 3] = [WassersteinOrder::One, WassersteinOrder::Two, WassersteinOrder::Infinity];

proptest! {
    #[test]
    fn inverse_cdf_round_trips(p in grid_1d(), u in 0.0f64..=1.0) {
        let x = p.inverse_conditional_cdf(0, &[], u).unwrap();
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert!((p.conditional_cdf(0, &[], x).unwrap() - u).abs() < 1e-10);
    }

    #[test]
    fn conditional_cdfs_are_monotone(p in grid_2d(9), x0 in 0.0f64..1.0, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (f_lo, f_hi) = (p.conditional_cdf(1, &[x0], lo).unwrap(), p.conditional_cdf(1, &[x0], hi).unwrap());
        prop_assert!(f_lo <= f_hi + 1e-15);
        prop_assert!((p.conditional_cdf(1, &[x0], 1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kr_map_is_increasing_and_fixes_endpoints(p in grid_1d(), q in grid_1d(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let map = kr_construct(p, q).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(map.eval(&[lo]).unwrap()[0] <= map.eval(&[hi]).unwrap()[0] + 1e-12);
        prop_assert!(map.eval(&[0.0]).unwrap()[0].abs() < 1e-12);
        prop_assert!((map.eval(&[1.0]).unwrap()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn divergences_are_ordered(p in grid_2d(8), q in grid_2d(8)) {
        let (d, chi2, kl) = (l2_distance(&p, &q).unwrap(), chi2_divergence(&p, &q).unwrap(), kl_divergence(&p, &q).unwrap());
        prop_assert!(kl <= (1.0 + chi2).ln() + 1e-12);
        prop_assert!(chi2 <= d * d / q.lower_bound() + 1e-12);
        prop_assert!(d * d / q.upper_bound() <= chi2 + 1e-12);
    }

    #[test]
    fn l2_distance_is_a_metric(p in grid_1d(), q in grid_1d(), r in grid_1d()) {
        let resample = |g: &GridDensity| GridDensity::from_fn(1, 17, |x| g.eval(x).unwrap()).unwrap();
        let (p, q, r) = (resample(&p), resample(&q), resample(&r));
        let pq = l2_distance(&p, &q).unwrap();
        prop_assert!((pq - l2_distance(&q, &p).unwrap()).abs() < 1e-15);
        prop_assert!(pq <= l2_distance(&p, &r).unwrap() + l2_distance(&r, &q).unwrap() + 1e-12);
    }

    #[test]
    fn sorted_coupling_is_optimal_in_one_dimension((p, q) in samples(1, 6)) {
        for order in ORDERS {
            let exact = brute_force(&p, &q, order);
            prop_assert!((wasserstein(&p, &q, order).unwrap() - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn assignment_is_optimal_in_two_dimensions((p, q) in samples(2, 6)) {
        for order in ORDERS {
            let exact = brute_force(&p, &q, order);
            prop_assert!((wasserstein(&p, &q, order).unwrap() - exact).abs() < 1e-12);
        }
    }
}

#[test]
fn eight_point_couplings_match_brute_force() {
    let p: Vec<Vec<f64>> = (0..8).map(|i| vec![((i * 37 % 11) as f64) / 11.0]).collect();
    let q: Vec<Vec<f64>> = (0..8).map(|i| vec![((i * 13 % 17) as f64) / 17.0 + 0.05]).collect();
    for order in ORDERS {
        assert!((wasserstein(&p, &q, order).unwrap() - brute_force(&p, &q, order)).abs() < 1e-12);
    }
    let p2: Vec<Vec<f64>> = p.iter().zip(&q).map(|(a, b)| vec![a[0], b[0]]).collect();
    let q2: Vec<Vec<f64>> = q.iter().zip(p.iter().rev()).map(|(a, b)| vec![a[0], b[0]]).collect();
    for order in ORDERS {
        assert!((wasserstein(&p2, &q2, order).unwrap() - brute_force(&p2, &q2, order)).abs() < 1e-12);
    }
}
