//! Small-sample statistics used by the ensemble checks.

use statrs::distribution::{ContinuousCDF, Normal};

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Wilson score interval for a binomial proportion at normal quantile `z`.
pub fn wilson_interval(successes: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let mid = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((mid - half).max(0.0), (mid + half).min(1.0))
}

/// One-sided pooled z-test of `H1: p1 > p2`. Returns `(z, p_value)`.
pub fn two_proportion_z_test(x1: usize, n1: usize, x2: usize, n2: usize) -> (f64, f64) {
    let (n1f, n2f) = (n1 as f64, n2 as f64);
    let (p1, p2) = (x1 as f64 / n1f, x2 as f64 / n2f);
    let pooled = (x1 + x2) as f64 / (n1f + n2f);
    let se = (pooled * (1.0 - pooled) * (1.0 / n1f + 1.0 / n2f)).sqrt();
    if se == 0.0 {
        // both samples unanimous and equal: no evidence either way
        let z = if p1 > p2 { f64::INFINITY } else { 0.0 };
        return (z, if p1 > p2 { 0.0 } else { 0.5 });
    }
    let z = (p1 - p2) / se;
    (z, 1.0 - std_normal().cdf(z))
}

/// Mann–Whitney U test of `H1: a tends to exceed b`, normal approximation
/// with tie correction. Returns `(U_a, p_value)`.
pub fn mann_whitney_greater(a: &[f64], b: &[f64]) -> (f64, f64) {
    let (n1, n2) = (a.len(), b.len());
    let mut pooled: Vec<(f64, usize)> = a.iter().map(|&x| (x, 0)).chain(b.iter().map(|&x| (x, 1))).collect();
    pooled.sort_by(|x, y| x.0.total_cmp(&y.0));
    let n = pooled.len();
    let mut ranks = vec![0.0; n];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for r in &mut ranks[i..=j] {
            *r = avg;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let rank_sum_a: f64 = pooled.iter().zip(&ranks).filter(|(p, _)| p.1 == 0).map(|(_, r)| r).sum();
    let (n1f, n2f, nf) = (n1 as f64, n2 as f64, n as f64);
    let u = rank_sum_a - n1f * (n1f + 1.0) / 2.0;
    let mean = n1f * n2f / 2.0;
    let var = n1f * n2f / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
    if var <= 0.0 {
        return (u, 0.5);
    }
    // continuity correction toward the null
    let z = (u - mean - 0.5) / var.sqrt();
    (u, 1.0 - std_normal().cdf(z))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilson_matches_textbook() {
        // 81 of 263 at 95%: (0.2553, 0.3662)
        let (lo, hi) = wilson_interval(81, 263, 1.959964);
        assert!((lo - 0.2553).abs() < 5e-4 && (hi - 0.3662).abs() < 5e-4, "{lo} {hi}");
        assert_eq!(wilson_interval(0, 0, 1.96), (0.0, 1.0));
    }

    #[test]
    fn z_test_direction() {
        let (z, p) = two_proportion_z_test(190, 200, 150, 200);
        assert!(z > 5.0 && p < 1e-6);
        let (_, p) = two_proportion_z_test(150, 200, 190, 200);
        assert!(p > 0.99);
    }

    #[test]
    fn rank_test_detects_shift() {
        let a: Vec<f64> = (0..40).map(|i| i as f64 + 10.0).collect();
        let b: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let (u, p) = mann_whitney_greater(&a, &b);
        assert!(u > 800.0 && p < 0.05);
        assert!(mann_whitney_greater(&b, &a).1 > 0.95);
        // identical samples
        assert!(mann_whitney_greater(&b, &b).1 > 0.4);
    }
}
