use smoothseg::metrics::{wilcoxon_signed_rank, WilcoxonMethod};
use smoothseg::rng::SplitMix64;
use smoothseg::Error;

/// Two-sided p by listing every sign assignment of the average ranks.
fn brute_force(diffs: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = diffs.iter().copied().filter(|v| *v != 0.0).collect();
    let n = d.len();
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks: Vec<f64> = abs
        .iter()
        .map(|a| {
            let less = abs.iter().filter(|b| *b < a).count() as f64;
            let equal = abs.iter().filter(|b| *b == a).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect();
    let total: f64 = ranks.iter().sum();
    let w_plus: f64 = ranks.iter().zip(&d).filter(|(_, v)| **v > 0.0).map(|(r, _)| r).sum();
    let w = w_plus.min(total - w_plus);
    let mut tail = 0u64;
    for signs in 0u64..(1 << n) {
        let s: f64 = (0..n).filter(|i| signs >> i & 1 == 1).map(|i| ranks[i]).sum();
        if s <= w {
            tail += 1;
        }
    }
    (w, ((2 * tail) as f64 / (1u64 << n) as f64).min(1.0))
}

#[test]
fn exact_branch_matches_enumeration_for_small_n() {
    let mut rng = SplitMix64::new(10);
    let mut instances = 0;
    for n in 5..=10 {
        for trial in 0..200 {
            // small integer supports force ties; a few zeros are dropped
            let support = [3, 6, 1000][trial % 3];
            let mut a = Vec::new();
            let mut b = Vec::new();
            while a.iter().zip(&b).filter(|(x, y)| x != y).count() < n {
                let x = rng.below(support) as f64;
                let y = rng.below(support) as f64;
                if x == y && rng.next_f64() < 0.7 {
                    continue;
                }
                a.push(x);
                b.push(y);
            }
            let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            let (w, p) = brute_force(&diffs);
            let r = wilcoxon_signed_rank(&a, &b).unwrap();
            assert_eq!(r.method, WilcoxonMethod::Exact);
            assert_eq!(r.n, n);
            assert_eq!(r.statistic, w, "{diffs:?}");
            assert_eq!(r.p_two_sided, p, "{diffs:?}");
            instances += 1;
        }
    }
    assert_eq!(instances, 1200);
}

#[test]
fn all_positive_six() {
    let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let r = wilcoxon_signed_rank(&a, &[0.0; 6]).unwrap();
    assert_eq!(r.statistic, 0.0);
    assert_eq!(r.p_two_sided, 0.03125);
}

#[test]
fn identical_samples_are_degenerate() {
    let a = [0.3, 0.1, 0.9, 0.4, 0.4, 0.2];
    assert!(matches!(wilcoxon_signed_rank(&a, &a), Err(Error::DegenerateTest(_))));
}

#[test]
fn large_n_uses_normal_approximation() {
    let a: Vec<f64> = (0..40).map(|i| i as f64 + 0.5).collect();
    let b: Vec<f64> = (0..40).map(|i| if i % 2 == 0 { 2.0 * i as f64 } else { 0.0 }).collect();
    let r = wilcoxon_signed_rank(&a, &b).unwrap();
    assert_eq!(r.method, WilcoxonMethod::NormalApprox);
    assert!(r.p_two_sided > 0.0 && r.p_two_sided <= 1.0);
}
