use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest effective sample size that gets an exact p-value.
pub const EXACT_MAX_N: usize = 25;
const MIN_N: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    NormalApprox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Pairs with a nonzero difference.
    pub n_effective: usize,
    /// `min(W+, W-)`.
    pub statistic: f64,
    /// Two-sided.
    pub p_value: f64,
    pub method: WilcoxonMethod,
}

/// Average ranks of `|d|`, doubled so ties stay integral.
fn doubled_ranks(abs: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..abs.len()).collect();
    order.sort_by(|&i, &j| abs[i].total_cmp(&abs[j]));
    let mut ranks = vec![0; abs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && abs[order[j + 1]] == abs[order[i]] {
            j += 1;
        }
        // Positions i..=j share rank (i+1 + j+1)/2.
        let r2 = (i + j + 2) as u64;
        for &k in &order[i..=j] {
            ranks[k] = r2;
        }
        i = j + 1;
    }
    ranks
}

/// `P(W+ ≤ w2/2)` under the null, counting sign patterns over the given
/// doubled ranks.
fn exact_lower_tail(ranks2: &[u64], w2: u64) -> f64 {
    let total: u64 = ranks2.iter().sum();
    let mut ways = vec![0f64; total as usize + 1];
    ways[0] = 1.0;
    let mut reach = 0usize;
    for &r in ranks2 {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if ways[s] > 0.0 {
                ways[s + r] += ways[s];
            }
        }
        reach += r;
    }
    let hits: f64 = ways[..=(w2 as usize).min(reach)].iter().sum();
    hits / 2f64.powi(ranks2.len() as i32)
}

fn exact_p(ranks2: &[u64], w2: u64) -> f64 {
    (2.0 * exact_lower_tail(ranks2, w2)).min(1.0)
}

fn normal_p(ranks2: &[u64], w: f64) -> f64 {
    let n = ranks2.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut sorted = ranks2.to_vec();
    sorted.sort_unstable();
    let ties: f64 = sorted
        .chunk_by(|a, b| a == b)
        .map(|g| {
            let t = g.len() as f64;
            t * t * t - t
        })
        .sum();
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - ties / 48.0;
    let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    (2.0 * std.cdf(-z)).min(1.0)
}

/// Two-sided paired signed-rank test on `a[i] - b[i]`. Zero differences
/// are dropped; ties share average ranks.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "wilcoxon",
            left: a.len().to_string(),
            right: b.len().to_string(),
        });
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::contract("wilcoxon", "non-finite score"));
    }
    let diffs: Vec<f64> = diffs.into_iter().filter(|&d| d != 0.0).collect();
    if diffs.is_empty() {
        return Err(Error::DegeneratePairing);
    }
    if diffs.len() < MIN_N {
        return Err(Error::TooFewSamples {
            needed: MIN_N,
            got: diffs.len(),
        });
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks2 = doubled_ranks(&abs);
    let plus2: u64 = ranks2.iter().zip(&diffs).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();
    let total2: u64 = ranks2.iter().sum();
    let w2 = plus2.min(total2 - plus2);
    let w = w2 as f64 / 2.0;
    let n = diffs.len();
    let (p_value, method) = if n <= EXACT_MAX_N {
        (exact_p(&ranks2, w2), WilcoxonMethod::Exact)
    } else {
        (normal_p(&ranks2, w), WilcoxonMethod::NormalApprox)
    };
    Ok(WilcoxonResult {
        n_effective: n,
        statistic: w,
        p_value,
        method,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn six_positive_differences() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let r = wilcoxon_signed_rank(&a, &[0.0; 6]).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 0.03125);
        assert_eq!(r.method, WilcoxonMethod::Exact);
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(doubled_ranks(&[3.0, 1.0, 3.0, 2.0, 3.0]), [8, 2, 8, 4, 8]);
    }

    #[test]
    fn degenerate_and_small_inputs() {
        let a = [0.4, 0.5, 0.6, 0.7, 0.8];
        assert!(matches!(wilcoxon_signed_rank(&a, &a), Err(Error::DegeneratePairing)));
        let b = [0.4, 0.5, 0.6, 0.7, 0.9];
        assert!(matches!(wilcoxon_signed_rank(&a, &b), Err(Error::TooFewSamples { .. })));
        assert!(wilcoxon_signed_rank(&a, &b[..4]).is_err());
    }

    #[test]
    fn zero_differences_are_dropped() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        let b = [0.0, 0.0, 0.0, 0.0, 0.0, 6.0, 7.0];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.n_effective, 5);
        assert_eq!(r.p_value, 0.0625);
    }

    #[test]
    fn paths_agree_at_the_cutoff() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let shift = rng.random_range(-0.5..0.5);
            let d: Vec<f64> = (0..EXACT_MAX_N).map(|_| rng.random_range(-1.0..1.0) + shift).collect();
            let abs: Vec<f64> = d.iter().map(|x: &f64| x.abs()).collect();
            let ranks2 = doubled_ranks(&abs);
            let plus2: u64 = ranks2.iter().zip(&d).filter(|(_, x)| **x > 0.0).map(|(r, _)| r).sum();
            let w2 = plus2.min(ranks2.iter().sum::<u64>() - plus2);
            let (e, n) = (exact_p(&ranks2, w2), normal_p(&ranks2, w2 as f64 / 2.0));
            assert!((e - n).abs() < 0.02, "exact {e} normal {n}");
        }
    }

    #[test]
    fn large_samples_use_the_approximation() {
        let a: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..40).map(|i| i as f64 + if i % 3 == 0 { 0.5 } else { -0.25 }).collect();
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.method, WilcoxonMethod::NormalApprox);
        assert!((0.0..=1.0).contains(&r.p_value));
    }
}
