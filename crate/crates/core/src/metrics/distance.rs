//! Distribution distances: total variation, one-dimensional Wasserstein,
//! and histogrammed Kullback–Leibler divergence.

use crate::{EquimolError, Result};

/// Total variation distance Σ_i |p_i − q_i| between two probability
/// vectors. Different lengths are aligned on the union of their supports,
/// with missing entries treated as zero mass.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    let len = p.len().max(q.len());
    (0..len)
        .map(|i| {
            let a = p.get(i).copied().unwrap_or(0.0);
            let b = q.get(i).copied().unwrap_or(0.0);
            (a - b).abs()
        })
        .sum()
}

/// Exact 1-d Wasserstein-1 distance between two empirical distributions,
/// via the integrated absolute difference of their step CDFs. Returns
/// `None` when either sample list is empty or contains a non-finite value.
pub fn wasserstein1_1d(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return None;
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let mut xs: Vec<f64> = sa.iter().chain(sb.iter()).copied().collect();
    xs.sort_by(|x, y| x.partial_cmp(y).unwrap());
    xs.dedup();

    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    let mut ia = 0;
    let mut ib = 0;
    let mut w1 = 0.0;
    for k in 0..xs.len().saturating_sub(1) {
        let x = xs[k];
        while ia < sa.len() && sa[ia] <= x {
            ia += 1;
        }
        while ib < sb.len() && sb[ib] <= x {
            ib += 1;
        }
        let gap = (ia as f64 / na - ib as f64 / nb).abs();
        w1 += gap * (xs[k + 1] - x);
    }
    Some(w1)
}

/// Number of histogram bins used by the descriptor KL similarity.
pub const KL_BINS: usize = 50;
/// Additive smoothing applied to every histogram bin.
pub const KL_SMOOTHING: f64 = 1e-8;

/// KL(generated ‖ reference) over histograms with `bins` uniform bins
/// spanning the *reference* range. Out-of-range generated values are
/// clamped into the edge bins so their mass still counts; a degenerate
/// reference range widens to a unit interval around the single value.
/// Both histograms receive `smoothing` additive mass per bin.
pub fn histogram_kl(
    generated: &[f64],
    reference: &[f64],
    bins: usize,
    smoothing: f64,
) -> Result<f64> {
    if generated.is_empty() || reference.is_empty() || bins == 0 {
        return Err(EquimolError::Contract(
            "histogram KL needs non-empty samples and at least one bin".into(),
        ));
    }
    if generated.iter().chain(reference).any(|x| !x.is_finite()) {
        return Err(EquimolError::Numerical(
            "histogram KL given a non-finite descriptor value".into(),
        ));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &x in reference {
        lo = lo.min(x);
        hi = hi.max(x);
    }
    if !(hi > lo) {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let bin_of = |x: f64| -> usize {
        let raw = ((x - lo) / width).floor();
        if raw < 0.0 {
            0
        } else {
            (raw as usize).min(bins - 1)
        }
    };
    let histogram = |values: &[f64]| -> Vec<f64> {
        let mut counts = vec![0.0f64; bins];
        for &x in values {
            counts[bin_of(x)] += 1.0;
        }
        let total = values.len() as f64 + smoothing * bins as f64;
        counts.iter().map(|c| (c + smoothing) / total).collect()
    };
    let pg = histogram(generated);
    let pr = histogram(reference);
    Ok(pg
        .iter()
        .zip(&pr)
        .map(|(&g, &r)| if g > 0.0 { g * (g / r).ln() } else { 0.0 })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn tv_endpoints_and_alignment() {
        assert_eq!(tv_distance(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        // Disjoint one-hots are at the maximum l1 distance of 2.
        assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]), 2.0);
        assert_eq!(tv_distance(&[0.5, 0.5], &[1.0, 0.0]), 1.0);
        // Union alignment pads the shorter vector with zero mass.
        assert_eq!(tv_distance(&[1.0], &[0.0, 1.0]), 2.0);
        assert_eq!(tv_distance(&[0.5, 0.5], &[0.5, 0.25, 0.25]), 0.5);
    }

    #[test]
    fn w1_point_masses_and_identity() {
        // Point masses transport over the full gap.
        assert_eq!(wasserstein1_1d(&[1.0], &[4.0]), Some(3.0));
        let xs = [0.5, -1.25, 3.0, 3.0];
        assert_eq!(wasserstein1_1d(&xs, &xs), Some(0.0));
        assert_eq!(wasserstein1_1d(&[], &[1.0]), None);
        assert_eq!(wasserstein1_1d(&[1.0], &[]), None);
        assert_eq!(wasserstein1_1d(&[f64::NAN], &[1.0]), None);
    }

    /// Brute-force optimal transport for equal-size samples: with uniform
    /// weights the LP optimum is the best assignment, found by trying every
    /// permutation.
    fn assignment_oracle(a: &[f64], b: &[f64]) -> f64 {
        assert_eq!(a.len(), b.len());
        let n = a.len();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut best = f64::INFINITY;
        // Heap's algorithm, iterative.
        let mut c = vec![0usize; n];
        let cost = |p: &[usize]| -> f64 {
            p.iter()
                .enumerate()
                .map(|(i, &j)| (a[i] - b[j]).abs())
                .sum::<f64>()
                / n as f64
        };
        best = best.min(cost(&perm));
        let mut i = 0;
        while i < n {
            if c[i] < i {
                if i % 2 == 0 {
                    perm.swap(0, i);
                } else {
                    perm.swap(c[i], i);
                }
                best = best.min(cost(&perm));
                c[i] += 1;
                i = 0;
            } else {
                c[i] = 0;
                i += 1;
            }
        }
        best
    }

    #[test]
    fn w1_matches_the_brute_force_transport_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(2024);
        for rep in 0..30 {
            let n = 2 + rep % 5; // up to 6 points: 720 permutations
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let fast = wasserstein1_1d(&a, &b).unwrap();
            let oracle = assignment_oracle(&a, &b);
            assert!(
                (fast - oracle).abs() < 1e-9,
                "rep {rep}: cdf {fast} vs oracle {oracle}"
            );
        }
    }

    /// Quantile-coupling oracle for unequal sample counts: expand both
    /// samples to lcm(n, m) equal-mass points and pair them in sorted order
    /// (the optimal monotone coupling on the line).
    fn quantile_oracle(a: &[f64], b: &[f64]) -> f64 {
        fn gcd(x: usize, y: usize) -> usize {
            if y == 0 {
                x
            } else {
                gcd(y, x % y)
            }
        }
        let l = a.len() / gcd(a.len(), b.len()) * b.len();
        let expand = |s: &[f64]| -> Vec<f64> {
            let mut v: Vec<f64> = s
                .iter()
                .flat_map(|&x| std::iter::repeat(x).take(l / s.len()))
                .collect();
            v.sort_by(|x, y| x.partial_cmp(y).unwrap());
            v
        };
        let ea = expand(a);
        let eb = expand(b);
        ea.iter()
            .zip(&eb)
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / l as f64
    }

    #[test]
    fn w1_handles_unequal_sample_counts() {
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        for rep in 0..30 {
            let n = 1 + rng.gen_range(0..8usize);
            let m = 1 + rng.gen_range(0..8usize);
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..m).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let fast = wasserstein1_1d(&a, &b).unwrap();
            let oracle = quantile_oracle(&a, &b);
            assert!(
                (fast - oracle).abs() < 1e-9,
                "rep {rep} (n={n}, m={m}): {fast} vs {oracle}"
            );
        }
    }

    #[test]
    fn distances_are_symmetric_and_triangular() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..25 {
            // Random probability triples for TV.
            let simplex = |rng: &mut ChaCha20Rng| -> Vec<f64> {
                let raw: Vec<f64> = (0..4).map(|_| rng.gen_range(0.01..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|x| x / s).collect()
            };
            let (p, q, r) = (simplex(&mut rng), simplex(&mut rng), simplex(&mut rng));
            assert!((tv_distance(&p, &q) - tv_distance(&q, &p)).abs() < 1e-15);
            assert!(tv_distance(&p, &r) <= tv_distance(&p, &q) + tv_distance(&q, &r) + 1e-12);

            let sample = |rng: &mut ChaCha20Rng| -> Vec<f64> {
                let n = 1 + rng.gen_range(0..6usize);
                (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
            };
            let (a, b, c) = (sample(&mut rng), sample(&mut rng), sample(&mut rng));
            let ab = wasserstein1_1d(&a, &b).unwrap();
            let ba = wasserstein1_1d(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-12);
            let ac = wasserstein1_1d(&a, &c).unwrap();
            let cb = wasserstein1_1d(&c, &b).unwrap();
            assert!(ab <= ac + cb + 1e-12);
        }
    }

    #[test]
    fn histogram_kl_matches_a_hand_computation() {
        // Two bins over the reference range [0, 2): reference splits 2/2,
        // generated splits 3/1. Smoothing 0 keeps the arithmetic exact.
        let reference = [0.0, 0.5, 1.5, 1.9];
        let generated = [0.1, 0.2, 0.3, 1.1];
        let kl = histogram_kl(&generated, &reference, 2, 0.0).unwrap();
        let expect = 0.75 * (0.75f64 / 0.5).ln() + 0.25 * (0.25f64 / 0.5).ln();
        assert!((kl - expect).abs() < 1e-12);

        // Identical samples have zero divergence, hence similarity 1.
        let same = histogram_kl(&reference, &reference, 50, KL_SMOOTHING).unwrap();
        assert!(same.abs() < 1e-12);

        // Values outside the reference range clamp into the edge bins.
        let clamped = histogram_kl(&[-100.0, 100.0], &reference, 2, 0.0).unwrap();
        let expect = 0.5 * (0.5f64 / 0.5).ln() + 0.5 * (0.5f64 / 0.5).ln();
        assert!((clamped - expect).abs() < 1e-12);

        // A degenerate reference range still bins sensibly.
        let degen = histogram_kl(&[3.0, 3.0], &[3.0], 50, KL_SMOOTHING).unwrap();
        assert!(degen.abs() < 1e-6);

        assert!(histogram_kl(&[], &reference, 2, 0.0).is_err());
        assert!(histogram_kl(&generated, &[], 2, 0.0).is_err());
    }
}
