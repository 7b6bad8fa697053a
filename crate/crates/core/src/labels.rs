//! State label ordering and alignment.
//!
//! Permutations are written `perm[new] = old`.

use nalgebra::DVector;

/// Order that sorts states ascending by their first mean coordinate. Ties keep
/// the original order.
pub fn order_by_first_mean(means: &[DVector<f64>]) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..means.len()).collect();
    perm.sort_by(|&a, &b| means[a][0].total_cmp(&means[b][0]));
    perm
}

/// Permutation `perm` minimizing `Σ_u ‖reference[u] − means[perm[u]]‖²`,
/// found exactly by dynamic programming over subsets. Ties resolve toward the
/// lexicographically smallest assignment.
pub fn align_to_reference(reference: &[DVector<f64>], means: &[DVector<f64>]) -> Vec<usize> {
    let k = reference.len();
    assert_eq!(k, means.len(), "alignment needs equal state counts");
    assert!(k <= 20, "alignment limited to 20 states");
    let cost: Vec<Vec<f64>> = reference
        .iter()
        .map(|r| means.iter().map(|m| (r - m).norm_squared()).collect())
        .collect();
    let full = 1usize << k;
    // best[mask]: minimal cost of assigning the last states to `mask`
    // (states u = k − popcount(mask) .. k−1 use exactly the columns in mask)
    let mut best = vec![f64::INFINITY; full];
    best[0] = 0.0;
    for mask in 1..full {
        let u = k - mask.count_ones() as usize;
        let mut b = f64::INFINITY;
        for j in 0..k {
            if mask & (1 << j) != 0 {
                let c = cost[u][j] + best[mask ^ (1 << j)];
                if c < b {
                    b = c;
                }
            }
        }
        best[mask] = b;
    }
    let mut perm = Vec::with_capacity(k);
    let mut mask = full - 1;
    for u in 0..k {
        let target = best[mask];
        let mut chosen = None;
        for j in 0..k {
            if mask & (1 << j) != 0 && cost[u][j] + best[mask ^ (1 << j)] <= target {
                chosen = Some(j);
                break;
            }
        }
        let j = chosen.expect("assignment exists");
        perm.push(j);
        mask ^= 1 << j;
    }
    perm
}

/// True when `perm` is a bijection of `0..perm.len()`.
pub fn is_permutation(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(x)
    }

    #[test]
    fn sorts_by_first_coordinate() {
        let means = vec![v(&[2.0, 0.0]), v(&[-1.0, 5.0]), v(&[0.5, 1.0])];
        assert_eq!(order_by_first_mean(&means), vec![1, 2, 0]);
    }

    #[test]
    fn recovers_a_shuffle() {
        let reference = vec![v(&[0.0, 0.0]), v(&[5.0, 0.0]), v(&[0.0, 5.0])];
        let shuffled = vec![v(&[0.1, 5.1]), v(&[-0.1, 0.0]), v(&[4.9, 0.2])];
        assert_eq!(align_to_reference(&reference, &shuffled), vec![1, 2, 0]);
    }

    fn brute_force(reference: &[DVector<f64>], means: &[DVector<f64>]) -> f64 {
        fn rec(u: usize, used: &mut Vec<bool>, acc: f64, r: &[DVector<f64>], m: &[DVector<f64>], best: &mut f64) {
            if u == r.len() {
                *best = best.min(acc);
                return;
            }
            for j in 0..m.len() {
                if !used[j] {
                    used[j] = true;
                    rec(u + 1, used, acc + (&r[u] - &m[j]).norm_squared(), r, m, best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(0, &mut vec![false; means.len()], 0.0, reference, means, &mut best);
        best
    }

    proptest! {
        #[test]
        fn alignment_is_an_optimal_bijection(
            pts in (1usize..6).prop_flat_map(|k| (
                proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 2), k),
                proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 2), k),
            ))
        ) {
            let reference: Vec<_> = pts.0.iter().map(|x| v(x)).collect();
            let means: Vec<_> = pts.1.iter().map(|x| v(x)).collect();
            let perm = align_to_reference(&reference, &means);
            prop_assert!(is_permutation(&perm));
            let cost: f64 = (0..perm.len()).map(|u| (&reference[u] - &means[perm[u]]).norm_squared()).sum();
            prop_assert!((cost - brute_force(&reference, &means)).abs() < 1e-9);
        }
    }
}
