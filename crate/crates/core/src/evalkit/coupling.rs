use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::EvalError;
use crate::tensor::Tensor;

/// Largest set size accepted by the optimal pairing.
pub const MAX_OPTIMAL: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pairing {
    /// Index-aligned pairs.
    Paired,
    /// A seeded uniformly random permutation.
    Random(u64),
    /// Minimum-cost assignment.
    Optimal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Norm {
    /// Mean absolute difference.
    L1,
    /// Root mean squared difference.
    L2,
}

impl Norm {
    pub fn name(self) -> &'static str {
        match self {
            Norm::L1 => "l1",
            Norm::L2 => "l2",
        }
    }

    fn distance(self, a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
        let n = a.numel() as f64;
        let diffs = a.data().iter().zip(b.data()).map(|(&x, &y)| f64::from(x) - f64::from(y));
        match self {
            Norm::L1 => diffs.map(f64::abs).sum::<f64>() / n,
            Norm::L2 => (diffs.map(|d| d * d).sum::<f64>() / n).sqrt(),
        }
    }
}

/// Mean per-element-normalised distance between `x0s[i]` and `x1s[pi(i)]`
/// for the chosen pairing `pi`.
pub fn coupling_cost(x0s: &[Tensor<f32>], x1s: &[Tensor<f32>], pairing: Pairing, norm: Norm) -> Result<f64, EvalError> {
    let n = x0s.len();
    if n != x1s.len() {
        return Err(EvalError::SizeMismatch(n, x1s.len()));
    }
    if n == 0 {
        return Ok(0.0);
    }
    if let Some(bad) = x0s.iter().chain(x1s).find(|t| t.shape() != x0s[0].shape()) {
        return Err(EvalError::ShapeMismatch(format!("{:?} vs {:?}", bad.shape(), x0s[0].shape())));
    }
    let perm: Vec<usize> = match pairing {
        Pairing::Paired => (0..n).collect(),
        Pairing::Random(seed) => {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            p
        }
        Pairing::Optimal => {
            if n > MAX_OPTIMAL {
                return Err(EvalError::TooLargeForOptimal(n));
            }
            let cost: Vec<Vec<f64>> = x0s.iter().map(|a| x1s.iter().map(|b| norm.distance(a, b)).collect()).collect();
            let (total, _) = hungarian(&cost);
            return Ok(total / n as f64);
        }
    };
    Ok(x0s.iter().zip(&perm).map(|(a, &j)| norm.distance(a, &x1s[j])).sum::<f64>() / n as f64)
}

/// Minimum-cost perfect matching on a square matrix (potentials method,
/// O(n^3)). Returns the total, summed in row order, and `assign[row] = col`.
pub fn hungarian(cost: &[Vec<f64>]) -> (f64, Vec<usize>) {
    let n = cost.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    assert!(cost.iter().all(|r| r.len() == n), "cost matrix must be square");
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    // p[j]: row matched to column j (1-based, 0 = none)
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    let total = assign.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    (total, assign)
}

/// Exhaustive minimum over all permutations (Heap's algorithm); for testing.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> (f64, Vec<usize>) {
    let n = cost.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let eval = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>();
    let mut best = (eval(&perm), perm.clone());
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            let total = eval(&perm);
            if total < best.0 {
                best = (total, perm.clone());
            }
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn scalars(v: &[f32]) -> Vec<Tensor<f32>> {
        v.iter().map(|&x| Tensor::scalar(x)).collect()
    }

    #[test]
    fn identical_sets_cost_nothing_when_paired() {
        let xs = scalars(&[0.3, -1.0, 2.0]);
        assert_eq!(coupling_cost(&xs, &xs, Pairing::Paired, Norm::L2).unwrap(), 0.0);
    }

    #[test]
    fn two_element_example() {
        let xs = scalars(&[0.0, 1.0]);
        let swapped = scalars(&[1.0, 0.0]);
        assert_eq!(coupling_cost(&xs, &xs, Pairing::Paired, Norm::L1).unwrap(), 0.0);
        assert_eq!(coupling_cost(&xs, &swapped, Pairing::Paired, Norm::L1).unwrap(), 1.0);
        assert_eq!(coupling_cost(&xs, &swapped, Pairing::Optimal, Norm::L1).unwrap(), 0.0);
    }

    #[test]
    fn errors() {
        let xs = scalars(&[0.0; 65]);
        assert!(matches!(coupling_cost(&xs, &xs[..3], Pairing::Paired, Norm::L1), Err(EvalError::SizeMismatch(65, 3))));
        assert!(matches!(coupling_cost(&xs, &xs, Pairing::Optimal, Norm::L1), Err(EvalError::TooLargeForOptimal(65))));
        assert!(coupling_cost(&xs, &xs, Pairing::Random(1), Norm::L1).is_ok());
    }

    #[test]
    fn norms_are_per_element() {
        let a = vec![Tensor::new(vec![4], vec![1.0f32, 1.0, 1.0, 1.0]).unwrap()];
        let b = vec![Tensor::new(vec![4], vec![0.0f32, 0.0, 0.0, 3.0]).unwrap()];
        assert_eq!(coupling_cost(&a, &b, Pairing::Paired, Norm::L1).unwrap(), 1.25);
        assert_eq!(coupling_cost(&a, &b, Pairing::Paired, Norm::L2).unwrap(), (7.0f64 / 4.0).sqrt());
    }

    #[test]
    fn hungarian_equals_brute_force_on_eight() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let cost: Vec<Vec<f64>> = (0..8).map(|_| (0..8).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
            assert_eq!(hungarian(&cost), brute_force_assignment(&cost));
        }
    }

    proptest! {
        #[test]
        fn optimal_never_exceeds_any_pairing(v0 in proptest::collection::vec(-3.0f32..3.0, 2..12), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v1: Vec<f32> = v0.iter().map(|_| rng.random_range(-3.0..3.0)).collect();
            let (a, b) = (scalars(&v0), scalars(&v1));
            for norm in [Norm::L1, Norm::L2] {
                let opt = coupling_cost(&a, &b, Pairing::Optimal, norm).unwrap();
                prop_assert!(opt <= coupling_cost(&a, &b, Pairing::Paired, norm).unwrap() + 1e-12);
                prop_assert!(opt <= coupling_cost(&a, &b, Pairing::Random(seed), norm).unwrap() + 1e-12);
            }
        }
    }
}
