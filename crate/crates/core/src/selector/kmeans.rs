use rand::Rng;

use super::{Result, SelectError};
use crate::graph::EmbeddingTable;
use crate::seed;

/// Result of Lloyd's algorithm.
#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub centers: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step, first entry from the seeding.
    pub inertia_trace: Vec<f64>,
}

impl Clustering {
    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn center_of(&self, point: usize) -> &[f64] {
        &self.centers[self.assignment[point]]
    }
}

pub(crate) fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y;
            d * d
        })
        .sum()
}

/// Nearest center per point (ties → lowest center index) and total inertia.
fn assign(emb: &EmbeddingTable, centers: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    (0..emb.count())
        .map(|i| {
            let row = emb.row(i);
            let mut best = (0, f64::INFINITY);
            for (c, center) in centers.iter().enumerate() {
                let d = sq_dist(row, center);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .unzip()
}

fn plus_plus_init(emb: &EmbeddingTable, k: usize, seed: u64) -> Vec<Vec<f64>> {
    let n = emb.count();
    let mut rng = seed::rng(seed, "kmeans/init");
    let to_f64 = |i: usize| emb.row(i).iter().map(|&v| v as f64).collect::<Vec<f64>>();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(emb.row(i), &to_f64(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            // rounding can walk past the last positive weight
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&d| d > 0.0).expect("positive total");
            }
            pick
        } else {
            // every remaining point duplicates a center; take the first unused index
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        let c = to_f64(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(emb.row(i), &c));
        }
    }
    chosen.into_iter().map(to_f64).collect()
}

/// Lloyd's algorithm with k-means++ seeding. Stops when assignments stop
/// changing or after `max_iter` center updates. A cluster that loses all
/// its points is re-seeded at the point farthest from its own center.
pub fn kmeans(emb: &EmbeddingTable, k: usize, max_iter: usize, seed: u64) -> Result<Clustering> {
    let n = emb.count();
    if k == 0 || k > n {
        return Err(SelectError::TooManyClusters { k, points: n });
    }
    let dim = emb.dim();
    let mut centers = plus_plus_init(emb, k, seed);
    let (mut assignment, mut dists) = assign(emb, &centers);
    let mut trace = vec![dists.iter().sum::<f64>()];

    for _ in 0..max_iter {
        let mut sums = vec![vec![0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, &v) in sums[c].iter_mut().zip(emb.row(i)) {
                *s += v as f64;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("n >= 1");
                centers[c] = emb.row(far).iter().map(|&v| v as f64).collect();
                dists[far] = 0.0;
            }
        }
        let (next, next_d) = assign(emb, &centers);
        trace.push(next_d.iter().sum());
        dists = next_d;
        if next == assignment {
            break;
        }
        assignment = next;
    }
    let inertia = dists.iter().sum();
    Ok(Clustering {
        centers,
        assignment,
        inertia,
        inertia_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(rows: &[Vec<f32>]) -> EmbeddingTable {
        EmbeddingTable::from_rows(rows, "test").unwrap()
    }

    /// Minimum SSE over every 2-partition of the points.
    fn best_two_partition(points: &[f32]) -> f64 {
        let n = points.len();
        let mut best = f64::INFINITY;
        for mask in 1u32..(1 << n) - 1 {
            let sse = |inside: bool| {
                let members: Vec<f64> = (0..n)
                    .filter(|&i| ((mask >> i) & 1 == 1) == inside)
                    .map(|i| points[i] as f64)
                    .collect();
                let mean = members.iter().sum::<f64>() / members.len() as f64;
                members.iter().map(|x| (x - mean).powi(2)).sum::<f64>()
            };
            best = best.min(sse(true) + sse(false));
        }
        best
    }

    #[test]
    fn one_dimensional_pairs() {
        let pts = [0.0f32, 1.0, 10.0, 11.0];
        let emb = table(&pts.iter().map(|&p| vec![p]).collect::<Vec<_>>());
        let c = kmeans(&emb, 2, 100, 4).unwrap();
        let mut centers: Vec<f64> = c.centers.iter().map(|v| v[0]).collect();
        centers.sort_by(f64::total_cmp);
        assert_eq!(centers, vec![0.5, 10.5]);
        assert!((c.inertia - best_two_partition(&pts)).abs() < 1e-9);
    }

    #[test]
    fn k_equals_count_is_degenerate() {
        let emb = table(&[vec![0.0, 1.0], vec![2.0, 3.0], vec![-1.0, 5.0]]);
        let c = kmeans(&emb, 3, 100, 0).unwrap();
        assert_eq!(c.inertia, 0.0);
        let mut used = c.assignment.clone();
        used.sort_unstable();
        assert_eq!(used, vec![0, 1, 2]);
    }

    #[test]
    fn too_many_clusters() {
        let emb = table(&[vec![0.0]]);
        assert!(matches!(kmeans(&emb, 2, 10, 0), Err(SelectError::TooManyClusters { .. })));
    }

    #[test]
    fn deterministic_given_seed() {
        let rows: Vec<Vec<f32>> = (0..60).map(|i| vec![(i * 37 % 17) as f32, (i % 7) as f32]).collect();
        let emb = table(&rows);
        assert_eq!(kmeans(&emb, 5, 100, 3).unwrap(), kmeans(&emb, 5, 100, 3).unwrap());
    }

    proptest! {
        #[test]
        fn inertia_never_increases_and_assignment_is_nearest(
            rows in proptest::collection::vec(proptest::collection::vec(-5.0f32..5.0, 3), 4..60),
            k in 1usize..6,
            seed in 0u64..1000,
        ) {
            let k = k.min(rows.len());
            let emb = table(&rows);
            let c = kmeans(&emb, k, 100, seed).unwrap();
            for w in c.inertia_trace.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0));
            }
            for (i, &a) in c.assignment.iter().enumerate() {
                let d = sq_dist(emb.row(i), &c.centers[a]);
                for (j, center) in c.centers.iter().enumerate() {
                    let dj = sq_dist(emb.row(i), center);
                    prop_assert!(d < dj || (d == dj && a <= j) || d < dj + 1e-12);
                }
            }
        }
    }
}
