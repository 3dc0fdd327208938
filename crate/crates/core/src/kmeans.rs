//! Seeded Lloyd's k-means with k-means++ seeding and empty-cluster repair.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after every Lloyd update, first entry after the first update.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.centroids.len()];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }

    /// Point indices per cluster, ascending.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        groups_of(&self.assignment, self.centroids.len())
    }
}

pub(crate) fn groups_of(assignment: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); k];
    for (i, &a) in assignment.iter().enumerate() {
        groups[a].push(i);
    }
    groups
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.iter().enumerate() {
        let d = sq_dist(p, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

pub fn inertia<P: AsRef<[f64]>>(points: &[P], assignment: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(assignment)
        .map(|(p, &a)| sq_dist(p.as_ref(), &centroids[a]))
        .sum()
}

fn plus_plus_init<P: AsRef<[f64]>>(points: &[P], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].as_ref().to_vec()];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(p.as_ref(), &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            while d2[pick] == 0.0 {
                pick -= 1;
            }
            pick
        } else {
            // Fewer distinct locations than clusters: take any unused point.
            let unused: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            unused[rng.random_range(0..unused.len())]
        };
        chosen[pick] = true;
        let c = points[pick].as_ref().to_vec();
        for (i, p) in points.iter().enumerate() {
            d2[i] = libm::fmin(d2[i], sq_dist(p.as_ref(), &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Moves the point farthest from its centroid into each empty cluster.
fn repair_empty<P: AsRef<[f64]>>(points: &[P], assignment: &mut [usize], centroids: &mut [Vec<f64>]) {
    let k = centroids.len();
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assignment.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let mut far = None;
        let mut far_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            if sizes[assignment[i]] < 2 {
                continue;
            }
            let d = sq_dist(p.as_ref(), &centroids[assignment[i]]);
            if d > far_d {
                far_d = d;
                far = Some(i);
            }
        }
        let i = far.expect("more points than clusters");
        assignment[i] = empty;
        centroids[empty] = points[i].as_ref().to_vec();
    }
}

fn update_centroids<P: AsRef<[f64]>>(points: &[P], assignment: &[usize], centroids: &mut [Vec<f64>]) {
    let dim = centroids[0].len();
    let mut sums = vec![vec![0.0; dim]; centroids.len()];
    let mut counts = vec![0usize; centroids.len()];
    for (p, &a) in points.iter().zip(assignment) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p.as_ref()) {
            *s += v;
        }
    }
    for ((c, s), &n) in centroids.iter_mut().zip(sums).zip(&counts) {
        if n > 0 {
            for (ci, si) in c.iter_mut().zip(s) {
                *ci = si / n as f64;
            }
        }
    }
}

/// Clusters `points` into `k` non-empty groups. Deterministic given `seed`.
pub fn kmeans<P: AsRef<[f64]>>(points: &[P], k: usize, seed: u64, max_iter: usize) -> Result<KMeansResult> {
    if k == 0 {
        return Err(Error::Input("k-means needs at least one cluster".into()));
    }
    if points.len() < k {
        return Err(Error::Input(alloc::format!(
            "k-means needs at least {k} points, got {}",
            points.len()
        )));
    }
    let dim = points[0].as_ref().len();
    if dim == 0 || points.iter().any(|p| p.as_ref().len() != dim) {
        return Err(Error::Input("k-means points must share a positive dimension".into()));
    }
    if points.iter().any(|p| p.as_ref().iter().any(|v| !v.is_finite())) {
        return Err(Error::Input("k-means points must be finite".into()));
    }

    let mut rng = seeded(seed);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut assignment: Vec<usize> = points.iter().map(|p| nearest(p.as_ref(), &centroids).0).collect();
    repair_empty(points, &mut assignment, &mut centroids);
    update_centroids(points, &assignment, &mut centroids);
    let mut history = vec![inertia(points, &assignment, &centroids)];
    let mut iterations = 1;

    while iterations < max_iter {
        let mut next: Vec<usize> = points.iter().map(|p| nearest(p.as_ref(), &centroids).0).collect();
        repair_empty(points, &mut next, &mut centroids);
        let changed = next != assignment;
        assignment = next;
        update_centroids(points, &assignment, &mut centroids);
        history.push(inertia(points, &assignment, &centroids));
        iterations += 1;
        if !changed {
            break;
        }
    }

    Ok(KMeansResult {
        inertia: *history.last().expect("at least one update"),
        assignment,
        centroids,
        inertia_history: history,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_points(seed: u64, n: usize, dim: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect()
    }

    fn centroid_inertia(points: &[Vec<f64>], assignment: &[usize], k: usize) -> f64 {
        let dim = points[0].len();
        let mut c = vec![vec![0.0; dim]; k];
        let mut n = vec![0.0; k];
        for (p, &a) in points.iter().zip(assignment) {
            n[a] += 1.0;
            for j in 0..dim {
                c[a][j] += p[j];
            }
        }
        for (ci, ni) in c.iter_mut().zip(&n) {
            if *ni > 0.0 {
                ci.iter_mut().for_each(|v| *v /= ni);
            }
        }
        inertia(points, assignment, &c)
    }

    #[test]
    fn distinct_locations_give_zero_inertia() {
        let pts = vec![vec![0.0, 0.0], vec![5.0, 1.0], vec![-3.0, 2.0], vec![9.0, -9.0]];
        let r = kmeans(&pts, 4, 3, 100).unwrap();
        assert_eq!(r.inertia, 0.0);
        let mut seen = r.assignment.clone();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3]);
    }

    #[test]
    fn separated_blobs_are_pure() {
        let pts = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![10.0, 10.0], vec![10.0, 11.0]];
        for seed in 0..20 {
            let r = kmeans(&pts, 2, seed, 100).unwrap();
            assert_eq!(r.assignment[0], r.assignment[1]);
            assert_eq!(r.assignment[2], r.assignment[3]);
            assert_ne!(r.assignment[0], r.assignment[2]);
        }
    }

    #[test]
    fn beats_random_assignments() {
        let pts = random_points(5, 30, 2);
        let r = kmeans(&pts, 3, 9, 100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let assign: Vec<usize> = (0..30).map(|_| rng.random_range(0..3)).collect();
            assert!(r.inertia <= centroid_inertia(&pts, &assign, 3) + 1e-12);
        }
    }

    #[test]
    fn too_few_points() {
        let pts = vec![vec![1.0], vec![2.0]];
        assert!(matches!(kmeans(&pts, 3, 0, 10), Err(Error::Input(_))));
        assert!(kmeans(&pts, 0, 0, 10).is_err());
    }

    #[test]
    fn duplicate_points_still_fill_every_cluster() {
        let pts = vec![vec![1.0, 1.0]; 6];
        let r = kmeans(&pts, 3, 1, 10).unwrap();
        assert!(r.cluster_sizes().iter().all(|&s| s > 0));
    }

    proptest! {
        #[test]
        fn inertia_is_non_increasing_and_clusters_non_empty(seed in 0u64..500, n in 5usize..40, k in 1usize..5) {
            let pts = random_points(seed, n, 3);
            let r = kmeans(&pts, k, seed, 50).unwrap();
            for w in r.inertia_history.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9);
            }
            prop_assert!(r.cluster_sizes().iter().all(|&s| s > 0));
            let again = kmeans(&pts, k, seed, 50).unwrap();
            prop_assert_eq!(r, again);
        }
    }
}
