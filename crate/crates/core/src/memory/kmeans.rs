use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

const MAX_ITERATIONS: usize = 50;
const SHIFT_TOLERANCE: f64 = 1e-6;

/// Result of Lloyd's algorithm: a centroid per cluster and a cluster per point.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

/// k-means++ seeding.
fn seed_centroids<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    while centroids.len() < k {
        let weights: Vec<f64> = points
            .iter()
            .map(|p| centroids.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let next = match WeightedIndex::new(&weights) {
            Ok(dist) => dist.sample(rng),
            // every point coincides with a centroid already
            Err(_) => rng.random_range(0..points.len()),
        };
        centroids.push(points[next].clone());
    }
    centroids
}

/// Clusters `points` into `k` groups. Empty clusters keep their previous centroid.
pub fn kmeans<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Clustering {
    assert!(k >= 1 && k <= points.len(), "k must lie in 1..=n");
    let dim = points[0].len();
    let mut centroids = seed_centroids(points, k, rng);
    let mut assignment = vec![0; points.len()];
    for _ in 0..MAX_ITERATIONS {
        for (a, p) in assignment.iter_mut().zip(points) {
            *a = nearest(p, &centroids);
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let updated: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(sq_dist(&updated, &centroids[c]).sqrt());
            centroids[c] = updated;
        }
        if shift < SHIFT_TOLERANCE {
            break;
        }
    }
    for (a, p) in assignment.iter_mut().zip(points) {
        *a = nearest(p, &centroids);
    }
    Clustering { centroids, assignment }
}

/// Picks one point per cluster: the member nearest the centroid.
///
/// Distance ties go to the smaller key. A cluster without members takes the
/// nearest point not chosen yet, so the result always has `k` distinct indices.
pub fn closest_to_centroids<K: Ord>(points: &[Vec<f64>], keys: &[K], clustering: &Clustering) -> Vec<usize> {
    let mut taken = vec![false; points.len()];
    let mut chosen = Vec::with_capacity(clustering.centroids.len());
    for (c, centroid) in clustering.centroids.iter().enumerate() {
        let by_distance = |members: &mut Vec<usize>| {
            members.sort_by(|&a, &b| {
                sq_dist(&points[a], centroid)
                    .total_cmp(&sq_dist(&points[b], centroid))
                    .then_with(|| keys[a].cmp(&keys[b]))
            });
        };
        let mut members: Vec<usize> = (0..points.len())
            .filter(|&i| clustering.assignment[i] == c && !taken[i])
            .collect();
        if members.is_empty() {
            members = (0..points.len()).filter(|&i| !taken[i]).collect();
        }
        by_distance(&mut members);
        if let Some(&pick) = members.first() {
            taken[pick] = true;
            chosen.push(pick);
        }
    }
    chosen
}
