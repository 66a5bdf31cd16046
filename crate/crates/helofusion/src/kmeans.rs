//! Deterministic k-means with k-means++ seeding.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const RESTARTS: usize = 8;

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

/// Within-cluster sum of squares for a given centroid set.
pub fn wcss(points: &[[f64; 2]], centroids: &[[f64; 2]]) -> f64 {
    points
        .iter()
        .map(|p| {
            centroids
                .iter()
                .map(|c| dist2(*p, *c))
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

fn plus_plus_seed(points: &[[f64; 2]], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..points.len())]);
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(*p, centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // All remaining points coincide with a centroid; pick deterministically.
            rng.gen_range(0..points.len())
        } else {
            let mut target = rng.gen_range(0.0..total);
            let mut pick = points.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if target < *w {
                    pick = i;
                    break;
                }
                target -= *w;
            }
            pick
        };
        let c = points[next];
        centroids.push(c);
        for (i, p) in points.iter().enumerate() {
            let d = dist2(*p, c);
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centroids
}

fn lloyd(points: &[[f64; 2]], centroids: &mut Vec<[f64; 2]>, max_iters: usize) {
    let k = centroids.len();
    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..max_iters {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, ctr) in centroids.iter().enumerate() {
                let d = dist2(*p, *ctr);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![[0.0f64; 2]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            sums[assign[i]][0] += p[0];
            sums[assign[i]][1] += p[1];
            counts[assign[i]] += 1;
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed an empty cluster to the point farthest from its centroid.
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        dist2(points[a], centroids[assign[a]])
                            .partial_cmp(&dist2(points[b], centroids[assign[b]]))
                            .unwrap()
                    })
                    .unwrap();
                centroids[c] = points[far];
            } else {
                centroids[c] = [
                    sums[c][0] / counts[c] as f64,
                    sums[c][1] / counts[c] as f64,
                ];
            }
        }
    }
}

/// Upper bound on k^n assignments for which the exact partition search runs
/// instead of the seeded heuristic.
const EXHAUSTIVE_LIMIT: u128 = 100_000;

/// Globally optimal centroids by enumerating every assignment of points to k
/// non-empty clusters. Only viable for tiny inputs.
fn exhaustive_partition(points: &[[f64; 2]], k: usize) -> Vec<[f64; 2]> {
    let n = points.len();
    let mut best_cost = f64::INFINITY;
    let mut best = vec![[0.0f64; 2]; k];
    let mut assign = vec![0usize; n];
    loop {
        let mut sums = vec![[0.0f64; 2]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            sums[a][0] += p[0];
            sums[a][1] += p[1];
            counts[a] += 1;
        }
        // Skipping empty clusters is safe: splitting any cluster never
        // increases the cost, so some surjective assignment is optimal.
        if counts.iter().all(|&c| c > 0) {
            let centroids: Vec<[f64; 2]> = (0..k)
                .map(|c| [sums[c][0] / counts[c] as f64, sums[c][1] / counts[c] as f64])
                .collect();
            let cost: f64 = points
                .iter()
                .zip(&assign)
                .map(|(p, &a)| dist2(*p, centroids[a]))
                .sum();
            if cost < best_cost {
                best_cost = cost;
                best = centroids;
            }
        }
        // Next assignment in base-k counting order.
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            assign[i] += 1;
            if assign[i] < k {
                break;
            }
            assign[i] = 0;
            i += 1;
        }
    }
}

/// k-means over 2-D points, deterministic for fixed inputs. Tiny instances
/// (at most [`EXHAUSTIVE_LIMIT`] possible assignments) are solved exactly by
/// enumerating partitions; larger ones use k-means++ seeding with Lloyd
/// iterations to a fixpoint over a fixed number of seeded restarts, keeping
/// the lowest within-cluster sum of squares.
pub fn kmeans(
    points: &[[f64; 2]],
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<Vec<[f64; 2]>> {
    if k < 1 {
        return Err(Error::Validation("kmeans: k must be >= 1".into()));
    }
    if points.len() < k {
        return Err(Error::Validation(format!(
            "kmeans: {} points for k={k}",
            points.len()
        )));
    }
    if (k as u128).checked_pow(points.len() as u32).is_some_and(|c| c <= EXHAUSTIVE_LIMIT) {
        let mut out = exhaustive_partition(points, k);
        out.sort_by(|a, b| a.partial_cmp(b).unwrap());
        return Ok(out);
    }
    let mut best: Option<(f64, Vec<[f64; 2]>)> = None;
    for r in 0..RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r as u64));
        let mut centroids = plus_plus_seed(points, k, &mut rng);
        lloyd(points, &mut centroids, max_iters);
        let cost = wcss(points, &centroids);
        let better = match &best {
            Some((c, _)) => cost < *c,
            None => true,
        };
        if better {
            best = Some((cost, centroids));
        }
    }
    let mut out = best.unwrap().1;
    // Canonical order for reproducibility across permutation-equivalent runs.
    out.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(out)
}
