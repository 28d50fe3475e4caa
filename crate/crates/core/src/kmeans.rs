//! Lloyd's k-means with k-means++ seeding.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::sq_dist;

/// k-means++ seeding: the first center is uniform, each further center is
/// drawn with probability proportional to its squared distance from the
/// nearest chosen center. Returns indices into `points`.
pub fn kmeanspp_seeds<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k == 0 || k > points.len() {
        return Err(Error::InvalidParameter(format!("cannot seed {k} centers from {} points", points.len())));
    }
    let mut chosen = vec![rng.random_range(0..points.len())];
    let mut dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, d) in dist.iter().enumerate() {
                if *d <= 0.0 {
                    continue;
                }
                pick = Some(i);
                if target < *d {
                    break;
                }
                target -= d;
            }
            pick.expect("positive total weight")
        } else {
            // every remaining point coincides with a center
            let free: Vec<usize> = (0..points.len()).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[next]));
        }
        dist[next] = 0.0;
    }
    Ok(chosen)
}

/// Index of the nearest center; ties go to the lower index.
pub fn nearest(p: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

/// k-means++ seeding followed by at most `iters` Lloyd iterations. A center
/// that loses all its points keeps its previous position.
pub fn kmeans<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, iters: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let seeds = kmeanspp_seeds(points, k, rng)?;
    let mut centers: Vec<Vec<f64>> = seeds.iter().map(|&i| points[i].clone()).collect();
    let dim = points[0].len();
    let mut assign: Vec<usize> = vec![usize::MAX; points.len()];
    for _ in 0..iters {
        let mut changed = false;
        for (a, p) in assign.iter_mut().zip(points) {
            let j = nearest(p, &centers);
            if *a != j {
                *a = j;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assign.iter().zip(points) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for ((c, s), &n) in centers.iter_mut().zip(sums).zip(&counts) {
            if n > 0 {
                *c = s.into_iter().map(|v| v / n as f64).collect();
            }
        }
    }
    Ok(centers)
}
