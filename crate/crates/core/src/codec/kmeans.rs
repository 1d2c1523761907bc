//! Lloyd's k-means with k-means++ seeding, trained from scratch.

use alloc::vec;
use alloc::vec::Vec;

use crate::rng::SeedRng;

/// Clusters `n = data.len() / dim` points into `k` centroids.
///
/// Seeding is k-means++ driven by the caller's stream, assignment breaks
/// ties toward the lowest centroid index, and clusters that empty out are
/// re-seeded on the point currently farthest from its centroid, so the
/// whole procedure is deterministic given the stream state.
pub fn kmeans(data: &[f32], dim: usize, k: usize, iterations: usize, rng: &mut SeedRng) -> Vec<f32> {
    assert!(dim > 0 && data.len() % dim == 0);
    let n = data.len() / dim;
    assert!(n >= k, "need at least k points");
    let point = |i: usize| &data[i * dim..(i + 1) * dim];

    // k-means++ seeding.
    let mut centroids = vec![0.0f32; k * dim];
    let first = rng.below(n);
    centroids[..dim].copy_from_slice(point(first));
    let mut min_d2 = vec![0.0f64; n];
    for i in 0..n {
        min_d2[i] = dist_sq(point(i), &centroids[..dim]);
    }
    for c in 1..k {
        let total: f64 = min_d2.iter().sum();
        let pick = if total > 0.0 {
            let mut dart = rng.uniform_f64() * total;
            let mut chosen = n - 1;
            for (i, &d) in min_d2.iter().enumerate() {
                dart -= d;
                if dart <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // All remaining mass is zero (duplicate points); pick uniformly.
            rng.below(n)
        };
        centroids[c * dim..(c + 1) * dim].copy_from_slice(point(pick));
        for i in 0..n {
            let d = dist_sq(point(i), &centroids[c * dim..(c + 1) * dim]);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for _ in 0..iterations {
        // Assign.
        let mut changed = false;
        for i in 0..n {
            let a = nearest(point(i), &centroids, dim, k);
            if assignment[i] != a {
                assignment[i] = a;
                changed = true;
            }
        }
        // Update.
        let mut counts = vec![0usize; k];
        let mut sums = vec![0.0f64; k * dim];
        for i in 0..n {
            let a = assignment[i];
            counts[a] += 1;
            for (s, &v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(point(i)) {
                *s += v as f64;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed on the point farthest from its current centroid.
                let mut worst = 0usize;
                let mut worst_d = -1.0f64;
                for i in 0..n {
                    let d = dist_sq(point(i), &centroids[assignment[i] * dim..(assignment[i] + 1) * dim]);
                    if d > worst_d {
                        worst_d = d;
                        worst = i;
                    }
                }
                centroids[c * dim..(c + 1) * dim].copy_from_slice(point(worst));
                assignment[worst] = c;
                changed = true;
            } else {
                let inv = 1.0 / counts[c] as f64;
                for (dst, &s) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(&sums[c * dim..]) {
                    *dst = (s * inv) as f32;
                }
            }
        }
        if !changed {
            break;
        }
    }
    centroids
}

fn nearest(p: &[f32], centroids: &[f32], dim: usize, k: usize) -> usize {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for c in 0..k {
        let d = dist_sq(p, &centroids[c * dim..(c + 1) * dim]);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

fn dist_sq(a: &[f32], b: &[f32]) -> f64 {
    let mut d = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let diff = (x - y) as f64;
        d += diff * diff;
    }
    d
}
