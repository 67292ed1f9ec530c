//! Lloyd's k-means with k-means++ seeding, used only to seed EM.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

struct Run {
    labels: Vec<usize>,
    wcss: f64,
}

fn seed_centers(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers = vec![points[rng.gen_range(0..n)].clone()];
    let mut dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, d) in dist.iter().enumerate() {
                if target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centers.push(points[next].clone());
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }
    centers
}

fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>, max_iter: usize) -> Run {
    let n = points.len();
    let k = centers.len();
    let p = points[0].len();
    let mut labels = vec![usize::MAX; n];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, pt) in points.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| sq_dist(pt, &centers[a]).total_cmp(&sq_dist(pt, &centers[b])))
                .unwrap();
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; p]; k];
        let mut counts = vec![0usize; k];
        for (pt, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(pt) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                // reseed an empty cluster at the worst-fit point
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(&points[a], &centers[labels[a]])
                            .total_cmp(&sq_dist(&points[b], &centers[labels[b]]))
                    })
                    .unwrap();
                centers[j] = points[far].clone();
                labels[far] = j;
                changed = true;
            } else {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    let wcss = points
        .iter()
        .zip(&labels)
        .map(|(pt, &l)| sq_dist(pt, &centers[l]))
        .sum();
    Run { labels, wcss }
}

/// Best-of-`restarts` hard labels. Rows are put in lexicographic order before
/// seeding, so the result does not depend on the order of the input rows.
pub(crate) fn kmeans(points: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> Vec<usize> {
    let n = points.len();
    if k <= 1 || n == 0 {
        return vec![0; n];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .iter()
            .zip(&points[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let sorted: Vec<Vec<f64>> = order.iter().map(|&i| points[i].clone()).collect();
    let mut best: Option<Run> = None;
    for restart in 0..restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(restart as u64);
        let centers = seed_centers(&sorted, k.min(n), &mut rng);
        let run = lloyd(&sorted, centers, 100);
        if best.as_ref().is_none_or(|b| run.wcss < b.wcss) {
            best = Some(run);
        }
    }
    let sorted_labels = best.expect("at least one restart").labels;
    let mut labels = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        labels[i] = sorted_labels[pos];
    }
    labels
}
