//! k-means++ seeding and Lloyd's iterations, shared by mixture-model
//! initialization and codebook fitting.

use rand::Rng;

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// k-means++ seeding: returns `k` row indices into `data` (n rows of `d`).
pub(crate) fn kmeans_pp_indices(
    data: &[f64],
    n: usize,
    d: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Vec<usize> {
    assert!(n >= k && k >= 1);
    let row = |i: usize| &data[i * d..(i + 1) * d];
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.gen_range(0..n));
    let mut min_d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = min_d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in min_d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            // All remaining points coincide with a center; any index works.
            rng.gen_range(0..n)
        };
        chosen.push(next);
        for i in 0..n {
            let d2 = sq_dist(row(i), row(next));
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
        }
    }
    chosen
}

/// Lloyd's algorithm from the given centers. Ties in assignment go to the
/// lowest center index; empty clusters are re-seeded from the point farthest
/// from its nearest center. Returns the per-iteration SSE trace.
pub(crate) fn lloyd(
    data: &[f64],
    n: usize,
    d: usize,
    centers: &mut Vec<f64>,
    max_iters: usize,
) -> (Vec<usize>, Vec<f64>) {
    let k = centers.len() / d;
    let row = |i: usize| &data[i * d..(i + 1) * d];
    let mut assign = vec![0usize; n];
    let mut sse_trace: Vec<f64> = Vec::new();
    for _ in 0..max_iters {
        let mut sse = 0.0;
        for i in 0..n {
            let mut best = 0;
            let mut best_d2 = f64::INFINITY;
            for c in 0..k {
                let d2 = sq_dist(row(i), &centers[c * d..(c + 1) * d]);
                if d2 < best_d2 {
                    best_d2 = d2;
                    best = c;
                }
            }
            assign[i] = best;
            sse += best_d2;
        }
        if let Some(&prev) = sse_trace.last() {
            if sse >= prev - 1e-12 * prev.abs().max(1.0) {
                sse_trace.push(sse);
                break;
            }
        }
        sse_trace.push(sse);

        let mut counts = vec![0usize; k];
        let mut sums = vec![0.0f64; k * d];
        for i in 0..n {
            counts[assign[i]] += 1;
            for j in 0..d {
                sums[assign[i] * d + j] += data[i * d + j];
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Farthest point from its nearest center.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = (0..k).map(|cc| sq_dist(row(a), &centers[cc * d..(cc + 1) * d]))
                            .fold(f64::INFINITY, f64::min);
                        let db = (0..k).map(|cc| sq_dist(row(b), &centers[cc * d..(cc + 1) * d]))
                            .fold(f64::INFINITY, f64::min);
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                centers[c * d..(c + 1) * d].copy_from_slice(row(far));
            } else {
                for j in 0..d {
                    centers[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
            }
        }
    }
    (assign, sse_trace)
}
