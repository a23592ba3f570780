use crate::rng::SeededRng;
use crate::tensor::Tensor;

fn dist2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Index of the nearest centroid for each row; ties go to the lowest index.
pub fn nearest(points: &Tensor, centroids: &Tensor) -> Vec<usize> {
    let g = points.shape()[1];
    points
        .data()
        .chunks(g)
        .map(|p| {
            let mut best = (f64::INFINITY, 0);
            for (c, row) in centroids.data().chunks(g).enumerate() {
                let d = dist2(p, row);
                if d < best.0 {
                    best = (d, c);
                }
            }
            best.1
        })
        .collect()
}

/// Lloyd's algorithm with k-means++ seeding over the rows of `points[N, g]`.
/// Returns `k` centroids and the final assignment. Means are accumulated in
/// f64, so a cluster of identical points keeps exactly that point.
pub fn kmeans(
    points: &Tensor,
    k: usize,
    iters: usize,
    rng: &mut SeededRng,
) -> (Tensor, Vec<usize>) {
    let [n, g] = [points.shape()[0], points.shape()[1]];
    let row = |i: usize| &points.data()[i * g..(i + 1) * g];
    let mut cent = vec![0.0f32; k * g];
    let first = rng.below(n);
    cent[..g].copy_from_slice(row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| dist2(row(i), row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.uniform_f64() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            // Guard against rounding landing on an already-covered point.
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            rng.below(n)
        };
        cent[c * g..(c + 1) * g].copy_from_slice(row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(dist2(row(i), row(pick)));
        }
    }
    let mut centroids = Tensor::new(vec![k, g], cent).expect("centroid shape");
    let mut assign = nearest(points, &centroids);
    for _ in 0..iters {
        let mut sums = vec![0.0f64; k * g];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, &v) in sums[a * g..(a + 1) * g].iter_mut().zip(row(i)) {
                *s += v as f64;
            }
        }
        let data = centroids.data_mut();
        for c in 0..k {
            if counts[c] > 0 {
                for s in 0..g {
                    data[c * g + s] = (sums[c * g + s] / counts[c] as f64) as f32;
                }
            }
        }
        let next = nearest(points, &centroids);
        if next == assign {
            break;
        }
        assign = next;
    }
    (centroids, assign)
}
