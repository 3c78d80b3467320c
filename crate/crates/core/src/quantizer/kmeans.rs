use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Mean squared distance from each row of `points` to its nearest centroid.
pub fn quantization_error(points: &Tensor, centroids: &Tensor) -> Result<f64> {
    let (n, d) = points.dims2()?;
    if centroids.cols() != d {
        return Err(Error::shape("quantization_error", points.shape(), centroids.shape()));
    }
    let total: f64 = (0..n).map(|i| nearest(points.row(i), centroids).1).sum();
    Ok(total / n as f64)
}

fn nearest(p: &[f64], centroids: &Tensor) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for k in 0..centroids.rows() {
        let d: f64 = p.iter().zip(centroids.row(k)).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Lloyd iterations from the given initial centroids. Empty clusters keep
/// their previous centroid, so the error never increases.
pub fn kmeans(points: &Tensor, init: &Tensor, iters: usize) -> Result<Tensor> {
    let (n, d) = points.dims2()?;
    let (k, dc) = init.dims2()?;
    if dc != d {
        return Err(Error::shape("kmeans", points.shape(), init.shape()));
    }
    let mut c = init.clone();
    for _ in 0..iters {
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let (j, _) = nearest(points.row(i), &c);
            counts[j] += 1;
            for (s, x) in sums[j * d..(j + 1) * d].iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        let mut next = c.data().to_vec();
        for j in 0..k {
            if counts[j] > 0 {
                for q in 0..d {
                    next[j * d + q] = sums[j * d + q] / counts[j] as f64;
                }
            }
        }
        c = Tensor::new([k, d], next)?;
    }
    Ok(c)
}
