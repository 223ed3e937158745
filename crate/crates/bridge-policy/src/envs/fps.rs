//! Farthest point sampling: greedy max-min subset selection used to
//! downsample synthetic point clouds to a fixed budget.

use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FpsError {
    #[error("k = {k} out of range for {m} points")]
    BadK { k: usize, m: usize },
    #[error("start index {start} out of range for {m} points")]
    BadStart { start: usize, m: usize },
    #[error("points must be Mx3, got {rows}x{cols}")]
    BadShape { rows: usize, cols: usize },
}

fn dist_sq(points: &Array2<f64>, a: usize, b: usize) -> f64 {
    (0..3)
        .map(|j| {
            let d = points[(a, j)] - points[(b, j)];
            d * d
        })
        .sum()
}

/// Greedy max-min selection of `k` indices starting at `start_index`: each
/// round picks the point farthest from the selected set, ties broken by the
/// lowest index.
pub fn farthest_point_sample(
    points: &Array2<f64>,
    k: usize,
    start_index: usize,
) -> Result<Vec<usize>, FpsError> {
    let (m, cols) = points.dim();
    if cols != 3 {
        return Err(FpsError::BadShape { rows: m, cols });
    }
    if k == 0 || k > m {
        return Err(FpsError::BadK { k, m });
    }
    if start_index >= m {
        return Err(FpsError::BadStart {
            start: start_index,
            m,
        });
    }
    let mut selected = Vec::with_capacity(k);
    selected.push(start_index);
    let mut min_dist: Vec<f64> = (0..m).map(|i| dist_sq(points, i, start_index)).collect();
    while selected.len() < k {
        let mut best = f64::NEG_INFINITY;
        let mut best_idx = 0;
        for (i, &d) in min_dist.iter().enumerate() {
            if d > best {
                best = d;
                best_idx = i;
            }
        }
        selected.push(best_idx);
        for (i, slot) in min_dist.iter_mut().enumerate() {
            let d = dist_sq(points, i, best_idx);
            if d < *slot {
                *slot = d;
            }
        }
    }
    Ok(selected)
}

/// Reference implementation for oracle tests: recomputes every point's
/// distance to the selected set from scratch each round.
pub fn farthest_point_sample_bruteforce(
    points: &Array2<f64>,
    k: usize,
    start_index: usize,
) -> Result<Vec<usize>, FpsError> {
    let (m, cols) = points.dim();
    if cols != 3 {
        return Err(FpsError::BadShape { rows: m, cols });
    }
    if k == 0 || k > m {
        return Err(FpsError::BadK { k, m });
    }
    if start_index >= m {
        return Err(FpsError::BadStart {
            start: start_index,
            m,
        });
    }
    let mut selected = vec![start_index];
    while selected.len() < k {
        let mut best = f64::NEG_INFINITY;
        let mut best_idx = 0;
        for i in 0..m {
            let d = selected
                .iter()
                .map(|&s| dist_sq(points, i, s))
                .fold(f64::INFINITY, f64::min);
            if d > best {
                best = d;
                best_idx = i;
            }
        }
        selected.push(best_idx);
    }
    Ok(selected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line(n: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, 3), |(i, j)| if j == 0 { i as f64 } else { 0.0 })
    }

    #[test]
    fn k_equals_m_selects_everything() {
        let pts = line(5);
        let idx = farthest_point_sample(&pts, 5, 2).unwrap();
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn collinear_two_points() {
        let pts = line(10);
        assert_eq!(farthest_point_sample(&pts, 2, 0).unwrap(), vec![0, 9]);
    }

    #[test]
    fn collinear_three_points_tie_breaks_low() {
        // after {0, 9} the distance-to-set of i is min(i, 9-i); 4 and 5 tie
        let pts = line(10);
        assert_eq!(farthest_point_sample(&pts, 3, 0).unwrap(), vec![0, 9, 4]);
    }

    #[test]
    fn rejects_bad_arguments() {
        let pts = line(4);
        assert!(farthest_point_sample(&pts, 0, 0).is_err());
        assert!(farthest_point_sample(&pts, 5, 0).is_err());
        assert!(farthest_point_sample(&pts, 2, 4).is_err());
    }

    #[test]
    fn matches_bruteforce_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for case in 0..200 {
            let m = rng.random_range(1usize..=64);
            let k = rng.random_range(1usize..=m);
            let start = rng.random_range(0usize..m);
            let pts = Array2::from_shape_fn((m, 3), |_| rng.random_range(-1.0..1.0));
            let fast = farthest_point_sample(&pts, k, start).unwrap();
            let slow = farthest_point_sample_bruteforce(&pts, k, start).unwrap();
            assert_eq!(fast, slow, "case {case}: m={m} k={k} start={start}");
        }
    }
}
