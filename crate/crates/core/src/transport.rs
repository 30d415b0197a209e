//! Wasserstein distances between empirical measures.

use log::warn;
use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Largest instance accepted by [`w1_assignment`].
pub const ASSIGNMENT_LIMIT: usize = 512;

fn check_1d(v: &[f64], what: &'static str) -> Result<()> {
    if v.is_empty() {
        return Err(Error::Empty(what));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(what));
    }
    Ok(())
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Exact W1 between two empirical measures on the real line, as the integral of
/// `|F_a⁻¹(t) - F_b⁻¹(t)|` over `t ∈ [0, 1]`. Both quantile functions are step
/// functions with jumps at multiples of `1/n` and `1/m`; breakpoints are
/// tracked in integer units of `1/(n·m)`.
pub fn w1_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    check_1d(a, "first measure")?;
    check_1d(b, "second measure")?;
    let (a, b) = (sorted(a), sorted(b));
    let (n, m) = (a.len(), b.len());
    if n == m {
        return Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64);
    }
    let (mut i, mut j) = (0usize, 0usize);
    let mut pos = 0u128;
    let mut total = 0.0;
    while i < n && j < m {
        let end_a = (i as u128 + 1) * m as u128;
        let end_b = (j as u128 + 1) * n as u128;
        let end = end_a.min(end_b);
        total += (end - pos) as f64 * (a[i] - b[j]).abs();
        pos = end;
        if end_a == end {
            i += 1;
        }
        if end_b == end {
            j += 1;
        }
    }
    Ok(total / (n as f64 * m as f64))
}

fn euclid(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_points(points: &[Vec<f64>], what: &'static str) -> Result<usize> {
    let first = points.first().ok_or(Error::Empty(what))?;
    let d = first.len();
    for p in points {
        if p.len() != d {
            return Err(Error::DimensionMismatch { expected: d, actual: p.len() });
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(what));
        }
    }
    Ok(d)
}

/// Minimum-cost perfect matching on a square cost matrix (shortest augmenting
/// path with potentials, O(n³)). Returns `assignment[row] = column`.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; index 0 is the virtual root column
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[row_of[j] - 1] = j - 1;
    }
    assignment
}

/// Exact W1 between two uniform empirical measures of equal size `n ≤ 512`
/// in `R^d`, via an optimal assignment on Euclidean costs.
pub fn w1_assignment(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::SizeMismatch { left: a.len(), right: b.len() });
    }
    if a.len() > ASSIGNMENT_LIMIT {
        return Err(Error::Oversize { size: a.len(), limit: ASSIGNMENT_LIMIT });
    }
    let da = check_points(a, "first measure")?;
    let db = check_points(b, "second measure")?;
    if da != db {
        return Err(Error::DimensionMismatch { expected: da, actual: db });
    }
    let cost: Vec<Vec<f64>> = a.iter().map(|p| b.iter().map(|q| euclid(p, q)).collect()).collect();
    let assignment = min_cost_assignment(&cost);
    let total: f64 = assignment.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    Ok(total / a.len() as f64)
}

/// [`w1_assignment`] on samples of any size: both measures are subsampled
/// without replacement to `min(|a|, |b|, 512)` points using `stream`. Exact
/// only when no subsampling happens.
pub fn w1_assignment_subsampled(a: &[Vec<f64>], b: &[Vec<f64>], stream: &RngStream) -> Result<f64> {
    let size = a.len().min(b.len()).min(ASSIGNMENT_LIMIT);
    if size == 0 {
        return Err(Error::Empty("assignment measure"));
    }
    if size == a.len() && size == b.len() {
        return w1_assignment(a, b);
    }
    warn!(
        "subsampling assignment W1 from {}x{} to {size} points; result is an estimate",
        a.len(),
        b.len()
    );
    let pick = |pts: &[Vec<f64>], tag: u64| -> Vec<Vec<f64>> {
        if pts.len() == size {
            return pts.to_vec();
        }
        let mut rng = stream.child(tag).rng();
        let mut idx = sample(&mut rng, pts.len(), size).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| pts[i].clone()).collect()
    };
    w1_assignment(&pick(a, 0), &pick(b, 1))
}

/// `max_i ‖a_i - b_i‖₂` over an explicit pairing; upper-bounds W∞.
pub fn winf_coupled(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::SizeMismatch { left: a.len(), right: b.len() });
    }
    if a.is_empty() {
        return Err(Error::Empty("coupled samples"));
    }
    let mut best = 0.0_f64;
    for (p, q) in a.iter().zip(b) {
        if p.len() != q.len() {
            return Err(Error::DimensionMismatch { expected: p.len(), actual: q.len() });
        }
        best = best.max(euclid(p, q));
    }
    Ok(best)
}
