use super::cost_matrix;
use crate::error::{Error, Result};
use crate::measure::DiscreteMeasure;

/// Largest support handled by [`exact_w2`].
pub const MAX_EXACT_SUPPORT: usize = 64;

/// Minimum-cost perfect matching on a square row-major cost matrix
/// (shortest augmenting paths with row/column potentials, O(n³)).
/// Returns `perm` with row `i` matched to column `perm[i]`.
pub fn assignment(n: usize, cost: &[f64]) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    // 1-based arrays; index 0 is the virtual root column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        matched_row[0] = row;
        let mut col0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let i0 = matched_row[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = col0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    col1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            col0 = col1;
            if matched_row[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            matched_row[col0] = matched_row[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[matched_row[j] - 1] = j - 1;
    }
    perm
}

/// Unregularized squared 2-Wasserstein distance between two uniform
/// measures with the same number of atoms.
pub fn exact_w2(src: &DiscreteMeasure, tgt: &DiscreteMeasure) -> Result<f64> {
    let n = src.len();
    if n != tgt.len() {
        return Err(Error::Unsupported(format!(
            "exact_w2 needs equal support sizes, got {} and {}",
            n,
            tgt.len()
        )));
    }
    if n > MAX_EXACT_SUPPORT {
        return Err(Error::Unsupported(format!(
            "exact_w2 handles at most {MAX_EXACT_SUPPORT} atoms, got {n}"
        )));
    }
    if !src.is_uniform() || !tgt.is_uniform() {
        return Err(Error::Unsupported("exact_w2 needs uniform weights".into()));
    }
    let c = cost_matrix(src, tgt)?;
    let perm = assignment(n, c.as_slice());
    Ok(perm.iter().enumerate().map(|(i, &j)| c.get(i, j)).sum::<f64>() / n as f64)
}
