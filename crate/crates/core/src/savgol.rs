// SPDX-License-Identifier: Apache-2.0

//! Savitzky-Golay smoothing.
//!
//! Each output sample is the value at the window centre of the least-squares
//! polynomial fitted over the window. Edges are mirror padded without
//! repeating the edge sample (`x[-k] = x[k]`), so the output has the input's
//! length.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid Savitzky-Golay parameters: window {window}, order {order}, length {len}")]
pub struct BadFilterParams {
    pub window: usize,
    pub order: usize,
    pub len: usize,
}

/// Smoothing weights for a centred window of `window` samples.
///
/// Solves the normal equations of the polynomial fit on offsets scaled to
/// `[-1, 1]`, which keeps the Gram matrix well conditioned.
pub fn coefficients(window: usize, order: usize) -> Result<Vec<f64>, BadFilterParams> {
    if window % 2 == 0 || order >= window {
        return Err(BadFilterParams { window, order, len: window });
    }
    let half = (window / 2) as f64;
    let scale = if half == 0.0 { 1.0 } else { half };
    let m = order + 1;
    let offsets: Vec<f64> = (0..window).map(|j| (j as f64 - half) / scale).collect();

    // Gram matrix G[a][b] = sum_j z_j^(a+b).
    let mut moments = vec![0.0; 2 * order + 1];
    for &z in &offsets {
        let mut p = 1.0;
        for mk in moments.iter_mut() {
            *mk += p;
            p *= z;
        }
    }
    let mut gram: Vec<Vec<f64>> = (0..m).map(|a| (0..m).map(|b| moments[a + b]).collect()).collect();

    // The centre value is the constant term, so only row 0 of G^-1 is needed:
    // solve G y = e0 and weight each sample by sum_k y_k z^k.
    let mut rhs = vec![0.0; m];
    rhs[0] = 1.0;
    let y = solve(&mut gram, &mut rhs);
    Ok(offsets
        .iter()
        .map(|&z| {
            let mut p = 1.0;
            let mut c = 0.0;
            for yk in &y {
                c += yk * p;
                p *= z;
            }
            c
        })
        .collect())
}

// Gaussian elimination with partial pivoting on a small dense system.
fn solve(a: &mut [Vec<f64>], b: &mut [f64]) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty column");
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    x
}

/// Smooths `samples` with a `window`-point, `order`-degree filter.
///
/// Requires an odd window with `1 <= window <= samples.len()` and
/// `order < window`.
///
/// ```
/// use power_attest::savgol::savitzky_golay;
///
/// let cubic: Vec<f64> = (0..40).map(|i| {
///     let x = i as f64;
///     0.5 * x * x * x - 2.0 * x + 1.0
/// })
/// .collect();
/// let smoothed = savitzky_golay(&cubic, 7, 3).unwrap();
/// for i in 3..37 {
///     assert!((smoothed[i] - cubic[i]).abs() < 1e-9 * cubic[i].abs().max(1.0));
/// }
/// ```
pub fn savitzky_golay(samples: &[f64], window: usize, order: usize) -> Result<Vec<f64>, BadFilterParams> {
    let len = samples.len();
    if window % 2 == 0 || window == 0 || window > len || order >= window {
        return Err(BadFilterParams { window, order, len });
    }
    let c = coefficients(window, order)?;
    let half = window / 2;
    let mut out = vec![0.0; len];

    let mirror = |i: isize| -> usize {
        let last = len as isize - 1;
        if i < 0 {
            (-i) as usize
        } else if i > last {
            (2 * last - i) as usize
        } else {
            i as usize
        }
    };
    let edge = |i: usize| -> f64 {
        c.iter()
            .enumerate()
            .map(|(j, cj)| cj * samples[mirror(i as isize + j as isize - half as isize)])
            .sum()
    };

    for i in 0..half.min(len) {
        out[i] = edge(i);
    }
    for i in half..len.saturating_sub(half) {
        let w = &samples[i - half..=i + half];
        out[i] = c.iter().zip(w).map(|(a, b)| a * b).sum();
    }
    for i in len.saturating_sub(half).max(half)..len {
        out[i] = edge(i);
    }
    Ok(out)
}
