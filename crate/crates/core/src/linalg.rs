//! Row-major dense helpers shared by the adaptor, LoRA and the toy backend.

use alloc::vec;
use alloc::vec::Vec;

/// `y = W x` with `W` of shape `rows × cols`.
pub fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    (0..rows)
        .map(|r| {
            let row = &w[r * cols..(r + 1) * cols];
            row.iter().zip(x).map(|(a, b)| a * b).sum()
        })
        .collect()
}

/// `y = Wᵀ x` with `W` of shape `rows × cols`.
pub fn matvec_t(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), rows);
    let mut y = vec![0.0; cols];
    for r in 0..rows {
        let xr = x[r];
        let row = &w[r * cols..(r + 1) * cols];
        for (yc, &wc) in y.iter_mut().zip(row) {
            *yc += wc * xr;
        }
    }
    y
}

/// `G += a bᵀ` with `G` of shape `len(a) × len(b)`.
pub fn add_outer(g: &mut [f64], a: &[f64], b: &[f64]) {
    debug_assert_eq!(g.len(), a.len() * b.len());
    let cols = b.len();
    for (r, &ar) in a.iter().enumerate() {
        let row = &mut g[r * cols..(r + 1) * cols];
        for (gc, &bc) in row.iter_mut().zip(b) {
            *gc += ar * bc;
        }
    }
}

/// `C = A B` with `A: m × k`, `B: k × n`.
pub fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// `Aᵀ` for `A: rows × cols`.
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

/// Sum whose result does not depend on the order of `values`.
///
/// Values are summed in ascending order, so any permutation of the input
/// produces the same bits.
pub fn order_invariant_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}
