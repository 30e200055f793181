//! Small dense helpers on row-major `f64` slices.
//!
//! Dimensions in this crate are tiny (d, m ≤ a handful), so plain slices beat a
//! general-purpose matrix type in the simulation hot loop.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn norm2(a: &[f64]) -> f64 {
    norm2_sq(a).sqrt()
}

/// `out = A·v` for a `rows × cols` row-major matrix.
pub fn matvec(a: &[f64], rows: usize, cols: usize, v: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), rows * cols);
    for (i, o) in out.iter_mut().enumerate().take(rows) {
        *o = dot(&a[i * cols..(i + 1) * cols], v);
    }
}

/// `out = Aᵀ·v` for a `rows × cols` row-major matrix.
pub fn matvec_t(a: &[f64], rows: usize, cols: usize, v: &[f64], out: &mut [f64]) {
    out[..cols].iter_mut().for_each(|o| *o = 0.0);
    for i in 0..rows {
        let vi = v[i];
        for j in 0..cols {
            out[j] += a[i * cols + j] * vi;
        }
    }
}

/// Frobenius (Hilbert–Schmidt) norm.
pub fn frobenius(a: &[f64]) -> f64 {
    norm2(a)
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `λa + (1−λ)b`, componentwise.
pub fn lerp(lambda: f64, a: &[f64], b: &[f64], out: &mut [f64]) {
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o = lambda * x + (1.0 - lambda) * y;
    }
}

const POWER_ITERATIONS: usize = 50;
const POWER_TOL: f64 = 1e-10;

/// Operator norm `‖A‖_{L(R^cols, R^rows)}` via power iteration on `AᵀA`.
///
/// The start vector is the column of `AᵀA` with the largest norm, which has a
/// nonzero component along the leading eigenvector whenever `A ≠ 0`.
pub fn op_norm(a: &[f64], rows: usize, cols: usize) -> f64 {
    debug_assert_eq!(a.len(), rows * cols);
    if cols == 0 || rows == 0 {
        return 0.0;
    }
    if cols == 1 {
        return norm2(a);
    }
    if rows == 1 {
        return norm2(a);
    }
    // Gram matrix G = AᵀA (cols × cols).
    let mut g = vec![0.0; cols * cols];
    for i in 0..cols {
        for j in i..cols {
            let mut s = 0.0;
            for r in 0..rows {
                s += a[r * cols + i] * a[r * cols + j];
            }
            g[i * cols + j] = s;
            g[j * cols + i] = s;
        }
    }
    let best = (0..cols)
        .max_by(|&i, &j| {
            norm2(&g[i * cols..(i + 1) * cols]).total_cmp(&norm2(&g[j * cols..(j + 1) * cols]))
        })
        .unwrap_or(0);
    let mut v = g[best * cols..(best + 1) * cols].to_vec();
    let n = norm2(&v);
    if n == 0.0 {
        return 0.0;
    }
    v.iter_mut().for_each(|x| *x /= n);
    let mut w = vec![0.0; cols];
    let mut lambda = 0.0;
    for _ in 0..POWER_ITERATIONS {
        matvec(&g, cols, cols, &v, &mut w);
        let next = norm2(&w);
        if next == 0.0 {
            return 0.0;
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / next;
        }
        let done = (next - lambda).abs() <= POWER_TOL * next;
        lambda = next;
        if done {
            break;
        }
    }
    lambda.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_norm_of_diagonal() {
        let a = [3.0, 0.0, 0.0, -5.0];
        assert!((op_norm(&a, 2, 2) - 5.0).abs() < 1e-9);
    }

    #[test]
    fn op_norm_rank_one() {
        // u vᵀ with ‖u‖=√2, ‖v‖=5
        let a = [3.0, 4.0, 3.0, 4.0];
        assert!((op_norm(&a, 2, 2) - 50f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn op_norm_rectangular_matches_svd() {
        // singular values of [[1,2],[3,4],[5,6]]: 9.5255180, 0.5143006
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert!((op_norm(&a, 3, 2) - 9.525_518_091_565_107).abs() < 1e-8);
    }

    #[test]
    fn op_norm_rotation_is_one() {
        let (s, c) = 0.3f64.sin_cos();
        let a = [c, -s, s, c];
        assert!((op_norm(&a, 2, 2) - 1.0).abs() < 1e-12);
    }
}
