//! Row-major GEMM wrappers over `matrixmultiply`.

/// `c = a · bᵀ + beta·c` with `a: m×k`, `b: n×k`, `c: m×n`.
pub fn gemm_abt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = a · b + beta·c` with `a: m×k`, `b: k×n`, `c: m×n`.
pub fn gemm_ab(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = aᵀ · b + beta·c` with `a: k×m`, `b: k×n`, `c: m×n`.
pub fn gemm_atb(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: impl Fn(usize, usize) -> f64, b: impl Fn(usize, usize) -> f64) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a(i, p) * b(p, j)).sum();
            }
        }
        c
    }

    #[test]
    fn all_layouts_match_naive_product() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let bt: Vec<f64> = (0..n * k).map(|i| (i as f64 * 0.11).cos()).collect();
        let expected = naive(m, k, n, |i, p| a[i * k + p], |p, j| bt[j * k + p]);

        let mut c = vec![0.0; m * n];
        gemm_abt(m, k, n, &a, &bt, 0.0, &mut c);
        for (x, y) in c.iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }

        let b: Vec<f64> = (0..k * n).map(|idx| bt[(idx % n) * k + idx / n]).collect();
        let mut c2 = vec![0.0; m * n];
        gemm_ab(m, k, n, &a, &b, 0.0, &mut c2);
        for (x, y) in c2.iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }

        let at: Vec<f64> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let mut c3 = vec![1.0; m * n];
        gemm_atb(m, k, n, &at, &b, 1.0, &mut c3);
        for (x, y) in c3.iter().zip(&expected) {
            assert!((x - (y + 1.0)).abs() < 1e-12);
        }
    }
}
