//! Scalar and matrix kernels shared by the tape and the likelihood code.

use crate::exec::for_each_row;

/// Logistic function, split by sign so neither branch overflows.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` as `max(x, 0) + ln(1 + e^{-|x|})`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Correctly rounded sum of `values` (Shewchuk's exact partials), so the
/// result does not depend on summation order.
pub fn fsum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    let Some(mut n) = partials.len().checked_sub(1) else { return 0.0 };
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        lo = y - (hi - x);
        if lo != 0.0 {
            break;
        }
    }
    // half-way case: round toward the sign of the remaining partials
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}

/// `a[m,k] * b[k,n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for_each_row(&mut out, n, m * k * n, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &aip) in ar.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(br) {
                *o += aip * bv;
            }
        }
    });
    out
}

/// `g[m,n] * b[k,n]^T -> [m,k]`.
pub fn matmul_bt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for_each_row(&mut out, k, m * k * n, |i, row| {
        let gr = &g[i * n..(i + 1) * n];
        for (p, o) in row.iter_mut().enumerate() {
            let br = &b[p * n..(p + 1) * n];
            *o = gr.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    });
    out
}

/// `a[m,k]^T * g[m,n] -> [k,n]`.
pub fn matmul_at(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for_each_row(&mut out, n, m * k * n, |p, row| {
        for i in 0..m {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let gr = &g[i * n..(i + 1) * n];
            for (o, &gv) in row.iter_mut().zip(gr) {
                *o += aip * gv;
            }
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_branches_stay_finite() {
        for x in [-500.0, -40.0, 0.0, 40.0, 500.0] {
            assert!(softplus(x).is_finite());
            assert!(sigmoid(x).is_finite());
        }
        assert_eq!(softplus(500.0), 500.0);
        assert!(softplus(-500.0) > 0.0 || softplus(-500.0) == 0.0);
        assert!((sigmoid(-10.0) + sigmoid(10.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fsum_is_order_independent() {
        let v = [1e16, 1.0, -1e16, 0.1, 0.2, 0.3, 1e-3];
        let mut r = v;
        r.reverse();
        assert_eq!(fsum(v), fsum(r));
        assert_eq!(fsum([0.1; 10]), 1.0);
        assert_eq!(fsum([]), 0.0);
    }

    #[test]
    fn transposed_products_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.5).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4
        let c = matmul(&a, &b, 2, 3, 4);
        // c[i,j] = sum_p a[i,p] b[p,j]
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert!((c[i * 4 + j] - want).abs() < 1e-12);
            }
        }
        let g: Vec<f64> = (0..8).map(|v| (v as f64).cos()).collect(); // 2x4
        let ga = matmul_bt(&g, &b, 2, 4, 3);
        let gb = matmul_at(&a, &g, 2, 3, 4);
        for i in 0..2 {
            for p in 0..3 {
                let want: f64 = (0..4).map(|j| g[i * 4 + j] * b[p * 4 + j]).sum();
                assert!((ga[i * 3 + p] - want).abs() < 1e-12);
            }
        }
        for p in 0..3 {
            for j in 0..4 {
                let want: f64 = (0..2).map(|i| a[i * 3 + p] * g[i * 4 + j]).sum();
                assert!((gb[p * 4 + j] - want).abs() < 1e-12);
            }
        }
    }
}
