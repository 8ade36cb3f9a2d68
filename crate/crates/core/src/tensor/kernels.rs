// Plain loops over row-major buffers. Every reduction runs in a fixed order so
// results do not depend on batch size or thread count.

use super::Scalar;

/// out[n×m] += a[n×k] · b[k×m]
pub(crate) fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * m..(i + 1) * m];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * m..(p + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

/// out[n×k] += dy[n×m] · b[k×m]ᵀ
pub(crate) fn matmul_nt_acc<T: Scalar>(dy: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let dy_row = &dy[i * m..(i + 1) * m];
        for p in 0..k {
            let b_row = &b[p * m..(p + 1) * m];
            let mut acc = T::zero();
            for (&x, &y) in dy_row.iter().zip(b_row) {
                acc = acc + x * y;
            }
            out[i * k + p] = out[i * k + p] + acc;
        }
    }
}

/// out[k×m] += a[n×k]ᵀ · dy[n×m]
pub(crate) fn matmul_tn_acc<T: Scalar>(a: &[T], dy: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        let dy_row = &dy[i * m..(i + 1) * m];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let out_row = &mut out[p * m..(p + 1) * m];
            for (o, &g) in out_row.iter_mut().zip(dy_row) {
                *o = *o + av * g;
            }
        }
    }
}

pub(crate) fn softmax_row<T: Scalar>(x: &[T], out: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum = sum + *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(x: &[T]) -> T {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = x.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                for p in 0..k {
                    out[i * m + j] += a[i * k + p] * b[p * m + j];
                }
            }
        }
        out
    }

    #[test]
    fn transposed_products_agree_with_naive() {
        let (n, k, m) = (3, 4, 2);
        let a: Vec<f64> = (0..n * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * m).map(|i| (i as f64 * 0.11).cos()).collect();
        let dy: Vec<f64> = (0..n * m).map(|i| i as f64 - 2.5).collect();

        let mut da = vec![0.0; n * k];
        matmul_nt_acc(&dy, &b, &mut da, n, k, m);
        let bt: Vec<f64> = (0..m * k).map(|idx| b[(idx % k) * m + idx / k]).collect();
        let expect_da = naive(&dy, &bt, n, m, k);
        for (x, y) in da.iter().zip(&expect_da) {
            assert!((x - y).abs() < 1e-12);
        }

        let mut db = vec![0.0; k * m];
        matmul_tn_acc(&a, &dy, &mut db, n, k, m);
        let at: Vec<f64> = (0..k * n).map(|idx| a[(idx % n) * k + idx / n]).collect();
        let expect_db = naive(&at, &dy, k, n, m);
        for (x, y) in db.iter().zip(&expect_db) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(1000.0f32), 1.0);
        assert_eq!(sigmoid(-1000.0f32), 0.0);
        assert!((sigmoid(0.0f64) - 0.5).abs() < 1e-15);
    }
}
