//! Raw dense kernels on row-major slices. No shape checking here.

use crate::scalar::Scalar;

/// `a[m×k] · b[k×n]`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = dot(arow, brow);
        }
    }
    out
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

const GELU_K: f64 = 0.044_715;

fn gelu_c<T: Scalar>() -> T {
    T::of((2.0 / std::f64::consts::PI).sqrt())
}

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let t = (gelu_c::<T>() * (x + T::of(GELU_K) * x * x * x)).tanh();
    half * x * (T::one() + t)
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let k = T::of(GELU_K);
    let c = gelu_c::<T>();
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x)
}

/// In-place softmax of one row; entries with `allowed[j] == false` get exactly 0.
pub fn softmax_row<T: Scalar>(row: &mut [T], allowed: Option<&[bool]>) {
    let ok = |j: usize| allowed.is_none_or(|a| a[j]);
    let mut max = T::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if ok(j) && v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for (j, v) in row.iter_mut().enumerate() {
        if ok(j) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = T::zero();
        }
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax backward for one row given output `p` and upstream `g`.
pub fn softmax_row_grad<T: Scalar>(p: &[T], g: &[T], out: &mut [T]) {
    let s = dot(p, g);
    for ((o, &pv), &gv) in out.iter_mut().zip(p).zip(g) {
        *o += pv * (gv - s);
    }
}

/// Population mean and variance of a row.
pub fn mean_var<T: Scalar>(row: &[T]) -> (T, T) {
    let n = T::of(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_variants_agree() {
        // a: 2x3, b: 3x2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let c = matmul::<f64>(&a, &b, 2, 3, 2);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);
        assert_eq!(matmul_nt::<f64>(&a, &bt, 2, 3, 2), c);
        assert_eq!(matmul_tn::<f64>(&at, &b, 3, 2, 2), c);
    }

    #[test]
    fn masked_softmax_zeroes_disallowed() {
        let mut r = [1.0f64, 2.0, 3.0];
        softmax_row(&mut r, Some(&[true, true, false]));
        assert_eq!(r[2], 0.0);
        assert!((r[0] + r[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0f64), 0.0);
        // large positive inputs pass through, large negative vanish
        assert!((gelu(10.0f64) - 10.0).abs() < 1e-12);
        assert!(gelu(-10.0f64).abs() < 1e-12);
    }
}
