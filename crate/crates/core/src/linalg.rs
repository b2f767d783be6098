//! Small dense linear-algebra helpers shared by the editing math.

use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};
use ndarray::{Array1, Array2};

/// Outer product `u wᵀ` as a dense matrix.
pub fn outer<T: Scalar>(u: &Array1<T>, w: &Array1<T>) -> Array2<T> {
    let mut out = Array2::zeros((u.len(), w.len()));
    for (i, &ui) in u.iter().enumerate() {
        for (j, &wj) in w.iter().enumerate() {
            out[(i, j)] = ui * wj;
        }
    }
    out
}

pub fn frobenius_norm<T: Scalar>(m: &Array2<T>) -> T {
    m.iter().map(|&x| x * x).sum::<T>().sqrt()
}

pub fn l2_norm<T: Scalar>(v: &Array1<T>) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// Angle between two vectors in radians, in [0, π].
pub fn angle<T: Scalar>(a: &Array1<T>, b: &Array1<T>) -> T {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == T::zero() || nb == T::zero() {
        return T::zero();
    }
    let cos = a.dot(b) / (na * nb);
    cos.max(-T::one()).min(T::one()).acos()
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
///
/// Fails with a numerical error when a pivot is not strictly positive, which
/// is how the post-ridge positive-definiteness check is enforced.
pub fn cholesky<T: Scalar>(a: &Array2<T>) -> Result<Array2<T>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::input("cholesky requires a square matrix"));
    }
    let mut l = Array2::<T>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[(i, j)];
            for k in 0..j {
                sum = sum - l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if sum <= T::zero() {
                    return Err(Error::numerical(format!(
                        "matrix not positive definite (pivot {i} = {sum})"
                    )));
                }
                l[(i, j)] = sum.sqrt();
            } else {
                l[(i, j)] = sum / l[(j, j)];
            }
        }
    }
    Ok(l)
}

/// Solve `L Lᵀ x = b` given the lower Cholesky factor `L`.
pub fn cholesky_solve<T: Scalar>(l: &Array2<T>, b: &Array1<T>) -> Array1<T> {
    let n = l.nrows();
    debug_assert_eq!(b.len(), n);
    // forward: L y = b
    let mut y = Array1::<T>::zeros(n);
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum = sum - l[(i, k)] * y[k];
        }
        y[i] = sum / l[(i, i)];
    }
    // backward: Lᵀ x = y
    let mut x = Array1::<T>::zeros(n);
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in (i + 1)..n {
            sum = sum - l[(k, i)] * x[k];
        }
        x[i] = sum / l[(i, i)];
    }
    x
}

/// Numerically stable softmax of a slice.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().cloned().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: T = exps.iter().cloned().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// log softmax of a slice (same shape).
pub fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().cloned().fold(T::neg_infinity(), T::max);
    let lse = logits
        .iter()
        .map(|&x| (x - max).exp())
        .sum::<T>()
        .ln()
        + max;
    logits.iter().map(|&x| x - lse).collect()
}

/// Slope of the ordinary least-squares fit of `y` on `x`.
pub fn ols_slope<T: Scalar>(x: &[T], y: &[T]) -> T {
    assert_eq!(x.len(), y.len());
    let n = c::<T>(x.len() as f64);
    let mx = x.iter().cloned().sum::<T>() / n;
    let my = y.iter().cloned().sum::<T>() / n;
    let mut num = T::zero();
    let mut den = T::zero();
    for (&xi, &yi) in x.iter().zip(y) {
        num = num + (xi - mx) * (yi - my);
        den = den + (xi - mx) * (xi - mx);
    }
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    #[test]
    fn outer_product_shapes_and_values() {
        let u = array![1.0, 2.0];
        let w = array![3.0, 4.0, 5.0];
        let m = outer(&u, &w);
        assert_eq!(m.dim(), (2, 3));
        assert_eq!(m[(1, 2)], 10.0);
    }

    #[test]
    fn cholesky_reconstructs_and_solves() {
        let a = array![[4.0, 2.0, 0.4], [2.0, 5.0, 1.0], [0.4, 1.0, 3.0]];
        let l = cholesky(&a).unwrap();
        let recon = l.dot(&l.t());
        for (x, y) in recon.iter().zip(a.iter()) {
            assert_relative_eq!(x, y, max_relative = 1e-12);
        }
        let b = array![1.0, -2.0, 0.5];
        let x = cholesky_solve(&l, &b);
        let back = a.dot(&x);
        for (bi, yi) in b.iter().zip(back.iter()) {
            assert_relative_eq!(bi, yi, max_relative = 1e-10);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(cholesky(&a).is_err());
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1.0f64, 2.0, 3.0]);
        assert_relative_eq!(p.iter().sum::<f64>(), 1.0, max_relative = 1e-12);
        let lp = log_softmax(&[1.0f64, 2.0, 3.0]);
        for (a, b) in p.iter().zip(lp.iter()) {
            assert_relative_eq!(a.ln(), b, max_relative = 1e-12);
        }
    }

    #[test]
    fn slope_of_exact_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y = [1.0, 0.0, -1.0, -2.0];
        assert_relative_eq!(ols_slope(&x, &y), -1.0, max_relative = 1e-12);
    }

    #[test]
    fn works_for_f32_too() {
        let a = array![[2.0f32, 0.5], [0.5, 1.0]];
        let l = cholesky(&a).unwrap();
        let b = array![1.0f32, 2.0];
        let x = cholesky_solve(&l, &b);
        let back = a.dot(&x);
        assert_relative_eq!(back[0], 1.0f32, max_relative = 1e-4);
    }
}
