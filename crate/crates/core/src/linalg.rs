//! Small dense linear-algebra helpers: Gram–Schmidt and a Jacobi
//! eigensolver for symmetric matrices.

use crate::tensor::{Tensor, TensorError};

/// Orthonormalises the columns of an `[n x k]` matrix (modified
/// Gram–Schmidt, two passes). Fails if the columns are numerically
/// dependent.
pub fn orthonormalize_columns(a: &Tensor) -> Result<Tensor, TensorError> {
    let (n, k) = a.dims2()?;
    if k > n {
        return Err(TensorError::Invalid(format!("cannot orthonormalise {k} columns in R^{n}")));
    }
    let mut cols: Vec<Vec<f64>> = (0..k).map(|j| (0..n).map(|i| a.data()[i * k + j]).collect()).collect();
    for j in 0..k {
        for _pass in 0..2 {
            for p in 0..j {
                let d: f64 = cols[j].iter().zip(&cols[p]).map(|(x, y)| x * y).sum();
                let (head, tail) = cols.split_at_mut(j);
                for (x, y) in tail[0].iter_mut().zip(&head[p]) {
                    *x -= d * y;
                }
            }
        }
        let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(TensorError::Invalid(format!("column {j} is linearly dependent")));
        }
        for v in cols[j].iter_mut() {
            *v /= norm;
        }
    }
    let mut out = vec![0.0; n * k];
    for (j, c) in cols.iter().enumerate() {
        for i in 0..n {
            out[i * k + j] = c[i];
        }
    }
    Tensor::new(&[n, k], out)
}

/// Eigenvalues of a symmetric matrix in ascending order (cyclic Jacobi).
pub fn symmetric_eigenvalues(a: &Tensor) -> Result<Vec<f64>, TensorError> {
    let (n, c) = a.dims2()?;
    if n != c {
        return Err(TensorError::Invalid(format!("eigenvalues of non-square {n}x{c}")));
    }
    let mut m = a.data().to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * cs;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = cs * akp - sn * akq;
                    m[k * n + q] = sn * akp + cs * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = cs * apk - sn * aqk;
                    m[q * n + k] = sn * apk + cs * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    ev.sort_by(f64::total_cmp);
    Ok(ev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::{gemm, Transpose};

    #[test]
    fn columns_become_orthonormal() {
        let mut rng = Rng::new(1);
        let a = rng.gaussian(&[20, 6], 0.0, 1.0).unwrap();
        let q = orthonormalize_columns(&a).unwrap();
        let qtq = gemm(&q, Transpose::Yes, &q, Transpose::No).unwrap();
        assert!(qtq.max_abs_diff(&Tensor::eye(6)).unwrap() < 1e-13);
    }

    #[test]
    fn eigenvalues_of_diagonal_and_rotated() {
        let d = Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(symmetric_eigenvalues(&d).unwrap(), vec![1.0, 3.0]);
        let s = Tensor::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let ev = symmetric_eigenvalues(&s).unwrap();
        assert!((ev[0] - 1.0).abs() < 1e-12 && (ev[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn eigenvalue_sum_is_trace() {
        let mut rng = Rng::new(8);
        let b = rng.gaussian(&[7, 7], 0.0, 1.0).unwrap();
        let s = gemm(&b, Transpose::Yes, &b, Transpose::No).unwrap();
        let trace: f64 = (0..7).map(|i| s.data()[i * 7 + i]).sum();
        let ev = symmetric_eigenvalues(&s).unwrap();
        assert!((ev.iter().sum::<f64>() - trace).abs() < 1e-10);
        assert!(ev[0] > -1e-12);
    }
}
