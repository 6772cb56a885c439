//! Dense symmetric eigendecomposition and related helpers for small matrices.

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Eigenpairs of a symmetric matrix, eigenvalues in descending order.
#[derive(Debug, Clone)]
pub struct SymmetricEigen<T> {
    pub values: Vec<T>,
    /// Column `i` (i.e. `vectors[j][i]` over rows `j`) is the eigenvector of `values[i]`,
    /// stored as one `Vec` per eigenvector for convenience.
    pub vectors: Vec<Vec<T>>,
}

/// Cyclic Jacobi rotations on a symmetric `n x n` matrix.
pub fn symmetric_eigen<T: Scalar>(m: &Tensor<T>) -> Result<SymmetricEigen<T>> {
    if m.rank() != 2 || m.shape()[0] != m.shape()[1] {
        return Err(Error::invalid(format!(
            "eigen needs a square matrix, got {:?}",
            m.shape()
        )));
    }
    let n = m.shape()[0];
    let mut a: Vec<T> = m.data().to_vec();
    let mut v = Tensor::<T>::eye(n).into_data();
    let scale = a
        .iter()
        .fold(T::zero(), |s, &x| s.max(x.abs()))
        .max(T::min_positive_value());
    let tol = T::epsilon() * scale * lit(1e-2);
    for _sweep in 0..100 {
        let mut off = T::zero();
        for p in 0..n {
            for q in p + 1..n {
                off = off.max(a[p * n + q].abs());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() <= tol {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (lit::<T>(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a[j * n + j]
            .partial_cmp(&a[i * n + i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = order
        .iter()
        .map(|&i| (0..n).map(|r| v[r * n + i]).collect())
        .collect();
    Ok(SymmetricEigen { values, vectors })
}

/// Largest singular value of a 2-D matrix via the eigenvalues of `M^T M`.
pub fn spectral_norm<T: Scalar>(m: &Tensor<T>) -> Result<T> {
    let gram = m.transpose2().matmul2(m)?;
    let eig = symmetric_eigen(&gram)?;
    Ok(eig
        .values
        .first()
        .copied()
        .unwrap_or(T::zero())
        .max(T::zero())
        .sqrt())
}

/// Singular values (descending) of a 2-D matrix by one-sided Jacobi rotations,
/// which keeps small singular values accurate relative to the largest.
pub fn singular_values<T: Scalar>(m: &Tensor<T>) -> Result<Vec<T>> {
    if m.rank() != 2 {
        return Err(Error::invalid(format!(
            "singular values need a matrix, got {:?}",
            m.shape()
        )));
    }
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    // work on columns of the taller orientation
    let a = if rows >= cols {
        m.clone()
    } else {
        m.transpose2()
    };
    let (r, c) = (a.shape()[0], a.shape()[1]);
    let mut cols_v: Vec<Vec<T>> = (0..c)
        .map(|j| (0..r).map(|i| a.data()[i * c + j]).collect())
        .collect();
    let dot = |x: &[T], y: &[T]| x.iter().zip(y).map(|(&p, &q)| p * q).sum::<T>();
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..c {
            for q in p + 1..c {
                let alpha = dot(&cols_v[p], &cols_v[p]);
                let beta = dot(&cols_v[q], &cols_v[q]);
                let gamma = dot(&cols_v[p], &cols_v[q]);
                if gamma.abs() <= T::epsilon() * (alpha * beta).sqrt() || gamma == T::zero() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (lit::<T>(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let cs = T::one() / (T::one() + t * t).sqrt();
                let sn = cs * t;
                for i in 0..r {
                    let (x, y) = (cols_v[p][i], cols_v[q][i]);
                    cols_v[p][i] = cs * x - sn * y;
                    cols_v[q][i] = sn * x + cs * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<T> = cols_v.iter().map(|v| dot(v, v).sqrt()).collect();
    sv.sort_by(|x, y| y.partial_cmp(x).unwrap_or(std::cmp::Ordering::Equal));
    Ok(sv)
}

/// Projects the rows of `x [N, D]` onto the top `rank` eigenvectors of the
/// uncentered `x^T x`; directions with negligible eigenvalue are dropped.
pub fn project_top_components<T: Scalar>(x: &Tensor<T>, rank: usize) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(Error::invalid("project_top_components expects [N, D]"));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    if rank > d {
        return Err(Error::invalid(format!("rank {rank} exceeds dimension {d}")));
    }
    let eig = symmetric_eigen(&x.transpose2().matmul2(x)?)?;
    let top = eig.values.first().copied().unwrap_or(T::zero());
    let floor = top * lit(1e-12);
    let keep: Vec<&Vec<T>> = eig
        .vectors
        .iter()
        .zip(&eig.values)
        .take(rank)
        .filter(|(_, &l)| l > floor && l > T::zero())
        .map(|(v, _)| v)
        .collect();
    let mut out = vec![T::zero(); n * d];
    for i in 0..n {
        let row = x.row(i);
        for v in &keep {
            let c: T = row.iter().zip(v.iter()).map(|(&a, &b)| a * b).sum();
            for (o, &vj) in out[i * d..(i + 1) * d].iter_mut().zip(v.iter()) {
                *o += c * vj;
            }
        }
    }
    Tensor::new(vec![n, d], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn diagonal_matrix_eigen() {
        let m = Tensor::<f64>::new(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 3.0],
        )
        .unwrap();
        let e = symmetric_eigen(&m).unwrap();
        assert_eq!(e.values, vec![5.0, 3.0, 1.0]);
        assert!((e.vectors[0][1].abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn reconstructs_random_symmetric_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::randn(vec![6, 6], 1.0, &mut rng);
        let s = x.transpose2().matmul2(&x).unwrap();
        let e = symmetric_eigen(&s).unwrap();
        let n = 6;
        for i in 0..n {
            for j in 0..n {
                let r: f64 = (0..n)
                    .map(|k| e.values[k] * e.vectors[k][i] * e.vectors[k][j])
                    .sum();
                assert!((r - s.at(&[i, j])).abs() < 1e-10);
            }
        }
        assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn spectral_norm_of_rank_one() {
        // u v^T has norm |u||v|
        let m = Tensor::new(vec![2, 3], vec![1.0, 2.0, 2.0, 2.0, 4.0, 4.0]).unwrap();
        let s = spectral_norm(&m).unwrap();
        assert!((s - 5.0f64.sqrt() * 3.0).abs() < 1e-10);
    }

    #[test]
    fn full_rank_projection_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (n, d) in [(11, 8), (4, 8)] {
            let x = Tensor::<f64>::randn(vec![n, d], 1.0, &mut rng);
            let p = project_top_components(&x, d).unwrap();
            assert!(p.max_abs_diff(&x) < 1e-10);
        }
    }

    #[test]
    fn rank_one_projection_is_lossless() {
        let u = [1.0, -2.0, 0.5];
        let v = [3.0, 1.0, 0.0, 2.0];
        let x = Tensor::<f64>::from_fn(vec![3, 4], |i| u[i / 4] * v[i % 4]);
        let p = project_top_components(&x, 1).unwrap();
        assert!(p.max_abs_diff(&x) < 1e-12);
        assert!(project_top_components(&x, 5).is_err());
    }
}
