//! Small dense matrix helpers on row-major slices.
//!
//! Hot loops work on `d × d` blocks with `d ≤ 9`, so plain slices beat
//! allocating `nalgebra` matrices; `nalgebra` backs the decompositions.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

pub fn identity(d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = 1.0;
    }
    m
}

/// `out = a · b`.
pub fn matmul_into(a: &[f64], b: &[f64], d: usize, out: &mut [f64]) {
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += a[i * d + k] * b[k * d + j];
            }
            out[i * d + j] = s;
        }
    }
}

pub fn matmul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    matmul_into(a, b, d, &mut out);
    out
}

/// `aᵀ · b`.
pub fn matmul_tn(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += a[k * d + i] * b[k * d + j];
            }
            out[i * d + j] = s;
        }
    }
    out
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += a[i * d + k] * b[j * d + k];
            }
            out[i * d + j] = s;
        }
    }
    out
}

pub fn matvec(a: &[f64], v: &[f64], d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| (0..d).map(|k| a[i * d + k] * v[k]).sum())
        .collect()
}

pub fn transpose(a: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            out[j * d + i] = a[i * d + j];
        }
    }
    out
}

/// `a·b − b·a`.
pub fn commutator(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let ab = matmul(a, b, d);
    let ba = matmul(b, a, d);
    ab.iter().zip(&ba).map(|(x, y)| x - y).collect()
}

pub fn skew_part(a: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = 0.5 * (a[i * d + j] - a[j * d + i]);
        }
    }
    out
}

pub fn sym_part(a: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = 0.5 * (a[i * d + j] + a[j * d + i]);
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn trace(a: &[f64], d: usize) -> f64 {
    (0..d).map(|i| a[i * d + i]).sum()
}

pub fn to_dmatrix(a: &[f64], d: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(d, d, a)
}

pub fn from_dmatrix(m: &DMatrix<f64>) -> Vec<f64> {
    let d = m.nrows();
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = m[(i, j)];
        }
    }
    out
}

/// Matrix exponential of a skew-symmetric matrix.
pub fn expm_skew(w: &[f64], d: usize) -> Vec<f64> {
    match d {
        1 => vec![1.0],
        2 => {
            let t = w[1];
            let (s, c) = t.sin_cos();
            vec![c, s, -s, c]
        }
        3 => {
            // Rodrigues with axis vector (w21, w02, w10)
            let (x, y, z) = (w[7], w[2], w[3]);
            let th2 = x * x + y * y + z * z;
            let th = th2.sqrt();
            let (a, b) = if th < 1e-6 {
                (
                    1.0 - th2 / 6.0 + th2 * th2 / 120.0,
                    0.5 - th2 / 24.0 + th2 * th2 / 720.0,
                )
            } else {
                (th.sin() / th, (1.0 - th.cos()) / th2)
            };
            let w2 = matmul(w, w, 3);
            let mut out = identity(3);
            for i in 0..9 {
                out[i] += a * w[i] + b * w2[i];
            }
            out
        }
        _ => from_dmatrix(&to_dmatrix(w, d).exp()),
    }
}

pub fn expm(a: &[f64], d: usize) -> Vec<f64> {
    from_dmatrix(&to_dmatrix(a, d).exp())
}

pub fn determinant(a: &[f64], d: usize) -> f64 {
    to_dmatrix(a, d).determinant()
}

/// Orthogonal polar factor with positive determinant (nearest point of
/// `SO(d)` in the Frobenius metric), by scaled Newton iteration
/// `X ← (γX + (γX)^{-T})/2` run to `1e-14`.
pub fn polar_rotation(a: &[f64], d: usize) -> Result<Vec<f64>> {
    let det = determinant(a, d);
    if !(det.abs() > 1e-300) || !det.is_finite() {
        return Err(Error::Degenerate(format!(
            "singular matrix in polar decomposition (det = {det:e})"
        )));
    }
    if det < 0.0 {
        return polar_rotation_svd(a, d);
    }
    let mut x = to_dmatrix(a, d);
    for _ in 0..100 {
        let inv = x
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Degenerate("polar iterate became singular".into()))?;
        let inv_t = inv.transpose();
        let gamma = ((inv.norm()) / x.norm()).sqrt();
        let next = (&x * gamma + &inv_t / gamma) * 0.5;
        let delta = (&next - &x).norm();
        x = next;
        if delta <= 1e-14 * (d as f64).sqrt() {
            break;
        }
    }
    // one unscaled step to settle rounding
    let inv_t = x
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("polar iterate became singular".into()))?
        .transpose();
    x = (&x + inv_t) * 0.5;
    Ok(from_dmatrix(&x))
}

fn polar_rotation_svd(a: &[f64], d: usize) -> Result<Vec<f64>> {
    let svd = to_dmatrix(a, d).svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => {
            return Err(Error::Degenerate(
                "SVD failed in polar decomposition".into(),
            ))
        }
    };
    let mut s = DMatrix::<f64>::identity(d, d);
    if (&u * &vt).determinant() < 0.0 {
        // flip the direction of the smallest singular value
        let k = (0..d)
            .min_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]))
            .unwrap();
        s[(k, k)] = -1.0;
    }
    Ok(from_dmatrix(&(u * s * vt)))
}

/// Eigenvalues ascending with matching eigenvector columns.
pub fn symmetric_eigen(a: &[f64], d: usize) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(to_dmatrix(&sym_part(a, d), d));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vecs = DMatrix::zeros(d, d);
    for (c, &i) in order.iter().enumerate() {
        vecs.set_column(c, &eig.eigenvectors.column(i));
    }
    (vals, vecs)
}

/// Largest singular value.
pub fn operator_norm(a: &[f64], d: usize) -> f64 {
    to_dmatrix(a, d).singular_values().max()
}

/// Re-orthonormalize the columns of a square matrix onto `SO(d)`.
pub fn reorthonormalize(a: &[f64], d: usize) -> Result<Vec<f64>> {
    polar_rotation(a, d)
}

/// Modified Gram–Schmidt on a list of vectors, in order.
pub fn gram_schmidt(vectors: &mut [Vec<f64>]) -> Result<()> {
    for i in 0..vectors.len() {
        for j in 0..i {
            let (head, tail) = vectors.split_at_mut(i);
            let c = dot(&tail[0], &head[j]);
            for (x, y) in tail[0].iter_mut().zip(&head[j]) {
                *x -= c * y;
            }
        }
        let n = norm(&vectors[i]);
        if n < 1e-12 {
            return Err(Error::Degenerate(format!(
                "Gram–Schmidt: vector {i} is dependent"
            )));
        }
        vectors[i].iter_mut().for_each(|x| *x /= n);
    }
    Ok(())
}
