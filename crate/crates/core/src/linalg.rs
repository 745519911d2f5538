//! Small dense linear-algebra helpers shared by the certificate and
//! frequency-domain code.
//!
//! The passivity matrices in this crate are strongly graded: the angle
//! weight is of order 1e12 while the filter resistance entries are of order
//! 1e-6. A Householder-based eigensolver loses the small eigenvalues in that
//! regime, so eigenvalues are computed with cyclic Jacobi rotations, which
//! never touch exactly-decoupled entries and keep high relative accuracy on
//! scaled definite matrices.

use nalgebra::{DMatrix, Matrix2, Vector2};
use num_complex::Complex64;

pub type Vec2 = Vector2<f64>;

/// Generator of planar rotations, `[[0, -1], [1, 0]]`.
///
/// `d/dθ [cos θ, sin θ] = rot90() * [cos θ, sin θ]`.
pub fn rot90() -> Matrix2<f64> {
    Matrix2::new(0.0, -1.0, 1.0, 0.0)
}

/// `[cos θ, sin θ]`.
pub fn unit(theta: f64) -> Vec2 {
    let (s, c) = theta.sin_cos();
    Vec2::new(c, s)
}

/// Rotates `v` counter-clockwise by `angle`.
pub fn rotate(v: &Vec2, angle: f64) -> Vec2 {
    let (s, c) = angle.sin_cos();
    Vec2::new(c * v.x - s * v.y, s * v.x + c * v.y)
}

/// Eigenvalues of a real symmetric matrix in ascending order.
///
/// Only the lower triangle is read; the input is symmetrised internally.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "symmetric_eigenvalues needs a square matrix");
    let mut a = m.clone();
    for i in 0..n {
        for j in 0..i {
            a[(j, i)] = a[(i, j)];
        }
    }

    for sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[(p, q)].abs();
            }
        }
        if off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                let g = 100.0 * apq.abs();
                if sweep > 3 && app.abs() + g == app.abs() && aqq.abs() + g == aqq.abs() {
                    a[(p, q)] = 0.0;
                    a[(q, p)] = 0.0;
                    continue;
                }
                let h = aqq - app;
                let t = if h.abs() + g == h.abs() {
                    apq / h
                } else {
                    let theta = 0.5 * h / apq;
                    let t = 1.0 / (theta.abs() + (theta * theta + 1.0).sqrt());
                    if theta < 0.0 {
                        -t
                    } else {
                        t
                    }
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                a[(p, p)] = app - t * apq;
                a[(q, q)] = aqq + t * apq;
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for r in 0..n {
                    if r == p || r == q {
                        continue;
                    }
                    let arp = a[(r, p)];
                    let arq = a[(r, q)];
                    let new_rp = c * arp - s * arq;
                    let new_rq = s * arp + c * arq;
                    a[(r, p)] = new_rp;
                    a[(p, r)] = new_rp;
                    a[(r, q)] = new_rq;
                    a[(q, r)] = new_rq;
                }
            }
        }
    }

    let mut eig: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    eig.sort_by(f64::total_cmp);
    eig
}

/// Smallest eigenvalue of a real symmetric matrix (`+inf` for an empty one).
pub fn symmetric_min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetric_eigenvalues(m)
        .first()
        .copied()
        .unwrap_or(f64::INFINITY)
}

/// Smallest eigenvalue of the Hermitian part `(M + M^H)/2` of a complex
/// square matrix.
///
/// Uses the real embedding `[[Re, -Im], [Im, Re]]`, whose spectrum is the
/// Hermitian spectrum with every eigenvalue doubled in multiplicity.
pub fn hermitian_part_min_eigenvalue(m: &DMatrix<Complex64>) -> f64 {
    let n = m.nrows();
    let mut emb = DMatrix::<f64>::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            let h = 0.5 * (m[(i, j)] + m[(j, i)].conj());
            emb[(i, j)] = h.re;
            emb[(i + n, j + n)] = h.re;
            emb[(i + n, j)] = h.im;
            emb[(i, j + n)] = -h.im;
        }
    }
    symmetric_min_eigenvalue(&emb)
}

/// Frobenius norm of a real matrix.
pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}
