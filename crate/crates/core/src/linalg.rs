//! Closed-form 2x2 matrix helpers. Everything in the crate that needs a
//! matrix is a 2x2 symmetric covariance, so there is no need for a general
//! linear algebra dependency.

pub type Point = [f64; 2];
pub type Mat2 = [[f64; 2]; 2];

pub const DIM: usize = 2;

pub const IDENTITY: Mat2 = [[1.0, 0.0], [0.0, 1.0]];

pub fn det(m: &Mat2) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

pub fn inverse(m: &Mat2) -> Option<Mat2> {
    let d = det(m);
    if d == 0.0 || !d.is_finite() {
        return None;
    }
    Some([[m[1][1] / d, -m[0][1] / d], [-m[1][0] / d, m[0][0] / d]])
}

pub fn mat_vec(m: &Mat2, v: &Point) -> Point {
    [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
}

pub fn mat_mul(a: &Mat2, b: &Mat2) -> Mat2 {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

pub fn add(a: &Mat2, b: &Mat2) -> Mat2 {
    [[a[0][0] + b[0][0], a[0][1] + b[0][1]], [a[1][0] + b[1][0], a[1][1] + b[1][1]]]
}

pub fn scale(a: &Mat2, s: f64) -> Mat2 {
    [[a[0][0] * s, a[0][1] * s], [a[1][0] * s, a[1][1] * s]]
}

pub fn transpose(m: &Mat2) -> Mat2 {
    [[m[0][0], m[1][0]], [m[0][1], m[1][1]]]
}

pub fn trace(m: &Mat2) -> f64 {
    m[0][0] + m[1][1]
}

pub fn frobenius(m: &Mat2) -> f64 {
    m.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn is_symmetric(m: &Mat2, tol: f64) -> bool {
    (m[0][1] - m[1][0]).abs() <= tol * (1.0 + m[0][1].abs().max(m[1][0].abs()))
}

/// Eigen-decomposition of a symmetric 2x2 matrix. Returns eigenvalues in
/// descending order and the matching unit eigenvectors as columns.
pub fn sym_eigen(m: &Mat2) -> ([f64; 2], Mat2) {
    let (a, b, d) = (m[0][0], 0.5 * (m[0][1] + m[1][0]), m[1][1]);
    let mean = 0.5 * (a + d);
    let radius = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    let (l1, l2) = (mean + radius, mean - radius);
    if b.abs() <= 1e-300 {
        return if a >= d { ([a, d], IDENTITY) } else { ([d, a], [[0.0, 1.0], [1.0, 0.0]]) };
    }
    // (A - l1 I) v = 0  =>  v = (b, l1 - a); pick the better conditioned form.
    let v = if (l1 - a).abs() > (l1 - d).abs() { [b, l1 - a] } else { [l1 - d, b] };
    let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
    let (c, s) = (v[0] / n, v[1] / n);
    ([l1, l2], [[c, -s], [s, c]])
}

/// Principal square root of a symmetric positive semi-definite matrix;
/// small negative eigenvalues from rounding are clipped to zero.
pub fn sqrt_psd(m: &Mat2) -> Mat2 {
    let (vals, vecs) = sym_eigen(m);
    let r = [vals[0].max(0.0).sqrt(), vals[1].max(0.0).sqrt()];
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = vecs[i][0] * r[0] * vecs[j][0] + vecs[i][1] * r[1] * vecs[j][1];
        }
    }
    out
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(m: &Mat2) -> Option<Mat2> {
    if m[0][0] <= 0.0 {
        return None;
    }
    let l00 = m[0][0].sqrt();
    let l10 = m[1][0] / l00;
    let rest = m[1][1] - l10 * l10;
    if rest < 0.0 {
        return None;
    }
    Some([[l00, 0.0], [l10, rest.sqrt()]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn eigen_reconstructs() {
        for m in [[[2.0, 0.3], [0.3, 1.0]], [[1.0, 0.0], [0.0, 3.0]], [[0.5, -0.49], [-0.49, 0.5]]] {
            let (vals, v) = sym_eigen(&m);
            assert!(vals[0] >= vals[1]);
            for i in 0..2 {
                for j in 0..2 {
                    let r = v[i][0] * vals[0] * v[j][0] + v[i][1] * vals[1] * v[j][1];
                    assert_abs_diff_eq!(r, m[i][j], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn sqrt_squares_back() {
        let m = [[2.0, 0.7], [0.7, 1.5]];
        let r = sqrt_psd(&m);
        let sq = mat_mul(&r, &r);
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(sq[i][j], m[i][j], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn cholesky_and_inverse() {
        let m = [[4.0, 1.0], [1.0, 2.0]];
        let l = cholesky(&m).unwrap();
        let lt = [[l[0][0], l[1][0]], [l[0][1], l[1][1]]];
        let back = mat_mul(&l, &lt);
        let inv = inverse(&m).unwrap();
        let id = mat_mul(&m, &inv);
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(back[i][j], m[i][j], epsilon = 1e-12);
                assert_abs_diff_eq!(id[i][j], IDENTITY[i][j], epsilon = 1e-12);
            }
        }
        assert!(cholesky(&[[1.0, 2.0], [2.0, 1.0]]).is_none());
    }
}
