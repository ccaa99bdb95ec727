use super::NumericsError;

pub type Mat3 = [[f64; 3]; 3];

const MAX_SWEEPS: usize = 100;

/// Singular value decomposition of a 3×3 matrix, `m = U·diag(S)·Vᵀ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Svd3 {
    pub u: Mat3,
    pub s: [f64; 3],
    pub v: Mat3,
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

pub fn det(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn column(m: &Mat3, j: usize) -> [f64; 3] {
    [m[0][j], m[1][j], m[2][j]]
}

/// Eigen-decomposition of a symmetric 3×3 matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors as columns).
fn symmetric_eigen(mut a: Mat3) -> Result<([f64; 3], Mat3), NumericsError> {
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let scale: f64 = a.iter().flatten().map(|x| x * x).sum();
    for _ in 0..MAX_SWEEPS {
        let off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
        if off <= 1e-36 * scale || off == 0.0 {
            return Ok(([a[0][0], a[1][1], a[2][2]], v));
        }
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            if a[p][q] == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            // A ← Jᵀ A J with J the (p, q) Givens rotation.
            for k in 0..3 {
                let akp = a[k][p];
                let akq = a[k][q];
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let apk = a[p][k];
                let aqk = a[q][k];
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            for row in v.iter_mut() {
                let vp = row[p];
                let vq = row[q];
                row[p] = c * vp - s * vq;
                row[q] = s * vp + c * vq;
            }
        }
    }
    Err(NumericsError::NoConvergence(format!("jacobi eigen after {MAX_SWEEPS} sweeps")))
}

/// SVD through the eigenvectors of `mᵀm`. The left factor is recovered as
/// normalised columns of `m·V`, which keeps `U·S·Vᵀ` equal to `m` up to
/// the orthogonality of `V`.
pub fn svd3(m: &Mat3) -> Result<Svd3, NumericsError> {
    if m.iter().flatten().any(|x| !x.is_finite()) {
        return Err(NumericsError::NonFinite("svd3 input".into()));
    }
    let normal = mat_mul(&transpose(m), m);
    let (eig, vecs) = symmetric_eigen(normal)?;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| eig[j].total_cmp(&eig[i]));

    let mut v = [[0.0; 3]; 3];
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..3 {
            v[r][dst] = vecs[r][src];
        }
    }
    let mv = mat_mul(m, &v);
    let b = [column(&mv, 0), column(&mv, 1), column(&mv, 2)];
    let mut s = [norm(b[0]), norm(b[1]), norm(b[2])];
    let largest = s[0].max(f64::MIN_POSITIVE);
    let tiny = 1e-13 * largest;

    let unit = |x: [f64; 3], n: f64| [x[0] / n, x[1] / n, x[2] / n];
    let u0 = if s[0] > tiny { unit(b[0], s[0]) } else { [1.0, 0.0, 0.0] };
    let u1 = if s[1] > tiny {
        let d = dot(b[1], u0);
        let w = [b[1][0] - d * u0[0], b[1][1] - d * u0[1], b[1][2] - d * u0[2]];
        unit(w, norm(w))
    } else {
        // Any unit vector orthogonal to u0.
        let trial = if u0[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        let w = cross(u0, trial);
        unit(w, norm(w))
    };
    let mut u2 = cross(u0, u1);
    if s[2] > tiny {
        let proj = dot(b[2], u2);
        if proj < 0.0 {
            u2 = [-u2[0], -u2[1], -u2[2]];
        }
        s[2] = proj.abs();
    } else {
        s[2] = s[2].max(0.0);
    }
    if s[1] > tiny {
        s[1] = dot(b[1], u1).abs();
    }
    let u = [[u0[0], u1[0], u2[0]], [u0[1], u1[1], u2[1]], [u0[2], u1[2], u2[2]]];
    Ok(Svd3 { u, s, v })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::XorShift64;

    fn reconstruct(d: &Svd3) -> Mat3 {
        let mut us = d.u;
        for row in us.iter_mut() {
            for j in 0..3 {
                row[j] *= d.s[j];
            }
        }
        mat_mul(&us, &transpose(&d.v))
    }

    fn orthonormal_residual(m: &Mat3) -> f64 {
        let p = mat_mul(&transpose(m), m);
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((p[i][j] - target).abs());
            }
        }
        worst
    }

    fn max_diff(a: &Mat3, b: &Mat3) -> f64 {
        a.iter().flatten().zip(b.iter().flatten()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    #[test]
    fn identity() {
        let i = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let d = svd3(&i).unwrap();
        assert_eq!(d.s, [1.0, 1.0, 1.0]);
        assert!(max_diff(&d.u, &i) < 1e-15 && max_diff(&d.v, &i) < 1e-15);
    }

    #[test]
    fn diagonal() {
        let m = [[1.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 2.0]];
        let d = svd3(&m).unwrap();
        assert_eq!(d.s, [3.0, 2.0, 1.0]);
        assert!(max_diff(&reconstruct(&d), &m) < 1e-15);
    }

    #[test]
    fn random_reconstruction_and_orthonormality() {
        let mut rng = XorShift64::new(77);
        for _ in 0..2000 {
            let mut m = [[0.0; 3]; 3];
            for x in m.iter_mut().flatten() {
                *x = rng.uniform(-10.0, 10.0);
            }
            let d = svd3(&m).unwrap();
            assert!(max_diff(&reconstruct(&d), &m) <= 1e-9);
            assert!(orthonormal_residual(&d.u) <= 1e-9);
            assert!(orthonormal_residual(&d.v) <= 1e-9);
            assert!(d.s[0] >= d.s[1] && d.s[1] >= d.s[2] && d.s[2] >= 0.0);
        }
    }

    #[test]
    fn rank_deficient() {
        let m = [[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 0.0, 0.0]];
        let d = svd3(&m).unwrap();
        assert!(max_diff(&reconstruct(&d), &m) <= 1e-9);
        assert!(orthonormal_residual(&d.u) <= 1e-9);
        assert!(d.s[1].abs() < 1e-7 && d.s[2].abs() < 1e-7);
        let zero = svd3(&[[0.0; 3]; 3]).unwrap();
        assert_eq!(zero.s, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_finite_rejected() {
        let mut m = [[0.0; 3]; 3];
        m[1][1] = f64::NAN;
        assert!(svd3(&m).is_err());
    }
}
