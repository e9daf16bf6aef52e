//! Matrix-function oracles independent of the closed forms under test.

use blursplat::lie::{Pose, Rotation};
use nalgebra::{Matrix3, Matrix4, Vector3};

/// 4x4 twist matrix `[[phi^, rho], [0, 0]]`.
pub fn twist_matrix(xi: &[f64; 6]) -> Matrix4<f64> {
    let (r, p) = (&xi[..3], &xi[3..]);
    Matrix4::new(
        0.0, -p[2], p[1], r[0], //
        p[2], 0.0, -p[0], r[1], //
        -p[1], p[0], 0.0, r[2], //
        0.0, 0.0, 0.0, 0.0,
    )
}

/// Truncated power series; callers keep the argument small.
pub fn exp_series(m: &Matrix4<f64>, terms: usize) -> Matrix4<f64> {
    let mut sum = Matrix4::identity();
    let mut term = Matrix4::identity();
    for k in 1..terms {
        term = term * m / k as f64;
        sum += term;
    }
    sum
}

/// Scaling and squaring around [`exp_series`] for arbitrary arguments.
pub fn expm(m: &Matrix4<f64>) -> Matrix4<f64> {
    let s = (m.norm().max(1.0).log2().ceil() as i32 + 2).max(0);
    let mut e = exp_series(&(m / 2f64.powi(s)), 20);
    for _ in 0..s {
        e = e * e;
    }
    e
}

/// Principal matrix logarithm: repeated Denman–Beavers square roots, then
/// the Mercator series `log(I + A) = A - A^2/2 + A^3/3 - ...`.
pub fn logm(m: &Matrix4<f64>) -> Matrix4<f64> {
    let id = Matrix4::identity();
    let mut x = *m;
    let mut roots = 0;
    while (x - id).norm() > 1e-3 {
        let (mut y, mut z) = (x, id);
        for _ in 0..100 {
            let (yi, zi) = (y.try_inverse().unwrap(), z.try_inverse().unwrap());
            let (ny, nz) = (0.5 * (y + zi), 0.5 * (z + yi));
            let done = (ny - y).norm() < 1e-15 * ny.norm();
            y = ny;
            z = nz;
            if done {
                break;
            }
        }
        x = y;
        roots += 1;
    }
    let a = x - id;
    let mut sum = Matrix4::zeros();
    let mut pow = id;
    for k in 1..30 {
        pow *= a;
        let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
        sum += pow * (sign / k as f64);
    }
    sum * 2f64.powi(roots)
}

/// `(rho, phi)` of a twist matrix.
pub fn vee(m: &Matrix4<f64>) -> [f64; 6] {
    [m[(0, 3)], m[(1, 3)], m[(2, 3)], m[(2, 1)], m[(0, 2)], m[(1, 0)]]
}

pub fn pose_from_matrix(m: &Matrix4<f64>) -> Pose {
    let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
    Pose::new(Rotation::from_matrix(&r), Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]))
}

pub fn series_exp(xi: &[f64; 6]) -> Matrix4<f64> {
    expm(&twist_matrix(xi))
}
