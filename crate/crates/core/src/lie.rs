//! SE(3)/so(3) group operations and exposure-trajectory interpolation.
//!
//! Twists are ordered `(rho, phi)`: translational part first, rotational
//! part second. Poses are perturbed on the left, `T_eff = exp(eps) * T`.

use nalgebra::{Matrix3, Matrix4, Matrix6, Quaternion, Rotation3, UnitQuaternion, Vector3, Vector6};
use thiserror::Error;

/// Below this rotation angle `se3_exp` switches to its Taylor branch.
pub const SMALL_ANGLE: f64 = 1e-8;

/// `se3_log` refuses rotations at least this close to pi.
pub const NEAR_PI_MARGIN: f64 = 1e-6;

// Taylor expansions of the Jacobian coefficients are used below this angle.
const SERIES_ANGLE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LieError {
    #[error("rotation angle {angle} rad is within {NEAR_PI_MARGIN} of pi; logarithm is ambiguous")]
    AngleNearPi { angle: f64 },
    #[error("interpolation parameter {0} is outside [0, 1]")]
    Domain(f64),
    #[error("{kind:?} trajectory needs {expected} knots, got {got}")]
    KnotCount {
        kind: TrajectoryKind,
        expected: usize,
        got: usize,
    },
}

/// Unit quaternion, scalar first, canonicalized to `w >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(UnitQuaternion<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(UnitQuaternion::identity())
    }

    /// Normalizes `(w, x, y, z)` and flips its sign so that `w >= 0`.
    ///
    /// A zero quaternion maps to the identity.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Self {
        let q = Quaternion::new(w, x, y, z);
        if q.norm() == 0.0 {
            return Self::identity();
        }
        Self::canonical(UnitQuaternion::new_normalize(q))
    }

    pub fn from_unit_quaternion(q: UnitQuaternion<f64>) -> Self {
        Self::canonical(UnitQuaternion::new_normalize(q.into_inner()))
    }

    /// Builds a rotation from a matrix assumed orthonormal.
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let r = Rotation3::from_matrix_unchecked(*m);
        Self::from_unit_quaternion(UnitQuaternion::from_rotation_matrix(&r))
    }

    fn canonical(q: UnitQuaternion<f64>) -> Self {
        if q.w < 0.0 {
            Rotation(UnitQuaternion::new_unchecked(-q.into_inner()))
        } else {
            Rotation(q)
        }
    }

    pub fn quaternion(&self) -> &UnitQuaternion<f64> {
        &self.0
    }

    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.0.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        self.0.to_rotation_matrix().into_inner()
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        let q = self.0.quaternion();
        2.0 * q.imag().norm().atan2(q.w.abs())
    }

    pub fn inverse(&self) -> Self {
        Self::canonical(self.0.inverse())
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// so(3) exponential.
    pub fn exp(phi: &Vector3<f64>) -> Self {
        let theta = phi.norm();
        let (w, s) = if theta < SMALL_ANGLE {
            let t2 = theta * theta;
            (1.0 - t2 / 8.0, 0.5 * (1.0 - t2 / 24.0))
        } else {
            let half = 0.5 * theta;
            (half.cos(), half.sin() / theta)
        };
        Self::from_wxyz(w, s * phi.x, s * phi.y, s * phi.z)
    }

    /// so(3) logarithm; angle of the result lies in `[0, pi]`.
    pub fn log(&self) -> Vector3<f64> {
        let q = self.0.quaternion();
        let v = q.imag();
        let n = v.norm();
        let w = q.w;
        let scale = if n < 0.5 * SMALL_ANGLE {
            // atan2(n, w) / n for small n
            2.0 / w * (1.0 - n * n / (3.0 * w * w))
        } else {
            2.0 * n.atan2(w) / n
        };
        v * scale
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation::from_unit_quaternion(self.0 * rhs.0)
    }
}

/// Rigid transform `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Pose::new(Rotation::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Pose::new(Rotation::identity(), t)
    }

    pub fn inverse(&self) -> Pose {
        let r_inv = self.rotation.inverse();
        Pose::new(r_inv, -r_inv.rotate(&self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.matrix()
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Camera center `-R^T t` when `self` maps world to camera.
    pub fn camera_center(&self) -> Vector3<f64> {
        self.inverse().translation
    }

    /// Adjoint `[[R, t^ R], [0, R]]` in `(rho, phi)` ordering.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rotation.matrix();
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(self.translation.cross_matrix() * r));
        ad
    }

    /// Rotation angle and translation distance of `self^-1 * other`.
    pub fn distance(&self, other: &Pose) -> (f64, f64) {
        let d = self.inverse() * *other;
        (d.rotation.angle(), d.translation.norm())
    }

    /// Left perturbation `exp(xi) * self`; a zero twist returns `self` bit-for-bit.
    pub fn perturbed(&self, xi: &Twist) -> Pose {
        if xi.is_zero() {
            return *self;
        }
        se3_exp(xi) * *self
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        Pose::new(
            self.rotation * rhs.rotation,
            self.rotation.rotate(&rhs.translation) + self.translation,
        )
    }
}

/// Element of se(3), `(rho, phi)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist(pub Vector6<f64>);

impl Twist {
    pub fn new(rho: Vector3<f64>, phi: Vector3<f64>) -> Self {
        Twist(Vector6::new(rho.x, rho.y, rho.z, phi.x, phi.y, phi.z))
    }

    pub fn zero() -> Self {
        Twist(Vector6::zeros())
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Twist(Vector6::from_column_slice(v))
    }

    pub fn rho(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn phi(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn scaled(&self, s: f64) -> Twist {
        Twist(self.0 * s)
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&x| x == 0.0)
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

// (1 - cos t) / t^2
fn coef_b(theta: f64) -> f64 {
    let s = sinc(0.5 * theta);
    0.5 * s * s
}

// (t - sin t) / t^3
fn coef_c(theta: f64) -> f64 {
    let t2 = theta * theta;
    if theta < SERIES_ANGLE {
        1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0 - t2 * t2 * t2 / 362_880.0
    } else {
        (theta - theta.sin()) / (t2 * theta)
    }
}

// (1 - (t/2) cot(t/2)) / t^2
fn coef_d(theta: f64) -> f64 {
    let t2 = theta * theta;
    if theta < SERIES_ANGLE {
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30_240.0 + t2 * t2 * t2 / 1_209_600.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half * half.cos() / half.sin()) / t2
    }
}

// (t^2 + 2 cos t - 2) / (2 t^4)
fn coef_q3(theta: f64) -> f64 {
    let t2 = theta * theta;
    if theta < SERIES_ANGLE {
        1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40_320.0 - t2 * t2 * t2 / 3_628_800.0
    } else {
        (t2 + 2.0 * theta.cos() - 2.0) / (2.0 * t2 * t2)
    }
}

// (2t - 3 sin t + t cos t) / (2 t^5)
fn coef_q4(theta: f64) -> f64 {
    let t2 = theta * theta;
    if theta < SERIES_ANGLE {
        1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120_960.0 - t2 * t2 * t2 / 9_979_200.0
    } else {
        (2.0 * theta - 3.0 * theta.sin() + theta * theta.cos()) / (2.0 * t2 * t2 * theta)
    }
}

/// Left Jacobian of SO(3); also the `V` matrix of the SE(3) exponential.
pub fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let h = phi.cross_matrix();
    Matrix3::identity() + h * coef_b(theta) + h * h * coef_c(theta)
}

pub fn so3_left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let h = phi.cross_matrix();
    Matrix3::identity() - h * 0.5 + h * h * coef_d(theta)
}

// Coupling block of the SE(3) left Jacobian.
fn se3_q_block(rho: &Vector3<f64>, phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let p = phi.cross_matrix();
    let r = rho.cross_matrix();
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    let pp = p * p;
    r * 0.5
        + (pr + rp + prp) * coef_c(theta)
        + (pp * r + rp * p - prp * 3.0) * coef_q3(theta)
        + (prp * p + pp * r * p) * coef_q4(theta)
}

pub fn se3_left_jacobian(xi: &Twist) -> Matrix6<f64> {
    let (rho, phi) = (xi.rho(), xi.phi());
    let j = so3_left_jacobian(&phi);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    out.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&se3_q_block(&rho, &phi));
    out
}

pub fn se3_left_jacobian_inv(xi: &Twist) -> Matrix6<f64> {
    let (rho, phi) = (xi.rho(), xi.phi());
    let j_inv = so3_left_jacobian_inv(&phi);
    let q = se3_q_block(&rho, &phi);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j_inv);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j_inv);
    out.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(-j_inv * q * j_inv));
    out
}

pub fn se3_right_jacobian(xi: &Twist) -> Matrix6<f64> {
    se3_left_jacobian(&xi.scaled(-1.0))
}

pub fn se3_right_jacobian_inv(xi: &Twist) -> Matrix6<f64> {
    se3_left_jacobian_inv(&xi.scaled(-1.0))
}

/// Closed-form exponential `se(3) -> SE(3)`.
pub fn se3_exp(xi: &Twist) -> Pose {
    let (rho, phi) = (xi.rho(), xi.phi());
    let theta = phi.norm();
    let v = if theta < SMALL_ANGLE {
        let h = phi.cross_matrix();
        Matrix3::identity() + h * 0.5 + h * h / 6.0
    } else {
        so3_left_jacobian(&phi)
    };
    Pose::new(Rotation::exp(&phi), v * rho)
}

/// Logarithm `SE(3) -> se(3)`; defined for rotation angles below `pi - 1e-6`.
pub fn se3_log(pose: &Pose) -> Result<Twist, LieError> {
    let angle = pose.rotation.angle();
    if angle >= std::f64::consts::PI - NEAR_PI_MARGIN {
        return Err(LieError::AngleNearPi { angle });
    }
    let phi = pose.rotation.log();
    let rho = so3_left_jacobian_inv(&phi) * pose.translation;
    Ok(Twist::new(rho, phi))
}

fn check_unit(u: f64) -> Result<(), LieError> {
    if (0.0..=1.0).contains(&u) {
        Ok(())
    } else {
        Err(LieError::Domain(u))
    }
}

/// Cumulative cubic B-spline basis `(B1, B2, B3)` at `u`.
pub fn cubic_basis(u: f64) -> [f64; 3] {
    let u2 = u * u;
    let u3 = u2 * u;
    [
        (5.0 + 3.0 * u - 3.0 * u2 + u3) / 6.0,
        (1.0 + 3.0 * u + 3.0 * u2 - 2.0 * u3) / 6.0,
        u3 / 6.0,
    ]
}

// One factor exp(weight * log(K_from^-1 K_to)) of a product-of-exponentials curve.
struct Segment {
    from: usize,
    to: usize,
    omega: Twist,
    weight: f64,
}

// Curve K_0 * prod_j exp(w_j * Omega_j), shared by both trajectory kinds.
struct CurveEval {
    segments: Vec<Segment>,
    // prefixes[j] = K_0 * E_1 * ... * E_j
    prefixes: Vec<Pose>,
}

impl CurveEval {
    fn new(knots: &[Pose], pairs: &[(usize, usize, f64)]) -> Result<Self, LieError> {
        let mut segments = Vec::with_capacity(pairs.len());
        let mut prefixes = Vec::with_capacity(pairs.len());
        let mut acc = knots[0];
        for &(from, to, weight) in pairs {
            let omega = se3_log(&(knots[from].inverse() * knots[to]))?;
            acc = acc * se3_exp(&omega.scaled(weight));
            prefixes.push(acc);
            segments.push(Segment {
                from,
                to,
                omega,
                weight,
            });
        }
        Ok(CurveEval { segments, prefixes })
    }

    fn pose(&self, knots: &[Pose]) -> Pose {
        self.prefixes.last().copied().unwrap_or(knots[0])
    }

    fn jacobian(&self, knots: &[Pose]) -> Vec<Matrix6<f64>> {
        let mut blocks = vec![Matrix6::zeros(); knots.len()];
        blocks[0] += Matrix6::identity();
        for (seg, prefix) in self.segments.iter().zip(&self.prefixes) {
            if seg.weight == 0.0 {
                continue;
            }
            let common = prefix.adjoint()
                * se3_right_jacobian(&seg.omega.scaled(seg.weight))
                * se3_right_jacobian_inv(&seg.omega)
                * knots[seg.to].inverse().adjoint()
                * seg.weight;
            blocks[seg.to] += common;
            blocks[seg.from] -= common;
        }
        blocks
    }
}

/// `start * exp(u * log(start^-1 * end))`.
pub fn interpolate_linear(start: &Pose, end: &Pose, u: f64) -> Result<Pose, LieError> {
    check_unit(u)?;
    if u == 0.0 {
        return Ok(*start);
    }
    if u == 1.0 {
        return Ok(*end);
    }
    let knots = [*start, *end];
    Ok(CurveEval::new(&knots, &[(0, 1, u)])?.pose(&knots))
}

/// Cumulative uniform cubic B-spline over the middle segment of four knots.
pub fn interpolate_cubic(knots: &[Pose; 4], u: f64) -> Result<Pose, LieError> {
    check_unit(u)?;
    Ok(CurveEval::new(knots, &cubic_pairs(u))?.pose(knots))
}

fn cubic_pairs(u: f64) -> [(usize, usize, f64); 3] {
    let b = cubic_basis(u);
    [(0, 1, b[0]), (1, 2, b[1]), (2, 3, b[2])]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrajectoryKind {
    Linear,
    CubicBSpline,
}

impl TrajectoryKind {
    pub fn knot_count(self) -> usize {
        match self {
            TrajectoryKind::Linear => 2,
            TrajectoryKind::CubicBSpline => 4,
        }
    }

    pub fn from_knot_count(n: usize) -> Option<Self> {
        match n {
            2 => Some(TrajectoryKind::Linear),
            4 => Some(TrajectoryKind::CubicBSpline),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TrajectoryKind::Linear => "linear",
            TrajectoryKind::CubicBSpline => "cubic",
        }
    }
}

impl std::str::FromStr for TrajectoryKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" => Ok(TrajectoryKind::Linear),
            "cubic" | "cubic-bspline" | "cubicbspline" => Ok(TrajectoryKind::CubicBSpline),
            other => Err(format!("unknown trajectory kind '{other}' (expected linear|cubic)")),
        }
    }
}

/// Camera motion over one exposure: stored knots plus left perturbations.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySpline {
    kind: TrajectoryKind,
    knots: Vec<Pose>,
    knot_deltas: Vec<Twist>,
}

impl TrajectorySpline {
    pub fn new(kind: TrajectoryKind, knots: Vec<Pose>) -> Result<Self, LieError> {
        if knots.len() != kind.knot_count() {
            return Err(LieError::KnotCount {
                kind,
                expected: kind.knot_count(),
                got: knots.len(),
            });
        }
        let knot_deltas = vec![Twist::zero(); knots.len()];
        Ok(TrajectorySpline {
            kind,
            knots,
            knot_deltas,
        })
    }

    pub fn linear(start: Pose, end: Pose) -> Self {
        Self::new(TrajectoryKind::Linear, vec![start, end]).expect("two knots")
    }

    pub fn cubic(knots: [Pose; 4]) -> Self {
        Self::new(TrajectoryKind::CubicBSpline, knots.to_vec()).expect("four knots")
    }

    /// All knots equal to `pose`: a static camera.
    pub fn constant(kind: TrajectoryKind, pose: Pose) -> Self {
        Self::new(kind, vec![pose; kind.knot_count()]).expect("knot count from kind")
    }

    pub fn kind(&self) -> TrajectoryKind {
        self.kind
    }

    pub fn knots(&self) -> &[Pose] {
        &self.knots
    }

    pub fn knot_deltas(&self) -> &[Twist] {
        &self.knot_deltas
    }

    pub fn set_knot_delta(&mut self, knot: usize, delta: Twist) {
        self.knot_deltas[knot] = delta;
    }

    /// Knots with their perturbations applied.
    pub fn effective_knots(&self) -> Vec<Pose> {
        self.knots
            .iter()
            .zip(&self.knot_deltas)
            .map(|(k, d)| if d.is_zero() { *k } else { k.perturbed(d) })
            .collect()
    }

    /// Absorbs the perturbations into the knots and resets them to zero.
    pub fn fold_deltas(&mut self) {
        self.knots = self.effective_knots();
        self.knot_deltas.iter_mut().for_each(|d| *d = Twist::zero());
    }

    fn curve(&self, u: f64, knots: &[Pose]) -> Result<CurveEval, LieError> {
        check_unit(u)?;
        match self.kind {
            TrajectoryKind::Linear => CurveEval::new(knots, &[(0, 1, u)]),
            TrajectoryKind::CubicBSpline => CurveEval::new(knots, &cubic_pairs(u)),
        }
    }

    pub fn pose_at(&self, u: f64) -> Result<Pose, LieError> {
        let knots = self.effective_knots();
        match self.kind {
            TrajectoryKind::Linear => interpolate_linear(&knots[0], &knots[1], u),
            TrajectoryKind::CubicBSpline => {
                interpolate_cubic(&[knots[0], knots[1], knots[2], knots[3]], u)
            }
        }
    }

    /// Blocks `d eps_out / d eps_knot`, one 6x6 block per knot.
    pub fn pose_jacobian_wrt_knots(&self, u: f64) -> Result<KnotJacobian, LieError> {
        let knots = self.effective_knots();
        let curve = self.curve(u, &knots)?;
        Ok(KnotJacobian {
            blocks: curve.jacobian(&knots),
        })
    }

    /// Re-expresses the trajectory with another kind.
    ///
    /// Linear to cubic extends the geodesic one step beyond each end so the
    /// cubic curve reproduces the linear one exactly. Cubic to linear keeps
    /// the exposure endpoints.
    pub fn to_kind(&self, kind: TrajectoryKind) -> Result<Self, LieError> {
        if kind == self.kind {
            return Ok(self.clone());
        }
        match kind {
            TrajectoryKind::Linear => Ok(Self::linear(self.pose_at(0.0)?, self.pose_at(1.0)?)),
            TrajectoryKind::CubicBSpline => {
                let k = self.effective_knots();
                let step = se3_exp(&se3_log(&(k[0].inverse() * k[1]))?);
                Ok(Self::cubic([
                    k[0] * step.inverse(),
                    k[0],
                    k[1],
                    k[1] * step,
                ]))
            }
        }
    }
}

/// Jacobian of an interpolated pose w.r.t. knot perturbations (6 x 6K).
#[derive(Debug, Clone, PartialEq)]
pub struct KnotJacobian {
    pub blocks: Vec<Matrix6<f64>>,
}

impl KnotJacobian {
    pub fn to_matrix(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(6, 6 * self.blocks.len());
        for (k, b) in self.blocks.iter().enumerate() {
            m.view_mut((0, 6 * k), (6, 6)).copy_from(b);
        }
        m
    }
}

/// Free-function form of [`TrajectorySpline::pose_jacobian_wrt_knots`].
pub fn pose_jacobian_wrt_knots(traj: &TrajectorySpline, u: f64) -> Result<KnotJacobian, LieError> {
    traj.pose_jacobian_wrt_knots(u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn assert_pose_close(a: &Pose, b: &Pose, tol: f64) {
        let (ang, tr) = a.distance(b);
        assert!(ang < tol && tr < tol, "angle {ang}, translation {tr}");
    }

    #[test]
    fn exp_zero_is_identity() {
        assert_eq!(se3_exp(&Twist::zero()), Pose::identity());
    }

    #[test]
    fn exp_quarter_turn_about_z() {
        let p = se3_exp(&Twist::new(Vector3::zeros(), Vector3::new(0.0, 0.0, PI / 2.0)));
        let r = p.rotation_matrix();
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((r - expected).abs().max() < 1e-15);
        assert_eq!(p.translation, Vector3::zeros());
    }

    #[test]
    fn log_identity_is_zero() {
        assert_eq!(se3_log(&Pose::identity()).unwrap(), Twist::zero());
    }

    #[test]
    fn log_rejects_half_turn() {
        let p = se3_exp(&Twist::new(Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, PI, 0.0)));
        assert!(matches!(se3_log(&p), Err(LieError::AngleNearPi { .. })));
    }

    #[test]
    fn small_angle_branch_matches_closed_form() {
        let rho = Vector3::new(0.3, -0.2, 0.5);
        let phi = Vector3::new(1.0, 2.0, -1.0).normalize() * 0.9e-8;
        let p = se3_exp(&Twist::new(rho, phi));
        let closed_t = so3_left_jacobian(&phi) * rho;
        let closed_q = UnitQuaternion::from_scaled_axis(phi);
        assert!((p.translation - closed_t).norm() < 1e-16);
        assert!(p.rotation.quaternion().angle_to(&closed_q) < 1e-16);
        let back = se3_log(&p).unwrap();
        assert!((back.0 - Twist::new(rho, phi).0).norm() < 1e-15);
    }

    #[test]
    fn rotation_is_canonical() {
        let r = Rotation::from_wxyz(-0.5, 0.5, 0.5, 0.5);
        assert!(r.wxyz()[0] > 0.0);
        let composed = Rotation::exp(&Vector3::new(0.0, 2.5, 0.0)) * Rotation::exp(&Vector3::new(0.0, 2.5, 0.0));
        assert!(composed.wxyz()[0] >= 0.0);
        assert!((composed.quaternion().norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let p = se3_exp(&Twist(Vector6::new(1.0, -2.0, 0.5, 0.3, -1.1, 2.0)));
        let (ang, tr) = (p * p.inverse()).distance(&Pose::identity());
        assert!(ang < 1e-9 && tr < 1e-9);
    }

    #[test]
    fn linear_endpoints_and_midpoint() {
        let a = se3_exp(&Twist(Vector6::new(0.1, 0.2, 0.3, 0.4, -0.2, 0.1)));
        let b = se3_exp(&Twist(Vector6::new(-0.4, 0.0, 1.0, -0.3, 0.5, 0.2)));
        assert_pose_close(&interpolate_linear(&a, &b, 0.0).unwrap(), &a, 1e-12);
        assert_pose_close(&interpolate_linear(&a, &b, 1.0).unwrap(), &b, 1e-12);
        let s = Pose::from_translation(Vector3::new(1.0, 2.0, 3.0));
        let e = Pose::from_translation(Vector3::new(3.0, 2.0, -1.0));
        let m = interpolate_linear(&s, &e, 0.5).unwrap();
        assert!((m.translation - Vector3::new(2.0, 2.0, 1.0)).norm() < 1e-12);
        assert_eq!(interpolate_linear(&s, &e, 1.5), Err(LieError::Domain(1.5)));
    }

    #[test]
    fn cubic_on_translations() {
        let k = [0.0, 1.0, 2.0, 3.0].map(|x| Pose::from_translation(Vector3::new(x, 0.0, 0.0)));
        let p0 = interpolate_cubic(&k, 0.0).unwrap();
        let p1 = interpolate_cubic(&k, 1.0).unwrap();
        assert!((p0.translation - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
        assert!((p1.translation - Vector3::new(2.0, 0.0, 0.0)).norm() < 1e-12);
        assert!(matches!(interpolate_cubic(&k, -0.1), Err(LieError::Domain(_))));
    }

    #[test]
    fn cubic_constant_knots() {
        let p = se3_exp(&Twist(Vector6::new(0.5, -1.0, 2.0, 0.2, 0.4, -0.6)));
        for u in [0.0, 0.3, 0.77, 1.0] {
            assert_pose_close(&interpolate_cubic(&[p; 4], u).unwrap(), &p, 1e-12);
        }
    }

    #[test]
    fn linear_jacobian_endpoints() {
        let a = se3_exp(&Twist(Vector6::new(0.1, 0.2, 0.3, 0.4, -0.2, 0.1)));
        let b = se3_exp(&Twist(Vector6::new(-0.4, 0.0, 1.0, -0.3, 0.5, 0.2)));
        let t = TrajectorySpline::linear(a, b);
        let j0 = t.pose_jacobian_wrt_knots(0.0).unwrap();
        assert!((j0.blocks[0] - Matrix6::identity()).abs().max() < 1e-12);
        assert!(j0.blocks[1].abs().max() < 1e-12);
        let j1 = t.pose_jacobian_wrt_knots(1.0).unwrap();
        assert!(j1.blocks[0].abs().max() < 1e-12);
        assert!((j1.blocks[1] - Matrix6::identity()).abs().max() < 1e-12);
        assert_eq!(j1.to_matrix().shape(), (6, 12));
    }

    #[test]
    fn fold_preserves_effective_pose() {
        let mut t = TrajectorySpline::linear(Pose::identity(), se3_exp(&Twist(Vector6::new(1.0, 0.0, 0.0, 0.0, 0.2, 0.0))));
        t.set_knot_delta(0, Twist(Vector6::new(0.01, 0.02, -0.03, 0.001, 0.002, 0.003)));
        t.set_knot_delta(1, Twist(Vector6::new(-0.01, 0.0, 0.03, 0.0, -0.002, 0.001)));
        let before = t.pose_at(0.4).unwrap();
        t.fold_deltas();
        assert!(t.knot_deltas().iter().all(Twist::is_zero));
        assert_pose_close(&t.pose_at(0.4).unwrap(), &before, 1e-12);
    }

    #[test]
    fn linear_to_cubic_reproduces_curve() {
        let a = se3_exp(&Twist(Vector6::new(0.1, 0.2, 0.3, 0.4, -0.2, 0.1)));
        let b = se3_exp(&Twist(Vector6::new(-0.4, 0.0, 1.0, -0.3, 0.5, 0.2)));
        let lin = TrajectorySpline::linear(a, b);
        let cub = lin.to_kind(TrajectoryKind::CubicBSpline).unwrap();
        for u in [0.0, 0.25, 0.5, 0.9, 1.0] {
            assert_pose_close(&cub.pose_at(u).unwrap(), &lin.pose_at(u).unwrap(), 1e-10);
        }
        let back = cub.to_kind(TrajectoryKind::Linear).unwrap();
        assert_pose_close(&back.knots()[0], &a, 1e-10);
        assert_pose_close(&back.knots()[1], &b, 1e-10);
    }

    #[test]
    fn knot_count_checked() {
        let err = TrajectorySpline::new(TrajectoryKind::CubicBSpline, vec![Pose::identity(); 2]).unwrap_err();
        assert!(matches!(err, LieError::KnotCount { expected: 4, got: 2, .. }));
    }
}
