//! Projective and rigid-body primitives.
//!
//! Conventions used throughout the crate:
//!
//! * A [`PoseSE3`] maps points from a source frame into a target frame,
//!   `p_target = R * p_source + t`. Camera poses are stored world-to-camera.
//! * A [`Twist`] is ordered `(rho, phi)`: translational part first, rotational
//!   part second.
//! * Bearings are normalized homogeneous image coordinates `(x, y, 1)`.
//! * Relative two-view poses map frame 1 into frame 2, so that
//!   `Z2 * x2 = Z1 * R * x1 + t`.

use std::fmt;
use std::ops::Mul;

use nalgebra::{DMatrix, Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3, Vector6};
use thiserror::Error;

/// Errors raised by the geometric primitives.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("rotation angle {0} rad is outside the logarithm chart (too close to pi)")]
    OutOfChart(f64),
    #[error("degenerate triangulation: parallax {0:.3e} rad")]
    DegenerateTriangulation(f64),
    #[error("cheirality violated: depths ({0}, {1})")]
    Cheirality(f64, f64),
    #[error("eight-point estimation needs at least 8 correspondences, got {0}")]
    TooFewCorrespondences(usize),
    #[error("correspondence constraint matrix is rank deficient")]
    DegenerateConfiguration,
    #[error("no essential-matrix decomposition passes the cheirality test")]
    NoValidDecomposition,
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation matrix is not orthonormal with positive determinant")]
    InvalidRotation,
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Smallest parallax angle (rad) accepted by [`triangulate`].
pub const MIN_PARALLAX: f64 = 1e-4;

/// Pinhole intrinsics of the sensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx = {}, fy = {})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidIntrinsics(
                "sensor dimensions must be positive".into(),
            ));
        }
        if !(0.0..self.width as f64).contains(&self.cx)
            || !(0.0..self.height as f64).contains(&self.cy)
        {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside the {}x{} sensor",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Mean focal length, used where an isotropic pixel size is needed.
    pub fn focal(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }

    /// Pixel to normalized bearing `(x, y, 1)`.
    pub fn unproject(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new(
            (pixel.x - self.cx) / self.fx,
            (pixel.y - self.cy) / self.fy,
            1.0,
        )
    }

    /// Normalized image coordinates to pixel, no depth check.
    pub fn bearing_to_pixel(&self, bearing: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.fx * bearing.x / bearing.z + self.cx,
            self.fy * bearing.y / bearing.z + self.cy,
        )
    }

    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x < self.width as f64
            && pixel.y < self.height as f64
    }
}

/// Pinhole projection of a point given in camera coordinates.
pub fn project(point: &Vector3<f64>, k: &CameraIntrinsics) -> Result<Vector2<f64>> {
    if point.z <= 0.0 {
        return Err(GeometryError::BehindCamera(point.z));
    }
    Ok(Vector2::new(
        k.fx * point.x / point.z + k.cx,
        k.fy * point.y / point.z + k.cy,
    ))
}

/// Skew-symmetric matrix such that `hat(v) * w == v.cross(w)`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat`] (reads the antisymmetric part).
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Element of se(3), `(rho, phi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist(pub Vector6<f64>);

impl Twist {
    pub fn zero() -> Self {
        Twist(Vector6::zeros())
    }

    pub fn new(translation: Vector3<f64>, rotation: Vector3<f64>) -> Self {
        Twist(Vector6::new(
            translation.x,
            translation.y,
            translation.z,
            rotation.x,
            rotation.y,
            rotation.z,
        ))
    }

    pub fn translation_part(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn rotation_part(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

/// Left Jacobian of SO(3), the `V` matrix of the SE(3) exponential.
fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let w = hat(phi);
    let (a, b) = if theta < 1e-2 {
        (
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
            1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0,
        )
    } else {
        let half_sin = (0.5 * theta).sin();
        (
            2.0 * half_sin * half_sin / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + w * a + w * w * b
}

fn so3_left_jacobian_inverse(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let w = hat(phi);
    let c = if theta < 1e-2 {
        1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half * half.cos() / half.sin()) / theta2
    };
    Matrix3::identity() - w * 0.5 + w * w * c
}

/// Rigid-body transform in SE(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl fmt::Display for PoseSE3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = &self.translation;
        let q = self.quaternion();
        write!(
            f,
            "SE3(t: [{:.4}, {:.4}, {:.4}], q: [w: {:.4}, x: {:.4}, y: {:.4}, z: {:.4}])",
            t.x, t.y, t.z, q.w, q.i, q.j, q.k
        )
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: Rotation3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_parts(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Builds a pose from a raw matrix, checking `R^T R = I` and `det R > 0`.
    pub fn from_matrix(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        if ortho > 1e-9 || rotation.determinant() <= 0.0 {
            return Err(GeometryError::InvalidRotation);
        }
        Ok(Self {
            rotation: Rotation3::from_matrix_unchecked(rotation),
            translation,
        })
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: q.to_rotation_matrix(),
            translation,
        }
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&self.rotation)
    }

    /// Exponential map se(3) -> SE(3).
    pub fn exp(xi: &Twist) -> Self {
        let rho = xi.translation_part();
        let phi = xi.rotation_part();
        Self {
            rotation: Rotation3::new(phi),
            translation: so3_left_jacobian(&phi) * rho,
        }
    }

    /// Logarithm SE(3) -> se(3). Fails within `1e-6` rad of a half turn.
    pub fn log(&self) -> Result<Twist> {
        let r = self.rotation.matrix();
        let cos = 0.5 * (r.trace() - 1.0);
        let axis_sin = vee(r);
        let sin = axis_sin.norm();
        let theta = sin.atan2(cos);
        if theta > std::f64::consts::PI - 1e-6 {
            return Err(GeometryError::OutOfChart(theta));
        }
        let phi = if theta < 1e-7 {
            axis_sin * (1.0 + theta * theta / 6.0)
        } else {
            axis_sin * (theta / sin)
        };
        let rho = so3_left_jacobian_inverse(&phi) * self.translation;
        Ok(Twist::new(rho, phi))
    }

    pub fn inverse(&self) -> Self {
        let rot = self.rotation.inverse();
        Self {
            rotation: rot,
            translation: -(rot * self.translation),
        }
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Rotation angle of `self^-1 * other`.
    pub fn rotation_distance(&self, other: &PoseSE3) -> f64 {
        rotation_angle(&self.rotation.rotation_to(&other.rotation))
    }

    pub fn translation_distance(&self, other: &PoseSE3) -> f64 {
        (self.translation - other.translation).norm()
    }

    /// Position of the source-frame origin expressed in the target frame's
    /// inverse, i.e. the camera centre when `self` is world-to-camera.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|v| v.is_finite())
            && self.rotation.matrix().iter().all(|v| v.is_finite())
    }
}

impl Mul for PoseSE3 {
    type Output = PoseSE3;

    fn mul(self, rhs: PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation * rhs.translation + self.translation,
        }
    }
}

impl<'a> Mul<&'a PoseSE3> for &'a PoseSE3 {
    type Output = PoseSE3;

    fn mul(self, rhs: &'a PoseSE3) -> PoseSE3 {
        *self * *rhs
    }
}

/// Free-function form of [`PoseSE3::exp`].
pub fn se3_exp(xi: &Twist) -> PoseSE3 {
    PoseSE3::exp(xi)
}

/// Free-function form of [`PoseSE3::log`].
pub fn se3_log(pose: &PoseSE3) -> Result<Twist> {
    pose.log()
}

/// Rotation angle in `[0, pi]`, accurate near zero (unlike the `acos` form).
pub fn rotation_angle(r: &Rotation3<f64>) -> f64 {
    let m = r.matrix();
    vee(m).norm().atan2(0.5 * (m.trace() - 1.0))
}

/// Angle between two 3-vectors, robust near 0 and pi.
pub fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

/// Depths recovered for one correspondence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangulation {
    pub z1: f64,
    pub z2: f64,
    /// `|Z2 x2 - Z1 R x1 - t|`
    pub residual: f64,
}

/// Least-squares depths of `x1`, `x2` from `Z2 x2 = Z1 R x1 + t`, with the
/// sign checks left to the caller.
fn solve_depths(
    x1: &Vector3<f64>,
    x2: &Vector3<f64>,
    rotation: &Matrix3<f64>,
    t: &Vector3<f64>,
) -> Option<Triangulation> {
    let rx1 = rotation * x1;
    // [R x1, -x2] [Z1 Z2]^T = -t
    let a11 = rx1.dot(&rx1);
    let a12 = -rx1.dot(x2);
    let a22 = x2.dot(x2);
    let b1 = -rx1.dot(t);
    let b2 = x2.dot(t);
    let det = a11 * a22 - a12 * a12;
    if det.abs() <= f64::EPSILON * a11 * a22 {
        return None;
    }
    let z1 = (a22 * b1 - a12 * b2) / det;
    let z2 = (a11 * b2 - a12 * b1) / det;
    let residual = (x2 * z2 - rx1 * z1 - t).norm();
    Some(Triangulation { z1, z2, residual })
}

/// Triangulates a correspondence between two normalized bearings given the
/// relative pose mapping frame 1 into frame 2.
pub fn triangulate(
    x1: &Vector3<f64>,
    x2: &Vector3<f64>,
    rotation: &Rotation3<f64>,
    t: &Vector3<f64>,
) -> Result<Triangulation> {
    let r = rotation.matrix();
    let parallax = angle_between(&(r * x1), x2);
    if parallax < MIN_PARALLAX || !parallax.is_finite() {
        return Err(GeometryError::DegenerateTriangulation(parallax));
    }
    let tri = solve_depths(x1, x2, r, t).ok_or(GeometryError::DegenerateTriangulation(parallax))?;
    if !(tri.z1 > 0.0 && tri.z2 > 0.0) {
        return Err(GeometryError::Cheirality(tri.z1, tri.z2));
    }
    Ok(tri)
}

/// Essential matrix `E = hat(t) R`, stored with unit Frobenius norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EssentialMatrix(Matrix3<f64>);

impl EssentialMatrix {
    /// Projects an arbitrary 3x3 matrix onto the essential manifold and
    /// applies the normalization (unit norm, leading large entry positive).
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let svd = m.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut s = svd.singular_values;
        let smallest = s.imin();
        let sigma = 0.5 * (s.sum() - s[smallest]);
        s.fill(sigma);
        s[smallest] = 0.0;
        let projected = u * Matrix3::from_diagonal(&s) * v_t;
        EssentialMatrix(normalize_sign(&projected))
    }

    /// Essential matrix of a known relative pose.
    pub fn from_pose(rotation: &Rotation3<f64>, t: &Vector3<f64>) -> Self {
        EssentialMatrix(normalize_sign(&(hat(t) * rotation.matrix())))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Algebraic epipolar residual `x2^T E x1`.
    pub fn residual(&self, x1: &Vector3<f64>, x2: &Vector3<f64>) -> f64 {
        x2.dot(&(self.0 * x1))
    }
}

impl std::ops::Neg for EssentialMatrix {
    type Output = Matrix3<f64>;

    fn neg(self) -> Matrix3<f64> {
        -self.0
    }
}

/// Unit Frobenius norm; the first row-major entry whose magnitude is within
/// `1e-6` of the largest is made positive.
fn normalize_sign(m: &Matrix3<f64>) -> Matrix3<f64> {
    let norm = m.norm();
    if norm == 0.0 {
        return *m;
    }
    let m = m / norm;
    let max = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let mut lead = 0.0;
    'outer: for r in 0..3 {
        for c in 0..3 {
            if m[(r, c)].abs() >= max * (1.0 - 1e-6) {
                lead = m[(r, c)];
                break 'outer;
            }
        }
    }
    if lead < 0.0 {
        -m
    } else {
        m
    }
}

/// Isotropic similarity moving the centroid to the origin with mean
/// distance sqrt(2).
fn hartley_transform(points: impl Iterator<Item = Vector2<f64>> + Clone) -> Matrix3<f64> {
    let n = points.clone().count() as f64;
    let centroid = points.clone().fold(Vector2::zeros(), |acc, p| acc + p) / n;
    let mean_dist = points.map(|p| (p - centroid).norm()).sum::<f64>() / n;
    let s = if mean_dist > 0.0 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Matrix3::new(
        s,
        0.0,
        -s * centroid.x,
        0.0,
        s,
        -s * centroid.y,
        0.0,
        0.0,
        1.0,
    )
}

/// Normalized eight-point estimate of the essential matrix from bearing
/// pairs `(x1, x2)` satisfying `x2^T E x1 = 0`.
pub fn eight_point(pairs: &[(Vector3<f64>, Vector3<f64>)]) -> Result<EssentialMatrix> {
    let n = pairs.len();
    if n < 8 {
        return Err(GeometryError::TooFewCorrespondences(n));
    }
    let t1 = hartley_transform(pairs.iter().map(|(a, _)| a.xy() / a.z));
    let t2 = hartley_transform(pairs.iter().map(|(_, b)| b.xy() / b.z));

    // One extra zero row keeps the SVD square when n == 8, so V^T holds the
    // null vector.
    let rows = n.max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (x1, x2)) in pairs.iter().enumerate() {
        let p = t1 * (x1 / x1.z);
        let q = t2 * (x2 / x2.z);
        let row = [
            q.x * p.x,
            q.x * p.y,
            q.x,
            q.y * p.x,
            q.y * p.y,
            q.y,
            p.x,
            p.y,
            1.0,
        ];
        for (j, v) in row.iter().enumerate() {
            a[(i, j)] = *v;
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(GeometryError::DegenerateConfiguration)?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));
    if sv[order[7]] <= 1e-10 * sv[order[0]] {
        return Err(GeometryError::DegenerateConfiguration);
    }
    let null = v_t.row(order[8]);
    let f = Matrix3::from_row_slice(&null.iter().copied().collect::<Vec<_>>());
    let e = t2.transpose() * f * t1;
    Ok(EssentialMatrix::from_matrix(&e))
}

/// Relative pose recovered from an essential matrix, `|t| = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePose {
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
    /// Correspondences in front of both cameras for the chosen candidate.
    pub inliers: usize,
}

impl RelativePose {
    pub fn to_pose(&self) -> PoseSE3 {
        PoseSE3::from_parts(self.rotation, self.translation)
    }
}

/// Picks the cheirality-consistent factorization of `E` among the four
/// candidates.
pub fn decompose_essential(
    e: &Matrix3<f64>,
    pairs: &[(Vector3<f64>, Vector3<f64>)],
) -> Result<RelativePose> {
    if pairs.is_empty() {
        return Err(GeometryError::NoValidDecomposition);
    }
    let svd = e.svd(true, true);
    let mut u = svd.u.unwrap();
    let mut v_t = svd.v_t.unwrap();
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v_t.determinant() < 0.0 {
        v_t = -v_t;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * v_t;
    let r2 = u * w.transpose() * v_t;
    let t: Vector3<f64> = u.column(2).into_owned().normalize();

    let candidates = [(r1, t), (r1, -t), (r2, t), (r2, -t)];
    let mut best: Option<(usize, usize)> = None;
    for (idx, (r, t)) in candidates.iter().enumerate() {
        let count = pairs
            .iter()
            .filter(|(x1, x2)| {
                solve_depths(x1, x2, r, t).is_some_and(|tri| tri.z1 > 0.0 && tri.z2 > 0.0)
            })
            .count();
        if best.is_none_or(|(_, c)| count > c) {
            best = Some((idx, count));
        }
    }
    let (idx, count) = best.unwrap();
    if 2 * count <= pairs.len() {
        return Err(GeometryError::NoValidDecomposition);
    }
    let (r, t) = candidates[idx];
    Ok(RelativePose {
        rotation: Rotation3::from_matrix(&r),
        translation: t,
        inliers: count,
    })
}
