//! Pinhole cameras, rigid poses and rays.
//!
//! Poses are camera-to-world. Cameras look down +z with x right and y down.
//! Pixel `(col, row)` has its center at `(col + 0.5, row + 0.5)`.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for CameraPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl CameraPose {
    pub fn identity() -> Self {
        CameraPose {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        CameraPose {
            rotation,
            translation,
        }
    }

    /// Camera at `eye` looking at `target`; `up` picks the roll (image y points away from it).
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Self {
        let z = (target - eye).normalize();
        let mut x = (-up).cross(&z);
        if x.norm() < 1e-9 {
            x = z.cross(&Vec3::new(1.0, 0.0, 0.0));
            if x.norm() < 1e-9 {
                x = z.cross(&Vec3::new(0.0, 1.0, 0.0));
            }
        }
        let x = x.normalize();
        let y = z.cross(&x);
        CameraPose {
            rotation: Mat3::from_columns(&[x, y, z]),
            translation: eye,
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &CameraPose) -> CameraPose {
        CameraPose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> CameraPose {
        let rt = self.rotation.transpose();
        CameraPose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn center(&self) -> Vec3 {
        self.translation
    }

    pub fn optical_axis(&self) -> Vec3 {
        self.rotation.column(2).into()
    }

    /// Orthonormality and handedness within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        (r.transpose() * r - Mat3::identity()).abs().max() <= tol
            && (r.determinant() - 1.0).abs() <= tol
            && r.iter()
                .chain(self.translation.iter())
                .all(|v| v.is_finite())
    }

    /// Row-major 3x4 `[R | t]`.
    pub fn to_matrix_3x4(&self) -> [f64; 12] {
        let mut m = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                m[r * 4 + c] = self.rotation[(r, c)];
            }
            m[r * 4 + 3] = self.translation[r];
        }
        m
    }

    pub fn from_matrix_3x4(m: &[f64; 12]) -> CameraPose {
        CameraPose {
            rotation: Mat3::from_fn(|r, c| m[r * 4 + c]),
            translation: Vec3::new(m[3], m[7], m[11]),
        }
    }

    /// Rotation angle of this transform in radians.
    pub fn angle(&self) -> f64 {
        ((self.rotation.trace() - 1.0) / 2.0)
            .clamp(-1.0, 1.0)
            .acos()
    }
}

/// `canonical⁻¹ ∘ target`: the target camera expressed in the canonical camera's frame.
pub fn relative_pose(canonical: &CameraPose, target: &CameraPose) -> CameraPose {
    canonical.inverse().compose(target)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub res: usize,
}

impl Intrinsics {
    /// Centered principal point and focal length `focal_scale * res`.
    pub fn centered(res: usize, focal_scale: f64) -> Self {
        let f = focal_scale * res as f64;
        Intrinsics {
            fx: f,
            fy: f,
            cx: res as f64 / 2.0,
            cy: res as f64 / 2.0,
            res,
        }
    }

    pub fn is_valid(&self) -> bool {
        let r = self.res as f64;
        self.res > 0
            && self.fx > 0.0
            && self.fy > 0.0
            && (0.0..=r).contains(&self.cx)
            && (0.0..=r).contains(&self.cy)
    }

    /// Unit camera-frame direction through continuous pixel coordinates.
    pub fn direction(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0).normalize()
    }
}

/// One ray per pixel, row-major. `hit[i]` is false when the ray misses the
/// `[-1, 1]^3` box; `near`/`far` are then zero.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RayBatch {
    pub origins: Vec<Vec3>,
    pub directions: Vec<Vec3>,
    pub near: Vec<f64>,
    pub far: Vec<f64>,
    pub hit: Vec<bool>,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn push(&mut self, origin: Vec3, direction: Vec3) {
        let (hit, near, far) = match intersect_unit_box(&origin, &direction) {
            Some((n, f)) => (true, n, f),
            None => (false, 0.0, 0.0),
        };
        self.origins.push(origin);
        self.directions.push(direction);
        self.near.push(near);
        self.far.push(far);
        self.hit.push(hit);
    }

    pub fn point(&self, i: usize, t: f64) -> Vec3 {
        self.origins[i] + self.directions[i] * t
    }
}

/// Slab test against `[-1, 1]^3`, clipped to `t >= 0`. Returns `None` for
/// misses and tangential grazes.
pub fn intersect_unit_box(origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-12 {
            if origin[a].abs() > 1.0 {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut ta, mut tb) = ((-1.0 - origin[a]) * inv, (1.0 - origin[a]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t1 > t0 + 1e-9).then_some((t0, t1))
}

pub fn pixel_ray(pose: &CameraPose, k: &Intrinsics, u: f64, v: f64) -> (Vec3, Vec3) {
    (pose.translation, pose.rotation * k.direction(u, v))
}

/// Rays through every pixel center of a `k.res x k.res` image.
pub fn generate_rays(pose: &CameraPose, k: &Intrinsics) -> RayBatch {
    let mut batch = RayBatch::default();
    for row in 0..k.res {
        for col in 0..k.res {
            let (o, d) = pixel_ray(pose, k, col as f64 + 0.5, row as f64 + 0.5);
            batch.push(o, d);
        }
    }
    batch
}

/// Composes `pose` with a random axis-angle rotation (angle `|N(0, sigma_rot)|`,
/// uniform axis, applied in the camera frame) and shifts its center by
/// `N(0, sigma_trans)` along a uniform random direction.
pub fn perturb_pose<R: Rng + ?Sized>(
    pose: &CameraPose,
    sigma_rot: f64,
    sigma_trans: f64,
    rng: &mut R,
) -> CameraPose {
    assert!(
        sigma_rot >= 0.0 && sigma_trans >= 0.0,
        "noise levels must be non-negative"
    );
    let axis: [f64; 3] = UnitSphere.sample(rng);
    let angle = if sigma_rot > 0.0 {
        Normal::new(0.0, sigma_rot).unwrap().sample(rng).abs()
    } else {
        0.0
    };
    let dir: [f64; 3] = UnitSphere.sample(rng);
    let shift = if sigma_trans > 0.0 {
        Normal::new(0.0, sigma_trans).unwrap().sample(rng)
    } else {
        0.0
    };
    if angle == 0.0 && shift == 0.0 {
        return *pose;
    }
    let delta = Rotation3::from_axis_angle(&Unit::new_normalize(Vec3::from(axis)), angle);
    CameraPose {
        rotation: orthonormalize(&(pose.rotation * delta.matrix())),
        translation: pose.translation + Vec3::from(dir) * shift,
    }
}

/// Nearest rotation matrix, removing accumulated round-off.
pub fn orthonormalize(m: &Mat3) -> Mat3 {
    Rotation3::from_matrix(m).into_inner()
}

/// Distance from each point to the infinite line through `origin` along unit `dir`.
pub fn point_to_ray_distance(points: &[Vec3], origin: &Vec3, dir: &Vec3) -> Vec<f64> {
    points
        .iter()
        .map(|p| (p - origin).cross(dir).norm())
        .collect()
}

/// Pinhole projection of a point given in the same frame as `pose`.
/// Returns `(u, v, valid)`; invalid when behind the camera or off-image.
pub fn project_point(x: &Vec3, pose: &CameraPose, k: &Intrinsics) -> (f64, f64, bool) {
    let pc = pose.rotation.transpose() * (x - pose.translation);
    if pc.z <= 1e-9 {
        return (0.0, 0.0, false);
    }
    let u = k.fx * pc.x / pc.z + k.cx;
    let v = k.fy * pc.y / pc.z + k.cy;
    let r = k.res as f64;
    (u, v, (0.0..=r).contains(&u) && (0.0..=r).contains(&v))
}

/// Similarity map from a reference frame into volume coordinates, where the
/// volume occupies `[-1, 1]^3`: `p_vol = (p - center) / half_extent`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeFrame {
    pub center: [f64; 3],
    pub half_extent: f64,
}

impl VolumeFrame {
    pub fn unit() -> Self {
        VolumeFrame {
            center: [0.0; 3],
            half_extent: 1.0,
        }
    }

    /// Volume centered `depth` units in front of the reference camera.
    pub fn in_front(depth: f64, half_extent: f64) -> Self {
        VolumeFrame {
            center: [0.0, 0.0, depth],
            half_extent,
        }
    }

    pub fn to_volume(&self, p: &Vec3) -> Vec3 {
        (p - Vec3::from(self.center)) / self.half_extent
    }

    pub fn from_volume(&self, p: &Vec3) -> Vec3 {
        p * self.half_extent + Vec3::from(self.center)
    }

    /// Re-expresses a camera pose in volume coordinates; the rotation is
    /// unchanged and distances shrink by `half_extent`.
    pub fn pose_to_volume(&self, pose: &CameraPose) -> CameraPose {
        CameraPose {
            rotation: pose.rotation,
            translation: self.to_volume(&pose.translation),
        }
    }
}
