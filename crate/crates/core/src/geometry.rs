//! Pinhole cameras, rigid poses and the 3D to 2D covariance pipeline used by
//! the splat renderer.
//!
//! Conventions: camera space is x right, y down, z forward (meters). Pixel
//! coordinates put the center of pixel `(u, v)` at exactly `(u, v)`.

use std::path::Path;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Matrix4, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Low-pass floor (px²) added to the diagonal of every projected covariance.
pub const COV_FLOOR_PX2: f64 = 0.3;

const ORTHONORMAL_TOL: f64 = 1e-6;

/// Unit quaternion `(w, x, y, z)`. The raw components are kept as optimized;
/// every read goes through the normalized value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rotation {
    raw: [f64; 4],
}

impl Rotation {
    pub fn identity() -> Self {
        Self {
            raw: [1.0, 0.0, 0.0, 0.0],
        }
    }

    /// Any non-zero quaternion; it is normalized on read.
    pub fn from_raw(raw: [f64; 4]) -> Self {
        Self { raw }
    }

    /// Rotation of `angle` radians about `axis`.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let a = axis.normalize();
        let (s, c) = (0.5 * angle).sin_cos();
        Self {
            raw: [c, a.x * s, a.y * s, a.z * s],
        }
    }

    pub fn raw(&self) -> [f64; 4] {
        self.raw
    }

    pub fn raw_mut(&mut self) -> &mut [f64; 4] {
        &mut self.raw
    }

    pub fn normalized(&self) -> [f64; 4] {
        let n = self.raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            return [1.0, 0.0, 0.0, 0.0];
        }
        [
            self.raw[0] / n,
            self.raw[1] / n,
            self.raw[2] / n,
            self.raw[3] / n,
        ]
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(self.normalized())
    }
}

pub(crate) fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient on the rotation matrix back onto the raw quaternion
/// (through the normalization).
pub(crate) fn quat_matrix_backward(raw: [f64; 4], d_r: &Matrix3<f64>) -> [f64; 4] {
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return [0.0; 4];
    }
    let [w, x, y, z] = [raw[0] / norm, raw[1] / norm, raw[2] / norm, raw[3] / norm];
    let g = |r: usize, c: usize| d_r[(r, c)];

    let dw = 2.0
        * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2)
            + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
            - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));

    let dq = [dw, dx, dy, dz];
    let unit = [w, x, y, z];
    let dot: f64 = dq.iter().zip(unit.iter()).map(|(a, b)| a * b).sum();
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = (dq[i] - dot * unit[i]) / norm;
    }
    out
}

/// Per-axis standard deviations, stored as natural logs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleVector {
    log: [f64; 3],
}

impl ScaleVector {
    pub fn from_scales(s: [f64; 3]) -> Self {
        assert!(s.iter().all(|v| *v > 0.0), "scales must be positive");
        Self {
            log: [s[0].ln(), s[1].ln(), s[2].ln()],
        }
    }

    pub fn isotropic(s: f64) -> Self {
        Self::from_scales([s, s, s])
    }

    pub fn from_log(log: [f64; 3]) -> Self {
        Self { log }
    }

    pub fn log(&self) -> [f64; 3] {
        self.log
    }

    pub fn log_mut(&mut self) -> &mut [f64; 3] {
        &mut self.log
    }

    pub fn scales(&self) -> [f64; 3] {
        [self.log[0].exp(), self.log[1].exp(), self.log[2].exp()]
    }
}

/// `Σ = R S Sᵀ Rᵀ`.
pub fn build_covariance(rotation: &Rotation, scale: &ScaleVector) -> Matrix3<f64> {
    let r = rotation.matrix();
    let s = scale.scales();
    let s2 = Matrix3::from_diagonal(&Vector3::new(s[0] * s[0], s[1] * s[1], s[2] * s[2]));
    let sigma = r * s2 * r.transpose();
    // exact symmetry
    (sigma + sigma.transpose()) * 0.5
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    intrinsics: Matrix3<f64>,
    world_to_camera: Matrix4<f64>,
    width: usize,
    height: usize,
    near: f64,
}

impl CameraModel {
    pub fn new(
        intrinsics: Matrix3<f64>,
        world_to_camera: Matrix4<f64>,
        width: usize,
        height: usize,
        near: f64,
    ) -> Result<Self> {
        let k = &intrinsics;
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(Error::InvalidCamera("focal lengths must be positive".into()));
        }
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(Error::InvalidCamera(
                "intrinsics must be upper triangular with K[2][2] = 1".into(),
            ));
        }
        if k[(0, 1)] != 0.0 {
            return Err(Error::InvalidCamera("skewed intrinsics are not supported".into()));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidCamera("image size must be positive".into()));
        }
        if !(near > 0.0) {
            return Err(Error::InvalidCamera("near plane must be positive".into()));
        }
        let r: Matrix3<f64> = world_to_camera.fixed_view::<3, 3>(0, 0).into_owned();
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if ortho > ORTHONORMAL_TOL || (r.determinant() - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::InvalidCamera(
                "rotation block must be orthonormal with det +1".into(),
            ));
        }
        let last = world_to_camera.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return Err(Error::InvalidCamera("pose must be a rigid transform".into()));
        }
        Ok(Self {
            intrinsics,
            world_to_camera,
            width,
            height,
            near,
        })
    }

    /// Camera with principal point at the image center.
    pub fn simple(
        focal: f64,
        width: usize,
        height: usize,
        world_to_camera: Matrix4<f64>,
        near: f64,
    ) -> Result<Self> {
        let k = Matrix3::new(
            focal,
            0.0,
            width as f64 / 2.0,
            0.0,
            focal,
            height as f64 / 2.0,
            0.0,
            0.0,
            1.0,
        );
        Self::new(k, world_to_camera, width, height, near)
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn world_to_camera(&self) -> &Matrix4<f64> {
        &self.world_to_camera
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn near(&self) -> f64 {
        self.near
    }

    pub fn fx(&self) -> f64 {
        self.intrinsics[(0, 0)]
    }

    pub fn fy(&self) -> f64 {
        self.intrinsics[(1, 1)]
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn to_camera(&self, p_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p_world + self.translation()
    }

    /// Pixel coordinates of a camera-space point (no depth check).
    pub fn project_camera(&self, p_cam: &Vector3<f64>) -> Vector2<f64> {
        let k = &self.intrinsics;
        let x = p_cam.x / p_cam.z;
        let y = p_cam.y / p_cam.z;
        Vector2::new(
            k[(0, 0)] * x + k[(0, 2)],
            k[(1, 1)] * y + k[(1, 2)],
        )
    }
}

/// Perspective Jacobian `∂(u,v)/∂(x,y,z)` at a camera-space point.
pub fn projection_jacobian(camera: &CameraModel, mean_cam: &Vector3<f64>) -> Result<Matrix2x3<f64>> {
    let z = mean_cam.z;
    if !(z >= camera.near) {
        return Err(Error::DegenerateDepth {
            depth: z,
            near: camera.near,
        });
    }
    let (fx, fy) = (camera.fx(), camera.fy());
    Ok(Matrix2x3::new(
        fx / z,
        0.0,
        -fx * mean_cam.x / (z * z),
        0.0,
        fy / z,
        -fy * mean_cam.y / (z * z),
    ))
}

/// Screen-space covariance `J W Σ Wᵀ Jᵀ + floor·I` of a Gaussian centered at
/// `mean_world`. Only the rotation block of the pose enters: translation
/// cancels in covariance transport.
pub fn project_covariance(
    sigma: &Matrix3<f64>,
    camera: &CameraModel,
    mean_world: &Vector3<f64>,
) -> Result<Matrix2<f64>> {
    let mean_cam = camera.to_camera(mean_world);
    let j = projection_jacobian(camera, &mean_cam)?;
    let w = camera.rotation();
    let t = j * w;
    let cov = t * sigma * t.transpose();
    let cov = (cov + cov.transpose()) * 0.5;
    Ok(cov + Matrix2::identity() * COV_FLOOR_PX2)
}

/// JSON form of one camera, with fixed key names.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct CameraJson {
    #[serde(rename = "K")]
    k: [f64; 9],
    #[serde(rename = "T_wc")]
    t_wc: [f64; 16],
    width: usize,
    height: usize,
    near: f64,
}

impl From<&CameraModel> for CameraJson {
    fn from(c: &CameraModel) -> Self {
        let mut k = [0.0; 9];
        let mut t = [0.0; 16];
        for r in 0..3 {
            for col in 0..3 {
                k[r * 3 + col] = c.intrinsics[(r, col)];
            }
        }
        for r in 0..4 {
            for col in 0..4 {
                t[r * 4 + col] = c.world_to_camera[(r, col)];
            }
        }
        Self {
            k,
            t_wc: t,
            width: c.width,
            height: c.height,
            near: c.near,
        }
    }
}

impl TryFrom<CameraJson> for CameraModel {
    type Error = Error;

    fn try_from(j: CameraJson) -> Result<Self> {
        let k = Matrix3::from_row_slice(&j.k);
        let t = Matrix4::from_row_slice(&j.t_wc);
        CameraModel::new(k, t, j.width, j.height, j.near)
    }
}

pub fn rig_to_json(cameras: &[CameraModel]) -> String {
    let list: Vec<CameraJson> = cameras.iter().map(CameraJson::from).collect();
    serde_json::to_string_pretty(&list).expect("camera serialization cannot fail")
}

pub fn rig_from_json(text: &str) -> std::result::Result<Vec<CameraModel>, Error> {
    let list: Vec<CameraJson> =
        serde_json::from_str(text).map_err(|e| Error::json("<rig>", e))?;
    list.into_iter().map(CameraModel::try_from).collect()
}

pub fn save_rig(path: &Path, cameras: &[CameraModel]) -> Result<()> {
    std::fs::write(path, rig_to_json(cameras)).map_err(|e| Error::io(path, e))
}

pub fn load_rig(path: &Path) -> Result<Vec<CameraModel>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let list: Vec<CameraJson> = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    list.into_iter().map(CameraModel::try_from).collect()
}

/// Rigid world-to-camera transform from a rotation and the camera center.
pub fn pose_from_center(r_wc: &Matrix3<f64>, center: &Vector3<f64>) -> Matrix4<f64> {
    let t = -(r_wc * center);
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(r_wc);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
    m
}
