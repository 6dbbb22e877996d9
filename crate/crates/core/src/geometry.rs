//! Pinhole cameras on a rigid multi-view rig.
//!
//! Camera frame: x right, y down, z forward. Ego frame: x forward, y left,
//! z up. Pixel `(u, v)` has its center at the integer coordinate, so pixel
//! column `i` covers `[i - 0.5, i + 0.5)`.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::scene_sim::Box3D;

/// Near plane for projection validity, meters.
pub const Z_MIN: f64 = 0.1;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GeometryError {
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("box dimensions must be positive, got {0:?}")]
    NonPositiveSize([f64; 3]),
    #[error("view {0} out of range for a rig of {1} views")]
    BadView(usize, usize),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl EgoPoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn planar_distance(self, other: EgoPoint) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub k: Matrix3<f64>,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        Self::from_matrix(Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0))
    }

    pub fn from_matrix(k: Matrix3<f64>) -> Result<Self, GeometryError> {
        let ok = k[(0, 0)] > 0.0
            && k[(1, 1)] > 0.0
            && k[(0, 1)] == 0.0
            && k[(1, 0)] == 0.0
            && k[(2, 0)] == 0.0
            && k[(2, 1)] == 0.0
            && k[(2, 2)] == 1.0;
        if !ok {
            return Err(GeometryError::InvalidCamera(format!(
                "intrinsics must be [[fx,0,cx],[0,fy,cy],[0,0,1]] with fx, fy > 0, got {k}"
            )));
        }
        Ok(Self { k })
    }

    pub fn fx(&self) -> f64 {
        self.k[(0, 0)]
    }
    pub fn fy(&self) -> f64 {
        self.k[(1, 1)]
    }
    pub fn cx(&self) -> f64 {
        self.k[(0, 2)]
    }
    pub fn cy(&self) -> f64 {
        self.k[(1, 2)]
    }

    fn inverse(&self) -> Matrix3<f64> {
        let (fx, fy, cx, cy) = (self.fx(), self.fy(), self.cx(), self.cy());
        Matrix3::new(
            1.0 / fx,
            0.0,
            -cx / fx,
            0.0,
            1.0 / fy,
            -cy / fy,
            0.0,
            0.0,
            1.0,
        )
    }
}

/// Camera-to-ego rigid transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraExtrinsics {
    pub t: Matrix4<f64>,
}

impl CameraExtrinsics {
    pub fn from_matrix(t: Matrix4<f64>) -> Result<Self, GeometryError> {
        let r = t.fixed_view::<3, 3>(0, 0).into_owned();
        let orth = (r.transpose() * r - Matrix3::identity()).abs().max();
        let last_row_ok =
            t[(3, 0)] == 0.0 && t[(3, 1)] == 0.0 && t[(3, 2)] == 0.0 && t[(3, 3)] == 1.0;
        if orth > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 || !last_row_ok {
            return Err(GeometryError::InvalidCamera(format!(
                "extrinsics must be a rigid transform, got {t}"
            )));
        }
        Ok(Self { t })
    }

    pub fn identity() -> Self {
        Self {
            t: Matrix4::identity(),
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.t.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.t.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Ego-to-camera transform.
    pub fn inverse(&self) -> Matrix4<f64> {
        let rt = self.rotation().transpose();
        let tr = -rt * self.translation();
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&tr);
        m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraView {
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: CameraExtrinsics,
    pub width: usize,
    pub height: usize,
    ego_to_cam: Matrix4<f64>,
}

impl CameraView {
    pub fn new(
        intrinsics: CameraIntrinsics,
        extrinsics: CameraExtrinsics,
        width: usize,
        height: usize,
    ) -> Self {
        Self {
            intrinsics,
            extrinsics,
            width,
            height,
            ego_to_cam: extrinsics.inverse(),
        }
    }

    pub fn ego_to_camera(&self, p: EgoPoint) -> Vector3<f64> {
        let c = self.ego_to_cam * Vector4::new(p.x, p.y, p.z, 1.0);
        Vector3::new(c.x, c.y, c.z)
    }
}

/// One projected point. `valid` means in front of the near plane and inside
/// the image at the requested stride.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub valid: bool,
}

impl Projection {
    pub fn in_front(&self) -> bool {
        self.depth > Z_MIN
    }
}

/// Rig of `M ≥ 1` cameras sharing one image size.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraRig {
    views: Vec<CameraView>,
}

/// Serialized camera: row-major `K` (9 values) and `T` (16 values).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub k: Vec<f64>,
    pub t: Vec<f64>,
    pub width: usize,
    pub height: usize,
}

impl CameraRig {
    pub fn new(views: Vec<CameraView>) -> Result<Self, GeometryError> {
        let first = views
            .first()
            .ok_or_else(|| GeometryError::InvalidCamera("rig needs at least one view".into()))?;
        if views
            .iter()
            .any(|v| v.width != first.width || v.height != first.height)
        {
            return Err(GeometryError::InvalidCamera(
                "all views must share one image size".into(),
            ));
        }
        Ok(Self { views })
    }

    /// `count` cameras at the ego origin raised by `height_m`, looking out
    /// horizontally at evenly spaced azimuths starting along ego +x.
    pub fn surround(
        count: usize,
        width: usize,
        height: usize,
        hfov_deg: f64,
        height_m: f64,
    ) -> Result<Self, GeometryError> {
        let fx = (width as f64 / 2.0) / (hfov_deg.to_radians() / 2.0).tan();
        let k = CameraIntrinsics::new(fx, fx, width as f64 / 2.0, height as f64 / 2.0)?;
        let views = (0..count)
            .map(|j| {
                let phi = std::f64::consts::TAU * j as f64 / count as f64;
                let (s, c) = phi.sin_cos();
                // columns: camera x (right), y (down), z (forward) in ego coordinates
                let rot = Matrix3::new(s, 0.0, c, -c, 0.0, s, 0.0, -1.0, 0.0);
                let mut t = Matrix4::identity();
                t.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
                t[(2, 3)] = height_m;
                CameraView::new(k, CameraExtrinsics { t }, width, height)
            })
            .collect();
        Self::new(views)
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn views(&self) -> &[CameraView] {
        &self.views
    }

    pub fn view(&self, j: usize) -> Result<&CameraView, GeometryError> {
        self.views
            .get(j)
            .ok_or(GeometryError::BadView(j, self.views.len()))
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.views[0].width, self.views[0].height)
    }

    /// Lifts pixel `(u + du, v + dv)` at camera depth `depth` into the ego frame:
    /// `T · H(K⁻¹ · [u+du, v+dv, 1]ᵀ · depth)`.
    pub fn lift_to_ego(
        &self,
        view: usize,
        u: f64,
        v: f64,
        du: f64,
        dv: f64,
        depth: f64,
    ) -> Result<EgoPoint, GeometryError> {
        // NaN depth fails here too
        if !(depth > 0.0) {
            return Err(GeometryError::NonPositiveDepth(depth));
        }
        let cam = self.view(view)?;
        let ray = cam.intrinsics.inverse() * Vector3::new(u + du, v + dv, 1.0);
        let p_cam = ray * depth;
        let h = Vector4::new(p_cam.x, p_cam.y, p_cam.z, 1.0);
        let e = cam.extrinsics.t * h;
        Ok(EgoPoint::new(e.x / e.w, e.y / e.w, e.z / e.w))
    }

    /// Projects an ego point into `view`. Validity is evaluated on the pixel
    /// grid divided by `stride` (1 for the input image).
    pub fn project_to_view(&self, p: EgoPoint, view: usize, stride: f64) -> Projection {
        let Some(cam) = self.views.get(view) else {
            return Projection {
                u: f64::NAN,
                v: f64::NAN,
                depth: f64::NAN,
                valid: false,
            };
        };
        let c = cam.ego_to_camera(p);
        let k = &cam.intrinsics;
        let u = k.fx() * c.x / c.z + k.cx();
        let v = k.fy() * c.y / c.z + k.cy();
        let depth = c.z;
        let valid = depth > Z_MIN && in_level_bounds(u, v, stride, cam.width, cam.height);
        Projection { u, v, depth, valid }
    }

    /// Eight projected corners of `b` in [`box_corners`] order.
    pub fn project_box_corners(
        &self,
        b: &Box3D,
        view: usize,
    ) -> Result<[Projection; 8], GeometryError> {
        self.view(view)?;
        let corners = box_corners(b)?;
        Ok(corners.map(|c| self.project_to_view(c, view, 1.0)))
    }

    pub fn to_records(&self) -> Vec<CameraRecord> {
        self.views
            .iter()
            .map(|v| CameraRecord {
                k: v.intrinsics.k.transpose().iter().copied().collect(),
                t: v.extrinsics.t.transpose().iter().copied().collect(),
                width: v.width,
                height: v.height,
            })
            .collect()
    }

    pub fn from_records(records: &[CameraRecord]) -> Result<Self, GeometryError> {
        let views = records
            .iter()
            .map(|r| {
                if r.k.len() != 9 || r.t.len() != 16 {
                    return Err(GeometryError::InvalidCamera(
                        "camera record needs 9 K values and 16 T values".into(),
                    ));
                }
                let k = CameraIntrinsics::from_matrix(Matrix3::from_row_slice(&r.k))?;
                let t = CameraExtrinsics::from_matrix(Matrix4::from_row_slice(&r.t))?;
                Ok(CameraView::new(k, t, r.width, r.height))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(views)
    }
}

/// `(u, v) / stride` inside `[0, W'-1] × [0, H'-1]` with `W' = W / stride`.
pub fn in_level_bounds(u: f64, v: f64, stride: f64, width: usize, height: usize) -> bool {
    let (gw, gh) = (
        (width as f64 / stride).floor(),
        (height as f64 / stride).floor(),
    );
    let (x, y) = (u / stride, v / stride);
    x >= 0.0 && x <= gw - 1.0 && y >= 0.0 && y <= gh - 1.0
}

/// Corners in the yaw-rotated box frame, ordered by
/// `(±w/2 lateral, ±l/2 longitudinal, ±h/2 vertical)` with index bits
/// `i = 4·[lon < 0] + 2·[lat < 0] + [vert < 0]`: corner 0 is front-left-top,
/// corner 7 is rear-right-bottom. `l` runs along the heading.
pub fn box_corners(b: &Box3D) -> Result<[EgoPoint; 8], GeometryError> {
    if !(b.w > 0.0 && b.l > 0.0 && b.h > 0.0) {
        return Err(GeometryError::NonPositiveSize([b.w, b.l, b.h]));
    }
    let (s, c) = b.yaw.sin_cos();
    let mut out = [EgoPoint::new(0.0, 0.0, 0.0); 8];
    for (i, slot) in out.iter_mut().enumerate() {
        let lon = if i & 4 == 0 { b.l / 2.0 } else { -b.l / 2.0 };
        let lat = if i & 2 == 0 { b.w / 2.0 } else { -b.w / 2.0 };
        let vert = if i & 1 == 0 { b.h / 2.0 } else { -b.h / 2.0 };
        *slot = EgoPoint::new(b.x + lon * c - lat * s, b.y + lon * s + lat * c, b.z + vert);
    }
    Ok(out)
}
