//! Camera model, depth-map unprojection/projection, and rigid transforms.
//!
//! Coordinate frame everywhere: x right, y down, z forward (KITTI camera
//! convention). Poses use the column-vector form `R * p + t`; row-convention
//! pose files must be transposed at ingestion.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && cx.is_finite() && cy.is_finite()) {
            return Err(Error::invalid(format!(
                "bad intrinsics fx={fx} fy={fy} cx={cx} cy={cy}"
            )));
        }
        Ok(CameraIntrinsics { fx, fy, cx, cy })
    }

    /// Ray direction through pixel (u, v), normalized to z = 1.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// Dense per-pixel depth in meters, row-major. Depth <= 0 or non-finite marks
/// a pixel invalid (16-bit depth images use 0 for "no measurement").
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    values: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::invalid(format!(
                "depth map has {} values, expected {}x{}",
                values.len(),
                width,
                height
            )));
        }
        Ok(DepthMap {
            width,
            height,
            values,
        })
    }

    pub fn constant(width: usize, height: usize, depth: f64) -> Self {
        DepthMap {
            width,
            height,
            values: vec![depth; width * height],
        }
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.values[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, depth: f64) {
        self.values[v * self.width + u] = depth;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn is_valid(depth: f64) -> bool {
        depth.is_finite() && depth > 0.0
    }
}

/// A point cloud in the camera frame with optional per-point RGB in [0, 1]
/// and optional pixel provenance.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub colors: Option<Vec<[f64; 3]>>,
    pub source_pixels: Option<Vec<[f64; 2]>>,
}

impl PointCloud {
    pub fn from_points(points: Vec<Vector3<f64>>) -> Self {
        PointCloud {
            points,
            colors: None,
            source_pixels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Keep only the listed indices, preserving order and attributes.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            colors: self
                .colors
                .as_ref()
                .map(|c| indices.iter().map(|&i| c[i]).collect()),
            source_pixels: self
                .source_pixels
                .as_ref()
                .map(|s| indices.iter().map(|&i| s[i]).collect()),
        }
    }
}

/// Simple RGB image with channels in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[f64; 3]>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::invalid("image pixel count mismatch"));
        }
        Ok(RgbImage {
            width,
            height,
            pixels,
        })
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize) -> [f64; 3] {
        self.pixels[v * self.width + u]
    }
}

/// Per-point 3D displacement, index-aligned with a source cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub vectors: Vec<Vector3<f64>>,
}

impl FlowField {
    pub fn zeros(n: usize) -> Self {
        FlowField {
            vectors: vec![Vector3::zeros(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Rigid camera motion between frames: p2 = R * p1 + t.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub const ORTHONORMALITY_TOL: f64 = 1e-9;

    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = RigidTransform {
            rotation,
            translation,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let rtr = self.rotation.transpose() * self.rotation;
        let err = (rtr - Matrix3::identity()).norm();
        if err > Self::ORTHONORMALITY_TOL {
            return Err(Error::invalid(format!(
                "rotation not orthonormal, |R'R - I| = {err:e}"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > Self::ORTHONORMALITY_TOL {
            return Err(Error::invalid(format!("rotation determinant {det}")));
        }
        if !self.translation.iter().all(|c| c.is_finite()) {
            return Err(Error::invalid("non-finite translation"));
        }
        Ok(())
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Composition: (self ∘ other)(p) = self(other(p)).
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Rotation about an axis by an angle in radians.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rotation = nalgebra::Rotation3::from_axis_angle(
            &nalgebra::Unit::new_normalize(axis),
            angle,
        )
        .into_inner();
        RigidTransform {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation,
        }
    }
}

/// One projected point: sub-pixel image coordinates plus depth. Points behind
/// the camera are flagged invalid rather than dropped so index alignment with
/// flow fields is never broken.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub valid: bool,
}

/// Unproject every valid-depth pixel to a 3D point, row-major pixel order.
/// Colors are copied from `image` when given; pixel provenance is recorded.
pub fn unproject(
    depth: &DepthMap,
    intrinsics: &CameraIntrinsics,
    image: Option<&RgbImage>,
) -> Result<PointCloud> {
    if let Some(img) = image {
        if img.width != depth.width || img.height != depth.height {
            return Err(Error::invalid(format!(
                "image {}x{} does not match depth {}x{}",
                img.width, img.height, depth.width, depth.height
            )));
        }
    }
    let mut points = Vec::new();
    let mut colors = image.map(|_| Vec::new());
    let mut source_pixels = Vec::new();
    for v in 0..depth.height {
        for u in 0..depth.width {
            let z = depth.at(u, v);
            if !DepthMap::is_valid(z) {
                continue;
            }
            points.push(intrinsics.ray(u as f64, v as f64) * z);
            source_pixels.push([u as f64, v as f64]);
            if let (Some(cols), Some(img)) = (colors.as_mut(), image) {
                cols.push(img.at(u, v));
            }
        }
    }
    Ok(PointCloud {
        points,
        colors,
        source_pixels: Some(source_pixels),
    })
}

/// Project a single point; z <= 0 is flagged invalid.
#[inline]
pub fn project_point(p: &Vector3<f64>, intrinsics: &CameraIntrinsics) -> Projection {
    if p.z > 0.0 {
        Projection {
            u: intrinsics.fx * p.x / p.z + intrinsics.cx,
            v: intrinsics.fy * p.y / p.z + intrinsics.cy,
            depth: p.z,
            valid: true,
        }
    } else {
        Projection {
            u: 0.0,
            v: 0.0,
            depth: p.z,
            valid: false,
        }
    }
}

/// Project every point to the image plane, index-aligned with the input.
pub fn project(cloud: &PointCloud, intrinsics: &CameraIntrinsics) -> Vec<Projection> {
    cloud
        .points
        .iter()
        .map(|p| project_point(p, intrinsics))
        .collect()
}

/// Apply a rigid transform to every point; colors and provenance preserved.
pub fn apply_transform(cloud: &PointCloud, pose: &RigidTransform) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| pose.apply(p)).collect(),
        colors: cloud.colors.clone(),
        source_pixels: cloud.source_pixels.clone(),
    }
}

/// Flow induced purely by camera ego-motion: (R*p + t) - p per point.
pub fn static_flow(cloud: &PointCloud, pose: &RigidTransform) -> FlowField {
    FlowField {
        vectors: cloud.points.iter().map(|p| pose.apply(p) - p).collect(),
    }
}
