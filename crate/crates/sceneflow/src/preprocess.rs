//! Point-cloud cleanup: ground/sky removal, sensor-range crop, and
//! z-buffer-style occlusion removal against the second frame's depth map.
//!
//! Default pipeline order is ground/sky -> range -> occlusion. Every filter
//! returns the kept source indices so callers can track provenance.

use crate::error::Result;
use crate::geometry::{CameraIntrinsics, DepthMap, PointCloud, RigidTransform};
use crate::losses::bilinear_depth;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessConfig {
    /// Points closer to the ground plane than this are removed (meters).
    pub min_height_above_ground: f64,
    /// Points with z beyond this are removed as sky/far (meters).
    pub max_depth: f64,
    /// Camera height above the ground plane (meters). Height above ground of
    /// a point is camera_height - y in the y-down camera frame.
    pub camera_height: f64,
    /// Euclidean-norm crop emulating the LiDAR envelope (meters).
    pub range_limit: f64,
    /// Warped depth may exceed the frame-2 depth by this much before the
    /// point counts as occluded (meters).
    pub occlusion_tolerance: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            min_height_above_ground: 1.15,
            max_depth: 35.0,
            camera_height: 1.65,
            range_limit: 80.0,
            occlusion_tolerance: 0.5,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let all_positive = self.min_height_above_ground > 0.0
            && self.max_depth > 0.0
            && self.camera_height > 0.0
            && self.range_limit > 0.0
            && self.occlusion_tolerance > 0.0;
        if !all_positive {
            return Err(crate::error::Error::invalid(
                "preprocess config fields must all be positive",
            ));
        }
        Ok(())
    }
}

fn filter_by<F: Fn(usize) -> bool>(cloud: &PointCloud, keep: F) -> (PointCloud, Vec<usize>) {
    let kept: Vec<usize> = (0..cloud.len()).filter(|&i| keep(i)).collect();
    (cloud.select(&kept), kept)
}

/// Remove ground points (height above ground < min_height_above_ground) and
/// sky/far points (z > max_depth).
pub fn crop_ground_sky(cloud: &PointCloud, cfg: &PreprocessConfig) -> (PointCloud, Vec<usize>) {
    filter_by(cloud, |i| {
        let p = &cloud.points[i];
        let height_above_ground = cfg.camera_height - p.y;
        height_above_ground >= cfg.min_height_above_ground && p.z <= cfg.max_depth
    })
}

/// Remove points outside the sensor's Euclidean range.
pub fn crop_range(cloud: &PointCloud, cfg: &PreprocessConfig) -> (PointCloud, Vec<usize>) {
    filter_by(cloud, |i| cloud.points[i].norm() <= cfg.range_limit)
}

/// Warp each frame-1 point into frame 2 and compare its depth against the
/// bilinearly interpolated frame-2 depth map. Points whose warped depth
/// exceeds the map depth by more than the tolerance are occluded and removed.
/// Points projecting outside the image or onto invalid depth are kept:
/// there is no evidence of occlusion there.
pub fn remove_occluded(
    cloud1: &PointCloud,
    pose: &RigidTransform,
    depth2: &DepthMap,
    intrinsics: &CameraIntrinsics,
    cfg: &PreprocessConfig,
) -> (PointCloud, Vec<usize>) {
    filter_by(cloud1, |i| {
        let warped = pose.apply(&cloud1.points[i]);
        if warped.z <= 0.0 {
            return true;
        }
        let u = intrinsics.fx * warped.x / warped.z + intrinsics.cx;
        let v = intrinsics.fy * warped.y / warped.z + intrinsics.cy;
        let (map_depth, valid) = bilinear_depth(depth2, u, v);
        if !valid {
            return true;
        }
        warped.z <= map_depth + cfg.occlusion_tolerance
    })
}

/// Full cleanup pipeline: ground/sky, range, then occlusion when frame-2 data
/// is available. Returned indices map into the original cloud.
pub fn preprocess(
    cloud: &PointCloud,
    cfg: &PreprocessConfig,
    frame2: Option<(&RigidTransform, &DepthMap, &CameraIntrinsics)>,
) -> (PointCloud, Vec<usize>) {
    let (c1, idx1) = crop_ground_sky(cloud, cfg);
    let (c2, idx2) = crop_range(&c1, cfg);
    let (c3, idx3) = match frame2 {
        Some((pose, depth2, intr)) => remove_occluded(&c2, pose, depth2, intr, cfg),
        None => {
            let all: Vec<usize> = (0..c2.len()).collect();
            (c2.clone(), all)
        }
    };
    let indices: Vec<usize> = idx3.iter().map(|&k| idx1[idx2[k]]).collect();
    (c3, indices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::unproject;
    use nalgebra::Vector3;

    fn cfg() -> PreprocessConfig {
        PreprocessConfig::default()
    }

    #[test]
    fn ground_point_is_removed() {
        // Height above ground = 1.65 - 1.6 = 0.05 < 1.15.
        let cloud = PointCloud::from_points(vec![Vector3::new(0.0, 1.6, 10.0)]);
        let (out, idx) = crop_ground_sky(&cloud, &cfg());
        assert!(out.is_empty());
        assert!(idx.is_empty());
    }

    #[test]
    fn far_point_is_removed_and_near_point_kept() {
        let cloud = PointCloud::from_points(vec![
            Vector3::new(0.0, 0.0, 40.0),
            Vector3::new(0.0, 0.0, 10.0),
        ]);
        let (out, idx) = crop_ground_sky(&cloud, &cfg());
        assert_eq!(out.len(), 1);
        assert_eq!(idx, vec![1]);
        assert_eq!(out.points[0], Vector3::new(0.0, 0.0, 10.0));
    }

    #[test]
    fn range_crop_boundary() {
        let cloud = PointCloud::from_points(vec![
            Vector3::new(81.0, 0.0, 0.0),
            Vector3::new(79.9, 0.0, 0.0),
        ]);
        let (out, idx) = crop_range(&cloud, &cfg());
        assert_eq!(idx, vec![1]);
        assert_eq!(out.points[0].x, 79.9);
    }

    #[test]
    fn range_crop_empty_cloud() {
        let cloud = PointCloud::default();
        let (out, idx) = crop_range(&cloud, &cfg());
        assert!(out.is_empty());
        assert!(idx.is_empty());
    }

    #[test]
    fn occlusion_identity_pose_self_depth_removes_nothing() {
        let k = CameraIntrinsics::new(50.0, 50.0, 8.0, 6.0).unwrap();
        let mut depth = DepthMap::constant(16, 12, 5.0);
        depth.set(3, 4, 2.0);
        let cloud = unproject(&depth, &k, None).unwrap();
        let (out, idx) =
            remove_occluded(&cloud, &RigidTransform::identity(), &depth, &k, &cfg());
        assert_eq!(out.len(), cloud.len());
        assert_eq!(idx, (0..cloud.len()).collect::<Vec<_>>());
    }

    #[test]
    fn point_projecting_outside_image_is_kept() {
        let k = CameraIntrinsics::new(50.0, 50.0, 8.0, 6.0).unwrap();
        let depth = DepthMap::constant(16, 12, 1.0);
        // Far off-axis point lands outside the 16x12 image.
        let cloud = PointCloud::from_points(vec![Vector3::new(100.0, 0.0, 1.0)]);
        let (out, _) = remove_occluded(&cloud, &RigidTransform::identity(), &depth, &k, &cfg());
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn occluded_point_behind_surface_is_removed() {
        let k = CameraIntrinsics::new(50.0, 50.0, 8.0, 6.0).unwrap();
        let depth = DepthMap::constant(16, 12, 5.0);
        // On the optical axis at 10 m, behind the 5 m surface by > tolerance.
        let cloud = PointCloud::from_points(vec![Vector3::new(0.0, 0.0, 10.0)]);
        let (out, _) = remove_occluded(&cloud, &RigidTransform::identity(), &depth, &k, &cfg());
        assert!(out.is_empty());
    }

    #[test]
    fn filters_are_idempotent() {
        let mut pts = Vec::new();
        for i in 0..30 {
            let f = i as f64;
            pts.push(Vector3::new(f - 15.0, (f * 0.37).sin() * 3.0, 2.0 + f * 3.0));
        }
        let cloud = PointCloud::from_points(pts);
        let c = cfg();
        let (once, _) = crop_ground_sky(&cloud, &c);
        let (twice, idx) = crop_ground_sky(&once, &c);
        assert_eq!(once, twice);
        assert_eq!(idx, (0..once.len()).collect::<Vec<_>>());
        let (once, _) = crop_range(&cloud, &c);
        let (twice, _) = crop_range(&once, &c);
        assert_eq!(once, twice);
    }

    #[test]
    fn kept_indices_are_strictly_increasing_and_consistent() {
        let mut pts = Vec::new();
        for i in 0..50 {
            let f = i as f64;
            pts.push(Vector3::new(f, 1.7 - (i % 3) as f64, 1.0 + f));
        }
        let cloud = PointCloud::from_points(pts);
        let (out, idx) = preprocess(&cloud, &cfg(), None);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        for (j, &i) in idx.iter().enumerate() {
            assert_eq!(out.points[j], cloud.points[i]);
        }
    }

    #[test]
    fn select_preserves_colors_and_pixels() {
        let mut cloud = PointCloud::from_points(vec![
            Vector3::new(0.0, 0.0, 10.0),
            Vector3::new(0.0, 0.0, 40.0),
            Vector3::new(0.0, 0.0, 20.0),
        ]);
        cloud.colors = Some(vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        cloud.source_pixels = Some(vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]);
        let (out, idx) = crop_ground_sky(&cloud, &cfg());
        assert_eq!(idx, vec![0, 2]);
        assert_eq!(out.colors.as_ref().unwrap()[1], [0.0, 0.0, 1.0]);
        assert_eq!(out.source_pixels.as_ref().unwrap()[1], [2.0, 0.0]);
    }
}
