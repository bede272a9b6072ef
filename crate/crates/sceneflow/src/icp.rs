//! Point-to-point Iterative Closest Point baseline.
//!
//! Alternates distance-gated nearest-neighbor correspondence with the
//! closed-form SVD alignment of the cross-covariance (reflection-corrected).
//! The recovered rigid transform and its induced flow serve as the classical
//! comparison against the optimized scene flow.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{static_flow, FlowField, PointCloud, RigidTransform};
use crate::neighbors::SpatialIndex;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpConfig {
    pub max_iterations: usize,
    /// Stop when the RMS residual changes by less than this (meters).
    pub convergence_delta: f64,
    /// Correspondences farther apart than this are discarded (meters).
    pub max_correspondence_distance: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        IcpConfig {
            max_iterations: 50,
            convergence_delta: 1e-6,
            max_correspondence_distance: 2.0,
        }
    }
}

impl IcpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0
            || self.convergence_delta <= 0.0
            || self.max_correspondence_distance <= 0.0
        {
            return Err(Error::invalid("icp config fields must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct IcpResult {
    pub transform: RigidTransform,
    pub rms_residual: f64,
    pub iterations_used: usize,
    /// RMS residual after each iteration, for convergence diagnostics.
    pub residual_trace: Vec<f64>,
}

/// Best rigid alignment of paired points in the least-squares sense
/// (Kabsch / Umeyama without scale).
fn fit_rigid(source: &[Vector3<f64>], target: &[Vector3<f64>]) -> Result<RigidTransform> {
    debug_assert_eq!(source.len(), target.len());
    let n = source.len();
    if n < 3 {
        return Err(Error::RegistrationFailure(format!(
            "only {n} correspondences, need at least 3"
        )));
    }
    let centroid_s: Vector3<f64> = source.iter().sum::<Vector3<f64>>() / n as f64;
    let centroid_t: Vector3<f64> = target.iter().sum::<Vector3<f64>>() / n as f64;
    let mut cov = Matrix3::zeros();
    for (s, t) in source.iter().zip(target) {
        cov += (t - centroid_t) * (s - centroid_s).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    // Guard against rank-deficient geometry (collinear correspondences).
    if svd.singular_values[1] < 1e-12 * svd.singular_values[0].max(1e-300) {
        return Err(Error::RegistrationFailure(
            "degenerate correspondence geometry (rank-deficient covariance)".into(),
        ));
    }
    let d = (u * v_t).determinant();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d.signum()));
    let rotation = u * correction * v_t;
    let translation = centroid_t - rotation * centroid_s;
    RigidTransform::new(rotation, translation)
        .map_err(|e| Error::RegistrationFailure(format!("svd produced invalid rotation: {e}")))
}

/// Register `source` onto `target`, returning the transform mapping source
/// points into the target frame.
pub fn icp_register(
    source: &PointCloud,
    target: &PointCloud,
    cfg: &IcpConfig,
) -> Result<IcpResult> {
    cfg.validate()?;
    if source.len() < 3 || target.len() < 3 {
        return Err(Error::invalid("icp needs at least 3 points per cloud"));
    }
    let target_index = SpatialIndex::build(target)?;
    let gate_sq = cfg.max_correspondence_distance * cfg.max_correspondence_distance;

    let mut transform = RigidTransform::identity();
    let mut prev_rms = f64::INFINITY;
    let mut trace = Vec::new();
    let mut iterations_used = 0;

    for _ in 0..cfg.max_iterations {
        iterations_used += 1;

        // Correspondence under the current transform.
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut sq_sum = 0.0;
        for p in &source.points {
            let moved = transform.apply(p);
            let nn = target_index.nearest(&moved);
            if nn.sq_dist <= gate_sq {
                src.push(*p);
                dst.push(*target_index.point(nn.id));
                sq_sum += nn.sq_dist;
            }
        }
        if src.len() < 3 {
            return Err(Error::RegistrationFailure(format!(
                "only {} gated correspondences",
                src.len()
            )));
        }
        let rms = (sq_sum / src.len() as f64).sqrt();
        trace.push(rms);

        // Already aligned: nothing left to fit.
        if rms < cfg.convergence_delta {
            prev_rms = rms;
            break;
        }
        if (prev_rms - rms).abs() < cfg.convergence_delta {
            prev_rms = rms;
            break;
        }
        prev_rms = rms;

        transform = fit_rigid(&src, &dst)?;
    }

    Ok(IcpResult {
        transform,
        rms_residual: prev_rms,
        iterations_used,
        residual_trace: trace,
    })
}

/// The rigid flow induced by a transform: ICP's scene-flow prediction.
pub fn icp_flow(source: &PointCloud, transform: &RigidTransform) -> FlowField {
    static_flow(source, transform)
}
