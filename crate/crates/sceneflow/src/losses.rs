//! The four unsupervised loss functions, their combination, and analytic
//! gradients with respect to the optimized flow fields.
//!
//! Losses are sums over points, not means. Gradients use lagged
//! correspondences: nearest neighbors, interpolation cells, and IDW
//! footprints are frozen in a [`LevelContext`] once per optimizer iteration
//! and held fixed while the fields vary, which makes the objective locally
//! smooth and finite-difference checks well-posed.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{
    static_flow, CameraIntrinsics, DepthMap, FlowField, PointCloud, RigidTransform,
};
use crate::neighbors::SpatialIndex;

/// Distance below which IDW treats a query as coincident with a data point
/// and returns that point's value exactly.
pub const IDW_EPSILON: f64 = 1e-9;

/// Default neighborhood size for Laplacian coordinates and IDW footprints.
pub const DEFAULT_NEIGHBOR_K: usize = 9;

/// Per-level factors and per-loss weights of the combined objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub alpha: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub beta4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: vec![0.02, 0.04, 0.08, 0.16],
            beta1: 0.1,
            beta2: 0.1,
            beta3: 1.0,
            beta4: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha.iter().all(|a| *a >= 0.0 && a.is_finite())
            && [self.beta1, self.beta2, self.beta3, self.beta4]
                .iter()
                .all(|b| *b >= 0.0 && b.is_finite());
        if !ok {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Component losses of one pyramid level. `total` is the level's weighted
/// contribution alpha_k * (b1*(depth1+depth2) + b2*ds + b3*chamfer + b4*lr).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub depth1: f64,
    pub depth2: f64,
    pub ds: f64,
    pub chamfer: f64,
    pub laplacian: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(&mut self, alpha: f64, w: &LossWeights) {
        self.total = alpha
            * (w.beta1 * (self.depth1 + self.depth2)
                + w.beta2 * self.ds
                + w.beta3 * self.chamfer
                + w.beta4 * self.laplacian);
    }

    /// Flat "name value" lines, one pair per line, for the CLI.
    pub fn to_kv(&self, point_count: usize) -> String {
        let n = point_count.max(1) as f64;
        let mut s = String::new();
        for (name, v) in [
            ("depth1", self.depth1),
            ("depth2", self.depth2),
            ("ds", self.ds),
            ("chamfer", self.chamfer),
            ("laplacian", self.laplacian),
            ("total", self.total),
        ] {
            s.push_str(&format!("{name} {v}\n"));
            if name != "total" {
                s.push_str(&format!("{name}_mean {}\n", v / n));
            }
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Bilinear depth interpolation
// ---------------------------------------------------------------------------

/// Bilinear blend of the four depth samples around (u, v). Invalid when the
/// query lies outside [0, W-1] x [0, H-1] or any corner depth is invalid.
pub fn bilinear_depth(depth: &DepthMap, u: f64, v: f64) -> (f64, bool) {
    match FrozenCell::at(depth, u, v) {
        Some(cell) => (cell.eval(u, v), true),
        None => (0.0, false),
    }
}

/// One frozen interpolation cell: lower corner indices plus the four corner
/// depths. Evaluating it is smooth in (u, v) and extrapolates linearly if the
/// query drifts out of the cell during a gradient step.
#[derive(Debug, Clone, Copy)]
struct FrozenCell {
    i1: f64,
    j1: f64,
    d11: f64,
    d21: f64,
    d12: f64,
    d22: f64,
}

impl FrozenCell {
    fn at(depth: &DepthMap, u: f64, v: f64) -> Option<FrozenCell> {
        if depth.width < 2 || depth.height < 2 {
            return None;
        }
        let (w, h) = (depth.width as f64, depth.height as f64);
        if !(u.is_finite() && v.is_finite()) || u < 0.0 || u > w - 1.0 || v < 0.0 || v > h - 1.0 {
            return None;
        }
        let i1 = (u.floor() as usize).min(depth.width - 2);
        let j1 = (v.floor() as usize).min(depth.height - 2);
        let d11 = depth.at(i1, j1);
        let d21 = depth.at(i1 + 1, j1);
        let d12 = depth.at(i1, j1 + 1);
        let d22 = depth.at(i1 + 1, j1 + 1);
        if ![d11, d21, d12, d22].iter().all(|d| DepthMap::is_valid(*d)) {
            return None;
        }
        Some(FrozenCell {
            i1: i1 as f64,
            j1: j1 as f64,
            d11,
            d21,
            d12,
            d22,
        })
    }

    #[inline]
    fn eval(&self, u: f64, v: f64) -> f64 {
        let (fu, fv) = (u - self.i1, v - self.j1);
        self.d11 * (1.0 - fu) * (1.0 - fv)
            + self.d21 * fu * (1.0 - fv)
            + self.d12 * (1.0 - fu) * fv
            + self.d22 * fu * fv
    }

    /// (db/du, db/dv) at (u, v).
    #[inline]
    fn grad(&self, u: f64, v: f64) -> (f64, f64) {
        let (fu, fv) = (u - self.i1, v - self.j1);
        let du = (self.d21 - self.d11) * (1.0 - fv) + (self.d22 - self.d12) * fv;
        let dv = (self.d12 - self.d11) * (1.0 - fu) + (self.d22 - self.d21) * fu;
        (du, dv)
    }
}

// ---------------------------------------------------------------------------
// Depth consistency
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DepthConsistency {
    pub loss: f64,
    /// Residual vector per point; zero where masked.
    pub residuals: Vec<Vector3<f64>>,
    /// False where the point was masked out (behind camera, out of image,
    /// invalid corner depth).
    pub valid: Vec<bool>,
}

/// Project each flowed point into the second frame, read the interpolated
/// depth, re-unproject along the same ray, and penalize the squared distance
/// between the flowed point and its interpolated counterpart.
pub fn depth_consistency(
    flowed: &PointCloud,
    depth2: &DepthMap,
    intrinsics: &CameraIntrinsics,
) -> DepthConsistency {
    let mut residuals = vec![Vector3::zeros(); flowed.len()];
    let mut valid = vec![false; flowed.len()];
    let mut loss = 0.0;
    for (i, p) in flowed.points.iter().enumerate() {
        if p.z <= 0.0 {
            continue;
        }
        let u = intrinsics.fx * p.x / p.z + intrinsics.cx;
        let v = intrinsics.fy * p.y / p.z + intrinsics.cy;
        let Some(cell) = FrozenCell::at(depth2, u, v) else {
            continue;
        };
        let d_hat = cell.eval(u, v);
        let reunprojected = intrinsics.ray(u, v) * d_hat;
        let r = p - reunprojected;
        residuals[i] = r;
        valid[i] = true;
        loss += r.norm_squared();
    }
    DepthConsistency {
        loss,
        residuals,
        valid,
    }
}

// ---------------------------------------------------------------------------
// Dynamic-static consistency
// ---------------------------------------------------------------------------

/// Penalize disagreement between the overall flow and static + dynamic.
pub fn ds_consistency(
    overall: &FlowField,
    static_f: &FlowField,
    dynamic: &FlowField,
) -> Result<(f64, Vec<Vector3<f64>>)> {
    if overall.len() != static_f.len() || overall.len() != dynamic.len() {
        return Err(Error::invalid(format!(
            "flow field length mismatch: overall {}, static {}, dynamic {}",
            overall.len(),
            static_f.len(),
            dynamic.len()
        )));
    }
    let mut residuals = Vec::with_capacity(overall.len());
    let mut loss = 0.0;
    for i in 0..overall.len() {
        let r = overall.vectors[i] - (static_f.vectors[i] + dynamic.vectors[i]);
        loss += r.norm_squared();
        residuals.push(r);
    }
    Ok((loss, residuals))
}

// ---------------------------------------------------------------------------
// Chamfer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ChamferResult {
    pub loss: f64,
    /// For each point of `a`, the id of its nearest point in `b`.
    pub a_to_b: Vec<usize>,
    /// For each point of `b`, the id of its nearest point in `a`.
    pub b_to_a: Vec<usize>,
}

/// Symmetric sum of squared nearest-neighbor distances between two clouds.
pub fn chamfer(
    a: &PointCloud,
    b: &PointCloud,
    index_b: &SpatialIndex,
    index_a: &SpatialIndex,
) -> Result<ChamferResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("chamfer requires two non-empty clouds"));
    }
    let mut loss = 0.0;
    let mut a_to_b = Vec::with_capacity(a.len());
    for p in &a.points {
        let n = index_b.nearest(p);
        loss += n.sq_dist;
        a_to_b.push(n.id);
    }
    let mut b_to_a = Vec::with_capacity(b.len());
    for q in &b.points {
        let n = index_a.nearest(q);
        loss += n.sq_dist;
        b_to_a.push(n.id);
    }
    Ok(ChamferResult { loss, a_to_b, b_to_a })
}

// ---------------------------------------------------------------------------
// Laplacian coordinates, IDW interpolation, Laplacian regularization
// ---------------------------------------------------------------------------

/// Laplacian coordinate of every point: mean offset of its k nearest
/// neighbors (self excluded) from the point itself.
pub fn laplacian_coords(
    cloud: &PointCloud,
    index: &SpatialIndex,
    k: usize,
) -> Result<Vec<Vector3<f64>>> {
    if cloud.len() <= k {
        return Err(Error::invalid(format!(
            "laplacian coordinates need more than k={k} points, got {}",
            cloud.len()
        )));
    }
    let sets = neighbor_sets(&cloud.points, index, k)?;
    Ok(cloud
        .points
        .iter()
        .zip(&sets)
        .map(|(p, ns)| gamma(p, ns, &cloud.points))
        .collect())
}

fn gamma(p: &Vector3<f64>, neighbor_ids: &[usize], points: &[Vector3<f64>]) -> Vector3<f64> {
    let mut sum = Vector3::zeros();
    for &j in neighbor_ids {
        sum += points[j] - p;
    }
    sum / neighbor_ids.len() as f64
}

/// k nearest neighbors of each point within its own cloud, self excluded by
/// id so exact duplicates still count as neighbors.
fn neighbor_sets(
    points: &[Vector3<f64>],
    index: &SpatialIndex,
    k: usize,
) -> Result<Vec<Vec<usize>>> {
    let mut sets = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let nn = index.knn(p, k + 1)?;
        let ids: Vec<usize> = nn.iter().map(|n| n.id).filter(|&id| id != i).take(k).collect();
        sets.push(ids);
    }
    Ok(sets)
}

/// Inverse-distance-weighted mean of the k nearest data values. A query
/// within [`IDW_EPSILON`] of a data point returns that point's value exactly.
pub fn idw_interpolate(
    query: &Vector3<f64>,
    data_cloud: &PointCloud,
    data_values: &[Vector3<f64>],
    index: &SpatialIndex,
    k: usize,
) -> Result<Vector3<f64>> {
    if data_values.len() != data_cloud.len() {
        return Err(Error::invalid("idw data values not aligned with data cloud"));
    }
    let nn = index.knn(query, k.max(1))?;
    // knn is sorted, so the first sub-epsilon hit is the nearest one.
    if nn[0].sq_dist < IDW_EPSILON * IDW_EPSILON {
        return Ok(data_values[nn[0].id]);
    }
    let mut num = Vector3::zeros();
    let mut den = 0.0;
    for n in &nn {
        let w = 1.0 / n.sq_dist.sqrt();
        num += data_values[n.id] * w;
        den += w;
    }
    Ok(num / den)
}

/// Penalize the difference between each flowed point's Laplacian coordinate
/// and the IDW-interpolated Laplacian of the target cloud at that point.
pub fn laplacian_reg(
    flowed: &PointCloud,
    target: &PointCloud,
    k: usize,
) -> Result<(f64, Vec<Vector3<f64>>)> {
    if flowed.len() <= k || target.len() <= k {
        return Err(Error::invalid(format!(
            "laplacian regularization needs clouds larger than k={k}"
        )));
    }
    let flowed_index = SpatialIndex::build(flowed)?;
    let target_index = SpatialIndex::build(target)?;
    let gamma_flowed = laplacian_coords(flowed, &flowed_index, k)?;
    let gamma_target = laplacian_coords(target, &target_index, k)?;
    let mut residuals = Vec::with_capacity(flowed.len());
    let mut loss = 0.0;
    for (i, p) in flowed.points.iter().enumerate() {
        let interpolated = idw_interpolate(p, target, &gamma_target, &target_index, k)?;
        let r = gamma_flowed[i] - interpolated;
        loss += r.norm_squared();
        residuals.push(r);
    }
    Ok((loss, residuals))
}

// ---------------------------------------------------------------------------
// Frozen-correspondence level context and gradients
// ---------------------------------------------------------------------------

/// Constant per-target-cloud data shared by every freeze: the spatial index
/// and the target Laplacian coordinates.
#[derive(Debug, Clone)]
pub struct TargetCache {
    pub index: SpatialIndex,
    pub gamma: Vec<Vector3<f64>>,
}

impl TargetCache {
    pub fn build(target: &PointCloud, k: usize) -> Result<Self> {
        let index = SpatialIndex::build(target)?;
        let gamma = laplacian_coords(target, &index, k)?;
        Ok(TargetCache { index, gamma })
    }
}

#[derive(Debug, Clone)]
struct IdwFootprint {
    ids: Vec<usize>,
    /// Target id whose Laplacian is used verbatim when the query coincided
    /// with a data point at freeze time.
    pinned: Option<usize>,
}

/// All discrete structure of one pyramid level, frozen at the current
/// iterate. Evaluation and gradients over this context are smooth functions
/// of the flow fields.
#[derive(Debug, Clone)]
pub struct LevelContext<'a> {
    pub base: &'a [Vector3<f64>],
    pub target: &'a PointCloud,
    /// Full-resolution target used for the forward Chamfer pulls. Matching
    /// against exact surface samples keeps already-correct points from being
    /// dragged toward a sparse subsampling of the same surface; the reverse
    /// pulls and the Laplacian terms stay on the density-matched `target`.
    pub dense_target: &'a PointCloud,
    pub static_flow: &'a [Vector3<f64>],
    intrinsics: &'a CameraIntrinsics,
    k: usize,
    cells_overall: Vec<Option<FrozenCell>>,
    cells_sd: Vec<Option<FrozenCell>>,
    cham_a_to_b: Vec<usize>,
    cham_b_to_a: Vec<usize>,
    lap_neighbors: Vec<Vec<usize>>,
    idw: Vec<IdwFootprint>,
    target_gamma: &'a [Vector3<f64>],
}

fn warp(base: &[Vector3<f64>], flow: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    base.iter().zip(flow).map(|(p, f)| p + f).collect()
}

fn warp2(
    base: &[Vector3<f64>],
    f1: &[Vector3<f64>],
    f2: &[Vector3<f64>],
) -> Vec<Vector3<f64>> {
    base.iter()
        .zip(f1.iter().zip(f2))
        .map(|(p, (a, b))| p + a + b)
        .collect()
}

impl<'a> LevelContext<'a> {
    /// Freeze correspondences, interpolation cells, neighbor sets, and IDW
    /// footprints at the current fields.
    #[allow(clippy::too_many_arguments)]
    pub fn freeze(
        base: &'a [Vector3<f64>],
        target: &'a PointCloud,
        dense_target: &'a PointCloud,
        dense_index: &SpatialIndex,
        static_flow: &'a [Vector3<f64>],
        overall: &FlowField,
        dynamic: &FlowField,
        depth2: &'a DepthMap,
        intrinsics: &'a CameraIntrinsics,
        cache: &'a TargetCache,
        k: usize,
    ) -> Result<Self> {
        let n = base.len();
        if n == 0 || target.is_empty() {
            return Err(Error::invalid("cannot freeze a level over empty clouds"));
        }
        if overall.len() != n || dynamic.len() != n || static_flow.len() != n {
            return Err(Error::invalid("flow fields not aligned with level points"));
        }
        if n <= k {
            return Err(Error::invalid(format!(
                "level needs more than k={k} points, got {n}"
            )));
        }
        let flowed_o = warp(base, &overall.vectors);
        let flowed_sd = warp2(base, static_flow, &dynamic.vectors);

        let freeze_cells = |pts: &[Vector3<f64>]| -> Vec<Option<FrozenCell>> {
            pts.iter()
                .map(|p| {
                    if p.z <= 0.0 {
                        return None;
                    }
                    let u = intrinsics.fx * p.x / p.z + intrinsics.cx;
                    let v = intrinsics.fy * p.y / p.z + intrinsics.cy;
                    FrozenCell::at(depth2, u, v)
                })
                .collect()
        };
        let cells_overall = freeze_cells(&flowed_o);
        let cells_sd = freeze_cells(&flowed_sd);

        if dense_target.is_empty() {
            return Err(Error::invalid("dense target cloud is empty"));
        }
        let flowed_index = SpatialIndex::from_points(&flowed_o)?;
        let cham_a_to_b: Vec<usize> =
            flowed_o.iter().map(|p| dense_index.nearest(p).id).collect();
        let cham_b_to_a: Vec<usize> = target
            .points
            .iter()
            .map(|q| flowed_index.nearest(q).id)
            .collect();

        let lap_neighbors = neighbor_sets(&flowed_o, &flowed_index, k)?;

        let mut idw = Vec::with_capacity(n);
        for p in &flowed_o {
            let nn = cache.index.knn(p, k)?;
            let pinned = (nn[0].sq_dist < IDW_EPSILON * IDW_EPSILON).then_some(nn[0].id);
            idw.push(IdwFootprint {
                ids: nn.iter().map(|x| x.id).collect(),
                pinned,
            });
        }

        Ok(LevelContext {
            base,
            target,
            dense_target,
            static_flow,
            intrinsics,
            k,
            cells_overall,
            cells_sd,
            cham_a_to_b,
            cham_b_to_a,
            lap_neighbors,
            idw,
            target_gamma: &cache.gamma,
        })
    }

    pub fn point_count(&self) -> usize {
        self.base.len()
    }

    /// Depth consistency of the overall-flow warp: loss and gradient with
    /// respect to the overall flow.
    pub fn eval_depth1(&self, overall: &FlowField) -> (f64, Vec<Vector3<f64>>) {
        let flowed = warp(self.base, &overall.vectors);
        eval_depth_frozen(&flowed, &self.cells_overall, self.intrinsics)
    }

    /// Depth consistency of the static+dynamic warp: loss and gradient with
    /// respect to the dynamic flow.
    pub fn eval_depth2(&self, dynamic: &FlowField) -> (f64, Vec<Vector3<f64>>) {
        let flowed = warp2(self.base, self.static_flow, &dynamic.vectors);
        eval_depth_frozen(&flowed, &self.cells_sd, self.intrinsics)
    }

    /// Dynamic-static consistency: loss plus gradients for overall and
    /// dynamic (the static field is not optimized).
    pub fn eval_ds(
        &self,
        overall: &FlowField,
        dynamic: &FlowField,
    ) -> (f64, Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
        let n = self.base.len();
        let mut loss = 0.0;
        let mut grad_o = vec![Vector3::zeros(); n];
        let mut grad_d = vec![Vector3::zeros(); n];
        for i in 0..n {
            let r = overall.vectors[i] - (self.static_flow[i] + dynamic.vectors[i]);
            loss += r.norm_squared();
            grad_o[i] = 2.0 * r;
            grad_d[i] = -2.0 * r;
        }
        (loss, grad_o, grad_d)
    }

    /// Chamfer with frozen two-way correspondences: loss and gradient with
    /// respect to the overall flow.
    pub fn eval_chamfer(&self, overall: &FlowField) -> (f64, Vec<Vector3<f64>>) {
        let flowed = warp(self.base, &overall.vectors);
        let mut loss = 0.0;
        let mut grad = vec![Vector3::zeros(); flowed.len()];
        for (i, p) in flowed.iter().enumerate() {
            let d = p - self.dense_target.points[self.cham_a_to_b[i]];
            loss += d.norm_squared();
            grad[i] += 2.0 * d;
        }
        for (j, q) in self.target.points.iter().enumerate() {
            let i = self.cham_b_to_a[j];
            let d = flowed[i] - q;
            loss += d.norm_squared();
            grad[i] += 2.0 * d;
        }
        (loss, grad)
    }

    /// Laplacian regularization with frozen neighbor sets and IDW
    /// footprints: loss and gradient with respect to the overall flow.
    pub fn eval_laplacian(&self, overall: &FlowField) -> (f64, Vec<Vector3<f64>>) {
        let flowed = warp(self.base, &overall.vectors);
        let n = flowed.len();

        // Interpolated target Laplacian, its residual, and the IDW weight
        // gradient per point.
        let mut loss = 0.0;
        let mut grad = vec![Vector3::zeros(); n];
        let mut residuals = vec![Vector3::zeros(); n];
        let mut gammas = vec![Vector3::zeros(); n];
        for i in 0..n {
            gammas[i] = gamma(&flowed[i], &self.lap_neighbors[i], &flowed);
        }
        for i in 0..n {
            let fp = &self.idw[i];
            let (interp, weights, dists) = if let Some(pin) = fp.pinned {
                (self.target_gamma[pin], Vec::new(), Vec::new())
            } else {
                let mut num = Vector3::zeros();
                let mut den = 0.0;
                let mut weights = Vec::with_capacity(fp.ids.len());
                let mut dists = Vec::with_capacity(fp.ids.len());
                for &j in &fp.ids {
                    let d = (flowed[i] - self.target.points[j]).norm().max(IDW_EPSILON);
                    let w = 1.0 / d;
                    num += self.target_gamma[j] * w;
                    den += w;
                    weights.push(w);
                    dists.push(d);
                }
                (num / den, weights, dists)
            };
            let r = gammas[i] - interp;
            residuals[i] = r;
            loss += r.norm_squared();

            // d(interp)/d(p_i) contribution through the IDW weights.
            if fp.pinned.is_none() {
                let den: f64 = weights.iter().sum();
                for (idx, &j) in fp.ids.iter().enumerate() {
                    let dw = -(flowed[i] - self.target.points[j])
                        / (dists[idx] * dists[idx] * dists[idx]);
                    let coeff = (self.target_gamma[j] - interp).dot(&r) / den;
                    // residual = gamma - interp, so the interp term enters with
                    // a minus sign; dw is the gradient of w_j.
                    grad[i] -= 2.0 * coeff * dw;
                }
            }
        }
        // d(gamma_i)/d(p_i) = -I and d(gamma_i)/d(p_j) = I/|N_i| for
        // neighbors j.
        for i in 0..n {
            grad[i] -= 2.0 * residuals[i];
            let m = self.lap_neighbors[i].len() as f64;
            for &j in &self.lap_neighbors[i] {
                grad[j] += 2.0 / m * residuals[i];
            }
        }
        (loss, grad)
    }

    /// All components plus the weighted per-level gradients. `alpha` is the
    /// level factor; the result's gradients are of the level's contribution
    /// to the combined objective.
    pub fn eval(
        &self,
        overall: &FlowField,
        dynamic: &FlowField,
        alpha: f64,
        weights: &LossWeights,
    ) -> Result<LevelEval> {
        let n = self.base.len();
        if overall.len() != n || dynamic.len() != n {
            return Err(Error::invalid("flow fields not aligned with level context"));
        }
        let (depth1, g_d1) = self.eval_depth1(overall);
        let (depth2, g_d2) = self.eval_depth2(dynamic);
        let (ds, g_ds_o, g_ds_d) = self.eval_ds(overall, dynamic);
        let (cham, g_cham) = self.eval_chamfer(overall);
        let (lap, g_lap) = self.eval_laplacian(overall);

        for (value, component) in [
            (depth1, "depth1"),
            (depth2, "depth2"),
            (ds, "ds"),
            (cham, "chamfer"),
            (lap, "laplacian"),
        ] {
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { component });
            }
        }

        let mut breakdown = LossBreakdown {
            depth1,
            depth2,
            ds,
            chamfer: cham,
            laplacian: lap,
            total: 0.0,
        };
        breakdown.combine(alpha, weights);

        let mut grad_overall = vec![Vector3::zeros(); n];
        let mut grad_dynamic = vec![Vector3::zeros(); n];
        for i in 0..n {
            grad_overall[i] = alpha
                * (weights.beta1 * g_d1[i]
                    + weights.beta2 * g_ds_o[i]
                    + weights.beta3 * g_cham[i]
                    + weights.beta4 * g_lap[i]);
            grad_dynamic[i] = alpha * (weights.beta1 * g_d2[i] + weights.beta2 * g_ds_d[i]);
        }
        Ok(LevelEval {
            breakdown,
            grad_overall,
            grad_dynamic,
        })
    }

    pub fn neighbor_k(&self) -> usize {
        self.k
    }
}

/// Depth-consistency loss and gradient under frozen cells. Masked points
/// contribute zero loss and zero gradient.
fn eval_depth_frozen(
    flowed: &[Vector3<f64>],
    cells: &[Option<FrozenCell>],
    intr: &CameraIntrinsics,
) -> (f64, Vec<Vector3<f64>>) {
    let mut loss = 0.0;
    let mut grad = vec![Vector3::zeros(); flowed.len()];
    for (i, p) in flowed.iter().enumerate() {
        let Some(cell) = cells[i] else { continue };
        let z = p.z;
        let u = intr.fx * p.x / z + intr.cx;
        let v = intr.fy * p.y / z + intr.cy;
        let b = cell.eval(u, v);
        let dir = intr.ray(u, v);
        let r = p - dir * b;
        loss += r.norm_squared();

        // Chain rule through projection, interpolation, and re-unprojection.
        let du = Vector3::new(intr.fx / z, 0.0, -intr.fx * p.x / (z * z));
        let dv = Vector3::new(0.0, intr.fy / z, -intr.fy * p.y / (z * z));
        let (bu, bv) = cell.grad(u, v);
        let gb = du * bu + dv * bv;
        let jt_r = gb * r.dot(&dir) + du * (b * r.x / intr.fx) + dv * (b * r.y / intr.fy);
        grad[i] = 2.0 * (r - jt_r);
    }
    (loss, grad)
}

// ---------------------------------------------------------------------------
// Combined objective over pyramid levels
// ---------------------------------------------------------------------------

/// One pyramid level of the combined objective.
#[derive(Debug, Clone)]
pub struct LevelInputs {
    pub pc1: PointCloud,
    pub pc2: PointCloud,
    pub overall: FlowField,
    pub dynamic: FlowField,
}

#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub levels: Vec<LossBreakdown>,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct LevelGradients {
    pub overall: Vec<Vector3<f64>>,
    pub dynamic: Vec<Vector3<f64>>,
}

fn eval_levels(
    levels: &[LevelInputs],
    depth2: &DepthMap,
    intrinsics: &CameraIntrinsics,
    pose: &RigidTransform,
    weights: &LossWeights,
    k: usize,
) -> Result<(TotalLoss, Vec<LevelGradients>)> {
    weights.validate()?;
    if levels.len() != weights.alpha.len() {
        return Err(Error::invalid(format!(
            "{} levels but {} alpha factors",
            levels.len(),
            weights.alpha.len()
        )));
    }
    let mut breakdowns = Vec::with_capacity(levels.len());
    let mut grads = Vec::with_capacity(levels.len());
    let mut total = 0.0;
    for (lvl, alpha) in levels.iter().zip(&weights.alpha) {
        if lvl.overall.len() != lvl.pc1.len() || lvl.dynamic.len() != lvl.pc1.len() {
            return Err(Error::invalid("level flow fields not aligned with pc1"));
        }
        let sf = static_flow(&lvl.pc1, pose);
        let cache = TargetCache::build(&lvl.pc2, k)?;
        let ctx = LevelContext::freeze(
            &lvl.pc1.points,
            &lvl.pc2,
            &lvl.pc2,
            &cache.index,
            &sf.vectors,
            &lvl.overall,
            &lvl.dynamic,
            depth2,
            intrinsics,
            &cache,
            k,
        )?;
        let eval = ctx.eval(&lvl.overall, &lvl.dynamic, *alpha, weights)?;
        total += eval.breakdown.total;
        breakdowns.push(eval.breakdown);
        grads.push(LevelGradients {
            overall: eval.grad_overall,
            dynamic: eval.grad_dynamic,
        });
    }
    Ok((
        TotalLoss {
            levels: breakdowns,
            total,
        },
        grads,
    ))
}

/// Combined multi-level objective with correspondences frozen at the given
/// fields.
pub fn total_loss(
    levels: &[LevelInputs],
    depth2: &DepthMap,
    intrinsics: &CameraIntrinsics,
    pose: &RigidTransform,
    weights: &LossWeights,
    k: usize,
) -> Result<TotalLoss> {
    Ok(eval_levels(levels, depth2, intrinsics, pose, weights, k)?.0)
}

/// Analytic gradient of [`total_loss`] with respect to the overall and
/// dynamic flow of each level, under the same frozen correspondences.
pub fn grad_total(
    levels: &[LevelInputs],
    depth2: &DepthMap,
    intrinsics: &CameraIntrinsics,
    pose: &RigidTransform,
    weights: &LossWeights,
    k: usize,
) -> Result<Vec<LevelGradients>> {
    Ok(eval_levels(levels, depth2, intrinsics, pose, weights, k)?.1)
}

#[derive(Debug, Clone)]
pub struct LevelEval {
    pub breakdown: LossBreakdown,
    pub grad_overall: Vec<Vector3<f64>>,
    pub grad_dynamic: Vec<Vector3<f64>>,
}
