//! Coarse-to-fine direct minimization of the combined objective over
//! per-point flow fields.
//!
//! The overall and dynamic fields are optimized jointly; the static field is
//! fixed by the supplied pose. Discrete structure (correspondences,
//! interpolation cells, neighbor sets) is re-frozen once per iteration, and a
//! candidate step is accepted only if the objective re-frozen at the
//! candidate decreases, so the recorded loss trace is monotone by
//! construction.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{
    CameraIntrinsics, DepthMap, FlowField, PointCloud, RigidTransform,
};
use crate::losses::{
    idw_interpolate, LevelContext, LevelEval, LossBreakdown, LossWeights, TargetCache,
    DEFAULT_NEIGHBOR_K,
};
use crate::neighbors::SpatialIndex;

const MAX_HALVINGS: usize = 20;
const RMS_DECAY: f64 = 0.9;
const RMS_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub levels: usize,
    /// Point-count shrink ratio per level toward the coarsest.
    pub level_sample_factor: f64,
    pub iterations_per_level: usize,
    pub initial_step: f64,
    pub grad_tolerance: f64,
    pub weights: LossWeights,
    pub neighbor_k: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            levels: 4,
            level_sample_factor: 4.0,
            iterations_per_level: 200,
            initial_step: 1e-2,
            grad_tolerance: 1e-6,
            weights: LossWeights::default(),
            neighbor_k: DEFAULT_NEIGHBOR_K,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::invalid("optimizer needs at least one level"));
        }
        if !(self.level_sample_factor > 1.0) {
            return Err(Error::invalid("level sample factor must exceed 1"));
        }
        if self.iterations_per_level == 0 {
            return Err(Error::invalid("iterations per level must be positive"));
        }
        if !(self.initial_step > 0.0) || !(self.grad_tolerance > 0.0) {
            return Err(Error::invalid("step and tolerance must be positive"));
        }
        if self.neighbor_k == 0 {
            return Err(Error::invalid("neighbor count must be positive"));
        }
        self.weights.validate()?;
        if self.weights.alpha.len() != self.levels {
            return Err(Error::invalid(format!(
                "{} levels but {} alpha factors",
                self.levels,
                self.weights.alpha.len()
            )));
        }
        Ok(())
    }
}

/// One accepted iterate of the loss trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub level: usize,
    pub iteration: usize,
    pub breakdown: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct FlowEstimate {
    pub overall: FlowField,
    pub dynamic: FlowField,
    pub static_flow: FlowField,
    pub loss_trace: Vec<TraceEntry>,
    /// Point ids of pc1 belonging to each level, coarsest first; subsets are
    /// nested prefixes and the finest level covers every point.
    pub level_assignments: Vec<Vec<usize>>,
}

/// Deterministic farthest-point ordering of the first `m` samples, seeded at
/// point id 0; distance ties resolve to the smallest id.
pub fn farthest_point_ordering(cloud: &PointCloud, m: usize) -> Vec<usize> {
    let n = cloud.len();
    let m = m.min(n);
    let mut order = Vec::with_capacity(m);
    let mut min_sq = vec![f64::INFINITY; n];
    let mut current = 0usize;
    for _ in 0..m {
        order.push(current);
        min_sq[current] = f64::NEG_INFINITY;
        let base = cloud.points[current];
        let mut best = 0usize;
        let mut best_sq = f64::NEG_INFINITY;
        for i in 0..n {
            if min_sq[i] == f64::NEG_INFINITY {
                continue;
            }
            let d = (cloud.points[i] - base).norm_squared();
            if d < min_sq[i] {
                min_sq[i] = d;
            }
            if min_sq[i] > best_sq {
                best_sq = min_sq[i];
                best = i;
            }
        }
        current = best;
    }
    order
}

/// Nested level subsets, coarsest first; the finest is a permutation of all
/// ids (farthest-point prefix, then the remaining ids ascending).
fn build_levels(cloud: &PointCloud, cfg: &OptimizerConfig) -> Result<Vec<Vec<usize>>> {
    let n = cloud.len();
    let min_pts = cfg.neighbor_k + 2;
    if n < min_pts {
        return Err(Error::invalid(format!(
            "need at least {min_pts} points for neighbor_k={}, got {n}",
            cfg.neighbor_k
        )));
    }
    let mut sizes = Vec::with_capacity(cfg.levels);
    for l in 0..cfg.levels {
        let denom = cfg
            .level_sample_factor
            .powi((cfg.levels - 1 - l) as i32);
        let s = ((n as f64 / denom).ceil() as usize).clamp(min_pts, n);
        sizes.push(s);
    }
    // Sampling beyond the second-finest size is unnecessary: the finest level
    // is every point anyway.
    let fps_len = if cfg.levels >= 2 {
        sizes[cfg.levels - 2]
    } else {
        0
    };
    let order = farthest_point_ordering(cloud, fps_len);
    let mut chosen = vec![false; n];
    for &i in &order {
        chosen[i] = true;
    }
    let mut finest = order.clone();
    finest.extend((0..n).filter(|&i| !chosen[i]));

    let mut levels = Vec::with_capacity(cfg.levels);
    for (l, &s) in sizes.iter().enumerate() {
        if l == cfg.levels - 1 {
            levels.push(finest.clone());
        } else {
            levels.push(order[..s].to_vec());
        }
    }
    Ok(levels)
}

/// Per-coordinate adaptive scaling state for the backtracking step.
#[derive(Debug, Clone)]
pub struct StepState {
    pub step_size: f64,
    initial_step: f64,
    ms_overall: Vec<Vector3<f64>>,
    ms_dynamic: Vec<Vector3<f64>>,
}

impl StepState {
    pub fn new(n: usize, initial_step: f64) -> Self {
        StepState {
            step_size: initial_step,
            initial_step,
            ms_overall: vec![Vector3::zeros(); n],
            ms_dynamic: vec![Vector3::zeros(); n],
        }
    }
}

#[derive(Debug, Clone)]
pub enum StepResult {
    Accepted {
        overall: FlowField,
        dynamic: FlowField,
        loss: f64,
        halvings: usize,
    },
    /// No decrease found within the halving budget; the level terminates.
    Exhausted,
}

/// One backtracking update: scale the gradient per coordinate by its running
/// RMS, then halve the step until the re-frozen objective strictly decreases
/// (up to [`MAX_HALVINGS`] times). A zero gradient returns the iterate
/// unchanged.
pub fn step<F>(
    overall: &FlowField,
    dynamic: &FlowField,
    grad_overall: &[Vector3<f64>],
    grad_dynamic: &[Vector3<f64>],
    current_loss: f64,
    state: &mut StepState,
    true_loss: &mut F,
) -> Result<StepResult>
where
    F: FnMut(&FlowField, &FlowField) -> Result<f64>,
{
    let n = overall.len();
    if grad_overall.len() != n || grad_dynamic.len() != n || dynamic.len() != n {
        return Err(Error::invalid("gradient fields not aligned with state"));
    }
    let zero = grad_overall.iter().chain(grad_dynamic).all(|g| {
        g.x == 0.0 && g.y == 0.0 && g.z == 0.0
    });
    if zero {
        return Ok(StepResult::Accepted {
            overall: overall.clone(),
            dynamic: dynamic.clone(),
            loss: current_loss,
            halvings: 0,
        });
    }

    let mut ms_sum = 0.0;
    let mut ms_count = 0usize;
    for i in 0..n {
        for c in 0..3 {
            let go = grad_overall[i][c];
            state.ms_overall[i][c] = RMS_DECAY * state.ms_overall[i][c] + (1.0 - RMS_DECAY) * go * go;
            let gd = grad_dynamic[i][c];
            state.ms_dynamic[i][c] = RMS_DECAY * state.ms_dynamic[i][c] + (1.0 - RMS_DECAY) * gd * gd;
            for ms in [state.ms_overall[i][c], state.ms_dynamic[i][c]] {
                if ms > 0.0 {
                    ms_sum += ms;
                    ms_count += 1;
                }
            }
        }
    }
    // Mean over active coordinates only; frozen coordinates carry zero
    // gradient and would dilute the floor.
    let mean_ms = ms_sum / ms_count.max(1) as f64;
    // Magnitude-aware floor: coordinates whose running RMS is far below the
    // field average scale linearly with their gradient instead of being
    // kicked by full sign-sized steps once they have converged.
    let floor = 1e-2 * mean_ms.sqrt() + RMS_EPS;
    let mut dir_o = vec![Vector3::zeros(); n];
    let mut dir_d = vec![Vector3::zeros(); n];
    for i in 0..n {
        for c in 0..3 {
            dir_o[i][c] = grad_overall[i][c] / (state.ms_overall[i][c].sqrt() + floor);
            dir_d[i][c] = grad_dynamic[i][c] / (state.ms_dynamic[i][c].sqrt() + floor);
        }
    }

    let mut s = state.step_size;
    for halvings in 0..=MAX_HALVINGS {
        let cand_o = FlowField {
            vectors: (0..n).map(|i| overall.vectors[i] - s * dir_o[i]).collect(),
        };
        let cand_d = FlowField {
            vectors: (0..n).map(|i| dynamic.vectors[i] - s * dir_d[i]).collect(),
        };
        let loss = true_loss(&cand_o, &cand_d)?;
        if loss < current_loss {
            state.step_size = (s * 2.0).min(state.initial_step);
            return Ok(StepResult::Accepted {
                overall: cand_o,
                dynamic: cand_d,
                loss,
                halvings,
            });
        }
        s *= 0.5;
    }
    Ok(StepResult::Exhausted)
}

fn inf_norm(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    a.iter()
        .chain(b)
        .flat_map(|v| v.iter().copied())
        .fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Estimate per-point overall and dynamic flow by minimizing the combined
/// objective coarse-to-fine over a farthest-point pyramid of `pc1`.
pub fn estimate_flow(
    pc1: &PointCloud,
    pc2: &PointCloud,
    depth2: &DepthMap,
    intrinsics: &CameraIntrinsics,
    pose: &RigidTransform,
    cfg: &OptimizerConfig,
) -> Result<FlowEstimate> {
    cfg.validate()?;
    pose.validate()?;
    if pc1.is_empty() || pc2.is_empty() {
        return Err(Error::invalid("cannot estimate flow over empty clouds"));
    }
    let k = cfg.neighbor_k;
    let n = pc1.len();
    let assignments = build_levels(pc1, cfg)?;
    if pc2.len() <= k {
        return Err(Error::invalid(format!(
            "target cloud needs more than neighbor_k={k} points"
        )));
    }
    let cache = TargetCache::build(pc2, k)?;

    // Full-resolution state; points outside the current level keep their
    // initialization until propagation reaches them.
    let full_static: Vec<Vector3<f64>> =
        pc1.points.iter().map(|p| pose.apply(p) - p).collect();
    let mut full_overall = full_static.clone();
    let mut full_dynamic = vec![Vector3::zeros(); n];

    let mut trace = Vec::new();

    // Every level freezes and scores the full-resolution objective; a level
    // only restricts which coordinates may move. Evaluating subsampled
    // objectives instead would let coarse levels drift along surfaces toward
    // spurious minima of the sparse Chamfer term, and once drift exceeds the
    // finer level's point spacing the frozen correspondences lock onto wrong
    // points and never recover.
    let eval_ctx = |fo: &FlowField, fd: &FlowField, alpha: f64| -> Result<LevelEval> {
        let ctx = LevelContext::freeze(
            &pc1.points,
            pc2,
            pc2,
            &cache.index,
            &full_static,
            fo,
            fd,
            depth2,
            intrinsics,
            &cache,
            k,
        )?;
        ctx.eval(fo, fd, alpha, &cfg.weights)
    };

    for (lvl, ids) in assignments.iter().enumerate() {
        // Inter-level guard: interpolation onto newly joining points can
        // degrade a solution; keep the propagated fields only while they
        // beat the pose initializer on the objective.
        let propagated_is_init = full_overall == full_static
            && full_dynamic.iter().all(|v| v.norm() == 0.0);
        if lvl > 0 && !propagated_is_init {
            let cand_o = FlowField {
                vectors: full_overall.clone(),
            };
            let cand_d = FlowField {
                vectors: full_dynamic.clone(),
            };
            let base_o = FlowField {
                vectors: full_static.clone(),
            };
            let base_d = FlowField::zeros(n);
            let base_total = eval_ctx(&base_o, &base_d, 1.0)?.breakdown.total;
            let cand_total = eval_ctx(&cand_o, &cand_d, 1.0)?.breakdown.total;
            if base_total < cand_total {
                full_overall = full_static.clone();
                full_dynamic = vec![Vector3::zeros(); n];
            }
        }

        let alpha = cfg.weights.alpha[lvl];
        let mut in_level = vec![false; n];
        for &i in ids {
            in_level[i] = true;
        }
        let mask = |g: &mut Vec<Vector3<f64>>| {
            for (i, v) in g.iter_mut().enumerate() {
                if !in_level[i] {
                    *v = Vector3::zeros();
                }
            }
        };

        let mut o = FlowField {
            vectors: full_overall.clone(),
        };
        let mut d = FlowField {
            vectors: full_dynamic.clone(),
        };
        let mut ev = eval_ctx(&o, &d, alpha)?;
        mask(&mut ev.grad_overall);
        mask(&mut ev.grad_dynamic);
        trace.push(TraceEntry {
            level: lvl,
            iteration: 0,
            breakdown: ev.breakdown.clone(),
        });
        let mut state = StepState::new(n, cfg.initial_step);

        for it in 1..=cfg.iterations_per_level {
            if inf_norm(&ev.grad_overall, &ev.grad_dynamic) < cfg.grad_tolerance {
                break;
            }
            // The last closure call inside `step` is the accepted candidate,
            // so its full evaluation can be reused for the next iteration.
            let mut last_eval: Option<LevelEval> = None;
            let result = step(
                &o,
                &d,
                &ev.grad_overall,
                &ev.grad_dynamic,
                ev.breakdown.total,
                &mut state,
                &mut |co, cd| {
                    let e = eval_ctx(co, cd, alpha)?;
                    let t = e.breakdown.total;
                    last_eval = Some(e);
                    Ok(t)
                },
            )?;
            match result {
                StepResult::Accepted {
                    overall, dynamic, ..
                } => {
                    o = overall;
                    d = dynamic;
                    match last_eval {
                        Some(mut e) => {
                            mask(&mut e.grad_overall);
                            mask(&mut e.grad_dynamic);
                            ev = e;
                        }
                        None => break,
                    }
                    trace.push(TraceEntry {
                        level: lvl,
                        iteration: it,
                        breakdown: ev.breakdown.clone(),
                    });
                }
                StepResult::Exhausted => break,
            }
        }

        full_overall = o.vectors;
        full_dynamic = d.vectors;

        // Propagate to the points joining the next level: the dynamic field
        // and the non-rigid part of the overall field are interpolated; the
        // static part is exact everywhere.
        if lvl + 1 < assignments.len() {
            let next = &assignments[lvl + 1];
            if next.len() > ids.len() {
                let sub = pc1.select(ids);
                let index = SpatialIndex::build(&sub)?;
                let residual: Vec<Vector3<f64>> = ids
                    .iter()
                    .map(|&i| full_overall[i] - full_static[i])
                    .collect();
                let dynamic_sub: Vec<Vector3<f64>> =
                    ids.iter().map(|&i| full_dynamic[i]).collect();
                let kk = k.min(ids.len());
                for &i in &next[ids.len()..] {
                    let q = pc1.points[i];
                    let r = idw_interpolate(&q, &sub, &residual, &index, kk)?;
                    let dy = idw_interpolate(&q, &sub, &dynamic_sub, &index, kk)?;
                    full_overall[i] = full_static[i] + r;
                    full_dynamic[i] = dy;
                }
            }
        }
    }

    for v in full_overall.iter().chain(&full_dynamic) {
        if !(v.x.is_finite() && v.y.is_finite() && v.z.is_finite()) {
            return Err(Error::invalid("estimated flow contains non-finite values"));
        }
    }

    Ok(FlowEstimate {
        overall: FlowField {
            vectors: full_overall,
        },
        dynamic: FlowField {
            vectors: full_dynamic,
        },
        static_flow: FlowField {
            vectors: full_static,
        },
        loss_trace: trace,
        level_assignments: assignments,
    })
}
