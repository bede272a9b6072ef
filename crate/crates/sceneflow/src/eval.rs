//! Scene-flow evaluation metrics: EPE3D, Acc3D Strict, Acc3D Relax,
//! Outliers3D.

use crate::error::{Error, Result};
use crate::geometry::FlowField;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub epe3d: f64,
    pub acc3d_strict: f64,
    pub acc3d_relax: f64,
    pub outliers3d: f64,
    pub point_count: usize,
}

/// Compare predicted flow against ground truth.
///
/// Per point: e = |pred - gt|, r = e / |gt| (0 when both e and |gt| are zero,
/// +inf when only |gt| is zero). EPE3D is the mean of e. Accuracies count
/// points strictly below their thresholds (e < 0.05 or r < 5% strict,
/// e < 0.1 or r < 10% relax); outliers count points strictly above theirs
/// (e > 0.3 or r > 10%).
pub fn evaluate(pred: &FlowField, gt: &FlowField) -> Result<MetricReport> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(format!(
            "flow length mismatch: pred {} vs gt {}",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::invalid("cannot evaluate empty flow fields"));
    }
    let finite = |f: &FlowField| f.vectors.iter().all(|v| v.iter().all(|c| c.is_finite()));
    if !finite(pred) || !finite(gt) {
        return Err(Error::invalid("non-finite flow vector in evaluation input"));
    }

    let n = pred.len();
    let mut epe_sum = 0.0;
    let mut strict = 0usize;
    let mut relax = 0usize;
    let mut outliers = 0usize;
    for i in 0..n {
        let e = (pred.vectors[i] - gt.vectors[i]).norm();
        let gt_norm = gt.vectors[i].norm();
        let r = if gt_norm > 0.0 {
            e / gt_norm
        } else if e == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        epe_sum += e;
        if e < 0.05 || r < 0.05 {
            strict += 1;
        }
        if e < 0.1 || r < 0.1 {
            relax += 1;
        }
        if e > 0.3 || r > 0.1 {
            outliers += 1;
        }
    }
    let frac = |c: usize| c as f64 / n as f64;
    Ok(MetricReport {
        epe3d: epe_sum / n as f64,
        acc3d_strict: frac(strict),
        acc3d_relax: frac(relax),
        outliers3d: frac(outliers),
        point_count: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn field(vs: Vec<Vector3<f64>>) -> FlowField {
        FlowField { vectors: vs }
    }

    #[test]
    fn perfect_prediction() {
        let gt = field(vec![Vector3::new(1.0, 2.0, 3.0), Vector3::new(0.0, 0.0, 0.0)]);
        let r = evaluate(&gt.clone(), &gt).unwrap();
        assert_eq!(r.epe3d, 0.0);
        assert_eq!(r.acc3d_strict, 1.0);
        assert_eq!(r.acc3d_relax, 1.0);
        assert_eq!(r.outliers3d, 0.0);
        assert_eq!(r.point_count, 2);
    }

    #[test]
    fn twenty_percent_relative_error_is_outlier_but_not_accurate() {
        // gt norm 1 m, error 0.2 m: relative 20%. Fails strict and relax,
        // counts as an outlier via the relative branch despite e < 0.3.
        let gt = field(vec![Vector3::new(1.0, 0.0, 0.0)]);
        let pred = field(vec![Vector3::new(1.2, 0.0, 0.0)]);
        let r = evaluate(&pred, &gt).unwrap();
        assert_relative_eq!(r.epe3d, 0.2);
        assert_eq!(r.acc3d_strict, 0.0);
        assert_eq!(r.acc3d_relax, 0.0);
        assert_eq!(r.outliers3d, 1.0);
    }

    #[test]
    fn zero_ground_truth_guard() {
        // Static point predicted static: accurate, not an outlier.
        let gt = field(vec![Vector3::zeros()]);
        let pred = field(vec![Vector3::zeros()]);
        let r = evaluate(&pred, &gt).unwrap();
        assert_eq!(r.acc3d_strict, 1.0);
        assert_eq!(r.outliers3d, 0.0);

        // Static point with small absolute error: relative is +inf, so the
        // accuracy must come from the absolute branch only.
        let pred = field(vec![Vector3::new(0.04, 0.0, 0.0)]);
        let r = evaluate(&pred, &gt).unwrap();
        assert_eq!(r.acc3d_strict, 1.0);
        assert_eq!(r.outliers3d, 1.0); // r = inf > 10%
    }

    #[test]
    fn outlier_boundary_is_strict() {
        // e exactly 0.3 (bit-exact: 0 - 0.3 and sqrt(0.3^2) round-trip),
        // relative 7.5%: "more than 0.3" is strict, so not an outlier, while
        // the relative branch still grants relax accuracy.
        let gt = field(vec![Vector3::new(0.0, 4.0, 0.0)]);
        let pred = field(vec![Vector3::new(0.3, 4.0, 0.0)]);
        let r = evaluate(&pred, &gt).unwrap();
        assert_eq!(r.epe3d, 0.3);
        assert_eq!(r.acc3d_strict, 0.0);
        assert_eq!(r.acc3d_relax, 1.0);
        assert_eq!(r.outliers3d, 0.0);
    }

    #[test]
    fn strict_is_never_above_relax() {
        let mut rng = StdRng::seed_from_u64(42);
        for _ in 0..20 {
            let n = rng.gen_range(1..50);
            let gt = field(
                (0..n)
                    .map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen(), rng.gen()))
                    .collect(),
            );
            let pred = field(
                gt.vectors
                    .iter()
                    .map(|v| v + Vector3::new(rng.gen_range(-0.4..0.4), 0.0, 0.0))
                    .collect(),
            );
            let r = evaluate(&pred, &gt).unwrap();
            assert!(r.acc3d_strict <= r.acc3d_relax);
        }
    }

    #[test]
    fn matches_scalar_recomputation() {
        let mut rng = StdRng::seed_from_u64(9);
        let n = 100;
        let gt = field(
            (0..n)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    )
                })
                .collect(),
        );
        let pred = field(
            gt.vectors
                .iter()
                .map(|v| {
                    v + Vector3::new(
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                    )
                })
                .collect(),
        );
        let r = evaluate(&pred, &gt).unwrap();

        // Independent scalar-by-scalar recomputation.
        let mut errs = Vec::new();
        for i in 0..n {
            let dx = pred.vectors[i].x - gt.vectors[i].x;
            let dy = pred.vectors[i].y - gt.vectors[i].y;
            let dz = pred.vectors[i].z - gt.vectors[i].z;
            errs.push((dx * dx + dy * dy + dz * dz).sqrt());
        }
        let epe: f64 = errs.iter().sum::<f64>() / n as f64;
        assert_relative_eq!(r.epe3d, epe, max_relative = 1e-12);
        let gn: Vec<f64> = gt.vectors.iter().map(|v| v.norm()).collect();
        let strict = errs
            .iter()
            .zip(&gn)
            .filter(|&(&e, &g)| e < 0.05 || (g > 0.0 && e / g < 0.05) || (g == 0.0 && e == 0.0))
            .count();
        assert_relative_eq!(r.acc3d_strict, strict as f64 / n as f64);
    }

    #[test]
    fn length_mismatch_and_non_finite_rejected() {
        let a = field(vec![Vector3::zeros()]);
        let b = field(vec![Vector3::zeros(), Vector3::zeros()]);
        assert!(evaluate(&a, &b).is_err());
        let bad = field(vec![Vector3::new(f64::NAN, 0.0, 0.0)]);
        assert!(evaluate(&bad, &a).is_err());
    }
}
