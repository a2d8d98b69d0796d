//! Evaluation harness: metrics, synthetic oracles, corruption protocols,
//! and the report container.

pub mod corrupt;
pub mod metrics;
pub mod shapes;

pub use corrupt::{corrupt, corrupt_with, CorruptionProtocol, GradientParams, StripeParams};
pub use metrics::{
    angle_degrees, chamfer, closest_point_on_triangle, normal_rmse, pgp_curve, point_to_mesh,
    MeshDistance, MetricError,
};
pub use shapes::{CubeField, ShapeKind, SphereField, SyntheticShape, TorusField};

use crate::geom::Vec3;
use serde::Serialize;
use std::collections::BTreeMap;

/// Default PGP thresholds, degrees.
pub const DEFAULT_PGP_THRESHOLDS: &[f64] =
    &[5.0, 10.0, 20.0, 30.0, 45.0, 60.0, 70.0, 80.0, 90.0, 120.0, 180.0];

#[derive(Debug, Clone, Serialize)]
pub struct PgpPoint {
    pub threshold_degrees: f64,
    pub fraction: f64,
}

/// Normal-error metrics for one shape. Oriented values are reported both
/// as-is and globally flipped; `best_global_sign` records which sign
/// minimizes the oriented RMSE (the field's learned sign is per shape).
#[derive(Debug, Clone, Serialize)]
pub struct NormalMetrics {
    pub rmse_oriented: f64,
    pub rmse_oriented_flipped: f64,
    pub best_global_sign: String,
    pub rmse_unoriented: f64,
    pub pgp_oriented: Vec<PgpPoint>,
    pub pgp_oriented_best_sign: Vec<PgpPoint>,
    pub pgp_unoriented: Vec<PgpPoint>,
    pub count: usize,
    pub oriented_angle_sq_sum: f64,
    pub unoriented_angle_sq_sum: f64,
}

/// Computes the normal metrics block for one shape.
pub fn evaluate_normals(
    est: &[Vec3],
    gt: &[Vec3],
    thresholds: &[f64],
) -> Result<NormalMetrics, MetricError> {
    let flipped: Vec<Vec3> = est.iter().map(|n| -n).collect();
    let rmse_oriented = normal_rmse(est, gt, true)?;
    let rmse_oriented_flipped = normal_rmse(&flipped, gt, true)?;
    let rmse_unoriented = normal_rmse(est, gt, false)?;
    let curve = |fractions: Vec<f64>| -> Vec<PgpPoint> {
        thresholds
            .iter()
            .zip(fractions)
            .map(|(t, f)| PgpPoint { threshold_degrees: *t, fraction: f })
            .collect()
    };
    let pgp_oriented = curve(pgp_curve(est, gt, thresholds, true)?);
    let best_est: &[Vec3] =
        if rmse_oriented_flipped < rmse_oriented { &flipped } else { est };
    let pgp_oriented_best_sign = curve(pgp_curve(best_est, gt, thresholds, true)?);
    let pgp_unoriented = curve(pgp_curve(est, gt, thresholds, false)?);

    let n = est.len();
    Ok(NormalMetrics {
        oriented_angle_sq_sum: rmse_oriented * rmse_oriented * n as f64,
        unoriented_angle_sq_sum: rmse_unoriented * rmse_unoriented * n as f64,
        best_global_sign: if rmse_oriented_flipped < rmse_oriented {
            "flipped".into()
        } else {
            "as-is".into()
        },
        rmse_oriented,
        rmse_oriented_flipped,
        rmse_unoriented,
        pgp_oriented,
        pgp_oriented_best_sign,
        pgp_unoriented,
        count: n,
    })
}

/// Metrics for one shape / category.
#[derive(Debug, Clone, Serialize, Default)]
pub struct CategoryReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normals: Option<NormalMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chamfer_l1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chamfer_l2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub point_to_mesh: Option<f64>,
    /// Set when the ground truth came from an analytic shape rather than a
    /// user-supplied file.
    pub analytic_oracle: bool,
}

/// Cross-category RMSE aggregates. Published numbers are per-shape means;
/// the pooled variant (all points weighted equally) is emitted alongside
/// since sources are ambiguous about the convention.
#[derive(Debug, Clone, Serialize, Default)]
pub struct ReportSummary {
    pub rmse_oriented_mean_of_shapes: Option<f64>,
    pub rmse_oriented_pooled: Option<f64>,
    pub rmse_unoriented_mean_of_shapes: Option<f64>,
    pub rmse_unoriented_pooled: Option<f64>,
}

/// The full evaluation report, one category per input shape.
#[derive(Debug, Clone, Serialize, Default)]
pub struct EvalReport {
    pub categories: BTreeMap<String, CategoryReport>,
    pub summary: ReportSummary,
}

impl EvalReport {
    pub fn insert(&mut self, name: impl Into<String>, report: CategoryReport) {
        self.categories.insert(name.into(), report);
        self.recompute_summary();
    }

    fn recompute_summary(&mut self) {
        let with_normals: Vec<&NormalMetrics> =
            self.categories.values().filter_map(|c| c.normals.as_ref()).collect();
        if with_normals.is_empty() {
            self.summary = ReportSummary::default();
            return;
        }
        let k = with_normals.len() as f64;
        let total_n: usize = with_normals.iter().map(|m| m.count).sum();
        self.summary = ReportSummary {
            rmse_oriented_mean_of_shapes: Some(
                with_normals.iter().map(|m| m.rmse_oriented).sum::<f64>() / k,
            ),
            rmse_oriented_pooled: Some(
                (with_normals.iter().map(|m| m.oriented_angle_sq_sum).sum::<f64>()
                    / total_n as f64)
                    .sqrt(),
            ),
            rmse_unoriented_mean_of_shapes: Some(
                with_normals.iter().map(|m| m.rmse_unoriented).sum::<f64>() / k,
            ),
            rmse_unoriented_pooled: Some(
                (with_normals.iter().map(|m| m.unoriented_angle_sq_sum).sum::<f64>()
                    / total_n as f64)
                    .sqrt(),
            ),
        };
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }

    /// Aligned-column text table. Chamfer-L2 is shown ×10⁴ as in the usual
    /// benchmark formatting.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let headers =
            ["category", "rmse_uo", "rmse_o", "sign", "pgp90_o", "cd_l1", "cd_l2(x1e4)", "p2m"];
        let mut rows: Vec<Vec<String>> = vec![headers.iter().map(|s| s.to_string()).collect()];
        for (name, c) in &self.categories {
            let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
            let pgp90 = c.normals.as_ref().and_then(|m| {
                m.pgp_oriented_best_sign
                    .iter()
                    .find(|p| (p.threshold_degrees - 90.0).abs() < 1e-9)
                    .map(|p| p.fraction)
            });
            rows.push(vec![
                name.clone(),
                fmt(c.normals.as_ref().map(|m| m.rmse_unoriented)),
                fmt(c.normals.as_ref().map(|m| m.rmse_oriented)),
                c.normals.as_ref().map(|m| m.best_global_sign.clone()).unwrap_or_else(|| "-".into()),
                fmt(pgp90),
                fmt(c.chamfer_l1),
                fmt(c.chamfer_l2.map(|v| v * 1e4)),
                fmt(c.point_to_mesh),
            ]);
        }
        let widths: Vec<usize> = (0..headers.len())
            .map(|i| rows.iter().map(|r| r[i].len()).max().unwrap_or(0))
            .collect();
        for row in &rows {
            for (i, cell) in row.iter().enumerate() {
                out.push_str(&format!("{:<width$}  ", cell, width = widths[i]));
            }
            out.push('\n');
        }
        if let Some(m) = self.summary.rmse_unoriented_mean_of_shapes {
            out.push_str(&format!(
                "mean-of-shapes rmse: unoriented {m:.4}, oriented {:.4}; pooled: unoriented {:.4}, oriented {:.4}\n",
                self.summary.rmse_oriented_mean_of_shapes.unwrap_or(f64::NAN),
                self.summary.rmse_unoriented_pooled.unwrap_or(f64::NAN),
                self.summary.rmse_oriented_pooled.unwrap_or(f64::NAN),
            ));
        }
        out
    }

    /// PGP curves as CSV (category, mode, threshold, fraction).
    pub fn pgp_csv(&self) -> String {
        let mut out = String::from("category,mode,threshold_degrees,fraction\n");
        for (name, c) in &self.categories {
            if let Some(m) = &c.normals {
                for (mode, curve) in [
                    ("oriented", &m.pgp_oriented),
                    ("oriented_best_sign", &m.pgp_oriented_best_sign),
                    ("unoriented", &m.pgp_unoriented),
                ] {
                    for p in curve {
                        out.push_str(&format!(
                            "{name},{mode},{},{}\n",
                            p.threshold_degrees, p.fraction
                        ));
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{standard_normal, stream};

    #[test]
    fn report_summary_and_rendering() {
        let mut r = stream(1, "report", 0);
        let gt: Vec<Vec3> = (0..100)
            .map(|_| {
                let g = Vec3::new(
                    standard_normal(&mut r),
                    standard_normal(&mut r),
                    standard_normal(&mut r),
                );
                g / g.norm()
            })
            .collect();
        let metrics = evaluate_normals(&gt, &gt, DEFAULT_PGP_THRESHOLDS).unwrap();
        assert_eq!(metrics.rmse_oriented, 0.0);
        assert_eq!(metrics.best_global_sign, "as-is");

        let mut report = EvalReport::default();
        report.insert(
            "sphere",
            CategoryReport { normals: Some(metrics), analytic_oracle: true, ..Default::default() },
        );
        assert_eq!(report.summary.rmse_unoriented_mean_of_shapes, Some(0.0));
        let json = report.to_json();
        assert!(json.contains("\"sphere\""));
        let table = report.to_table();
        assert!(table.contains("sphere"));
        let csv = report.pgp_csv();
        assert_eq!(csv.lines().count(), 1 + 3 * DEFAULT_PGP_THRESHOLDS.len());
    }

    #[test]
    fn flipped_estimates_report_flipped_sign() {
        let mut r = stream(2, "report2", 0);
        let gt: Vec<Vec3> = (0..50)
            .map(|_| {
                let g = Vec3::new(
                    standard_normal(&mut r),
                    standard_normal(&mut r),
                    standard_normal(&mut r),
                );
                g / g.norm()
            })
            .collect();
        let est: Vec<Vec3> = gt.iter().map(|n| -n).collect();
        let m = evaluate_normals(&est, &gt, &[90.0]).unwrap();
        assert_eq!(m.best_global_sign, "flipped");
        assert_eq!(m.rmse_oriented_flipped, 0.0);
        assert_eq!(m.rmse_unoriented, 0.0);
        assert_eq!(m.pgp_oriented_best_sign[0].fraction, 1.0);
    }
}
