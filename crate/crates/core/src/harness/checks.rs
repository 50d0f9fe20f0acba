use super::experiments::{ConvergenceRun, CurveRun, OnlineRun};
use super::metrics::MetricReport;

/// Outcome of one pass/fail comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: String) -> Self {
        Check {
            name: name.into(),
            passed,
            detail,
        }
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

fn db(v: f64) -> String {
    format!("{v:.3} dB")
}

/// Learned filter within `tol_db` of the baseline at every grid point.
pub fn check_gap(run: &CurveRun, baseline: &str, t: usize, tol_db: f64) -> Vec<Check> {
    run.points
        .iter()
        .map(|p| {
            let name = format!("gap at 1/r2 = {} dB", p.inv_r2_db);
            let k = run.report.find(p.inv_r2_db, "kalmannet", t);
            let b = run.report.find(p.inv_r2_db, baseline, t);
            match (k, b) {
                (Some(k), Some(b)) if k.mse_db.is_finite() && b.mse_db.is_finite() => {
                    let gap = k.mse_db - b.mse_db;
                    Check::new(
                        name,
                        gap <= tol_db,
                        format!("learned {} vs {baseline} {} (gap {:+.3}, limit {tol_db})", db(k.mse_db), db(b.mse_db), gap),
                    )
                }
                _ => Check::new(name, false, p.error.clone().unwrap_or_else(|| "missing rows".into())),
            }
        })
        .collect()
}

/// Learned filter's MSE at `long` within `tol_db` of its MSE at `short`.
pub fn check_length(report: &MetricReport, grid: &[f64], short: usize, long: usize, tol_db: f64) -> Vec<Check> {
    grid.iter()
        .map(|&inv| {
            let name = format!("T={long} vs T={short} at 1/r2 = {inv} dB");
            match (report.find(inv, "kalmannet", short), report.find(inv, "kalmannet", long)) {
                (Some(s), Some(l)) if s.mse_db.is_finite() && l.mse_db.is_finite() => {
                    let d = l.mse_db - s.mse_db;
                    Check::new(name, d.abs() <= tol_db, format!("{} vs {} (diff {:+.3}, limit {tol_db})", db(l.mse_db), db(s.mse_db), d))
                }
                _ => Check::new(name, false, "missing rows".into()),
            }
        })
        .collect()
}

/// Supervised reaches `baseline + margin` strictly earlier, and both curves
/// end within `tol_db` of the baseline.
pub fn check_convergence(run: &ConvergenceRun, margin_db: f64, tol_db: f64) -> Vec<Check> {
    let s = ConvergenceRun::crossing(&run.supervised, run.baseline_db, margin_db);
    let u = ConvergenceRun::crossing(&run.unsupervised, run.baseline_db, margin_db);
    let order = Check::new(
        "supervised crosses first",
        matches!((s, u), (Some(s), Some(u)) if s < u) || (s.is_some() && u.is_none()),
        format!("crossing epochs supervised {s:?}, unsupervised {u:?} (threshold baseline + {margin_db} dB)"),
    );
    let end = |label: &str, curve| {
        let last = ConvergenceRun::last_db(curve);
        let gap = last.map(|l| l - run.baseline_db);
        Check::new(
            format!("{label} ends near the baseline"),
            gap.is_some_and(|g| g <= tol_db),
            format!("final {last:?} dB vs baseline {} (limit {tol_db})", db(run.baseline_db)),
        )
    };
    vec![order, end("supervised", &run.supervised), end("unsupervised", &run.unsupervised)]
}

/// Learned filter within `tol_db` of the EKF and below `floor_db`.
pub fn check_lorenz(run: &CurveRun, t: usize, tol_db: f64, floor_db: f64) -> Vec<Check> {
    let mut checks = check_gap(run, "ekf", t, tol_db);
    for p in &run.points {
        for est in ["kalmannet", "ekf"] {
            let row = run.report.find(p.inv_r2_db, est, t);
            checks.push(Check::new(
                format!("{est} below {floor_db} dB"),
                row.is_some_and(|r| r.mse_db < floor_db),
                format!("{:?}", row.map(|r| r.mse_db)),
            ));
        }
        checks.push(Check::new(
            "timings recorded",
            run.report.rows.iter().all(|r| r.runtime_s > 0.0),
            run.report
                .rows
                .iter()
                .map(|r| format!("{} {:.2e} s/trajectory", r.estimator, r.runtime_s))
                .collect::<Vec<_>>()
                .join(", "),
        ));
    }
    checks
}

/// Adapted beats frozen, stays within `tol_db` of the exact filter, and the
/// control stream degrades by at most `control_db`.
pub fn check_online(run: &OnlineRun, tol_db: f64, control_db: f64) -> Vec<Check> {
    let (a, f, r) = (run.adapted_db(), run.frozen_db(), run.reference_db());
    let c = run.control_degradation_db();
    vec![
        Check::new(
            "adapted below frozen",
            matches!((a, f), (Some(a), Some(f)) if a < f),
            format!("final quarter adapted {a:?} dB, frozen {f:?} dB"),
        ),
        Check::new(
            "adapted near exact filter",
            matches!((a, r), (Some(a), Some(r)) if a - r <= tol_db),
            format!("adapted {a:?} dB vs exact {r:?} dB (limit {tol_db})"),
        ),
        Check::new(
            "matched stream does not degrade",
            c.is_some_and(|c| c <= control_db),
            format!("adapted minus frozen on the control stream {c:?} dB (limit {control_db})"),
        ),
    ]
}
