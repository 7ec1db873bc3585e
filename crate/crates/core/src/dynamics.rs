//! Training-curve diagnostics computed from epoch logs: overall and
//! percentage change, windowed least-squares slopes, the overfitting gap,
//! and the eight-row summary report with its implied-initial audit column.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::log::EpochLog;

/// Overfitting gap evaluated at one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapAt {
    pub epoch: usize,
    pub gap: f64,
}

/// One summary row for a single metric series: endpoint statistics,
/// windowed slopes, and the overfitting gap of its train/val pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsReport {
    pub metric_name: String,
    pub final_value: f64,
    pub overall_change: f64,
    /// Percent units, relative to the series' initial value.
    pub percent_change: f64,
    pub slope_early: f64,
    pub slope_late: f64,
    pub overfitting_at: GapAt,
}

/// Sign convention selector for the overfitting gap: positive means
/// overfitting for both kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GapKind {
    Loss,
    Accuracy,
}

/// Inclusive epoch windows for the slope columns plus the epoch at which
/// the overfitting gap is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReportWindows {
    pub early: (usize, usize),
    pub late: (usize, usize),
    pub gap_epoch: usize,
}

impl Default for ReportWindows {
    fn default() -> Self {
        Self {
            early: (0, 29),
            late: (30, 70),
            gap_epoch: 70,
        }
    }
}

impl ReportWindows {
    /// Windows aligned with a stage-2 schedule: the early window spans the
    /// frozen epochs, the late window the partially unfrozen remainder,
    /// and the gap is read at the last epoch. The defaults correspond to
    /// `for_stage2(30, 71)`.
    pub fn for_stage2(epochs_frozen: usize, epochs_total: usize) -> Self {
        Self {
            early: (0, epochs_frozen.saturating_sub(1)),
            late: (epochs_frozen.min(epochs_total - 1), epochs_total - 1),
            gap_epoch: epochs_total - 1,
        }
    }

    /// Highest epoch any column consumes.
    pub fn max_epoch(&self) -> usize {
        self.early.1.max(self.late.1).max(self.gap_epoch)
    }
}

/// Endpoint change of a series: (last − first, 100·(last − first)/first).
pub fn overall_change(series: &[(usize, f64)]) -> Result<(f64, f64)> {
    let first = series
        .first()
        .ok_or_else(|| Error::EpochCoverage("series is empty".into()))?
        .1;
    let last = series.last().unwrap().1;
    if first == 0.0 {
        return Err(Error::ZeroInitial);
    }
    let change = last - first;
    Ok((change, 100.0 * change / first))
}

/// Ordinary least-squares slope of value against epoch over the rows
/// whose epoch falls in the inclusive window.
pub fn window_slope(series: &[(usize, f64)], window: (usize, usize)) -> Result<f64> {
    let (lo, hi) = window;
    let points: Vec<(f64, f64)> = series
        .iter()
        .filter(|(e, _)| (lo..=hi).contains(e))
        .map(|&(e, v)| (e as f64, v))
        .collect();
    if points.len() < 2 {
        return Err(Error::EpochCoverage(format!(
            "window {lo}-{hi} holds {} points; a slope needs at least 2",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let mean_e = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_v = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (e, v) in &points {
        cov += (e - mean_e) * (v - mean_v);
        var += (e - mean_e) * (e - mean_e);
    }
    Ok(cov / var)
}

/// Gap between train and val at one epoch, signed so that positive means
/// overfitting: val − train for losses, train − val for accuracies.
pub fn overfitting_gap(
    train: &[(usize, f64)],
    val: &[(usize, f64)],
    epoch: usize,
    kind: GapKind,
) -> Result<f64> {
    let at = |series: &[(usize, f64)], name: &str| -> Result<f64> {
        series
            .iter()
            .find(|(e, _)| *e == epoch)
            .map(|&(_, v)| v)
            .ok_or_else(|| Error::EpochCoverage(format!("{name} series has no epoch {epoch}")))
    };
    let t = at(train, "train")?;
    let v = at(val, "val")?;
    Ok(match kind {
        GapKind::Loss => v - t,
        GapKind::Accuracy => t - v,
    })
}

fn report_for(
    name: &str,
    series: &[(usize, f64)],
    train: &[(usize, f64)],
    val: &[(usize, f64)],
    kind: GapKind,
    windows: &ReportWindows,
) -> Result<DynamicsReport> {
    let (change, percent) = overall_change(series)?;
    Ok(DynamicsReport {
        metric_name: name.to_string(),
        final_value: series.last().unwrap().1,
        overall_change: change,
        percent_change: percent,
        slope_early: window_slope(series, windows.early)?,
        slope_late: window_slope(series, windows.late)?,
        overfitting_at: GapAt {
            epoch: windows.gap_epoch,
            gap: overfitting_gap(train, val, windows.gap_epoch, kind)?,
        },
    })
}

fn arm_reports(log: &EpochLog, arm: &str, windows: &ReportWindows) -> Result<Vec<DynamicsReport>> {
    let needed = windows.max_epoch();
    if log.len() <= needed {
        return Err(Error::EpochCoverage(format!(
            "log covers epochs 0-{}, report needs 0-{needed}",
            log.len().saturating_sub(1)
        )));
    }
    let tl = log.train_loss_series();
    let vl = log.val_loss_series();
    let ta = log.train_acc_series();
    let va = log.val_acc_series();
    Ok(vec![
        report_for(
            &format!("Train Loss {arm}"),
            &tl,
            &tl,
            &vl,
            GapKind::Loss,
            windows,
        )?,
        report_for(
            &format!("Val Loss {arm}"),
            &vl,
            &tl,
            &vl,
            GapKind::Loss,
            windows,
        )?,
        report_for(
            &format!("Train Acc {arm}"),
            &ta,
            &ta,
            &va,
            GapKind::Accuracy,
            windows,
        )?,
        report_for(
            &format!("Val Acc {arm}"),
            &va,
            &ta,
            &va,
            GapKind::Accuracy,
            windows,
        )?,
    ])
}

/// Eight-row summary over the two arms with the default windows: the four
/// metrics of arm A, then the four of arm B.
pub fn table_report(log_a: &EpochLog, log_b: &EpochLog) -> Result<Vec<DynamicsReport>> {
    table_report_with(log_a, log_b, &ReportWindows::default())
}

/// `table_report` with caller-chosen slope windows and gap epoch.
pub fn table_report_with(
    log_a: &EpochLog,
    log_b: &EpochLog,
    windows: &ReportWindows,
) -> Result<Vec<DynamicsReport>> {
    let mut rows = arm_reports(log_a, "A", windows)?;
    rows.extend(arm_reports(log_b, "B", windows)?);
    Ok(rows)
}

/// Initial value implied by the change and percent columns alone,
/// `change / (percent/100)`; `None` when the percent is zero. Comparing
/// this against `final − change` audits a report's internal consistency.
pub fn implied_initial(report: &DynamicsReport) -> Option<f64> {
    if report.percent_change == 0.0 {
        None
    } else {
        Some(report.overall_change / (report.percent_change / 100.0))
    }
}

fn implied_cell(report: &DynamicsReport) -> String {
    match implied_initial(report) {
        Some(v) => format!("{v:.4}"),
        None => "-".to_string(),
    }
}

/// Delimited rendering: one header row, one row per report, full float
/// precision plus the implied-initial audit column.
pub fn render_csv(reports: &[DynamicsReport], windows: &ReportWindows) -> String {
    let mut out = format!(
        "metric,final_value,overall_change,percent_change,slope_{}_{},slope_{}_{},gap_epoch,gap,implied_initial\n",
        windows.early.0, windows.early.1, windows.late.0, windows.late.1
    );
    for r in reports {
        let implied = match implied_initial(r) {
            Some(v) => v.to_string(),
            None => String::new(),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.metric_name,
            r.final_value,
            r.overall_change,
            r.percent_change,
            r.slope_early,
            r.slope_late,
            r.overfitting_at.epoch,
            r.overfitting_at.gap,
            implied
        ));
    }
    out
}

/// Aligned plain-text table: values to 4 decimals, percents to 2, with
/// the implied-initial audit column last.
pub fn render_table(reports: &[DynamicsReport], windows: &ReportWindows) -> String {
    let headers = [
        "Metric".to_string(),
        "Final Value".to_string(),
        "Overall Change".to_string(),
        "% Change".to_string(),
        format!("Slope ({}-{})", windows.early.0, windows.early.1),
        format!("Slope ({}-{})", windows.late.0, windows.late.1),
        format!("Overfitting at {}", windows.gap_epoch),
        "Implied Initial".to_string(),
    ];
    let rows: Vec<[String; 8]> = reports
        .iter()
        .map(|r| {
            [
                r.metric_name.clone(),
                format!("{:.4}", r.final_value),
                format!("{:+.4}", r.overall_change),
                format!("{:+.2}%", r.percent_change),
                format!("{:+.4}", r.slope_early),
                format!("{:+.4}", r.slope_late),
                format!("{:+.4}", r.overfitting_at.gap),
                implied_cell(r),
            ]
        })
        .collect();

    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row.iter()) {
            *w = (*w).max(cell.len());
        }
    }
    let render_row = |cells: &[String]| -> String {
        let padded: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if i == 0 {
                    format!("{c:<width$}", width = widths[i])
                } else {
                    format!("{c:>width$}", width = widths[i])
                }
            })
            .collect();
        padded.join("  ")
    };

    let mut out = render_row(&headers);
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for row in &rows {
        out.push_str(&render_row(row));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::log::EpochRow;

    fn series(values: &[f64]) -> Vec<(usize, f64)> {
        values.iter().copied().enumerate().collect()
    }

    /// Linear curve hitting both endpoints bit-exactly.
    fn lerp_curve(initial: f64, last: f64, epochs: usize) -> Vec<f64> {
        (0..epochs)
            .map(|e| {
                let t = e as f64 / (epochs - 1) as f64;
                initial * (1.0 - t) + last * t
            })
            .collect()
    }

    fn log_from(run_id: &str, tl: &[f64], vl: &[f64], ta: &[f64], va: &[f64]) -> EpochLog {
        let mut log = EpochLog::new();
        for e in 0..tl.len() {
            log.push(EpochRow::new(run_id, e, (tl[e], vl[e]), (ta[e], va[e])))
                .unwrap();
        }
        log
    }

    /// Endpoints of the published summary curves: (initial, final) for
    /// train loss, val loss, train acc, val acc.
    const ARM_A: [(f64, f64); 4] = [
        (0.180, 0.115),
        (0.165, 0.110),
        (0.450, 0.650),
        (0.450, 0.650),
    ];
    const ARM_B: [(f64, f64); 4] = [
        (0.145, 0.040),
        (0.120, 0.100),
        (0.580, 0.870),
        (0.630, 0.750),
    ];

    fn endpoint_log(run_id: &str, arm: &[(f64, f64); 4]) -> EpochLog {
        let c: Vec<Vec<f64>> = arm.iter().map(|&(i, f)| lerp_curve(i, f, 71)).collect();
        log_from(run_id, &c[0], &c[1], &c[2], &c[3])
    }

    #[test]
    fn overall_change_matches_hand_cases() {
        let (change, pct) = overall_change(&series(&lerp_curve(0.145, 0.040, 71))).unwrap();
        assert!((change - (-0.105)).abs() < 1e-12);
        assert!((pct - 100.0 * (-0.105) / 0.145).abs() < 1e-9);
        assert!((pct - (-72.41)).abs() < 0.01);

        let (change, pct) = overall_change(&series(&lerp_curve(0.45, 0.65, 71))).unwrap();
        assert!((change - 0.200).abs() < 1e-12);
        assert!((pct - (44.44)).abs() < 0.01);

        let (change, pct) = overall_change(&series(&[0.3; 10])).unwrap();
        assert_eq!(change, 0.0);
        assert_eq!(pct, 0.0);
    }

    #[test]
    fn overall_change_rejects_empty_and_zero_initial() {
        assert!(matches!(overall_change(&[]), Err(Error::EpochCoverage(_))));
        assert!(matches!(
            overall_change(&series(&[0.0, 1.0])),
            Err(Error::ZeroInitial)
        ));
    }

    #[test]
    fn percent_change_inverts_to_the_final_value() {
        let cases = [(0.145, 0.040), (0.45, 0.65), (1.7, -0.3), (-2.0, -1.0)];
        for (initial, last) in cases {
            let (_, pct) = overall_change(&series(&lerp_curve(initial, last, 5))).unwrap();
            assert!((initial * (1.0 + pct / 100.0) - last).abs() < 1e-9);
        }
    }

    #[test]
    fn window_slope_matches_closed_forms() {
        // flat fit
        assert_eq!(window_slope(&series(&[2.5; 40]), (0, 29)).unwrap(), 0.0);
        // exact linear data: value = 2 + 3e
        let linear: Vec<f64> = (0..5).map(|e| 2.0 + 3.0 * e as f64).collect();
        assert!((window_slope(&series(&linear), (0, 4)).unwrap() - 3.0).abs() < 1e-12);
        // two points are fit exactly
        let two = [(0usize, 1.0), (10usize, 0.0)];
        assert!((window_slope(&two, (0, 10)).unwrap() - (-0.1)).abs() < 1e-12);
    }

    #[test]
    fn window_slope_uses_only_rows_inside_the_window() {
        // steep outside the window, value = e inside it
        let mut s: Vec<(usize, f64)> = (0..10).map(|e| (e, -100.0 * e as f64)).collect();
        for e in 10..20 {
            s.push((e, e as f64));
        }
        let slope = window_slope(&s, (10, 19)).unwrap();
        assert!((slope - 1.0).abs() < 1e-12);
    }

    #[test]
    fn window_slope_matches_independent_normal_equations() {
        // same fit via the raw-moment form of the normal equations
        let vals = [0.9, 0.4, 0.7, 0.1, 0.5, 0.2, 0.8];
        let s = series(&vals);
        let n = vals.len() as f64;
        let se: f64 = (0..vals.len()).map(|e| e as f64).sum();
        let sv: f64 = vals.iter().sum();
        let sev: f64 = vals.iter().enumerate().map(|(e, v)| e as f64 * v).sum();
        let see: f64 = (0..vals.len()).map(|e| (e * e) as f64).sum();
        let expected = (n * sev - se * sv) / (n * see - se * se);
        assert!((window_slope(&s, (0, 6)).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn window_slope_needs_two_points() {
        let s = series(&[1.0, 2.0, 3.0]);
        assert!(matches!(
            window_slope(&s, (1, 1)),
            Err(Error::EpochCoverage(_))
        ));
        assert!(matches!(
            window_slope(&s, (5, 9)),
            Err(Error::EpochCoverage(_))
        ));
    }

    #[test]
    fn gap_signs_follow_the_overfitting_convention() {
        let train = [(70usize, 0.040)];
        let val = [(70usize, 0.100)];
        let g = overfitting_gap(&train, &val, 70, GapKind::Loss).unwrap();
        assert!((g - 0.060).abs() < 1e-12);

        let train = [(70usize, 0.870)];
        let val = [(70usize, 0.750)];
        let g = overfitting_gap(&train, &val, 70, GapKind::Accuracy).unwrap();
        assert!((g - 0.120).abs() < 1e-12);

        let same = [(70usize, 0.650)];
        assert_eq!(
            overfitting_gap(&same, &same, 70, GapKind::Loss).unwrap(),
            0.0
        );
        assert_eq!(
            overfitting_gap(&same, &same, 70, GapKind::Accuracy).unwrap(),
            0.0
        );
    }

    #[test]
    fn gap_requires_the_epoch_in_both_series() {
        let train = [(0usize, 0.5), (1, 0.4)];
        let val = [(0usize, 0.5)];
        let err = overfitting_gap(&train, &val, 1, GapKind::Loss).unwrap_err();
        assert!(matches!(err, Error::EpochCoverage(_)));
    }

    #[test]
    fn gap_grows_pointwise_with_the_val_train_spread() {
        let train = [(10usize, 0.2), (20, 0.2)];
        let narrow = [(10usize, 0.25), (20, 0.25)];
        let wide = [(10usize, 0.25), (20, 0.40)];
        let g_narrow = overfitting_gap(&train, &narrow, 20, GapKind::Loss).unwrap();
        let g_wide = overfitting_gap(&train, &wide, 20, GapKind::Loss).unwrap();
        assert!(g_wide > g_narrow);
    }

    #[test]
    fn table_report_emits_eight_rows_in_arm_major_order() {
        let log_a = endpoint_log("a", &ARM_A);
        let log_b = endpoint_log("b", &ARM_B);
        let rows = table_report(&log_a, &log_b).unwrap();
        let names: Vec<&str> = rows.iter().map(|r| r.metric_name.as_str()).collect();
        assert_eq!(
            names,
            [
                "Train Loss A",
                "Val Loss A",
                "Train Acc A",
                "Val Acc A",
                "Train Loss B",
                "Val Loss B",
                "Train Acc B",
                "Val Acc B"
            ]
        );
    }

    #[test]
    fn endpoint_curves_reproduce_the_published_summary() {
        let rows = table_report(&endpoint_log("a", &ARM_A), &endpoint_log("b", &ARM_B)).unwrap();
        let expected_final = [0.115, 0.110, 0.650, 0.650, 0.040, 0.100, 0.870, 0.750];
        let expected_change = [-0.065, -0.055, 0.200, 0.200, -0.105, -0.020, 0.290, 0.120];
        let expected_pct = [-36.11, -33.33, 44.44, 44.44, -72.41, -16.67, 50.00, 19.05];
        let expected_gap = [-0.005, -0.005, 0.000, 0.000, 0.060, 0.060, 0.120, 0.120];
        for (i, r) in rows.iter().enumerate() {
            assert!(
                (r.final_value - expected_final[i]).abs() < 1e-9,
                "{}",
                r.metric_name
            );
            assert!(
                (r.overall_change - expected_change[i]).abs() < 1e-9,
                "{}",
                r.metric_name
            );
            assert!(
                (r.percent_change - expected_pct[i]).abs() < 0.01,
                "{}",
                r.metric_name
            );
            assert!(
                (r.overfitting_at.gap - expected_gap[i]).abs() < 1e-9,
                "{}",
                r.metric_name
            );
            assert_eq!(r.overfitting_at.epoch, 70);
            // linear curves have the same slope in both windows
            let overall_slope = r.overall_change / 70.0;
            assert!((r.slope_early - overall_slope).abs() < 1e-9);
            assert!((r.slope_late - overall_slope).abs() < 1e-9);
        }
    }

    #[test]
    fn duplicate_logs_give_identical_arm_blocks_and_reports_are_pure() {
        let log = endpoint_log("x", &ARM_A);
        let rows = table_report(&log, &log).unwrap();
        for i in 0..4 {
            assert_eq!(rows[i].final_value, rows[i + 4].final_value);
            assert_eq!(rows[i].overall_change, rows[i + 4].overall_change);
            assert_eq!(rows[i].slope_early, rows[i + 4].slope_early);
            assert_eq!(rows[i].overfitting_at, rows[i + 4].overfitting_at);
        }
        let again = table_report(&log, &log).unwrap();
        assert_eq!(rows, again);
    }

    #[test]
    fn constant_log_reports_all_zero_motion() {
        let c = [0.4; 71];
        let a = [0.5; 71];
        let log = log_from("c", &c, &c, &a, &a);
        let rows = table_report(&log, &log).unwrap();
        for r in rows {
            assert_eq!(r.overall_change, 0.0);
            assert_eq!(r.percent_change, 0.0);
            assert_eq!(r.slope_early, 0.0);
            assert_eq!(r.slope_late, 0.0);
            assert_eq!(r.overfitting_at.gap, 0.0);
        }
    }

    #[test]
    fn table_report_rejects_short_logs() {
        let c = [0.4; 50];
        let log = log_from("short", &c, &c, &c, &c);
        let err = table_report(&log, &log).unwrap_err();
        assert!(matches!(err, Error::EpochCoverage(_)));

        // but fitted windows accept the same log
        let windows = ReportWindows::for_stage2(20, 50);
        assert!(table_report_with(&log, &log, &windows).is_ok());
    }

    #[test]
    fn implied_initial_audits_change_against_percent() {
        let rows = table_report(&endpoint_log("a", &ARM_A), &endpoint_log("b", &ARM_B)).unwrap();
        for r in &rows {
            let implied = implied_initial(r).unwrap();
            let initial = r.final_value - r.overall_change;
            assert!((implied - initial).abs() < 1e-9, "{}", r.metric_name);
        }
        // a published pair: change −0.020 at −16.67% implies initial 0.120
        let audit = DynamicsReport {
            metric_name: "Val Loss B".into(),
            final_value: 0.100,
            overall_change: -0.020,
            percent_change: -16.67,
            slope_early: 0.0,
            slope_late: 0.0,
            overfitting_at: GapAt {
                epoch: 70,
                gap: 0.060,
            },
        };
        assert!((implied_initial(&audit).unwrap() - 0.120).abs() < 0.001);

        let flat = DynamicsReport {
            percent_change: 0.0,
            ..audit
        };
        assert_eq!(implied_initial(&flat), None);
    }

    #[test]
    fn renderers_expose_all_columns() {
        let rows = table_report(&endpoint_log("a", &ARM_A), &endpoint_log("b", &ARM_B)).unwrap();
        let windows = ReportWindows::default();

        let csv = render_csv(&rows, &windows);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "metric,final_value,overall_change,percent_change,slope_0_29,slope_30_70,gap_epoch,gap,implied_initial"
        );
        assert_eq!(csv.lines().count(), 9);
        assert!(csv.contains("Train Loss B,"));

        let table = render_table(&rows, &windows);
        assert!(table.contains("Slope (0-29)"));
        assert!(table.contains("Slope (30-70)"));
        assert!(table.contains("Overfitting at 70"));
        assert!(table.contains("Implied Initial"));
        assert!(table.contains("Val Acc B"));
        assert!(table.contains("-72.41%"));
        // header, rule, eight rows
        assert_eq!(table.lines().count(), 10);
    }
}
