//! Summary statistics over simulation traces.

use std::fmt::Write as _;

use super::trace::SimTrace;
use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    /// RMSE of the attitude error norm [rad].
    pub rmse_attitude: f64,
    pub peak_attitude_error: f64,
    pub peak_time: f64,
    /// RMSE of the position error norm [m].
    pub rmse_position: f64,
    pub episode_return: f64,
    pub gain_min: [f64; 5],
    pub gain_max: [f64; 5],
    pub samples: usize,
}

pub fn rmse_attitude(trace: &SimTrace) -> Result<f64, HarnessError> {
    trace.attitude_rmse().ok_or(HarnessError::EmptyTrace)
}

pub fn metrics(trace: &SimTrace) -> Result<MetricsReport, HarnessError> {
    let rmse_attitude = rmse_attitude(trace)?;
    let n = trace.len() as f64;
    let (mut peak, mut peak_time) = (f64::NEG_INFINITY, 0.0);
    let mut pos_ss = 0.0;
    let mut gain_min = [f64::INFINITY; 5];
    let mut gain_max = [f64::NEG_INFINITY; 5];
    for r in &trace.records {
        if r.attitude_error_norm > peak {
            peak = r.attitude_error_norm;
            peak_time = r.t;
        }
        pos_ss += r.position_error.iter().map(|e| e * e).sum::<f64>();
        for k in 0..5 {
            gain_min[k] = gain_min[k].min(r.gains[k]);
            gain_max[k] = gain_max[k].max(r.gains[k]);
        }
    }
    Ok(MetricsReport {
        rmse_attitude,
        peak_attitude_error: peak,
        peak_time,
        rmse_position: (pos_ss / n).sqrt(),
        episode_return: trace.agent_rewards().iter().sum(),
        gain_min,
        gain_max,
        samples: trace.len(),
    })
}

/// The `count` largest attitude-error samples that lie at least
/// `min_separation` seconds apart, largest first, as `(t, ‖e_η‖)`.
pub fn largest_peaks(trace: &SimTrace, count: usize, min_separation: f64) -> Vec<(f64, f64)> {
    let mut samples: Vec<(f64, f64)> = trace.records.iter().map(|r| (r.t, r.attitude_error_norm)).collect();
    samples.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut peaks: Vec<(f64, f64)> = Vec::with_capacity(count);
    for s in samples {
        if peaks.len() == count {
            break;
        }
        if peaks.iter().all(|p| (p.0 - s.0).abs() >= min_separation) {
            peaks.push(s);
        }
    }
    peaks
}

/// `(a − b) / a` in percent; positive when `b` is smaller.
fn improvement_pct(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        100.0 * (a - b) / a
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Comparison {
    pub a: MetricsReport,
    pub b: MetricsReport,
    /// `b − a` for the attitude RMSE.
    pub rmse_delta: f64,
    pub rmse_improvement_pct: f64,
    pub peak_improvement_pct: f64,
    pub position_improvement_pct: f64,
    /// `b − a` for the episode return.
    pub return_delta: f64,
}

impl Comparison {
    /// Two-row RMSE table with the relative improvement of `b` over `a`.
    pub fn render_table(&self, label_a: &str, label_b: &str) -> String {
        let width = label_a.len().max(label_b.len()).max("Improvement".len()) + 2;
        let mut s = String::new();
        let _ = writeln!(s, "{:width$}{:>16}{:>16}{:>12}", "", "|e_eta| RMSE", "peak |e_eta|", "return");
        for (label, m) in [(label_a, &self.a), (label_b, &self.b)] {
            let _ = writeln!(
                s,
                "{label:width$}{:>16}{:>16}{:>12}",
                format!("{:.2}e-3 rad", m.rmse_attitude * 1e3),
                format!("{:.2}e-3 rad", m.peak_attitude_error * 1e3),
                m.episode_return
            );
        }
        let _ = writeln!(
            s,
            "{:width$}{:>16}{:>16}{:>12}",
            "Improvement",
            format!("{:.1} %", self.rmse_improvement_pct),
            format!("{:.1} %", self.peak_improvement_pct),
            format!("{:+}", self.return_delta)
        );
        s
    }
}

/// Side-by-side metrics of two runs of the same mission.
pub fn compare(a: &SimTrace, b: &SimTrace) -> Result<Comparison, HarnessError> {
    if a.len() != b.len() {
        return Err(HarnessError::MissionMismatch(format!("{} records vs {}", a.len(), b.len())));
    }
    for (k, (ra, rb)) in a.records.iter().zip(&b.records).enumerate() {
        if ra.t != rb.t || ra.reference_position != rb.reference_position || ra.reference_yaw != rb.reference_yaw {
            return Err(HarnessError::MissionMismatch(format!("references differ at record {k} (t = {})", ra.t)));
        }
    }
    let (ma, mb) = (metrics(a)?, metrics(b)?);
    Ok(Comparison {
        a: ma,
        b: mb,
        rmse_delta: mb.rmse_attitude - ma.rmse_attitude,
        rmse_improvement_pct: improvement_pct(ma.rmse_attitude, mb.rmse_attitude),
        peak_improvement_pct: improvement_pct(ma.peak_attitude_error, mb.peak_attitude_error),
        position_improvement_pct: improvement_pct(ma.rmse_position, mb.rmse_position),
        return_delta: mb.episode_return - ma.episode_return,
    })
}
