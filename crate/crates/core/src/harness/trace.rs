//! Control-rate simulation log and its CSV form.

use std::io::{Read, Write};

use super::HarnessError;

/// Column order of the trace CSV. Stable; extend only by appending.
pub const TRACE_COLUMNS: [&str; 30] = [
    "t",
    "x",
    "y",
    "z",
    "phi",
    "theta",
    "psi",
    "x_r",
    "y_r",
    "z_r",
    "psi_r",
    "e_px",
    "e_py",
    "e_pz",
    "e_phi",
    "e_theta",
    "e_psi",
    "e_eta_norm",
    "kP1_pt",
    "kP1_psi",
    "kP2_pt",
    "kP2_psi",
    "kD_pt",
    "n1",
    "n2",
    "n3",
    "n4",
    "n5",
    "reward",
    "sat_flag",
];

/// One control tick. Agent-rate fields (gains, action, reward) hold their
/// most recent value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub t: f64,
    pub position: [f64; 3],
    pub attitude: [f64; 3],
    pub reference_position: [f64; 3],
    pub reference_yaw: f64,
    pub position_error: [f64; 3],
    pub attitude_error: [f64; 3],
    pub attitude_error_norm: f64,
    /// `[kP1_φθ, kP1_ψ, kP2_φθ, kP2_ψ, kD_φθ]`.
    pub gains: [f64; 5],
    pub action: [f64; 5],
    /// Reward of the last completed agent step (0 before the first).
    pub reward: f64,
    pub saturated: bool,
}

impl TraceRecord {
    fn to_row(&self) -> Vec<String> {
        let mut row = Vec::with_capacity(TRACE_COLUMNS.len());
        row.push(self.t.to_string());
        let floats = self
            .position
            .iter()
            .chain(&self.attitude)
            .chain(&self.reference_position)
            .chain(std::iter::once(&self.reference_yaw))
            .chain(&self.position_error)
            .chain(&self.attitude_error)
            .chain(std::iter::once(&self.attitude_error_norm))
            .chain(&self.gains)
            .chain(&self.action)
            .chain(std::iter::once(&self.reward));
        // `Display` for f64 prints the shortest string that parses back exactly.
        row.extend(floats.map(|v| v.to_string()));
        row.push(if self.saturated { "1" } else { "0" }.to_string());
        row
    }

    fn from_row(row: &csv::StringRecord, line: usize) -> Result<Self, HarnessError> {
        if row.len() != TRACE_COLUMNS.len() {
            return Err(HarnessError::Trace(format!(
                "line {line}: expected {} fields, found {}",
                TRACE_COLUMNS.len(),
                row.len()
            )));
        }
        let mut v = [0.0; 29];
        for (i, slot) in v.iter_mut().enumerate() {
            *slot = row[i].parse().map_err(|_| {
                HarnessError::Trace(format!("line {line}: bad value {:?} in {}", &row[i], TRACE_COLUMNS[i]))
            })?;
        }
        let saturated = match &row[29] {
            "0" => false,
            "1" => true,
            other => return Err(HarnessError::Trace(format!("line {line}: bad sat_flag {other:?}"))),
        };
        let take3 = |i: usize| [v[i], v[i + 1], v[i + 2]];
        let take5 = |i: usize| [v[i], v[i + 1], v[i + 2], v[i + 3], v[i + 4]];
        Ok(Self {
            t: v[0],
            position: take3(1),
            attitude: take3(4),
            reference_position: take3(7),
            reference_yaw: v[10],
            position_error: take3(11),
            attitude_error: take3(14),
            attitude_error_norm: v[17],
            gains: take5(18),
            action: take5(23),
            reward: v[28],
            saturated,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimTrace {
    pub records: Vec<TraceRecord>,
    /// Control ticks per agent step; a record whose index is a positive
    /// multiple of this carries a freshly earned reward.
    pub ticks_per_agent_step: usize,
    /// Set when the run stopped on a simulation fault or divergence guard.
    pub fault: Option<String>,
}

impl SimTrace {
    pub fn new(ticks_per_agent_step: usize) -> Self {
        Self { records: Vec::new(), ticks_per_agent_step, fault: None }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Rewards earned at each agent step, in order.
    pub fn agent_rewards(&self) -> Vec<f64> {
        let n = self.ticks_per_agent_step.max(1);
        self.records.iter().enumerate().skip(n).step_by(n).map(|(_, r)| r.reward).collect()
    }

    /// `√(mean ‖e_η‖²)` over all records; `None` for an empty trace.
    pub fn attitude_rmse(&self) -> Option<f64> {
        if self.records.is_empty() {
            return None;
        }
        let ss: f64 = self.records.iter().map(|r| r.attitude_error_norm * r.attitude_error_norm).sum();
        Some((ss / self.records.len() as f64).sqrt())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), HarnessError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(TRACE_COLUMNS)?;
        for r in &self.records {
            out.write_record(r.to_row())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String, HarnessError> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    /// Reads a trace written by [`SimTrace::write_csv`]. The CSV does not carry
    /// the agent period, so it is supplied by the caller.
    pub fn read_csv<R: Read>(r: R, ticks_per_agent_step: usize) -> Result<Self, HarnessError> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        if headers.iter().ne(TRACE_COLUMNS.iter().copied()) {
            return Err(HarnessError::Trace("unexpected trace header".into()));
        }
        let mut trace = SimTrace::new(ticks_per_agent_step);
        for (i, row) in rdr.records().enumerate() {
            trace.records.push(TraceRecord::from_row(&row?, i + 2)?);
        }
        Ok(trace)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(t: f64, reward: f64) -> TraceRecord {
        TraceRecord {
            t,
            position: [1.0, 2.0, 3.0],
            attitude: [0.1, -0.2, 1e-17],
            reference_position: [1.0, 2.0, 3.5],
            reference_yaw: 0.0,
            position_error: [0.0, 0.0, 0.5],
            attitude_error: [0.01, 1.0 / 3.0, 0.0],
            attitude_error_norm: 0.3335,
            gains: [4.0, 2.0, 11.467, 5.4801, 0.81905],
            action: [0.0, -1.0, 1.0, 0.25, 0.0],
            reward,
            saturated: t > 0.0,
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let mut trace = SimTrace::new(2);
        for k in 0..5 {
            trace.records.push(record(k as f64 * 0.005, -(k as f64)));
        }
        let text = trace.to_csv_string().unwrap();
        assert!(text.starts_with("t,x,y,z,phi,theta,psi,x_r"));
        let back = SimTrace::read_csv(text.as_bytes(), 2).unwrap();
        assert_eq!(back, trace);
        assert_eq!(trace.agent_rewards(), vec![-2.0, -4.0]);
    }

    #[test]
    fn rejects_malformed_rows() {
        let bad = format!("{}\n1,2,3\n", TRACE_COLUMNS.join(","));
        assert!(SimTrace::read_csv(bad.as_bytes(), 1).is_err());
        assert!(SimTrace::read_csv("a,b\n1,2\n".as_bytes(), 1).is_err());
    }
}
