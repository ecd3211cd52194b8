use std::io::Write;

use serde::{Deserialize, Serialize};

use super::dil::{Method, Termination};
use crate::batchnorm::StatsMode;
use crate::error::{invalid, Result};

/// One trial: the learning rate the search settled on and test accuracies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub trial: usize,
    pub method: Method,
    pub stats_mode: StatsMode,
    pub lr: f64,
    pub iters: u64,
    pub terminated: Termination,
    pub acc_new: f64,
    pub acc_orig: f64,
}

pub const TRIAL_HEADER: [&str; 8] =
    ["trial", "method", "stats_mode", "lr", "iters", "terminated", "acc_new", "acc_orig"];

impl TrialRow {
    pub fn fields(&self) -> [String; 8] {
        [
            self.trial.to_string(),
            self.method.to_string(),
            self.stats_mode.to_string(),
            self.lr.to_string(),
            self.iters.to_string(),
            self.terminated.to_string(),
            self.acc_new.to_string(),
            self.acc_orig.to_string(),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub median: f64,
    pub std: f64,
}

/// Median, averaging the central pair for even counts. NaN when empty.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Standard deviation with divisor `n`. NaN when empty.
pub fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn stat(values: &[f64]) -> Stat {
    Stat { median: median(values), std: population_std(values) }
}

/// Trial rows plus their median ± standard deviation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub rows: Vec<TrialRow>,
    pub acc_new: Stat,
    pub acc_orig: Stat,
    pub iters: Stat,
    pub converged: usize,
}

pub fn aggregate(rows: &[TrialRow]) -> Result<RunReport> {
    if rows.is_empty() {
        return Err(invalid("cannot aggregate zero trials"));
    }
    let col = |f: fn(&TrialRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    Ok(RunReport {
        rows: rows.to_vec(),
        acc_new: stat(&col(|r| r.acc_new)),
        acc_orig: stat(&col(|r| r.acc_orig)),
        iters: stat(&col(|r| r.iters as f64)),
        converged: rows.iter().filter(|r| r.terminated == Termination::Converged).count(),
    })
}

impl RunReport {
    pub fn method(&self) -> Method {
        self.rows[0].method
    }

    pub fn stats_mode(&self) -> StatsMode {
        self.rows[0].stats_mode
    }

    /// Per-trial CSV.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(TRIAL_HEADER)?;
        for r in &self.rows {
            w.write_record(r.fields())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Medians and standard deviations as pretty JSON.
    pub fn write_summary_json<W: Write>(&self, out: W) -> Result<()> {
        let summary = serde_json::json!({
            "method": self.method(),
            "stats_mode": self.stats_mode(),
            "trials": self.rows.len(),
            "converged": self.converged,
            "acc_new": self.acc_new,
            "acc_orig": self.acc_orig,
            "iters": self.iters,
        });
        serde_json::to_writer_pretty(out, &summary)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_conventions() {
        assert_eq!(median(&[0.3, 0.1, 0.2]), 0.2);
        assert!((median(&[0.1, 0.3]) - 0.2).abs() < 1e-15);
        assert_eq!(population_std(&[0.7]), 0.0);
        assert_eq!(population_std(&[1.0, 3.0]), 1.0);
    }
}
