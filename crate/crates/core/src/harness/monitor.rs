//! Runtime monitors M1–M6, each computed from a [`SimLog`] alone.
//!
//! M1 recursive feasibility; M2 one-step `V^δ` decrease; M3 m-step `ξ`
//! decrease; M4 `J^δ` decay; M5 running-average economic cost; M6
//! `V^δ ≥ J^δ ≥ 0`. A positive margin means the inequality holds with room.

use serde::{Deserialize, Serialize};

use super::{average_cost_series, SimLog, AVERAGE_COST_SLACK, J_DECAY_THRESHOLD};
use crate::controller::Scheme;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MonitorId {
    M1,
    M2,
    M3,
    M4,
    M5,
    M6,
}

impl MonitorId {
    pub const ALL: [MonitorId; 6] = [Self::M1, Self::M2, Self::M3, Self::M4, Self::M5, Self::M6];

    pub fn column(self) -> &'static str {
        match self {
            Self::M1 => "m1",
            Self::M2 => "m2",
            Self::M3 => "m3",
            Self::M4 => "m4",
            Self::M5 => "m5",
            Self::M6 => "m6",
        }
    }

    /// Monitors that must pass for a successful run of `scheme`.
    pub fn is_mandatory(self, scheme: Scheme) -> bool {
        match self {
            Self::M1 | Self::M6 => true,
            Self::M2 => scheme == Scheme::Alg1,
            Self::M3 => scheme == Scheme::Alg2,
            Self::M4 | Self::M5 => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonitorToggles {
    pub m1: bool,
    pub m2: bool,
    pub m3: bool,
    pub m4: bool,
    pub m5: bool,
    pub m6: bool,
}

impl Default for MonitorToggles {
    fn default() -> Self {
        Self {
            m1: true,
            m2: true,
            m3: true,
            m4: true,
            m5: true,
            m6: true,
        }
    }
}

impl MonitorToggles {
    pub fn enabled(&self, id: MonitorId) -> bool {
        match id {
            MonitorId::M1 => self.m1,
            MonitorId::M2 => self.m2,
            MonitorId::M3 => self.m3,
            MonitorId::M4 => self.m4,
            MonitorId::M5 => self.m5,
            MonitorId::M6 => self.m6,
        }
    }
}

/// Verdict of one monitor at one step. Steps where the monitor does not apply
/// pass with a `NaN` margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub pass: bool,
    pub margin: f64,
}

impl Verdict {
    const NOT_APPLICABLE: Verdict = Verdict {
        pass: true,
        margin: f64::NAN,
    };

    fn from_margin(margin: f64) -> Self {
        Self {
            pass: margin >= 0.0,
            margin,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorSummary {
    pub id: MonitorId,
    pub enabled: bool,
    pub mandatory: bool,
    pub passed: bool,
    pub violations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_violation: Option<usize>,
    /// Smallest margin over applicable steps (`null` when none applied).
    pub worst_margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonitorReport {
    /// `per_step[t][i]` is the verdict of `MonitorId::ALL[i]` at step `t`.
    pub per_step: Vec<[Verdict; 6]>,
    pub summaries: Vec<MonitorSummary>,
}

impl MonitorReport {
    pub fn summary(&self, id: MonitorId) -> Option<&MonitorSummary> {
        self.summaries.iter().find(|s| s.id == id)
    }

    pub fn mandatory_passed(&self) -> bool {
        self.summaries.iter().all(|s| !s.mandatory || s.passed)
    }

    pub fn all_passed(&self) -> bool {
        self.summaries.iter().all(|s| s.passed)
    }
}

/// Evaluates M1–M6 with slack `feas_tol` from the log's solver options.
///
/// M4 and M5 are prefix statistics: the verdict at step `t` concerns records
/// `0..=t`, so the last row carries the run-level verdict.
pub fn monitor_suite<T: Scalar>(log: &SimLog<T>) -> MonitorReport {
    let tol = log.config.solver.feas_tol;
    let cfg = &log.config.controller;
    let toggles = log.config.monitors;
    let f = |v: T| v.to_f64_lossy();
    let n = log.records.len();
    let le: Vec<T> = log.records.iter().map(|r| r.le_inst).collect();
    let average = average_cost_series(&le);
    let steady = f(log.steady_cost);
    let mut j_prefix = vec![0.0; n + 1];
    for (k, r) in log.records.iter().enumerate() {
        j_prefix[k + 1] = j_prefix[k] + f(r.j_delta);
    }
    let mut per_step = Vec::with_capacity(n);
    for (t, r) in log.records.iter().enumerate() {
        let m1 = if r.status == crate::nlp::NlpStatus::Infeasible && !r.fallback {
            Verdict::from_margin(-1.0)
        } else {
            Verdict::from_margin(0.0)
        };
        let m2 = if t == 0 {
            Verdict::NOT_APPLICABLE
        } else {
            Verdict::from_margin(f(log.records[t - 1].v_delta) + tol - f(r.v_delta))
        };
        let m = cfg.m;
        let m3 = match (cfg.scheme, r.xi) {
            (Scheme::Alg2, Some(xi)) if t >= m => match log.records[t - m].xi {
                Some(back) => {
                    let rate = (1.0 - cfg.tau).min(cfg.beta);
                    Verdict::from_margin(
                        f(back) - rate * f(log.records[t - m].j_delta) + tol - f(xi),
                    )
                }
                None => Verdict::from_margin(f64::NEG_INFINITY),
            },
            _ => Verdict::NOT_APPLICABLE,
        };
        // Last quarter of the prefix 0..=t.
        let len = t + 1;
        let start = len - len.div_ceil(4);
        let j_mean = (j_prefix[len] - j_prefix[start]) / (len - start) as f64;
        let m4 = Verdict::from_margin(J_DECAY_THRESHOLD - j_mean);
        let m5 = Verdict::from_margin(steady * (1.0 + AVERAGE_COST_SLACK) - f(average[t]));
        let (v, j) = (f(r.v_delta), f(r.j_delta));
        let m6 = Verdict::from_margin((v - j + tol).min(j + tol));
        let mut row = [m1, m2, m3, m4, m5, m6];
        for (i, id) in MonitorId::ALL.iter().enumerate() {
            if !toggles.enabled(*id) {
                row[i] = Verdict::NOT_APPLICABLE;
            }
        }
        per_step.push(row);
    }

    let summaries = MonitorId::ALL
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            let enabled = toggles.enabled(id);
            // Prefix monitors are judged on the final row.
            let rows: Vec<(usize, Verdict)> = match id {
                MonitorId::M4 | MonitorId::M5 => per_step
                    .last()
                    .map(|r| vec![(n - 1, r[i])])
                    .unwrap_or_default(),
                _ => per_step
                    .iter()
                    .enumerate()
                    .map(|(t, r)| (t, r[i]))
                    .collect(),
            };
            let failed: Vec<usize> = rows
                .iter()
                .filter(|(_, v)| !v.pass)
                .map(|(t, _)| *t)
                .collect();
            let aborted_infeasible =
                id == MonitorId::M1 && log.abort.as_ref().is_some_and(|a| a.infeasible);
            let worst = rows
                .iter()
                .map(|(_, v)| v.margin)
                .filter(|m| !m.is_nan())
                .fold(None, |acc: Option<f64>, m| {
                    Some(acc.map_or(m, |a| a.min(m)))
                });
            MonitorSummary {
                id,
                enabled,
                mandatory: enabled && id.is_mandatory(cfg.scheme),
                passed: failed.is_empty() && !aborted_infeasible,
                violations: failed.len() + usize::from(aborted_infeasible),
                first_violation: failed.first().copied().or(log
                    .abort
                    .as_ref()
                    .filter(|_| aborted_infeasible)
                    .map(|a| a.t)),
                worst_margin: worst,
            }
        })
        .collect();
    MonitorReport {
        per_step,
        summaries,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::{ControllerConfig, Scheme};
    use crate::harness::{SimConfig, StepRecord};
    use crate::nlp::{NlpStatus, SolverOptions};
    use crate::scalar::vector_from_f64;

    fn synthetic(scheme: Scheme, m: usize, v: &[f64], j: &[f64], xi: &[f64]) -> SimLog<f64> {
        let mut controller = ControllerConfig::new(scheme, 5, m);
        controller.m = m;
        let records = (0..v.len())
            .map(|t| StepRecord {
                t,
                x: vector_from_f64(&[24.0, 25.0]),
                u: vector_from_f64(&[0.5, 0.4]),
                v_delta: v[t],
                j_delta: j[t],
                v_econ: 0.0,
                le_inst: 1.0,
                eta: None,
                xi: xi.get(t).copied(),
                zeta: None,
                status: NlpStatus::Optimal,
                fallback: false,
            })
            .collect();
        SimLog {
            config: SimConfig {
                x0: vec![24.0, 25.0],
                steps: v.len(),
                controller,
                solver: SolverOptions::default(),
                monitors: MonitorToggles::default(),
                seed: 0,
            },
            records,
            final_state: vector_from_f64(&[24.0, 25.0]),
            xs: vector_from_f64(&[24.0, 25.0]),
            steady_cost: 1.0,
            dt: 600.0,
            v_max: 100.0,
            fallback_count: 0,
            abort: None,
        }
    }

    #[test]
    fn monotone_run_passes_m2() {
        let log = synthetic(
            Scheme::Alg1,
            1,
            &[5.0, 3.0, 2.0, 2.0],
            &[1.0, 0.5, 0.0, 0.0],
            &[],
        );
        let r = monitor_suite(&log);
        assert!(r.summary(MonitorId::M2).unwrap().passed);
        assert!(r.mandatory_passed());
    }

    #[test]
    fn bump_flags_m2_at_its_step() {
        let log = synthetic(Scheme::Alg1, 1, &[5.0, 3.0, 3.5, 2.0], &[0.0; 4], &[]);
        let s = monitor_suite(&log).summary(MonitorId::M2).unwrap().clone();
        assert!(!s.passed);
        assert_eq!(s.first_violation, Some(2));
        assert!(s.mandatory);
    }

    #[test]
    fn corrupted_xi_flags_exact_step() {
        let v = [9.0; 8];
        let j = [1.0; 8];
        let mut xi = vec![10.0, 10.0, 8.0, 8.0, 6.0, 6.0, 5.0, 5.0];
        let log = synthetic(Scheme::Alg2, 2, &v, &j, &xi);
        assert!(monitor_suite(&log).summary(MonitorId::M3).unwrap().passed);
        xi[5] = 7.9;
        let log = synthetic(Scheme::Alg2, 2, &v, &j, &xi);
        let s = monitor_suite(&log).summary(MonitorId::M3).unwrap().clone();
        assert!(!s.passed);
        assert_eq!(s.first_violation, Some(5));
        assert_eq!(s.violations, 1);
    }

    #[test]
    fn ordering_violation_flags_m6() {
        let log = synthetic(Scheme::Tracking, 1, &[1.0, 0.5], &[0.5, 0.7], &[]);
        let s = monitor_suite(&log).summary(MonitorId::M6).unwrap().clone();
        assert_eq!(s.first_violation, Some(1));
    }

    #[test]
    fn prefix_monitors_use_final_row() {
        let mut j = vec![1.0; 8];
        j[6] = 0.0;
        j[7] = 0.0;
        let log = synthetic(Scheme::Alg1, 1, &[2.0; 8], &j, &[]);
        let r = monitor_suite(&log);
        assert!(!r.per_step[3][3].pass);
        assert!(r.per_step[7][3].pass);
        assert!(r.summary(MonitorId::M4).unwrap().passed);
        assert!(!r.summary(MonitorId::M4).unwrap().mandatory);
        assert!(r.summary(MonitorId::M5).unwrap().passed);
    }

    #[test]
    fn disabled_monitor_never_fails() {
        let mut log = synthetic(Scheme::Alg1, 1, &[5.0, 6.0], &[0.0; 2], &[]);
        log.config.monitors.m2 = false;
        let s = monitor_suite(&log).summary(MonitorId::M2).unwrap().clone();
        assert!(s.passed && !s.mandatory);
    }
}
