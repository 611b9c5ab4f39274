use crate::layout::plan;
use crate::{ParallelConfig, PlanError, PlanReport, Result, Scenario};
use serde::Serialize;
use std::cmp::Ordering;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Objective {
    MinStepTime,
    MaxThroughput,
}

impl std::str::FromStr for Objective {
    type Err = PlanError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min_step_time" => Ok(Self::MinStepTime),
            "max_throughput" => Ok(Self::MaxThroughput),
            _ => Err(crate::invalid("objective", format!("unknown objective {s:?}"))),
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::MinStepTime => "min_step_time",
            Self::MaxThroughput => "max_throughput",
        })
    }
}

fn divisors(n: u64) -> Vec<u64> {
    let mut small = Vec::new();
    let mut large = Vec::new();
    let mut d = 1;
    while d * d <= n {
        if n % d == 0 {
            small.push(d);
            if d * d != n {
                large.push(n / d);
            }
        }
        d += 1;
    }
    small.extend(large.into_iter().rev());
    small
}

/// Every `(dp, fsdp, ulysses, ring)` with `dp·fsdp = gpus` and `ulysses·ring | fsdp`.
pub fn enumerate(gpus: u64) -> Vec<ParallelConfig> {
    let mut out = Vec::new();
    for fsdp in divisors(gpus) {
        for cp in divisors(fsdp) {
            for ulysses in divisors(cp) {
                out.push(ParallelConfig::new(gpus / fsdp, fsdp, ulysses, cp / ulysses));
            }
        }
    }
    out
}

fn order(objective: Objective, a: &PlanReport, b: &PlanReport) -> Ordering {
    let primary = match objective {
        Objective::MinStepTime => a.step_s.total_cmp(&b.step_s),
        Objective::MaxThroughput => b.throughput.total_cmp(&a.throughput),
    };
    primary
        .then(b.config.dp.cmp(&a.config.dp))
        .then(a.config.cp().cmp(&b.config.cp()))
        .then(a.config.ulysses.cmp(&b.config.ulysses))
}

/// Sorts best first under the objective's total order.
pub fn rank(mut reports: Vec<PlanReport>, objective: Objective) -> Vec<PlanReport> {
    reports.sort_by(|a, b| order(objective, a, b));
    reports
}

/// Feasible layouts, best first.
pub fn search(sc: &Scenario, objective: Objective) -> Result<Vec<PlanReport>> {
    sc.validate()?;
    let all = enumerate(sc.cluster.gpus)
        .iter()
        .map(|c| plan(sc, c))
        .collect::<Result<Vec<_>>>()?;
    let (ok, bad): (Vec<_>, Vec<_>) = all.into_iter().partition(|r| r.feasible);
    if ok.is_empty() {
        // The layout with the least memory pressure shows what binds.
        let best = bad
            .iter()
            .min_by(|a, b| {
                (a.activation_bytes + a.state_bytes)
                    .total_cmp(&(b.activation_bytes + b.state_bytes))
                    .then(a.config.cmp(&b.config))
            })
            .expect("a single GPU always yields one candidate");
        let reason = best.reasons.first().cloned().unwrap_or_default();
        let binding = if reason.starts_with("activation memory") {
            "activation memory"
        } else {
            "parameter-state memory"
        };
        return Err(PlanError::NoFeasible {
            binding: binding.to_string(),
            detail: format!("best layout {}: {reason}", best.config),
        });
    }
    Ok(rank(ok, objective))
}
