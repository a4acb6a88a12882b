//! Min-max workload balancing across nodes with different per-unit costs.
//!
//! Node `j` holding `d_j` data units at `c_j` time per unit finishes after
//! `c_j·d_j`; the run waits for the slowest node. Two levers are offered:
//! resize the partitions for fixed costs ([`balance_data`]), or retune the
//! node capacities for fixed partitions ([`balance_capacity`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_costs(costs: &[f64]) -> Result<()> {
    if costs.is_empty() {
        return Err(Error::Balance("at least one node is required".into()));
    }
    for (j, &c) in costs.iter().enumerate() {
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::Balance(format!("cost of node {j} must be finite and > 0, got {c}")));
        }
    }
    Ok(())
}

/// `max_j c_j·d_j`.
pub fn makespan(sizes: &[u64], costs: &[f64]) -> Result<f64> {
    if sizes.len() != costs.len() {
        return Err(Error::LengthMismatch(sizes.len(), costs.len()));
    }
    Ok(sizes
        .iter()
        .zip(costs)
        .map(|(&d, &c)| c * d as f64)
        .fold(0.0, f64::max))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceProblem {
    /// Total data units `D`.
    pub total: u64,
    /// Per-node cost per unit `c_j`.
    pub costs: Vec<f64>,
}

/// Real-valued optimum: `d_j = (1/c_j) / Σ(1/c) · D`.
pub fn balance_data_real(problem: &BalanceProblem) -> Result<Vec<f64>> {
    check_costs(&problem.costs)?;
    let inv: Vec<f64> = problem.costs.iter().map(|c| 1.0 / c).collect();
    let sum: f64 = inv.iter().sum();
    Ok(inv.iter().map(|w| w / sum * problem.total as f64).collect())
}

/// Makespan of the real-valued optimum, `D / Σ(1/c)`.
pub fn optimal_makespan(problem: &BalanceProblem) -> Result<f64> {
    check_costs(&problem.costs)?;
    let sum: f64 = problem.costs.iter().map(|c| 1.0 / c).sum();
    Ok(problem.total as f64 / sum)
}

/// Integer partition sizes proportional to node capacity. The real-valued
/// shares are floored and the leftover units handed out one at a time in
/// order of decreasing fractional part (lower index first on ties), so the
/// sizes always sum to `D`.
pub fn balance_data(problem: &BalanceProblem) -> Result<Vec<u64>> {
    let real = balance_data_real(problem)?;
    Ok(apportion(&real, problem.total))
}

fn apportion(real: &[f64], total: u64) -> Vec<u64> {
    let mut out: Vec<u64> = real.iter().map(|r| r.floor().max(0.0) as u64).collect();
    let assigned: u64 = out.iter().sum();
    let mut order: Vec<usize> = (0..real.len()).collect();
    let frac = |j: usize| real[j] - real[j].floor();
    order.sort_by(|&a, &b| frac(b).total_cmp(&frac(a)).then(a.cmp(&b)));
    if assigned <= total {
        for &j in order.iter().cycle().take((total - assigned) as usize) {
            out[j] += 1;
        }
    } else {
        // Rounding pushed the floors past the total; take back from the
        // smallest fractional parts.
        let mut excess = assigned - total;
        for &j in order.iter().rev().cycle() {
            if excess == 0 {
                break;
            }
            if out[j] > 0 {
                out[j] -= 1;
                excess -= 1;
            }
        }
    }
    out
}

/// Sizes for an even split, remainder to the lowest indices.
pub fn even_split(total: u64, m: usize) -> Vec<u64> {
    let m = m.max(1) as u64;
    (0..m)
        .map(|j| total / m + u64::from(j < total % m))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapacityProblem {
    /// Fixed partition sizes `d_j`.
    pub sizes: Vec<u64>,
    /// Largest capacity factor any node can reach.
    pub f: f64,
    /// Current per-unit costs, if known; used to check `f >= max 1/c_j`.
    pub costs: Option<Vec<f64>>,
}

/// Capacity factors `1/c'_j = f·d_j / d*` with `d* = max d_j`. The largest
/// partition gets the full factor `f` and every node then finishes at
/// `d*/f`.
pub fn balance_capacity(problem: &CapacityProblem) -> Result<Vec<f64>> {
    if problem.sizes.is_empty() {
        return Err(Error::Balance("at least one node is required".into()));
    }
    if !(problem.f.is_finite() && problem.f > 0.0) {
        return Err(Error::Balance(format!("f must be finite and > 0, got {}", problem.f)));
    }
    if let Some(costs) = &problem.costs {
        if costs.len() != problem.sizes.len() {
            return Err(Error::LengthMismatch(problem.sizes.len(), costs.len()));
        }
        check_costs(costs)?;
        let best = costs.iter().map(|c| 1.0 / c).fold(0.0, f64::max);
        if problem.f < best {
            return Err(Error::Balance(format!(
                "f = {} is below the current best capacity factor {best}",
                problem.f
            )));
        }
    }
    let d_star = *problem.sizes.iter().max().expect("non-empty");
    if d_star == 0 {
        return Err(Error::Balance("all partitions are empty".into()));
    }
    let f = problem.f;
    let bound = d_star as f64 / f;
    Ok(problem
        .sizes
        .iter()
        .map(|&d| {
            if d == d_star {
                return f;
            }
            // Round up so the implied makespan never exceeds the bound.
            let mut x = f * (d as f64 / d_star as f64);
            while x > 0.0 && d as f64 / x > bound {
                x = f64::from_bits(x.to_bits() + 1);
            }
            x
        })
        .collect())
}

/// One measured pass: data units processed, blocks dispatched, time taken.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    pub data_units: f64,
    pub blocks: f64,
    pub time: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// Time per data unit.
    pub c: f64,
    /// Fixed cost per block, when the samples vary the block count.
    pub t_call: Option<f64>,
    /// Constant term, fitted instead of `t_call` when the block count never
    /// varies.
    pub intercept: Option<f64>,
}

/// Least-squares fit of `time = c·data_units + blocks·t_call`.
///
/// With at least two distinct block counts both coefficients are fitted.
/// With a single block count the per-block term is indistinguishable from a
/// constant, so `time = c·data_units + k` is fitted instead, which needs at
/// least two distinct data sizes.
pub fn calibrate(samples: &[CalibrationSample]) -> Result<Calibration> {
    if samples.len() < 2 {
        return Err(Error::UnderDetermined(format!(
            "{} sample(s); run a calibration pass with at least two block counts",
            samples.len()
        )));
    }
    let distinct = |f: fn(&CalibrationSample) -> f64| {
        let first = f(&samples[0]);
        samples.iter().any(|s| f(s) != first)
    };
    let (xs, ys): (Vec<[f64; 2]>, Vec<f64>) = if distinct(|s| s.blocks) {
        samples.iter().map(|s| ([s.data_units, s.blocks], s.time)).unzip()
    } else if distinct(|s| s.data_units) {
        samples.iter().map(|s| ([s.data_units, 1.0], s.time)).unzip()
    } else {
        return Err(Error::UnderDetermined(
            "every sample has the same data size and block count; vary the block size".into(),
        ));
    };
    let (mut a11, mut a12, mut a22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(&ys) {
        a11 += x[0] * x[0];
        a12 += x[0] * x[1];
        a22 += x[1] * x[1];
        b1 += x[0] * y;
        b2 += x[1] * y;
    }
    let det = a11 * a22 - a12 * a12;
    if det.abs() <= 1e-12 * (a11 * a22).abs().max(f64::MIN_POSITIVE) {
        return Err(Error::UnderDetermined(
            "data size and block count are collinear; vary the block size independently".into(),
        ));
    }
    let c = (b1 * a22 - b2 * a12) / det;
    let k = (a11 * b2 - a12 * b1) / det;
    if distinct(|s| s.blocks) {
        Ok(Calibration {
            c,
            t_call: Some(k),
            intercept: None,
        })
    } else {
        Ok(Calibration {
            c,
            t_call: None,
            intercept: Some(k),
        })
    }
}
