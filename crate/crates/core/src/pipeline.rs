//! Three-stage pipeline cost model, block-size selection and buffer-role
//! rotation.
//!
//! A node's work of `d` triplets is cut into `s` blocks of `b = d / s`.
//! Each block is downloaded (`k1·b`), computed (`a + k2·b`, where `a` is the
//! fixed device-call cost) and uploaded (`k3·b`). With three rotating buffers
//! the three stages of consecutive blocks overlap, so the pass costs
//!
//! ```text
//! T(s) = k1·b + max(k1·b, a+k2·b) + (s-2)·max(k1·b, a+k2·b, k3·b)
//!      + max(a+k2·b, k3·b) + k3·b
//! ```
//!
//! Small blocks pay the call cost many times, large blocks leave the stages
//! idle at the ends, and [`optimal_block_size`] gives the minimizer in closed
//! form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::region::SharedRegion;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineCostModel {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub a: f64,
    pub d: u64,
}

impl PipelineCostModel {
    pub fn new(k1: f64, k2: f64, k3: f64, a: f64, d: u64) -> Result<Self> {
        let m = PipelineCostModel { k1, k2, k3, a, d };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, k) in [("k1", self.k1), ("k2", self.k2), ("k3", self.k3)] {
            if !(k.is_finite() && k > 0.0) {
                return Err(Error::CostModel(format!("{name} must be finite and > 0, got {k}")));
            }
        }
        if !(self.a.is_finite() && self.a >= 0.0) {
            return Err(Error::CostModel(format!("a must be finite and >= 0, got {}", self.a)));
        }
        if self.d == 0 {
            return Err(Error::CostModel("d must be at least 1".into()));
        }
        Ok(())
    }

    /// `sqrt(a·d / (k1 + k3))`.
    pub fn q(&self) -> f64 {
        (self.a * self.d as f64 / (self.k1 + self.k3)).sqrt()
    }
}

/// Pass time for `s` equal blocks. The formula is evaluated as written for
/// every `s`, including `s = 1` where the `(s-2)` factor is negative.
pub fn total_time(model: &PipelineCostModel, s: u64) -> Result<f64> {
    if s < 1 || s > model.d {
        return Err(Error::CostModel(format!(
            "block count {s} outside [1, {}]",
            model.d
        )));
    }
    Ok(total_time_unchecked(model, s as f64))
}

pub(crate) fn total_time_unchecked(m: &PipelineCostModel, s: f64) -> f64 {
    let b = m.d as f64 / s;
    let tn = m.k1 * b;
    let tc = m.a + m.k2 * b;
    let tu = m.k3 * b;
    tn + tn.max(tc) + (s - 2.0) * tn.max(tc).max(tu) + tc.max(tu) + tu
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimumCase {
    /// Download dominates: `b = a / (k1 - k2)`.
    DownloadBound,
    /// Upload dominates: `b = a / (k3 - k2)`.
    UploadBound,
    /// `b = sqrt(a·d / (k1 + k3))`.
    Balanced,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockOptimum {
    pub b_opt: f64,
    pub t_min: f64,
    pub case: OptimumCase,
}

/// Closed-form real-valued optimum of [`total_time`] over the block size.
///
/// When `a = 0` and compute dominates every block size is equally good up to
/// lower-order terms, so there is no interior optimum and the caller should
/// sweep integer block counts instead.
pub fn optimal_block_size(model: &PipelineCostModel) -> Result<BlockOptimum> {
    model.validate()?;
    let PipelineCostModel { k1, k2, k3, a, d } = *model;
    let d = d as f64;
    if a == 0.0 && k2 >= k1.max(k3) {
        return Err(Error::NoInteriorOptimum);
    }
    let q = model.q();
    // `<=` rather than `<`: the two sides agree at the boundary when a > 0,
    // and with a = 0 only the transfer-bound branch gives the right limit.
    if k1 > k2 && k1 > k3 && a / (k1 - k2) <= q {
        let b = a / (k1 - k2);
        return Ok(BlockOptimum {
            b_opt: b,
            t_min: a * (k1 + k3) / (k1 - k2) + k1 * d,
            case: OptimumCase::DownloadBound,
        });
    }
    if k3 > k1 && k3 > k2 && a / (k3 - k2) <= q {
        let b = a / (k3 - k2);
        return Ok(BlockOptimum {
            b_opt: b,
            t_min: a * (k1 + k3) / (k3 - k2) + k3 * d,
            case: OptimumCase::UploadBound,
        });
    }
    Ok(BlockOptimum {
        b_opt: q,
        t_min: k2 * d + 2.0 * ((k1 + k3) * a * d).sqrt(),
        case: OptimumCase::Balanced,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Integerized {
    pub s: u64,
    pub b: u64,
}

/// Picks the better of the two integer block counts around `d / b_opt`.
/// Non-positive `b_opt` is treated as "as small as possible" (`s = d`).
pub fn integerize(model: &PipelineCostModel, b_opt: f64) -> Integerized {
    let d = model.d;
    let clamp = |x: f64| -> u64 {
        if !x.is_finite() || x >= d as f64 {
            d
        } else if x < 1.0 {
            1
        } else {
            x as u64
        }
    };
    let (lo, hi) = if b_opt > 0.0 {
        let r = d as f64 / b_opt;
        (clamp(r.floor()), clamp(r.ceil()))
    } else {
        (d, d)
    };
    let s = if lo == hi || total_time_unchecked(model, lo as f64) <= total_time_unchecked(model, hi as f64) {
        lo
    } else {
        hi
    };
    Integerized {
        s,
        b: d.div_ceil(s),
    }
}

/// Exhaustive minimization over integer `s` in `[1, d]`. Ties keep the
/// smaller `s`.
pub fn sweep(model: &PipelineCostModel) -> (u64, f64) {
    let mut best = (1, total_time_unchecked(model, 1.0));
    for s in 2..=model.d {
        let t = total_time_unchecked(model, s as f64);
        if t < best.1 {
            best = (s, t);
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMethod {
    ClosedForm,
    Sweep,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockPlan {
    pub b_opt: Option<f64>,
    pub s: u64,
    pub b: u64,
    pub t: f64,
    pub method: PlanMethod,
}

/// Closed form plus integerization, with a sweep when there is no interior
/// optimum.
pub fn plan(model: &PipelineCostModel) -> Result<BlockPlan> {
    match optimal_block_size(model) {
        Ok(opt) => {
            let Integerized { s, b } = integerize(model, opt.b_opt);
            Ok(BlockPlan {
                b_opt: Some(opt.b_opt),
                s,
                b,
                t: total_time_unchecked(model, s as f64),
                method: PlanMethod::ClosedForm,
            })
        }
        Err(Error::NoInteriorOptimum) => {
            let (s, t) = sweep(model);
            Ok(BlockPlan {
                b_opt: None,
                s,
                b: model.d.div_ceil(s),
                t,
                method: PlanMethod::Sweep,
            })
        }
        Err(e) => Err(e),
    }
}

/// Cost of one block in each stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub download: f64,
    pub compute: f64,
    pub upload: f64,
}

/// Time of a pass driven through three rotating buffers. After each rotation
/// block `k` computes while block `k-1` uploads and block `k+1` downloads;
/// the cycle lasts as long as its slowest stage. The first download happens
/// before the first rotation.
pub fn pipeline_schedule_time(blocks: &[StageCost]) -> f64 {
    let Some(first) = blocks.first() else {
        return 0.0;
    };
    let mut t = first.download;
    for k in 0..=blocks.len() {
        let compute = blocks.get(k).map_or(0.0, |b| b.compute);
        let upload = if k >= 1 { blocks[k - 1].upload } else { 0.0 };
        let download = blocks.get(k + 1).map_or(0.0, |b| b.download);
        t += compute.max(upload).max(download);
    }
    t
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    New,
    Compute,
    Upload,
}

const ROLE_ORDER: [Role; 3] = [Role::New, Role::Compute, Role::Upload];

/// Role assignment of the three buffers after `cycle_count` rotations.
/// Buffer `i` starts with role `[New, Compute, Upload][i]` and every rotation
/// moves each buffer one step along New -> Compute -> Upload -> New.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RotationState {
    pub cycle_count: u64,
}

impl RotationState {
    pub fn role_of(&self, buffer: usize) -> Role {
        ROLE_ORDER[(buffer + (self.cycle_count % 3) as usize) % 3]
    }

    pub fn buffer_of(&self, role: Role) -> usize {
        let r = ROLE_ORDER.iter().position(|&x| x == role).unwrap_or(0);
        (r + 3 - (self.cycle_count % 3) as usize) % 3
    }

    pub fn roles(&self) -> [Role; 3] {
        [self.role_of(0), self.role_of(1), self.role_of(2)]
    }

    pub fn advance(&mut self) {
        self.cycle_count += 1;
    }
}

/// Advances the region's role labels by one step. Buffer contents are not
/// touched.
pub fn rotate(region: &SharedRegion) {
    region.advance_rotation();
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Straight transcription of the pass-time formula, kept separate from
    /// the library version.
    fn oracle(k1: f64, k2: f64, k3: f64, a: f64, d: f64, s: f64) -> f64 {
        let b = d / s;
        let n = k1 * b;
        let c = a + k2 * b;
        let u = k3 * b;
        let mid = [n, c, u].into_iter().fold(f64::MIN, f64::max);
        n + if n > c { n } else { c } + (s - 2.0) * mid + if c > u { c } else { u } + u
    }

    #[test]
    fn unit_coefficients_give_d_plus_two() {
        let m = PipelineCostModel::new(1.0, 1.0, 1.0, 0.0, 50).unwrap();
        assert_eq!(total_time(&m, 50).unwrap(), 52.0);
    }

    #[test]
    fn two_blocks_drop_the_middle_term() {
        let m = PipelineCostModel::new(0.1, 2.0, 0.1, 5.0, 100).unwrap();
        let b = 50.0;
        let expected = 0.1 * b + (5.0 + 2.0 * b) + (5.0 + 2.0 * b) + 0.1 * b;
        assert!((total_time(&m, 2).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn paper_sssp_coefficients_at_s_100() {
        let m = PipelineCostModel::new(0.03, 0.51, 0.09, 84671.0, 1_000_000).unwrap();
        let t = total_time(&m, 100).unwrap();
        let o = oracle(0.03, 0.51, 0.09, 84671.0, 1e6, 100.0);
        assert!((t - o).abs() <= 1e-9 * o);
        // Compute dominates: (k1+k3)·b + s·(a + k2·b).
        let closed = 0.12 * 1e4 + 100.0 * (84671.0 + 0.51 * 1e4);
        assert!((t - closed).abs() <= 1e-6 * closed);
    }

    #[test]
    fn rejects_out_of_range_block_counts() {
        let m = PipelineCostModel::new(1.0, 1.0, 1.0, 1.0, 10).unwrap();
        assert!(total_time(&m, 0).is_err());
        assert!(total_time(&m, 11).is_err());
        assert!(PipelineCostModel::new(0.0, 1.0, 1.0, 1.0, 10).is_err());
        assert!(PipelineCostModel::new(1.0, 1.0, 1.0, -1.0, 10).is_err());
        assert!(PipelineCostModel::new(1.0, 1.0, 1.0, 1.0, 0).is_err());
    }

    #[test]
    fn pagerank_coefficients_take_the_balanced_branch() {
        let m = PipelineCostModel::new(0.02, 0.58, 0.1, 1970.0, 1_000_000).unwrap();
        let o = optimal_block_size(&m).unwrap();
        assert_eq!(o.case, OptimumCase::Balanced);
        assert!((o.b_opt - (1970.0e6f64 / 0.12).sqrt()).abs() < 1e-9);
        let expected = 0.58e6 + 2.0 * (0.12f64 * 1970.0 * 1e6).sqrt();
        assert!((o.t_min - expected).abs() < 1e-6);
    }

    #[test]
    fn download_bound_example() {
        let m = PipelineCostModel::new(3.0, 1.0, 1.0, 2.0, 100).unwrap();
        let o = optimal_block_size(&m).unwrap();
        assert_eq!(o.case, OptimumCase::DownloadBound);
        assert_eq!(o.b_opt, 1.0);
        assert_eq!(o.t_min, 304.0);
        let (s, t) = sweep(&m);
        assert_eq!(s, 100);
        assert!((t - 304.0).abs() < 1e-9, "brute force {t}");
    }

    #[test]
    fn symmetric_transfer_costs_take_q() {
        let m = PipelineCostModel::new(0.5, 1.0, 0.5, 10.0, 1000).unwrap();
        let o = optimal_block_size(&m).unwrap();
        assert_eq!(o.b_opt, m.q());

        // Tie for the maximum between k1 and k3 also falls through to Q.
        let m = PipelineCostModel::new(2.0, 1.0, 2.0, 10.0, 1000).unwrap();
        assert_eq!(optimal_block_size(&m).unwrap().case, OptimumCase::Balanced);
    }

    #[test]
    fn degenerate_compute_bound_without_call_cost() {
        let m = PipelineCostModel::new(0.1, 1.0, 0.1, 0.0, 100).unwrap();
        assert!(matches!(optimal_block_size(&m), Err(Error::NoInteriorOptimum)));
        let p = plan(&m).unwrap();
        assert_eq!(p.method, PlanMethod::Sweep);
        assert_eq!(p.t, sweep(&m).1);
    }

    #[test]
    fn zero_call_cost_download_bound_uses_every_block() {
        let m = PipelineCostModel::new(2.0, 1.0, 0.5, 0.0, 40).unwrap();
        let p = plan(&m).unwrap();
        assert_eq!(p.s, 40);
        assert_eq!(p.b, 1);
    }

    #[test]
    fn integerize_examples() {
        let m = PipelineCostModel::new(0.5, 1.0, 0.5, 50.0, 100).unwrap();
        let i = integerize(&m, 7.07);
        let t14 = total_time(&m, 14).unwrap();
        let t15 = total_time(&m, 15).unwrap();
        assert_eq!(i.s, if t14 <= t15 { 14 } else { 15 });
        assert_eq!(i.b, 100u64.div_ceil(i.s));

        assert_eq!(integerize(&m, 1e9), Integerized { s: 1, b: 100 });
        let one = PipelineCostModel::new(1.0, 1.0, 1.0, 1.0, 1).unwrap();
        assert_eq!(integerize(&one, 0.3), Integerized { s: 1, b: 1 });
    }

    #[test]
    fn schedule_matches_formula_for_equal_blocks() {
        for (k1, k2, k3, a) in [(1.0, 2.0, 0.5, 3.0), (3.0, 1.0, 1.0, 2.0), (0.1, 0.1, 4.0, 0.0)] {
            for s in 2..12u64 {
                let b = 6.0;
                let blocks = vec![
                    StageCost {
                        download: k1 * b,
                        compute: a + k2 * b,
                        upload: k3 * b,
                    };
                    s as usize
                ];
                let m = PipelineCostModel::new(k1, k2, k3, a, s * 6).unwrap();
                let f = total_time(&m, s).unwrap();
                assert!((pipeline_schedule_time(&blocks) - f).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_block_schedule_is_sequential() {
        let c = StageCost {
            download: 1.0,
            compute: 5.0,
            upload: 2.0,
        };
        assert_eq!(pipeline_schedule_time(&[c]), 8.0);
        assert_eq!(pipeline_schedule_time(&[]), 0.0);
    }

    #[test]
    fn rotation_walks_the_three_cycle() {
        let mut r = RotationState::default();
        assert_eq!(r.roles(), [Role::New, Role::Compute, Role::Upload]);
        r.advance();
        assert_eq!(r.roles(), [Role::Compute, Role::Upload, Role::New]);
        r.advance();
        r.advance();
        assert_eq!(r.roles(), [Role::New, Role::Compute, Role::Upload]);
        for c in 0..9 {
            let r = RotationState { cycle_count: c };
            for role in [Role::New, Role::Compute, Role::Upload] {
                assert_eq!(r.role_of(r.buffer_of(role)), role);
            }
        }
    }

    proptest! {
        #[test]
        fn total_time_matches_independent_evaluator(
            k1 in 0.001f64..2.0, k2 in 0.001f64..2.0, k3 in 0.001f64..2.0,
            a in 0.0f64..1e5, d in 1u64..100_000, frac in 0.0f64..1.0,
        ) {
            let m = PipelineCostModel::new(k1, k2, k3, a, d).unwrap();
            let s = 1 + ((d - 1) as f64 * frac) as u64;
            let t = total_time(&m, s).unwrap();
            let o = oracle(k1, k2, k3, a, d as f64, s as f64);
            prop_assert!((t - o).abs() <= 1e-9 * o.abs().max(1.0));
        }

        #[test]
        fn roles_stay_a_permutation(c in 0u64..1000) {
            let mut roles = RotationState { cycle_count: c }.roles().to_vec();
            roles.sort();
            prop_assert_eq!(roles, vec![Role::New, Role::Compute, Role::Upload]);
        }
    }
}
