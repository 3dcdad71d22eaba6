//! Central-difference gradient checking for tape graphs.
//!
//! Checks always run in `f64`: the numeric step is `1e-4` and the acceptance
//! rule is `|a - n| <= max(1e-6, 1e-3 * max(|a|, |n|))`, i.e. relative error
//! at most 1e-3 with an absolute floor of 1e-6 for near-zero gradients.
//! Second-order central-difference error at this step is ~1e-8 of scale, so a
//! correct adjoint passes with two orders of margin while a wrong one fails.
//!
//! Graphs with ReLU or maxpool are piecewise smooth: when an activation sits
//! within the probe window of its kink, the difference quotient mixes two
//! linear pieces and disagrees with the (correct) one-sided adjoint. Entries
//! that fail at the base step are therefore retried at `STEP / 16`; a kink
//! inside the base window converges away, while a wrong adjoint keeps failing
//! at every step size.

use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::tape::{Tape, VarId};

/// Numeric step for central differences.
pub const STEP: f64 = 1e-4;
/// Relative tolerance.
pub const TOL_REL: f64 = 1e-3;
/// Absolute floor below which differences are ignored.
pub const TOL_ABS: f64 = 1e-6;

/// Acceptance rule for one analytic/numeric gradient pair.
pub fn tolerance_ok(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= TOL_ABS.max(TOL_REL * analytic.abs().max(numeric.abs()))
}

/// Worst offending entry of a failed check.
#[derive(Debug, Clone)]
pub struct Mismatch {
    pub input: usize,
    pub flat_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Outcome of a gradient check run.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Reduces an arbitrary-shaped node to a scalar through a fixed pseudo-random
/// weighting, so that every output element influences the check.
pub fn weighted_scalar(t: &mut Tape<f64>, out: VarId, seed: u64) -> VarId {
    let shape: Vec<usize> = t.value(out).shape().to_vec();
    let n: usize = shape.iter().product();
    let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
    let mut next = move || {
        state ^= state >> 27;
        state = state.wrapping_mul(0x2545F4914F6CDD1D);
        0.5 + (state >> 11) as f64 / (1u64 << 53) as f64
    };
    let w: Vec<f64> = (0..n).map(|_| next()).collect();
    let wleaf = t.leaf(ArrayD::from_shape_vec(ndarray::IxDyn(&shape), w).unwrap());
    let prod = t.mul(out, wleaf);
    t.sum_all(prod)
}

fn eval(build: &impl Fn(&mut Tape<f64>, &[VarId]) -> VarId, inputs: &[ArrayD<f64>]) -> f64 {
    let mut t = Tape::<f64>::new();
    let ids: Vec<VarId> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
    let out = build(&mut t, &ids);
    t.scalar(out)
}

fn central(
    build: &impl Fn(&mut Tape<f64>, &[VarId]) -> VarId,
    work: &mut [ArrayD<f64>],
    i: usize,
    j: usize,
    orig: f64,
    h: f64,
) -> f64 {
    work[i].as_slice_mut().unwrap()[j] = orig + h;
    let fp = eval(build, work);
    work[i].as_slice_mut().unwrap()[j] = orig - h;
    let fm = eval(build, work);
    work[i].as_slice_mut().unwrap()[j] = orig;
    (fp - fm) / (2.0 * h)
}

/// Checks analytic gradients of `build` (which must return a scalar node)
/// against central differences. `samples_per_input` limits how many elements
/// of each input are probed (`None` = all), drawn deterministically from
/// `seed`.
pub fn run_check(
    inputs: &[ArrayD<f64>],
    build: impl Fn(&mut Tape<f64>, &[VarId]) -> VarId,
    samples_per_input: Option<usize>,
    seed: u64,
) -> GradCheckReport {
    let analytic: Vec<ArrayD<f64>> = {
        let mut t = Tape::<f64>::new();
        let ids: Vec<VarId> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
        let out = build(&mut t, &ids);
        let mut grads = t.backward(out);
        ids.iter()
            .zip(inputs)
            .map(|(&id, x)| {
                grads
                    .take(id)
                    .map(|g| g.as_standard_layout().into_owned())
                    .unwrap_or_else(|| ArrayD::zeros(x.raw_dim()))
            })
            .collect()
    };

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, failures: Vec::new() };
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();

    for i in 0..inputs.len() {
        let n = inputs[i].len();
        if n == 0 {
            continue;
        }
        let indices: Vec<usize> = match samples_per_input {
            Some(k) if k < n => {
                let mut idx: Vec<usize> = (0..k).map(|_| rng.gen_range(0..n)).collect();
                idx.sort_unstable();
                idx.dedup();
                idx
            }
            _ => (0..n).collect(),
        };
        for j in indices {
            let orig = inputs[i].as_slice().expect("standard layout")[j];
            let a = analytic[i].as_slice().unwrap()[j];
            let mut numeric = central(&build, &mut work, i, j, orig, STEP);
            if !tolerance_ok(a, numeric) {
                // retry with a refined step to rule a kink out (see module doc)
                let refined = central(&build, &mut work, i, j, orig, STEP / 16.0);
                if tolerance_ok(a, refined) {
                    numeric = refined;
                }
            }
            report.checked += 1;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            if rel > report.max_rel_err && (a - numeric).abs() > TOL_ABS {
                report.max_rel_err = rel;
            }
            if !tolerance_ok(a, numeric) && report.failures.len() < 16 {
                report.failures.push(Mismatch { input: i, flat_index: j, analytic: a, numeric });
            }
        }
    }
    report
}

/// Exhaustive check over every input element; panics with context on failure.
/// Intended for op-level unit tests.
pub fn check_all(inputs: &[ArrayD<f64>], build: impl Fn(&mut Tape<f64>, &[VarId]) -> VarId) {
    let report = run_check(inputs, build, None, 0);
    assert!(
        report.passed(),
        "gradient check failed ({} of {} entries), worst: {:?}",
        report.failures.len(),
        report.checked,
        report.failures.first()
    );
}
