//! Central finite-difference gradient checks for tape programs.
//!
//! The program is rebuilt from scratch for every perturbed input, so the
//! numerical side never touches the backward rules it is checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Relative tolerance for gradient entries.
pub const REL_TOL: f64 = 1e-3;
/// Relative tolerance applied where the analytic entry is below [`SMALL_GRAD`].
pub const REL_TOL_SMALL: f64 = 1e-2;
pub const SMALL_GRAD: f64 = 1e-4;
/// Differences below this are treated as both sides being zero.
pub const ZERO_FLOOR: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct GradReport {
    /// Worst relative error over all checked entries.
    pub max_rel_err: f64,
    /// `(input, element, analytic, numeric)` of the worst entry.
    pub worst: (usize, usize, f64, f64),
    pub failures: usize,
    pub checked: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

fn entry_ok(analytic: f64, numeric: f64) -> (bool, f64) {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    let rel = if scale > 0.0 { diff / scale } else { 0.0 };
    let tol = if analytic.abs() < SMALL_GRAD {
        REL_TOL_SMALL
    } else {
        REL_TOL
    };
    (
        diff <= ZERO_FLOOR || rel <= tol,
        if diff <= ZERO_FLOOR { 0.0 } else { rel },
    )
}

/// Checks `build` (which maps leaf vars to an output of any shape) by
/// contracting its output with fixed random weights into a scalar.
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    step: f64,
    seed: u64,
    build: F,
) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = |tape: &mut Tape<f64>, leaves: &[Var]| -> Result<Var> { build(tape, leaves) };

    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = probe(&mut tape, &leaves)?;
    let shape = tape.value(out).shape().to_vec();
    let weights = Tensor::<f64>::from_fn(shape, |_| {
        let m: f64 = rng.random_range(0.5..1.5);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    });

    let contract = |tape: &mut Tape<f64>, out: Var| -> Result<Var> {
        let w = tape.leaf(weights.clone());
        let prod = tape.mul(out, w)?;
        Ok(tape.sum(prod))
    };

    let loss = contract(&mut tape, out)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = probe(&mut tape, &leaves)?;
        let loss = contract(&mut tape, out)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: (0, 0, 0.0, 0.0),
        failures: 0,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.numel() {
            let x = input.data()[ei];
            work[ti].data_mut()[ei] = x + step;
            let plus = eval(&work)?;
            work[ti].data_mut()[ei] = x - step;
            let minus = eval(&work)?;
            work[ti].data_mut()[ei] = x;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[ti][ei];
            let (ok, rel) = entry_ok(a, numeric);
            report.checked += 1;
            if !ok {
                report.failures += 1;
            }
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (ti, ei, a, numeric);
            }
        }
    }
    Ok(report)
}
