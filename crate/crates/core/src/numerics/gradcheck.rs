//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for relative errors, so that gradients which are zero
/// analytically are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Which coordinates of each input tensor to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    /// At most `per_tensor` coordinates per input, drawn with `seed`.
    Sample { per_tensor: usize, seed: u64 },
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares the tape gradient of `f` with central differences of step `h` at
/// the chosen coordinates of `inputs`.
///
/// Perturbed evaluations run on a replaying tape, so any stop-gradient or
/// straight-through values recorded by the base evaluation are held fixed.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], coords: Coords, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Input("finite-difference step must be positive".into()));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.grad(loss, &vars)?;
    let frozen = tape.take_detached();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::replaying(frozen.clone());
        let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.value(l).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(match coords {
        Coords::Sample { seed, .. } => seed,
        Coords::All => 0,
    });
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let picks: Vec<usize> = match coords {
            Coords::All => (0..n).collect(),
            Coords::Sample { per_tensor, .. } if per_tensor >= n => (0..n).collect(),
            Coords::Sample { per_tensor, .. } => {
                let mut v = sample(&mut rng, n, per_tensor).into_vec();
                v.sort_unstable();
                v
            }
        };
        for j in picks {
            let x0 = input.data()[j];
            work[ti].data_mut()[j] = x0 + h;
            let fp = eval(&work)?;
            work[ti].data_mut()[j] = x0 - h;
            let fm = eval(&work)?;
            work[ti].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = grads[ti].data()[j];
            let e = rel_error(analytic, numeric);
            report.checked += 1;
            if e > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = e;
                report.worst = Some((ti, j));
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Maximum relative error between the tape gradient of scalar function `f`
/// and its central-difference estimate at `x`, over every coordinate.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report = check_gradients(|t, vs| f(t, vs[0]), std::slice::from_ref(x), Coords::All, h)?;
    Ok(report.max_rel_error)
}
