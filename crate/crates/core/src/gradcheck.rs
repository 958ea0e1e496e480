//! Central-difference gradient verification.

use rand::seq::index::sample;

use crate::rng;
use crate::tensor::{Tape, Tensor, Var};
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub param: usize,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate with its (autodiff, numeric) pair.
    pub worst: Option<(usize, f64, f64)>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many coordinates per parameter, sampled without
    /// replacement. `None` checks every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences `(f(θ + h·e) - f(θ - h·e)) / 2h`.
///
/// `f` receives a fresh tape and the parameters registered on it, and must
/// return a 1×1 var.
pub fn grad_check<F>(f: F, params: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.param(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|v| tape.param(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = Vec::with_capacity(params.len());
    for (p, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        let n = params[p].len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => {
                let mut r = rng::stream(opts.seed, &[p as u64]);
                let mut c = sample(&mut r, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut max_err = 0.0f64;
        let mut worst = None;
        for &k in &coords {
            let orig = work[p].data()[k];
            work[p].data_mut()[k] = orig + opts.step;
            let plus = eval(&work)?;
            work[p].data_mut()[k] = orig - opts.step;
            let minus = eval(&work)?;
            work[p].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let ad = analytic.data()[k];
            let err = relative_error(ad, numeric);
            if err > max_err || worst.is_none() {
                max_err = max_err.max(err);
                worst = Some((k, ad, numeric));
            }
        }
        report.push(ParamCheck {
            param: p,
            coords_checked: coords.len(),
            max_rel_error: max_err,
            worst,
            passed: max_err < opts.tolerance,
        });
    }
    Ok(GradCheckReport { params: report })
}
