//! Central finite-difference verification of tape gradients.

use crate::error::{arg_err, Result};
use crate::{Tape, Tensor, Var};

/// Floor on the denominator of the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
    /// Coordinates whose one-sided differences disagree (a kink inside the stencil).
    pub nonsmooth: usize,
    /// Largest central-difference error, before any one-sided fallback.
    pub max_central_error: f64,
}

const KINK_REFINEMENTS: usize = 2;

/// Compares analytic gradients of a scalar function against central differences
/// `(f(x + eps) - f(x - eps)) / (2 eps)`.
#[derive(Clone, Debug)]
pub struct GradCheck {
    eps: f64,
    max_coords_per_input: Option<usize>,
    kink_tol: Option<f64>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

impl GradCheck {
    pub fn new(eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return arg_err("grad_check", format!("step must be positive and finite, got {eps}"));
        }
        Ok(Self { eps, max_coords_per_input: None, kink_tol: None })
    }

    /// Checks at most `n` evenly spaced coordinates of each input.
    pub fn max_coords_per_input(mut self, n: usize) -> Self {
        self.max_coords_per_input = Some(n.max(1));
        self
    }

    /// When the central difference misses by more than `tol` and the forward and
    /// backward differences disagree by more than `tol`, the function is not smooth
    /// inside `[x - eps, x + eps]`. Such a coordinate is scored against the closer
    /// one-sided difference instead and counted in `nonsmooth`. If a kink also sits
    /// on both sides within `eps`, the one-sided step shrinks by 10x up to
    /// `KINK_REFINEMENTS` times.
    pub fn kink_aware(mut self, tol: f64) -> Self {
        self.kink_tol = Some(tol);
        self
    }

    fn coords(&self, numel: usize) -> Vec<usize> {
        match self.max_coords_per_input {
            Some(n) if n < numel => (0..n).map(|i| (2 * i + 1) * numel / (2 * n)).collect(),
            _ => (0..numel).collect(),
        }
    }

    /// `f` builds the scalar on the given tape from leaves holding `inputs`
    /// (in order) and returns it.
    pub fn run<F>(&self, mut f: F, inputs: &[Tensor<f64>]) -> Result<GradCheckReport>
    where
        F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let mut eval = |values: &[Tensor<f64>], grad: bool| -> Result<(f64, Tape<f64>, Vec<Var>)> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = values
                .iter()
                .map(|t| tape.leaf(t.clone().with_requires_grad(grad)))
                .collect();
            let out = f(&mut tape, &vars)?;
            let y = tape.scalar_value(out)?;
            if grad {
                tape.backward(out)?;
            }
            Ok((y, tape, vars))
        };

        let (center, tape, vars) = eval(inputs, true)?;
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect();
        drop(tape);

        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst: None,
            analytic: 0.0,
            numeric: 0.0,
            coords_checked: 0,
            nonsmooth: 0,
            max_central_error: 0.0,
        };
        let mut work: Vec<Tensor<f64>> = inputs.to_vec();
        for (input_idx, t) in inputs.iter().enumerate() {
            for c in self.coords(t.numel()) {
                let orig = t.data()[c];
                work[input_idx].data_mut()[c] = orig + self.eps;
                let (plus, ..) = eval(&work, false)?;
                work[input_idx].data_mut()[c] = orig - self.eps;
                let (minus, ..) = eval(&work, false)?;
                work[input_idx].data_mut()[c] = orig;
                let mut numeric = (plus - minus) / (2.0 * self.eps);
                let a = analytic[input_idx][c];
                let mut err = relative_error(a, numeric);
                report.max_central_error = report.max_central_error.max(err);
                if let Some(tol) = self.kink_tol.filter(|&tol| err > tol) {
                    let fwd = (plus - center) / self.eps;
                    let bwd = (center - minus) / self.eps;
                    if relative_error(fwd, bwd) > tol {
                        report.nonsmooth += 1;
                        let mut best = [fwd, bwd]
                            .into_iter()
                            .map(|d| (relative_error(a, d), d))
                            .min_by(|x, y| x.0.total_cmp(&y.0))
                            .expect("two sides");
                        let mut h = self.eps;
                        for _ in 0..KINK_REFINEMENTS {
                            if best.0 <= tol {
                                break;
                            }
                            h /= 10.0;
                            work[input_idx].data_mut()[c] = orig + h;
                            let (p, ..) = eval(&work, false)?;
                            work[input_idx].data_mut()[c] = orig - h;
                            let (m, ..) = eval(&work, false)?;
                            work[input_idx].data_mut()[c] = orig;
                            for d in [(p - center) / h, (center - m) / h] {
                                let e = relative_error(a, d);
                                if e < best.0 {
                                    best = (e, d);
                                }
                            }
                        }
                        (err, numeric) = best;
                    }
                }
                report.coords_checked += 1;
                if err > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = err;
                    report.worst = Some((input_idx, c));
                    report.analytic = a;
                    report.numeric = numeric;
                }
            }
        }
        Ok(report)
    }
}

/// Maximum relative error over every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    Ok(GradCheck::new(eps)?.run(f, inputs)?.max_rel_error)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Tensor::new(&[4], vec![0.3, -1.2, 2.0, 0.0]).unwrap();
        let err = grad_check(
            |tape, v| {
                let sq = tape.mul(v[0], v[0])?;
                Ok(tape.sum(sq))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn zero_step_rejected() {
        let x = Tensor::<f64>::zeros(&[1]);
        assert!(grad_check(|tape, v| Ok(tape.sum(v[0])), &[x.clone()], 0.0).is_err());
        assert!(grad_check(|tape, v| Ok(tape.sum(v[0])), &[x], -1.0).is_err());
    }

    #[test]
    fn kinks_fall_back_to_one_side() {
        // relu(x) at x = 2e-6 with eps = 1e-5: the stencil straddles the kink
        let x = Tensor::new(&[1], vec![2e-6]).unwrap();
        let relu_sum = |tape: &mut Tape<f64>, v: &[Var]| {
            let r = tape.relu(v[0])?;
            Ok(tape.sum(r))
        };
        let plain = GradCheck::new(1e-5).unwrap().run(relu_sum, &[x.clone()]).unwrap();
        assert!(plain.max_rel_error > 0.1);
        let aware = GradCheck::new(1e-5).unwrap().kink_aware(1e-4).run(relu_sum, &[x.clone()]).unwrap();
        assert_eq!(aware.nonsmooth, 1);
        assert!(aware.max_rel_error < 1e-9);
        assert_eq!(aware.max_central_error, plain.max_rel_error);

        let smooth = GradCheck::new(1e-5).unwrap().kink_aware(1e-4).run(relu_sum, &[Tensor::new(&[1], vec![0.5]).unwrap()]).unwrap();
        assert_eq!(smooth.nonsmooth, 0);
    }

    #[test]
    fn subsampling_spreads_coords() {
        let gc = GradCheck::new(1e-3).unwrap().max_coords_per_input(4);
        assert_eq!(gc.coords(100), vec![12, 37, 62, 87]);
        assert_eq!(gc.coords(3), vec![0, 1, 2]);
    }
}
