use crate::error::{arg_err, shape_err, Result};
use crate::tape::{GradSink, Op};
use crate::{Scalar, Tape, Tensor, Var};

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

/// Running statistics of one batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Scalar> BatchNormStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            momentum: T::of(DEFAULT_BN_MOMENTUM),
            eps: T::of(DEFAULT_BN_EPS),
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn cast<U: Scalar>(&self) -> BatchNormStats<U> {
        let conv = |v: &[T]| v.iter().map(|&x| U::of(x.as_f64())).collect();
        BatchNormStats {
            mean: conv(&self.mean),
            var: conv(&self.var),
            momentum: U::of(self.momentum.as_f64()),
            eps: U::of(self.eps.as_f64()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates.
    Eval,
}

impl<T: Scalar> Tape<T> {
    pub fn batch_norm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats<T>,
        mode: NormMode,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return shape_err("batch_norm2d", format!("expected 4-D input, got {xs:?}"));
        }
        let (batch, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.channels() != c {
            return shape_err("batch_norm2d", format!("affine/statistics do not match {c} channels"));
        }
        let n = batch * hw;
        let train = mode == NormMode::Train;
        if train && n < 2 {
            return arg_err("batch_norm2d", "training mode needs at least two values per channel");
        }
        let x = self.data(input);
        let gam = self.data(gamma);
        let bet = self.data(beta);
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); c];
        let nf = T::of(n as f64);
        for ch in 0..c {
            let plane = |b: usize| (b * c + ch) * hw..(b * c + ch + 1) * hw;
            let (mean, istd) = if train {
                let mut sum = T::zero();
                for b in 0..batch {
                    sum += x[plane(b)].iter().copied().sum();
                }
                let mean = sum / nf;
                let mut sq = T::zero();
                for b in 0..batch {
                    sq += x[plane(b)].iter().map(|&v| (v - mean) * (v - mean)).sum();
                }
                let var = sq / nf;
                let unbiased = sq / T::of((n - 1) as f64);
                let m = stats.momentum;
                stats.mean[ch] = (T::one() - m) * stats.mean[ch] + m * mean;
                stats.var[ch] = (T::one() - m) * stats.var[ch] + m * unbiased;
                (mean, T::one() / (var + stats.eps).sqrt())
            } else {
                (stats.mean[ch], T::one() / (stats.var[ch] + stats.eps).sqrt())
            };
            inv_std[ch] = istd;
            for b in 0..batch {
                for i in plane(b) {
                    let xh = (x[i] - mean) * istd;
                    xhat[i] = xh;
                    out[i] = gam[ch] * xh + bet[ch];
                }
            }
        }
        let value = Tensor::new(&xs, out)?;
        let op = Op::BatchNorm { input, gamma, beta, xhat, inv_std, train };
        Ok(self.push(value, op, &[input, gamma, beta]))
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Scalar>(
    tape: &Tape<T>,
    sink: &mut GradSink<'_, T>,
    g: &[T],
    input: Var,
    gamma: Var,
    beta: Var,
    xhat: &[T],
    inv_std: &[T],
    train: bool,
) {
    let xs = tape.shape(input);
    let (batch, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
    let nf = T::of((batch * hw) as f64);
    let gam = tape.data(gamma);
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for b in 0..batch {
        for ch in 0..c {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            for i in r {
                sum_g[ch] += g[i];
                sum_gx[ch] += g[i] * xhat[i];
            }
        }
    }
    sink.add(gamma, &sum_gx);
    sink.add(beta, &sum_g);
    if !sink.wants(input) {
        return;
    }
    let mut dx = vec![T::zero(); g.len()];
    for b in 0..batch {
        for ch in 0..c {
            let scale = gam[ch] * inv_std[ch];
            for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                dx[i] = if train {
                    scale * (g[i] - sum_g[ch] / nf - xhat[i] * sum_gx[ch] / nf)
                } else {
                    scale * g[i]
                };
            }
        }
    }
    sink.add(input, &dx);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(x: Vec<f64>, gamma: f64, beta: f64) -> Vec<f64> {
        let n = x.len();
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(Tensor::new(&[1, 1, 1, n], x).unwrap());
        let g = tape.constant(Tensor::full(&[1], gamma));
        let b = tape.constant(Tensor::full(&[1], beta));
        let mut stats = BatchNormStats::new(1);
        let y = tape.batch_norm2d(xv, g, b, &mut stats, NormMode::Train).unwrap();
        tape.data(y).to_vec()
    }

    #[test]
    fn unit_variance_passthrough() {
        let y = run(vec![-1.0, 1.0], 1.0, 0.0);
        assert!((y[0] + 1.0).abs() < 1e-5 && (y[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let y = run(vec![3.0, -7.0, 0.5, 2.0], 0.0, 0.25);
        assert!(y.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn constant_channel_stays_finite() {
        let y = run(vec![4.0; 6], 1.0, 0.0);
        assert!(y.iter().all(|v| v.is_finite() && v.abs() < 1e-9));
    }

    #[test]
    fn running_stats_follow_ema() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&[2, 1, 1, 1], vec![1.0, 3.0]).unwrap());
        let g = tape.constant(Tensor::full(&[1], 1.0));
        let b = tape.constant(Tensor::full(&[1], 0.0));
        let mut stats = BatchNormStats::new(1);
        tape.batch_norm2d(x, g, b, &mut stats, NormMode::Train).unwrap();
        assert!((stats.mean[0] - 0.2).abs() < 1e-12);
        // unbiased variance of {1, 3} is 2
        assert!((stats.var[0] - (0.9 + 0.2)).abs() < 1e-12);
        let y = tape.batch_norm2d(x, g, b, &mut stats, NormMode::Eval).unwrap();
        let expect = (1.0 - 0.2) / (1.1f64 + 1e-5).sqrt();
        assert!((tape.data(y)[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn train_mode_needs_two_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 1, 1]));
        let g = tape.constant(Tensor::full(&[1], 1.0));
        let b = tape.constant(Tensor::full(&[1], 0.0));
        let mut stats = BatchNormStats::new(1);
        assert!(tape.batch_norm2d(x, g, b, &mut stats, NormMode::Train).is_err());
        assert!(tape.batch_norm2d(x, g, b, &mut stats, NormMode::Eval).is_ok());
    }
}
