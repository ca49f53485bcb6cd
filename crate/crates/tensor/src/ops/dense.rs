use crate::error::{arg_err, shape_err, Result};
use crate::tape::{GradSink, Op};
use crate::{Scalar, Tape, Tensor, Var};

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

impl<T: Scalar> Tape<T> {
    /// `input[B,F] * weight[O,F]^T + bias[O]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        let (&[b, f], &[o, wf]) = (xs, ws) else {
            return shape_err("linear", format!("expected 2-D input and weight, got {xs:?}, {ws:?}"));
        };
        if wf != f || bs != [o] {
            return shape_err("linear", format!("input {xs:?}, weight {ws:?}, bias {bs:?}"));
        }
        let mut out = vec![T::zero(); b * o];
        for row in out.chunks_mut(o) {
            row.copy_from_slice(self.data(bias));
        }
        T::gemm(b, f, o, T::one(), self.data(input), (f as isize, 1), self.data(weight), (1, f as isize), T::one(), &mut out, (o as isize, 1));
        let value = Tensor::new(&[b, o], out)?;
        Ok(self.push(value, Op::Linear { input, weight, bias }, &[input, weight, bias]))
    }

    /// Row-wise softmax of a `[B, O]` tensor, computed with max subtraction.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let &[_, o] = xs.as_slice() else {
            return shape_err("softmax", format!("expected 2-D input, got {xs:?}"));
        };
        let mut out = self.data(input).to_vec();
        for row in out.chunks_mut(o) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let value = Tensor::new(&xs, out)?;
        Ok(self.push(value, Op::Softmax { input }, &[input]))
    }

    /// Per-sample squared L2 norm of the residual, averaged over the leading (batch) axis.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (ps, ts) = (self.shape(pred), self.shape(target));
        if ps != ts {
            return shape_err("mse_loss", format!("pred {ps:?} vs target {ts:?}"));
        }
        let batch = ps[0];
        let sq: T = self.data(pred).iter().zip(self.data(target)).map(|(&p, &t)| (p - t) * (p - t)).sum();
        let value = Tensor::scalar(sq / T::of(batch as f64));
        Ok(self.push(value, Op::Mse { pred, target }, &[pred, target]))
    }

    /// Mean over rows of `-ln(max(probs[row, class], 1e-12))`.
    pub fn cross_entropy(&mut self, probs: Var, classes: &[usize]) -> Result<Var> {
        let ps = self.shape(probs);
        let &[b, n] = ps else {
            return shape_err("cross_entropy", format!("expected 2-D probabilities, got {ps:?}"));
        };
        if classes.len() != b {
            return shape_err("cross_entropy", format!("{b} rows but {} labels", classes.len()));
        }
        if let Some(&c) = classes.iter().find(|&&c| c >= n) {
            return arg_err("cross_entropy", format!("class {c} out of range for {n} classes"));
        }
        let p = self.data(probs);
        let floor = T::of(PROB_FLOOR);
        let total: T = classes.iter().enumerate().map(|(r, &c)| -p[r * n + c].max(floor).ln()).sum();
        let value = Tensor::scalar(total / T::of(b as f64));
        let op = Op::CrossEntropy { probs, classes: classes.to_vec() };
        Ok(self.push(value, op, &[probs]))
    }
}

pub(crate) fn linear_backward<T: Scalar>(
    tape: &Tape<T>,
    sink: &mut GradSink<'_, T>,
    g: &[T],
    input: Var,
    weight: Var,
    bias: Var,
) {
    let (b, f) = (tape.shape(input)[0], tape.shape(input)[1]);
    let o = tape.shape(weight)[0];
    if let Some(db) = sink.slot(bias) {
        for row in g.chunks(o) {
            db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
        }
    }
    if let Some(dw) = sink.slot(weight) {
        // dW[O,F] += g^T[O,B] * x[B,F]
        T::gemm(o, b, f, T::one(), g, (1, o as isize), tape.data(input), (f as isize, 1), T::one(), dw, (f as isize, 1));
    }
    if let Some(dx) = sink.slot(input) {
        T::gemm(b, o, f, T::one(), g, (o as isize, 1), tape.data(weight), (f as isize, 1), T::one(), dx, (f as isize, 1));
    }
}

pub(crate) fn softmax_backward<T: Scalar>(out: &Tensor<T>, sink: &mut GradSink<'_, T>, g: &[T], input: Var) {
    let o = out.shape()[1];
    if let Some(dx) = sink.slot(input) {
        for ((y, gy), d) in out.data().chunks(o).zip(g.chunks(o)).zip(dx.chunks_mut(o)) {
            let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
            for i in 0..o {
                d[i] += y[i] * (gy[i] - dot);
            }
        }
    }
}

pub(crate) fn mse_backward<T: Scalar>(tape: &Tape<T>, sink: &mut GradSink<'_, T>, g: &[T], pred: Var, target: Var) {
    let batch = tape.shape(pred)[0];
    let scale = T::of(2.0) * g[0] / T::of(batch as f64);
    let resid: Vec<T> = tape.data(pred).iter().zip(tape.data(target)).map(|(&p, &t)| (p - t) * scale).collect();
    sink.add(pred, &resid);
    sink.add_scaled(target, &resid, -T::one());
}

pub(crate) fn cross_entropy_backward<T: Scalar>(
    tape: &Tape<T>,
    sink: &mut GradSink<'_, T>,
    g: &[T],
    probs: Var,
    classes: &[usize],
) {
    let (b, n) = (tape.shape(probs)[0], tape.shape(probs)[1]);
    let p = tape.data(probs);
    let floor = T::of(PROB_FLOOR);
    if let Some(dp) = sink.slot(probs) {
        for (r, &c) in classes.iter().enumerate() {
            let v = p[r * n + c];
            if v > floor {
                dp[r * n + c] -= g[0] / (T::of(b as f64) * v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&[2, 3], vec![0.0, 0.0, 0.0, 1000.0, 0.0, -1000.0]).unwrap());
        let y = tape.softmax(x).unwrap();
        let d = tape.data(y);
        for v in &d[..3] {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((d[3] - 1.0).abs() < 1e-12 && d[4] < 1e-300 && d.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mse_direct_formula() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
        let t = tape.constant(Tensor::zeros(&[1, 2]));
        let l = tape.mse_loss(p, t).unwrap();
        assert_eq!(tape.scalar_value(l).unwrap(), 5.0);
        let same = tape.mse_loss(p, p).unwrap();
        assert_eq!(tape.scalar_value(same).unwrap(), 0.0);
    }

    #[test]
    fn mse_averages_over_batch_not_pixels() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::full(&[2, 1, 2, 2], 1.0));
        let t = tape.constant(Tensor::zeros(&[2, 1, 2, 2]));
        let l = tape.mse_loss(p, t).unwrap();
        assert_eq!(tape.scalar_value(l).unwrap(), 4.0);
    }

    #[test]
    fn cross_entropy_ln2_and_range_check() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::new(&[1, 2], vec![0.5, 0.5]).unwrap());
        let l = tape.cross_entropy(p, &[0]).unwrap();
        assert!((tape.scalar_value(l).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(tape.cross_entropy(p, &[2]).is_err());
    }

    #[test]
    fn linear_forward() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
        let w = tape.constant(Tensor::new(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::new(&[3], vec![0.5, 0.0, -1.0]).unwrap());
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.data(y), &[1.5, 2.0, 2.0]);
    }
}
