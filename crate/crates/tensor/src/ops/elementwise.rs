use crate::error::{shape_err, Result};
use crate::tape::{GradSink, Op};
use crate::{Scalar, Tape, Tensor, Var};

impl<T: Scalar> Tape<T> {
    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        let out = t.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let value = Tensor::new(t.shape(), out)?;
        Ok(self.push(value, Op::Relu { input }, &[input]))
    }

    /// Concatenates along axis 1. All other extents must agree.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return shape_err("concat", "no inputs");
        };
        let base = self.shape(first).to_vec();
        if base.len() < 2 {
            return shape_err("concat", format!("need at least 2-D inputs, got {base:?}"));
        }
        let mut channels = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() || s[0] != base[0] || s[2..] != base[2..] {
                return shape_err("concat", format!("{s:?} incompatible with {base:?}"));
            }
            channels += s[1];
        }
        let batch = base[0];
        let inner: usize = base[2..].iter().product();
        let mut out = Vec::with_capacity(batch * channels * inner);
        for b in 0..batch {
            for &v in inputs {
                let block = self.shape(v)[1] * inner;
                out.extend_from_slice(&self.data(v)[b * block..(b + 1) * block]);
            }
        }
        let mut shape = base;
        shape[1] = channels;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Concat { inputs: inputs.to_vec() }, inputs))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { input }, &[input]))
    }

    /// Multiplies every `H x W` plane of `input[B,C,H,W]` by `scale[B,C]`.
    pub fn scale_channels(&mut self, input: Var, scale: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ss = self.shape(scale);
        if xs.len() != 4 || ss != [xs[0], xs[1]] {
            return shape_err("scale_channels", format!("input {xs:?} with scale {ss:?}"));
        }
        let hw = xs[2] * xs[3];
        let s = self.data(scale);
        let out = self
            .data(input)
            .chunks(hw)
            .zip(s)
            .flat_map(|(plane, &k)| plane.iter().map(move |&v| v * k))
            .collect();
        let value = Tensor::new(&xs, out)?;
        Ok(self.push(value, Op::ScaleChannels { input, scale }, &[input, scale]))
    }

    pub fn add_scalar(&mut self, input: Var, c: T) -> Var {
        let t = self.value(input);
        let out = t.data().iter().map(|&v| v + c).collect();
        let value = Tensor::new(t.shape(), out).expect("same shape");
        self.push(value, Op::AddScalar { input }, &[input])
    }

    pub fn mul_scalar(&mut self, input: Var, factor: T) -> Var {
        let t = self.value(input);
        let out = t.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(t.shape(), out).expect("same shape");
        self.push(value, Op::MulScalar { input, factor }, &[input])
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.zip_same("add", lhs, rhs, |a, b| a + b, |l, r| Op::Add { lhs: l, rhs: r })
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.zip_same("mul", lhs, rhs, |a, b| a * b, |l, r| Op::Mul { lhs: l, rhs: r })
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).sum();
        self.push(Tensor::scalar(s), Op::Sum { input }, &[input])
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        lhs: Var,
        rhs: Var,
        f: impl Fn(T, T) -> T,
        op: impl FnOnce(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return shape_err(name, format!("{:?} vs {:?}", a.shape(), b.shape()));
        }
        let out = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(a.shape(), out)?;
        Ok(self.push(value, op(lhs, rhs), &[lhs, rhs]))
    }
}

pub(crate) fn relu_backward<T: Scalar>(out: &Tensor<T>, sink: &mut GradSink<'_, T>, g: &[T], input: Var) {
    if let Some(dx) = sink.slot(input) {
        for ((d, &y), &gv) in dx.iter_mut().zip(out.data()).zip(g) {
            if y > T::zero() {
                *d += gv;
            }
        }
    }
}

pub(crate) fn concat_backward<T: Scalar>(tape: &Tape<T>, sink: &mut GradSink<'_, T>, g: &[T], inputs: &[Var]) {
    let base = tape.shape(inputs[0]);
    let batch = base[0];
    let inner: usize = base[2..].iter().product();
    let total: usize = inputs.iter().map(|&v| tape.shape(v)[1]).sum::<usize>() * inner;
    let mut offset = 0;
    for &v in inputs {
        let block = tape.shape(v)[1] * inner;
        if let Some(dx) = sink.slot(v) {
            for b in 0..batch {
                let src = &g[b * total + offset..][..block];
                dx[b * block..(b + 1) * block].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
            }
        }
        offset += block;
    }
}

pub(crate) fn scale_channels_backward<T: Scalar>(
    tape: &Tape<T>,
    sink: &mut GradSink<'_, T>,
    g: &[T],
    input: Var,
    scale: Var,
) {
    let xs = tape.shape(input);
    let hw = xs[2] * xs[3];
    let s = tape.data(scale);
    if let Some(dx) = sink.slot(input) {
        for ((d, gp), &k) in dx.chunks_mut(hw).zip(g.chunks(hw)).zip(s) {
            d.iter_mut().zip(gp).for_each(|(dv, &gv)| *dv += gv * k);
        }
    }
    if let Some(ds) = sink.slot(scale) {
        let x = tape.data(input);
        for ((d, gp), xp) in ds.iter_mut().zip(g.chunks(hw)).zip(x.chunks(hw)) {
            *d += gp.iter().zip(xp).map(|(&a, &b)| a * b).sum();
        }
    }
}

pub(crate) fn mul_backward<T: Scalar>(tape: &Tape<T>, sink: &mut GradSink<'_, T>, g: &[T], lhs: Var, rhs: Var) {
    let (a, b) = (tape.data(lhs), tape.data(rhs));
    if sink.wants(lhs) {
        let d: Vec<T> = g.iter().zip(b).map(|(&gv, &bv)| gv * bv).collect();
        sink.add(lhs, &d);
    }
    if sink.wants(rhs) {
        let d: Vec<T> = g.iter().zip(a).map(|(&gv, &av)| gv * av).collect();
        sink.add(rhs, &d);
    }
}
