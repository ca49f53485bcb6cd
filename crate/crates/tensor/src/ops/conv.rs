//! Stride-1, same-padded 2-D convolution via im2col + GEMM.

use rayon::prelude::*;

use crate::error::{arg_err, shape_err, Result};
use crate::tape::{GradSink, Op};
use crate::{Scalar, Tape, Tensor, Var};

struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
}

impl Geometry {
    fn ckk(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }
}

/// Unrolls one `cin x h x w` sample into a `(cin*k*k) x (h*w)` column matrix.
fn im2col<T: Scalar>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let (h, w, k, pad, hw) = (g.h, g.w, g.k, g.pad, g.hw());
    for c in 0..g.cin {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * hw..][..hw];
                let lo = pad.saturating_sub(kx);
                let hi = (w + pad).saturating_sub(kx).min(w);
                for oy in 0..h {
                    let out = &mut row[oy * w..(oy + 1) * w];
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= h || lo >= hi {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[(iy - pad) * w..][..w];
                    out[..lo].fill(T::zero());
                    out[hi..].fill(T::zero());
                    out[lo..hi].copy_from_slice(&src[lo + kx - pad..hi + kx - pad]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds column gradients back onto the sample.
fn col2im<T: Scalar>(cols: &[T], g: &Geometry, dx: &mut [T]) {
    let (h, w, k, pad, hw) = (g.h, g.w, g.k, g.pad, g.hw());
    for c in 0..g.cin {
        let plane = &mut dx[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * hw..][..hw];
                let lo = pad.saturating_sub(kx);
                let hi = (w + pad).saturating_sub(kx).min(w);
                if lo >= hi {
                    continue;
                }
                for oy in 0..h {
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let dst = &mut plane[(iy - pad) * w..][..w];
                    let src = &row[oy * w..(oy + 1) * w];
                    for (d, &s) in dst[lo + kx - pad..hi + kx - pad].iter_mut().zip(&src[lo..hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// `input[B,Cin,H,W] * kernel[Cout,Cin,k,k] + bias[Cout]`, stride 1, output `[B,Cout,H,W]`.
    ///
    /// The kernel size must be odd and `padding == (k - 1) / 2`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, padding: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 4 || ks.len() != 4 {
            return shape_err("conv2d", format!("expected 4-D input and kernel, got {xs:?} and {ks:?}"));
        }
        let (batch, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kcin, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kcin != cin {
            return shape_err("conv2d", format!("input has {cin} channels, kernel expects {kcin}"));
        }
        if kh != kw || kh % 2 == 0 {
            return arg_err("conv2d", format!("kernel must be square with odd size, got {kh}x{kw}"));
        }
        if padding != (kh - 1) / 2 {
            return arg_err("conv2d", format!("padding {padding} does not preserve size for k={kh}"));
        }
        if bs != [cout] {
            return shape_err("conv2d", format!("bias shape {bs:?} for {cout} output channels"));
        }
        let g = Geometry { cin, h, w, k: kh, pad: padding };
        let (ckk, hw) = (g.ckk(), g.hw());
        let keep_cols = self.requires_grad(kernel);

        let x = self.data(input);
        let kdata = self.data(kernel);
        let bdata = self.data(bias);
        let mut out = vec![T::zero(); batch * cout * hw];
        let mut cols = vec![T::zero(); batch * ckk * hw];
        out.par_chunks_mut(cout * hw)
            .zip(cols.par_chunks_mut(ckk * hw))
            .enumerate()
            .for_each(|(b, (ob, cb))| {
                im2col(&x[b * cin * hw..(b + 1) * cin * hw], &g, cb);
                T::gemm(cout, ckk, hw, T::one(), kdata, (ckk as isize, 1), cb, (hw as isize, 1), T::zero(), ob, (hw as isize, 1));
                for (o, row) in ob.chunks_mut(hw).enumerate() {
                    let bias = bdata[o];
                    row.iter_mut().for_each(|v| *v += bias);
                }
            });
        if !keep_cols {
            cols = Vec::new();
        }
        let value = Tensor::new(&[batch, cout, h, w], out)?;
        let op = Op::Conv2d { input, kernel, bias, ksize: kh, pad: padding, cols };
        Ok(self.push(value, op, &[input, kernel, bias]))
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Scalar>(
    tape: &Tape<T>,
    sink: &mut GradSink<'_, T>,
    g: &[T],
    input: Var,
    kernel: Var,
    bias: Var,
    ksize: usize,
    pad: usize,
    cols: &[T],
) {
    let xs = tape.shape(input);
    let (batch, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let cout = tape.shape(kernel)[0];
    let geo = Geometry { cin, h, w, k: ksize, pad };
    let (ckk, hw) = (geo.ckk(), geo.hw());

    if let Some(db) = sink.slot(bias) {
        for b in 0..batch {
            for o in 0..cout {
                let s: T = g[(b * cout + o) * hw..][..hw].iter().copied().sum();
                db[o] += s;
            }
        }
    }
    if let Some(dk) = sink.slot(kernel) {
        // sequential over the batch so the reduction order never depends on threading
        for b in 0..batch {
            let gb = &g[b * cout * hw..][..cout * hw];
            let cb = &cols[b * ckk * hw..][..ckk * hw];
            T::gemm(cout, hw, ckk, T::one(), gb, (hw as isize, 1), cb, (1, hw as isize), T::one(), dk, (ckk as isize, 1));
        }
    }
    if sink.wants(input) {
        let kdata = tape.data(kernel);
        let mut dx = vec![T::zero(); batch * cin * hw];
        dx.par_chunks_mut(cin * hw).enumerate().for_each(|(b, dxb)| {
            let gb = &g[b * cout * hw..][..cout * hw];
            let mut dcols = vec![T::zero(); ckk * hw];
            T::gemm(ckk, cout, hw, T::one(), kdata, (1, ckk as isize), gb, (hw as isize, 1), T::zero(), &mut dcols, (hw as isize, 1));
            col2im(&dcols, &geo, dxb);
        });
        sink.add(input, &dx);
    }
}
