use crate::error::{arg_err, shape_err, Result};
use crate::tape::{GradSink, Op};
use crate::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PoolKind {
    #[default]
    Avg,
    Max,
}

/// Start index of band `b` when `len` is split into `bands` near-equal parts.
pub fn band_start(b: usize, len: usize, bands: usize) -> usize {
    b * len / bands
}

fn dims4(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *s {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => shape_err(op, format!("expected 4-D input, got {s:?}")),
    }
}

impl<T: Scalar> Tape<T> {
    /// 2x2 max pooling with stride 2; height and width must be even.
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let (b, c, h, w) = dims4("max_pool2", self.shape(input))?;
        if h % 2 != 0 || w % 2 != 0 {
            return arg_err("max_pool2", format!("spatial size {h}x{w} is not even"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.data(input);
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let value = Tensor::new(&[b, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool2 { input, argmax }, &[input]))
    }

    /// Pools each channel over a `grid x grid` partition into near-equal bands
    /// (band `b` starts at `floor(b * H / grid)`); output is `[B, C, grid, grid]`.
    pub fn region_pool(&mut self, input: Var, grid: usize, kind: PoolKind) -> Result<Var> {
        let (b, c, h, w) = dims4("region_pool", self.shape(input))?;
        if grid == 0 || grid > h || grid > w {
            return arg_err("region_pool", format!("grid {grid} does not fit a {h}x{w} map"));
        }
        let x = self.data(input);
        let mut out = Vec::with_capacity(b * c * grid * grid);
        let mut argmax = Vec::new();
        for plane in 0..b * c {
            let base = plane * h * w;
            for gy in 0..grid {
                let (y0, y1) = (band_start(gy, h, grid), band_start(gy + 1, h, grid));
                for gx in 0..grid {
                    let (x0, x1) = (band_start(gx, w, grid), band_start(gx + 1, w, grid));
                    match kind {
                        PoolKind::Avg => {
                            let mut acc = T::zero();
                            for y in y0..y1 {
                                acc += x[base + y * w + x0..base + y * w + x1].iter().copied().sum();
                            }
                            out.push(acc / T::of(((y1 - y0) * (x1 - x0)) as f64));
                        }
                        PoolKind::Max => {
                            let mut best = base + y0 * w + x0;
                            for y in y0..y1 {
                                for xx in x0..x1 {
                                    let i = base + y * w + xx;
                                    if x[i] > x[best] {
                                        best = i;
                                    }
                                }
                            }
                            out.push(x[best]);
                            argmax.push(best as u32);
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[b, c, grid, grid], out)?;
        Ok(self.push(value, Op::RegionPool { input, grid, kind, argmax }, &[input]))
    }

    pub fn region_avg_pool(&mut self, input: Var, grid: usize) -> Result<Var> {
        self.region_pool(input, grid, PoolKind::Avg)
    }
}

pub(crate) fn scatter_backward<T: Scalar>(sink: &mut GradSink<'_, T>, g: &[T], input: Var, argmax: &[u32]) {
    if let Some(dx) = sink.slot(input) {
        for (&i, &gv) in argmax.iter().zip(g) {
            dx[i as usize] += gv;
        }
    }
}

pub(crate) fn region_avg_backward<T: Scalar>(
    tape: &Tape<T>,
    sink: &mut GradSink<'_, T>,
    g: &[T],
    input: Var,
    grid: usize,
) {
    let s = tape.shape(input);
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let Some(dx) = sink.slot(input) else { return };
    for plane in 0..b * c {
        let base = plane * h * w;
        for gy in 0..grid {
            let (y0, y1) = (band_start(gy, h, grid), band_start(gy + 1, h, grid));
            for gx in 0..grid {
                let (x0, x1) = (band_start(gx, w, grid), band_start(gx + 1, w, grid));
                let share = g[(plane * grid + gy) * grid + gx] / T::of(((y1 - y0) * (x1 - x0)) as f64);
                for y in y0..y1 {
                    dx[base + y * w + x0..base + y * w + x1].iter_mut().for_each(|d| *d += share);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(data: Vec<f64>, h: usize, w: usize, grid: usize) -> Vec<f64> {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&[1, 1, h, w], data).unwrap());
        let y = tape.region_avg_pool(x, grid).unwrap();
        tape.data(y).to_vec()
    }

    #[test]
    fn ones_stay_ones() {
        assert_eq!(pool(vec![1.0; 16], 4, 4, 2), vec![1.0; 4]);
    }

    #[test]
    fn uneven_bands() {
        let y = pool((1..=9).map(f64::from).collect(), 3, 3, 2);
        assert_eq!(y, vec![1.0, 2.5, 5.5, 7.0]);
    }

    #[test]
    fn grid_larger_than_map_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 2, 5]));
        assert!(tape.region_avg_pool(x, 3).is_err());
    }

    #[test]
    fn max_pool_halves_and_picks_max() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(&[1, 1, 2, 4], vec![1., 5., 2., 0., 3., 4., -1., 7.]).unwrap());
        let y = tape.max_pool2(x).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 2]);
        assert_eq!(tape.data(y), &[5.0, 7.0]);
        let odd = tape.constant(Tensor::zeros(&[1, 1, 3, 4]));
        assert!(tape.max_pool2(odd).is_err());
    }
}
