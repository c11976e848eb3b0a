//! Dilated 2-D convolution with zero "same" padding.
//!
//! Lowered to GEMMs through an im2col buffer of shape `[Cin·kh·kw, rows·T]`
//! built for blocks of output frequency rows, so long inputs stay within a
//! bounded scratch size. Taps that fall outside the input read as zero.

use super::Op;
use crate::error::{AutodiffError, Result};
use crate::gemm::{gemm, View};
use crate::tape::{GradSink, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    cin: usize,
    cout: usize,
    freq: usize,
    time: usize,
    kh: usize,
    kw: usize,
    df: usize,
    dt: usize,
}

impl Geometry {
    fn plane(&self) -> usize {
        self.freq * self.time
    }
    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    /// Valid output range `[lo, hi)` along one axis for tap `i` whose source
    /// index is `o + d·i − pad`, and the signed source shift.
    fn span(len: usize, k: usize, d: usize, i: usize) -> (usize, usize, isize) {
        let shift = (d * i) as isize - (d * (k - 1) / 2) as isize;
        let lo = (-shift).max(0) as usize;
        let hi = (len as isize - shift).clamp(0, len as isize) as usize;
        (lo.min(hi), hi, shift)
    }

    /// Visits every (im2col row, output index range, source offset) triple
    /// for example `n`: `col[row, f·T + t] = x[src + f·T + t]` for the
    /// rectangle of valid `(f, t)`.
    fn for_each_tap(&self, mut visit: impl FnMut(usize, (usize, usize), (usize, usize), isize)) {
        let t = self.time as isize;
        for c in 0..self.cin {
            for i in 0..self.kh {
                let (flo, fhi, fs) = Self::span(self.freq, self.kh, self.df, i);
                for j in 0..self.kw {
                    let (tlo, thi, ts) = Self::span(self.time, self.kw, self.dt, j);
                    let row = (c * self.kh + i) * self.kw + j;
                    let base = (c * self.plane()) as isize + fs * t + ts;
                    visit(row, (flo, fhi), (tlo, thi), base);
                }
            }
        }
    }

    /// Output rows per im2col block, keeping a block near `COL_BUDGET`
    /// values (at least one row).
    fn block_rows(&self) -> usize {
        (COL_BUDGET / (self.rows() * self.time)).clamp(1, self.freq)
    }

    /// Fills `col` (`[rows, (f1 − f0)·T]`) for output rows `f0..f1` of
    /// example `n`.
    fn im2col(&self, x: &[f64], n: usize, (f0, f1): (usize, usize), col: &mut [f64]) {
        let plane = self.plane();
        let width = (f1 - f0) * self.time;
        let xs = &x[n * self.cin * plane..][..self.cin * plane];
        col[..self.rows() * width].iter_mut().for_each(|v| *v = 0.0);
        let time = self.time;
        self.for_each_tap(|row, (flo, fhi), (tlo, thi), base| {
            if tlo == thi {
                return;
            }
            let dst = &mut col[row * width..][..width];
            for f in flo.max(f0)..fhi.min(f1) {
                let o = f * time + tlo;
                let s = (o as isize + base) as usize;
                let d = o - f0 * time;
                dst[d..d + thi - tlo].copy_from_slice(&xs[s..s + thi - tlo]);
            }
        });
    }

    fn col2im(&self, col: &[f64], dx: &mut [f64], n: usize, (f0, f1): (usize, usize)) {
        let plane = self.plane();
        let width = (f1 - f0) * self.time;
        let dxs = &mut dx[n * self.cin * plane..][..self.cin * plane];
        let time = self.time;
        self.for_each_tap(|row, (flo, fhi), (tlo, thi), base| {
            if tlo == thi {
                return;
            }
            let src = &col[row * width..][..width];
            for f in flo.max(f0)..fhi.min(f1) {
                let o = f * time + tlo;
                let s = (o as isize + base) as usize;
                let d = o - f0 * time;
                for (x, v) in dxs[s..s + thi - tlo].iter_mut().zip(&src[d..d + thi - tlo]) {
                    *x += v;
                }
            }
        });
    }

    fn blocks(&self) -> impl Iterator<Item = (usize, usize)> {
        let step = self.block_rows();
        let freq = self.freq;
        (0..freq).step_by(step).map(move |f0| (f0, (f0 + step).min(freq)))
    }
}

/// Values per im2col block (32 MiB of f64).
const COL_BUDGET: usize = 1 << 22;

pub(crate) struct Conv2d {
    x: Var,
    w: Var,
    b: Var,
    geom: Geometry,
}

impl Tape {
    /// Dilated convolution of `x` (`[Cin,F,T]` or `[B,Cin,F,T]`) with kernel
    /// `w` (`[Cout,Cin,kh,kw]`, odd extents) and bias `b` (`[Cout]`).
    ///
    /// `out[c,f,t] = b[c] + Σ w[c,ci,i,j] · x_pad[ci, f + dF·i, t + dT·j]`,
    /// where `x_pad` is `x` zero-padded by `dF·(kh−1)/2` and `dT·(kw−1)/2`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, dilation: (usize, usize)) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (batch, cin, freq, time) = match xs.as_slice() {
            &[c, f, t] => (1, c, f, t),
            &[n, c, f, t] => (n, c, f, t),
            _ => return Err(AutodiffError::shape("conv2d", &xs, &ws)),
        };
        let &[cout, wcin, kh, kw] = ws.as_slice() else {
            return Err(AutodiffError::shape("conv2d", &xs, &ws));
        };
        if wcin != cin {
            return Err(AutodiffError::shape("conv2d", &xs, &ws));
        }
        if self.shape(b) != [cout] {
            return Err(AutodiffError::shape("conv2d bias", self.shape(b), &[cout]));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(AutodiffError::invalid("conv2d", "kernel extents must be odd"));
        }
        if dilation.0 == 0 || dilation.1 == 0 {
            return Err(AutodiffError::invalid("conv2d", "dilation must be >= 1"));
        }
        if freq == 0 || time == 0 {
            return Err(AutodiffError::invalid("conv2d", "empty spatial extent"));
        }
        let geom = Geometry {
            batch,
            cin,
            cout,
            freq,
            time,
            kh,
            kw,
            df: dilation.0,
            dt: dilation.1,
        };

        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let plane = geom.plane();
        let rows = geom.rows();
        let mut out = vec![0.0; batch * cout * plane];
        let mut col = vec![0.0; rows * geom.block_rows() * time];
        for n in 0..batch {
            let dst = &mut out[n * cout * plane..][..cout * plane];
            for (c, chunk) in dst.chunks_exact_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bv[c]);
            }
            for (f0, f1) in geom.blocks() {
                let width = (f1 - f0) * time;
                geom.im2col(xv, n, (f0, f1), &mut col);
                gemm(
                    cout,
                    rows,
                    width,
                    wv,
                    View::new(0, rows, 1),
                    &col,
                    View::new(0, width, 1),
                    1.0,
                    &mut out,
                    View::new(n * cout * plane + f0 * time, plane, 1),
                );
            }
        }
        let mut shape = xs.clone();
        let ch_axis = shape.len() - 3;
        shape[ch_axis] = cout;
        let out = Tensor::new(&shape, out)?;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(out, Op::Conv2d(Conv2d { x, w, b, geom }), rg))
    }
}

impl Conv2d {
    pub fn backward(&self, tape: &Tape, g: &[f64], sink: &mut GradSink<'_>) {
        let geom = self.geom;
        let plane = geom.plane();
        let rows = geom.rows();

        if let Some(db) = sink.slot(self.b) {
            for n in 0..geom.batch {
                for (c, d) in db.iter_mut().enumerate() {
                    *d += g[(n * geom.cout + c) * plane..][..plane].iter().sum::<f64>();
                }
            }
        }

        let need_w = tape.requires_grad(self.w);
        let need_x = tape.requires_grad(self.x);
        if !need_w && !need_x {
            return;
        }
        let xv = tape.value(self.x).data();
        let wv = tape.value(self.w).data();
        let mut dw = vec![0.0; if need_w { wv.len() } else { 0 }];
        let mut dx = vec![0.0; if need_x { xv.len() } else { 0 }];
        let mut col = vec![0.0; rows * geom.block_rows() * geom.time];
        for n in 0..geom.batch {
            for (f0, f1) in geom.blocks() {
                let width = (f1 - f0) * geom.time;
                let gn = View::new(n * geom.cout * plane + f0 * geom.time, plane, 1);
                if need_w {
                    geom.im2col(xv, n, (f0, f1), &mut col);
                    gemm(
                        geom.cout,
                        width,
                        rows,
                        g,
                        gn,
                        &col,
                        View::new(0, 1, width),
                        1.0,
                        &mut dw,
                        View::new(0, rows, 1),
                    );
                }
                if need_x {
                    gemm(
                        rows,
                        geom.cout,
                        width,
                        wv,
                        View::new(0, 1, rows),
                        g,
                        gn,
                        0.0,
                        &mut col,
                        View::new(0, width, 1),
                    );
                    geom.col2im(&col, &mut dx, n, (f0, f1));
                }
            }
        }
        if need_w {
            sink.add(self.w, &dw);
        }
        if need_x {
            sink.add(self.x, &dx);
        }
    }
}
