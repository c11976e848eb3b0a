use super::Op;
use crate::error::{AutodiffError, Result};
use crate::gemm::{gemm, View};
use crate::tape::{GradSink, Tape, Var};
use crate::tensor::Tensor;

pub(crate) struct Bmm {
    a: Var,
    b: Var,
    dims: (usize, usize, usize, usize),
}

pub(crate) struct Transpose {
    a: Var,
    dims: (usize, usize, usize),
}

impl Tape {
    /// Batched matrix product `[B,M,N] × [B,N,P] → [B,M,P]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (&[ba, m, n], &[bb, nb, p]) = (sa.as_slice(), sb.as_slice()) else {
            return Err(AutodiffError::shape("bmm", &sa, &sb));
        };
        if ba != bb || n != nb {
            return Err(AutodiffError::shape("bmm", &sa, &sb));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; ba * m * p];
        for k in 0..ba {
            gemm(
                m,
                n,
                p,
                av,
                View::new(k * m * n, n, 1),
                bv,
                View::new(k * n * p, p, 1),
                0.0,
                &mut out,
                View::new(k * m * p, p, 1),
            );
        }
        let out = Tensor::new(&[ba, m, p], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            out,
            Op::Bmm(Bmm {
                a,
                b,
                dims: (ba, m, n, p),
            }),
            rg,
        ))
    }

    /// Swaps the last two axes of a rank-3 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let &[b, m, n] = sa.as_slice() else {
            return Err(AutodiffError::invalid("transpose", "expected rank 3"));
        };
        let av = self.value(a).data();
        let mut out = vec![0.0; av.len()];
        transpose_into(av, &mut out, b, m, n, false);
        let out = Tensor::new(&[b, n, m], out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Transpose(Transpose { a, dims: (b, m, n) }), rg))
    }
}

fn transpose_into(src: &[f64], dst: &mut [f64], b: usize, m: usize, n: usize, accumulate: bool) {
    for k in 0..b {
        for i in 0..m {
            for j in 0..n {
                let v = src[k * m * n + i * n + j];
                let d = &mut dst[k * m * n + j * m + i];
                if accumulate {
                    *d += v;
                } else {
                    *d = v;
                }
            }
        }
    }
}

impl Bmm {
    pub fn backward(&self, tape: &Tape, g: &[f64], sink: &mut GradSink<'_>) {
        let (batch, m, n, p) = self.dims;
        let av = tape.value(self.a).data();
        let bv = tape.value(self.b).data();
        if let Some(da) = sink.slot(self.a) {
            // dA = G · Bᵀ
            for k in 0..batch {
                gemm(
                    m,
                    p,
                    n,
                    g,
                    View::new(k * m * p, p, 1),
                    bv,
                    View::new(k * n * p, 1, p),
                    1.0,
                    da,
                    View::new(k * m * n, n, 1),
                );
            }
        }
        if let Some(db) = sink.slot(self.b) {
            // dB = Aᵀ · G
            for k in 0..batch {
                gemm(
                    n,
                    m,
                    p,
                    av,
                    View::new(k * m * n, 1, n),
                    g,
                    View::new(k * m * p, p, 1),
                    1.0,
                    db,
                    View::new(k * n * p, p, 1),
                );
            }
        }
    }
}

impl Transpose {
    pub fn backward(&self, g: &[f64], sink: &mut GradSink<'_>) {
        let (b, m, n) = self.dims;
        if let Some(da) = sink.slot(self.a) {
            transpose_into(g, da, b, n, m, true);
        }
    }
}
