use super::{split_axis, Op};
use crate::error::{AutodiffError, Result};
use crate::tape::{GradSink, Tape, Var};
use crate::tensor::Tensor;

impl Tape {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape(), v.data().iter().map(|&a| a.max(0.0)).collect())
            .expect("shape preserved");
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Relu { x }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(av.shape(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    /// Residual connection: elementwise sum of a block output and its input.
    pub fn residual_add(&mut self, x: Var, y: Var) -> Result<Var> {
        self.add(x, y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(av.shape(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    /// Elementwise product with a constant array of the same shape.
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        if self.shape(a) != c.shape() {
            return Err(AutodiffError::shape("mul_const", self.shape(a), c.shape()));
        }
        let av = self.value(a);
        let data = av.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape(), data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            out,
            Op::MulConst {
                a,
                c: c.data().to_vec(),
            },
            rg,
        ))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let av = self.value(a);
        let out = Tensor::new(av.shape(), av.data().iter().map(|x| x * s).collect())
            .expect("shape preserved");
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Scale { a, s }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Reshape { a }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(total), Op::Sum { a }, rg)
    }

    /// Summed squared error `Σ (pred − target)²`.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse_loss", pred, target)?;
        let total = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let rg = self.any_grad(&[pred, target]);
        Ok(self.push(Tensor::scalar(total), Op::Mse { pred, target }, rg))
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(AutodiffError::invalid(
                "softmax",
                format!("axis {} out of range for rank {}", axis, xv.rank()),
            ));
        }
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let max = (0..n)
                    .map(|k| src[base + k * inner])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..n {
                    let e = (src[base + k * inner] - max).exp();
                    out[base + k * inner] = e;
                    total += e;
                }
                for k in 0..n {
                    out[base + k * inner] /= total;
                }
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Softmax(Softmax { x, axis }), rg))
    }
}

pub(crate) struct Softmax {
    x: Var,
    axis: usize,
}

impl Softmax {
    pub fn backward(&self, y: &Tensor, g: &[f64], sink: &mut GradSink<'_>) {
        let (outer, n, inner) = split_axis(y.shape(), self.axis);
        let yv = y.data();
        let Some(slot) = sink.slot(self.x) else {
            return;
        };
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let dot: f64 = (0..n)
                    .map(|k| yv[base + k * inner] * g[base + k * inner])
                    .sum();
                for k in 0..n {
                    let idx = base + k * inner;
                    slot[idx] += yv[idx] * (g[idx] - dot);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.3, 0.3]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_closed_form() {
        // e^0 / (e^0 + e^{ln 3}) = 1/4
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 3f64.ln()]));
        let y = tape.softmax(x, 0).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 0.25).abs() < 1e-15);
        assert!((v[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_shift_invariant_along_middle_axis() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin() * 4.0).collect();
        let shifted: Vec<f64> = data.iter().map(|v| v + 100.0).collect();
        let a = tape.constant(t(&[2, 3, 4], &data));
        let b = tape.constant(t(&[2, 3, 4], &shifted));
        let ya = tape.softmax(a, 1).unwrap();
        let yb = tape.softmax(b, 1).unwrap();
        assert!(tape.value(ya).max_abs_diff(tape.value(yb)) < 1e-12);
        let yv = tape.value(ya).data();
        for o in 0..2 {
            for i in 0..4 {
                let s: f64 = (0..3).map(|k| yv[o * 12 + k * 4 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn residual_add_identities_and_gradients() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[3], &[1.0, -2.0, 0.5]));
        let z = tape.constant(Tensor::zeros(&[3]));
        let same = tape.residual_add(x, z).unwrap();
        assert_eq!(tape.value(same).data(), tape.value(x).data());
        let y = tape.variable(t(&[3], &[1.0, -2.0, 0.5]));
        let twice = tape.residual_add(x, y).unwrap();
        assert_eq!(tape.value(twice).data(), &[2.0, -4.0, 1.0]);
        let w = tape.constant(t(&[3], &[3.0, 5.0, 7.0]));
        let weighted = tape.mul(twice, w).unwrap();
        let loss = tape.sum(weighted);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[3.0, 5.0, 7.0]);
        assert_eq!(grads.get(y).unwrap(), &[3.0, 5.0, 7.0]);
        assert!(grads.get(w).is_none());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut tape = Tape::new();
        let a = tape.variable(Tensor::zeros(&[3]));
        let b = tape.variable(Tensor::zeros(&[4]));
        assert!(matches!(tape.add(a, b), Err(AutodiffError::Shape { .. })));
        assert!(matches!(tape.mse_loss(a, b), Err(AutodiffError::Shape { .. })));
    }

    #[test]
    fn mse_values_and_gradient() {
        let mut tape = Tape::new();
        let p = tape.variable(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let same = tape.constant(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let l0 = tape.mse_loss(p, same).unwrap();
        assert_eq!(tape.value(l0).item(), Some(0.0));
        let off = tape.constant(t(&[4], &[0.0, 1.0, 2.0, 3.0]));
        let l1 = tape.mse_loss(p, off).unwrap();
        assert_eq!(tape.value(l1).item(), Some(4.0));
        let grads = tape.backward(l1).unwrap();
        assert_eq!(grads.get(p).unwrap(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn sum_gradient_is_ones_and_diamond_adds() {
        let mut tape = Tape::new();
        let p = tape.variable(t(&[3], &[0.1, 0.2, 0.3]));
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(p).unwrap(), &[1.0, 1.0, 1.0]);

        // p feeds two branches that rejoin: d/dp (2p + p·p) = 2 + 2p
        let two_p = tape.scale(p, 2.0);
        let p_sq = tape.mul(p, p).unwrap();
        let joined = tape.add(two_p, p_sq).unwrap();
        let loss = tape.sum(joined);
        let g = tape.backward(loss).unwrap();
        let expect = [2.2, 2.4, 2.6];
        for (a, b) in g.get(p).unwrap().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let p = tape.variable(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(p), Err(AutodiffError::NotScalar(_))));
    }
}
