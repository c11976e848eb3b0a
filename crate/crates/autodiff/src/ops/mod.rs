//! Differentiable primitives. Each submodule adds forward methods to
//! [`Tape`] and provides the matching backward rule.

mod basic;
mod conv;
mod linalg;
mod norm;

pub use norm::BatchStats;

use crate::tape::{GradSink, Node, Tape, Var};

pub(crate) enum Op {
    Leaf,
    Conv2d(conv::Conv2d),
    BatchNorm(norm::BatchNorm),
    L2Normalize(norm::L2Normalize),
    Relu { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MulConst { a: Var, c: Vec<f64> },
    Scale { a: Var, s: f64 },
    Reshape { a: Var },
    Sum { a: Var },
    Mse { pred: Var, target: Var },
    Softmax(basic::Softmax),
    Bmm(linalg::Bmm),
    Transpose(linalg::Transpose),
}

pub(crate) fn backward(tape: &Tape, node: &Node, g: &[f64], sink: &mut GradSink<'_>) {
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d(op) => op.backward(tape, g, sink),
        Op::BatchNorm(op) => op.backward(g, sink),
        Op::L2Normalize(op) => op.backward(&node.value, g, sink),
        Op::Softmax(op) => op.backward(&node.value, g, sink),
        Op::Bmm(op) => op.backward(tape, g, sink),
        Op::Transpose(op) => op.backward(g, sink),
        Op::Relu { x } => {
            let xv = tape.value(*x).data();
            if let Some(slot) = sink.slot(*x) {
                for ((s, gi), xi) in slot.iter_mut().zip(g).zip(xv) {
                    if *xi > 0.0 {
                        *s += gi;
                    }
                }
            }
        }
        Op::Add { a, b } => {
            sink.add(*a, g);
            sink.add(*b, g);
        }
        Op::Mul { a, b } => {
            let av = tape.value(*a).data();
            let bv = tape.value(*b).data();
            if let Some(slot) = sink.slot(*a) {
                for ((s, gi), bi) in slot.iter_mut().zip(g).zip(bv) {
                    *s += gi * bi;
                }
            }
            if let Some(slot) = sink.slot(*b) {
                for ((s, gi), ai) in slot.iter_mut().zip(g).zip(av) {
                    *s += gi * ai;
                }
            }
        }
        Op::MulConst { a, c } => {
            if let Some(slot) = sink.slot(*a) {
                for ((s, gi), ci) in slot.iter_mut().zip(g).zip(c) {
                    *s += gi * ci;
                }
            }
        }
        Op::Scale { a, s: k } => {
            if let Some(slot) = sink.slot(*a) {
                for (s, gi) in slot.iter_mut().zip(g) {
                    *s += gi * k;
                }
            }
        }
        Op::Reshape { a } => sink.add(*a, g),
        Op::Sum { a } => {
            if let Some(slot) = sink.slot(*a) {
                for s in slot.iter_mut() {
                    *s += g[0];
                }
            }
        }
        Op::Mse { pred, target } => {
            let p = tape.value(*pred).data();
            let t = tape.value(*target).data();
            if let Some(slot) = sink.slot(*pred) {
                for ((s, pi), ti) in slot.iter_mut().zip(p).zip(t) {
                    *s += 2.0 * (pi - ti) * g[0];
                }
            }
            if let Some(slot) = sink.slot(*target) {
                for ((s, pi), ti) in slot.iter_mut().zip(p).zip(t) {
                    *s -= 2.0 * (pi - ti) * g[0];
                }
            }
        }
    }
}

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
