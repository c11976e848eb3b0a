use super::{split_axis, Op};
use crate::error::{AutodiffError, Result};
use crate::tape::{GradSink, Tape, Var};
use crate::tensor::Tensor;

/// Per-channel batch statistics from a training-mode batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
}

impl BatchStats {
    /// Exponential moving average: `running = momentum·running + (1−momentum)·batch`.
    pub fn update_running(&self, running_mean: &mut [f64], running_var: &mut [f64], momentum: f64) {
        for (r, b) in running_mean.iter_mut().zip(&self.mean) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
        for (r, b) in running_var.iter_mut().zip(&self.var) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
    }
}

pub(crate) struct BatchNorm {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    gamma_v: Vec<f64>,
    batch: usize,
    channels: usize,
    spatial: usize,
    train: bool,
}

fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [c, f, t] => Ok((1, *c, f * t)),
        [n, c, f, t] => Ok((*n, *c, f * t)),
        _ => Err(AutodiffError::invalid(
            "batch_norm",
            format!("expected [C,F,T] or [B,C,F,T], got {shape:?}"),
        )),
    }
}

impl Tape {
    /// Training-mode batch normalization: statistics pool over batch and
    /// both spatial axes, per channel.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (batch, channels, spatial) = channel_layout(self.shape(x))?;
        let count = (batch * spatial) as f64;
        let xv = self.value(x).data();
        let mut mean = vec![0.0; channels];
        let mut var = vec![0.0; channels];
        for n in 0..batch {
            for c in 0..channels {
                mean[c] += xv[(n * channels + c) * spatial..][..spatial].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for n in 0..batch {
            for c in 0..channels {
                var[c] += xv[(n * channels + c) * spatial..][..spatial]
                    .iter()
                    .map(|v| (v - mean[c]) * (v - mean[c]))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let stats = BatchStats { mean, var };
        let out = self.normalize(x, gamma, beta, &stats, eps, true)?;
        Ok((out, stats))
    }

    /// Inference-mode batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let stats = BatchStats {
            mean: mean.to_vec(),
            var: var.to_vec(),
        };
        self.normalize(x, gamma, beta, &stats, eps, false)
    }

    fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &BatchStats,
        eps: f64,
        train: bool,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (batch, channels, spatial) = channel_layout(&shape)?;
        for (v, what) in [(gamma, "gamma"), (beta, "beta")] {
            if self.shape(v) != [channels] {
                return Err(AutodiffError::invalid(
                    "batch_norm",
                    format!("{what} has shape {:?}, expected [{channels}]", self.shape(v)),
                ));
            }
        }
        if stats.mean.len() != channels || stats.var.len() != channels {
            return Err(AutodiffError::invalid("batch_norm", "statistics length mismatch"));
        }
        let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for n in 0..batch {
            for c in 0..channels {
                let base = (n * channels + c) * spatial;
                for k in base..base + spatial {
                    let h = (xv[k] - stats.mean[c]) * inv_std[c];
                    xhat[k] = h;
                    out[k] = gv[c] * h + bv[c];
                }
            }
        }
        let gamma_v = gv.to_vec();
        let out = Tensor::new(&shape, out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::BatchNorm(BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                gamma_v,
                batch,
                channels,
                spatial,
                train,
            }),
            rg,
        ))
    }

    /// Divides every vector along `axis` by its Euclidean norm, with the
    /// norm floored at `eps`.
    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(AutodiffError::invalid("l2_normalize", "axis out of range"));
        }
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        let mut norms = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let norm = (0..n)
                    .map(|k| src[base + k * inner] * src[base + k * inner])
                    .sum::<f64>()
                    .sqrt();
                norms[o * inner + i] = norm;
                let denom = norm.max(eps);
                for k in 0..n {
                    out[base + k * inner] = src[base + k * inner] / denom;
                }
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            out,
            Op::L2Normalize(L2Normalize {
                x,
                axis,
                eps,
                norms,
            }),
            rg,
        ))
    }
}

impl BatchNorm {
    pub fn backward(&self, g: &[f64], sink: &mut GradSink<'_>) {
        let (batch, channels, spatial) = (self.batch, self.channels, self.spatial);
        let mut sum_g = vec![0.0; channels];
        let mut sum_gx = vec![0.0; channels];
        for n in 0..batch {
            for c in 0..channels {
                let base = (n * channels + c) * spatial;
                for k in base..base + spatial {
                    sum_g[c] += g[k];
                    sum_gx[c] += g[k] * self.xhat[k];
                }
            }
        }
        sink.add(self.beta, &sum_g);
        sink.add(self.gamma, &sum_gx);
        let Some(dx) = sink.slot(self.x) else {
            return;
        };
        let count = (batch * spatial) as f64;
        for n in 0..batch {
            for c in 0..channels {
                let base = (n * channels + c) * spatial;
                let s = self.inv_std[c] * self.gamma_v[c];
                for k in base..base + spatial {
                    if self.train {
                        dx[k] += s * (g[k] - sum_g[c] / count - self.xhat[k] * sum_gx[c] / count);
                    } else {
                        dx[k] += s * g[k];
                    }
                }
            }
        }
    }
}

pub(crate) struct L2Normalize {
    x: Var,
    axis: usize,
    eps: f64,
    norms: Vec<f64>,
}

impl L2Normalize {
    pub fn backward(&self, y: &Tensor, g: &[f64], sink: &mut GradSink<'_>) {
        let (outer, n, inner) = split_axis(y.shape(), self.axis);
        let yv = y.data();
        let Some(dx) = sink.slot(self.x) else {
            return;
        };
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let norm = self.norms[o * inner + i];
                if norm > self.eps {
                    let dot: f64 = (0..n)
                        .map(|k| yv[base + k * inner] * g[base + k * inner])
                        .sum();
                    for k in 0..n {
                        let idx = base + k * inner;
                        dx[idx] += (g[idx] - yv[idx] * dot) / norm;
                    }
                } else {
                    for k in 0..n {
                        dx[base + k * inner] += g[base + k * inner] / self.eps;
                    }
                }
            }
        }
    }
}
