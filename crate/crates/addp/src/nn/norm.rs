//! Normalization layers.

use super::tensor::Tensor;
use super::{Buffer, LayerCtx, Param, ParamGroup};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    batch_mode: bool,
}

/// Batch normalization over all positions of each channel, with per-clip
/// batch semantics: in training mode the current clip's statistics are used
/// and folded into the running estimates; in evaluation mode (or when the
/// statistics are frozen for incremental training) the running estimates are
/// used and never updated.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Buffer,
    pub running_var: Buffer,
    channels: usize,
    cache: Option<BnCache>,
}

impl BatchNorm {
    pub fn new(name: &str, group: ParamGroup, channels: usize) -> Self {
        let mut gamma = Tensor::zeros(&[channels]);
        gamma.fill(1.0);
        let mut running_var = Tensor::zeros(&[channels]);
        running_var.fill(1.0);
        BatchNorm {
            gamma: Param::new(format!("{name}.gamma"), group, gamma),
            beta: Param::new(format!("{name}.beta"), group, Tensor::zeros(&[channels])),
            running_mean: Buffer {
                name: format!("{name}.running_mean"),
                value: Tensor::zeros(&[channels]),
            },
            running_var: Buffer {
                name: format!("{name}.running_var"),
                value: running_var,
            },
            channels,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, ctx: LayerCtx) -> Tensor {
        let c = x.shape()[0];
        assert_eq!(c, self.channels, "batch norm channel mismatch");
        let p: usize = x.shape()[1..].iter().product();
        let batch_mode = ctx.train && !ctx.stats_frozen;

        let mut xhat = x.clone();
        let mut inv_std = vec![0.0; c];
        let g = self.gamma.value.data().to_vec();
        let b = self.beta.value.data().to_vec();
        if batch_mode {
            let rm = self.running_mean.value.data_mut();
            let rv = self.running_var.value.data_mut();
            for ci in 0..c {
                let chunk = &mut xhat.data_mut()[ci * p..(ci + 1) * p];
                let mean = chunk.iter().sum::<f64>() / p as f64;
                let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / p as f64;
                let s = 1.0 / (var + BN_EPS).sqrt();
                inv_std[ci] = s;
                chunk.iter_mut().for_each(|v| *v = (*v - mean) * s);
                rm[ci] = (1.0 - BN_MOMENTUM) * rm[ci] + BN_MOMENTUM * mean;
                rv[ci] = (1.0 - BN_MOMENTUM) * rv[ci] + BN_MOMENTUM * var;
            }
        } else {
            let rm = self.running_mean.value.data();
            let rv = self.running_var.value.data();
            for ci in 0..c {
                let chunk = &mut xhat.data_mut()[ci * p..(ci + 1) * p];
                let s = 1.0 / (rv[ci] + BN_EPS).sqrt();
                inv_std[ci] = s;
                let m = rm[ci];
                chunk.iter_mut().for_each(|v| *v = (*v - m) * s);
            }
        }
        let mut y = xhat.clone();
        for ci in 0..c {
            let chunk = &mut y.data_mut()[ci * p..(ci + 1) * p];
            chunk.iter_mut().for_each(|v| *v = g[ci] * *v + b[ci]);
        }
        self.cache = Some(BnCache {
            xhat,
            inv_std,
            batch_mode,
        });
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let cache = self.cache.as_ref().expect("backward before forward");
        let c = self.channels;
        let p: usize = dy.shape()[1..].iter().product();
        let g = self.gamma.value.data();
        let mut dx = Tensor::zeros(dy.shape());
        {
            let dg = self.gamma.grad.data_mut();
            let db = self.beta.grad.data_mut();
            let xh = cache.xhat.data();
            let dyd = dy.data();
            let dxd = dx.data_mut();
            for ci in 0..c {
                let xhc = &xh[ci * p..(ci + 1) * p];
                let dyc = &dyd[ci * p..(ci + 1) * p];
                let dxc = &mut dxd[ci * p..(ci + 1) * p];
                let s = cache.inv_std[ci];
                let mut sum_dy = 0.0;
                let mut sum_dy_xhat = 0.0;
                for (d, x) in dyc.iter().zip(xhc.iter()) {
                    sum_dy += d;
                    sum_dy_xhat += d * x;
                }
                dg[ci] += sum_dy_xhat;
                db[ci] += sum_dy;
                if cache.batch_mode {
                    let n = p as f64;
                    let m_dy = sum_dy / n;
                    let m_dyx = sum_dy_xhat / n;
                    for ((o, &d), &x) in dxc.iter_mut().zip(dyc).zip(xhc) {
                        *o = g[ci] * s * (d - m_dy - x * m_dyx);
                    }
                } else {
                    for (o, &d) in dxc.iter_mut().zip(dyc) {
                        *o = g[ci] * s * d;
                    }
                }
            }
        }
        dx
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Buffer)) {
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

/// Layer normalization over the channel dimension of `[C, T]` token
/// sequences, with learnable per-channel scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    channels: usize,
    cache: Option<(Tensor, Vec<f64>)>, // xhat, inv_std per token
}

impl LayerNorm {
    pub fn new(name: &str, group: ParamGroup, channels: usize) -> Self {
        let mut gamma = Tensor::zeros(&[channels]);
        gamma.fill(1.0);
        LayerNorm {
            gamma: Param::new(format!("{name}.gamma"), group, gamma),
            beta: Param::new(format!("{name}.beta"), group, Tensor::zeros(&[channels])),
            channels,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let &[c, t] = x.shape() else {
            panic!("layer norm expects [C, T]");
        };
        assert_eq!(c, self.channels);
        let xd = x.data();
        let mut xhat = Tensor::zeros(&[c, t]);
        let mut inv_std = vec![0.0; t];
        {
            let xh = xhat.data_mut();
            for ti in 0..t {
                let mut mean = 0.0;
                for ci in 0..c {
                    mean += xd[ci * t + ti];
                }
                mean /= c as f64;
                let mut var = 0.0;
                for ci in 0..c {
                    let d = xd[ci * t + ti] - mean;
                    var += d * d;
                }
                var /= c as f64;
                let s = 1.0 / (var + LN_EPS).sqrt();
                inv_std[ti] = s;
                for ci in 0..c {
                    xh[ci * t + ti] = (xd[ci * t + ti] - mean) * s;
                }
            }
        }
        let mut y = xhat.clone();
        {
            let yd = y.data_mut();
            let g = self.gamma.value.data();
            let b = self.beta.value.data();
            for ci in 0..c {
                for ti in 0..t {
                    yd[ci * t + ti] = g[ci] * yd[ci * t + ti] + b[ci];
                }
            }
        }
        self.cache = Some((xhat, inv_std));
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (xhat, inv_std) = self.cache.as_ref().expect("backward before forward");
        let &[c, t] = dy.shape() else { unreachable!() };
        let g = self.gamma.value.data();
        let xh = xhat.data();
        let dyd = dy.data();
        let mut dx = Tensor::zeros(&[c, t]);
        {
            let dg = self.gamma.grad.data_mut();
            let db = self.beta.grad.data_mut();
            for ci in 0..c {
                for ti in 0..t {
                    dg[ci] += dyd[ci * t + ti] * xh[ci * t + ti];
                    db[ci] += dyd[ci * t + ti];
                }
            }
        }
        {
            let dxd = dx.data_mut();
            let n = c as f64;
            for ti in 0..t {
                let mut m_dxhat = 0.0;
                let mut m_dxhat_xhat = 0.0;
                for ci in 0..c {
                    let dxh = dyd[ci * t + ti] * g[ci];
                    m_dxhat += dxh;
                    m_dxhat_xhat += dxh * xh[ci * t + ti];
                }
                m_dxhat /= n;
                m_dxhat_xhat /= n;
                for ci in 0..c {
                    let dxh = dyd[ci * t + ti] * g[ci];
                    dxd[ci * t + ti] =
                        inv_std[ti] * (dxh - m_dxhat - xh[ci * t + ti] * m_dxhat_xhat);
                }
            }
        }
        dx
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}
