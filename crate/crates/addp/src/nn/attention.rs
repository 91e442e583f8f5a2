//! Multi-head self-attention over the temporal axis of `[C, T]` tokens.

use super::conv::PointwiseConv;
use super::tensor::Tensor;
use super::{Param, ParamGroup};
use rand::Rng;

#[derive(Clone, Debug)]
pub struct TemporalAttention {
    qkv: PointwiseConv,  // C -> 3C
    proj: PointwiseConv, // C -> C
    channels: usize,
    heads: usize,
    cache: Option<AttnCache>,
}

#[derive(Clone, Debug)]
struct AttnCache {
    qkv_out: Tensor,      // [3C, T]
    attn: Vec<Vec<f64>>,  // per head, row-major [T, T] softmax weights
}

impl TemporalAttention {
    pub fn new<R: Rng>(
        name: &str,
        group: ParamGroup,
        channels: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads >= 1 && channels % heads == 0, "heads must divide C");
        let xavier = (1.0 / channels as f64).sqrt();
        TemporalAttention {
            qkv: PointwiseConv::new(
                &format!("{name}.qkv"),
                group,
                channels,
                3 * channels,
                xavier,
                rng,
            ),
            proj: PointwiseConv::new(&format!("{name}.proj"), group, channels, channels, xavier, rng),
            channels,
            heads,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let &[c, t] = x.shape() else {
            panic!("attention expects [C, T]");
        };
        assert_eq!(c, self.channels);
        let qkv_out = self.qkv.forward(x);
        let d = c / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let qd = qkv_out.data();

        let mut concat = Tensor::zeros(&[c, t]);
        let mut attn_all = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q0 = h * d;
            let k0 = c + h * d;
            let v0 = 2 * c + h * d;
            // scores S[i, j] = scale * <q_i, k_j>
            let mut scores = vec![0.0; t * t];
            for i in 0..t {
                for j in 0..t {
                    let mut acc = 0.0;
                    for dd in 0..d {
                        acc += qd[(q0 + dd) * t + i] * qd[(k0 + dd) * t + j];
                    }
                    scores[i * t + j] = acc * scale;
                }
            }
            // row softmax
            for i in 0..t {
                let row = &mut scores[i * t..(i + 1) * t];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    sum += *v;
                }
                row.iter_mut().for_each(|v| *v /= sum);
            }
            // out[dd, i] = sum_j v[dd, j] * A[i, j]
            {
                let od = concat.data_mut();
                for dd in 0..d {
                    for i in 0..t {
                        let mut acc = 0.0;
                        for j in 0..t {
                            acc += qd[(v0 + dd) * t + j] * scores[i * t + j];
                        }
                        od[(h * d + dd) * t + i] = acc;
                    }
                }
            }
            attn_all.push(scores);
        }
        let y = self.proj.forward(&concat);
        self.cache = Some(AttnCache {
            qkv_out,
            attn: attn_all,
        });
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let do_ = self.proj.backward(dy);
        let cache = self.cache.as_ref().expect("backward before forward");
        let c = self.channels;
        let t = do_.shape()[1];
        let d = c / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let qd = cache.qkv_out.data();
        let dod = do_.data();

        let mut dqkv = Tensor::zeros(&[3 * c, t]);
        {
            let dq = dqkv.data_mut();
            for h in 0..self.heads {
                let q0 = h * d;
                let k0 = c + h * d;
                let v0 = 2 * c + h * d;
                let attn = &cache.attn[h];

                // dA[i, j] = sum_dd do[h*d+dd, i] * v[dd, j]
                let mut d_attn = vec![0.0; t * t];
                for i in 0..t {
                    for j in 0..t {
                        let mut acc = 0.0;
                        for dd in 0..d {
                            acc += dod[(h * d + dd) * t + i] * qd[(v0 + dd) * t + j];
                        }
                        d_attn[i * t + j] = acc;
                    }
                }
                // dv[dd, j] = sum_i do[dd, i] * A[i, j]
                for dd in 0..d {
                    for j in 0..t {
                        let mut acc = 0.0;
                        for i in 0..t {
                            acc += dod[(h * d + dd) * t + i] * attn[i * t + j];
                        }
                        dq[(v0 + dd) * t + j] = acc;
                    }
                }
                // softmax backward per row
                let mut d_scores = vec![0.0; t * t];
                for i in 0..t {
                    let a_row = &attn[i * t..(i + 1) * t];
                    let da_row = &d_attn[i * t..(i + 1) * t];
                    let dot: f64 = a_row.iter().zip(da_row).map(|(a, g)| a * g).sum();
                    for j in 0..t {
                        d_scores[i * t + j] = a_row[j] * (da_row[j] - dot);
                    }
                }
                // dq[dd, i] = scale * sum_j dS[i, j] k[dd, j]
                // dk[dd, j] = scale * sum_i dS[i, j] q[dd, i]
                for dd in 0..d {
                    for i in 0..t {
                        let mut acc = 0.0;
                        for j in 0..t {
                            acc += d_scores[i * t + j] * qd[(k0 + dd) * t + j];
                        }
                        dq[(q0 + dd) * t + i] = acc * scale;
                    }
                    for j in 0..t {
                        let mut acc = 0.0;
                        for i in 0..t {
                            acc += d_scores[i * t + j] * qd[(q0 + dd) * t + i];
                        }
                        dq[(k0 + dd) * t + j] = acc * scale;
                    }
                }
            }
        }
        self.qkv.backward(&dqkv)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.qkv.visit_params(f);
        self.proj.visit_params(f);
    }
}
