//! Convolution layers: pointwise (1x1x1), depthwise 3x3x3, patch-embedding
//! downsampling, and the 1D head convolutions.

use super::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};
use super::{Param, ParamGroup};
use rand::Rng;

/// 1x1x1 convolution over the channel dimension: `y = W x + b` applied at
/// every position. Works on any tensor shaped `[C_in, ...]`; the trailing
/// dims are flattened into positions. Also serves as the linear layer for
/// attention and FFNs.
#[derive(Clone, Debug)]
pub struct PointwiseConv {
    pub weight: Param, // [C_out, C_in]
    pub bias: Param,   // [C_out]
    in_c: usize,
    out_c: usize,
    cache_x: Option<Tensor>,
}

impl PointwiseConv {
    pub fn new<R: Rng>(
        name: &str,
        group: ParamGroup,
        in_c: usize,
        out_c: usize,
        w_std: f64,
        rng: &mut R,
    ) -> Self {
        PointwiseConv {
            weight: Param::new(
                format!("{name}.weight"),
                group,
                Tensor::randn(&[out_c, in_c], w_std, rng),
            ),
            bias: Param::new(format!("{name}.bias"), group, Tensor::zeros(&[out_c])),
            in_c,
            out_c,
            cache_x: None,
        }
    }

    /// He initialization for layers followed by GELU.
    pub fn he<R: Rng>(name: &str, group: ParamGroup, in_c: usize, out_c: usize, rng: &mut R) -> Self {
        Self::new(name, group, in_c, out_c, (2.0 / in_c as f64).sqrt(), rng)
    }

    /// Zero-initialized weights (adapter up-projections start as identity-0).
    pub fn zeroed(name: &str, group: ParamGroup, in_c: usize, out_c: usize) -> Self {
        PointwiseConv {
            weight: Param::new(
                format!("{name}.weight"),
                group,
                Tensor::zeros(&[out_c, in_c]),
            ),
            bias: Param::new(format!("{name}.bias"), group, Tensor::zeros(&[out_c])),
            in_c,
            out_c,
            cache_x: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let shape = x.shape();
        assert_eq!(shape[0], self.in_c, "pointwise conv channel mismatch");
        let p: usize = shape[1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape[0] = self.out_c;
        let mut y = Tensor::zeros(&out_shape);
        {
            let yd = y.data_mut();
            let b = self.bias.value.data();
            for (o, row) in yd.chunks_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v = b[o]);
            }
            matmul_acc(self.weight.value.data(), x.data(), yd, self.out_c, self.in_c, p);
        }
        self.cache_x = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.cache_x.as_ref().expect("backward before forward");
        let p: usize = x.shape()[1..].iter().product();
        // dW += dy x^T ; db += row sums ; dx = W^T dy
        matmul_bt_acc(
            dy.data(),
            x.data(),
            self.weight.grad.data_mut(),
            self.out_c,
            p,
            self.in_c,
        );
        {
            let db = self.bias.grad.data_mut();
            for (o, row) in dy.data().chunks(p).enumerate() {
                db[o] += row.iter().sum::<f64>();
            }
        }
        let mut dx = Tensor::zeros(x.shape());
        matmul_at_acc(
            self.weight.value.data(),
            dy.data(),
            dx.data_mut(),
            self.in_c,
            self.out_c,
            p,
        );
        dx
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Depthwise 3x3x3 convolution, stride 1, zero padding 1, on `[C, T, H, W]`.
#[derive(Clone, Debug)]
pub struct DepthwiseConv3 {
    pub weight: Param, // [C, 27]
    pub bias: Param,   // [C]
    channels: usize,
    cache_x: Option<Tensor>,
}

impl DepthwiseConv3 {
    pub fn new<R: Rng>(name: &str, group: ParamGroup, channels: usize, rng: &mut R) -> Self {
        DepthwiseConv3 {
            weight: Param::new(
                format!("{name}.weight"),
                group,
                Tensor::randn(&[channels, 27], (2.0_f64 / 27.0).sqrt(), rng),
            ),
            bias: Param::new(format!("{name}.bias"), group, Tensor::zeros(&[channels])),
            channels,
            cache_x: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let &[c, t, h, w] = x.shape() else {
            panic!("depthwise conv expects [C,T,H,W]");
        };
        assert_eq!(c, self.channels);
        let mut y = Tensor::zeros(&[c, t, h, w]);
        let plane = h * w;
        let vol = t * plane;
        let xd = x.data();
        let yd = y.data_mut();
        let wd = self.weight.value.data();
        let bd = self.bias.value.data();
        for ci in 0..c {
            let xc = &xd[ci * vol..(ci + 1) * vol];
            let yc = &mut yd[ci * vol..(ci + 1) * vol];
            let wc = &wd[ci * 27..(ci + 1) * 27];
            let b = bd[ci];
            for ti in 0..t {
                for hi in 0..h {
                    let interior =
                        ti >= 1 && ti + 1 < t && hi >= 1 && hi + 1 < h;
                    for wi in 0..w {
                        let mut acc = b;
                        if interior && wi >= 1 && wi + 1 < w {
                            // fast path: all 27 taps in bounds
                            let mut k = 0;
                            for dt in 0..3 {
                                let tb = (ti + dt - 1) * plane;
                                for dh in 0..3 {
                                    let hb = tb + (hi + dh - 1) * w + wi - 1;
                                    acc += wc[k] * xc[hb]
                                        + wc[k + 1] * xc[hb + 1]
                                        + wc[k + 2] * xc[hb + 2];
                                    k += 3;
                                }
                            }
                        } else {
                            let mut k = 0;
                            for dt in 0..3_isize {
                                let tt = ti as isize + dt - 1;
                                for dh in 0..3_isize {
                                    let hh = hi as isize + dh - 1;
                                    for dw in 0..3_isize {
                                        let ww = wi as isize + dw - 1;
                                        if tt >= 0
                                            && (tt as usize) < t
                                            && hh >= 0
                                            && (hh as usize) < h
                                            && ww >= 0
                                            && (ww as usize) < w
                                        {
                                            acc += wc[k]
                                                * xc[tt as usize * plane
                                                    + hh as usize * w
                                                    + ww as usize];
                                        }
                                        k += 1;
                                    }
                                }
                            }
                        }
                        yc[ti * plane + hi * w + wi] = acc;
                    }
                }
            }
        }
        self.cache_x = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.cache_x.as_ref().expect("backward before forward");
        let &[c, t, h, w] = x.shape() else { unreachable!() };
        let plane = h * w;
        let vol = t * plane;
        let mut dx = Tensor::zeros(&[c, t, h, w]);
        let xd = x.data();
        let dyd = dy.data();
        let wd = self.weight.value.data();
        let dwd = self.weight.grad.data_mut();
        let dbd = self.bias.grad.data_mut();
        let dxd = dx.data_mut();
        for ci in 0..c {
            let xc = &xd[ci * vol..(ci + 1) * vol];
            let dyc = &dyd[ci * vol..(ci + 1) * vol];
            let wc = &wd[ci * 27..(ci + 1) * 27];
            let dwc = &mut dwd[ci * 27..(ci + 1) * 27];
            let dxc = &mut dxd[ci * vol..(ci + 1) * vol];
            for ti in 0..t {
                for hi in 0..h {
                    for wi in 0..w {
                        let g = dyc[ti * plane + hi * w + wi];
                        if g == 0.0 {
                            continue;
                        }
                        dbd[ci] += g;
                        let mut k = 0;
                        for dt in 0..3_isize {
                            let tt = ti as isize + dt - 1;
                            for dh in 0..3_isize {
                                let hh = hi as isize + dh - 1;
                                for dw in 0..3_isize {
                                    let ww = wi as isize + dw - 1;
                                    if tt >= 0
                                        && (tt as usize) < t
                                        && hh >= 0
                                        && (hh as usize) < h
                                        && ww >= 0
                                        && (ww as usize) < w
                                    {
                                        let idx = tt as usize * plane
                                            + hh as usize * w
                                            + ww as usize;
                                        dwc[k] += g * xc[idx];
                                        dxc[idx] += g * wc[k];
                                    }
                                    k += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Non-overlapping strided convolution (kernel == stride), used at stage
/// entries for downsampling. Spatial dims must be divisible by the stride;
/// the temporal axis is zero-padded on the right so the output length is
/// `ceil(T / stride_t)`.
#[derive(Clone, Debug)]
pub struct PatchEmbed3 {
    pub weight: Param, // [C_out, C_in * st * sh * sw]
    pub bias: Param,   // [C_out]
    in_c: usize,
    out_c: usize,
    stride: (usize, usize, usize),
    cache: Option<(Tensor /* patches */, Vec<usize> /* in shape */)>,
}

impl PatchEmbed3 {
    pub fn new<R: Rng>(
        name: &str,
        group: ParamGroup,
        in_c: usize,
        out_c: usize,
        stride: (usize, usize, usize),
        rng: &mut R,
    ) -> Self {
        let k = in_c * stride.0 * stride.1 * stride.2;
        PatchEmbed3 {
            weight: Param::new(
                format!("{name}.weight"),
                group,
                Tensor::randn(&[out_c, k], (2.0 / k as f64).sqrt(), rng),
            ),
            bias: Param::new(format!("{name}.bias"), group, Tensor::zeros(&[out_c])),
            in_c,
            out_c,
            stride,
            cache: None,
        }
    }

    pub fn out_time(&self, t: usize) -> usize {
        t.div_ceil(self.stride.0)
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let &[c, t, h, w] = x.shape() else {
            panic!("patch embed expects [C,T,H,W]");
        };
        assert_eq!(c, self.in_c);
        let (st, sh, sw) = self.stride;
        assert_eq!(h % sh, 0, "spatial dim not divisible by stride");
        assert_eq!(w % sw, 0, "spatial dim not divisible by stride");
        let (to, ho, wo) = (t.div_ceil(st), h / sh, w / sw);
        let p = to * ho * wo;
        let k = c * st * sh * sw;

        // im2col: gather each output patch into a column of [k, p]
        let mut patches = Tensor::zeros(&[k, p]);
        {
            let pd = patches.data_mut();
            let xd = x.data();
            let plane = h * w;
            let vol = t * plane;
            let mut row = 0;
            for ci in 0..c {
                for dt in 0..st {
                    for dh in 0..sh {
                        for dw in 0..sw {
                            let prow = &mut pd[row * p..(row + 1) * p];
                            let mut col = 0;
                            for ti in 0..to {
                                let tt = ti * st + dt;
                                if tt >= t {
                                    col += ho * wo;
                                    continue; // zero padding
                                }
                                let base = ci * vol + tt * plane;
                                for hi in 0..ho {
                                    let hb = base + (hi * sh + dh) * w + dw;
                                    for wi in 0..wo {
                                        prow[col] = xd[hb + wi * sw];
                                        col += 1;
                                    }
                                }
                            }
                            row += 1;
                        }
                    }
                }
            }
        }

        let mut y = Tensor::zeros(&[self.out_c, to, ho, wo]);
        {
            let yd = y.data_mut();
            let b = self.bias.value.data();
            for (o, chunk) in yd.chunks_mut(p).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b[o]);
            }
            matmul_acc(self.weight.value.data(), patches.data(), yd, self.out_c, k, p);
        }
        self.cache = Some((patches, x.shape().to_vec()));
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (patches, in_shape) = self.cache.as_ref().expect("backward before forward");
        let (st, sh, sw) = self.stride;
        let (c, t, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
        let (to, ho, wo) = (t.div_ceil(st), h / sh, w / sw);
        let p = to * ho * wo;
        let k = c * st * sh * sw;

        matmul_bt_acc(
            dy.data(),
            patches.data(),
            self.weight.grad.data_mut(),
            self.out_c,
            p,
            k,
        );
        {
            let db = self.bias.grad.data_mut();
            for (o, row) in dy.data().chunks(p).enumerate() {
                db[o] += row.iter().sum::<f64>();
            }
        }

        let mut dpatches = Tensor::zeros(&[k, p]);
        matmul_at_acc(
            self.weight.value.data(),
            dy.data(),
            dpatches.data_mut(),
            k,
            self.out_c,
            p,
        );

        // col2im: scatter patch gradients back (patches are disjoint)
        let mut dx = Tensor::zeros(in_shape);
        {
            let dxd = dx.data_mut();
            let pd = dpatches.data();
            let plane = h * w;
            let vol = t * plane;
            let mut row = 0;
            for ci in 0..c {
                for dt in 0..st {
                    for dh in 0..sh {
                        for dw in 0..sw {
                            let prow = &pd[row * p..(row + 1) * p];
                            let mut col = 0;
                            for ti in 0..to {
                                let tt = ti * st + dt;
                                if tt >= t {
                                    col += ho * wo;
                                    continue;
                                }
                                let base = ci * vol + tt * plane;
                                for hi in 0..ho {
                                    let hb = base + (hi * sh + dh) * w + dw;
                                    for wi in 0..wo {
                                        dxd[hb + wi * sw] += prow[col];
                                        col += 1;
                                    }
                                }
                            }
                            row += 1;
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// 1D convolution over time, kernel 3, stride 1, zero padding 1: `[C_in, T]
/// -> [C_out, T]`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: Param, // [C_out, C_in * 3]
    pub bias: Param,   // [C_out]
    in_c: usize,
    out_c: usize,
    cache_x: Option<Tensor>,
}

impl Conv1d {
    pub fn new<R: Rng>(name: &str, group: ParamGroup, in_c: usize, out_c: usize, rng: &mut R) -> Self {
        let k = in_c * 3;
        Conv1d {
            weight: Param::new(
                format!("{name}.weight"),
                group,
                Tensor::randn(&[out_c, k], (2.0 / k as f64).sqrt(), rng),
            ),
            bias: Param::new(format!("{name}.bias"), group, Tensor::zeros(&[out_c])),
            in_c,
            out_c,
            cache_x: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let &[c, t] = x.shape() else {
            panic!("conv1d expects [C, T]");
        };
        assert_eq!(c, self.in_c);
        let mut y = Tensor::zeros(&[self.out_c, t]);
        let xd = x.data();
        let wd = self.weight.value.data();
        let bd = self.bias.value.data();
        let yd = y.data_mut();
        for o in 0..self.out_c {
            let yo = &mut yd[o * t..(o + 1) * t];
            yo.iter_mut().for_each(|v| *v = bd[o]);
            for i in 0..c {
                let xi = &xd[i * t..(i + 1) * t];
                let w3 = &wd[(o * c + i) * 3..(o * c + i) * 3 + 3];
                for ti in 0..t {
                    let mut acc = w3[1] * xi[ti];
                    if ti >= 1 {
                        acc += w3[0] * xi[ti - 1];
                    }
                    if ti + 1 < t {
                        acc += w3[2] * xi[ti + 1];
                    }
                    yo[ti] += acc;
                }
            }
        }
        self.cache_x = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.cache_x.as_ref().expect("backward before forward");
        let &[c, t] = x.shape() else { unreachable!() };
        let mut dx = Tensor::zeros(&[c, t]);
        let xd = x.data();
        let dyd = dy.data();
        let wd = self.weight.value.data();
        let dwd = self.weight.grad.data_mut();
        let dbd = self.bias.grad.data_mut();
        let dxd = dx.data_mut();
        for o in 0..self.out_c {
            let dyo = &dyd[o * t..(o + 1) * t];
            dbd[o] += dyo.iter().sum::<f64>();
            for i in 0..c {
                let xi = &xd[i * t..(i + 1) * t];
                let w3 = &wd[(o * c + i) * 3..(o * c + i) * 3 + 3];
                let dw3 = &mut dwd[(o * c + i) * 3..(o * c + i) * 3 + 3];
                let dxi = &mut dxd[i * t..(i + 1) * t];
                for ti in 0..t {
                    let g = dyo[ti];
                    if g == 0.0 {
                        continue;
                    }
                    dw3[1] += g * xi[ti];
                    dxi[ti] += g * w3[1];
                    if ti >= 1 {
                        dw3[0] += g * xi[ti - 1];
                        dxi[ti - 1] += g * w3[0];
                    }
                    if ti + 1 < t {
                        dw3[2] += g * xi[ti + 1];
                        dxi[ti + 1] += g * w3[2];
                    }
                }
            }
        }
        dx
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Transposed 1D convolution with kernel == stride (non-overlapping
/// upsampling): `[C_in, T] -> [C_out, T * stride]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose1d {
    pub weight: Param, // [C_in, C_out * stride]
    pub bias: Param,   // [C_out]
    in_c: usize,
    out_c: usize,
    stride: usize,
    cache_x: Option<Tensor>,
}

impl ConvTranspose1d {
    pub fn new<R: Rng>(
        name: &str,
        group: ParamGroup,
        in_c: usize,
        out_c: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        ConvTranspose1d {
            weight: Param::new(
                format!("{name}.weight"),
                group,
                Tensor::randn(&[in_c, out_c * stride], (1.0 / in_c as f64).sqrt(), rng),
            ),
            bias: Param::new(format!("{name}.bias"), group, Tensor::zeros(&[out_c])),
            in_c,
            out_c,
            stride,
            cache_x: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let &[c, t] = x.shape() else {
            panic!("conv transpose expects [C, T]");
        };
        assert_eq!(c, self.in_c);
        let s = self.stride;
        let to = t * s;
        let mut y = Tensor::zeros(&[self.out_c, to]);
        let xd = x.data();
        let wd = self.weight.value.data();
        let bd = self.bias.value.data();
        let yd = y.data_mut();
        for o in 0..self.out_c {
            let yo = &mut yd[o * to..(o + 1) * to];
            yo.iter_mut().for_each(|v| *v = bd[o]);
            for i in 0..c {
                let xi = &xd[i * t..(i + 1) * t];
                let wk = &wd[i * self.out_c * s + o * s..i * self.out_c * s + (o + 1) * s];
                for ti in 0..t {
                    let xv = xi[ti];
                    let base = ti * s;
                    for k in 0..s {
                        yo[base + k] += wk[k] * xv;
                    }
                }
            }
        }
        self.cache_x = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.cache_x.as_ref().expect("backward before forward");
        let &[c, t] = x.shape() else { unreachable!() };
        let s = self.stride;
        let to = t * s;
        let mut dx = Tensor::zeros(&[c, t]);
        let xd = x.data();
        let dyd = dy.data();
        let wd = self.weight.value.data();
        let dwd = self.weight.grad.data_mut();
        let dbd = self.bias.grad.data_mut();
        let dxd = dx.data_mut();
        for o in 0..self.out_c {
            let dyo = &dyd[o * to..(o + 1) * to];
            dbd[o] += dyo.iter().sum::<f64>();
            for i in 0..c {
                let xi = &xd[i * t..(i + 1) * t];
                let wk_base = i * self.out_c * s + o * s;
                let dxi = &mut dxd[i * t..(i + 1) * t];
                for ti in 0..t {
                    let base = ti * s;
                    let mut acc = 0.0;
                    for k in 0..s {
                        let g = dyo[base + k];
                        dwd[wk_base + k] += g * xi[ti];
                        acc += g * wd[wk_base + k];
                    }
                    dxi[ti] += acc;
                }
            }
        }
        dx
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::{check_input_gradient, check_param_gradients};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pointwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[3, 2, 2, 2], 1.0, &mut rng);
        let mut layer = PointwiseConv::he("pw", ParamGroup::Backbone, 3, 5, &mut rng);
        let e = check_input_gradient(&x, |l, inp| l.forward(inp), |l, d| l.backward(d), &mut layer);
        assert!(e < 1e-7, "input grad rel err {e}");
        let e = check_param_gradients(&x, |l, inp| l.forward(inp), |l, d| { l.backward(d); }, |l, f| l.visit_params(f), &mut layer);
        assert!(e < 1e-7, "param grad rel err {e}");
    }

    #[test]
    fn depthwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[2, 4, 3, 3], 1.0, &mut rng);
        let mut layer = DepthwiseConv3::new("dw", ParamGroup::Backbone, 2, &mut rng);
        let e = check_input_gradient(&x, |l, inp| l.forward(inp), |l, d| l.backward(d), &mut layer);
        assert!(e < 1e-7, "input grad rel err {e}");
        let e = check_param_gradients(&x, |l, inp| l.forward(inp), |l, d| { l.backward(d); }, |l, f| l.visit_params(f), &mut layer);
        assert!(e < 1e-7, "param grad rel err {e}");
    }

    #[test]
    fn patch_embed_shapes_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // odd T exercises the right-padding path: ceil(5/2) = 3
        let x = Tensor::randn(&[2, 5, 4, 4], 1.0, &mut rng);
        let mut layer = PatchEmbed3::new("pe", ParamGroup::Backbone, 2, 3, (2, 2, 2), &mut rng);
        let y = layer.forward(&x);
        assert_eq!(y.shape(), &[3, 3, 2, 2]);
        let e = check_input_gradient(&x, |l, inp| l.forward(inp), |l, d| l.backward(d), &mut layer);
        assert!(e < 1e-7, "input grad rel err {e}");
        let e = check_param_gradients(&x, |l, inp| l.forward(inp), |l, d| { l.backward(d); }, |l, f| l.visit_params(f), &mut layer);
        assert!(e < 1e-7, "param grad rel err {e}");
    }

    #[test]
    fn conv1d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[3, 7], 1.0, &mut rng);
        let mut layer = Conv1d::new("c1", ParamGroup::Head, 3, 2, &mut rng);
        let e = check_input_gradient(&x, |l, inp| l.forward(inp), |l, d| l.backward(d), &mut layer);
        assert!(e < 1e-7, "input grad rel err {e}");
        let e = check_param_gradients(&x, |l, inp| l.forward(inp), |l, d| { l.backward(d); }, |l, f| l.visit_params(f), &mut layer);
        assert!(e < 1e-7, "param grad rel err {e}");
    }

    #[test]
    fn conv_transpose_upsamples_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let mut layer = ConvTranspose1d::new("ct", ParamGroup::Head, 3, 2, 4, &mut rng);
        let y = layer.forward(&x);
        assert_eq!(y.shape(), &[2, 20]);
        let e = check_input_gradient(&x, |l, inp| l.forward(inp), |l, d| l.backward(d), &mut layer);
        assert!(e < 1e-7, "input grad rel err {e}");
        let e = check_param_gradients(&x, |l, inp| l.forward(inp), |l, d| { l.backward(d); }, |l, f| l.visit_params(f), &mut layer);
        assert!(e < 1e-7, "param grad rel err {e}");
    }
}
