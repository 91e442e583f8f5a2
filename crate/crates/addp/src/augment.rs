//! Prototype-based feature augmentation: AdaIN style replay on the shallow
//! feature and SVD noise mixing on the high-level feature, each applied
//! independently with probability p during incremental training.

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use crate::proto::{NoisePrototype, PrototypeStore, StylePrototype};
use nalgebra::DMatrix;
use rand::Rng;

/// Channels with standard deviation below this are shifted without
/// standardization.
pub const SIGMA_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct AdainCache {
    /// Standardized feature per channel (branch-A channels) or zeros.
    xhat: Tensor,
    /// Per-channel scale sigma_k / sigma_new (1.0 on shift-only channels).
    factor: Vec<f64>,
    /// Per-channel flag: true when standardization was applied.
    standardized: Vec<bool>,
}

/// AdaIN: re-standardize each channel of `h` to the target statistics
/// `(mu_k, sigma_k)`. Channels whose own standard deviation falls below
/// [`SIGMA_EPS`] are mean-shifted only.
pub fn adain_forward(h: &Tensor, mu_k: &[f64], sigma_k: &[f64]) -> Result<(Tensor, AdainCache)> {
    let c = h.shape()[0];
    if mu_k.len() != c || sigma_k.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "style prototype has {} channels, feature has {c}",
            mu_k.len()
        )));
    }
    let p: usize = h.shape()[1..].iter().product();
    if p < 2 {
        return Err(Error::ShapeMismatch("feature needs >= 2 positions".into()));
    }
    let mut out = h.clone();
    let mut xhat = Tensor::zeros(h.shape());
    let mut factor = vec![1.0; c];
    let mut standardized = vec![false; c];
    {
        let od = out.data_mut();
        let xh = xhat.data_mut();
        for ci in 0..c {
            let chunk = &mut od[ci * p..(ci + 1) * p];
            let mean = chunk.iter().sum::<f64>() / p as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / p as f64;
            let sigma = var.sqrt();
            if sigma >= SIGMA_EPS {
                let xc = &mut xh[ci * p..(ci + 1) * p];
                for (o, x) in chunk.iter_mut().zip(xc.iter_mut()) {
                    *x = (*o - mean) / sigma;
                    *o = sigma_k[ci] * *x + mu_k[ci];
                }
                factor[ci] = sigma_k[ci] / sigma;
                standardized[ci] = true;
            } else {
                chunk.iter_mut().for_each(|v| *v = *v - mean + mu_k[ci]);
            }
        }
    }
    #[cfg(debug_assertions)]
    {
        // AdaIN post-condition: transferred channel statistics equal the
        // prototype's.
        let od = out.data();
        for ci in 0..c {
            if !standardized[ci] {
                continue;
            }
            let chunk = &od[ci * p..(ci + 1) * p];
            let mean = chunk.iter().sum::<f64>() / p as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / p as f64;
            debug_assert!(
                (mean - mu_k[ci]).abs() < 1e-4 * (1.0 + mu_k[ci].abs()),
                "adain mean drift on channel {ci}"
            );
            debug_assert!(
                (var.sqrt() - sigma_k[ci]).abs() < 1e-4 * (1.0 + sigma_k[ci]),
                "adain sigma drift on channel {ci}"
            );
        }
    }
    Ok((
        out,
        AdainCache {
            xhat,
            factor,
            standardized,
        },
    ))
}

/// Gradient of [`adain_forward`] with respect to `h`.
pub fn adain_backward(cache: &AdainCache, dy: &Tensor) -> Tensor {
    let c = dy.shape()[0];
    let p: usize = dy.shape()[1..].iter().product();
    let mut dx = Tensor::zeros(dy.shape());
    let dyd = dy.data();
    let xh = cache.xhat.data();
    let dxd = dx.data_mut();
    for ci in 0..c {
        let g = &dyd[ci * p..(ci + 1) * p];
        let o = &mut dxd[ci * p..(ci + 1) * p];
        let mean_g = g.iter().sum::<f64>() / p as f64;
        if cache.standardized[ci] {
            let xc = &xh[ci * p..(ci + 1) * p];
            let mean_gx = g.iter().zip(xc).map(|(a, b)| a * b).sum::<f64>() / p as f64;
            let f = cache.factor[ci];
            for ((out, &gv), &xv) in o.iter_mut().zip(g).zip(xc) {
                *out = f * (gv - mean_g - xv * mean_gx);
            }
        } else {
            for (out, &gv) in o.iter_mut().zip(g) {
                *out = gv - mean_g;
            }
        }
    }
    dx
}

/// AdaIN against a style prototype (the public augmentation operation).
pub fn adain(h: &Tensor, proto: &StylePrototype) -> Result<Tensor> {
    Ok(adain_forward(h, &proto.mu, &proto.sigma)?.0)
}

/// SVD of a `[rows, cols]` tensor with singular values in descending order.
/// Returns (U, singular values, V^T).
pub(crate) fn sorted_svd(z: &Tensor) -> Result<(DMatrix<f64>, Vec<f64>, DMatrix<f64>)> {
    let &[rows, cols] = z.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "expected a matrix, got shape {:?}",
            z.shape()
        )));
    };
    if !z.all_finite() {
        return Err(Error::InvalidArgument("non-finite matrix entries".into()));
    }
    let m = DMatrix::from_row_slice(rows, cols, z.data());
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd with u");
    let vt = svd.v_t.expect("svd with v_t");
    let s: Vec<f64> = svd.singular_values.iter().cloned().collect();
    // nalgebra returns descending singular values; keep a defensive sort.
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap());
    if order.windows(2).any(|w| w[0] > w[1]) {
        let u2 = DMatrix::from_fn(u.nrows(), u.ncols(), |r, c| u[(r, order[c])]);
        let vt2 = DMatrix::from_fn(vt.nrows(), vt.ncols(), |r, c| vt[(order[r], c)]);
        let s2: Vec<f64> = order.iter().map(|&i| s[i]).collect();
        return Ok((u2, s2, vt2));
    }
    Ok((u, s, vt))
}

#[derive(Clone, Debug)]
pub struct MixCache {
    u: DMatrix<f64>,
    vt: DMatrix<f64>,
    alpha: usize,
}

/// Keep the first `alpha` singular components of `z` (the signal part) and
/// add the noise prototype matrix `n`.
pub fn mix_noise_forward(z: &Tensor, n: &Tensor, alpha: usize) -> Result<(Tensor, MixCache)> {
    if z.shape() != n.shape() {
        return Err(Error::ShapeMismatch(format!(
            "noise prototype shape {:?} does not match feature shape {:?}",
            n.shape(),
            z.shape()
        )));
    }
    let &[rows, cols] = z.shape() else {
        return Err(Error::ShapeMismatch("expected [C2, T2]".into()));
    };
    let r = rows.min(cols);
    if alpha > r {
        return Err(Error::InvalidArgument(format!(
            "alpha {alpha} exceeds min(C2, T2) = {r}"
        )));
    }
    let (u, s, vt) = sorted_svd(z)?;
    let mut out = Tensor::zeros(&[rows, cols]);
    {
        let od = out.data_mut();
        for i in 0..alpha {
            let si = s[i];
            for rr in 0..rows {
                let urs = u[(rr, i)] * si;
                for cc in 0..cols {
                    od[rr * cols + cc] += urs * vt[(i, cc)];
                }
            }
        }
        for (o, nv) in od.iter_mut().zip(n.data()) {
            *o += nv;
        }
    }
    Ok((out, MixCache { u, vt, alpha }))
}

/// Gradient of [`mix_noise_forward`] with respect to `z`.
///
/// The decomposition is treated as a fixed projection per step (stop-gradient
/// on U and V); gradients flow through the kept singular values and the
/// additive path: dz = sum_{i<alpha} (u_i^T G v_i) u_i v_i^T.
pub fn mix_noise_backward(cache: &MixCache, dy: &Tensor) -> Tensor {
    let &[rows, cols] = dy.shape() else { unreachable!() };
    let g = dy.data();
    let mut dz = Tensor::zeros(&[rows, cols]);
    let dzd = dz.data_mut();
    for i in 0..cache.alpha {
        let mut s_grad = 0.0;
        for rr in 0..rows {
            let ur = cache.u[(rr, i)];
            if ur == 0.0 {
                continue;
            }
            let mut acc = 0.0;
            for cc in 0..cols {
                acc += g[rr * cols + cc] * cache.vt[(i, cc)];
            }
            s_grad += ur * acc;
        }
        for rr in 0..rows {
            let urs = cache.u[(rr, i)] * s_grad;
            for cc in 0..cols {
                dzd[rr * cols + cc] += urs * cache.vt[(i, cc)];
            }
        }
    }
    dz
}

/// Noise mixing against a prototype (the public augmentation operation).
pub fn mix_noise(z: &Tensor, proto: &NoisePrototype, alpha: usize) -> Result<Tensor> {
    Ok(mix_noise_forward(z, &proto.n, alpha)?.0)
}

/// Outcome of the per-clip augmentation draw: indices into the pooled store.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AugmentDraw {
    pub style: Option<usize>,
    pub noise: Option<usize>,
}

/// Draw the two independent Bernoulli decisions and, when they fire, pick a
/// uniformly random prototype from the pooled store. An empty store is a
/// no-op (task-1 behavior).
pub fn maybe_augment<R: Rng>(
    store: &PrototypeStore,
    p_style: f64,
    p_noise: f64,
    rng: &mut R,
) -> AugmentDraw {
    if store.is_empty() {
        return AugmentDraw::default();
    }
    let mut draw = AugmentDraw::default();
    if rng.gen_bool(p_style.clamp(0.0, 1.0)) {
        draw.style = Some(rng.gen_range(0..store.styles().len()));
    }
    if rng.gen_bool(p_noise.clamp(0.0, 1.0)) {
        draw.noise = Some(rng.gen_range(0..store.noises().len()));
    }
    draw
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::l2_rel_err;
    use crate::proto::style_stats;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel_frob(a: &Tensor, b: &Tensor) -> f64 {
        let num: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        num / b.sq_norm().sqrt().max(1e-12)
    }

    #[test]
    fn adain_identity_transfer() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = Tensor::randn(&[4, 3, 2, 2], 1.5, &mut rng);
        let (mu, sigma) = style_stats(&h).unwrap();
        let (out, _) = adain_forward(&h, &mu, &sigma).unwrap();
        assert!(rel_frob(&out, &h) < 1e-5, "identity transfer must return h");
    }

    #[test]
    fn adain_postcondition_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let h = Tensor::randn(&[3, 4, 3, 3], 2.0, &mut rng);
            let mu_k: Vec<f64> = (0..3).map(|_| 4.0 * (rng.gen::<f64>() - 0.5)).collect();
            let sigma_k: Vec<f64> = (0..3).map(|_| 2.0 * rng.gen::<f64>() + 0.1).collect();
            let (out, _) = adain_forward(&h, &mu_k, &sigma_k).unwrap();
            let (mu, sigma) = style_stats(&out).unwrap();
            for c in 0..3 {
                assert!((mu[c] - mu_k[c]).abs() < 1e-5);
                assert!((sigma[c] - sigma_k[c]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn adain_hand_computed_two_channel() {
        // channel 0: values {1, 3} -> mean 2, sigma 1; channel 1: {0, 4} ->
        // mean 2, sigma 2. Target mu=[0,1], sigma=[1,2].
        let h = Tensor::from_vec(&[2, 2], vec![1.0, 3.0, 0.0, 4.0]);
        let (out, _) = adain_forward(&h, &[0.0, 1.0], &[1.0, 2.0]).unwrap();
        // ch0: (1-2)/1*1+0 = -1 ; (3-2)/1*1+0 = 1
        // ch1: (0-2)/2*2+1 = -1 ; (4-2)/2*2+1 = 3
        let expect = [-1.0, 1.0, -1.0, 3.0];
        for (o, e) in out.data().iter().zip(expect) {
            assert!((o - e).abs() < 1e-12, "got {o} want {e}");
        }
    }

    #[test]
    fn adain_constant_channel_shift_only() {
        let h = Tensor::from_vec(&[1, 4], vec![5.0; 4]);
        let (out, _) = adain_forward(&h, &[2.0], &[3.0]).unwrap();
        // sigma_new = 0 -> shifted to target mean only
        assert!(out.data().iter().all(|&v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn adain_channel_mismatch_is_error() {
        let h = Tensor::zeros(&[3, 4]);
        assert!(adain_forward(&h, &[0.0; 2], &[1.0; 2]).is_err());
    }

    #[test]
    fn adain_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = Tensor::randn(&[3, 2, 2, 2], 1.0, &mut rng);
        let mu_k = [0.3, -0.2, 1.0];
        let sigma_k = [1.2, 0.5, 2.0];
        let (y0, cache) = adain_forward(&h, &mu_k, &sigma_k).unwrap();
        let c = Tensor::randn(y0.shape(), 1.0, &mut rng);
        let analytic = adain_backward(&cache, &c);
        let mut fd = Tensor::zeros(h.shape());
        let eps = 1e-6;
        let mut hp = h.clone();
        for i in 0..h.len() {
            let orig = hp.data()[i];
            hp.data_mut()[i] = orig + eps;
            let lp: f64 = adain_forward(&hp, &mu_k, &sigma_k)
                .unwrap()
                .0
                .data()
                .iter()
                .zip(c.data())
                .map(|(a, b)| a * b)
                .sum();
            hp.data_mut()[i] = orig - eps;
            let lm: f64 = adain_forward(&hp, &mu_k, &sigma_k)
                .unwrap()
                .0
                .data()
                .iter()
                .zip(c.data())
                .map(|(a, b)| a * b)
                .sum();
            hp.data_mut()[i] = orig;
            fd.data_mut()[i] = (lp - lm) / (2.0 * eps);
        }
        let e = l2_rel_err(fd.data(), analytic.data());
        assert!(e < 1e-6, "adain grad rel err {e}");
    }

    #[test]
    fn mix_full_rank_keep_adds_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let n = Tensor::randn(&[4, 6], 0.1, &mut rng);
        let (out, _) = mix_noise_forward(&z, &n, 4).unwrap();
        let mut expect = z.clone();
        expect.add_assign(&n);
        assert!(rel_frob(&out, &expect) < 1e-9);
    }

    #[test]
    fn mix_self_noise_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Tensor::randn(&[5, 7], 1.0, &mut rng);
        for alpha in [0usize, 1, 3, 5] {
            let n = crate::proto::extract_noise(&z, alpha).unwrap();
            let (out, _) = mix_noise_forward(&z, &n, alpha).unwrap();
            assert!(
                rel_frob(&out, &z) < 1e-5,
                "mask complementarity failed at alpha={alpha}"
            );
        }
    }

    #[test]
    fn mix_zero_noise_is_truncated_svd() {
        // Eckart-Young: alpha=1 with zero prototype equals the best rank-1
        // approximation, against an independent truncation oracle.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // rank-3 matrix: sum of three outer products
        let mut z = Tensor::zeros(&[6, 5]);
        for _ in 0..3 {
            let u = Tensor::randn(&[6], 1.0, &mut rng);
            let v = Tensor::randn(&[5], 1.0, &mut rng);
            let zd = z.data_mut();
            for r in 0..6 {
                for c in 0..5 {
                    zd[r * 5 + c] += u.data()[r] * v.data()[c];
                }
            }
        }
        let n0 = Tensor::zeros(&[6, 5]);
        let (out, _) = mix_noise_forward(&z, &n0, 1).unwrap();
        // oracle: nalgebra SVD truncation built independently here
        let m = DMatrix::from_row_slice(6, 5, z.data());
        let svd = m.svd(true, true);
        let u = svd.u.unwrap();
        let vt = svd.v_t.unwrap();
        let s = svd.singular_values;
        let mut imax = 0;
        for i in 0..s.len() {
            if s[i] > s[imax] {
                imax = i;
            }
        }
        let mut oracle = Tensor::zeros(&[6, 5]);
        let od = oracle.data_mut();
        for r in 0..6 {
            for c in 0..5 {
                od[r * 5 + c] = u[(r, imax)] * s[imax] * vt[(imax, c)];
            }
        }
        assert!(rel_frob(&out, &oracle) < 1e-9);
    }

    #[test]
    fn mix_shape_mismatch_is_error() {
        let z = Tensor::zeros(&[4, 6]);
        let n = Tensor::zeros(&[4, 5]);
        assert!(mix_noise_forward(&z, &n, 1).is_err());
    }

    #[test]
    fn mix_gradient_matches_finite_difference() {
        // Gradient of the kept-signal path with U, V treated as constants:
        // compare against finite differences of the *linearized* map, i.e.
        // the analytic formula applied to a fixed decomposition.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let n = Tensor::randn(&[4, 5], 0.05, &mut rng);
        let (y0, cache) = mix_noise_forward(&z, &n, 2).unwrap();
        let c = Tensor::randn(y0.shape(), 1.0, &mut rng);
        let dz = mix_noise_backward(&cache, &c);
        // The projection P(G) = sum_{i<a} (u_i^T G v_i) u_i v_i^T is its own
        // adjoint; verify <c, P(e_j)> == dz_j elementwise.
        for j in 0..z.len() {
            let mut e = Tensor::zeros(z.shape());
            e.data_mut()[j] = 1.0;
            // P(e): project the unit perturbation
            let mut pe = Tensor::zeros(z.shape());
            {
                let ped = pe.data_mut();
                for i in 0..2 {
                    let mut s_grad = 0.0;
                    for rr in 0..4 {
                        for cc in 0..5 {
                            s_grad += cache.u[(rr, i)] * e.data()[rr * 5 + cc] * cache.vt[(i, cc)];
                        }
                    }
                    for rr in 0..4 {
                        for cc in 0..5 {
                            ped[rr * 5 + cc] += cache.u[(rr, i)] * s_grad * cache.vt[(i, cc)];
                        }
                    }
                }
            }
            let expect: f64 = c.data().iter().zip(pe.data()).map(|(a, b)| a * b).sum();
            assert!(
                (expect - dz.data()[j]).abs() < 1e-9,
                "adjoint mismatch at {j}"
            );
        }
    }

    #[test]
    fn maybe_augment_probabilities() {
        let mut store = PrototypeStore::new();
        store.push_task(
            vec![StylePrototype {
                mu: vec![0.0; 4],
                sigma: vec![1.0; 4],
                task_id: 0,
                cluster_id: 0,
                mae_mean: 0.0,
                mae_count: 0,
            }],
            vec![NoisePrototype {
                n: Tensor::zeros(&[4, 4]),
                task_id: 0,
                cluster_id: 0,
            }],
        );

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // p = 0 -> never fires
        for _ in 0..100 {
            assert_eq!(
                maybe_augment(&store, 0.0, 0.0, &mut rng),
                AugmentDraw::default()
            );
        }
        // p = 1 -> both always fire
        for _ in 0..100 {
            let d = maybe_augment(&store, 1.0, 1.0, &mut rng);
            assert!(d.style.is_some() && d.noise.is_some());
        }
        // Bernoulli frequency at p = 0.5 over 10_000 draws
        let mut style_hits = 0;
        let mut noise_hits = 0;
        for _ in 0..10_000 {
            let d = maybe_augment(&store, 0.5, 0.5, &mut rng);
            style_hits += d.style.is_some() as usize;
            noise_hits += d.noise.is_some() as usize;
        }
        for hits in [style_hits, noise_hits] {
            let rate = hits as f64 / 10_000.0;
            assert!((0.48..=0.52).contains(&rate), "rate {rate}");
        }
    }

    #[test]
    fn maybe_augment_empty_store_noop() {
        let store = PrototypeStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        assert_eq!(
            maybe_augment(&store, 1.0, 1.0, &mut rng),
            AugmentDraw::default()
        );
    }
}
