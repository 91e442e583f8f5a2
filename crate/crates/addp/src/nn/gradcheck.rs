//! Central finite-difference gradient verification.
//!
//! A random linear functional `L(y) = sum(c * y)` turns any layer output
//! into a scalar; its analytic input/parameter gradients are compared with
//! central differences.

use super::tensor::Tensor;
use super::Param;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;

/// Relative L2 distance between two gradient vectors.
pub fn l2_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    diff.sqrt() / na.sqrt().max(nb.sqrt()).max(1e-12)
}

fn loss_weights(shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1057);
    Tensor::randn(shape, 1.0, &mut rng)
}

fn scalar_loss(y: &Tensor, c: &Tensor) -> f64 {
    y.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
}

/// Compare the layer's analytic input gradient against central differences.
/// Returns the relative L2 error.
pub fn check_input_gradient<L>(
    x: &Tensor,
    mut forward: impl FnMut(&mut L, &Tensor) -> Tensor,
    mut backward: impl FnMut(&mut L, &Tensor) -> Tensor,
    layer: &mut L,
) -> f64 {
    let y0 = forward(layer, x);
    let c = loss_weights(y0.shape());
    let analytic = backward(layer, &c);

    let mut fd = Tensor::zeros(x.shape());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + EPS;
        let lp = scalar_loss(&forward(layer, &xp), &c);
        xp.data_mut()[i] = orig - EPS;
        let lm = scalar_loss(&forward(layer, &xp), &c);
        xp.data_mut()[i] = orig;
        fd.data_mut()[i] = (lp - lm) / (2.0 * EPS);
    }
    l2_rel_err(fd.data(), analytic.data())
}

/// Compare analytic parameter gradients against central differences.
/// Returns the worst relative L2 error across the layer's parameters.
pub fn check_param_gradients<L>(
    x: &Tensor,
    mut forward: impl FnMut(&mut L, &Tensor) -> Tensor,
    mut backward: impl FnMut(&mut L, &Tensor),
    mut visit: impl FnMut(&mut L, &mut dyn FnMut(&mut Param)),
    layer: &mut L,
) -> f64 {
    let y0 = forward(layer, x);
    let c = loss_weights(y0.shape());

    visit(layer, &mut |p| p.zero_grad());
    forward(layer, x);
    backward(layer, &c);

    let mut analytic: Vec<Vec<f64>> = Vec::new();
    let mut sizes: Vec<usize> = Vec::new();
    visit(layer, &mut |p| {
        analytic.push(p.grad.data().to_vec());
        sizes.push(p.value.len());
    });

    let mut worst = 0.0_f64;
    for (pi, &len) in sizes.iter().enumerate() {
        let mut fd = vec![0.0; len];
        for ei in 0..len {
            let set = |delta: f64, l: &mut L, visit: &mut dyn FnMut(&mut L, &mut dyn FnMut(&mut Param))| {
                let mut idx = 0;
                visit(l, &mut |p| {
                    if idx == pi {
                        p.value.data_mut()[ei] += delta;
                    }
                    idx += 1;
                });
            };
            set(EPS, layer, &mut |l, f| visit(l, f));
            let lp = scalar_loss(&forward(layer, x), &c);
            set(-2.0 * EPS, layer, &mut |l, f| visit(l, f));
            let lm = scalar_loss(&forward(layer, x), &c);
            set(EPS, layer, &mut |l, f| visit(l, f));
            fd[ei] = (lp - lm) / (2.0 * EPS);
        }
        worst = worst.max(l2_rel_err(&fd, &analytic[pi]));
    }
    worst
}
