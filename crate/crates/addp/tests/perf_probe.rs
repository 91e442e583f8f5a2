use addp::model::{ForwardOptions, Model, ModelConfig};
use addp::nn::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
#[ignore]
fn probe_forward_backward_speed() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut model = Model::new(ModelConfig::default(), &mut rng).unwrap();
    println!("params: {}", model.param_count());
    let x = Tensor::randn(&[3, 160, 32, 32], 0.3, &mut rng);
    let out = model.forward(&x, &ForwardOptions::training()).unwrap();
    let g: Vec<f64> = out.pred.iter().map(|_| 0.1).collect();
    model.backward(&g);
    let t0 = std::time::Instant::now();
    let iters = 4;
    for _ in 0..iters {
        let out = model.forward(&x, &ForwardOptions::training()).unwrap();
        model.zero_grads();
        model.backward(&out.pred.iter().map(|_| 0.1).collect::<Vec<_>>());
    }
    let per = t0.elapsed().as_secs_f64() / iters as f64;
    println!("train f+b per clip: {per:.3}s");
    let t0 = std::time::Instant::now();
    for _ in 0..iters {
        let _ = model.forward(&x, &ForwardOptions::eval()).unwrap();
    }
    println!("eval forward per clip: {:.3}s", t0.elapsed().as_secs_f64() / iters as f64);
}
