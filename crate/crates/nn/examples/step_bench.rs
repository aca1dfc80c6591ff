//! Times one train step (forward + backward) per architecture.
//!
//! `cargo run --release -p mammo-nn --example step_bench -- 64 8`

use std::time::Instant;

use mammo_nn::{ArchitectureId, Classifier, ModelConfig, Tensor};

fn main() {
    let mut args = std::env::args().skip(1);
    let size: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(64);
    let batch: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(8);
    for arch in ArchitectureId::ALL {
        let t0 = Instant::now();
        let mut model = Classifier::build(&ModelConfig::new(arch), 0).expect("build");
        let built = t0.elapsed();
        let data: Vec<f32> = (0..batch * size * size)
            .map(|i| ((i % 97) as f32 / 97.0) - 0.5)
            .collect();
        let x = Tensor::from_nchw([batch, 1, size, size], &data).expect("shape");
        model.train();
        let t1 = Instant::now();
        let logits = model.forward(&x).expect("forward");
        let fwd = t1.elapsed();
        model
            .backward(&vec![1.0 / batch as f32; logits.len()])
            .expect("backward");
        let step = t1.elapsed();
        let t2 = Instant::now();
        model.zero_grad();
        let zero = t2.elapsed();
        println!(
            "{arch}: params={} build={built:?} forward={fwd:?} fwd+bwd={step:?} zero_grad={zero:?}",
            model.parameter_count()
        );
    }
}
