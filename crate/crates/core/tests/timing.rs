//! Rough per-batch timing probe; ignored by default.

use std::time::Instant;

use grcl_core::grcl::network::{build_grcnn, GrcnnConfig};
use grcl_core::kernels::batchnorm::Phase;
use grcl_core::rng::Rng;
use grcl_core::tensor::Tensor;

#[test]
#[ignore]
fn time_tiny_forward_backward() {
    let mut rng = Rng::seed_from_u64(1);
    let net = build_grcnn(&GrcnnConfig::tiny(), &mut rng).unwrap();
    let batch = Tensor::from_fn([32, 3, 32, 32], || rng.uniform(0.0, 1.0));

    let t0 = Instant::now();
    let mut caches = Vec::new();
    for _ in 0..5 {
        let (_, c) = net.forward(&batch, Phase::Train).unwrap();
        caches.push(c.unwrap());
    }
    let fwd = t0.elapsed().as_secs_f64() / 5.0;

    let (logits, cache) = net.forward(&batch, Phase::Train).unwrap();
    let d = Tensor::filled(logits.shape(), 0.01);
    let cache = cache.unwrap();
    let t1 = Instant::now();
    for _ in 0..5 {
        net.backward(&cache, &d).unwrap();
    }
    let bwd = t1.elapsed().as_secs_f64() / 5.0;
    eprintln!("forward {fwd:.4}s/batch32  backward {bwd:.4}s/batch32");
    eprintln!("per image: fwd {:.2}ms bwd {:.2}ms", fwd / 32.0 * 1e3, bwd / 32.0 * 1e3);
}
