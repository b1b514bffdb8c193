//! Shared fixtures for benchmarks.

use geomt::data::synthetic::{synthesize, Role};
use geomt::data::{four_crop, Patch, SyntheticConfig};
use geomt::network::Tensor;
use geomt::rng::seeded;
use geomt::training::{TrainConfig, UdaBatch};
use rand::Rng as _;

/// Uniform values in [-1, 1).
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seeded(seed, 0);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// Training configuration of the synthetic adaptation run with `batch` samples.
pub fn train_config(batch: usize) -> TrainConfig {
    let mut cfg = TrainConfig { batch_size: batch, ..TrainConfig::default() };
    cfg.model.input_size = 32;
    cfg.geo_head.pool_output = 2;
    cfg
}

/// One batch of 32x32 source and target crops from the default generator.
pub fn uda_batch(cfg: &TrainConfig) -> UdaBatch {
    let syn = SyntheticConfig { patches_per_domain: cfg.batch_size, ..SyntheticConfig::default() };
    let (mut source, mut target): (Vec<Patch>, Vec<Patch>) = (Vec::new(), Vec::new());
    for (spec, patches) in synthesize(&syn).expect("default generator config is valid") {
        for p in patches {
            let mut crop = four_crop(&p).expect("even square patch")[0].clone();
            match spec.role {
                Role::Source => source.push(crop),
                Role::Target => {
                    crop.label = None;
                    target.push(crop);
                }
            }
        }
    }
    source.truncate(cfg.batch_size);
    target.truncate(cfg.batch_size);
    UdaBatch::build(&source, &target, cfg, &mut seeded(0, 4)).expect("batch builds")
}
