#![allow(dead_code)]

use surfacenet_core::dataset::{generate_records, RealImageRecord, SvbrdfRecord};
use surfacenet_core::{Pattern, Raster};
use surfacenet_model::discriminator::DiscriminatorConfig;
use surfacenet_model::generator::GeneratorConfig;
use surfacenet_model::trainer::{TrainConfig, TrainState};

pub fn records(n: usize, res: usize, seed: u64) -> Vec<SvbrdfRecord> {
    generate_records(n, &Pattern::ALL, res, seed).unwrap()
}

/// Photos stand-ins: smooth gradients with a seed-dependent tint.
pub fn real_images(n: usize, res: usize) -> Vec<RealImageRecord> {
    (0..n)
        .map(|i| {
            let tint = [0.3 + 0.1 * (i % 3) as f32, 0.4, 0.5 - 0.05 * (i % 4) as f32];
            RealImageRecord {
                id: format!("photo/{i}"),
                category: "photo".into(),
                image: Raster::from_fn(res, res, 3, |x, y, c| {
                    tint[c] * (0.5 + 0.5 * ((x + 2 * y + i) as f32 / (3 * res) as f32))
                }),
            }
        })
        .collect()
}

pub fn tiny_config() -> TrainConfig {
    TrainConfig { batch_size: 2, max_iterations: 10, learning_rate: 1e-3, checkpoint_interval: 0, ..TrainConfig::desk() }
}

pub fn tiny_state(config: TrainConfig) -> TrainState {
    TrainState::new(config, &GeneratorConfig::tiny(), &DiscriminatorConfig::tiny()).unwrap()
}
