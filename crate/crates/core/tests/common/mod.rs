#![allow(dead_code)]

pub mod gradcheck;

use candle_core::DType;
use hyperds::grid::DomainSpec;
use hyperds::io::{Dataset, Shapes};
use hyperds::model::{DecoderVariant, HyperDSConfig, ModelInputs, QueryStream};
use hyperds::nn::{tensor_from_f32, BackboneConfig};
use hyperds::synth::{ScenarioConfig, SyntheticScenario};
use hyperds::train::TrainConfig;
use ndarray::{Array3, Array5};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 4 x 4 input cells, 8 x 8 labels, 16 x 16 satellite cells.
pub fn tiny_domain() -> DomainSpec {
    DomainSpec {
        lon_min: 100.0,
        lon_max: 104.0,
        lat_min: 20.0,
        lat_max: 24.0,
        lr_cell: 1.0,
        hr_cell: 0.5,
    }
}

pub fn tiny_scenario(seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        seed,
        domain: tiny_domain(),
        n_train_stations: 12,
        n_val_stations: 4,
        n_test_stations: 6,
        train_steps: 8,
        val_steps: 2,
        test_steps: 4,
        quadrature_points: 32,
        ..Default::default()
    }
}

pub fn tiny_dataset(seed: u64) -> Dataset {
    SyntheticScenario::new(tiny_scenario(seed)).unwrap().generate().unwrap()
}

pub fn tiny_shapes() -> Shapes {
    Shapes {
        n_vars: 5,
        lr_h: 4,
        lr_w: 4,
        hr_h: 8,
        hr_w: 8,
        sat_h: 16,
        sat_w: 16,
        frames: 2,
        channels: 4,
        n_times: 0,
        n_stations: 0,
        n_station_vars: 4,
    }
}

pub fn tiny_model(variant: DecoderVariant) -> HyperDSConfig {
    let bb = BackboneConfig {
        base_width: 4,
        stem_pool: 1,
        stage: 2,
        blocks_per_stage: 1,
    };
    HyperDSConfig {
        feature_channels: 8,
        feature_size: Some([4, 4]),
        field_backbone: bb,
        satellite_backbone: BackboneConfig { stem_pool: 2, ..bb },
        self_attention_layers: 1,
        cross_attention_layers: 1,
        heads: 2,
        ffn_multiplier: 2,
        query_stream: QueryStream::Field,
        variant,
        blocks_per_axis: 2,
        mlp_depth: 3,
        mlp_width: 8,
        generated_layers: 1,
        samples_per_pixel: 3,
        fourier_frequencies: 2,
        interpolation_residual: true,
    }
}

pub fn tiny_train(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        learning_rate: 1e-3,
        seed,
        ..Default::default()
    }
}

/// Random normalized inputs for a batch of `b`.
pub fn random_inputs(seed: u64, b: usize, dtype: DType) -> ModelInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lr: Vec<Array3<f64>> = (0..b)
        .map(|_| Array3::from_shape_fn((5, 4, 4), |_| rng.random_range(-1.0f32..1.0) as f64))
        .collect();
    let sat = Array5::from_shape_fn((b, 2, 4, 16, 16), |_| rng.random_range(-1.0f32..1.0));
    ModelInputs::new(lr, tensor_from_f32(&sat, dtype).unwrap(), dtype).unwrap()
}

/// Uniform random points strictly inside `domain`.
pub fn random_points(rng: &mut ChaCha8Rng, domain: &DomainSpec, n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|_| {
            (
                rng.random_range(domain.lon_min + 1e-6..domain.lon_max - 1e-6),
                rng.random_range(domain.lat_min + 1e-6..domain.lat_max - 1e-6),
            )
        })
        .collect()
}
