//! End-to-end HyperDS gradients against central finite differences.
//!
//! The float64 check differentiates and perturbs the same float64 model.
//! The float32 check compares the float32 analytic gradient with a float64
//! finite difference taken on a float64 copy holding identical parameter
//! values, so the reference itself carries no float32 cancellation error.

use candle_core::{DType, Tensor};
use hyperds::model::{DecoderVariant, HyperDS, ModelInputs, PixelSamples};
use hyperds::nn::{scalar, tensor_from, to_f64_vec};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const N_PARAMS: usize = 24;

pub struct Problem {
    samples: PixelSamples,
    stations: Vec<(f64, f64)>,
    grid_target: Array3<f64>,
    station_target: Array3<f64>,
}

pub fn problem(seed: u64) -> Problem {
    let domain = super::tiny_domain();
    let geom = domain.hr_geometry();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stations = super::random_points(&mut rng, &domain, 6);
    let pixels = PixelSamples::all_pixels(&geom);
    let samples = PixelSamples::draw(&geom, &pixels, 3, &stations, &mut rng).unwrap();
    let grid_target = Array3::from_shape_fn((2, 5, pixels.len()), |_| rng.random_range(-1.0f32..1.0) as f64);
    let station_target = Array3::from_shape_fn((2, 4, stations.len()), |_| rng.random_range(-1.0f32..1.0) as f64);
    Problem {
        samples,
        stations,
        grid_target,
        station_target,
    }
}

pub fn loss(model: &HyperDS, inputs: &ModelInputs, p: &Problem) -> Tensor {
    let dt = model.params.dtype();
    let w = model.weights(inputs).unwrap();
    let g = model.forward_grid(&w, inputs, &p.samples).unwrap();
    let s = model.forward_stations(&w, inputs, &p.stations).unwrap();
    let lg = (g - tensor_from(&p.grid_target, dt).unwrap()).unwrap().sqr().unwrap().mean_all().unwrap();
    let ls = (s - tensor_from(&p.station_target, dt).unwrap()).unwrap().sqr().unwrap().mean_all().unwrap();
    (lg + (ls * 0.5).unwrap()).unwrap()
}

pub fn set_entry(model: &HyperDS, name: &str, idx: usize, value: f64) {
    let var = model.params.get(name).unwrap();
    let mut data = to_f64_vec(var.as_tensor()).unwrap();
    data[idx] = value;
    let t = Tensor::from_vec(data, var.dims(), &candle_core::Device::Cpu)
        .unwrap()
        .to_dtype(var.dtype())
        .unwrap();
    var.set(&t).unwrap();
}

pub fn finite_difference(model: &HyperDS, inputs: &ModelInputs, p: &Problem, name: &str, idx: usize) -> f64 {
    let x0 = to_f64_vec(model.params.get(name).unwrap().as_tensor()).unwrap()[idx];
    let h = 1e-5 * x0.abs().max(1.0);
    set_entry(model, name, idx, x0 + h);
    let up = scalar(&loss(model, inputs, p)).unwrap();
    set_entry(model, name, idx, x0 - h);
    let down = scalar(&loss(model, inputs, p)).unwrap();
    set_entry(model, name, idx, x0);
    (up - down) / (2.0 * h)
}

/// Picks parameter entries with a non-negligible reference gradient, spread
/// over tensors uniformly.
pub fn pick_entries(model: &HyperDS, grads: &candle_core::backprop::GradStore, seed: u64) -> Vec<(String, usize, f64)> {
    let names = model.params.names();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut attempts = 0;
    while out.len() < N_PARAMS && attempts < 10_000 {
        attempts += 1;
        let name = &names[rng.random_range(0..names.len())];
        let var = model.params.get(name).unwrap();
        let Some(g) = grads.get(var.as_tensor()) else { continue };
        let g = to_f64_vec(g).unwrap();
        let idx = rng.random_range(0..g.len());
        if g[idx].abs() > 1e-6 && !out.iter().any(|(n, i, _)| n == name && *i == idx) {
            out.push((name.clone(), idx, g[idx]));
        }
    }
    assert_eq!(out.len(), N_PARAMS, "not enough parameters with a usable gradient");
    out
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs())
}

/// Worst relative error between analytic gradients and central differences
/// over `N_PARAMS` entries drawn from at least three modules.
pub fn worst_error(variant: DecoderVariant, dtype: DType) -> f64 {
    let cfg = super::tiny_model(variant);
    let shapes = super::tiny_shapes();
    let domain = super::tiny_domain();
    let p = problem(3);
    let model = HyperDS::new(cfg.clone(), domain, shapes, 11, dtype).unwrap();
    let reference = HyperDS::new(cfg, domain, shapes, 11, DType::F64).unwrap();
    reference.params.copy_from(&model.params).unwrap();
    let inputs = super::random_inputs(5, 2, dtype);
    let ref_inputs = super::random_inputs(5, 2, DType::F64);
    let grads = loss(&model, &inputs, &p).backward().unwrap();
    let entries = pick_entries(&model, &grads, 17);
    let modules: std::collections::BTreeSet<&str> = entries.iter().map(|(n, _, _)| n.split('.').next().unwrap()).collect();
    assert!(modules.len() >= 3, "entries cover too few modules: {modules:?}");
    let mut worst = 0.0f64;
    for (name, idx, analytic) in &entries {
        let numeric = finite_difference(&reference, &ref_inputs, &p, name, *idx);
        worst = worst.max(rel_err(*analytic, numeric));
    }
    worst
}
