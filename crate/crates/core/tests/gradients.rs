use candle_core::{DType, Device, Tensor};
use graphseg::eval::fd_gradient_check;
use graphseg::nn::{ParamStore, Pass};
use graphseg::pipeline::{CascadeModel, Mode, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(graph: bool) -> (ParamStore, CascadeModel) {
    let mut config = ModelConfig::default();
    config.backbone.base_channels = 4;
    config.backbone.routed_channels = 8;
    config.tasks.graph = graph;
    let mut store = ParamStore::new(3, DType::F64);
    let model = CascadeModel::new(&mut store, &config).unwrap();
    (store, model)
}

fn image(seed: u64, b: usize) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..b * 16 * 16).map(|_| r.random_range(0.0..1.0)).collect();
    Tensor::from_vec(data, (b, 1, 16, 16), &Device::Cpu).unwrap()
}

fn weights(seed: u64, b: usize) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..b * 16 * 16)
        .map(|_| r.random_range(-1.0..1.0))
        .collect();
    Tensor::from_vec(data, (b, 1, 16, 16), &Device::Cpu).unwrap()
}

/// Small step: the network is piecewise smooth and a 1e-4 probe regularly
/// crosses ReLU kinks.
#[test]
fn full_cascade_input_gradient_matches_finite_differences() {
    for graph in [false, true] {
        let (_store, m) = model(graph);
        let x = image(1, 2);
        m.seed_graph_centers(&image(9, 2)).unwrap();
        let (wr, wv) = (weights(2, 2), weights(3, 2));
        let check = fd_gradient_check(
            |x| {
                let o = m.forward(x, Mode::Train, &mut Pass::batch_stats())?;
                Ok(o.region
                    .mul(&wr)?
                    .sum_all()?
                    .add(&o.vessel.mul(&wv)?.sum_all()?)?)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(
            check.max_relative_error < 1e-4,
            "graph {graph}: worst {} at {} ({} vs {})",
            check.max_relative_error,
            check.worst,
            check.analytic[check.worst],
            check.numeric[check.worst]
        );
    }
}
