//! Synthetic fixtures shared by the benchmarks.

use ndarray::Array2;
use ntkdfl_core::nn::{Batch, InitScheme, Mlp, ModelDims, WeightVector};
use ntkdfl_core::protocol::ClientState;

/// Deterministic pseudo-images in `[0, 1]` with labels cycling through the
/// classes.
pub fn batch(rows: usize, input_dim: usize, classes: usize, offset: usize) -> Batch {
    let inputs = Array2::from_shape_fn((rows, input_dim), |(r, c)| {
        let k = (r + offset) * 31 + c * 17;
        ((k * 2654435761) % 1000) as f64 / 1000.0
    });
    let labels = (0..rows).map(|r| (r + offset) % classes).collect();
    Batch::new(inputs, labels, classes).expect("consistent fixture")
}

/// Desk-scale model: 14×14 inputs, width 100, ten classes.
pub fn desk_model() -> (Mlp, WeightVector) {
    let mlp = Mlp::new(ModelDims::new(196, 100, 10).expect("valid dims"));
    let w = mlp.init_weights(7, InitScheme::Shared, 0);
    (mlp, w)
}

pub fn clients(mlp: &Mlp, count: usize, rows_each: usize) -> Vec<ClientState> {
    let dims = mlp.dims();
    (0..count)
        .map(|i| {
            let w = mlp.init_weights(7, InitScheme::PerClient, i);
            ClientState::new(i, w, batch(rows_each, dims.input_dim, dims.output_dim, i * rows_each))
        })
        .collect()
}
