//! Low-rank adapter basics: the transparent init, the delta a trained pair
//! adds, and the per-sample blend between twin adapters.

use ndarray::{Array1, Array2};
use petal::adapters::{twin_param_total, LowRankAdapter, TwinAdaptedLinear};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn max_abs(values: &Array2<f64>) -> f64 {
    values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn main() -> petal::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    // A fresh adapter is exactly transparent: the up factor starts at zero,
    // so up . down is the zero matrix no matter what down drew.
    let adapter = LowRankAdapter::<f64>::init(6, 4, 2, 1.0, 0.0, &mut rng)?;
    let x = Array2::from_shape_fn((3, 4), |(i, j)| (i as f64 - j as f64) / 3.0);
    println!("fresh adapter delta max |.| = {}", max_abs(&adapter.eval_delta(&x)?));
    println!(
        "parameters per adapter: {} (rank 2 * (6 out + 4 in))",
        adapter.param_count()
    );

    // Give the pair distinct trained factors and blend them per sample.
    let base = Array2::from_shape_fn((6, 4), |(i, j)| ((i + 2 * j) as f64 * 0.7).sin());
    let hi = LowRankAdapter::from_parts(
        Array2::from_shape_fn((2, 4), |(r, c)| 0.1 * (r + c) as f64),
        Array2::from_shape_fn((6, 2), |(r, c)| 0.2 * (r as f64 - c as f64)),
        1.0,
        0.0,
    )?;
    let lo = LowRankAdapter::from_parts(
        Array2::from_shape_fn((2, 4), |(r, c)| 0.05 * (2 * r + c) as f64),
        Array2::from_shape_fn((6, 2), |(r, c)| -0.15 * (r + 2 * c) as f64),
        1.0,
        0.0,
    )?;
    let layer = TwinAdaptedLinear::new(base.clone(), None, hi, lo)?;

    // alpha 1 routes everything through hi, alpha 0 through lo, and the
    // blend is linear in between: y = base(x) + a*hi(x) + (1-a)*lo(x).
    for alpha in [0.0, 0.25, 0.5, 1.0] {
        let alphas = Array1::from_elem(x.nrows(), alpha);
        let y = layer.twin_forward(&x, &alphas, None)?;
        println!("alpha {alpha:.2}: first output row {:.4}", y.row(0));
    }

    let hi_only = layer.twin_forward(&x, &Array1::from_elem(x.nrows(), 1.0), None)?;
    let lo_only = layer.twin_forward(&x, &Array1::from_elem(x.nrows(), 0.0), None)?;
    let mid = layer.twin_forward(&x, &Array1::from_elem(x.nrows(), 0.5), None)?;
    let blend_err = max_abs(&(&mid - &((&hi_only + &lo_only) / 2.0)));
    println!("midpoint equals the average of the endpoints: max |err| = {blend_err:.2e}");

    // The twin budget across a model is just the closed form summed over
    // the wrapped layer shapes.
    let shapes = [(6, 4), (12, 12), (16, 8)];
    println!(
        "twin parameter total over {:?} at rank 2: {}",
        shapes,
        twin_param_total(&shapes, 2)
    );
    Ok(())
}
