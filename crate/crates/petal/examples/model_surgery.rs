//! Model surgery: wrap a backbone's linears in adapter pairs, count what
//! became trainable, verify the injected model is transparent at init, and
//! strip the adapters back off.

use petal::backbone::{ToyBackbone, ToyBackboneConfig};
use petal::imaging::ImageBuf;
use petal::injection::{inject, InjectionConfig};
use petal::quality::{GateCalibration, SharpnessEstimator};

fn test_images(count: usize, size: usize) -> petal::Result<Vec<ImageBuf>> {
    (0..count)
        .map(|i| {
            let plane = ndarray::Array2::from_shape_fn((size, size), |(y, x)| {
                let fx = x as f64 / size as f64;
                let fy = y as f64 / size as f64;
                0.5 + 0.4 * ((6.0 * fx + i as f64) * std::f64::consts::PI).sin() * fy
            });
            let mut image = ImageBuf::new(1, size, size)?;
            image.set_plane(0, &plane);
            Ok(image)
        })
        .collect()
}

fn main() -> petal::Result<()> {
    let config = ToyBackboneConfig {
        image_size: 32,
        patch_size: 8,
        dim: 24,
        depth: 2,
        heads: 2,
        attn_width: 24,
        mlp_ratio: 2.0,
        embed_dim: 32,
        seed: 3,
    };
    let backbone = ToyBackbone::<f64>::new(config.clone())?;
    let images = test_images(4, config.image_size)?;
    let before = backbone.embed_images(&images)?;

    let gate = GateCalibration {
        mu: 0.5,
        sigma: 0.1,
        threshold: 0.6,
        sample_count: 1,
        estimator: "builtin-sharpness".into(),
        seed: 0,
    };
    let mut model = inject(
        backbone,
        InjectionConfig::default(),
        gate,
        Box::new(SharpnessEstimator),
        17,
    )?;

    println!("wrapped layers:");
    for layer in &model.injected {
        println!(
            "  {:<24} {:>3} x {:<3} at {}",
            layer.layer_id, layer.out_dim, layer.in_dim, layer.site
        );
    }
    println!(
        "trainable parameters: {} (closed form {})",
        model.count_trainable()?,
        model.closed_form_trainable()
    );

    // Zero-initialized up factors leave the forward pass untouched.
    let after = model.embed_images(&images)?;
    let drift = (&after - &before)
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    println!("max |embedding drift| after surgery: {drift:.2e}");

    // Stripping removes the adapters and unfreezes the base.
    let restored = model.strip()?;
    let back = restored.embed_images(&images)?;
    let exact = back
        .iter()
        .zip(before.iter())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    println!("stripped backbone embeds bit-identically: {exact}");
    let total: usize = restored.store.iter().map(|(_, e)| e.value.len()).sum();
    println!(
        "store back to {} tensors; every scalar trainable again: {}",
        restored.store.len(),
        restored.store.count_trainable() == total
    );
    Ok(())
}
