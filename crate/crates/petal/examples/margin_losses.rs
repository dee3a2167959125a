//! Margin-based softmax heads: how the additive-angle and additive-cosine
//! penalties reshape logits, and the loss they produce on easy versus hard
//! embeddings.

use ndarray::Array2;
use petal::losses::{margin_logits, margin_loss, MarginHead, MarginVariant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> petal::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let classes = 4;
    let dim = 8;

    for variant in [MarginVariant::Arcface, MarginVariant::Cosface] {
        let head = MarginHead::<f64>::fresh_default(classes, dim, variant, &mut rng)?;
        println!(
            "{}: margin {} scale {}",
            variant.name(),
            head.margin,
            head.logit_scale
        );

        // An embedding sitting exactly on its class weight: cos = 1 before
        // the margin. The penalty only touches the target column.
        let aligned = head.class_weights.row(0).insert_axis(ndarray::Axis(0)).to_owned();
        let logits = margin_logits(&head, &aligned, &[0])?;
        let cos_target = logits[(0, 0)] / head.logit_scale;
        let cos_rival = logits[(0, 1)] / head.logit_scale;
        println!("  aligned: target cos after margin {cos_target:.4}, rival untouched {cos_rival:.4}");

        // Loss on its own weight rows (the easiest possible batch) versus a
        // random batch that points nowhere in particular.
        let easy = head.class_weights.clone();
        let labels: Vec<usize> = (0..classes).collect();
        let easy_loss = margin_loss(&head, &easy, &labels)?;
        let hard = Array2::from_shape_fn((classes, dim), |(i, j)| {
            ((i * dim + j) as f64 * 0.37).sin()
        });
        let hard_loss = margin_loss(&head, &hard, &labels)?;
        println!("  loss on class weights {easy_loss:.4}, on arbitrary vectors {hard_loss:.4}");
    }
    Ok(())
}
