//! Fine-tune the gated adapter pair on a generated benchmark and inspect
//! the run: schedule shape, per-step losses, what was trainable, and what
//! the checkpoint carries.

use petal::backbone::{ToyBackbone, ToyBackboneConfig};
use petal::datasim::{generate_benchmark, DegradationSpec, GenerateConfig, Split};
use petal::injection::{derive_seed, inject, InjectionConfig};
use petal::losses::{MarginHead, MarginVariant};
use petal::quality::{GateCalibration, SharpnessEstimator};
use petal::trainer::{finetune, lr_at, TrainConfig, TrainMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> petal::Result<()> {
    let dir = tempfile::tempdir().expect("tempdir");
    let data = GenerateConfig {
        identities: 4,
        unknown_identities: 1,
        train_per_identity: 4,
        gallery_per_identity: 2,
        probes_per_cell: 1,
        image_size: 32,
        identity_spread: 2.0,
        intra_jitter: 0.5,
        grid: vec![
            DegradationSpec::identity(),
            DegradationSpec {
                blur_sigma: 1.5,
                downscale_factor: 2,
                ..DegradationSpec::identity()
            },
        ],
        ..GenerateConfig::default()
    };
    let report = generate_benchmark(&data, dir.path())?;
    let manifest = report.manifest;

    let backbone = ToyBackbone::<f64>::new(ToyBackboneConfig {
        image_size: 32,
        patch_size: 8,
        dim: 16,
        depth: 2,
        heads: 2,
        attn_width: 16,
        mlp_ratio: 2.0,
        embed_dim: 16,
        seed: 11,
    })?;
    let injection = InjectionConfig {
        rank: 2,
        ..InjectionConfig::default()
    };
    // The gate is calibrated lazily from the train split because the train
    // config below asks for calibration_samples.
    let placeholder = GateCalibration {
        mu: 0.5,
        sigma: 0.0,
        threshold: 0.5,
        sample_count: 0,
        estimator: "builtin-sharpness".into(),
        seed: 0,
    };
    let mut model = inject(backbone, injection, placeholder, Box::new(SharpnessEstimator), 29)?;

    let classes = manifest.split_identities(Split::Train).len();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(7, &["head"]));
    let mut head = MarginHead::fresh(classes, 16, MarginVariant::Cosface, 0.2, 12.0, &mut rng)?;

    let config = TrainConfig {
        mode: TrainMode::Petalface,
        epochs: 4,
        warmup_epochs: 1,
        batch_size: 4,
        initial_lr: 5e-3,
        calibration_samples: Some(8),
        seed: 7,
        ..TrainConfig::default()
    };

    // The schedule ramps linearly through warmup, then decays to zero.
    let total = config.epochs * 4;
    let marks: Vec<String> = (0..total)
        .map(|s| format!("{:.4}", lr_at(s, total, 4, config.initial_lr, config.lr_power) / config.initial_lr))
        .collect();
    println!("lr curve (fraction of peak): {}", marks.join(" "));

    let outcome = finetune(&mut model, &mut head, &manifest, &config)?;
    let series = outcome.series;
    println!(
        "trained {} scalars ({} more in the head) over {} epochs x {} steps",
        series.trainable_params, series.head_params, series.epochs, series.steps_per_epoch
    );
    println!(
        "first loss {:.4} -> last loss {:.4}",
        series.losses.first().expect("steps ran"),
        series.losses.last().expect("steps ran")
    );
    println!(
        "gate froze at threshold {:.4} (mu {:.4}, sigma {:.4})",
        model.gate.threshold, model.gate.mu, model.gate.sigma
    );

    println!("checkpoint sections:");
    for meta in &outcome.checkpoint.manifest.tensors {
        println!("  {:<28} {:>3} x {:<3} [{:?}]", meta.name, meta.rows, meta.cols, meta.section);
    }
    Ok(())
}
