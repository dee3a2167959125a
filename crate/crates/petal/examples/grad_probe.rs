//! One forward/backward pass per training recipe, comparing where the
//! gradient mass lands before any optimizer step is taken.

use petal::backbone::{ToyBackbone, ToyBackboneConfig};
use petal::datasim::{generate_benchmark, GenerateConfig};
use petal::injection::{inject, InjectionConfig};
use petal::losses::MarginHead;
use petal::quality::{calibrate, GateCalibration, SharpnessEstimator};
use petal::trainer::{grad_probe, TrainMode};
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
        ..GenerateConfig::default()
    };
    let report = generate_benchmark(&data, dir.path())?;
    let manifest = &report.manifest;

    // Calibrate the gate on the training split so the twin blend is live.
    let train_images: Vec<_> = manifest
        .split_records(Split::Train)
        .map(|record| manifest.load_image(record))
        .collect::<petal::Result<_>>()?;
    let gate: GateCalibration = calibrate(&train_images, &SharpnessEstimator, 8, 7)?;
    println!(
        "gate: mu {:.4}, sigma {:.4}, threshold {:.4}",
        gate.mu, gate.sigma, gate.threshold
    );

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
    let model = inject(
        backbone,
        InjectionConfig {
            rank: 2,
            ..InjectionConfig::default()
        },
        gate,
        Box::new(SharpnessEstimator),
        7,
    )?;

    let classes = manifest.class_map(Split::Train).len();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let head = MarginHead::fresh_default(classes, 16, MarginVariant::Cosface, &mut rng)?;

    // Same model, same head, same first batch for every recipe; only the
    // set of tensors marked trainable changes.
    let probe = grad_probe(&model, &head, manifest, 8, &TrainMode::ALL, 7)?;
    println!("batch size {}, seed {}, loss {:.4}", probe.batch_size, probe.seed, probe.loss);
    for mode in &probe.modes {
        println!(
            "{:<12} params {:>6}  max|g| {:>10.4e}  without head {:>10.4e}  head {:>10.4e}",
            mode.mode.name(), mode.all_trainable.elements, mode.all_trainable.max_abs,
            mode.without_head.max_abs, mode.head.max_abs
        );
    }

    // Histogram of |g| for the adapter-only recipe, bucketed on shared edges.
    let twin = probe
        .modes
        .iter()
        .find(|m| m.mode == TrainMode::Petalface)
        .expect("petalface mode present");
    println!("gradient magnitude histogram ({}):", twin.mode.name());
    for (edge, count) in probe.histogram_edges.iter().zip(&twin.histogram) {
        println!("  < {:>8.1e}: {}", edge, count);
    }
    let last_edge = probe.histogram_edges.last().expect("edges present");
    let overflow = twin.histogram.last().expect("overflow bin present");
    println!("  >= {:>7.1e}: {}", last_edge, overflow);
    Ok(())
}
