//! The recognition metric families on hand-built embeddings (where the
//! right answers are visible by eye) and then end to end on a generated
//! benchmark.

use ndarray::Array2;
use petal::backbone::{ToyBackbone, ToyBackboneConfig};
use petal::datasim::{generate_benchmark, GenerateConfig, Split};
use petal::evalmetrics::{
    evaluate_model, open_set_identification, rank_retrieval, tar_at_far,
    verification_accuracy, EmbeddingSet,
};
use petal::injection::{inject, InjectMode, InjectionConfig};
use petal::quality::{GateCalibration, SharpnessEstimator};

fn axis_set(rows: &[(usize, &str)], dim: usize) -> petal::Result<EmbeddingSet> {
    let matrix = Array2::from_shape_fn((rows.len(), dim), |(i, j)| {
        if rows[i].0 == j {
            1.0
        } else {
            0.0
        }
    });
    let labels = rows.iter().map(|(_, l)| l.to_string()).collect();
    let splits = vec![Split::Gallery; rows.len()];
    EmbeddingSet::new(matrix, labels, splits)
}

fn main() -> petal::Result<()> {
    // Three identities on three axes; probes sit on the right axes, so
    // rank-1 retrieval is perfect.
    let gallery = axis_set(&[(0, "ana"), (1, "ben"), (2, "cho")], 4)?;
    let probes = axis_set(&[(0, "ana"), (1, "ben"), (2, "cho")], 4)?;
    let ranks = rank_retrieval(&gallery, &probes, &[1, 2])?;
    println!("axis-aligned probes: rank-1 {:.2}, rank-2 {:.2}", ranks[0], ranks[1]);

    // Verification: genuine pairs score high, impostors low; one noisy
    // genuine pair forces a threshold choice.
    let scores = [0.95, 0.90, 0.40, 0.15, 0.10];
    let same = [true, true, true, false, false];
    let outcome = verification_accuracy(&scores, &same)?;
    println!(
        "verification: accuracy {:.2} at threshold {:.2}",
        outcome.accuracy, outcome.threshold
    );
    let tars = tar_at_far(&scores, &same, &[0.0, 0.5])?;
    println!("TAR at FAR 0.0: {:.2}; at FAR 0.5: {:.2}", tars[0], tars[1]);

    // Open-set: one impostor resembles ana more than the genuine probes
    // do, so a zero false-positive budget rejects everyone while a looser
    // budget admits the genuine probes.
    let known = EmbeddingSet::normalized(
        ndarray::arr2(&[[1.0, 0.5, 0.0, 0.0], [0.5, 1.0, 0.0, 0.0]]),
        vec!["ana".into(), "ben".into()],
        vec![Split::Probe; 2],
    )?;
    let unknown = EmbeddingSet::normalized(
        ndarray::arr2(&[[0.98, 0.2, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0]]),
        vec!["zed".into(), "yuri".into()],
        vec![Split::Probe; 2],
    )?;
    let tpir = open_set_identification(&gallery, &known, &unknown, &[0.0, 0.5])?;
    println!("TPIR at FPIR 0.0: {:.2}; at FPIR 0.5: {:.2}", tpir[0], tpir[1]);

    // The same families computed end to end: generate a benchmark, embed
    // gallery and probes with a pristine backbone, assemble the report.
    let dir = tempfile::tempdir().expect("tempdir");
    let data = GenerateConfig {
        identities: 4,
        unknown_identities: 1,
        train_per_identity: 2,
        gallery_per_identity: 2,
        probes_per_cell: 1,
        image_size: 32,
        identity_spread: 2.0,
        ..GenerateConfig::default()
    };
    let report = generate_benchmark(&data, dir.path())?;
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
            mode: InjectMode::None,
            ..InjectionConfig::default()
        },
        GateCalibration {
            mu: 0.5,
            sigma: 0.0,
            threshold: 0.5,
            sample_count: 0,
            estimator: "builtin-sharpness".into(),
            seed: 0,
        },
        Box::new(SharpnessEstimator),
        0,
    )?;
    let eval = evaluate_model(&model, &report.manifest, 8)?;
    print!("{}", eval.to_text_table());
    Ok(())
}
