//! The quality gate end to end: score images with the built-in estimator,
//! freeze calibration statistics, and turn scores into blend weights.

use petal::datasim::{
    render_identity_image, DegradationSpec, IdentitySpec, Split, SplitCounts,
};
use petal::quality::{
    alpha_from_quality, calibrate, calibration_from_scores, QualityEstimator,
    SharpnessEstimator,
};

fn main() -> petal::Result<()> {
    // Render one identity, then push it through several degradation levels
    // and score each version.
    let spec = IdentitySpec::derive(
        41,
        "demo",
        1.5,
        SplitCounts {
            train: 1,
            gallery: 1,
            probes_per_cell: 1,
        },
    );
    let clean = render_identity_image(&spec, Split::Probe, 0, 0.5, 64)?;
    let estimator = SharpnessEstimator;
    let cells = [
        ("clean", DegradationSpec::identity()),
        (
            "blur 1.5",
            DegradationSpec {
                blur_sigma: 1.5,
                ..DegradationSpec::identity()
            },
        ),
        (
            "blur 2.5 + down 4x",
            DegradationSpec {
                blur_sigma: 2.5,
                downscale_factor: 4,
                ..DegradationSpec::identity()
            },
        ),
        (
            "noise 0.1",
            DegradationSpec {
                noise_sigma: 0.1,
                ..DegradationSpec::identity()
            },
        ),
    ];
    let mut images = Vec::new();
    for (name, cell) in &cells {
        let image = cell.apply(&clean, 99)?;
        println!("{name:<20} score {:.4}", estimator.score(&image)?);
        images.push(image);
    }

    // Calibration over an exhaustive score set is closed-form arithmetic:
    // threshold = mu + sigma.
    let closed = calibration_from_scores(&[0.4, 0.5, 0.6], "by-hand", 0);
    println!(
        "scores {{0.4, 0.5, 0.6}} -> mu {} sigma {:.6} threshold {:.6}",
        closed.mu, closed.sigma, closed.threshold
    );

    // The usual path samples images and scores them.
    let sampled = calibrate(&images, &estimator, images.len(), 7)?;
    println!(
        "calibrated on {} renders: mu {:.4} sigma {:.4} threshold {:.4}",
        sampled.sample_count, sampled.mu, sampled.sigma, sampled.threshold
    );

    // Blend weight: alpha = clamp(0.5 + (q - t), 0, 1). At the threshold
    // the twins split evenly; a full score point away saturates the gate.
    let t = sampled.threshold;
    for q in [t - 0.8, t - 0.2, t, t + 0.2, t + 0.8] {
        println!(
            "quality {q:+.4} -> alpha {:.4}",
            alpha_from_quality(q, &sampled)?
        );
    }
    Ok(())
}
