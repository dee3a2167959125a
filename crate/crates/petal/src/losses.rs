//! Margin-based softmax heads: the fine-tuning objective.
//!
//! Both variants start from the cosine between the normalized embedding
//! and each normalized class weight, penalize the true class, scale, and
//! feed cross-entropy:
//!
//! * additive angular margin: target logit `s * cos(acos(c) + m)`,
//! * additive cosine margin: target logit `s * (c - m)`,
//!
//! with non-target logits `s * c` either way. Cosines are clamped away
//! from +-1 before `acos`; past the angle wrap-around the angular variant
//! degrades to a linear penalty (see [`MarginSpec`]) so a larger margin
//! never rewards the target.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{margin_target_value, matmul, MarginSpec, NodeId, Real, Tape};
use crate::error::{PetalError, Result};

/// Norms at or below this are treated as zero: such rows cannot be
/// normalized meaningfully and are rejected.
pub const NORM_FLOOR: f64 = 1e-20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginVariant {
    /// Additive angular margin.
    Arcface,
    /// Additive cosine margin.
    Cosface,
}

impl MarginVariant {
    pub fn name(self) -> &'static str {
        match self {
            MarginVariant::Arcface => "arcface",
            MarginVariant::Cosface => "cosface",
        }
    }

    /// Standard margin for the variant.
    pub fn default_margin(self) -> f64 {
        match self {
            MarginVariant::Arcface => 0.5,
            MarginVariant::Cosface => 0.35,
        }
    }

    /// Standard logit scale for the variant.
    pub fn default_scale(self) -> f64 {
        64.0
    }

    pub fn parse(name: &str) -> Result<MarginVariant> {
        match name {
            "arcface" => Ok(MarginVariant::Arcface),
            "cosface" => Ok(MarginVariant::Cosface),
            _ => Err(PetalError::Config(format!(
                "unknown margin variant '{name}' (expected arcface or cosface)"
            ))),
        }
    }
}

/// Trainable classifier head: one weight row per identity.
#[derive(Clone, Debug)]
pub struct MarginHead<F: Real> {
    /// `(classes, dim)`; rows are renormalized on every forward.
    pub class_weights: Array2<F>,
    pub margin: f64,
    pub logit_scale: f64,
    pub variant: MarginVariant,
}

impl<F: Real> MarginHead<F> {
    /// Fresh head for a new identity set: rows drawn from a unit Gaussian
    /// and normalized.
    pub fn fresh(
        classes: usize,
        dim: usize,
        variant: MarginVariant,
        margin: f64,
        logit_scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if classes == 0 || dim == 0 {
            return Err(PetalError::Config(format!(
                "margin head needs positive dims, got {classes} classes x {dim}"
            )));
        }
        let normal = Normal::new(0.0, 1.0).expect("unit std");
        let mut class_weights =
            Array2::from_shape_fn((classes, dim), |_| F::from_f64(normal.sample(rng)));
        for mut row in class_weights.rows_mut() {
            let norm = row.iter().map(|&v| v * v).fold(F::zero(), |a, b| a + b).sqrt();
            let inv = norm.recip();
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        let head = MarginHead {
            class_weights,
            margin,
            logit_scale,
            variant,
        };
        head.validate()?;
        Ok(head)
    }

    /// Fresh head with the variant's standard margin and scale.
    pub fn fresh_default(
        classes: usize,
        dim: usize,
        variant: MarginVariant,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Self::fresh(
            classes,
            dim,
            variant,
            variant.default_margin(),
            variant.default_scale(),
            rng,
        )
    }

    pub fn classes(&self) -> usize {
        self.class_weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.class_weights.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(PetalError::Config(format!(
                "margin must be finite and nonnegative, got {}",
                self.margin
            )));
        }
        if !(self.logit_scale.is_finite() && self.logit_scale > 0.0) {
            return Err(PetalError::Config(format!(
                "logit scale must be finite and positive, got {}",
                self.logit_scale
            )));
        }
        Ok(())
    }

    pub fn spec(&self) -> MarginSpec<F> {
        MarginSpec {
            additive_angle: self.variant == MarginVariant::Arcface,
            margin: F::from_f64(self.margin),
            scale: F::from_f64(self.logit_scale),
        }
    }
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(PetalError::Input(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(PetalError::Input(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Row-normalizes a copy, rejecting rows whose norm is effectively zero.
/// Mirrors the tape's normalize node exactly so eager and graph paths
/// agree bit for bit.
fn normalized_rows<F: Real>(values: &Array2<F>, what: &str) -> Result<Array2<F>> {
    let floor = F::from_f64(1e-300).max(F::min_positive_value());
    let reject = F::from_f64(NORM_FLOOR);
    let mut out = values.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let mut sq = F::zero();
        for &v in row.iter() {
            sq += v * v;
        }
        let norm = sq.sqrt();
        if norm <= reject {
            return Err(PetalError::Numeric(format!(
                "{what} row {i} has zero norm and cannot be direction-normalized"
            )));
        }
        let inv = norm.max(floor).recip();
        row *= inv;
    }
    Ok(out)
}

/// Margin-adjusted logits, eagerly: `(batch, classes)`.
pub fn margin_logits<F: Real>(
    head: &MarginHead<F>,
    embeddings: &Array2<F>,
    labels: &[usize],
) -> Result<Array2<F>> {
    head.validate()?;
    if embeddings.ncols() != head.dim() {
        return Err(PetalError::Shape(format!(
            "embeddings are {} wide but the head expects {}",
            embeddings.ncols(),
            head.dim()
        )));
    }
    check_labels(labels, embeddings.nrows(), head.classes())?;
    let emb_n = normalized_rows(embeddings, "embedding")?;
    let w_n = normalized_rows(&head.class_weights, "class weight")?;
    let cos = matmul(emb_n.view(), w_n.t());
    let spec = head.spec();
    let mut logits = &cos * spec.scale;
    for (i, &y) in labels.iter().enumerate() {
        logits[(i, y)] = spec.scale * margin_target_value(cos[(i, y)], spec);
    }
    Ok(logits)
}

/// The margin loss subgraph appended to a tape.
pub struct MarginLossGraph {
    /// Scalar mean cross-entropy node.
    pub loss: NodeId,
    /// Leaf holding the class weights; its gradient trains the head.
    pub weights: NodeId,
}

/// Splices normalized-cosine margin cross-entropy onto an existing tape,
/// downstream of `embeddings` (shape `(batch, dim)`).
pub fn attach_margin_loss<F: Real>(
    tape: &mut Tape<F>,
    embeddings: NodeId,
    head: &MarginHead<F>,
    labels: &[usize],
) -> Result<MarginLossGraph> {
    head.validate()?;
    let emb_value = tape.value(embeddings);
    if emb_value.ncols() != head.dim() {
        return Err(PetalError::Shape(format!(
            "embeddings are {} wide but the head expects {}",
            emb_value.ncols(),
            head.dim()
        )));
    }
    check_labels(labels, emb_value.nrows(), head.classes())?;
    // Reject degenerate rows up front; the tape normalize node only guards
    // against dividing by exactly zero.
    normalized_rows(emb_value, "embedding")?;
    normalized_rows(&head.class_weights, "class weight")?;

    let weights = tape.leaf(head.class_weights.clone());
    let emb_n = tape.row_normalize(embeddings);
    let w_n = tape.row_normalize(weights);
    let cos = tape.matmul_nt(emb_n, w_n);
    let adjusted = tape.margin_adjust(cos, labels.to_vec(), head.spec());
    let loss = tape.cross_entropy_mean(adjusted, labels.to_vec());
    Ok(MarginLossGraph { loss, weights })
}

/// Mean cross-entropy over margin-adjusted logits, as a plain value.
pub fn margin_loss<F: Real>(
    head: &MarginHead<F>,
    embeddings: &Array2<F>,
    labels: &[usize],
) -> Result<F> {
    let mut tape = Tape::new();
    let emb = tape.leaf(embeddings.clone());
    let graph = attach_margin_loss(&mut tape, emb, head, labels)?;
    Ok(tape.scalar(graph.loss))
}
