//! Recognition metrics over embedding sets: closed-set rank retrieval,
//! 1:1 verification, TAR at fixed FAR, and open-set identification, plus
//! the extraction step that turns a manifest split into unit embeddings.
//!
//! Conventions are pinned here because every downstream number depends on
//! them: similarity is the cosine (a plain dot product between unit rows),
//! a multi-image gallery identity scores as the max over its images, ties
//! rank by gallery insertion order, verification accepts at `score >=
//! threshold`, TAR@FAR takes the best TAR whose FAR does not exceed the
//! target (a step function, no interpolation), and open-set acceptance is
//! strictly above the threshold drawn from the unknown-probe score
//! distribution.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::datasim::{DatasetManifest, Split};
use crate::error::{PetalError, Result};
use crate::imaging::ImageBuf;
use crate::injection::AdaptedModel;

/// How far a row may drift from unit length before the set is rejected.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

/// Retrieval depths reported by [`evaluate_model`].
pub const RANK_KS: [usize; 4] = [1, 5, 10, 20];
/// False-accept rates at which TAR is reported.
pub const TAR_FARS: [f64; 3] = [1e-4, 1e-3, 1e-2];
/// False-positive identification rates at which TPIR is reported.
pub const TPIR_FPIRS: [f64; 2] = [1e-2, 1e-1];

/// A batch of L2-normalized embeddings with aligned identity labels and
/// split tags. Construction validates the alignment and the unit-norm
/// invariant; the fields stay private so the invariant cannot rot.
#[derive(Clone, Debug)]
pub struct EmbeddingSet {
    matrix: Array2<f64>,
    labels: Vec<String>,
    splits: Vec<Split>,
}

impl EmbeddingSet {
    /// Wraps rows that are already unit length (within
    /// [`UNIT_NORM_TOLERANCE`]).
    pub fn new(matrix: Array2<f64>, labels: Vec<String>, splits: Vec<Split>) -> Result<Self> {
        if matrix.nrows() != labels.len() || matrix.nrows() != splits.len() {
            return Err(PetalError::Shape(format!(
                "{} embedding rows but {} labels and {} split tags",
                matrix.nrows(),
                labels.len(),
                splits.len()
            )));
        }
        for (i, row) in matrix.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(PetalError::Numeric(format!(
                    "embedding row {i} has norm {norm}, expected 1 within {UNIT_NORM_TOLERANCE}"
                )));
            }
        }
        Ok(EmbeddingSet { matrix, labels, splits })
    }

    /// Normalizes raw rows to unit length first; a zero-length row is a
    /// numeric error since it carries no direction to compare.
    pub fn normalized(
        mut matrix: Array2<f64>,
        labels: Vec<String>,
        splits: Vec<Split>,
    ) -> Result<Self> {
        for (i, mut row) in matrix.rows_mut().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if !norm.is_finite() || norm == 0.0 {
                return Err(PetalError::Numeric(format!(
                    "embedding row {i} has norm {norm} and cannot be normalized"
                )));
            }
            row /= norm;
        }
        EmbeddingSet::new(matrix, labels, splits)
    }

    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    /// Distinct labels in first-appearance order; ranking tie-breaks follow
    /// this order, so it is part of the metric contract.
    pub fn identities(&self) -> Vec<String> {
        let mut seen = BTreeMap::new();
        let mut out = Vec::new();
        for label in &self.labels {
            if seen.insert(label.clone(), ()).is_none() {
                out.push(label.clone());
            }
        }
        out
    }

    /// A new set holding the chosen rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<EmbeddingSet> {
        for &i in indices {
            if i >= self.len() {
                return Err(PetalError::Input(format!(
                    "row index {i} out of range for a set of {}",
                    self.len()
                )));
            }
        }
        let matrix = self.matrix.select(Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i].clone()).collect();
        let splits = indices.iter().map(|&i| self.splits[i]).collect();
        EmbeddingSet::new(matrix, labels, splits)
    }
}

/// One manifest record that could not be turned into an embedding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExcludedRecord {
    pub path: String,
    pub reason: String,
}

/// The result of [`extract`]: the embeddings that worked plus a per-record
/// account of those that did not.
#[derive(Clone, Debug)]
pub struct Extraction {
    pub embeddings: EmbeddingSet,
    pub excluded: Vec<ExcludedRecord>,
}

/// Embeds every decodable image of one split, walking the records in
/// manifest order in batches of `batch_size`. Decode failures do not abort
/// the run; they are excluded row-wise and reported. The forward pass runs
/// without dropout and the rows come back unit length, so repeated calls
/// agree exactly and the batch size only matters up to float re-association
/// (documented drift at most 1e-5).
pub fn extract<F: Real>(
    model: &AdaptedModel<F>,
    manifest: &DatasetManifest,
    split: Split,
    batch_size: usize,
) -> Result<Extraction> {
    if batch_size == 0 {
        return Err(PetalError::Config("batch_size must be at least 1".into()));
    }
    let mut images: Vec<ImageBuf> = Vec::new();
    let mut labels: Vec<String> = Vec::new();
    let mut excluded = Vec::new();
    for record in manifest.split_records(split) {
        match manifest.load_image(record) {
            Ok(image) => {
                images.push(image);
                labels.push(record.identity.clone());
            }
            Err(err) => excluded.push(ExcludedRecord {
                path: record.path.clone(),
                reason: err.to_string(),
            }),
        }
    }
    let dim = model.backbone()?.config.embed_dim;
    let mut matrix = Array2::zeros((images.len(), dim));
    let mut offset = 0;
    for chunk in images.chunks(batch_size) {
        let block = model.embed_images(chunk)?;
        matrix
            .slice_mut(ndarray::s![offset..offset + chunk.len(), ..])
            .assign(&block.mapv(Real::to_f64));
        offset += chunk.len();
    }
    let splits = vec![split; labels.len()];
    Ok(Extraction {
        embeddings: EmbeddingSet::normalized(matrix, labels, splits)?,
        excluded,
    })
}

/// Gallery rows grouped by identity, in first-appearance order.
struct GalleryIndex {
    identities: Vec<String>,
    position: BTreeMap<String, usize>,
    rows: Vec<Vec<usize>>,
}

fn index_gallery(gallery: &EmbeddingSet) -> GalleryIndex {
    let mut identities = Vec::new();
    let mut position = BTreeMap::new();
    let mut rows: Vec<Vec<usize>> = Vec::new();
    for (i, label) in gallery.labels().iter().enumerate() {
        let idx = *position.entry(label.clone()).or_insert_with(|| {
            identities.push(label.clone());
            rows.push(Vec::new());
            identities.len() - 1
        });
        rows[idx].push(i);
    }
    GalleryIndex { identities, position, rows }
}

/// Max cosine per gallery identity for one probe row (template-max).
fn identity_scores(gallery: &EmbeddingSet, index: &GalleryIndex, probe: ArrayView1<f64>) -> Vec<f64> {
    let sims: Array1<f64> = gallery.matrix().dot(&probe);
    index
        .rows
        .iter()
        .map(|rows| rows.iter().map(|&r| sims[r]).fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// How many identities outrank the true one: those scoring strictly higher,
/// plus equal scorers that entered the gallery earlier (the stable
/// tie-break).
fn true_identity_rank(scores: &[f64], true_idx: usize) -> usize {
    let target = scores[true_idx];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > target || (s == target && j < true_idx))
        .count()
}

/// Closed-set retrieval: for each `k` in `ks`, the fraction of probes whose
/// true identity sits among the `k` best-scoring gallery identities. Every
/// probe identity must be enrolled in the gallery.
pub fn rank_retrieval(
    gallery: &EmbeddingSet,
    probe: &EmbeddingSet,
    ks: &[usize],
) -> Result<Vec<f64>> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(PetalError::Config("retrieval depths must be positive".into()));
    }
    if gallery.is_empty() || probe.is_empty() {
        return Err(PetalError::Input("rank retrieval needs nonempty gallery and probe sets".into()));
    }
    if gallery.dim() != probe.dim() {
        return Err(PetalError::Shape(format!(
            "gallery embeddings are {}-wide but probes are {}-wide",
            gallery.dim(),
            probe.dim()
        )));
    }
    let index = index_gallery(gallery);
    let mut hits = vec![0usize; ks.len()];
    for (row, label) in probe.matrix().rows().into_iter().zip(probe.labels()) {
        let Some(&true_idx) = index.position.get(label) else {
            return Err(PetalError::Protocol(format!(
                "probe identity '{label}' is not enrolled in the gallery"
            )));
        };
        let scores = identity_scores(gallery, &index, row);
        let rank = true_identity_rank(&scores, true_idx);
        for (slot, &k) in ks.iter().enumerate() {
            if rank < k {
                hits[slot] += 1;
            }
        }
    }
    Ok(hits.iter().map(|&h| h as f64 / probe.len() as f64).collect())
}

/// Best achievable verification accuracy and the threshold that attains it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationOutcome {
    pub accuracy: f64,
    /// Acceptance rule is `score >= threshold`. The sweep visits one
    /// threshold above every score and each realized score; when several
    /// tie on accuracy the largest threshold wins, so the value is
    /// deterministic.
    pub threshold: f64,
}

/// Sweeps every decision boundary the scores admit and returns the best
/// accuracy. `same[i]` says whether pair `i` joined two images of one
/// identity.
pub fn verification_accuracy(scores: &[f64], same: &[bool]) -> Result<VerificationOutcome> {
    if scores.len() != same.len() {
        return Err(PetalError::Shape(format!(
            "{} scores but {} labels",
            scores.len(),
            same.len()
        )));
    }
    if scores.is_empty() {
        return Err(PetalError::Input("verification needs at least one pair".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(PetalError::Numeric("verification scores must be finite".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let total = scores.len() as f64;
    let negatives = same.iter().filter(|&&s| !s).count();
    // Threshold above every score: everything predicted "different".
    let mut correct = negatives as isize;
    let mut best_correct = correct;
    let mut best_threshold = scores[order[0]] + 1.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        // Admit the whole tie group at once; a boundary cannot split equal
        // scores.
        while i < order.len() && scores[order[i]] == threshold {
            correct += if same[order[i]] { 1 } else { -1 };
            i += 1;
        }
        if correct > best_correct {
            best_correct = correct;
            best_threshold = threshold;
        }
    }
    Ok(VerificationOutcome {
        accuracy: best_correct as f64 / total,
        threshold: best_threshold,
    })
}

/// Scores index pairs from one embedding set and runs
/// [`verification_accuracy`] over them.
pub fn verify_pairs(
    set: &EmbeddingSet,
    pairs: &[(usize, usize, bool)],
) -> Result<VerificationOutcome> {
    let (scores, same) = pair_scores(set, pairs)?;
    verification_accuracy(&scores, &same)
}

/// Cosine scores for explicit index pairs, with their labels.
pub fn pair_scores(
    set: &EmbeddingSet,
    pairs: &[(usize, usize, bool)],
) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut scores = Vec::with_capacity(pairs.len());
    let mut same = Vec::with_capacity(pairs.len());
    for &(a, b, label) in pairs {
        if a >= set.len() || b >= set.len() {
            return Err(PetalError::Input(format!(
                "pair ({a}, {b}) is out of range for a set of {}",
                set.len()
            )));
        }
        scores.push(set.matrix().row(a).dot(&set.matrix().row(b)));
        same.push(label);
    }
    Ok((scores, same))
}

/// True-accept rate at each requested false-accept rate, using the step
/// convention: among thresholds whose FAR stays at or under the target,
/// take the best TAR. The threshold above every score (accept nothing,
/// FAR 0, TAR 0) is always in play, so every target has an answer.
pub fn tar_at_far(scores: &[f64], same: &[bool], fars: &[f64]) -> Result<Vec<f64>> {
    if scores.len() != same.len() {
        return Err(PetalError::Shape(format!(
            "{} scores but {} labels",
            scores.len(),
            same.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(PetalError::Numeric("ROC scores must be finite".into()));
    }
    for &far in fars {
        if !(0.0..=1.0).contains(&far) {
            return Err(PetalError::Config(format!("FAR target {far} is outside [0, 1]")));
        }
    }
    let positives = same.iter().filter(|&&s| s).count();
    let negatives = same.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(PetalError::Protocol(
            "ROC needs at least one genuine and one impostor pair".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut best = vec![0.0f64; fars.len()];
    let mut accepted_pos = 0usize;
    let mut accepted_neg = 0usize;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if same[order[i]] {
                accepted_pos += 1;
            } else {
                accepted_neg += 1;
            }
            i += 1;
        }
        let far = accepted_neg as f64 / negatives as f64;
        let tar = accepted_pos as f64 / positives as f64;
        for (slot, &target) in fars.iter().enumerate() {
            if far <= target && tar > best[slot] {
                best[slot] = tar;
            }
        }
    }
    Ok(best)
}

/// Open-set identification: the acceptance threshold at each FPIR comes
/// from the unknown probes' top gallery similarities (`k = floor(fpir *
/// n_unknown)` of them may sit strictly above it), and TPIR counts the
/// known probes whose rank-1 identity is correct with similarity strictly
/// above that threshold.
pub fn open_set_identification(
    gallery: &EmbeddingSet,
    known: &EmbeddingSet,
    unknown: &EmbeddingSet,
    fpirs: &[f64],
) -> Result<Vec<f64>> {
    if unknown.is_empty() {
        return Err(PetalError::Protocol(
            "open-set identification needs unknown probes to set its thresholds".into(),
        ));
    }
    if known.is_empty() {
        return Err(PetalError::Input("open-set identification needs known probes".into()));
    }
    for &fpir in fpirs {
        if !(0.0..=1.0).contains(&fpir) {
            return Err(PetalError::Config(format!("FPIR target {fpir} is outside [0, 1]")));
        }
    }
    let index = index_gallery(gallery);
    for label in unknown.labels() {
        if index.position.contains_key(label) {
            return Err(PetalError::Protocol(format!(
                "unknown probe identity '{label}' is enrolled in the gallery"
            )));
        }
    }

    // Decision data per known probe: is rank-1 correct, and at what score.
    let mut known_hits = Vec::with_capacity(known.len());
    for (row, label) in known.matrix().rows().into_iter().zip(known.labels()) {
        let Some(&true_idx) = index.position.get(label) else {
            return Err(PetalError::Protocol(format!(
                "known probe identity '{label}' is not enrolled in the gallery"
            )));
        };
        let scores = identity_scores(gallery, &index, row);
        let mut best = 0usize;
        for (j, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = j;
            }
        }
        known_hits.push((best == true_idx, scores[best]));
    }

    let mut unknown_top: Vec<f64> = unknown
        .matrix()
        .rows()
        .into_iter()
        .map(|row| {
            let sims: Array1<f64> = gallery.matrix().dot(&row);
            sims.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    unknown_top.sort_by(|a, b| b.total_cmp(a));

    let mut out = Vec::with_capacity(fpirs.len());
    for &fpir in fpirs {
        let budget = (fpir * unknown_top.len() as f64).floor() as usize;
        let threshold = if budget >= unknown_top.len() {
            f64::NEG_INFINITY
        } else {
            unknown_top[budget]
        };
        let accepted = known_hits
            .iter()
            .filter(|&&(correct, score)| correct && score > threshold)
            .count();
        out.push(accepted as f64 / known_hits.len() as f64);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankPoint {
    pub k: usize,
    pub accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub far: f64,
    pub tar: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpenSetPoint {
    pub fpir: f64,
    pub tpir: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub gallery_rows: usize,
    pub gallery_identities: usize,
    pub known_probes: usize,
    pub unknown_probes: usize,
    pub genuine_pairs: usize,
    pub impostor_pairs: usize,
}

/// Full evaluation of one model on one benchmark, serializable as JSON and
/// renderable as an aligned text table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub counts: EvalCounts,
    pub excluded: Vec<ExcludedRecord>,
    pub rank: Vec<RankPoint>,
    pub verification: VerificationOutcome,
    pub tar_at_far: Vec<RocPoint>,
    /// Empty when the benchmark carries no unknown identities.
    pub tpir_at_fpir: Vec<OpenSetPoint>,
}

impl EvalReport {
    /// Internal consistency: every rate in [0, 1], rank accuracy
    /// nondecreasing in k, TAR nondecreasing in FAR.
    pub fn validate(&self) -> Result<()> {
        let mut rates: Vec<f64> = vec![self.verification.accuracy];
        rates.extend(self.rank.iter().map(|p| p.accuracy));
        rates.extend(self.tar_at_far.iter().map(|p| p.tar));
        rates.extend(self.tpir_at_fpir.iter().map(|p| p.tpir));
        for rate in rates {
            if !(0.0..=1.0).contains(&rate) {
                return Err(PetalError::Numeric(format!("rate {rate} escaped [0, 1]")));
            }
        }
        for pair in self.rank.windows(2) {
            if pair[0].k < pair[1].k && pair[0].accuracy > pair[1].accuracy {
                return Err(PetalError::Numeric(
                    "rank accuracy decreased at a deeper k".into(),
                ));
            }
        }
        for pair in self.tar_at_far.windows(2) {
            if pair[0].far < pair[1].far && pair[0].tar > pair[1].tar {
                return Err(PetalError::Numeric("TAR decreased at a looser FAR".into()));
            }
        }
        Ok(())
    }

    /// Aligned three-column table: group, metric, value.
    pub fn to_text_table(&self) -> String {
        let mut rows: Vec<(String, String, String)> = Vec::new();
        for point in &self.rank {
            rows.push((
                "retrieval".into(),
                format!("rank-{}", point.k),
                format!("{:.4}", point.accuracy),
            ));
        }
        rows.push((
            "verification".into(),
            "accuracy".into(),
            format!("{:.4}", self.verification.accuracy),
        ));
        rows.push((
            "verification".into(),
            "threshold".into(),
            format!("{:.4}", self.verification.threshold),
        ));
        for point in &self.tar_at_far {
            rows.push((
                "verification".into(),
                format!("tar@far={:.0e}", point.far),
                format!("{:.4}", point.tar),
            ));
        }
        for point in &self.tpir_at_fpir {
            rows.push((
                "open-set".into(),
                format!("tpir@fpir={:.0e}", point.fpir),
                format!("{:.4}", point.tpir),
            ));
        }
        rows.push((
            "counts".into(),
            "gallery rows".into(),
            self.counts.gallery_rows.to_string(),
        ));
        rows.push((
            "counts".into(),
            "gallery identities".into(),
            self.counts.gallery_identities.to_string(),
        ));
        rows.push((
            "counts".into(),
            "known probes".into(),
            self.counts.known_probes.to_string(),
        ));
        rows.push((
            "counts".into(),
            "unknown probes".into(),
            self.counts.unknown_probes.to_string(),
        ));
        rows.push((
            "counts".into(),
            "excluded records".into(),
            self.excluded.len().to_string(),
        ));
        let group_w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max("group".len());
        let metric_w = rows.iter().map(|r| r.1.len()).max().unwrap_or(0).max("metric".len());
        let mut out = format!("{:<group_w$}  {:<metric_w$}  value\n", "group", "metric");
        for (group, metric, value) in rows {
            out.push_str(&format!("{group:<group_w$}  {metric:<metric_w$}  {value}\n"));
        }
        out
    }
}

/// Runs the whole protocol: extracts gallery and probe splits, separates
/// known from unknown probes by gallery enrollment, and reports retrieval,
/// verification (over every known-probe x gallery-row pair), TAR@FAR, and
/// open-set identification. The open-set section is empty when the
/// benchmark has no unknown identities.
pub fn evaluate_model<F: Real>(
    model: &AdaptedModel<F>,
    manifest: &DatasetManifest,
    batch_size: usize,
) -> Result<EvalReport> {
    let gallery_x = extract(model, manifest, Split::Gallery, batch_size)?;
    let probe_x = extract(model, manifest, Split::Probe, batch_size)?;
    let gallery = gallery_x.embeddings;
    let probes = probe_x.embeddings;
    if gallery.is_empty() {
        return Err(PetalError::Input("gallery split produced no embeddings".into()));
    }
    if probes.is_empty() {
        return Err(PetalError::Input("probe split produced no embeddings".into()));
    }
    let index = index_gallery(&gallery);
    let mut known_rows = Vec::new();
    let mut unknown_rows = Vec::new();
    for (i, label) in probes.labels().iter().enumerate() {
        if index.position.contains_key(label) {
            known_rows.push(i);
        } else {
            unknown_rows.push(i);
        }
    }
    if known_rows.is_empty() {
        return Err(PetalError::Input(
            "no probe shares an identity with the gallery; nothing to retrieve".into(),
        ));
    }
    let known = probes.select(&known_rows)?;
    let unknown = probes.select(&unknown_rows)?;

    let rank_values = rank_retrieval(&gallery, &known, &RANK_KS)?;
    let rank = RANK_KS
        .iter()
        .zip(rank_values)
        .map(|(&k, accuracy)| RankPoint { k, accuracy })
        .collect();

    // Verification pairs: every known probe against every gallery row.
    let sims = known.matrix().dot(&gallery.matrix().t());
    let mut scores = Vec::with_capacity(known.len() * gallery.len());
    let mut same = Vec::with_capacity(scores.capacity());
    for (i, row) in sims.rows().into_iter().enumerate() {
        for (j, &s) in row.iter().enumerate() {
            scores.push(s);
            same.push(known.labels()[i] == gallery.labels()[j]);
        }
    }
    let genuine_pairs = same.iter().filter(|&&s| s).count();
    let verification = verification_accuracy(&scores, &same)?;
    let tar_values = tar_at_far(&scores, &same, &TAR_FARS)?;
    let tar = TAR_FARS
        .iter()
        .zip(tar_values)
        .map(|(&far, tar)| RocPoint { far, tar })
        .collect();

    let tpir_at_fpir = if unknown.is_empty() {
        Vec::new()
    } else {
        let tpir_values = open_set_identification(&gallery, &known, &unknown, &TPIR_FPIRS)?;
        TPIR_FPIRS
            .iter()
            .zip(tpir_values)
            .map(|(&fpir, tpir)| OpenSetPoint { fpir, tpir })
            .collect()
    };

    let mut excluded = gallery_x.excluded;
    excluded.extend(probe_x.excluded);
    let report = EvalReport {
        counts: EvalCounts {
            gallery_rows: gallery.len(),
            gallery_identities: index.identities.len(),
            known_probes: known.len(),
            unknown_probes: unknown.len(),
            genuine_pairs,
            impostor_pairs: same.len() - genuine_pairs,
        },
        excluded,
        rank,
        verification,
        tar_at_far: tar,
        tpir_at_fpir,
    };
    report.validate()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Site, ToyBackbone, ToyBackboneConfig};
    use crate::datasim::{generate_benchmark, DegradationSpec, GenerateConfig};
    use crate::injection::{inject, InjectMode, InjectionConfig};
    use crate::quality::{GateCalibration, SharpnessEstimator};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use std::collections::BTreeSet;

    fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let mut m = Array2::<f64>::zeros((n, d));
        for mut row in m.rows_mut() {
            loop {
                for v in row.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
                let norm = row.dot(&row).sqrt();
                if norm > 1e-3 {
                    row /= norm;
                    break;
                }
            }
        }
        m
    }

    fn random_set(
        n: usize,
        d: usize,
        identities: usize,
        split: Split,
        rng: &mut ChaCha8Rng,
    ) -> EmbeddingSet {
        let matrix = unit_rows(n, d, rng);
        let labels = (0..n)
            .map(|_| format!("id{}", rng.random_range(0..identities)))
            .collect();
        EmbeddingSet::new(matrix, labels, vec![split; n]).expect("set")
    }

    /// Applies a shared chain of Givens rotations: an exact isometry up to
    /// float rounding, so cosine metrics must not move.
    fn rotate(set: &EmbeddingSet, seed: u64) -> EmbeddingSet {
        let mut m = set.matrix().clone();
        let d = m.ncols();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..3 * d {
            let a = rng.random_range(0..d);
            let mut b = rng.random_range(0..d);
            if a == b {
                b = (b + 1) % d;
            }
            let theta: f64 = rng.random::<f64>() * std::f64::consts::TAU;
            let (sin, cos) = theta.sin_cos();
            for mut row in m.rows_mut() {
                let (x, y) = (row[a], row[b]);
                row[a] = cos * x - sin * y;
                row[b] = sin * x + cos * y;
            }
        }
        EmbeddingSet::normalized(m, set.labels().to_vec(), set.splits().to_vec()).expect("rotated")
    }

    fn one_hot_set(labels: &[&str], hot: &[usize], d: usize, split: Split) -> EmbeddingSet {
        let mut m = Array2::zeros((labels.len(), d));
        for (i, &h) in hot.iter().enumerate() {
            m[(i, h)] = 1.0;
        }
        EmbeddingSet::new(m, labels.iter().map(|s| s.to_string()).collect(), vec![split; labels.len()])
            .expect("one-hot set")
    }

    #[test]
    fn embedding_sets_enforce_unit_rows_and_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = unit_rows(3, 4, &mut rng);
        let labels = vec!["a".into(), "b".into(), "a".into()];
        let splits = vec![Split::Gallery; 3];
        let set = EmbeddingSet::new(m.clone(), labels.clone(), splits.clone()).expect("valid");
        assert_eq!(set.identities(), vec!["a".to_string(), "b".to_string()]);

        let err = EmbeddingSet::new(m.clone(), labels[..2].to_vec(), splits.clone());
        assert!(matches!(err, Err(PetalError::Shape(_))));

        let mut long = m.clone();
        long[(1, 0)] += 0.5;
        let err = EmbeddingSet::new(long.clone(), labels.clone(), splits.clone());
        assert!(matches!(err, Err(PetalError::Numeric(_))));
        EmbeddingSet::normalized(long, labels.clone(), splits.clone())
            .expect("normalized constructor fixes the norm");

        let zero = Array2::zeros((3, 4));
        let err = EmbeddingSet::normalized(zero, labels, splits);
        assert!(matches!(err, Err(PetalError::Numeric(_))));
    }

    fn tiny_model() -> AdaptedModel<f64> {
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
        })
        .expect("backbone");
        let config = InjectionConfig {
            sites: BTreeSet::from([Site::AttentionQkv, Site::FeatureHead]),
            rank: 2,
            scale: 1.0,
            dropout_rate: 0.0,
            mode: InjectMode::Twin,
        };
        let gate = GateCalibration {
            mu: 0.5,
            sigma: 0.1,
            threshold: 0.6,
            sample_count: 1,
            estimator: "builtin-sharpness".into(),
            seed: 0,
        };
        inject(backbone, config, gate, Box::new(SharpnessEstimator), 29).expect("inject")
    }

    fn tiny_dataset(seed: u64) -> (tempfile::TempDir, DatasetManifest) {
        let dir = tempfile::tempdir().expect("tempdir");
        let config = GenerateConfig {
            identities: 3,
            unknown_identities: 1,
            train_per_identity: 2,
            gallery_per_identity: 2,
            probes_per_cell: 1,
            image_size: 32,
            identity_spread: 2.0,
            intra_jitter: 0.5,
            train_degraded_fraction: 0.0,
            grid: vec![
                DegradationSpec::identity(),
                DegradationSpec {
                    blur_sigma: 1.0,
                    downscale_factor: 2,
                    noise_sigma: 0.02,
                    jpeg_like_quality: 100,
                    occlusion_fraction: 0.0,
                },
            ],
            seed,
        };
        generate_benchmark(&config, dir.path()).expect("generate");
        let manifest =
            DatasetManifest::read_file(&dir.path().join("manifest.jsonl")).expect("manifest");
        (dir, manifest)
    }

    #[test]
    fn extract_normalizes_batches_and_reports_undecodable_files() {
        let (dir, mut manifest) = tiny_dataset(101);
        let model = tiny_model();
        let whole = extract(&model, &manifest, Split::Gallery, 4).expect("extract");
        assert!(whole.excluded.is_empty());
        assert_eq!(whole.embeddings.len(), 6);
        for row in whole.embeddings.matrix().rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() <= UNIT_NORM_TOLERANCE);
        }

        // Batch size must not change the embeddings beyond re-association.
        let tiny_batches = extract(&model, &manifest, Split::Gallery, 1).expect("extract");
        let diff = (whole.embeddings.matrix() - tiny_batches.embeddings.matrix())
            .iter()
            .fold(0.0f64, |a, &b| a.max(b.abs()));
        assert!(diff <= 1e-5, "batch-size drift {diff} too large");

        // A corrupted image is excluded with its path, not fatal.
        let victim = manifest
            .split_records(Split::Gallery)
            .next()
            .expect("record")
            .clone();
        std::fs::write(dir.path().join(&victim.path), b"not a png").expect("corrupt");
        // Duplicate an intact record: determinism means identical rows.
        let dup = manifest
            .split_records(Split::Gallery)
            .nth(1)
            .expect("record")
            .clone();
        manifest.records.push(dup.clone());
        let damaged = extract(&model, &manifest, Split::Gallery, 4).expect("extract");
        assert_eq!(damaged.excluded.len(), 1);
        assert_eq!(damaged.excluded[0].path, victim.path);
        assert_eq!(damaged.embeddings.len(), 6, "five originals plus the duplicate");
        let rows = damaged.embeddings.matrix();
        let last = rows.row(rows.nrows() - 1);
        let original = rows.row(0); // dup was the second record; the first was corrupted away
        let dup_diff = (&last - &original).iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        assert_eq!(dup_diff, 0.0, "duplicate records embed bit-identically");
    }

    #[test]
    fn injected_at_init_extracts_like_the_pristine_backbone() {
        let (_dir, manifest) = tiny_dataset(103);
        let adapted = tiny_model();
        let pristine = {
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
            })
            .expect("backbone");
            inject(
                backbone,
                InjectionConfig {
                    sites: BTreeSet::new(),
                    rank: 2,
                    scale: 1.0,
                    dropout_rate: 0.0,
                    mode: InjectMode::None,
                },
                GateCalibration {
                    mu: 0.5,
                    sigma: 0.1,
                    threshold: 0.6,
                    sample_count: 1,
                    estimator: "builtin-sharpness".into(),
                    seed: 0,
                },
                Box::new(SharpnessEstimator),
                29,
            )
            .expect("inject")
        };
        let a = extract(&adapted, &manifest, Split::Probe, 4).expect("extract");
        let b = extract(&pristine, &manifest, Split::Probe, 4).expect("extract");
        let diff = (a.embeddings.matrix() - b.embeddings.matrix())
            .iter()
            .fold(0.0f64, |a, &b| a.max(b.abs()));
        assert!(diff <= 1e-6, "zero-initialized adapters changed embeddings by {diff}");
    }

    #[test]
    fn rank_retrieval_covers_the_trivial_geometries() {
        let gallery = one_hot_set(&["a", "b", "c"], &[0, 1, 2], 4, Split::Gallery);
        // Probe set equals the gallery: every probe self-matches.
        let probe = one_hot_set(&["a", "b", "c"], &[0, 1, 2], 4, Split::Probe);
        let acc = rank_retrieval(&gallery, &probe, &[1]).expect("rank");
        assert_eq!(acc, vec![1.0]);

        // Shuffled one-hot probes still land on their identity.
        let shuffled = one_hot_set(&["c", "a", "b"], &[2, 0, 1], 4, Split::Probe);
        let acc = rank_retrieval(&gallery, &shuffled, &[1, 5]).expect("rank");
        assert_eq!(acc, vec![1.0, 1.0], "k past the identity count saturates at 1");

        let stranger = one_hot_set(&["d"], &[3], 4, Split::Probe);
        let err = rank_retrieval(&gallery, &stranger, &[1]);
        assert!(matches!(err, Err(PetalError::Protocol(_))));

        let err = rank_retrieval(&gallery, &probe, &[0]);
        assert!(matches!(err, Err(PetalError::Config(_))));
    }

    /// Brute-force oracle: for every probe, count identities that outrank
    /// the true one by direct pairwise comparison.
    fn oracle_rank(gallery: &EmbeddingSet, probe: &EmbeddingSet, ks: &[usize]) -> Vec<f64> {
        let mut identities: Vec<String> = Vec::new();
        for label in gallery.labels() {
            if !identities.contains(label) {
                identities.push(label.clone());
            }
        }
        let score_of = |identity: &str, p: ArrayView1<f64>| -> f64 {
            gallery
                .labels()
                .iter()
                .zip(gallery.matrix().rows())
                .filter(|(l, _)| l.as_str() == identity)
                .map(|(_, row)| row.dot(&p))
                .fold(f64::NEG_INFINITY, f64::max)
        };
        let mut hits = vec![0usize; ks.len()];
        for (p, label) in probe.matrix().rows().into_iter().zip(probe.labels()) {
            let true_pos = identities.iter().position(|i| i == label).expect("enrolled");
            let true_score = score_of(label, p);
            let mut ahead = 0;
            for (j, identity) in identities.iter().enumerate() {
                if j == true_pos {
                    continue;
                }
                let s = score_of(identity, p);
                if s > true_score || (s == true_score && j < true_pos) {
                    ahead += 1;
                }
            }
            for (slot, &k) in ks.iter().enumerate() {
                if ahead < k {
                    hits[slot] += 1;
                }
            }
        }
        hits.iter().map(|&h| h as f64 / probe.len() as f64).collect()
    }

    #[test]
    fn rank_retrieval_equals_the_bruteforce_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..50 {
            let identities = rng.random_range(2..=8);
            let gallery = random_set(rng.random_range(identities..=13), 6, identities, Split::Gallery, &mut rng);
            // Draw probe labels from the enrolled set only.
            let enrolled = gallery.identities();
            let n_probe = rng.random_range(1..=12);
            let matrix = unit_rows(n_probe, 6, &mut rng);
            let labels: Vec<String> = (0..n_probe)
                .map(|_| enrolled[rng.random_range(0..enrolled.len())].clone())
                .collect();
            let probe =
                EmbeddingSet::new(matrix, labels, vec![Split::Probe; n_probe]).expect("probe");
            let ks = [1, 2, 3, 5, 20];
            let fast = rank_retrieval(&gallery, &probe, &ks).expect("rank");
            let slow = oracle_rank(&gallery, &probe, &ks);
            assert_eq!(fast, slow, "trial {trial} disagreed with the oracle");
        }
    }

    #[test]
    fn verification_covers_separable_and_degenerate_scores() {
        // Perfectly separated: all genuine above all impostor.
        let scores = [0.9, 0.8, 0.2, 0.1];
        let same = [true, true, false, false];
        let outcome = verification_accuracy(&scores, &same).expect("verify");
        assert_eq!(outcome.accuracy, 1.0);
        assert_eq!(tar_at_far(&scores, &same, &[0.0, 1e-3, 1.0]).expect("tar"), vec![1.0; 3]);

        // One constant score: the best rule predicts the majority class.
        let scores = [0.5; 5];
        let same = [true, true, false, false, false];
        let outcome = verification_accuracy(&scores, &same).expect("verify");
        assert_eq!(outcome.accuracy, 0.6);
        let tar = tar_at_far(&scores, &same, &[0.0]).expect("tar");
        assert_eq!(tar, vec![0.0], "FAR 0 forces the empty acceptance set");

        // All-same-label input cannot draw a ROC.
        let err = tar_at_far(&[0.5, 0.6], &[true, true], &[0.1]);
        assert!(matches!(err, Err(PetalError::Protocol(_))));
        // But best-threshold accuracy is still well defined.
        let outcome = verification_accuracy(&[0.5, 0.6], &[true, true]).expect("verify");
        assert_eq!(outcome.accuracy, 1.0);

        let err = verification_accuracy(&[0.5], &[true, false]);
        assert!(matches!(err, Err(PetalError::Shape(_))));
        let err = verification_accuracy(&[], &[]);
        assert!(matches!(err, Err(PetalError::Input(_))));
        let err = verification_accuracy(&[f64::NAN], &[true]);
        assert!(matches!(err, Err(PetalError::Numeric(_))));
    }

    /// Midpoint-sweep oracle for best verification accuracy.
    fn oracle_verification(scores: &[f64], same: &[bool]) -> f64 {
        let mut sorted = scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut candidates = vec![sorted[0] - 1.0, sorted[sorted.len() - 1] + 1.0];
        for pair in sorted.windows(2) {
            candidates.push((pair[0] + pair[1]) / 2.0);
        }
        let mut best = 0.0f64;
        for t in candidates {
            let correct = scores
                .iter()
                .zip(same)
                .filter(|&(&s, &label)| (s >= t) == label)
                .count();
            best = best.max(correct as f64 / scores.len() as f64);
        }
        best
    }

    /// Exhaustive threshold-sweep oracle for TAR@FAR.
    fn oracle_tar(scores: &[f64], same: &[bool], far_target: f64) -> f64 {
        let mut candidates: Vec<f64> = scores.to_vec();
        candidates.push(scores.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) + 1.0);
        let positives = same.iter().filter(|&&s| s).count() as f64;
        let negatives = same.len() as f64 - positives;
        let mut best = 0.0f64;
        for t in candidates {
            let tar = scores
                .iter()
                .zip(same)
                .filter(|&(&s, &label)| label && s >= t)
                .count() as f64
                / positives;
            let far = scores
                .iter()
                .zip(same)
                .filter(|&(&s, &label)| !label && s >= t)
                .count() as f64
                / negatives;
            if far <= far_target {
                best = best.max(tar);
            }
        }
        best
    }

    #[test]
    fn verification_and_roc_match_the_sweep_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for trial in 0..50 {
            let n = rng.random_range(4..=20);
            let mut scores: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut same: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.4).collect();
            same[0] = true;
            same[1] = false;
            // Give ties a chance to appear.
            if n > 6 {
                scores[3] = scores[2];
                scores[5] = scores[4];
            }
            let outcome = verification_accuracy(&scores, &same).expect("verify");
            let oracle = oracle_verification(&scores, &same);
            assert_eq!(outcome.accuracy, oracle, "trial {trial}: accuracy vs oracle");

            let fars = [0.0, 1e-3, 0.2, 0.5, 1.0];
            let fast = tar_at_far(&scores, &same, &fars).expect("tar");
            for (slot, &far) in fars.iter().enumerate() {
                let slow = oracle_tar(&scores, &same, far);
                assert_eq!(fast[slot], slow, "trial {trial}: TAR@{far} vs oracle");
            }
        }
    }

    #[test]
    fn open_set_identification_covers_the_trivial_geometries() {
        // Unknowns orthogonal to the gallery, knowns aligned exactly.
        let gallery = one_hot_set(&["a", "b"], &[0, 1], 4, Split::Gallery);
        let known = one_hot_set(&["a", "b"], &[0, 1], 4, Split::Probe);
        let unknown = one_hot_set(&["x", "y"], &[2, 3], 4, Split::Probe);
        let tpir =
            open_set_identification(&gallery, &known, &unknown, &[0.01, 0.1, 1.0]).expect("tpir");
        assert_eq!(tpir, vec![1.0, 1.0, 1.0]);

        // Single-identity gallery, mismatched known probe: never correct.
        let gallery1 = one_hot_set(&["a"], &[0], 4, Split::Gallery);
        let wrong = one_hot_set(&["a"], &[1], 4, Split::Probe);
        let tpir = open_set_identification(&gallery1, &wrong, &unknown, &[0.5]).expect("tpir");
        assert_eq!(tpir, vec![0.0], "an orthogonal probe cannot clear any threshold");

        let empty = EmbeddingSet::new(
            Array2::zeros((0, 4)),
            Vec::new(),
            Vec::new(),
        )
        .expect("empty set");
        let err = open_set_identification(&gallery, &known, &empty, &[0.1]);
        assert!(matches!(err, Err(PetalError::Protocol(_))));

        let enrolled_unknown = one_hot_set(&["a"], &[2], 4, Split::Probe);
        let err = open_set_identification(&gallery, &known, &enrolled_unknown, &[0.1]);
        assert!(matches!(err, Err(PetalError::Protocol(_))));
    }

    /// Oracle: enumerate thresholds at every unknown top-score and pick the
    /// best TPIR whose strictly-above unknown count stays within budget.
    fn oracle_tpir(
        gallery: &EmbeddingSet,
        known: &EmbeddingSet,
        unknown: &EmbeddingSet,
        fpir: f64,
    ) -> f64 {
        let top = |p: ArrayView1<f64>| -> f64 {
            gallery
                .matrix()
                .rows()
                .into_iter()
                .map(|g| g.dot(&p))
                .fold(f64::NEG_INFINITY, f64::max)
        };
        let best_identity = |p: ArrayView1<f64>| -> (String, f64) {
            let mut best: Option<(String, f64)> = None;
            let mut identities: Vec<String> = Vec::new();
            for label in gallery.labels() {
                if !identities.contains(label) {
                    identities.push(label.clone());
                }
            }
            for identity in identities {
                let s = gallery
                    .labels()
                    .iter()
                    .zip(gallery.matrix().rows())
                    .filter(|(l, _)| **l == identity)
                    .map(|(_, row)| row.dot(&p))
                    .fold(f64::NEG_INFINITY, f64::max);
                match &best {
                    Some((_, b)) if *b >= s => {}
                    _ => best = Some((identity, s)),
                }
            }
            best.expect("nonempty gallery")
        };
        let unknown_tops: Vec<f64> = unknown.matrix().rows().into_iter().map(top).collect();
        let budget = (fpir * unknown_tops.len() as f64).floor() as usize;
        let mut candidates: Vec<f64> = unknown_tops.clone();
        candidates.push(f64::NEG_INFINITY);
        let mut best = 0.0f64;
        for t in candidates {
            let fp = unknown_tops.iter().filter(|&&s| s > t).count();
            if fp > budget {
                continue;
            }
            let tp = known
                .matrix()
                .rows()
                .into_iter()
                .zip(known.labels())
                .filter(|(p, label)| {
                    let (identity, score) = best_identity(*p);
                    identity == **label && score > t
                })
                .count();
            best = best.max(tp as f64 / known.len() as f64);
        }
        best
    }

    #[test]
    fn open_set_matches_the_threshold_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for trial in 0..30 {
            let identities = rng.random_range(2..=5);
            let gallery =
                random_set(rng.random_range(identities..=8), 5, identities, Split::Gallery, &mut rng);
            let enrolled = gallery.identities();
            let n_known = rng.random_range(2..=8);
            let known_matrix = unit_rows(n_known, 5, &mut rng);
            let known_labels: Vec<String> = (0..n_known)
                .map(|_| enrolled[rng.random_range(0..enrolled.len())].clone())
                .collect();
            let known = EmbeddingSet::new(known_matrix, known_labels, vec![Split::Probe; n_known])
                .expect("known");
            let n_unknown = rng.random_range(1..=8);
            let unknown_matrix = unit_rows(n_unknown, 5, &mut rng);
            let unknown_labels: Vec<String> =
                (0..n_unknown).map(|i| format!("stranger{i}")).collect();
            let unknown =
                EmbeddingSet::new(unknown_matrix, unknown_labels, vec![Split::Probe; n_unknown])
                    .expect("unknown");
            let fpirs = [0.0, 0.25, 0.5, 1.0];
            let fast =
                open_set_identification(&gallery, &known, &unknown, &fpirs).expect("tpir");
            for (slot, &fpir) in fpirs.iter().enumerate() {
                let slow = oracle_tpir(&gallery, &known, &unknown, fpir);
                assert_eq!(fast[slot], slow, "trial {trial}: TPIR@{fpir} vs oracle");
            }
        }
    }

    #[test]
    fn metrics_are_invariant_to_a_shared_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let gallery = random_set(10, 6, 4, Split::Gallery, &mut rng);
        let enrolled = gallery.identities();
        let known_matrix = unit_rows(8, 6, &mut rng);
        let known_labels: Vec<String> = (0..8)
            .map(|_| enrolled[rng.random_range(0..enrolled.len())].clone())
            .collect();
        let known =
            EmbeddingSet::new(known_matrix, known_labels, vec![Split::Probe; 8]).expect("known");
        let unknown_matrix = unit_rows(5, 6, &mut rng);
        let unknown_labels: Vec<String> = (0..5).map(|i| format!("u{i}")).collect();
        let unknown =
            EmbeddingSet::new(unknown_matrix, unknown_labels, vec![Split::Probe; 5]).expect("unknown");

        let (r_gallery, r_known, r_unknown) =
            (rotate(&gallery, 77), rotate(&known, 77), rotate(&unknown, 77));

        let ks = [1, 2, 4];
        let rank_a = rank_retrieval(&gallery, &known, &ks).expect("rank");
        let rank_b = rank_retrieval(&r_gallery, &r_known, &ks).expect("rank");
        for (a, b) in rank_a.iter().zip(&rank_b) {
            assert!((a - b).abs() <= 1e-9, "rank moved under rotation: {a} vs {b}");
        }

        let sims = known.matrix().dot(&gallery.matrix().t());
        let mut scores = Vec::new();
        let mut same = Vec::new();
        for (i, row) in sims.rows().into_iter().enumerate() {
            for (j, &s) in row.iter().enumerate() {
                scores.push(s);
                same.push(known.labels()[i] == gallery.labels()[j]);
            }
        }
        let r_sims = r_known.matrix().dot(&r_gallery.matrix().t());
        let r_scores: Vec<f64> = r_sims.iter().copied().collect();
        let acc_a = verification_accuracy(&scores, &same).expect("verify").accuracy;
        let acc_b = verification_accuracy(&r_scores, &same).expect("verify").accuracy;
        assert!((acc_a - acc_b).abs() <= 1e-9);
        let tar_a = tar_at_far(&scores, &same, &[0.1, 0.4]).expect("tar");
        let tar_b = tar_at_far(&r_scores, &same, &[0.1, 0.4]).expect("tar");
        for (a, b) in tar_a.iter().zip(&tar_b) {
            assert!((a - b).abs() <= 1e-9);
        }

        let tpir_a =
            open_set_identification(&gallery, &known, &unknown, &[0.2, 0.6]).expect("tpir");
        let tpir_b =
            open_set_identification(&r_gallery, &r_known, &r_unknown, &[0.2, 0.6]).expect("tpir");
        for (a, b) in tpir_a.iter().zip(&tpir_b) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn evaluate_model_builds_a_consistent_report() {
        let (_dir, manifest) = tiny_dataset(107);
        let model = tiny_model();
        let report = evaluate_model(&model, &manifest, 4).expect("evaluate");
        report.validate().expect("internal invariants");
        assert_eq!(report.counts.gallery_rows, 6);
        assert_eq!(report.counts.gallery_identities, 3);
        assert_eq!(report.counts.unknown_probes, 2, "one unknown identity, two grid cells");
        assert_eq!(report.rank.len(), RANK_KS.len());
        assert_eq!(report.tpir_at_fpir.len(), TPIR_FPIRS.len());
        assert_eq!(
            report.rank.last().expect("ranks").accuracy,
            1.0,
            "k beyond the identity count saturates"
        );

        let json = serde_json::to_string(&report).expect("json");
        let back: EvalReport = serde_json::from_str(&json).expect("parse");
        assert_eq!(back, report);

        let table = report.to_text_table();
        assert!(table.contains("rank-1"));
        assert!(table.contains("tar@far=1e-4"));
        assert!(table.contains("tpir@fpir=1e-2"));
        assert!(table.contains("gallery identities"));
        let header_width = table.lines().next().expect("header").len();
        assert!(table.lines().all(|l| l.is_empty() || l.len() >= header_width.min(10)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn rank_accuracy_is_monotone_and_saturates(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let identities = rng.random_range(2..=6);
            let gallery = random_set(rng.random_range(identities..=10), 5, identities, Split::Gallery, &mut rng);
            let enrolled = gallery.identities();
            let n = rng.random_range(1..=8);
            let matrix = unit_rows(n, 5, &mut rng);
            let labels: Vec<String> = (0..n)
                .map(|_| enrolled[rng.random_range(0..enrolled.len())].clone())
                .collect();
            let probe = EmbeddingSet::new(matrix, labels, vec![Split::Probe; n]).unwrap();
            let ks = [1, 2, 3, 4, 8, 32];
            let acc = rank_retrieval(&gallery, &probe, &ks).unwrap();
            for pair in acc.windows(2) {
                prop_assert!(pair[0] <= pair[1], "rank accuracy must grow with k");
            }
            for a in &acc {
                prop_assert!((0.0..=1.0).contains(a));
            }
            prop_assert_eq!(*acc.last().unwrap(), 1.0, "k past the identity count finds everyone");
        }

        #[test]
        fn tar_is_monotone_in_far(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(4..=24);
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut same: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.5).collect();
            same[0] = true;
            same[1] = false;
            let fars = [0.0, 1e-3, 0.1, 0.3, 0.7, 1.0];
            let tar = tar_at_far(&scores, &same, &fars).unwrap();
            for pair in tar.windows(2) {
                prop_assert!(pair[0] <= pair[1], "TAR must grow with the FAR budget");
            }
            for t in &tar {
                prop_assert!((0.0..=1.0).contains(t));
            }
        }
    }
}
