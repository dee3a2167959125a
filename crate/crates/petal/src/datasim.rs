//! Procedural recognition benchmarks with controlled quality degradation.
//!
//! Real face sets cannot ship inside a test suite, so this module renders
//! stylized portrait-like identities from seeded parameters and degrades
//! copies of them through a fixed pipeline (blur, downscale, sensor noise,
//! compression artifacts, occlusion). The result is a tiny benchmark with a
//! known ground truth: clean train and gallery splits, degraded probe split,
//! and a quality gap between them that the built-in sharpness estimator can
//! measure. Everything is deterministic given the dataset seed; per-image
//! seeds derive from (seed, identity, split, index) so output never depends
//! on generation order or worker count.
//!
//! Out of scope by design: video probes, atmospheric or motion models, and
//! color imagery (identities render as single-channel 64x64 by default).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write as IoWrite};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{PetalError, Result};
use crate::imaging::{bilinear_resize, block_quantize, box_downscale, gaussian_blur, ImageBuf};
use crate::injection::derive_seed;
use crate::quality::{QualityEstimator, SharpnessEstimator};

/// Format tag on the first line of every manifest file.
pub const MANIFEST_FORMAT: &str = "petal-manifest/1";

/// Fill value for occluded rectangles, dark enough to read as a blocker.
pub const OCCLUSION_TONE: f64 = 0.08;

/// Blur severities used by the axis-sweep quality invariants. Steps start
/// at one pixel: sub-pixel blur sits inside the estimator's discrimination
/// floor at these image sizes.
pub const BLUR_AXIS: [f64; 4] = [0.0, 1.0, 2.0, 3.0];
/// Noise severities used by the axis-sweep quality invariants.
pub const NOISE_AXIS: [f64; 4] = [0.0, 0.02, 0.05, 0.1];
/// Compression qualities used by the axis-sweep quality invariants. The
/// built-in estimator resolves coarse compression against clean images;
/// intermediate qualities at small sizes move scores by less than its
/// discrimination floor, so the axis pins the supported contrast only.
pub const QUALITY_AXIS: [u8; 2] = [10, 100];

// ---------------------------------------------------------------------------
// Splits and manifests
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Gallery,
    Probe,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Gallery, Split::Probe];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Gallery => "gallery",
            Split::Probe => "probe",
        }
    }

    pub fn parse(text: &str) -> Result<Split> {
        match text {
            "train" => Ok(Split::Train),
            "gallery" => Ok(Split::Gallery),
            "probe" => Ok(Split::Probe),
            other => Err(PetalError::Config(format!(
                "unknown split {other:?}; expected train, gallery, or probe"
            ))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One image entry: a path relative to the manifest's directory, the identity
/// label, and the split it belongs to.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub path: String,
    pub identity: String,
    pub split: Split,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestHeader {
    format: String,
}

/// An on-disk dataset: a root directory plus the records that live under it.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DatasetManifest {
            root: root.into(),
            records: Vec::new(),
        }
    }

    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        self.root.join(&record.path)
    }

    pub fn load_image(&self, record: &ManifestRecord) -> Result<ImageBuf> {
        ImageBuf::load_png(&self.resolve(record))
    }

    pub fn split_records(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn split_identities(&self, split: Split) -> BTreeSet<String> {
        self.split_records(split)
            .map(|r| r.identity.clone())
            .collect()
    }

    /// Sorted identity labels of one split mapped to dense class indices.
    pub fn class_map(&self, split: Split) -> BTreeMap<String, usize> {
        self.split_identities(split)
            .into_iter()
            .enumerate()
            .map(|(i, id)| (id, i))
            .collect()
    }

    /// Writes the JSON-lines file: one header line with the format tag, then
    /// one record per line. Paths inside stay relative to `path`'s directory.
    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let header = ManifestHeader {
            format: MANIFEST_FORMAT.to_string(),
        };
        out.push_str(&serde_json::to_string(&header)?);
        out.push('\n');
        for record in &self.records {
            out.push_str(&serde_json::to_string(record)?);
            out.push('\n');
        }
        let mut file = fs::File::create(path)?;
        file.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let file = fs::File::open(path)?;
        let mut lines = BufReader::new(file).lines();
        let first = match lines.next() {
            Some(line) => line?,
            None => {
                return Err(PetalError::Manifest(format!(
                    "{}: empty file, expected a {MANIFEST_FORMAT} header line",
                    path.display()
                )))
            }
        };
        let header: ManifestHeader = serde_json::from_str(&first).map_err(|e| {
            PetalError::Manifest(format!("{}: bad header line: {e}", path.display()))
        })?;
        if header.format != MANIFEST_FORMAT {
            return Err(PetalError::Manifest(format!(
                "{}: format {:?} is not {MANIFEST_FORMAT}",
                path.display(),
                header.format
            )));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
                PetalError::Manifest(format!("{}: line {}: {e}", path.display(), i + 2))
            })?;
            records.push(record);
        }
        Ok(DatasetManifest { root, records })
    }

    /// Lists every contract violation instead of stopping at the first one.
    /// `closed_set` additionally requires every probe identity to appear in
    /// the gallery.
    pub fn validation_issues(&self, closed_set: bool) -> Vec<String> {
        let mut issues = Vec::new();
        if self.records.is_empty() {
            issues.push("manifest contains no records".to_string());
        }
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        for record in &self.records {
            *seen.entry(record.path.as_str()).or_insert(0) += 1;
        }
        for (path, count) in seen {
            if count > 1 {
                issues.push(format!(
                    "path {path:?} appears {count} times; splits must be disjoint"
                ));
            }
        }
        if closed_set {
            let gallery = self.split_identities(Split::Gallery);
            for identity in self.split_identities(Split::Probe) {
                if !gallery.contains(&identity) {
                    issues.push(format!(
                        "probe identity {identity:?} is missing from the gallery"
                    ));
                }
            }
        }
        issues
    }

    pub fn validate(&self, closed_set: bool) -> Result<()> {
        let issues = self.validation_issues(closed_set);
        if issues.is_empty() {
            Ok(())
        } else {
            Err(PetalError::Manifest(issues.join("; ")))
        }
    }
}

// ---------------------------------------------------------------------------
// Procedural identities
// ---------------------------------------------------------------------------

/// How many images each identity contributes per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub gallery: usize,
    pub probes_per_cell: usize,
}

/// Geometry and tone parameters for one rendered identity. Values live in a
/// normalized [-1, 1] coordinate frame; tones are gray levels in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceParams {
    pub face_cx: f64,
    pub face_cy: f64,
    pub face_a: f64,
    pub face_b: f64,
    pub face_tone: f64,
    pub eye_y: f64,
    pub eye_dx: f64,
    pub eye_r: f64,
    pub eye_tone: f64,
    pub nose_len: f64,
    pub nose_w: f64,
    pub nose_tone: f64,
    pub mouth_y: f64,
    pub mouth_w: f64,
    pub mouth_h: f64,
    pub mouth_tone: f64,
    pub tex_freq: f64,
    pub tex_angle: f64,
    pub tex_phase: f64,
    pub tex_amp: f64,
    pub fine_seed: u64,
    pub fine_scale: f64,
    pub fine_amp: f64,
    pub bg_base: f64,
    pub bg_angle: f64,
    pub bg_amp: f64,
}

fn gauss(rng: &mut ChaCha8Rng, center: f64, dev: f64, spread: f64, lo: f64, hi: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    (center + spread * dev * z).clamp(lo, hi)
}

impl FaceParams {
    /// Draws identity parameters from a seeded stream. `spread` scales how
    /// far identities deviate from the shared template: 0 collapses all
    /// Gaussian-drawn geometry onto the template (angles and phases stay
    /// uniform), larger values separate identities further apart.
    pub fn from_seed(seed: u64, spread: f64) -> FaceParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        FaceParams {
            face_cx: gauss(r, 0.0, 0.05, spread, -0.15, 0.15),
            face_cy: gauss(r, 0.03, 0.05, spread, -0.12, 0.18),
            face_a: gauss(r, 0.60, 0.10, spread, 0.40, 0.80),
            face_b: gauss(r, 0.75, 0.08, spread, 0.55, 0.92),
            face_tone: gauss(r, 0.66, 0.12, spread, 0.35, 0.92),
            eye_y: gauss(r, -0.24, 0.08, spread, -0.45, -0.05),
            eye_dx: gauss(r, 0.42, 0.08, spread, 0.22, 0.62),
            eye_r: gauss(r, 0.10, 0.03, spread, 0.045, 0.18),
            eye_tone: gauss(r, 0.15, 0.08, spread, 0.02, 0.40),
            nose_len: gauss(r, 0.30, 0.08, spread, 0.12, 0.50),
            nose_w: gauss(r, 0.05, 0.015, spread, 0.02, 0.10),
            nose_tone: gauss(r, 0.50, 0.10, spread, 0.20, 0.80),
            mouth_y: gauss(r, 0.45, 0.08, spread, 0.25, 0.65),
            mouth_w: gauss(r, 0.35, 0.08, spread, 0.15, 0.55),
            mouth_h: gauss(r, 0.055, 0.015, spread, 0.025, 0.10),
            mouth_tone: gauss(r, 0.25, 0.10, spread, 0.05, 0.50),
            tex_freq: gauss(r, 3.5, 1.2, spread, 1.0, 7.0),
            tex_angle: r.random::<f64>() * std::f64::consts::PI,
            tex_phase: r.random::<f64>() * std::f64::consts::TAU,
            tex_amp: gauss(r, 0.05, 0.02, spread, 0.0, 0.12),
            fine_seed: r.random::<u64>(),
            fine_scale: gauss(r, 8.0, 1.5, spread, 5.0, 12.0),
            fine_amp: gauss(r, 0.07, 0.015, spread, 0.045, 0.11),
            bg_base: gauss(r, 0.40, 0.08, spread, 0.15, 0.65),
            bg_angle: r.random::<f64>() * std::f64::consts::TAU,
            bg_amp: gauss(r, 0.10, 0.04, spread, 0.0, 0.25),
        }
    }
}

/// A renderable identity: its label, the seed all of its randomness derives
/// from, the drawn parameters, and how many samples it contributes per
/// split. The same (identity_id, seed) pair always renders pixel-identical
/// images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub identity_id: String,
    pub seed: u64,
    pub params: FaceParams,
    pub samples_per_split: SplitCounts,
}

impl IdentitySpec {
    pub fn derive(
        dataset_seed: u64,
        identity_id: &str,
        spread: f64,
        counts: SplitCounts,
    ) -> IdentitySpec {
        let seed = derive_seed(dataset_seed, &["identity", identity_id]);
        IdentitySpec {
            identity_id: identity_id.to_string(),
            seed,
            params: FaceParams::from_seed(seed, spread),
            samples_per_split: counts,
        }
    }
}

/// Smooth 0..1 ramp, flat outside [0, 1].
fn soft_step(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Integer lattice hash mapped into [-1, 1].
fn lattice_value(seed: u64, i: i64, j: i64) -> f64 {
    let mut h = seed
        ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (j as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

/// Smoothly interpolated lattice noise: broadband texture with its energy
/// around one cycle per lattice cell, deterministic in the seed.
fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (i0, j0) = (x.floor(), y.floor());
    let (sx, sy) = (soft_step(x - i0), soft_step(y - j0));
    let (i, j) = (i0 as i64, j0 as i64);
    let v00 = lattice_value(seed, i, j);
    let v10 = lattice_value(seed, i + 1, j);
    let v01 = lattice_value(seed, i, j + 1);
    let v11 = lattice_value(seed, i + 1, j + 1);
    lerp(lerp(v00, v10, sx), lerp(v01, v11, sx), sy)
}

/// Soft inside-mask of an axis-aligned ellipse in quadratic-form units.
fn soft_ellipse(u: f64, v: f64, cx: f64, cy: f64, a: f64, b: f64) -> f64 {
    const EDGE: f64 = 0.35;
    let du = (u - cx) / a;
    let dv = (v - cy) / b;
    let d = du * du + dv * dv;
    soft_step((1.0 + EDGE - d) / (2.0 * EDGE))
}

/// Soft 1-D window: 1 within `half` of `center`, fading over `EDGE`.
fn soft_band(x: f64, center: f64, half: f64) -> f64 {
    const EDGE: f64 = 0.04;
    soft_step((half + EDGE - (x - center).abs()) / (2.0 * EDGE))
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Per-image pose and photometric jitter, drawn once per (split, index).
struct JitterDraw {
    dx: f64,
    dy: f64,
    scale: f64,
    brightness: f64,
    contrast: f64,
    phase: f64,
    tone: f64,
}

impl JitterDraw {
    fn draw(rng: &mut ChaCha8Rng, intra_jitter: f64) -> JitterDraw {
        let j = intra_jitter;
        let mut n = |dev: f64| -> f64 {
            let z: f64 = rng.sample(StandardNormal);
            dev * j * z
        };
        JitterDraw {
            dx: n(0.05),
            dy: n(0.05),
            scale: (1.0 + n(0.06)).clamp(0.75, 1.3),
            brightness: n(0.04),
            contrast: (1.0 + n(0.07)).clamp(0.6, 1.5),
            phase: n(0.5),
            tone: n(0.03),
        }
    }
}

/// Renders one sample of an identity. The split and index select the jitter
/// draw, so every (split, index) pair is a distinct but consistent view of
/// the same underlying identity.
pub fn render_identity_image(
    spec: &IdentitySpec,
    split: Split,
    index: usize,
    intra_jitter: f64,
    size: usize,
) -> Result<ImageBuf> {
    if size < 8 {
        return Err(PetalError::Config(format!(
            "image size {size} is too small to render; need at least 8"
        )));
    }
    let jitter_seed = derive_seed(spec.seed, &["image", split.name(), &index.to_string()]);
    let mut rng = ChaCha8Rng::seed_from_u64(jitter_seed);
    let jit = JitterDraw::draw(&mut rng, intra_jitter);
    let p = &spec.params;

    let (cos_bg, sin_bg) = (p.bg_angle.cos(), p.bg_angle.sin());
    let (cos_tx, sin_tx) = (p.tex_angle.cos(), p.tex_angle.sin());
    let eye_cy = p.face_cy + p.eye_y * p.face_b;
    let nose_half = 0.5 * p.nose_len * p.face_b;
    let mouth_cy = p.face_cy + p.mouth_y * p.face_b;

    let mut plane = Array2::<f64>::zeros((size, size));
    for y in 0..size {
        for x in 0..size {
            let u0 = 2.0 * (x as f64 + 0.5) / size as f64 - 1.0;
            let v0 = 2.0 * (y as f64 + 0.5) / size as f64 - 1.0;
            // The background stays put while the portrait shifts and scales.
            let u = (u0 - jit.dx) / jit.scale;
            let v = (v0 - jit.dy) / jit.scale;

            let mut val = p.bg_base + p.bg_amp * (u0 * cos_bg + v0 * sin_bg);

            let face = soft_ellipse(u, v, p.face_cx, p.face_cy, p.face_a, p.face_b);
            val = lerp(val, p.face_tone, face);

            let ru = (u - p.face_cx) * cos_tx + (v - p.face_cy) * sin_tx;
            val += p.tex_amp
                * face
                * (p.tex_freq * std::f64::consts::PI * ru + p.tex_phase + jit.phase).sin();
            // Fine-scale skin texture: a few pixels per cycle, so blur,
            // downscaling, and compression all visibly erode it. Lattice
            // noise keeps it broadband; face-relative coordinates keep it
            // attached to the portrait under jitter.
            let nx = (u - p.face_cx) * p.fine_scale + 0.2 * jit.phase;
            let ny = (v - p.face_cy) * p.fine_scale - 0.2 * jit.phase;
            val += p.fine_amp * face * value_noise(p.fine_seed, nx, ny);

            for sx in [-1.0, 1.0] {
                let ex = p.face_cx + sx * p.eye_dx * p.face_a;
                let eye = soft_ellipse(u, v, ex, eye_cy, p.eye_r, p.eye_r * 0.8);
                val = lerp(val, p.eye_tone + jit.tone, eye);
            }

            let nose = soft_band(u, p.face_cx, p.nose_w)
                * soft_band(v, eye_cy + nose_half, nose_half);
            val = lerp(val, p.nose_tone, 0.8 * nose);

            let mouth = soft_band(u, p.face_cx, p.mouth_w * p.face_a)
                * soft_band(v, mouth_cy, p.mouth_h);
            val = lerp(val, p.mouth_tone + jit.tone, mouth);

            val = 0.5 + jit.contrast * (val - 0.5) + jit.brightness;
            plane[(y, x)] = val.clamp(0.0, 1.0);
        }
    }

    let mut image = ImageBuf::new(1, size, size)?;
    image.set_plane(0, &plane);
    Ok(image)
}

// ---------------------------------------------------------------------------
// Degradation pipeline
// ---------------------------------------------------------------------------

/// One degradation recipe. `apply` runs the stages in a fixed order: blur,
/// downscale (box average down by an integer factor, bilinear back up),
/// additive Gaussian noise, block-transform compression, occlusion. The
/// identity recipe (0, 1, 0, 100, 0) skips every stage and returns the input
/// bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationSpec {
    pub blur_sigma: f64,
    pub downscale_factor: usize,
    pub noise_sigma: f64,
    pub jpeg_like_quality: u8,
    pub occlusion_fraction: f64,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        DegradationSpec::identity()
    }
}

impl DegradationSpec {
    pub fn identity() -> DegradationSpec {
        DegradationSpec {
            blur_sigma: 0.0,
            downscale_factor: 1,
            noise_sigma: 0.0,
            jpeg_like_quality: 100,
            occlusion_fraction: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self == &DegradationSpec::identity()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.blur_sigma.is_finite() || self.blur_sigma < 0.0 {
            return Err(PetalError::Config(format!(
                "blur_sigma must be finite and non-negative, got {}",
                self.blur_sigma
            )));
        }
        if self.downscale_factor == 0 {
            return Err(PetalError::Config(
                "downscale_factor must be at least 1".to_string(),
            ));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(PetalError::Config(format!(
                "noise_sigma must be finite and non-negative, got {}",
                self.noise_sigma
            )));
        }
        if !(1..=100).contains(&self.jpeg_like_quality) {
            return Err(PetalError::Config(format!(
                "jpeg_like_quality must be in 1..=100, got {}",
                self.jpeg_like_quality
            )));
        }
        if !self.occlusion_fraction.is_finite() || !(0.0..=1.0).contains(&self.occlusion_fraction)
        {
            return Err(PetalError::Config(format!(
                "occlusion_fraction must be in [0, 1], got {}",
                self.occlusion_fraction
            )));
        }
        Ok(())
    }

    /// Compact tag for filenames and logs, e.g. `b1.5_d2_n0.02_q70_o0.1`.
    pub fn label(&self) -> String {
        format!(
            "b{}_d{}_n{}_q{}_o{}",
            self.blur_sigma,
            self.downscale_factor,
            self.noise_sigma,
            self.jpeg_like_quality,
            self.occlusion_fraction
        )
    }

    /// Degrades an image. `seed` drives the noise field and the occluder
    /// placement, so the same (image, seed) pair always degrades the same
    /// way. Stages at their identity setting are skipped outright.
    pub fn apply(&self, image: &ImageBuf, seed: u64) -> Result<ImageBuf> {
        self.validate()?;
        if self.is_identity() {
            return Ok(image.clone());
        }
        let (h, w) = (image.height(), image.width());
        if self.downscale_factor > 1
            && (h % self.downscale_factor != 0 || w % self.downscale_factor != 0)
        {
            return Err(PetalError::Input(format!(
                "downscale factor {} does not divide a {h}x{w} image",
                self.downscale_factor
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut planes: Vec<Array2<f64>> = Vec::with_capacity(image.channels());
        for c in 0..image.channels() {
            let mut plane = image.plane(c);
            if self.blur_sigma > 0.0 {
                plane = gaussian_blur(&plane, self.blur_sigma);
            }
            if self.downscale_factor > 1 {
                let small = box_downscale(&plane, self.downscale_factor);
                plane = bilinear_resize(&small, h, w);
            }
            planes.push(plane);
        }
        if self.noise_sigma > 0.0 {
            for plane in &mut planes {
                for v in plane.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = (*v + self.noise_sigma * z).clamp(0.0, 1.0);
                }
            }
        }
        if self.jpeg_like_quality < 100 {
            for plane in &mut planes {
                *plane = block_quantize(plane, self.jpeg_like_quality);
            }
        }
        if self.occlusion_fraction > 0.0 {
            let area = self.occlusion_fraction * (h * w) as f64;
            let aspect = 0.5 + 1.5 * rng.random::<f64>();
            let rw = ((area * aspect).sqrt().round() as usize).clamp(1, w);
            let rh = ((area / rw as f64).round() as usize).clamp(1, h);
            let x0 = if w > rw { rng.random_range(0..=w - rw) } else { 0 };
            let y0 = if h > rh { rng.random_range(0..=h - rh) } else { 0 };
            for plane in &mut planes {
                for y in y0..y0 + rh {
                    for x in x0..x0 + rw {
                        plane[(y, x)] = OCCLUSION_TONE;
                    }
                }
            }
        }
        let mut out = ImageBuf::new(image.channels(), h, w)?;
        for (c, plane) in planes.iter().enumerate() {
            out.set_plane(c, plane);
        }
        Ok(out)
    }
}

/// Mixed-severity probe cells used when no grid is configured. Every cell
/// blurs by at least sigma 1, so generated galleries always score above
/// generated probes under the built-in estimator. Compression appears only
/// at coarse qualities, where the estimator's block-grid penalty resolves
/// it reliably; milder settings would shuffle scores inside its
/// discrimination floor.
pub fn default_grid() -> Vec<DegradationSpec> {
    let cell = |blur_sigma, downscale_factor, noise_sigma, jpeg_like_quality, occlusion_fraction| {
        DegradationSpec {
            blur_sigma,
            downscale_factor,
            noise_sigma,
            jpeg_like_quality,
            occlusion_fraction,
        }
    };
    vec![
        cell(1.0, 1, 0.0, 100, 0.0),
        cell(1.5, 2, 0.01, 100, 0.0),
        cell(2.0, 2, 0.02, 15, 0.0),
        cell(1.0, 4, 0.03, 100, 0.1),
        cell(2.5, 4, 0.05, 10, 0.15),
    ]
}

// ---------------------------------------------------------------------------
// Benchmark generation
// ---------------------------------------------------------------------------

/// Everything the generator needs. `identities` render into all three
/// splits; `unknown_identities` render extra probe-only identities for
/// open-set protocols (with 0 of them the manifest is closed-set).
/// `train_degraded_fraction` degrades that fraction of train images with a
/// random grid cell; the default 0 keeps the train split clean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub identities: usize,
    pub unknown_identities: usize,
    pub train_per_identity: usize,
    pub gallery_per_identity: usize,
    pub probes_per_cell: usize,
    pub image_size: usize,
    pub identity_spread: f64,
    pub intra_jitter: f64,
    pub train_degraded_fraction: f64,
    pub grid: Vec<DegradationSpec>,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            identities: 8,
            unknown_identities: 3,
            train_per_identity: 6,
            gallery_per_identity: 4,
            probes_per_cell: 2,
            image_size: 64,
            identity_spread: 1.0,
            intra_jitter: 1.0,
            train_degraded_fraction: 0.0,
            grid: default_grid(),
            seed: 7,
        }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.identities < 2 {
            return Err(PetalError::Config(format!(
                "need at least 2 identities, got {}",
                self.identities
            )));
        }
        if self.train_per_identity == 0
            || self.gallery_per_identity == 0
            || self.probes_per_cell == 0
        {
            return Err(PetalError::Config(
                "per-identity sample counts must all be at least 1".to_string(),
            ));
        }
        if self.image_size < 8 {
            return Err(PetalError::Config(format!(
                "image_size {} is too small; need at least 8",
                self.image_size
            )));
        }
        for knob in [self.identity_spread, self.intra_jitter] {
            if !knob.is_finite() || knob < 0.0 {
                return Err(PetalError::Config(format!(
                    "identity_spread and intra_jitter must be finite and non-negative, got {knob}"
                )));
            }
        }
        if !self.train_degraded_fraction.is_finite()
            || !(0.0..=1.0).contains(&self.train_degraded_fraction)
        {
            return Err(PetalError::Config(format!(
                "train_degraded_fraction must be in [0, 1], got {}",
                self.train_degraded_fraction
            )));
        }
        if self.grid.is_empty() {
            return Err(PetalError::Config(
                "degradation grid is empty; probes need at least one cell".to_string(),
            ));
        }
        for (i, cell) in self.grid.iter().enumerate() {
            cell.validate()
                .map_err(|e| PetalError::Config(format!("grid cell {i}: {e}")))?;
            if cell.downscale_factor > 1 && self.image_size % cell.downscale_factor != 0 {
                return Err(PetalError::Config(format!(
                    "grid cell {i}: downscale factor {} does not divide image size {}",
                    cell.downscale_factor, self.image_size
                )));
            }
        }
        Ok(())
    }

    fn counts(&self) -> SplitCounts {
        SplitCounts {
            train: self.train_per_identity,
            gallery: self.gallery_per_identity,
            probes_per_cell: self.probes_per_cell,
        }
    }
}

/// Score distribution of the generated splits under the built-in estimator,
/// measured at on-disk pixel precision. `gallery_hist` and `probe_hist` are
/// ten equal-width buckets over [0, 1].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QualitySummary {
    pub estimator: String,
    pub train_mean: f64,
    pub gallery_mean: f64,
    pub probe_mean: f64,
    pub gallery_hist: Vec<usize>,
    pub probe_hist: Vec<usize>,
}

/// What `generate_benchmark` produced and where.
#[derive(Debug, Clone)]
pub struct GenerateReport {
    pub manifest_path: PathBuf,
    pub manifest: DatasetManifest,
    pub counts: BTreeMap<String, usize>,
    pub quality: QualitySummary,
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

fn histogram(values: &[f64]) -> Vec<usize> {
    let mut buckets = vec![0usize; 10];
    for &v in values {
        let b = ((v * 10.0) as usize).min(9);
        buckets[b] += 1;
    }
    buckets
}

/// Renders the full benchmark under `out_dir`: clean train and gallery
/// images, one degraded probe set per grid cell, a `manifest.jsonl`, and a
/// `quality_summary.json`. Fully deterministic in the config seed.
pub fn generate_benchmark(config: &GenerateConfig, out_dir: &Path) -> Result<GenerateReport> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let estimator = SharpnessEstimator;
    let counts = config.counts();
    let mut manifest = DatasetManifest::new(out_dir);
    let mut split_scores: BTreeMap<Split, Vec<f64>> = BTreeMap::new();

    let save = |manifest: &mut DatasetManifest,
                    scores: &mut BTreeMap<Split, Vec<f64>>,
                    image: &ImageBuf,
                    rel: String,
                    identity: &str,
                    split: Split|
     -> Result<()> {
        let path = out_dir.join(&rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        image.save_png(&path)?;
        // Score at the 8-bit precision consumers will load from disk.
        let score = estimator.score(&image.quantize_u8())?;
        scores.entry(split).or_default().push(score);
        manifest.records.push(ManifestRecord {
            path: rel,
            identity: identity.to_string(),
            split,
        });
        Ok(())
    };

    let total = config.identities + config.unknown_identities;
    for id_index in 0..total {
        let identity_id = format!("id{id_index:04}");
        let spec = IdentitySpec::derive(config.seed, &identity_id, config.identity_spread, counts);
        let known = id_index < config.identities;

        if known {
            for i in 0..config.train_per_identity {
                let mut img = render_identity_image(
                    &spec,
                    Split::Train,
                    i,
                    config.intra_jitter,
                    config.image_size,
                )?;
                if config.train_degraded_fraction > 0.0 {
                    let pick_seed = derive_seed(spec.seed, &["traincell", &i.to_string()]);
                    let mut pick = ChaCha8Rng::seed_from_u64(pick_seed);
                    if pick.random::<f64>() < config.train_degraded_fraction {
                        let cell = pick.random_range(0..config.grid.len());
                        let degrade_seed = pick.random::<u64>();
                        img = config.grid[cell].apply(&img, degrade_seed)?;
                    }
                }
                let rel = format!("train/{identity_id}/img{i:03}.png");
                save(
                    &mut manifest,
                    &mut split_scores,
                    &img,
                    rel,
                    &identity_id,
                    Split::Train,
                )?;
            }
            for i in 0..config.gallery_per_identity {
                let img = render_identity_image(
                    &spec,
                    Split::Gallery,
                    i,
                    config.intra_jitter,
                    config.image_size,
                )?;
                let rel = format!("gallery/{identity_id}/img{i:03}.png");
                save(
                    &mut manifest,
                    &mut split_scores,
                    &img,
                    rel,
                    &identity_id,
                    Split::Gallery,
                )?;
            }
        }

        for (ci, cell) in config.grid.iter().enumerate() {
            for i in 0..config.probes_per_cell {
                let index = ci * config.probes_per_cell + i;
                let clean = render_identity_image(
                    &spec,
                    Split::Probe,
                    index,
                    config.intra_jitter,
                    config.image_size,
                )?;
                let degrade_seed = derive_seed(
                    spec.seed,
                    &["degrade", Split::Probe.name(), &index.to_string(), &ci.to_string()],
                );
                let img = cell.apply(&clean, degrade_seed)?;
                let rel = format!("probe/{identity_id}/cell{ci:02}_img{i:03}.png");
                save(
                    &mut manifest,
                    &mut split_scores,
                    &img,
                    rel,
                    &identity_id,
                    Split::Probe,
                )?;
            }
        }
    }

    let manifest_path = out_dir.join("manifest.jsonl");
    manifest.write_file(&manifest_path)?;

    let empty = Vec::new();
    let train = split_scores.get(&Split::Train).unwrap_or(&empty);
    let gallery = split_scores.get(&Split::Gallery).unwrap_or(&empty);
    let probe = split_scores.get(&Split::Probe).unwrap_or(&empty);
    let quality = QualitySummary {
        estimator: estimator.name().to_string(),
        train_mean: mean(train),
        gallery_mean: mean(gallery),
        probe_mean: mean(probe),
        gallery_hist: histogram(gallery),
        probe_hist: histogram(probe),
    };
    let summary_path = out_dir.join("quality_summary.json");
    fs::write(&summary_path, serde_json::to_string_pretty(&quality)?)?;

    let mut counts_out = BTreeMap::new();
    for split in Split::ALL {
        counts_out.insert(
            split.name().to_string(),
            manifest.split_records(split).count(),
        );
    }
    Ok(GenerateReport {
        manifest_path,
        manifest,
        counts: counts_out,
        quality,
    })
}

// ---------------------------------------------------------------------------
// Folder ingestion
// ---------------------------------------------------------------------------

fn sorted_dir_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .collect();
    entries.sort();
    Ok(entries)
}

/// Builds a manifest from an existing `<split>/<identity>/<image>.png`
/// folder layout. Unreadable or non-PNG files become entries in the returned
/// issues list and the walk continues; an empty tree is an error, and with
/// `closed_set` set, a probe identity missing from the gallery is too.
pub fn ingest_folder(root: &Path, closed_set: bool) -> Result<(DatasetManifest, Vec<String>)> {
    if !root.is_dir() {
        return Err(PetalError::Manifest(format!(
            "{} is not a directory",
            root.display()
        )));
    }
    let mut manifest = DatasetManifest::new(root);
    let mut issues = Vec::new();
    for split in Split::ALL {
        let split_dir = root.join(split.name());
        if !split_dir.is_dir() {
            continue;
        }
        for identity_path in sorted_dir_entries(&split_dir)? {
            let identity = identity_path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            if !identity_path.is_dir() {
                issues.push(format!(
                    "{}/{identity}: expected an identity directory, found a file",
                    split.name()
                ));
                continue;
            }
            for image_path in sorted_dir_entries(&identity_path)? {
                let file = image_path
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                let rel = format!("{}/{identity}/{file}", split.name());
                if image_path.is_dir() {
                    issues.push(format!("{rel}: unexpected nested directory"));
                    continue;
                }
                let is_png = image_path
                    .extension()
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"));
                if !is_png {
                    issues.push(format!("{rel}: not a .png file, skipped"));
                    continue;
                }
                match ImageBuf::load_png(&image_path) {
                    Ok(_) => manifest.records.push(ManifestRecord {
                        path: rel,
                        identity: identity.clone(),
                        split,
                    }),
                    Err(e) => issues.push(format!("{rel}: unreadable ({e})")),
                }
            }
        }
    }
    if manifest.records.is_empty() {
        return Err(PetalError::Manifest(format!(
            "no images found under {}; expected <split>/<identity>/<image>.png",
            root.display()
        )));
    }
    if closed_set {
        let gallery = manifest.split_identities(Split::Gallery);
        let missing: Vec<String> = manifest
            .split_identities(Split::Probe)
            .into_iter()
            .filter(|id| !gallery.contains(id))
            .collect();
        if !missing.is_empty() {
            return Err(PetalError::Manifest(format!(
                "closed-set violation: probe identities missing from gallery: {}",
                missing.join(", ")
            )));
        }
    }
    Ok((manifest, issues))
}
