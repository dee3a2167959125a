//! Low-rank adapter pairs and their on-disk checkpoint container.
//!
//! An adapter factorizes a weight update as `up @ down` with rank
//! `r << min(m, n)`: `down` is `(r, n)` drawn from N(0, (1/r)^2), `up` is
//! `(m, r)` zero-initialized, so a freshly injected adapter contributes
//! exactly nothing. A twin pair attaches two such adapters to one frozen
//! linear layer and blends them per sample:
//!
//! ```text
//! y = W0 x + alpha * hi(x) + (1 - alpha) * lo(x)
//! ```
//!
//! `alpha` comes from the quality gate (see [`crate::quality`]) and weights
//! the high-quality adapter; it is data, not a trainable quantity.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{matmul, Real};
use crate::error::{PetalError, Result};
use crate::quality::GateCalibration;

/// Tolerated overshoot before an alpha is rejected instead of clamped.
pub const ALPHA_CLAMP_TOLERANCE: f64 = 1e-6;

/// One low-rank adapter: `delta(x) = scale * dropout(x @ down^T @ up^T)`.
#[derive(Clone, Debug)]
pub struct LowRankAdapter<F: Real> {
    down: Array2<F>,
    up: Array2<F>,
    scale: F,
    dropout_rate: f64,
}

impl<F: Real> LowRankAdapter<F> {
    /// Fresh adapter for an `(out_dim, in_dim)` base layer: `down` sampled
    /// from N(0, (1/rank)^2), `up` zeroed so the initial delta is zero.
    pub fn init(
        out_dim: usize,
        in_dim: usize,
        rank: usize,
        scale: f64,
        dropout_rate: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        validate_adapter_config(out_dim, in_dim, rank, scale, dropout_rate)?;
        let std = 1.0 / rank as f64;
        let normal = Normal::new(0.0, std).expect("positive std");
        let down = Array2::from_shape_fn((rank, in_dim), |_| F::from_f64(normal.sample(rng)));
        let up = Array2::zeros((out_dim, rank));
        Ok(LowRankAdapter {
            down,
            up,
            scale: F::from_f64(scale),
            dropout_rate,
        })
    }

    /// Wraps existing factors (checkpoint loads, tests).
    pub fn from_parts(
        down: Array2<F>,
        up: Array2<F>,
        scale: f64,
        dropout_rate: f64,
    ) -> Result<Self> {
        if down.nrows() != up.ncols() {
            return Err(PetalError::Shape(format!(
                "adapter factors disagree on rank: down is {:?}, up is {:?}",
                down.dim(),
                up.dim()
            )));
        }
        validate_adapter_config(up.nrows(), down.ncols(), down.nrows(), scale, dropout_rate)?;
        Ok(LowRankAdapter {
            down,
            up,
            scale: F::from_f64(scale),
            dropout_rate,
        })
    }

    pub fn rank(&self) -> usize {
        self.down.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.down.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.up.nrows()
    }

    pub fn scale(&self) -> F {
        self.scale
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn down(&self) -> &Array2<F> {
        &self.down
    }

    pub fn up(&self) -> &Array2<F> {
        &self.up
    }

    /// Trainable parameter count: `rank * (m + n)`.
    pub fn param_count(&self) -> usize {
        self.rank() * (self.out_dim() + self.in_dim())
    }

    /// The dense update this adapter currently encodes: `up @ down`,
    /// shape `(m, n)`. Reference-path material for equivalence checks.
    pub fn dense_delta_weights(&self) -> Array2<F> {
        matmul(self.up.view(), self.down.view())
    }

    fn raw_delta(&self, x: &Array2<F>) -> Result<Array2<F>> {
        if x.ncols() != self.in_dim() {
            return Err(PetalError::Shape(format!(
                "adapter expects inputs of width {}, got {}",
                self.in_dim(),
                x.ncols()
            )));
        }
        let hidden = matmul(x.view(), self.down.t());
        Ok(matmul(hidden.view(), self.up.t()))
    }

    /// Inference-path delta, dropout inactive: `(p, n) -> (p, m)`.
    pub fn eval_delta(&self, x: &Array2<F>) -> Result<Array2<F>> {
        Ok(self.raw_delta(x)? * self.scale)
    }

    /// Training-path delta with inverted dropout on the adapter output.
    pub fn train_delta(&self, x: &Array2<F>, rng: &mut ChaCha8Rng) -> Result<Array2<F>> {
        let mut delta = self.raw_delta(x)?;
        apply_dropout(&mut delta, self.dropout_rate, rng);
        Ok(delta * self.scale)
    }
}

/// In-place inverted dropout: kept entries scale by `1 / (1 - rate)`.
pub fn apply_dropout<F: Real>(values: &mut Array2<F>, rate: f64, rng: &mut ChaCha8Rng) {
    if rate <= 0.0 {
        return;
    }
    let keep = F::from_f64(1.0 / (1.0 - rate));
    for v in values.iter_mut() {
        if rng.random::<f64>() < rate {
            *v = F::zero();
        } else {
            *v *= keep;
        }
    }
}

/// Draws the dropout mask for a `(rows, cols)` adapter output. Shared by
/// the eager path above and the tape-based training path so both consume
/// identical randomness.
pub fn dropout_mask<F: Real>(
    rows: usize,
    cols: usize,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Array2<F> {
    let keep = F::from_f64(1.0 / (1.0 - rate));
    Array2::from_shape_fn((rows, cols), |_| {
        if rng.random::<f64>() < rate {
            F::zero()
        } else {
            keep
        }
    })
}

fn validate_adapter_config(
    out_dim: usize,
    in_dim: usize,
    rank: usize,
    scale: f64,
    dropout_rate: f64,
) -> Result<()> {
    if out_dim == 0 || in_dim == 0 {
        return Err(PetalError::Config(format!(
            "adapter dims must be positive, got {out_dim}x{in_dim}"
        )));
    }
    if rank == 0 || rank > out_dim.min(in_dim) {
        return Err(PetalError::Config(format!(
            "adapter rank {rank} out of range for a {out_dim}x{in_dim} layer (1..={})",
            out_dim.min(in_dim)
        )));
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(PetalError::Config(format!(
            "adapter scale must be finite and positive, got {scale}"
        )));
    }
    if !(0.0..1.0).contains(&dropout_rate) {
        return Err(PetalError::Config(format!(
            "adapter dropout rate must be in [0, 1), got {dropout_rate}"
        )));
    }
    Ok(())
}

/// Validates a gate output vector against the clamp tolerance and returns
/// the clamped weights.
pub fn clamp_alphas<F: Real>(alphas: &Array1<F>) -> Result<Array1<F>> {
    let tol = F::from_f64(ALPHA_CLAMP_TOLERANCE);
    let mut out = alphas.clone();
    for a in out.iter_mut() {
        if !a.is_finite() {
            return Err(PetalError::Gating("alpha is not finite".into()));
        }
        if *a < -tol || *a > F::one() + tol {
            return Err(PetalError::Gating(format!(
                "alpha {a} outside [0, 1] beyond clamp tolerance {ALPHA_CLAMP_TOLERANCE}"
            )));
        }
        *a = (*a).max(F::zero()).min(F::one());
    }
    Ok(out)
}

/// A frozen linear layer with a twin adapter pair attached.
#[derive(Clone, Debug)]
pub struct TwinAdaptedLinear<F: Real> {
    base_weight: Array2<F>,
    base_bias: Option<Array1<F>>,
    pub adapter_hi: LowRankAdapter<F>,
    pub adapter_lo: LowRankAdapter<F>,
}

impl<F: Real> TwinAdaptedLinear<F> {
    pub fn new(
        base_weight: Array2<F>,
        base_bias: Option<Array1<F>>,
        adapter_hi: LowRankAdapter<F>,
        adapter_lo: LowRankAdapter<F>,
    ) -> Result<Self> {
        let (m, n) = base_weight.dim();
        for (tag, a) in [("hi", &adapter_hi), ("lo", &adapter_lo)] {
            if a.out_dim() != m || a.in_dim() != n {
                return Err(PetalError::Shape(format!(
                    "adapter_{tag} is {}x{} but the base layer is {m}x{n}",
                    a.out_dim(),
                    a.in_dim()
                )));
            }
        }
        if adapter_hi.rank() != adapter_lo.rank() {
            return Err(PetalError::Config(format!(
                "twin adapters must share one rank, got {} and {}",
                adapter_hi.rank(),
                adapter_lo.rank()
            )));
        }
        if let Some(b) = &base_bias {
            if b.len() != m {
                return Err(PetalError::Shape(format!(
                    "bias length {} does not match out dim {m}",
                    b.len()
                )));
            }
        }
        Ok(TwinAdaptedLinear {
            base_weight,
            base_bias,
            adapter_hi,
            adapter_lo,
        })
    }

    /// Fresh zero-delta twin pair around a base layer.
    pub fn inject(
        base_weight: Array2<F>,
        base_bias: Option<Array1<F>>,
        rank: usize,
        scale: f64,
        dropout_rate: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (m, n) = base_weight.dim();
        let hi = LowRankAdapter::init(m, n, rank, scale, dropout_rate, rng)?;
        let lo = LowRankAdapter::init(m, n, rank, scale, dropout_rate, rng)?;
        Self::new(base_weight, base_bias, hi, lo)
    }

    pub fn base_weight(&self) -> &Array2<F> {
        &self.base_weight
    }

    pub fn base_bias(&self) -> Option<&Array1<F>> {
        self.base_bias.as_ref()
    }

    /// The frozen layer alone: `x @ W0^T (+ b)`.
    pub fn base_forward(&self, x: &Array2<F>) -> Result<Array2<F>> {
        if x.ncols() != self.base_weight.ncols() {
            return Err(PetalError::Shape(format!(
                "layer expects inputs of width {}, got {}",
                self.base_weight.ncols(),
                x.ncols()
            )));
        }
        let mut y = matmul(x.view(), self.base_weight.t());
        if let Some(b) = &self.base_bias {
            for mut row in y.rows_mut() {
                row += b;
            }
        }
        Ok(y)
    }

    /// Quality-gated blend of both adapter paths. `alpha[i]` weights the
    /// high-quality adapter for sample `i`; values beyond the clamp
    /// tolerance are a gating error. Pass an RNG to run the training path
    /// (dropout on each adapter output; `hi` draws first).
    pub fn twin_forward(
        &self,
        x: &Array2<F>,
        alpha: &Array1<F>,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Array2<F>> {
        if alpha.len() != x.nrows() {
            return Err(PetalError::Shape(format!(
                "{} alphas for a batch of {} rows",
                alpha.len(),
                x.nrows()
            )));
        }
        let alpha = clamp_alphas(alpha)?;
        let mut y = self.base_forward(x)?;
        let (hi, lo) = match dropout_rng {
            Some(rng) => (
                self.adapter_hi.train_delta(x, rng)?,
                self.adapter_lo.train_delta(x, rng)?,
            ),
            None => (self.adapter_hi.eval_delta(x)?, self.adapter_lo.eval_delta(x)?),
        };
        for (i, mut row) in y.rows_mut().into_iter().enumerate() {
            let a = alpha[i];
            let b = F::one() - a;
            for (j, v) in row.iter_mut().enumerate() {
                *v += a * hi[(i, j)] + b * lo[(i, j)];
            }
        }
        Ok(y)
    }

    /// Trainable parameter count over both adapters: `2 * rank * (m + n)`.
    pub fn trainable_param_count(&self) -> usize {
        self.adapter_hi.param_count() + self.adapter_lo.param_count()
    }
}

/// Classical single-adapter layer: the unconditional reference that twin
/// blending must reduce to when one path is removed.
#[derive(Clone, Debug)]
pub struct SingleAdaptedLinear<F: Real> {
    pub base_weight: Array2<F>,
    pub base_bias: Option<Array1<F>>,
    pub adapter: LowRankAdapter<F>,
}

impl<F: Real> SingleAdaptedLinear<F> {
    pub fn forward(&self, x: &Array2<F>, dropout_rng: Option<&mut ChaCha8Rng>) -> Result<Array2<F>> {
        let mut y = matmul(x.view(), self.base_weight.t());
        if let Some(b) = &self.base_bias {
            for mut row in y.rows_mut() {
                row += b;
            }
        }
        let delta = match dropout_rng {
            Some(rng) => self.adapter.train_delta(x, rng)?,
            None => self.adapter.eval_delta(x)?,
        };
        y += &delta;
        Ok(y)
    }
}

/// Twin-pair parameter total over a set of injected layer shapes.
pub fn twin_param_total(layer_shapes: &[(usize, usize)], rank: usize) -> usize {
    layer_shapes.iter().map(|&(m, n)| 2 * rank * (m + n)).sum()
}

/// Version string at the head of every checkpoint archive.
pub const CHECKPOINT_FORMAT: &str = "petal-ckpt/1";
/// Records which adapter the gate's alpha multiplies.
pub const ALPHA_CONVENTION: &str = "alpha-weights-hi";

/// Where a checkpoint tensor belongs when loaded back onto a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorSection {
    /// Adapter factors (`<layer>.hi.down` etc.).
    Adapter,
    /// Classifier-head tensors carried for resuming; never touch the base.
    Head,
    /// Full backbone weights, present only for full fine-tuning runs.
    Base,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub section: TensorSection,
}

/// JSON manifest at the head of the archive, before the raw tensor blob.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub convention: String,
    /// Injection mode the run used: twin, single, or none.
    pub mode: String,
    pub rank: usize,
    pub scale: f64,
    pub dropout_rate: f64,
    pub sites: Vec<String>,
    /// Digest binding this checkpoint to a backbone shape + injection plan.
    pub digest: String,
    pub calibration: Option<GateCalibration>,
    pub tensors: Vec<TensorMeta>,
}

/// A parsed checkpoint: manifest plus tensors in manifest order, stored as
/// little-endian f32 on disk.
#[derive(Clone, Debug)]
pub struct AdapterCheckpoint {
    pub manifest: CheckpointManifest,
    pub tensors: Vec<Array2<f32>>,
}

impl AdapterCheckpoint {
    pub fn tensor(&self, name: &str) -> Option<&Array2<f32>> {
        self.manifest
            .tensors
            .iter()
            .position(|t| t.name == name)
            .map(|i| &self.tensors[i])
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        if self.manifest.tensors.len() != self.tensors.len() {
            return Err(PetalError::State(
                "checkpoint manifest and tensor list disagree".into(),
            ));
        }
        for (meta, tensor) in self.manifest.tensors.iter().zip(&self.tensors) {
            if tensor.dim() != (meta.rows, meta.cols) {
                return Err(PetalError::State(format!(
                    "tensor '{}' is {:?} but the manifest says {}x{}",
                    meta.name,
                    tensor.dim(),
                    meta.rows,
                    meta.cols
                )));
            }
        }
        let manifest_json = serde_json::to_vec(&self.manifest)?;
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(CHECKPOINT_FORMAT.as_bytes())?;
        file.write_all(b"\n")?;
        file.write_all(&(manifest_json.len() as u64).to_le_bytes())?;
        file.write_all(&manifest_json)?;
        for tensor in &self.tensors {
            for v in tensor.iter() {
                file.write_all(&v.to_le_bytes())?;
            }
        }
        file.into_inner().map_err(|e| PetalError::Io(e.into_error()))?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut header = vec![0u8; CHECKPOINT_FORMAT.len() + 1];
        file.read_exact(&mut header)
            .map_err(|_| PetalError::Corrupt("checkpoint shorter than its header".into()))?;
        if header.last() != Some(&b'\n') {
            return Err(PetalError::Corrupt("checkpoint header is not terminated".into()));
        }
        let format = std::str::from_utf8(&header[..header.len() - 1])
            .map_err(|_| PetalError::Corrupt("checkpoint header is not UTF-8".into()))?;
        if format != CHECKPOINT_FORMAT {
            return Err(PetalError::Incompatible(format!(
                "unsupported checkpoint format '{format}', expected '{CHECKPOINT_FORMAT}'"
            )));
        }
        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes)
            .map_err(|_| PetalError::Corrupt("checkpoint truncated before manifest".into()))?;
        let manifest_len = u64::from_le_bytes(len_bytes) as usize;
        let mut manifest_json = vec![0u8; manifest_len];
        file.read_exact(&mut manifest_json)
            .map_err(|_| PetalError::Corrupt("checkpoint truncated inside manifest".into()))?;
        let manifest: CheckpointManifest = serde_json::from_slice(&manifest_json)
            .map_err(|e| PetalError::Corrupt(format!("checkpoint manifest is invalid: {e}")))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(PetalError::Incompatible(format!(
                "manifest declares format '{}', expected '{CHECKPOINT_FORMAT}'",
                manifest.format
            )));
        }
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for meta in &manifest.tensors {
            let count = meta.rows * meta.cols;
            let mut bytes = vec![0u8; count * 4];
            file.read_exact(&mut bytes).map_err(|_| {
                PetalError::Corrupt(format!("checkpoint truncated inside tensor '{}'", meta.name))
            })?;
            let values: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tensor = Array2::from_shape_vec((meta.rows, meta.cols), values)
                .map_err(|e| PetalError::Corrupt(format!("tensor '{}': {e}", meta.name)))?;
            tensors.push(tensor);
        }
        let mut trailing = [0u8; 1];
        if file.read(&mut trailing)? != 0 {
            return Err(PetalError::Corrupt(
                "checkpoint has trailing bytes after the tensor blob".into(),
            ));
        }
        Ok(AdapterCheckpoint { manifest, tensors })
    }
}
