//! Fine-tuning loop: mode-driven freezing, AdamW updates with decoupled
//! weight decay, a linear-warmup-into-polynomial-decay schedule, and a
//! first-step gradient probe for comparing recipes on one fixed batch.

use std::time::Instant;

use ndarray::{Array1, Array2, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterCheckpoint, TensorMeta, TensorSection};
use crate::autodiff::Real;
use crate::backbone::{ParamId, ParamKind};
use crate::datasim::{DatasetManifest, Split};
use crate::error::{PetalError, Result};
use crate::imaging::ImageBuf;
use crate::injection::{derive_seed, AdaptedModel};
use crate::losses::{attach_margin_loss, MarginHead};
use crate::quality::calibrate;

/// What the optimizer is allowed to touch. Every mode trains the classifier
/// head (it is the only part that knows the task's identities); the modes
/// differ in which backbone parameters join it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Gated twin adapters plus head; the backbone stays frozen.
    Petalface,
    /// One ungated adapter pair per layer plus head; blend weight pinned
    /// to 1, so the run matches a classical low-rank fine-tune.
    SingleLora,
    /// Everything trains: backbone, any adapters present, and the head.
    FullFt,
    /// Head only; the model is a fixed feature extractor.
    Frozen,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [
        TrainMode::Petalface,
        TrainMode::SingleLora,
        TrainMode::FullFt,
        TrainMode::Frozen,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Petalface => "petalface",
            TrainMode::SingleLora => "single_lora",
            TrainMode::FullFt => "full_ft",
            TrainMode::Frozen => "frozen",
        }
    }

    pub fn parse(text: &str) -> Result<TrainMode> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.name() == text)
            .ok_or_else(|| {
                PetalError::Config(format!(
                    "unknown train mode '{text}' (expected petalface, single_lora, \
                     full_ft, or frozen)"
                ))
            })
    }

    /// Whether a backbone parameter of this kind receives updates.
    fn trains(self, kind: ParamKind) -> bool {
        match self {
            TrainMode::Petalface | TrainMode::SingleLora => kind == ParamKind::Adapter,
            TrainMode::FullFt => true,
            TrainMode::Frozen => false,
        }
    }
}

/// Knobs for one fine-tuning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    /// Epochs spent ramping the learning rate up from zero. Must leave at
    /// least one decay epoch behind it.
    pub warmup_epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate, paid exactly once at the end of warmup. The
    /// default is conservative; tiny desk-scale runs move faster around
    /// 5e-4 and the toy tests use more still.
    pub initial_lr: f64,
    /// Decoupled weight decay applied to every trainable tensor.
    pub weight_decay: f64,
    /// Exponent of the post-warmup polynomial decay; 1 is a straight line
    /// down to zero.
    pub lr_power: f64,
    /// Global max-norm gradient clip over all trainable tensors; off when
    /// absent.
    pub grad_clip: Option<f64>,
    /// Freeze a fresh gate calibration from this many train images before
    /// the first step. When absent the model's existing calibration is
    /// kept, so a calibration loaded from disk survives untouched.
    pub calibration_samples: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Petalface,
            epochs: 5,
            warmup_epochs: 1,
            batch_size: 8,
            initial_lr: 4e-5,
            weight_decay: 0.1,
            lr_power: 1.0,
            grad_clip: None,
            calibration_samples: Some(32),
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(PetalError::Config("batch_size must be at least 1".into()));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(PetalError::Config(format!(
                "warmup ({} epochs) must end before training does ({} epochs)",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.epochs == 0 && self.warmup_epochs != 0 {
            return Err(PetalError::Config(
                "a zero-epoch run cannot carry warmup epochs".into(),
            ));
        }
        if !(self.initial_lr.is_finite() && self.initial_lr > 0.0) {
            return Err(PetalError::Config(format!(
                "initial_lr must be finite and positive, got {}",
                self.initial_lr
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(PetalError::Config(format!(
                "weight_decay must be finite and nonnegative, got {}",
                self.weight_decay
            )));
        }
        if !(self.lr_power.is_finite() && self.lr_power > 0.0) {
            return Err(PetalError::Config(format!(
                "lr_power must be finite and positive, got {}",
                self.lr_power
            )));
        }
        if let Some(clip) = self.grad_clip {
            if !(clip.is_finite() && clip > 0.0) {
                return Err(PetalError::Config(format!(
                    "grad_clip must be finite and positive, got {clip}"
                )));
            }
        }
        if self.calibration_samples == Some(0) {
            return Err(PetalError::Config(
                "calibration_samples must be at least 1 when set".into(),
            ));
        }
        Ok(())
    }
}

/// Learning rate for a 0-based step index. The schedule samples the
/// continuous curve that ramps linearly from 0 to `initial_lr` over the
/// warmup span and then decays as `initial_lr * (1 - progress)^lr_power`
/// down to exactly 0 at the end; the two pieces meet at `initial_lr`, so
/// the sequence has no jump at the boundary. The last warmup step pays
/// exactly `initial_lr`; the final step pays 0.
pub fn lr_at(
    step: usize,
    total_steps: usize,
    warmup_steps: usize,
    initial_lr: f64,
    lr_power: f64,
) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return 0.0;
    }
    if step < warmup_steps {
        return initial_lr * (step + 1) as f64 / warmup_steps as f64;
    }
    let span = (total_steps - warmup_steps) as f64;
    let progress = (step + 1 - warmup_steps) as f64 / span;
    initial_lr * (1.0 - progress).powf(lr_power)
}

/// Deterministic batch composition: a seeded shuffle of `0..count` for the
/// given epoch, chunked by `batch_size` (the tail batch may be short).
/// Public so external tooling can replay exactly which samples each step
/// consumed; the training loop promises to walk epochs through this
/// function.
pub fn epoch_batches(count: usize, batch_size: usize, epoch: usize, seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch_size must be positive");
    let mut order: Vec<usize> = (0..count).collect();
    let stream = derive_seed(seed, &["shuffle", &epoch.to_string()]);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream));
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct Moments<F: Real> {
    m: Array2<F>,
    v: Array2<F>,
}

/// Adam with decoupled weight decay over a fixed set of tensor slots.
/// State is lazily allocated per slot; the caller pairs slots with the
/// same tensors on every step.
struct AdamW<F: Real> {
    moments: Vec<Option<Moments<F>>>,
    weight_decay: f64,
    step: i32,
}

impl<F: Real> AdamW<F> {
    fn new(slots: usize, weight_decay: f64) -> Self {
        AdamW {
            moments: (0..slots).map(|_| None).collect(),
            weight_decay,
            step: 0,
        }
    }

    fn begin_step(&mut self) {
        self.step += 1;
    }

    fn update(&mut self, slot: usize, param: &mut Array2<F>, grad: &Array2<F>, lr: f64) {
        let moments = self.moments[slot].get_or_insert_with(|| Moments {
            m: Array2::zeros(param.raw_dim()),
            v: Array2::zeros(param.raw_dim()),
        });
        let b1 = F::from_f64(ADAM_BETA1);
        let b2 = F::from_f64(ADAM_BETA2);
        let omb1 = F::from_f64(1.0 - ADAM_BETA1);
        let omb2 = F::from_f64(1.0 - ADAM_BETA2);
        let bc1 = F::from_f64(1.0 - ADAM_BETA1.powi(self.step));
        let bc2 = F::from_f64(1.0 - ADAM_BETA2.powi(self.step));
        let eps = F::from_f64(ADAM_EPS);
        let wd = F::from_f64(self.weight_decay);
        let lr = F::from_f64(lr);
        Zip::from(param)
            .and(&mut moments.m)
            .and(&mut moments.v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + omb1 * g;
                *v = b2 * *v + omb2 * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p = *p - lr * (mhat / (vhat.sqrt() + eps) + wd * *p);
            });
    }
}

/// The JSON-facing half of a training run: per-step series plus enough
/// context to interpret them.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSeries {
    pub mode: TrainMode,
    pub seed: u64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Trainable backbone-side parameters after mode freezing was applied.
    pub trainable_params: usize,
    /// Classifier-head parameters; trained in every mode.
    pub head_params: usize,
    pub losses: Vec<f64>,
    pub learning_rates: Vec<f64>,
    /// Per-step max |gradient| over all trainable tensors (head included),
    /// recorded before any clipping.
    pub max_grads: Vec<f64>,
    pub wall_clock_seconds: f64,
}

/// Everything a finished run hands back: the serializable series and the
/// checkpoint (adapters, head state, and the full base weights after a
/// full fine-tune).
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub series: TrainSeries,
    pub checkpoint: AdapterCheckpoint,
}

/// Name under which the classifier head travels inside a checkpoint.
pub const HEAD_TENSOR_NAME: &str = "head.class_weights";

/// Sets every backbone parameter's trainability flag to what `mode`
/// prescribes. The head lives outside the store and is always trained.
pub fn configure_trainability<F: Real>(
    model: &mut AdaptedModel<F>,
    mode: TrainMode,
) -> Result<()> {
    let store = &mut model.backbone_mut()?.store;
    let plan: Vec<(ParamId, bool)> = store
        .iter()
        .map(|(id, entry)| (id, mode.trains(entry.kind)))
        .collect();
    for (id, on) in plan {
        store.set_trainable(id, on);
    }
    Ok(())
}

fn checkpoint_with_extras<F: Real>(
    model: &AdaptedModel<F>,
    head: &MarginHead<F>,
    mode: TrainMode,
) -> Result<AdapterCheckpoint> {
    let mut extras = vec![(
        TensorMeta {
            name: HEAD_TENSOR_NAME.to_string(),
            rows: head.classes(),
            cols: head.dim(),
            section: TensorSection::Head,
        },
        head.class_weights.mapv(|v| v.to_f64() as f32),
    )];
    if mode == TrainMode::FullFt {
        for (_, entry) in model.store()?.iter() {
            if entry.kind != ParamKind::Base {
                continue;
            }
            extras.push((
                TensorMeta {
                    name: entry.name.clone(),
                    rows: entry.value.nrows(),
                    cols: entry.value.ncols(),
                    section: TensorSection::Base,
                },
                entry.value.mapv(|v| v.to_f64() as f32),
            ));
        }
    }
    model.build_checkpoint(extras)
}

struct TrainData {
    images: Vec<ImageBuf>,
    labels: Vec<usize>,
}

fn load_train_split<F: Real>(
    manifest: &DatasetManifest,
    head: &MarginHead<F>,
) -> Result<TrainData> {
    let records: Vec<_> = manifest.split_records(Split::Train).collect();
    if records.is_empty() {
        return Err(PetalError::Input("train split is empty".into()));
    }
    let classes = manifest.class_map(Split::Train);
    if head.classes() != classes.len() {
        return Err(PetalError::Input(format!(
            "loss head covers {} classes but the train split has {} identities",
            head.classes(),
            classes.len()
        )));
    }
    let mut images = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    for record in records {
        images.push(manifest.load_image(record)?);
        labels.push(classes[&record.identity]);
    }
    Ok(TrainData { images, labels })
}

/// Runs the fine-tuning recipe on the manifest's train split and returns
/// the loss/gradient series plus a checkpoint of everything that moved.
///
/// The split is decoded once up front; each epoch walks it in the order
/// [`epoch_batches`] reports. Blend weights come from the model's gate with
/// the estimator in scoring (not training) mode, computed once because
/// image quality does not change while weights do; `single_lora` pins them
/// to 1 instead, which silences the low-quality twin. Runs are
/// deterministic for a fixed seed. On return the store's trainability
/// flags are left as the mode set them, so parameter counts reflect the
/// run that just happened.
pub fn finetune<F: Real>(
    model: &mut AdaptedModel<F>,
    head: &mut MarginHead<F>,
    manifest: &DatasetManifest,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    head.validate()?;
    let t0 = Instant::now();

    if config.epochs == 0 {
        // Degenerate no-op run: nothing is loaded, calibrated, or frozen;
        // the checkpoint snapshots the model exactly as handed in.
        let checkpoint = checkpoint_with_extras(model, head, config.mode)?;
        return Ok(TrainReport {
            series: TrainSeries {
                mode: config.mode,
                seed: config.seed,
                epochs: 0,
                steps_per_epoch: 0,
                trainable_params: model.store()?.count_trainable(),
                head_params: head.classes() * head.dim(),
                losses: Vec::new(),
                learning_rates: Vec::new(),
                max_grads: Vec::new(),
                wall_clock_seconds: t0.elapsed().as_secs_f64(),
            },
            checkpoint,
        });
    }

    let data = load_train_split(manifest, head)?;
    let count = data.images.len();

    if let Some(samples) = config.calibration_samples {
        let calibration = calibrate(
            &data.images,
            model.estimator.as_ref(),
            samples,
            derive_seed(config.seed, &["calibration"]),
        )?;
        model.gate = calibration;
    }

    configure_trainability(model, config.mode)?;
    let trainable_params = model.store()?.count_trainable();

    // Inputs to the forward pass that never change while weights train.
    let alphas_all: Array1<F> = match config.mode {
        TrainMode::SingleLora => Array1::from_elem(count, F::one()),
        _ => model.gate_alphas(&data.images)?,
    };
    let backbone = model.backbone()?;
    let rows_all = backbone.patch_rows(&data.images)?;
    let tokens = rows_all.nrows() / count;
    let use_dropout = model.config.dropout_rate > 0.0 && config.mode != TrainMode::Frozen;
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &["dropout"]));

    let steps_per_epoch = count.div_ceil(config.batch_size);
    let total_steps = config.epochs * steps_per_epoch;
    let warmup_steps = config.warmup_epochs * steps_per_epoch;

    let store_slots = model.store()?.len();
    let head_slot = store_slots;
    let mut optimizer = AdamW::<F>::new(store_slots + 1, config.weight_decay);

    let mut losses = Vec::with_capacity(total_steps);
    let mut learning_rates = Vec::with_capacity(total_steps);
    let mut max_grads = Vec::with_capacity(total_steps);
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let epoch_start = step;
        for batch in epoch_batches(count, config.batch_size, epoch, config.seed) {
            let mut rows = Array2::zeros((batch.len() * tokens, rows_all.ncols()));
            let mut alphas = Array1::zeros(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            for (slot, &i) in batch.iter().enumerate() {
                rows.slice_mut(ndarray::s![slot * tokens..(slot + 1) * tokens, ..])
                    .assign(&rows_all.slice(ndarray::s![i * tokens..(i + 1) * tokens, ..]));
                alphas[slot] = alphas_all[i];
                labels.push(data.labels[i]);
            }

            let rng = use_dropout.then_some(&mut dropout_rng);
            let mut graph = model.forward_rows(&rows, &alphas, rng)?;
            let loss_graph = attach_margin_loss(&mut graph.tape, graph.output, head, &labels)?;
            let loss = graph.tape.scalar(loss_graph.loss).to_f64();
            if !loss.is_finite() {
                return Err(PetalError::Numeric(format!(
                    "loss became {loss} at step {step} (epoch {epoch}); aborting the run"
                )));
            }
            let mut grads = graph.tape.backward(loss_graph.loss);

            let mut updates: Vec<(ParamId, Array2<F>)> = Vec::new();
            {
                let store = model.store()?;
                for (pid, node) in &graph.param_nodes {
                    if !store.entry(*pid).trainable {
                        continue;
                    }
                    if let Some(grad) = grads.take(*node) {
                        updates.push((*pid, grad));
                    }
                }
            }
            let head_grad = grads.take(loss_graph.weights).ok_or_else(|| {
                PetalError::State("loss graph never reached the head weights".into())
            })?;

            let mut max_grad = 0.0f64;
            let mut sq_sum = 0.0f64;
            for grad in updates.iter().map(|(_, g)| g).chain([&head_grad]) {
                for &g in grad.iter() {
                    let g = g.to_f64();
                    max_grad = max_grad.max(g.abs());
                    sq_sum += g * g;
                }
            }
            let clip_factor = match config.grad_clip {
                Some(max_norm) if sq_sum.sqrt() > max_norm => max_norm / sq_sum.sqrt(),
                _ => 1.0,
            };

            let lr = lr_at(step, total_steps, warmup_steps, config.initial_lr, config.lr_power);
            optimizer.begin_step();
            let scale = F::from_f64(clip_factor);
            let store = &mut model.backbone_mut()?.store;
            for (pid, mut grad) in updates {
                if clip_factor != 1.0 {
                    grad.mapv_inplace(|g| g * scale);
                }
                optimizer.update(pid.0, store.value_mut(pid), &grad, lr);
            }
            let mut head_grad = head_grad;
            if clip_factor != 1.0 {
                head_grad.mapv_inplace(|g| g * scale);
            }
            optimizer.update(head_slot, &mut head.class_weights, &head_grad, lr);

            losses.push(loss);
            learning_rates.push(lr);
            max_grads.push(max_grad);
            step += 1;
        }
        let epoch_losses = &losses[epoch_start..step];
        let epoch_loss = epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64;
        let epoch_max = max_grads[epoch_start..step]
            .iter()
            .fold(0.0f64, |a, &b| a.max(b));
        println!(
            "epoch={epoch} loss={epoch_loss:.6} lr={:.6e} max_grad={epoch_max:.6e}",
            learning_rates[step - 1]
        );
    }

    let checkpoint = checkpoint_with_extras(model, head, config.mode)?;
    Ok(TrainReport {
        series: TrainSeries {
            mode: config.mode,
            seed: config.seed,
            epochs: config.epochs,
            steps_per_epoch,
            trainable_params,
            head_params: head.classes() * head.dim(),
            losses,
            learning_rates,
            max_grads,
            wall_clock_seconds: t0.elapsed().as_secs_f64(),
        },
        checkpoint,
    })
}

/// Decade edges shared by every gradient-probe histogram: `10^-12 .. 10^2`.
pub fn gradient_histogram_edges() -> Vec<f64> {
    (-12..=2).map(|k| 10f64.powi(k)).collect()
}

/// Pooled magnitude statistics over one group of tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradSectionStats {
    pub tensors: usize,
    pub elements: usize,
    pub max_abs: f64,
    /// 99th percentile by nearest rank; 0 when the group is empty.
    pub p99_abs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGradStat {
    pub name: String,
    pub elements: usize,
    pub max_abs: f64,
}

/// One mode's view of the shared backward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradProbeMode {
    pub mode: TrainMode,
    /// Over everything the mode trains, head included.
    pub all_trainable: GradSectionStats,
    /// Same set minus the head: the backbone-side story, which is what
    /// separates the recipes (the head's gradients are identical across
    /// modes because the forward pass is shared).
    pub without_head: GradSectionStats,
    pub head: GradSectionStats,
    /// Counts per histogram bin over `all_trainable` magnitudes; bin 0 is
    /// everything below the first edge (exact zeros land there).
    pub histogram: Vec<usize>,
    pub per_param: Vec<ParamGradStat>,
}

/// First-iteration gradient distributions, one entry per requested mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradProbeReport {
    pub batch_size: usize,
    pub seed: u64,
    pub loss: f64,
    pub histogram_edges: Vec<f64>,
    pub modes: Vec<GradProbeMode>,
}

fn pooled_stats(groups: &[&[f64]]) -> GradSectionStats {
    let elements: usize = groups.iter().map(|g| g.len()).sum();
    if elements == 0 {
        return GradSectionStats {
            tensors: groups.len(),
            elements: 0,
            max_abs: 0.0,
            p99_abs: 0.0,
        };
    }
    let mut pooled: Vec<f64> = groups.iter().flat_map(|g| g.iter().copied()).collect();
    pooled.sort_by(f64::total_cmp);
    let rank = ((0.99 * elements as f64).ceil() as usize).clamp(1, elements);
    GradSectionStats {
        tensors: groups.len(),
        elements,
        max_abs: *pooled.last().expect("nonempty"),
        p99_abs: pooled[rank - 1],
    }
}

fn histogram_counts(groups: &[&[f64]], edges: &[f64]) -> Vec<usize> {
    let mut counts = vec![0usize; edges.len() + 1];
    for &mag in groups.iter().flat_map(|g| g.iter()) {
        let bin = edges.partition_point(|&e| e <= mag);
        counts[bin] += 1;
    }
    counts
}

/// Runs one forward/backward pass on the first seeded batch of the train
/// split and reports each requested mode's gradient distribution over its
/// trainable parameters.
///
/// All modes share literally the same pass (same batch, same blend
/// weights, dropout off), so the comparison isolates what each mode
/// trains rather than sampling noise; a mode's stats are a slice of one
/// set of gradients. Repeating the probe with the same seed reproduces
/// the report exactly.
pub fn grad_probe<F: Real>(
    model: &AdaptedModel<F>,
    head: &MarginHead<F>,
    manifest: &DatasetManifest,
    batch_size: usize,
    modes: &[TrainMode],
    seed: u64,
) -> Result<GradProbeReport> {
    if batch_size == 0 {
        return Err(PetalError::Config("batch_size must be at least 1".into()));
    }
    if modes.is_empty() {
        return Err(PetalError::Config("probe needs at least one mode".into()));
    }
    head.validate()?;
    let data = load_train_split(manifest, head)?;
    let count = data.images.len();
    let batch = epoch_batches(count, batch_size.min(count), 0, seed)
        .into_iter()
        .next()
        .expect("nonempty split yields at least one batch");

    let images: Vec<ImageBuf> = batch.iter().map(|&i| data.images[i].clone()).collect();
    let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
    let alphas = model.gate_alphas(&images)?;
    let rows = model.backbone()?.patch_rows(&images)?;
    let mut graph = model.forward_rows(&rows, &alphas, None)?;
    let loss_graph = attach_margin_loss(&mut graph.tape, graph.output, head, &labels)?;
    let loss = graph.tape.scalar(loss_graph.loss).to_f64();
    let grads = graph.tape.backward(loss_graph.loss);

    struct Collected {
        name: String,
        kind: ParamKind,
        mags: Vec<f64>,
        max_abs: f64,
    }
    let store = model.store()?;
    let mut collected: Vec<Collected> = Vec::new();
    for (pid, node) in &graph.param_nodes {
        let entry = store.entry(*pid);
        let mags: Vec<f64> = match grads.get(*node) {
            Some(g) => g.iter().map(|v| Real::to_f64(*v).abs()).collect(),
            None => vec![0.0; entry.value.len()],
        };
        let max_abs = mags.iter().fold(0.0f64, |a, &b| a.max(b));
        collected.push(Collected {
            name: entry.name.clone(),
            kind: entry.kind,
            mags,
            max_abs,
        });
    }
    let head_mags: Vec<f64> = grads
        .get(loss_graph.weights)
        .map(|g| g.iter().map(|v| Real::to_f64(*v).abs()).collect())
        .unwrap_or_else(|| vec![0.0; head.classes() * head.dim()]);
    let head_stats = pooled_stats(&[&head_mags]);
    let edges = gradient_histogram_edges();

    let mut mode_reports = Vec::with_capacity(modes.len());
    for &mode in modes {
        let selected: Vec<&Collected> =
            collected.iter().filter(|c| mode.trains(c.kind)).collect();
        let backbone_groups: Vec<&[f64]> = selected.iter().map(|c| c.mags.as_slice()).collect();
        let mut all_groups = backbone_groups.clone();
        all_groups.push(&head_mags);
        let mut per_param: Vec<ParamGradStat> = selected
            .iter()
            .map(|c| ParamGradStat {
                name: c.name.clone(),
                elements: c.mags.len(),
                max_abs: c.max_abs,
            })
            .collect();
        per_param.push(ParamGradStat {
            name: HEAD_TENSOR_NAME.to_string(),
            elements: head_mags.len(),
            max_abs: head_stats.max_abs,
        });
        mode_reports.push(GradProbeMode {
            mode,
            all_trainable: pooled_stats(&all_groups),
            without_head: pooled_stats(&backbone_groups),
            head: head_stats.clone(),
            histogram: histogram_counts(&all_groups, &edges),
            per_param,
        });
    }

    Ok(GradProbeReport {
        batch_size: batch.len(),
        seed,
        loss,
        histogram_edges: edges,
        modes: mode_reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Site, ToyBackbone, ToyBackboneConfig};
    use crate::datasim::{generate_benchmark, DegradationSpec, GenerateConfig};
    use crate::injection::{inject, InjectMode, InjectionConfig};
    use crate::losses::MarginVariant;
    use crate::quality::{GateCalibration, SharpnessEstimator};
    use std::collections::BTreeSet;

    fn tiny_backbone_config() -> ToyBackboneConfig {
        ToyBackboneConfig {
            image_size: 32,
            patch_size: 8,
            dim: 16,
            depth: 2,
            heads: 2,
            attn_width: 16,
            mlp_ratio: 2.0,
            embed_dim: 16,
            seed: 11,
        }
    }

    fn tiny_dataset(identities: usize, seed: u64) -> (tempfile::TempDir, DatasetManifest) {
        let dir = tempfile::tempdir().expect("tempdir");
        let config = GenerateConfig {
            identities,
            unknown_identities: 1,
            train_per_identity: 4,
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

    fn placeholder_gate() -> GateCalibration {
        GateCalibration {
            mu: 0.5,
            sigma: 0.1,
            threshold: 0.6,
            sample_count: 1,
            estimator: "builtin-sharpness".into(),
            seed: 0,
        }
    }

    fn twin_model(dropout: f64) -> AdaptedModel<f64> {
        let backbone = ToyBackbone::<f64>::new(tiny_backbone_config()).expect("backbone");
        let config = InjectionConfig {
            sites: BTreeSet::from([Site::AttentionQkv, Site::FeatureHead]),
            rank: 2,
            scale: 1.0,
            dropout_rate: dropout,
            mode: InjectMode::Twin,
        };
        inject(backbone, config, placeholder_gate(), Box::new(SharpnessEstimator), 29)
            .expect("inject")
    }

    fn fresh_head(classes: usize, seed: u64) -> MarginHead<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MarginHead::fresh(classes, 16, MarginVariant::Cosface, 0.2, 12.0, &mut rng)
            .expect("head")
    }

    #[test]
    fn schedule_ramps_to_peak_and_decays_to_zero() {
        let (total, warmup, lr0) = (250, 50, 3e-4);
        let series: Vec<f64> = (0..total).map(|s| lr_at(s, total, warmup, lr0, 1.0)).collect();
        assert_eq!(series[warmup - 1], lr0, "last warmup step pays the peak exactly");
        assert_eq!(series[total - 1], 0.0, "final step decays to zero exactly");
        for pair in series[..warmup].windows(2) {
            assert!(pair[1] > pair[0], "warmup ramps strictly up");
        }
        for pair in series[warmup - 1..].windows(2) {
            assert!(pair[1] < pair[0], "decay moves strictly down");
        }
        // No spike at the boundary: the step across it is no larger than
        // the biggest step inside either segment.
        let boundary = series[warmup - 1] - series[warmup];
        let warmup_step = lr0 / warmup as f64;
        let decay_step = lr0 / (total - warmup) as f64;
        assert!(boundary <= warmup_step.max(decay_step) + 1e-15);
        // At least 100 post-warmup steps leave the tail under 1% of peak.
        let tail = lr_at(total - 1, total, warmup, lr0, 1.0);
        assert!(tail < 0.01 * lr0);
        // A steeper exponent decays at least as fast everywhere.
        for s in warmup..total {
            assert!(lr_at(s, total, warmup, lr0, 2.0) <= lr_at(s, total, warmup, lr0, 1.0));
        }
        // Warmup-free schedules start at full decay height.
        assert!(lr_at(0, 100, 0, lr0, 1.0) > 0.98 * lr0);
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let ok = TrainConfig::default();
        ok.validate().expect("default config is valid");
        let cases: Vec<(&str, TrainConfig)> = vec![
            ("zero batch", TrainConfig { batch_size: 0, ..ok.clone() }),
            (
                "warmup swallows the run",
                TrainConfig { epochs: 3, warmup_epochs: 3, ..ok.clone() },
            ),
            (
                "warmup on a zero-epoch run",
                TrainConfig { epochs: 0, warmup_epochs: 1, ..ok.clone() },
            ),
            ("zero lr", TrainConfig { initial_lr: 0.0, ..ok.clone() }),
            ("negative decay", TrainConfig { weight_decay: -0.1, ..ok.clone() }),
            ("flat power", TrainConfig { lr_power: 0.0, ..ok.clone() }),
            ("zero clip", TrainConfig { grad_clip: Some(0.0), ..ok.clone() }),
            (
                "empty calibration",
                TrainConfig { calibration_samples: Some(0), ..ok.clone() },
            ),
        ];
        for (what, config) in cases {
            assert!(config.validate().is_err(), "{what} should be rejected");
        }
        TrainConfig { epochs: 0, warmup_epochs: 0, ..ok }
            .validate()
            .expect("zero-epoch no-op config is allowed");
    }

    #[test]
    fn epoch_batches_partition_the_data_and_follow_the_seed() {
        let batches = epoch_batches(10, 4, 0, 5);
        assert_eq!(batches.len(), 3);
        assert_eq!(batches[2].len(), 2, "tail batch keeps the remainder");
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>(), "every index exactly once");
        assert_eq!(epoch_batches(10, 4, 0, 5), batches, "same epoch and seed repeat");
        assert_ne!(
            epoch_batches(10, 4, 1, 5),
            batches,
            "the next epoch reshuffles"
        );
        assert_ne!(epoch_batches(10, 4, 0, 6), batches, "a new seed reshuffles");
    }

    #[test]
    fn zero_epoch_run_is_a_noop() {
        let (_dir, manifest) = tiny_dataset(2, 41);
        let mut model = twin_model(0.0);
        let mut head = fresh_head(2, 3);
        let before: Vec<(String, Vec<u64>)> = model
            .store()
            .expect("store")
            .iter()
            .map(|(_, e)| (e.name.clone(), e.value.iter().map(|v| v.to_bits()).collect()))
            .collect();
        let head_before: Vec<u64> = head.class_weights.iter().map(|v| v.to_bits()).collect();

        let config = TrainConfig {
            mode: TrainMode::Frozen,
            epochs: 0,
            warmup_epochs: 0,
            ..TrainConfig::default()
        };
        let report = finetune(&mut model, &mut head, &manifest, &config).expect("finetune");
        assert!(report.series.losses.is_empty());
        assert!(report.series.max_grads.is_empty());
        assert_eq!(report.series.epochs, 0);

        let after: Vec<(String, Vec<u64>)> = model
            .store()
            .expect("store")
            .iter()
            .map(|(_, e)| (e.name.clone(), e.value.iter().map(|v| v.to_bits()).collect()))
            .collect();
        assert_eq!(before, after, "no parameter moved");
        let head_after: Vec<u64> = head.class_weights.iter().map(|v| v.to_bits()).collect();
        assert_eq!(head_before, head_after, "head untouched");
        assert!(report
            .checkpoint
            .manifest
            .tensors
            .iter()
            .any(|t| t.name == HEAD_TENSOR_NAME));
    }

    #[test]
    fn training_descends_on_a_separable_toy() {
        let (_dir, manifest) = tiny_dataset(2, 43);
        let mut model = twin_model(0.0);
        let mut head = fresh_head(2, 5);
        let config = TrainConfig {
            mode: TrainMode::Petalface,
            epochs: 5,
            warmup_epochs: 1,
            batch_size: 4,
            initial_lr: 5e-3,
            calibration_samples: Some(8),
            seed: 17,
            ..TrainConfig::default()
        };
        let report = finetune(&mut model, &mut head, &manifest, &config).expect("finetune");
        let series = &report.series;
        assert_eq!(series.losses.len(), 5 * series.steps_per_epoch);
        assert!(series.losses.iter().all(|l| l.is_finite()));
        assert!(
            series.losses.last().unwrap() < series.losses.first().unwrap(),
            "loss should descend: first {} vs last {}",
            series.losses.first().unwrap(),
            series.losses.last().unwrap()
        );
        assert_eq!(
            series.trainable_params,
            model.closed_form_trainable(),
            "adapter-only freezing leaves exactly the closed-form count trainable"
        );
    }

    #[test]
    fn base_weights_stay_bit_identical_in_adapter_modes() {
        let (_dir, manifest) = tiny_dataset(2, 47);
        let mut model = twin_model(0.1);
        let mut head = fresh_head(2, 7);
        let snapshot: Vec<(String, Vec<u64>)> = model
            .store()
            .expect("store")
            .iter()
            .filter(|(_, e)| e.kind == ParamKind::Base)
            .map(|(_, e)| (e.name.clone(), e.value.iter().map(|v| v.to_bits()).collect()))
            .collect();
        let config = TrainConfig {
            mode: TrainMode::Petalface,
            epochs: 2,
            warmup_epochs: 1,
            batch_size: 4,
            initial_lr: 1e-3,
            calibration_samples: Some(8),
            seed: 19,
            ..TrainConfig::default()
        };
        finetune(&mut model, &mut head, &manifest, &config).expect("finetune");
        let store = model.store().expect("store");
        for (name, bits) in &snapshot {
            let entry = store
                .iter()
                .find(|(_, e)| &e.name == name)
                .map(|(_, e)| e)
                .expect("base entry survives");
            let now: Vec<u64> = entry.value.iter().map(|v| v.to_bits()).collect();
            assert_eq!(&now, bits, "base weight '{name}' moved during an adapter run");
        }
        let adapters_moved = store.iter().any(|(_, e)| {
            e.kind == ParamKind::Adapter && e.value.iter().any(|v| *v != 0.0 && v.abs() > 0.0)
        });
        assert!(adapters_moved, "some adapter weight should have trained");
    }

    #[test]
    fn same_seed_reproduces_the_run_bitwise() {
        let (_dir, manifest) = tiny_dataset(2, 53);
        let config = TrainConfig {
            mode: TrainMode::Petalface,
            epochs: 2,
            warmup_epochs: 1,
            batch_size: 4,
            initial_lr: 1e-3,
            calibration_samples: Some(8),
            seed: 23,
            ..TrainConfig::default()
        };
        let mut runs = Vec::new();
        for _ in 0..2 {
            let mut model = twin_model(0.1);
            let mut head = fresh_head(2, 9);
            let report = finetune(&mut model, &mut head, &manifest, &config).expect("finetune");
            runs.push(report);
        }
        let (a, b) = (&runs[0], &runs[1]);
        assert_eq!(a.series.losses, b.series.losses);
        assert_eq!(a.series.max_grads, b.series.max_grads);
        for (ta, tb) in a.checkpoint.tensors.iter().zip(&b.checkpoint.tensors) {
            let bits_a: Vec<u32> = ta.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = tb.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn single_lora_matches_a_handwritten_reference_loop() {
        let (_dir, manifest) = tiny_dataset(2, 59);
        let inj = InjectionConfig {
            sites: BTreeSet::from([Site::AttentionQkv, Site::FeatureHead]),
            rank: 2,
            scale: 1.0,
            dropout_rate: 0.0,
            mode: InjectMode::Single,
        };
        let build = || {
            let backbone = ToyBackbone::<f64>::new(tiny_backbone_config()).expect("backbone");
            inject(
                backbone,
                inj.clone(),
                placeholder_gate(),
                Box::new(SharpnessEstimator),
                29,
            )
            .expect("inject")
        };
        let config = TrainConfig {
            mode: TrainMode::SingleLora,
            epochs: 2,
            warmup_epochs: 1,
            batch_size: 4,
            initial_lr: 1e-3,
            weight_decay: 0.1,
            lr_power: 1.0,
            grad_clip: None,
            calibration_samples: None,
            seed: 31,
        };

        let mut model = build();
        let mut head = fresh_head(2, 13);
        let report = finetune(&mut model, &mut head, &manifest, &config).expect("finetune");

        // Reference loop: same batches, same schedule, a from-scratch AdamW.
        let mut ref_model = build();
        {
            let store = &mut ref_model.backbone_mut().expect("backbone").store;
            let plan: Vec<(ParamId, bool)> = store
                .iter()
                .map(|(id, e)| (id, e.kind == ParamKind::Adapter))
                .collect();
            for (id, on) in plan {
                store.set_trainable(id, on);
            }
        }
        let mut ref_head = fresh_head(2, 13);
        let records: Vec<_> = manifest.split_records(Split::Train).collect();
        let classes = manifest.class_map(Split::Train);
        let images: Vec<ImageBuf> =
            records.iter().map(|r| manifest.load_image(r).expect("image")).collect();
        let labels: Vec<usize> = records.iter().map(|r| classes[&r.identity]).collect();
        let count = images.len();
        let spe = count.div_ceil(config.batch_size);
        let total = config.epochs * spe;
        let warmup = config.warmup_epochs * spe;

        let mut moments: std::collections::BTreeMap<usize, (Array2<f64>, Array2<f64>)> =
            std::collections::BTreeMap::new();
        let head_key = usize::MAX;
        let mut ref_losses = Vec::new();
        let mut step = 0usize;
        for epoch in 0..config.epochs {
            for batch in epoch_batches(count, config.batch_size, epoch, config.seed) {
                let batch_images: Vec<ImageBuf> =
                    batch.iter().map(|&i| images[i].clone()).collect();
                let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
                let ones = Array1::from_elem(batch.len(), 1.0f64);
                let rows = ref_model
                    .backbone()
                    .expect("backbone")
                    .patch_rows(&batch_images)
                    .expect("rows");
                let mut graph = ref_model.forward_rows(&rows, &ones, None).expect("forward");
                let lg = attach_margin_loss(&mut graph.tape, graph.output, &ref_head, &batch_labels)
                    .expect("loss");
                ref_losses.push(graph.tape.scalar(lg.loss));
                let mut grads = graph.tape.backward(lg.loss);

                let lr = lr_at(step, total, warmup, config.initial_lr, config.lr_power);
                step += 1;
                let t = step as i32;
                let mut apply = |key: usize, param: &mut Array2<f64>, grad: &Array2<f64>| {
                    let (m, v) = moments.entry(key).or_insert_with(|| {
                        (Array2::zeros(param.raw_dim()), Array2::zeros(param.raw_dim()))
                    });
                    let bc1 = 1.0 - ADAM_BETA1.powi(t);
                    let bc2 = 1.0 - ADAM_BETA2.powi(t);
                    for ((p, m), (v, &g)) in param
                        .iter_mut()
                        .zip(m.iter_mut())
                        .zip(v.iter_mut().zip(grad.iter()))
                    {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                        let mhat = *m / bc1;
                        let vhat = *v / bc2;
                        *p = *p - lr * (mhat / (vhat.sqrt() + ADAM_EPS) + config.weight_decay * *p);
                    }
                };
                let mut updates: Vec<(ParamId, Array2<f64>)> = Vec::new();
                {
                    let store = ref_model.store().expect("store");
                    for (pid, node) in &graph.param_nodes {
                        if !store.entry(*pid).trainable {
                            continue;
                        }
                        if let Some(g) = grads.take(*node) {
                            updates.push((*pid, g));
                        }
                    }
                }
                let head_grad = grads.take(lg.weights).expect("head grad");
                let store = &mut ref_model.backbone_mut().expect("backbone").store;
                for (pid, g) in updates {
                    apply(pid.0, store.value_mut(pid), &g);
                }
                apply(head_key, &mut ref_head.class_weights, &head_grad);
            }
        }

        assert_eq!(report.series.losses, ref_losses, "loss series match step for step");
        let store = model.store().expect("store");
        let ref_store = ref_model.store().expect("store");
        for ((_, a), (_, b)) in store.iter().zip(ref_store.iter()) {
            if a.kind != ParamKind::Adapter {
                continue;
            }
            let bits_a: Vec<u64> = a.value.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.value.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "adapter '{}' diverged from the reference", a.name);
        }
        let head_bits: Vec<u64> = head.class_weights.iter().map(|v| v.to_bits()).collect();
        let ref_bits: Vec<u64> = ref_head.class_weights.iter().map(|v| v.to_bits()).collect();
        assert_eq!(head_bits, ref_bits, "head diverged from the reference");
    }

    #[test]
    fn gradient_probe_reflects_zero_init_and_recipe_scale() {
        let (_dir, manifest) = tiny_dataset(3, 61);
        let model = twin_model(0.1);
        let head = fresh_head(3, 15);
        let modes = [TrainMode::Petalface, TrainMode::FullFt];
        let report = grad_probe(&model, &head, &manifest, 6, &modes, 37).expect("probe");
        let again = grad_probe(&model, &head, &manifest, 6, &modes, 37).expect("probe");
        assert_eq!(report, again, "same seed reproduces the probe exactly");

        let petal = &report.modes[0];
        let full = &report.modes[1];
        for stat in &petal.per_param {
            if stat.name.ends_with(".down") {
                assert_eq!(
                    stat.max_abs, 0.0,
                    "down-projection '{}' should see exactly zero gradient at step 0",
                    stat.name
                );
            }
        }
        let up_max = petal
            .per_param
            .iter()
            .filter(|s| s.name.ends_with(".up"))
            .map(|s| s.max_abs)
            .fold(0.0f64, f64::max);
        assert!(up_max > 0.0, "up-projections receive gradient at step 0");
        assert!(
            petal.without_head.max_abs < full.without_head.max_abs,
            "adapter gradients start below full fine-tune gradients ({} vs {})",
            petal.without_head.max_abs,
            full.without_head.max_abs
        );
        assert_eq!(
            petal.head, full.head,
            "the shared pass gives every mode the same head gradients"
        );
        let counted: usize = petal.histogram.iter().sum();
        assert_eq!(counted, petal.all_trainable.elements);
    }

    #[test]
    fn finetune_rejects_inconsistent_inputs() {
        let (_dir, manifest) = tiny_dataset(2, 67);
        let mut model = twin_model(0.0);

        // Head covering the wrong number of identities.
        let mut wide_head = fresh_head(5, 15);
        let err = finetune(&mut model, &mut wide_head, &manifest, &TrainConfig::default())
            .expect_err("class mismatch");
        assert!(matches!(err, PetalError::Input(_)), "got {err:?}");

        // Manifest with no train records at all.
        let mut empty = manifest.clone();
        empty.records.retain(|r| r.split != Split::Train);
        let mut head = fresh_head(2, 15);
        let err = finetune(&mut model, &mut head, &empty, &TrainConfig::default())
            .expect_err("empty split");
        assert!(matches!(err, PetalError::Input(_)), "got {err:?}");
    }

    #[test]
    fn exploding_runs_abort_with_a_numeric_error() {
        let (_dir, manifest) = tiny_dataset(2, 71);
        let mut model = twin_model(0.0);
        let mut head = fresh_head(2, 15);
        let config = TrainConfig {
            mode: TrainMode::FullFt,
            epochs: 2,
            warmup_epochs: 0,
            batch_size: 8,
            initial_lr: 1e200,
            calibration_samples: None,
            ..TrainConfig::default()
        };
        let err = finetune(&mut model, &mut head, &manifest, &config)
            .expect_err("an absurd learning rate must blow up");
        assert!(matches!(err, PetalError::Numeric(_)), "got {err:?}");
    }

    #[test]
    fn lazy_calibration_freezes_gate_statistics_from_the_train_split() {
        let (_dir, manifest) = tiny_dataset(2, 73);
        let mut model = twin_model(0.0);
        let mut head = fresh_head(2, 15);
        let config = TrainConfig {
            mode: TrainMode::Petalface,
            epochs: 1,
            warmup_epochs: 0,
            batch_size: 8,
            initial_lr: 1e-4,
            calibration_samples: Some(6),
            seed: 77,
            ..TrainConfig::default()
        };
        let report = finetune(&mut model, &mut head, &manifest, &config).expect("finetune");
        assert_eq!(model.gate.sample_count, 6);
        assert_eq!(model.gate.threshold, model.gate.mu + model.gate.sigma);
        assert_ne!(model.gate, placeholder_gate(), "the placeholder was replaced");
        let saved = report.checkpoint.manifest.calibration.as_ref().expect("calibration");
        assert_eq!(saved, &model.gate, "the checkpoint carries the frozen gate");
    }
}
