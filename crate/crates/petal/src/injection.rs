//! Model surgery: declaratively wrap chosen backbone linears with twin
//! adapter pairs, thread per-sample gate weights to every wrapped layer,
//! and undo the whole thing on request.
//!
//! Surgery never edits base weights. Adapters are appended to the model's
//! parameter store and the base entries are frozen; stripping truncates
//! the store back and unfreezes, restoring the pristine model exactly.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{
    clamp_alphas, dropout_mask, AdapterCheckpoint, CheckpointManifest, LowRankAdapter,
    TensorMeta, TensorSection, ALPHA_CONVENTION, CHECKPOINT_FORMAT,
};
use crate::autodiff::{NodeId, Real, Tape};
use crate::backbone::{
    repeat_per_sample, ForwardGraph, LayerSlot, ParamId, ParamKind, ParamStore, Site, ToyBackbone,
};
use crate::error::{PetalError, Result};
use crate::imaging::ImageBuf;
use crate::quality::{alpha_from_quality, GateCalibration, QualityEstimator};

/// Derives an independent stream seed from a base seed and a list of tags,
/// so sibling RNG consumers never share or shift each other's streams.
pub fn derive_seed(base: u64, tags: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    for tag in tags {
        hasher.update([0u8]);
        hasher.update(tag.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 yields 32 bytes"))
}

/// How adapters attach to the selected layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectMode {
    /// A gated pair per layer: alpha weights the hi adapter, 1 - alpha the lo.
    Twin,
    /// One unconditional adapter per layer (occupies the hi slot).
    Single,
    /// No surgery; the model stays pristine.
    None,
}

impl InjectMode {
    pub fn name(self) -> &'static str {
        match self {
            InjectMode::Twin => "twin",
            InjectMode::Single => "single",
            InjectMode::None => "none",
        }
    }

    pub fn parse(name: &str) -> Result<InjectMode> {
        match name {
            "twin" => Ok(InjectMode::Twin),
            "single" => Ok(InjectMode::Single),
            "none" => Ok(InjectMode::None),
            _ => Err(PetalError::Config(format!(
                "unknown injection mode '{name}' (expected twin, single, or none)"
            ))),
        }
    }
}

/// Declarative description of the surgery to perform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InjectionConfig {
    pub sites: BTreeSet<Site>,
    pub rank: usize,
    pub scale: f64,
    pub dropout_rate: f64,
    pub mode: InjectMode,
}

impl Default for InjectionConfig {
    /// The recommended placement: adapters on each attention qkv linear
    /// and on the feature head, rank 8, gated pair.
    fn default() -> Self {
        InjectionConfig {
            sites: BTreeSet::from([Site::AttentionQkv, Site::FeatureHead]),
            rank: 8,
            scale: 1.0,
            dropout_rate: 0.1,
            mode: InjectMode::Twin,
        }
    }
}

impl InjectionConfig {
    /// Named placement presets for quick comparisons.
    pub fn preset(name: &str) -> Result<InjectionConfig> {
        let sites: BTreeSet<Site> = match name {
            "attention-only" => BTreeSet::from([Site::AttentionQkv]),
            "attention+feature" => BTreeSet::from([Site::AttentionQkv, Site::FeatureHead]),
            "mlp-only" => BTreeSet::from([Site::Mlp]),
            "everywhere" => Site::ALL.into_iter().collect(),
            _ => {
                return Err(PetalError::Config(format!(
                    "unknown injection preset '{name}' (expected attention-only, \
                     attention+feature, mlp-only, or everywhere)"
                )))
            }
        };
        Ok(InjectionConfig {
            sites,
            ..InjectionConfig::default()
        })
    }

    pub const PRESET_NAMES: [&'static str; 4] =
        ["attention-only", "attention+feature", "mlp-only", "everywhere"];

    pub fn validate(&self) -> Result<()> {
        if self.mode != InjectMode::None && self.sites.is_empty() {
            return Err(PetalError::Config(
                "injection sites must be nonempty unless mode is none".into(),
            ));
        }
        if self.mode != InjectMode::None && self.rank == 0 {
            return Err(PetalError::Config("adapter rank must be positive".into()));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(PetalError::Config(format!(
                "adapter scale must be finite and positive, got {}",
                self.scale
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(PetalError::Config(format!(
                "adapter dropout rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// One wrapped linear: which layer, and where its adapter factors live in
/// the shared parameter store.
#[derive(Clone, Debug)]
pub struct InjectedLayer {
    pub layer_id: String,
    pub site: Site,
    pub out_dim: usize,
    pub in_dim: usize,
    pub hi_down: ParamId,
    pub hi_up: ParamId,
    /// Absent in single mode.
    pub lo_down: Option<ParamId>,
    pub lo_up: Option<ParamId>,
}

/// A backbone after surgery: frozen base, trainable adapters, and the
/// quality gate that produces per-sample blend weights.
pub struct AdaptedModel<F: Real> {
    inner: Option<ToyBackbone<F>>,
    pub config: InjectionConfig,
    pub injected: Vec<InjectedLayer>,
    base_param_len: usize,
    pub gate: GateCalibration,
    pub estimator: Box<dyn QualityEstimator>,
    digest: String,
}

/// Wraps every linear belonging to the configured sites. Base parameters
/// freeze (unless mode is none); adapters are appended to the store with
/// per-layer seeds derived from `seed`, so the hi adapter of a layer is
/// identical across twin and single runs with the same seed.
pub fn inject<F: Real>(
    backbone: ToyBackbone<F>,
    config: InjectionConfig,
    gate: GateCalibration,
    estimator: Box<dyn QualityEstimator>,
    seed: u64,
) -> Result<AdaptedModel<F>> {
    config.validate()?;
    let mut layer_ids = Vec::new();
    for site in &config.sites {
        let matches: Vec<String> = backbone
            .layers_at(*site)
            .map(|l| l.layer_id.clone())
            .collect();
        if matches.is_empty() {
            return Err(PetalError::Config(format!(
                "site {site} matches no layer in this backbone"
            )));
        }
        layer_ids.extend(matches);
    }
    // Wrap in graph order regardless of site iteration order.
    let order: Vec<String> = backbone
        .layers()
        .iter()
        .filter(|l| layer_ids.contains(&l.layer_id))
        .map(|l| l.layer_id.clone())
        .collect();
    let refs: Vec<&str> = order.iter().map(String::as_str).collect();
    inject_layers(backbone, &refs, config, gate, estimator, seed)
}

/// Explicit-layer variant of [`inject`]. Requesting a layer twice is a
/// configuration error.
pub fn inject_layers<F: Real>(
    backbone: ToyBackbone<F>,
    layer_ids: &[&str],
    config: InjectionConfig,
    gate: GateCalibration,
    estimator: Box<dyn QualityEstimator>,
    seed: u64,
) -> Result<AdaptedModel<F>> {
    config.validate()?;
    let mut backbone = backbone;
    let base_param_len = backbone.store.len();
    let digest = injection_digest(&backbone, layer_ids, &config)?;
    let mut injected = Vec::new();

    if config.mode != InjectMode::None {
        let mut seen = BTreeSet::new();
        // Validate the whole plan before touching the store.
        for id in layer_ids {
            let slot = backbone.layer_by_id(id).ok_or_else(|| {
                PetalError::Config(format!("layer '{id}' does not exist in this backbone"))
            })?;
            if !seen.insert(id.to_string()) {
                return Err(PetalError::Config(format!(
                    "layer '{id}' requested twice; each layer takes one adapter pair"
                )));
            }
            if config.rank > slot.out_dim.min(slot.in_dim) {
                return Err(PetalError::Config(format!(
                    "rank {} exceeds min dim of layer '{id}' ({}x{})",
                    config.rank, slot.out_dim, slot.in_dim
                )));
            }
        }
        for id in layer_ids {
            let slot = backbone.layer_by_id(id).expect("validated above").clone();
            let entry = wrap_layer(&mut backbone.store, &slot, &config, seed)?;
            injected.push(entry);
        }
        // Freeze the base; only grafted parameters train.
        let base_ids: Vec<ParamId> = backbone
            .store
            .iter()
            .filter(|(_, e)| e.kind == ParamKind::Base)
            .map(|(id, _)| id)
            .collect();
        for id in base_ids {
            backbone.store.set_trainable(id, false);
        }
    }

    Ok(AdaptedModel {
        inner: Some(backbone),
        config,
        injected,
        base_param_len,
        gate,
        estimator,
        digest,
    })
}

fn wrap_layer<F: Real>(
    store: &mut ParamStore<F>,
    slot: &LayerSlot,
    config: &InjectionConfig,
    seed: u64,
) -> Result<InjectedLayer> {
    let mut add_pair = |role: &str| -> Result<(ParamId, ParamId)> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[&slot.layer_id, role]));
        let adapter = LowRankAdapter::<F>::init(
            slot.out_dim,
            slot.in_dim,
            config.rank,
            config.scale,
            config.dropout_rate,
            &mut rng,
        )?;
        let down = store.add(
            format!("{}.{role}.down", slot.layer_id),
            adapter.down().clone(),
            true,
            ParamKind::Adapter,
        )?;
        let up = store.add(
            format!("{}.{role}.up", slot.layer_id),
            adapter.up().clone(),
            true,
            ParamKind::Adapter,
        )?;
        Ok((down, up))
    };
    let (hi_down, hi_up) = add_pair("hi")?;
    let (lo_down, lo_up) = match config.mode {
        InjectMode::Twin => {
            let (d, u) = add_pair("lo")?;
            (Some(d), Some(u))
        }
        _ => (None, None),
    };
    Ok(InjectedLayer {
        layer_id: slot.layer_id.clone(),
        site: slot.site,
        out_dim: slot.out_dim,
        in_dim: slot.in_dim,
        hi_down,
        hi_up,
        lo_down,
        lo_up,
    })
}

/// Canonical fingerprint of backbone shape plus injection plan. Seeds and
/// weight values stay out: the digest states structural compatibility.
fn injection_digest<F: Real>(
    backbone: &ToyBackbone<F>,
    layer_ids: &[&str],
    config: &InjectionConfig,
) -> Result<String> {
    let c = &backbone.config;
    let mut text = format!(
        "shape:image={},patch={},dim={},depth={},heads={},attn={},hidden={},embed={};mode={};rank={};scale={}\n",
        c.image_size,
        c.patch_size,
        c.dim,
        c.depth,
        c.heads,
        c.attn_width,
        c.mlp_hidden(),
        c.embed_dim,
        config.mode.name(),
        config.rank,
        config.scale,
    );
    if config.mode != InjectMode::None {
        for id in layer_ids {
            let slot = backbone.layer_by_id(id).ok_or_else(|| {
                PetalError::Config(format!("layer '{id}' does not exist in this backbone"))
            })?;
            text.push_str(&format!(
                "layer:{}:{}:{}x{}\n",
                slot.layer_id, slot.site, slot.out_dim, slot.in_dim
            ));
        }
    }
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    Ok(format!("{:x}", hasher.finalize()))
}

impl<F: Real> AdaptedModel<F> {
    pub fn backbone(&self) -> Result<&ToyBackbone<F>> {
        self.inner
            .as_ref()
            .ok_or_else(|| PetalError::State("model was stripped; no backbone attached".into()))
    }

    pub fn backbone_mut(&mut self) -> Result<&mut ToyBackbone<F>> {
        self.inner
            .as_mut()
            .ok_or_else(|| PetalError::State("model was stripped; no backbone attached".into()))
    }

    pub fn store(&self) -> Result<&ParamStore<F>> {
        Ok(&self.backbone()?.store)
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// Scores each image with the estimator and maps the score through the
    /// gate transform: one blend weight per image.
    pub fn gate_alphas(&self, images: &[ImageBuf]) -> Result<Array1<F>> {
        let mut alphas = Vec::with_capacity(images.len());
        for image in images {
            let q = self.estimator.score(image)?;
            alphas.push(F::from_f64(alpha_from_quality(q, &self.gate)?));
        }
        Ok(Array1::from_vec(alphas))
    }

    /// Builds the forward graph for prepared patch rows under explicit
    /// blend weights. Pass an RNG to enable adapter dropout (training).
    pub fn forward_rows(
        &self,
        patch_rows: &Array2<F>,
        alphas: &Array1<F>,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardGraph<F>> {
        self.forward_internal(patch_rows, alphas, dropout_rng, None)
    }

    /// Like [`AdaptedModel::forward_rows`] but records, per injected layer,
    /// the per-sample weights that layer applied. Instrumentation for the
    /// "every layer sees the same gate output" guarantee.
    pub fn forward_rows_traced(
        &self,
        patch_rows: &Array2<F>,
        alphas: &Array1<F>,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(ForwardGraph<F>, Vec<(String, Array1<F>)>)> {
        let mut trace = Vec::new();
        let graph = self.forward_internal(patch_rows, alphas, dropout_rng, Some(&mut trace))?;
        Ok((graph, trace))
    }

    fn forward_internal(
        &self,
        patch_rows: &Array2<F>,
        alphas: &Array1<F>,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
        mut trace: Option<&mut Vec<(String, Array1<F>)>>,
    ) -> Result<ForwardGraph<F>> {
        let backbone = self.backbone()?;
        if self.config.mode == InjectMode::None {
            return backbone.build_graph(patch_rows, None);
        }
        let tokens = backbone.config.initial_tokens();
        let batch = patch_rows.nrows() / tokens.max(1);
        if alphas.len() != batch {
            return Err(PetalError::Shape(format!(
                "{} blend weights for a batch of {batch}",
                alphas.len()
            )));
        }
        let alphas = clamp_alphas(alphas)?;
        let store = &backbone.store;
        let mode = self.config.mode;
        let scale = self.config.scale;
        let dropout_rate = self.config.dropout_rate;
        let mut extra_nodes: Vec<(ParamId, NodeId)> = Vec::new();

        let mut hook = |tape: &mut Tape<F>,
                        slot: &LayerSlot,
                        x: NodeId,
                        base: NodeId|
         -> Result<NodeId> {
            let Some(layer) = self.injected.iter().find(|l| l.layer_id == slot.layer_id) else {
                return Ok(base);
            };
            if let Some(t) = trace.as_deref_mut() {
                t.push((layer.layer_id.clone(), alphas.clone()));
            }
            let rows = slot.rows_per_sample * batch;
            let mut adapter_path = |tape: &mut Tape<F>,
                                    down: ParamId,
                                    up: ParamId,
                                    rng: &mut Option<&mut ChaCha8Rng>|
             -> NodeId {
                let d_node = tape.leaf(store.value(down).clone());
                extra_nodes.push((down, d_node));
                let u_node = tape.leaf(store.value(up).clone());
                extra_nodes.push((up, u_node));
                let hidden = tape.linear(x, d_node, None);
                let raw = tape.linear(hidden, u_node, None);
                // Dropout mask and adapter scale share one elementwise
                // constant multiply.
                let needs_dropout = dropout_rate > 0.0 && rng.is_some();
                if needs_dropout {
                    let rng = rng.as_deref_mut().expect("checked above");
                    let mask =
                        dropout_mask::<F>(rows, slot.out_dim, dropout_rate, rng)
                            * F::from_f64(scale);
                    tape.dropout(raw, mask)
                } else if scale != 1.0 {
                    let mask = Array2::from_elem((rows, slot.out_dim), F::from_f64(scale));
                    tape.dropout(raw, mask)
                } else {
                    raw
                }
            };
            let hi = adapter_path(tape, layer.hi_down, layer.hi_up, &mut dropout_rng);
            match mode {
                InjectMode::Single => Ok(tape.add(base, hi)),
                InjectMode::Twin => {
                    let lo = adapter_path(
                        tape,
                        layer.lo_down.expect("twin layers carry a lo pair"),
                        layer.lo_up.expect("twin layers carry a lo pair"),
                        &mut dropout_rng,
                    );
                    let hi_w = repeat_per_sample(&alphas, slot.rows_per_sample);
                    let lo_w = hi_w.mapv(|a| F::one() - a);
                    let hi_scaled = tape.scale_rows(hi, hi_w);
                    let lo_scaled = tape.scale_rows(lo, lo_w);
                    let sum = tape.add(hi_scaled, lo_scaled);
                    Ok(tape.add(base, sum))
                }
                InjectMode::None => unreachable!("handled before the hook"),
            }
        };
        let mut graph = backbone.build_graph(patch_rows, Some(&mut hook))?;
        graph.param_nodes.extend(extra_nodes);
        Ok(graph)
    }

    /// Gate plus forward in one step: scores the images, computes blend
    /// weights, and returns embeddings (eval path, no dropout).
    pub fn embed_images(&self, images: &[ImageBuf]) -> Result<Array2<F>> {
        let backbone = self.backbone()?;
        let rows = backbone.patch_rows(images)?;
        let alphas = if self.config.mode == InjectMode::None {
            Array1::zeros(images.len())
        } else {
            self.gate_alphas(images)?
        };
        let graph = self.forward_rows(&rows, &alphas, None)?;
        Ok(graph.tape.value(graph.output).clone())
    }

    /// Trainable parameter count via the closed form Σ (pairs) · r · (m+n),
    /// where pairs is 2 for twin mode and 1 for single.
    pub fn closed_form_trainable(&self) -> usize {
        let per_layer = match self.config.mode {
            InjectMode::Twin => 2 * self.config.rank,
            InjectMode::Single => self.config.rank,
            InjectMode::None => 0,
        };
        self.injected
            .iter()
            .map(|l| per_layer * (l.out_dim + l.in_dim))
            .sum()
    }

    /// Trainable parameter count by walking the store.
    pub fn count_trainable(&self) -> Result<usize> {
        Ok(self.store()?.count_trainable())
    }

    /// Removes the adapters and returns the pristine backbone: store
    /// truncated to its pre-surgery length, all parameters trainable
    /// again. Calling twice is a state error.
    pub fn strip(&mut self) -> Result<ToyBackbone<F>> {
        let mut backbone = self
            .inner
            .take()
            .ok_or_else(|| PetalError::State("model already stripped".into()))?;
        backbone.store.truncate(self.base_param_len)?;
        let ids: Vec<ParamId> = backbone.store.iter().map(|(id, _)| id).collect();
        for id in ids {
            backbone.store.set_trainable(id, true);
        }
        self.injected.clear();
        Ok(backbone)
    }

    /// Adapter tensors in store order, converted for archival.
    pub fn adapter_tensors(&self) -> Result<(Vec<TensorMeta>, Vec<Array2<f32>>)> {
        let store = self.store()?;
        let mut metas = Vec::new();
        let mut tensors = Vec::new();
        for (_, entry) in store.iter() {
            if entry.kind != ParamKind::Adapter {
                continue;
            }
            metas.push(TensorMeta {
                name: entry.name.clone(),
                rows: entry.value.nrows(),
                cols: entry.value.ncols(),
                section: TensorSection::Adapter,
            });
            tensors.push(entry.value.mapv(|v| v.to_f64() as f32));
        }
        Ok((metas, tensors))
    }

    /// Assembles a checkpoint of the adapters plus any extra sections the
    /// caller wants to carry (classifier head state, full base weights).
    pub fn build_checkpoint(
        &self,
        extras: Vec<(TensorMeta, Array2<f32>)>,
    ) -> Result<AdapterCheckpoint> {
        let (mut metas, mut tensors) = self.adapter_tensors()?;
        for (meta, tensor) in extras {
            metas.push(meta);
            tensors.push(tensor);
        }
        Ok(AdapterCheckpoint {
            manifest: CheckpointManifest {
                format: CHECKPOINT_FORMAT.to_string(),
                convention: ALPHA_CONVENTION.to_string(),
                mode: self.config.mode.name().to_string(),
                rank: self.config.rank,
                scale: self.config.scale,
                dropout_rate: self.config.dropout_rate,
                sites: self.config.sites.iter().map(|s| s.name().to_string()).collect(),
                digest: self.digest.clone(),
                calibration: Some(self.gate.clone()),
                tensors: metas,
            },
            tensors,
        })
    }

    pub fn save_adapters(&self, path: &std::path::Path) -> Result<()> {
        self.build_checkpoint(Vec::new())?.write_file(path)
    }

    /// Copies a checkpoint's adapter tensors into this model. Base weights
    /// are never touched; the gate calibration is adopted from the
    /// manifest when present. The checkpoint must have been produced by a
    /// structurally identical model (same digest).
    pub fn apply_checkpoint(&mut self, ckpt: &AdapterCheckpoint) -> Result<()> {
        if ckpt.manifest.digest != self.digest {
            return Err(PetalError::Incompatible(format!(
                "checkpoint digest {} does not match this model's {}",
                ckpt.manifest.digest, self.digest
            )));
        }
        if ckpt.manifest.convention != ALPHA_CONVENTION {
            return Err(PetalError::Incompatible(format!(
                "checkpoint blend convention '{}' is not '{ALPHA_CONVENTION}'",
                ckpt.manifest.convention
            )));
        }
        let mut updates: Vec<(ParamId, Array2<F>)> = Vec::new();
        for layer in &self.injected {
            let mut fetch = |suffix: &str, id: ParamId, rows: usize, cols: usize| -> Result<()> {
                let name = format!("{}.{suffix}", layer.layer_id);
                let tensor = ckpt.tensor(&name).ok_or_else(|| {
                    PetalError::Corrupt(format!(
                        "checkpoint is missing tensor '{name}' for layer '{}'",
                        layer.layer_id
                    ))
                })?;
                if tensor.dim() != (rows, cols) {
                    return Err(PetalError::Corrupt(format!(
                        "tensor '{name}' is {:?}, expected {rows}x{cols}",
                        tensor.dim()
                    )));
                }
                updates.push((id, tensor.mapv(|v| F::from_f64(v as f64))));
                Ok(())
            };
            let rank = self.config.rank;
            fetch("hi.down", layer.hi_down, rank, layer.in_dim)?;
            fetch("hi.up", layer.hi_up, layer.out_dim, rank)?;
            if let (Some(ld), Some(lu)) = (layer.lo_down, layer.lo_up) {
                fetch("lo.down", ld, rank, layer.in_dim)?;
                fetch("lo.up", lu, layer.out_dim, rank)?;
            }
        }
        let store = &mut self.backbone_mut()?.store;
        for (id, value) in updates {
            *store.value_mut(id) = value;
        }
        if let Some(cal) = &ckpt.manifest.calibration {
            self.gate = cal.clone();
        }
        Ok(())
    }

    pub fn load_adapters(&mut self, path: &std::path::Path) -> Result<()> {
        let ckpt = AdapterCheckpoint::read_file(path)?;
        self.apply_checkpoint(&ckpt)
    }
}

/// Copies a checkpoint's base-section tensors onto same-named store
/// entries: the restore path for fully fine-tuned models.
pub fn apply_base_tensors<F: Real>(
    store: &mut ParamStore<F>,
    ckpt: &AdapterCheckpoint,
) -> Result<()> {
    for (meta, tensor) in ckpt.manifest.tensors.iter().zip(&ckpt.tensors) {
        if meta.section != TensorSection::Base {
            continue;
        }
        let id = store.id_of(&meta.name).ok_or_else(|| {
            PetalError::Corrupt(format!(
                "checkpoint carries base tensor '{}' which this model lacks",
                meta.name
            ))
        })?;
        let current = store.value(id);
        if current.dim() != (meta.rows, meta.cols) {
            return Err(PetalError::Corrupt(format!(
                "base tensor '{}' is {}x{} in the checkpoint but {:?} in the model",
                meta.name,
                meta.rows,
                meta.cols,
                current.dim()
            )));
        }
        *store.value_mut(id) = tensor.mapv(|v| F::from_f64(v as f64));
    }
    Ok(())
}
