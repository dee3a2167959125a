//! A small vision-transformer encoder with every linear sublayer
//! addressable by a stable id, so adapter surgery (see [`crate::injection`])
//! can wrap exactly the layers a config names.
//!
//! Architecture, pre-norm throughout:
//!
//! ```text
//! patches -> patch_embed -> +pos
//!   repeat per block: LN -> qkv -> attention -> proj -> residual
//!                     LN -> fc1 -> GELU -> fc2 -> residual
//!   between blocks:   merge token pairs (T, d) -> (T/2, 2d) -> reduce linear -> d
//!   finally:          LN -> mean over tokens -> feature_head -> embedding
//! ```
//!
//! The pair-merge plus down-projection stands in for stage transitions in
//! hierarchical encoders and gives the `patch_reduction` injection site a
//! rectangular (d, 2d) weight to act on.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Real, Tape};
use crate::error::{PetalError, Result};
use crate::imaging::ImageBuf;

/// Families of injectable linear layers. Every injectable linear in the
/// backbone belongs to exactly one site; an injection config selects whole
/// sites, never individual layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    /// The fused qkv linear in each attention block.
    AttentionQkv,
    /// The attention output projection in each block.
    AttentionProj,
    /// Both MLP linears (fc1, fc2) in each block.
    Mlp,
    /// The down-projection after each token-pair merge.
    PatchReduction,
    /// The final projection emitting the embedding.
    FeatureHead,
}

impl Site {
    pub const ALL: [Site; 5] = [
        Site::AttentionQkv,
        Site::AttentionProj,
        Site::Mlp,
        Site::PatchReduction,
        Site::FeatureHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Site::AttentionQkv => "attention_qkv",
            Site::AttentionProj => "attention_proj",
            Site::Mlp => "mlp",
            Site::PatchReduction => "patch_reduction",
            Site::FeatureHead => "feature_head",
        }
    }

    pub fn parse(name: &str) -> Result<Site> {
        Site::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| {
                PetalError::Config(format!(
                    "unknown injection site '{name}' (expected one of attention_qkv, \
                     attention_proj, mlp, patch_reduction, feature_head)"
                ))
            })
    }
}

impl std::fmt::Display for Site {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Whether a parameter belongs to the original model or was grafted on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Base,
    Adapter,
}

/// Handle into a [`ParamStore`]; stays valid for the store's lifetime
/// (entries are only ever appended or truncated from the tail).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<F: Real> {
    pub name: String,
    pub value: Array2<F>,
    pub trainable: bool,
    pub kind: ParamKind,
}

/// Flat named parameter registry. Vectors (biases, norm gains) are stored
/// as single-row matrices so everything shares one tensor type.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F: Real> {
    entries: Vec<ParamEntry<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Array2<F>,
        trainable: bool,
        kind: ParamKind,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(PetalError::State(format!(
                "parameter '{name}' is already registered"
            )));
        }
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
            kind,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<F> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array2<F> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<F> {
        &mut self.entries[id.0].value
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<F>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, e)| e.trainable)
            .map(|(id, _)| id)
            .collect()
    }

    /// Scalar count over trainable entries: the "walk the model" route for
    /// parameter accounting.
    pub fn count_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Drops every entry at index `len` and beyond. Refuses to drop base
    /// parameters: only grafted tails may be removed.
    pub fn truncate(&mut self, len: usize) -> Result<()> {
        if self.entries[len..].iter().any(|e| e.kind == ParamKind::Base) {
            return Err(PetalError::State(
                "refusing to truncate base parameters out of the store".into(),
            ));
        }
        self.entries.truncate(len);
        Ok(())
    }
}

/// One injectable linear: where it sits, which params it reads, and what
/// flows through it.
#[derive(Clone, Debug)]
pub struct LayerSlot {
    /// Stable id, e.g. `block0.attn.qkv`.
    pub layer_id: String,
    pub site: Site,
    pub weight: ParamId,
    pub bias: ParamId,
    pub out_dim: usize,
    pub in_dim: usize,
    /// Rows per sample at this layer's input: the token count at that
    /// stage, or 1 for the pooled feature head. Per-sample gate weights
    /// repeat this many times when applied to the layer output.
    pub rows_per_sample: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyBackboneConfig {
    /// Square input side in pixels.
    pub image_size: usize,
    /// Square patch side; must divide `image_size`.
    pub patch_size: usize,
    /// Token width through the trunk.
    pub dim: usize,
    /// Number of attention blocks; a pair-merge reduction sits between
    /// consecutive blocks, halving the token count each time.
    pub depth: usize,
    pub heads: usize,
    /// Combined width of each of q, k, v; the fused qkv linear maps
    /// `dim -> 3 * attn_width`. Must be divisible by `heads`.
    pub attn_width: usize,
    /// MLP hidden width as a multiple of `dim`.
    pub mlp_ratio: f64,
    /// Output embedding width.
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for ToyBackboneConfig {
    fn default() -> Self {
        ToyBackboneConfig {
            image_size: 64,
            patch_size: 16,
            dim: 48,
            depth: 3,
            heads: 4,
            attn_width: 48,
            mlp_ratio: 2.0,
            embed_dim: 128,
            seed: 0,
        }
    }
}

impl ToyBackboneConfig {
    /// Tokens entering the first block.
    pub fn initial_tokens(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 {
            return Err(PetalError::Config("image and patch sizes must be positive".into()));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(PetalError::Config(format!(
                "patch size {} must divide image size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.dim == 0 || self.embed_dim == 0 || self.attn_width == 0 {
            return Err(PetalError::Config("widths must be positive".into()));
        }
        if self.depth < 2 {
            return Err(PetalError::Config(format!(
                "depth must be at least 2, got {}",
                self.depth
            )));
        }
        if self.heads == 0 || self.attn_width % self.heads != 0 {
            return Err(PetalError::Config(format!(
                "heads ({}) must divide attn_width ({})",
                self.heads, self.attn_width
            )));
        }
        if self.mlp_hidden() == 0 {
            return Err(PetalError::Config(format!(
                "mlp_ratio {} collapses the hidden width to zero",
                self.mlp_ratio
            )));
        }
        let tokens = self.initial_tokens();
        let merges = self.depth - 1;
        if tokens % (1 << merges) != 0 {
            return Err(PetalError::Config(format!(
                "{tokens} initial tokens cannot be pair-merged {merges} times"
            )));
        }
        Ok(())
    }
}

/// A constructed tape plus the bookkeeping needed to route gradients back
/// to named parameters.
pub struct ForwardGraph<F: Real> {
    pub tape: Tape<F>,
    /// Embedding node, shape `(batch, embed_dim)`, not yet normalized.
    pub output: NodeId,
    /// Leaf node created for each parameter this pass read.
    pub param_nodes: Vec<(ParamId, NodeId)>,
}

/// Called once per injectable linear while a forward graph is built. Gets
/// the layer description, the layer's input node, and the already-built
/// base output node; returns the node to splice into the graph (the base
/// output itself for a pristine model).
pub type LayerHook<'a, F> =
    dyn FnMut(&mut Tape<F>, &LayerSlot, NodeId, NodeId) -> Result<NodeId> + 'a;

struct BlockIds {
    ln1_gamma: ParamId,
    ln1_beta: ParamId,
    ln2_gamma: ParamId,
    ln2_beta: ParamId,
}

pub struct ToyBackbone<F: Real> {
    pub config: ToyBackboneConfig,
    pub store: ParamStore<F>,
    layers: Vec<LayerSlot>,
    patch_embed_weight: ParamId,
    patch_embed_bias: ParamId,
    pos_table: ParamId,
    blocks: Vec<BlockIds>,
    final_gamma: ParamId,
    final_beta: ParamId,
}

const INIT_STD: f64 = 0.02;

impl<F: Real> ToyBackbone<F> {
    pub fn new(config: ToyBackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("positive std");
        let mut store = ParamStore::new();
        let mut layers = Vec::new();

        let init = |store: &mut ParamStore<F>,
                        rng: &mut ChaCha8Rng,
                        name: String,
                        rows: usize,
                        cols: usize|
         -> Result<ParamId> {
            let value =
                Array2::from_shape_fn((rows, cols), |_| F::from_f64(normal.sample(rng)));
            store.add(name, value, true, ParamKind::Base)
        };
        let zeros = |store: &mut ParamStore<F>, name: String, cols: usize| -> Result<ParamId> {
            store.add(name, Array2::zeros((1, cols)), true, ParamKind::Base)
        };
        let ones = |store: &mut ParamStore<F>, name: String, cols: usize| -> Result<ParamId> {
            store.add(name, Array2::ones((1, cols)), true, ParamKind::Base)
        };

        let d = config.dim;
        let patch_embed_weight = init(
            &mut store,
            &mut rng,
            "patch_embed.weight".into(),
            d,
            config.patch_dim(),
        )?;
        let patch_embed_bias = zeros(&mut store, "patch_embed.bias".into(), d)?;
        let pos_table = init(
            &mut store,
            &mut rng,
            "pos_table".into(),
            config.initial_tokens(),
            d,
        )?;

        let mut blocks = Vec::new();
        let mut tokens = config.initial_tokens();
        for i in 0..config.depth {
            let ln1_gamma = ones(&mut store, format!("block{i}.ln1.gamma"), d)?;
            let ln1_beta = zeros(&mut store, format!("block{i}.ln1.beta"), d)?;
            let qkv_w = init(
                &mut store,
                &mut rng,
                format!("block{i}.attn.qkv.weight"),
                3 * config.attn_width,
                d,
            )?;
            let qkv_b = zeros(&mut store, format!("block{i}.attn.qkv.bias"), 3 * config.attn_width)?;
            layers.push(LayerSlot {
                layer_id: format!("block{i}.attn.qkv"),
                site: Site::AttentionQkv,
                weight: qkv_w,
                bias: qkv_b,
                out_dim: 3 * config.attn_width,
                in_dim: d,
                rows_per_sample: tokens,
            });
            let proj_w = init(
                &mut store,
                &mut rng,
                format!("block{i}.attn.proj.weight"),
                d,
                config.attn_width,
            )?;
            let proj_b = zeros(&mut store, format!("block{i}.attn.proj.bias"), d)?;
            layers.push(LayerSlot {
                layer_id: format!("block{i}.attn.proj"),
                site: Site::AttentionProj,
                weight: proj_w,
                bias: proj_b,
                out_dim: d,
                in_dim: config.attn_width,
                rows_per_sample: tokens,
            });
            let ln2_gamma = ones(&mut store, format!("block{i}.ln2.gamma"), d)?;
            let ln2_beta = zeros(&mut store, format!("block{i}.ln2.beta"), d)?;
            let hidden = config.mlp_hidden();
            let fc1_w = init(&mut store, &mut rng, format!("block{i}.mlp.fc1.weight"), hidden, d)?;
            let fc1_b = zeros(&mut store, format!("block{i}.mlp.fc1.bias"), hidden)?;
            layers.push(LayerSlot {
                layer_id: format!("block{i}.mlp.fc1"),
                site: Site::Mlp,
                weight: fc1_w,
                bias: fc1_b,
                out_dim: hidden,
                in_dim: d,
                rows_per_sample: tokens,
            });
            let fc2_w = init(&mut store, &mut rng, format!("block{i}.mlp.fc2.weight"), d, hidden)?;
            let fc2_b = zeros(&mut store, format!("block{i}.mlp.fc2.bias"), d)?;
            layers.push(LayerSlot {
                layer_id: format!("block{i}.mlp.fc2"),
                site: Site::Mlp,
                weight: fc2_w,
                bias: fc2_b,
                out_dim: d,
                in_dim: hidden,
                rows_per_sample: tokens,
            });
            blocks.push(BlockIds {
                ln1_gamma,
                ln1_beta,
                ln2_gamma,
                ln2_beta,
            });
            if i + 1 < config.depth {
                let red_w = init(&mut store, &mut rng, format!("reduce{i}.weight"), d, 2 * d)?;
                let red_b = zeros(&mut store, format!("reduce{i}.bias"), d)?;
                tokens /= 2;
                layers.push(LayerSlot {
                    layer_id: format!("reduce{i}"),
                    site: Site::PatchReduction,
                    weight: red_w,
                    bias: red_b,
                    out_dim: d,
                    in_dim: 2 * d,
                    rows_per_sample: tokens,
                });
            }
        }
        let final_gamma = ones(&mut store, "final_ln.gamma".into(), d)?;
        let final_beta = zeros(&mut store, "final_ln.beta".into(), d)?;
        let head_w = init(&mut store, &mut rng, "feature_head.weight".into(), config.embed_dim, d)?;
        let head_b = zeros(&mut store, "feature_head.bias".into(), config.embed_dim)?;
        layers.push(LayerSlot {
            layer_id: "feature_head".into(),
            site: Site::FeatureHead,
            weight: head_w,
            bias: head_b,
            out_dim: config.embed_dim,
            in_dim: d,
            rows_per_sample: 1,
        });

        Ok(ToyBackbone {
            config,
            store,
            layers,
            patch_embed_weight,
            patch_embed_bias,
            pos_table,
            blocks,
            final_gamma,
            final_beta,
        })
    }

    /// Injectable linears in graph order.
    pub fn layers(&self) -> &[LayerSlot] {
        &self.layers
    }

    pub fn layer_by_id(&self, layer_id: &str) -> Option<&LayerSlot> {
        self.layers.iter().find(|l| l.layer_id == layer_id)
    }

    pub fn layers_at(&self, site: Site) -> impl Iterator<Item = &LayerSlot> {
        self.layers.iter().filter(move |l| l.site == site)
    }

    /// Converts a batch of images to normalized patch rows, shape
    /// `(batch * tokens, patch_dim)`. Images are read as luma and mapped
    /// from [0, 1] to [-1, 1] via (v - 0.5) / 0.5.
    pub fn patch_rows(&self, images: &[ImageBuf]) -> Result<Array2<F>> {
        if images.is_empty() {
            return Err(PetalError::Input("empty image batch".into()));
        }
        let cfg = &self.config;
        let side = cfg.image_size / cfg.patch_size;
        let tokens = cfg.initial_tokens();
        let pdim = cfg.patch_dim();
        let mut rows = Array2::zeros((images.len() * tokens, pdim));
        for (bi, image) in images.iter().enumerate() {
            if image.height() != cfg.image_size || image.width() != cfg.image_size {
                return Err(PetalError::Shape(format!(
                    "image {bi} is {}x{}, expected {}x{}",
                    image.height(),
                    image.width(),
                    cfg.image_size,
                    cfg.image_size
                )));
            }
            let luma = image.luma();
            for py in 0..side {
                for px in 0..side {
                    let token = bi * tokens + py * side + px;
                    for dy in 0..cfg.patch_size {
                        for dx in 0..cfg.patch_size {
                            let v = luma[(py * cfg.patch_size + dy, px * cfg.patch_size + dx)];
                            rows[(token, dy * cfg.patch_size + dx)] =
                                F::from_f64((v - 0.5) / 0.5);
                        }
                    }
                }
            }
        }
        Ok(rows)
    }

    /// Builds the forward tape for a batch of patch rows (see
    /// [`ToyBackbone::patch_rows`]). The hook, when present, is offered
    /// every injectable linear and may splice in extra computation.
    pub fn build_graph(
        &self,
        patch_rows: &Array2<F>,
        mut hook: Option<&mut LayerHook<'_, F>>,
    ) -> Result<ForwardGraph<F>> {
        let cfg = &self.config;
        let tokens0 = cfg.initial_tokens();
        if patch_rows.nrows() == 0 || patch_rows.nrows() % tokens0 != 0 {
            return Err(PetalError::Shape(format!(
                "{} patch rows is not a positive multiple of {tokens0} tokens",
                patch_rows.nrows()
            )));
        }
        if patch_rows.ncols() != cfg.patch_dim() {
            return Err(PetalError::Shape(format!(
                "patch rows are {} wide, expected {}",
                patch_rows.ncols(),
                cfg.patch_dim()
            )));
        }

        let mut tape = Tape::new();
        let mut param_nodes = Vec::new();
        let leaf = |tape: &mut Tape<F>, nodes: &mut Vec<(ParamId, NodeId)>, id: ParamId| {
            let node = tape.leaf(self.store.value(id).clone());
            nodes.push((id, node));
            node
        };

        let x = tape.leaf(patch_rows.clone());
        let pe_w = leaf(&mut tape, &mut param_nodes, self.patch_embed_weight);
        let pe_b = leaf(&mut tape, &mut param_nodes, self.patch_embed_bias);
        let mut t = tape.linear(x, pe_w, Some(pe_b));
        let pos = leaf(&mut tape, &mut param_nodes, self.pos_table);
        t = tape.add_pos(t, pos, tokens0);

        let apply_linear = |tape: &mut Tape<F>,
                                param_nodes: &mut Vec<(ParamId, NodeId)>,
                                hook: &mut Option<&mut LayerHook<'_, F>>,
                                layer_id: &str,
                                x: NodeId|
         -> Result<NodeId> {
            let slot = self
                .layer_by_id(layer_id)
                .expect("layer table covers every graph linear");
            let w = {
                let node = tape.leaf(self.store.value(slot.weight).clone());
                param_nodes.push((slot.weight, node));
                node
            };
            let b = {
                let node = tape.leaf(self.store.value(slot.bias).clone());
                param_nodes.push((slot.bias, node));
                node
            };
            let base = tape.linear(x, w, Some(b));
            match hook {
                Some(h) => h(tape, slot, x, base),
                None => Ok(base),
            }
        };

        let mut tokens = tokens0;
        for (i, block) in self.blocks.iter().enumerate() {
            let g1 = leaf(&mut tape, &mut param_nodes, block.ln1_gamma);
            let b1 = leaf(&mut tape, &mut param_nodes, block.ln1_beta);
            let h = tape.layer_norm(t, g1, b1);
            let qkv = apply_linear(
                &mut tape,
                &mut param_nodes,
                &mut hook,
                &format!("block{i}.attn.qkv"),
                h,
            )?;
            let attn = tape.attention(qkv, cfg.heads, tokens);
            let proj = apply_linear(
                &mut tape,
                &mut param_nodes,
                &mut hook,
                &format!("block{i}.attn.proj"),
                attn,
            )?;
            t = tape.add(t, proj);

            let g2 = leaf(&mut tape, &mut param_nodes, block.ln2_gamma);
            let b2 = leaf(&mut tape, &mut param_nodes, block.ln2_beta);
            let h2 = tape.layer_norm(t, g2, b2);
            let f1 = apply_linear(
                &mut tape,
                &mut param_nodes,
                &mut hook,
                &format!("block{i}.mlp.fc1"),
                h2,
            )?;
            let f1g = tape.gelu(f1);
            let f2 = apply_linear(
                &mut tape,
                &mut param_nodes,
                &mut hook,
                &format!("block{i}.mlp.fc2"),
                f1g,
            )?;
            t = tape.add(t, f2);

            if i + 1 < cfg.depth {
                let merged = tape.merge_token_pairs(t, tokens);
                tokens /= 2;
                t = apply_linear(
                    &mut tape,
                    &mut param_nodes,
                    &mut hook,
                    &format!("reduce{i}"),
                    merged,
                )?;
            }
        }

        let gf = leaf(&mut tape, &mut param_nodes, self.final_gamma);
        let bf = leaf(&mut tape, &mut param_nodes, self.final_beta);
        t = tape.layer_norm(t, gf, bf);
        let pooled = tape.mean_tokens(t, tokens);
        let output = apply_linear(
            &mut tape,
            &mut param_nodes,
            &mut hook,
            "feature_head",
            pooled,
        )?;

        Ok(ForwardGraph {
            tape,
            output,
            param_nodes,
        })
    }

    /// Plain forward pass: images in, embeddings out, no hooks.
    pub fn embed_images(&self, images: &[ImageBuf]) -> Result<Array2<F>> {
        let rows = self.patch_rows(images)?;
        let graph = self.build_graph(&rows, None)?;
        Ok(graph.tape.value(graph.output).clone())
    }
}

/// Repeats per-sample weights so each sample's rows share its weight:
/// `[a, b]` with 3 rows per sample becomes `[a, a, a, b, b, b]`.
pub fn repeat_per_sample<F: Real>(per_sample: &Array1<F>, rows_per_sample: usize) -> Array1<F> {
    let mut out = Array1::zeros(per_sample.len() * rows_per_sample);
    for (i, &v) in per_sample.iter().enumerate() {
        for j in 0..rows_per_sample {
            out[i * rows_per_sample + j] = v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_config() -> ToyBackboneConfig {
        ToyBackboneConfig {
            image_size: 32,
            patch_size: 8,
            dim: 12,
            depth: 2,
            heads: 2,
            attn_width: 12,
            mlp_ratio: 2.0,
            embed_dim: 16,
            seed: 7,
        }
    }

    fn random_images(count: usize, size: usize, seed: u64) -> Vec<ImageBuf> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let mut img = ImageBuf::new(1, size, size).unwrap();
                for y in 0..size {
                    for x in 0..size {
                        img.set(0, y, x, rng.random::<f32>());
                    }
                }
                img
            })
            .collect()
    }

    #[test]
    fn config_validation_catches_bad_shapes() {
        let mut c = tiny_config();
        c.patch_size = 7;
        assert!(matches!(c.validate(), Err(PetalError::Config(_))));

        let mut c = tiny_config();
        c.heads = 5;
        assert!(matches!(c.validate(), Err(PetalError::Config(_))));

        let mut c = tiny_config();
        c.depth = 1;
        assert!(matches!(c.validate(), Err(PetalError::Config(_))));

        // 16 tokens survive at most 4 merges: depth 6 needs 32.
        let mut c = tiny_config();
        c.depth = 6;
        assert!(matches!(c.validate(), Err(PetalError::Config(_))));

        assert!(tiny_config().validate().is_ok());
        assert!(ToyBackboneConfig::default().validate().is_ok());
    }

    #[test]
    fn layer_table_lists_expected_ids_in_graph_order() {
        let model = ToyBackbone::<f32>::new(tiny_config()).unwrap();
        let ids: Vec<&str> = model.layers().iter().map(|l| l.layer_id.as_str()).collect();
        assert_eq!(
            ids,
            vec![
                "block0.attn.qkv",
                "block0.attn.proj",
                "block0.mlp.fc1",
                "block0.mlp.fc2",
                "reduce0",
                "block1.attn.qkv",
                "block1.attn.proj",
                "block1.mlp.fc1",
                "block1.mlp.fc2",
                "feature_head",
            ]
        );
        let qkv = model.layer_by_id("block0.attn.qkv").unwrap();
        assert_eq!((qkv.out_dim, qkv.in_dim), (36, 12));
        assert_eq!(qkv.rows_per_sample, 16);
        let reduce = model.layer_by_id("reduce0").unwrap();
        assert_eq!((reduce.out_dim, reduce.in_dim), (12, 24));
        assert_eq!(reduce.rows_per_sample, 8);
        let head = model.layer_by_id("feature_head").unwrap();
        assert_eq!((head.out_dim, head.in_dim), (16, 12));
        assert_eq!(head.rows_per_sample, 1);
    }

    #[test]
    fn same_seed_reconstruction_is_identical() {
        let a = ToyBackbone::<f32>::new(tiny_config()).unwrap();
        let b = ToyBackbone::<f32>::new(tiny_config()).unwrap();
        assert_eq!(a.store.len(), b.store.len());
        for ((_, ea), (_, eb)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(ea.name, eb.name);
            assert_eq!(ea.value, eb.value, "param {} must match", ea.name);
        }
        let mut other_seed = tiny_config();
        other_seed.seed = 8;
        let c = ToyBackbone::<f32>::new(other_seed).unwrap();
        let names_match = a
            .store
            .iter()
            .zip(c.store.iter())
            .all(|((_, ea), (_, ec))| ea.name == ec.name);
        assert!(names_match, "layer ids are config-stable, not seed-dependent");
        let w_a = a.store.value(a.patch_embed_weight);
        let w_c = c.store.value(c.patch_embed_weight);
        assert_ne!(w_a, w_c, "different seeds draw different weights");
    }

    #[test]
    fn forward_emits_finite_normalizable_embeddings() {
        let model = ToyBackbone::<f32>::new(tiny_config()).unwrap();
        let images = random_images(3, 32, 11);
        let emb = model.embed_images(&images).unwrap();
        assert_eq!(emb.dim(), (3, 16));
        for row in emb.rows() {
            let norm: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!(norm.is_finite() && norm > 0.0, "embedding norm {norm}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let model = ToyBackbone::<f64>::new(tiny_config()).unwrap();
        let images = random_images(2, 32, 13);
        let a = model.embed_images(&images).unwrap();
        let b = model.embed_images(&images).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn each_sample_is_independent_of_its_batch() {
        let model = ToyBackbone::<f64>::new(tiny_config()).unwrap();
        let images = random_images(4, 32, 17);
        let batched = model.embed_images(&images).unwrap();
        for (i, img) in images.iter().enumerate() {
            let solo = model.embed_images(std::slice::from_ref(img)).unwrap();
            for (a, b) in solo.row(0).iter().zip(batched.row(i).iter()) {
                assert!(
                    (a - b).abs() <= 1e-9 * (1.0 + b.abs()),
                    "sample {i}: solo {a} vs batched {b}"
                );
            }
        }
    }

    #[test]
    fn patch_rows_map_pixels_to_centered_range() {
        let model = ToyBackbone::<f64>::new(tiny_config()).unwrap();
        let mut img = ImageBuf::new(1, 32, 32).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                img.set(0, y, x, 1.0);
            }
        }
        img.set(0, 0, 0, 0.0);
        img.set(0, 0, 1, 0.25);
        let rows = model.patch_rows(std::slice::from_ref(&img)).unwrap();
        assert_eq!(rows.dim(), (16, 64));
        assert_eq!(rows[(0, 0)], -1.0);
        assert_eq!(rows[(0, 1)], -0.5);
        assert_eq!(rows[(0, 2)], 1.0);
        assert!(rows.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn wrong_image_size_is_a_shape_error() {
        let model = ToyBackbone::<f32>::new(tiny_config()).unwrap();
        let images = random_images(1, 16, 3);
        assert!(matches!(
            model.embed_images(&images),
            Err(PetalError::Shape(_))
        ));
    }

    #[test]
    fn hook_sees_every_injectable_layer_once_in_order() {
        let model = ToyBackbone::<f32>::new(tiny_config()).unwrap();
        let rows = model.patch_rows(&random_images(2, 32, 19)).unwrap();
        let mut seen: Vec<String> = Vec::new();
        let mut hook = |_tape: &mut Tape<f32>,
                        slot: &LayerSlot,
                        _x: NodeId,
                        base: NodeId|
         -> Result<NodeId> {
            seen.push(slot.layer_id.clone());
            Ok(base)
        };
        let graph = model.build_graph(&rows, Some(&mut hook)).unwrap();
        let expected: Vec<String> =
            model.layers().iter().map(|l| l.layer_id.clone()).collect();
        assert_eq!(seen, expected);
        assert_eq!(graph.tape.value(graph.output).dim(), (2, 16));
    }

    #[test]
    fn identity_hook_matches_plain_forward() {
        let model = ToyBackbone::<f64>::new(tiny_config()).unwrap();
        let rows = model.patch_rows(&random_images(2, 32, 23)).unwrap();
        let plain = model.build_graph(&rows, None).unwrap();
        let mut hook =
            |_t: &mut Tape<f64>, _s: &LayerSlot, _x: NodeId, base: NodeId| -> Result<NodeId> {
                Ok(base)
            };
        let hooked = model.build_graph(&rows, Some(&mut hook)).unwrap();
        assert_eq!(
            plain.tape.value(plain.output),
            hooked.tape.value(hooked.output)
        );
    }

    #[test]
    fn store_truncate_protects_base_entries() {
        let mut model = ToyBackbone::<f32>::new(tiny_config()).unwrap();
        let base_len = model.store.len();
        let id = model
            .store
            .add(
                "graft.down",
                Array2::zeros((2, 12)),
                true,
                ParamKind::Adapter,
            )
            .unwrap();
        assert_eq!(id.0, base_len);
        assert!(model.store.truncate(base_len).is_ok());
        assert_eq!(model.store.len(), base_len);
        assert!(matches!(
            model.store.truncate(base_len - 1),
            Err(PetalError::State(_))
        ));
    }

    #[test]
    fn trainable_count_walk_matches_manual_sum() {
        let model = ToyBackbone::<f32>::new(tiny_config()).unwrap();
        let manual: usize = model.store.iter().map(|(_, e)| e.value.len()).sum();
        assert_eq!(model.store.count_trainable(), manual);
        let mut frozen = model;
        let ids: Vec<ParamId> = frozen.store.iter().map(|(id, _)| id).collect();
        for id in ids {
            frozen.store.set_trainable(id, false);
        }
        assert_eq!(frozen.store.count_trainable(), 0);
    }

    #[test]
    fn duplicate_param_names_are_rejected() {
        let mut store = ParamStore::<f32>::new();
        store
            .add("w", Array2::zeros((2, 2)), true, ParamKind::Base)
            .unwrap();
        assert!(matches!(
            store.add("w", Array2::zeros((1, 1)), true, ParamKind::Base),
            Err(PetalError::State(_))
        ));
    }

    #[test]
    fn repeat_per_sample_expands_in_block_order() {
        let w = Array1::from_vec(vec![1.0f64, 2.0]);
        let r = repeat_per_sample(&w, 3);
        assert_eq!(r.to_vec(), vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    }
}
