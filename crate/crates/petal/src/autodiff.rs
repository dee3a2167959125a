//! Minimal reverse-mode differentiation over dense 2-d arrays.
//!
//! The engine is a flat tape: builder methods compute forward values
//! eagerly and record just enough context to run the chain rule backwards.
//! Everything is generic over [`Real`] so the same graph code runs at f32
//! for training and at f64 for finite-difference verification.
//!
//! Token-structured ops (attention, pooling, token merging) treat a matrix
//! of shape `(samples * tokens, dim)` as per-sample blocks of `tokens`
//! consecutive rows. Batch entries never mix, which keeps results
//! independent of batch composition.
//!
//! Shape checks are assertions: the tape is an internal engine and public
//! entry points validate their inputs before building graphs.

use std::fmt::{Debug, Display};

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, NumAssign};

/// Floating-point scalar the engine can run on.
pub trait Real:
    Float + NumAssign + ScalarOperand + LinalgScalar + Display + Debug + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> f64 {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// `a @ b` for arbitrary views.
pub fn matmul<F: Real>(a: ArrayView2<F>, b: ArrayView2<F>) -> Array2<F> {
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    general_mat_mul(F::one(), &a, &b, F::zero(), &mut out);
    out
}

fn col_sums<F: Real>(g: &Array2<F>) -> Array2<F> {
    g.sum_axis(Axis(0)).insert_axis(Axis(0))
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

/// Margin behavior for [`Tape::margin_adjust`].
///
/// `additive_angle = true` adds the margin to the angle (target logit
/// `scale * cos(acos(c) + margin)`); otherwise the margin is subtracted
/// from the cosine (target logit `scale * (c - margin)`). Cosines are
/// clamped away from +-1 by `COS_CLAMP_EPS` before `acos`.
///
/// The angle path switches to the linear fallback `c - margin * sin(margin)`
/// once `c <= -cos(margin)`, i.e. once the shifted angle would pass pi where
/// the cosine turns around. The fallback sits below the main branch and
/// keeps the penalty monotone in both the margin and the cosine.
#[derive(Clone, Copy, Debug)]
pub struct MarginSpec<F> {
    pub additive_angle: bool,
    pub margin: F,
    pub scale: F,
}

/// Clamp distance from +-1 applied before `acos`.
pub const COS_CLAMP_EPS: f64 = 1e-7;

const LAYER_NORM_EPS: f64 = 1e-5;

enum Op<F: Real> {
    Leaf,
    /// `y = x @ w^T (+ b)`, `w: (m, n)`, `b: (1, m)`.
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    /// Adds a `(tokens, d)` table to every per-sample block of rows.
    AddPos {
        x: NodeId,
        pos: NodeId,
        tokens: usize,
    },
    /// Multiplies row `i` by the constant `weights[i]` (no grad to weights).
    ScaleRows {
        x: NodeId,
        weights: Array1<F>,
    },
    Gelu {
        x: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Array2<F>,
        inv_sigma: Array1<F>,
    },
    /// Multi-head self-attention over per-sample token blocks. Input is the
    /// fused `(rows, 3d)` qkv activation; cached softmax matrices are stored
    /// per `(sample, head)`.
    Attention {
        qkv: NodeId,
        heads: usize,
        tokens: usize,
        softmax: Vec<Array2<F>>,
    },
    /// Concatenates adjacent token pairs: `(p*t, d)` -> `(p*t/2, 2d)`.
    MergeTokenPairs {
        x: NodeId,
        tokens: usize,
    },
    /// Mean over each sample's token rows: `(p*t, d)` -> `(p, d)`.
    MeanTokens {
        x: NodeId,
        tokens: usize,
    },
    /// Elementwise product with a fixed mask (inverted-dropout style; the
    /// keep scale is baked into the mask by the caller).
    Dropout {
        x: NodeId,
        mask: Array2<F>,
    },
    /// L2-normalizes each row.
    RowNormalize {
        x: NodeId,
        inv_norm: Array1<F>,
    },
    /// `c = a @ b^T`.
    MatmulNT {
        a: NodeId,
        b: NodeId,
    },
    MarginAdjust {
        cos: NodeId,
        labels: Vec<usize>,
        spec: MarginSpec<F>,
    },
    CrossEntropyMean {
        logits: NodeId,
        labels: Vec<usize>,
        softmax: Array2<F>,
    },
    /// `y = sum(x * weights)`, a fixed-weight scalar readout.
    WeightedSum {
        x: NodeId,
        weights: Array2<F>,
    },
}

struct Node<F: Real> {
    value: Array2<F>,
    op: Op<F>,
}

/// Gradients for every node of a tape, indexed by [`NodeId`].
pub struct Grads<F: Real> {
    by_node: Vec<Option<Array2<F>>>,
}

impl<F: Real> Grads<F> {
    /// Gradient of the loss w.r.t. the node's value, if any path reached it.
    pub fn get(&self, id: NodeId) -> Option<&Array2<F>> {
        self.by_node[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Array2<F>> {
        self.by_node[id.0].take()
    }
}

#[derive(Default)]
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<F> {
        &self.nodes[id.0].value
    }

    /// Value of a `(1, 1)` node.
    pub fn scalar(&self, id: NodeId) -> F {
        let v = self.value(id);
        assert_eq!(v.dim(), (1, 1), "scalar() on non-scalar node");
        v[(0, 0)]
    }

    /// Data or parameter entry point.
    pub fn leaf(&mut self, value: Array2<F>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        assert_eq!(xv.ncols(), wv.ncols(), "linear: x/w inner dims differ");
        let mut y = matmul(xv.view(), wv.t());
        if let Some(b) = b {
            let bv = &self.nodes[b.0].value;
            assert_eq!(bv.dim(), (1, wv.nrows()), "linear: bias shape");
            y += bv;
        }
        self.push(y, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.dim(), bv.dim(), "add: shape mismatch");
        let y = av + bv;
        self.push(y, Op::Add { a, b })
    }

    pub fn add_pos(&mut self, x: NodeId, pos: NodeId, tokens: usize) -> NodeId {
        let (xv, pv) = (&self.nodes[x.0].value, &self.nodes[pos.0].value);
        assert_eq!(pv.nrows(), tokens, "add_pos: table rows != tokens");
        assert_eq!(pv.ncols(), xv.ncols(), "add_pos: width mismatch");
        assert_eq!(xv.nrows() % tokens, 0, "add_pos: rows not a token multiple");
        let mut y = xv.clone();
        for mut block in y.exact_chunks_mut((tokens, xv.ncols())) {
            block += pv;
        }
        self.push(y, Op::AddPos { x, pos, tokens })
    }

    pub fn scale_rows(&mut self, x: NodeId, weights: Array1<F>) -> NodeId {
        let xv = &self.nodes[x.0].value;
        assert_eq!(weights.len(), xv.nrows(), "scale_rows: weight count");
        let mut y = xv.clone();
        for (mut row, &w) in y.rows_mut().into_iter().zip(weights.iter()) {
            row *= w;
        }
        self.push(y, Op::ScaleRows { x, weights })
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let y = self.nodes[x.0].value.mapv(gelu_value);
        self.push(y, Op::Gelu { x })
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let (gv, bv) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        let d = xv.ncols();
        assert_eq!(gv.dim(), (1, d), "layer_norm: gamma shape");
        assert_eq!(bv.dim(), (1, d), "layer_norm: beta shape");
        let eps = F::from_f64(LAYER_NORM_EPS);
        let inv_d = F::from_f64(1.0 / d as f64);
        let mut xhat = Array2::zeros(xv.dim());
        let mut inv_sigma = Array1::zeros(xv.nrows());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() * inv_d;
            let mut var = F::zero();
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var *= inv_d;
            let inv_s = (var + eps).sqrt().recip();
            inv_sigma[i] = inv_s;
            for (j, &v) in row.iter().enumerate() {
                xhat[(i, j)] = (v - mean) * inv_s;
            }
        }
        let mut y = Array2::zeros(xv.dim());
        for i in 0..y.nrows() {
            for j in 0..d {
                y[(i, j)] = xhat[(i, j)] * gv[(0, j)] + bv[(0, j)];
            }
        }
        self.push(
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_sigma,
            },
        )
    }

    pub fn attention(&mut self, qkv: NodeId, heads: usize, tokens: usize) -> NodeId {
        let v = &self.nodes[qkv.0].value;
        let rows = v.nrows();
        assert_eq!(rows % tokens, 0, "attention: rows not a token multiple");
        assert_eq!(v.ncols() % 3, 0, "attention: qkv width not 3*d");
        let d = v.ncols() / 3;
        assert_eq!(d % heads, 0, "attention: d not divisible by heads");
        let dh = d / heads;
        let samples = rows / tokens;
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let mut out = Array2::zeros((rows, d));
        let mut cached = Vec::with_capacity(samples * heads);
        for si in 0..samples {
            let r0 = si * tokens;
            for h in 0..heads {
                let c0 = h * dh;
                let q = v.slice(s![r0..r0 + tokens, c0..c0 + dh]);
                let k = v.slice(s![r0..r0 + tokens, d + c0..d + c0 + dh]);
                let val = v.slice(s![r0..r0 + tokens, 2 * d + c0..2 * d + c0 + dh]);
                let mut scores = matmul(q, k.t());
                scores *= scale;
                let attn = softmax_rows(&scores);
                let o = matmul(attn.view(), val);
                out.slice_mut(s![r0..r0 + tokens, c0..c0 + dh]).assign(&o);
                cached.push(attn);
            }
        }
        self.push(
            out,
            Op::Attention {
                qkv,
                heads,
                tokens,
                softmax: cached,
            },
        )
    }

    pub fn merge_token_pairs(&mut self, x: NodeId, tokens: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let (rows, d) = xv.dim();
        assert_eq!(rows % tokens, 0, "merge: rows not a token multiple");
        assert_eq!(tokens % 2, 0, "merge: odd token count");
        let samples = rows / tokens;
        let ot = tokens / 2;
        let mut y = Array2::zeros((samples * ot, 2 * d));
        for si in 0..samples {
            for j in 0..ot {
                let src = si * tokens + 2 * j;
                let dst = si * ot + j;
                y.slice_mut(s![dst, ..d]).assign(&xv.row(src));
                y.slice_mut(s![dst, d..]).assign(&xv.row(src + 1));
            }
        }
        self.push(y, Op::MergeTokenPairs { x, tokens })
    }

    pub fn mean_tokens(&mut self, x: NodeId, tokens: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let (rows, d) = xv.dim();
        assert_eq!(rows % tokens, 0, "mean_tokens: rows not a token multiple");
        let samples = rows / tokens;
        let inv_t = F::from_f64(1.0 / tokens as f64);
        let mut y = Array2::zeros((samples, d));
        for si in 0..samples {
            let block = xv.slice(s![si * tokens..(si + 1) * tokens, ..]);
            let mean = block.sum_axis(Axis(0)) * inv_t;
            y.row_mut(si).assign(&mean);
        }
        self.push(y, Op::MeanTokens { x, tokens })
    }

    pub fn dropout(&mut self, x: NodeId, mask: Array2<F>) -> NodeId {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.dim(), mask.dim(), "dropout: mask shape");
        let y = xv * &mask;
        self.push(y, Op::Dropout { x, mask })
    }

    /// L2-normalizes rows. Callers that can see degenerate inputs must
    /// reject near-zero rows before building this node; the internal guard
    /// only prevents division by exactly zero.
    pub fn row_normalize(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let floor = F::from_f64(1e-300).max(F::min_positive_value());
        let mut inv_norm = Array1::zeros(xv.nrows());
        let mut y = xv.clone();
        for (i, mut row) in y.rows_mut().into_iter().enumerate() {
            let mut sq = F::zero();
            for &v in row.iter() {
                sq += v * v;
            }
            let inv = sq.sqrt().max(floor).recip();
            inv_norm[i] = inv;
            row *= inv;
        }
        self.push(y, Op::RowNormalize { x, inv_norm })
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.ncols(), bv.ncols(), "matmul_nt: inner dims differ");
        let y = matmul(av.view(), bv.t());
        self.push(y, Op::MatmulNT { a, b })
    }

    pub fn margin_adjust(&mut self, cos: NodeId, labels: Vec<usize>, spec: MarginSpec<F>) -> NodeId {
        let cv = &self.nodes[cos.0].value;
        assert_eq!(labels.len(), cv.nrows(), "margin_adjust: label count");
        assert!(
            labels.iter().all(|&y| y < cv.ncols()),
            "margin_adjust: label out of range"
        );
        let mut out = cv * spec.scale;
        for (i, &y) in labels.iter().enumerate() {
            let c = cv[(i, y)];
            out[(i, y)] = spec.scale * margin_target_value(c, spec);
        }
        self.push(out, Op::MarginAdjust { cos, labels, spec })
    }

    pub fn cross_entropy_mean(&mut self, logits: NodeId, labels: Vec<usize>) -> NodeId {
        let lv = &self.nodes[logits.0].value;
        let (p, c) = lv.dim();
        assert_eq!(labels.len(), p, "cross_entropy: label count");
        assert!(
            labels.iter().all(|&y| y < c),
            "cross_entropy: label out of range"
        );
        let mut softmax = Array2::zeros((p, c));
        let mut total = F::zero();
        for (i, row) in lv.rows().into_iter().enumerate() {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut denom = F::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                softmax[(i, j)] = e;
                denom += e;
            }
            let inv = denom.recip();
            for j in 0..c {
                softmax[(i, j)] *= inv;
            }
            total += denom.ln() + m - row[labels[i]];
        }
        let loss = total * F::from_f64(1.0 / p as f64);
        let value = Array2::from_elem((1, 1), loss);
        self.push(
            value,
            Op::CrossEntropyMean {
                logits,
                labels,
                softmax,
            },
        )
    }

    pub fn weighted_sum(&mut self, x: NodeId, weights: Array2<F>) -> NodeId {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.dim(), weights.dim(), "weighted_sum: shape mismatch");
        let mut total = F::zero();
        for (a, b) in xv.iter().zip(weights.iter()) {
            total += *a * *b;
        }
        let value = Array2::from_elem((1, 1), total);
        self.push(value, Op::WeightedSum { x, weights })
    }

    /// Reverse pass from a `(1, 1)` loss node. Returns per-node gradients;
    /// map leaf node ids back to parameters on the caller side.
    pub fn backward(&self, root: NodeId) -> Grads<F> {
        assert_eq!(
            self.nodes[root.0].value.dim(),
            (1, 1),
            "backward: root must be scalar"
        );
        let mut by_node: Vec<Option<Array2<F>>> = vec![None; self.nodes.len()];
        by_node[root.0] = Some(Array2::from_elem((1, 1), F::one()));
        for id in (0..=root.0).rev() {
            let Some(g) = by_node[id].clone() else {
                continue;
            };
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Linear { x, w, b } => {
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    acc(&mut by_node, *x, matmul(g.view(), wv.view()));
                    acc(&mut by_node, *w, matmul(g.t(), xv.view()));
                    if let Some(b) = b {
                        acc(&mut by_node, *b, col_sums(&g));
                    }
                }
                Op::Add { a, b } => {
                    acc(&mut by_node, *a, g.clone());
                    acc(&mut by_node, *b, g);
                }
                Op::AddPos { x, pos, tokens } => {
                    let d = g.ncols();
                    let mut dpos = Array2::zeros((*tokens, d));
                    for block in g.exact_chunks((*tokens, d)) {
                        dpos += &block;
                    }
                    acc(&mut by_node, *pos, dpos);
                    acc(&mut by_node, *x, g);
                }
                Op::ScaleRows { x, weights } => {
                    let mut dx = g;
                    for (mut row, &w) in dx.rows_mut().into_iter().zip(weights.iter()) {
                        row *= w;
                    }
                    acc(&mut by_node, *x, dx);
                }
                Op::Gelu { x } => {
                    let xv = &self.nodes[x.0].value;
                    let mut dx = g;
                    dx.zip_mut_with(xv, |gv, &v| *gv *= gelu_derivative(v));
                    acc(&mut by_node, *x, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_sigma,
                } => {
                    let gv = &self.nodes[gamma.0].value;
                    let d = g.ncols();
                    let inv_d = F::from_f64(1.0 / d as f64);
                    let mut dx = Array2::zeros(g.dim());
                    let mut dgamma = Array2::zeros((1, d));
                    let mut dbeta = Array2::zeros((1, d));
                    for i in 0..g.nrows() {
                        let mut m1 = F::zero();
                        let mut m2 = F::zero();
                        for j in 0..d {
                            let gh = g[(i, j)] * gv[(0, j)];
                            m1 += gh;
                            m2 += gh * xhat[(i, j)];
                            dgamma[(0, j)] += g[(i, j)] * xhat[(i, j)];
                            dbeta[(0, j)] += g[(i, j)];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for j in 0..d {
                            let gh = g[(i, j)] * gv[(0, j)];
                            dx[(i, j)] = (gh - m1 - xhat[(i, j)] * m2) * inv_sigma[i];
                        }
                    }
                    acc(&mut by_node, *x, dx);
                    acc(&mut by_node, *gamma, dgamma);
                    acc(&mut by_node, *beta, dbeta);
                }
                Op::Attention {
                    qkv,
                    heads,
                    tokens,
                    softmax,
                } => {
                    let v = &self.nodes[qkv.0].value;
                    let d = v.ncols() / 3;
                    let dh = d / heads;
                    let samples = v.nrows() / tokens;
                    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
                    let mut dqkv = Array2::zeros(v.dim());
                    for si in 0..samples {
                        let r0 = si * tokens;
                        for h in 0..*heads {
                            let c0 = h * dh;
                            let attn = &softmax[si * heads + h];
                            let q = v.slice(s![r0..r0 + *tokens, c0..c0 + dh]);
                            let k = v.slice(s![r0..r0 + *tokens, d + c0..d + c0 + dh]);
                            let val =
                                v.slice(s![r0..r0 + *tokens, 2 * d + c0..2 * d + c0 + dh]);
                            let gh = g.slice(s![r0..r0 + *tokens, c0..c0 + dh]);
                            let dval = matmul(attn.t(), gh);
                            let dattn = matmul(gh, val.t());
                            // Softmax jacobian, rowwise.
                            let mut dscores = Array2::zeros(dattn.dim());
                            for t in 0..*tokens {
                                let mut dot = F::zero();
                                for u in 0..*tokens {
                                    dot += dattn[(t, u)] * attn[(t, u)];
                                }
                                for u in 0..*tokens {
                                    dscores[(t, u)] = attn[(t, u)] * (dattn[(t, u)] - dot);
                                }
                            }
                            dscores *= scale;
                            let dq = matmul(dscores.view(), k);
                            let dk = matmul(dscores.t(), q);
                            let mut dq_slot =
                                dqkv.slice_mut(s![r0..r0 + *tokens, c0..c0 + dh]);
                            dq_slot += &dq;
                            let mut dk_slot =
                                dqkv.slice_mut(s![r0..r0 + *tokens, d + c0..d + c0 + dh]);
                            dk_slot += &dk;
                            let mut dv_slot = dqkv
                                .slice_mut(s![r0..r0 + *tokens, 2 * d + c0..2 * d + c0 + dh]);
                            dv_slot += &dval;
                        }
                    }
                    acc(&mut by_node, *qkv, dqkv);
                }
                Op::MergeTokenPairs { x, tokens } => {
                    let d = self.nodes[x.0].value.ncols();
                    let ot = tokens / 2;
                    let samples = g.nrows() / ot;
                    let mut dx = Array2::zeros((samples * tokens, d));
                    for si in 0..samples {
                        for j in 0..ot {
                            let src = si * ot + j;
                            let dst = si * tokens + 2 * j;
                            dx.row_mut(dst).assign(&g.slice(s![src, ..d]));
                            dx.row_mut(dst + 1).assign(&g.slice(s![src, d..]));
                        }
                    }
                    acc(&mut by_node, *x, dx);
                }
                Op::MeanTokens { x, tokens } => {
                    let inv_t = F::from_f64(1.0 / *tokens as f64);
                    let (samples, d) = g.dim();
                    let mut dx = Array2::zeros((samples * tokens, d));
                    for si in 0..samples {
                        let grow = g.row(si).mapv(|v| v * inv_t);
                        for t in 0..*tokens {
                            dx.row_mut(si * tokens + t).assign(&grow);
                        }
                    }
                    acc(&mut by_node, *x, dx);
                }
                Op::Dropout { x, mask } => {
                    acc(&mut by_node, *x, &g * mask);
                }
                Op::RowNormalize { x, inv_norm } => {
                    let yv = &self.nodes[id].value;
                    let mut dx = Array2::zeros(g.dim());
                    for i in 0..g.nrows() {
                        let mut dot = F::zero();
                        for j in 0..g.ncols() {
                            dot += g[(i, j)] * yv[(i, j)];
                        }
                        for j in 0..g.ncols() {
                            dx[(i, j)] = (g[(i, j)] - yv[(i, j)] * dot) * inv_norm[i];
                        }
                    }
                    acc(&mut by_node, *x, dx);
                }
                Op::MatmulNT { a, b } => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    acc(&mut by_node, *a, matmul(g.view(), bv.view()));
                    acc(&mut by_node, *b, matmul(g.t(), av.view()));
                }
                Op::MarginAdjust { cos, labels, spec } => {
                    let cv = &self.nodes[cos.0].value;
                    let mut dcos = &g * spec.scale;
                    for (i, &y) in labels.iter().enumerate() {
                        dcos[(i, y)] =
                            g[(i, y)] * spec.scale * margin_target_derivative(cv[(i, y)], *spec);
                    }
                    acc(&mut by_node, *cos, dcos);
                }
                Op::CrossEntropyMean {
                    logits,
                    labels,
                    softmax,
                } => {
                    let gs = g[(0, 0)] * F::from_f64(1.0 / labels.len() as f64);
                    let mut dl = softmax * gs;
                    for (i, &y) in labels.iter().enumerate() {
                        dl[(i, y)] -= gs;
                    }
                    acc(&mut by_node, *logits, dl);
                }
                Op::WeightedSum { x, weights } => {
                    acc(&mut by_node, *x, weights * g[(0, 0)]);
                }
            }
        }
        Grads { by_node }
    }
}

fn acc<F: Real>(slots: &mut [Option<Array2<F>>], id: NodeId, delta: Array2<F>) {
    match &mut slots[id.0] {
        Some(existing) => *existing += &delta,
        slot @ None => *slot = Some(delta),
    }
}

fn softmax_rows<F: Real>(scores: &Array2<F>) -> Array2<F> {
    let mut out = Array2::zeros(scores.dim());
    for (i, row) in scores.rows().into_iter().enumerate() {
        let m = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut denom = F::zero();
        for (j, &v) in row.iter().enumerate() {
            let e = (v - m).exp();
            out[(i, j)] = e;
            denom += e;
        }
        let inv = denom.recip();
        for j in 0..row.len() {
            out[(i, j)] *= inv;
        }
    }
    out
}

/// Tanh-form GELU; smooth, so finite differences agree with the analytic
/// derivative everywhere.
fn gelu_value<F: Real>(x: F) -> F {
    let c = F::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = F::from_f64(0.044715);
    let u = c * (x + a * x * x * x);
    let half = F::from_f64(0.5);
    half * x * (F::one() + u.tanh())
}

fn gelu_derivative<F: Real>(x: F) -> F {
    let c = F::from_f64(0.7978845608028654);
    let a = F::from_f64(0.044715);
    let three = F::from_f64(3.0);
    let half = F::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * a * x * x)
}

fn clamp_cos<F: Real>(c: F) -> F {
    let lim = F::one() - F::from_f64(COS_CLAMP_EPS);
    c.min(lim).max(-lim)
}

/// Target-class logit before the scale factor.
pub(crate) fn margin_target_value<F: Real>(c: F, spec: MarginSpec<F>) -> F {
    if spec.additive_angle {
        let c = clamp_cos(c);
        if c > -spec.margin.cos() {
            (c.acos() + spec.margin).cos()
        } else {
            c - spec.margin * spec.margin.sin()
        }
    } else {
        c - spec.margin
    }
}

fn margin_target_derivative<F: Real>(c: F, spec: MarginSpec<F>) -> F {
    if spec.additive_angle {
        let lim = F::one() - F::from_f64(COS_CLAMP_EPS);
        if c >= lim || c <= -lim {
            return F::zero();
        }
        if c <= -spec.margin.cos() {
            // Linear fallback region.
            return F::one();
        }
        // d/dc cos(acos(c) + m) = cos(m) + c sin(m) / sqrt(1 - c^2)
        spec.margin.cos() + c * spec.margin.sin() / (F::one() - c * c).sqrt()
    } else {
        F::one()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        use rand_distr::{Distribution, StandardNormal};
        Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
    }

    /// Central finite differences of `f` at `x0`, elementwise.
    fn fd_grad(f: &dyn Fn(&Array2<f64>) -> f64, x0: &Array2<f64>, h: f64) -> Array2<f64> {
        let mut g = Array2::zeros(x0.dim());
        for idx in 0..x0.len() {
            let (r, c) = (idx / x0.ncols(), idx % x0.ncols());
            let mut hi = x0.clone();
            hi[(r, c)] += h;
            let mut lo = x0.clone();
            lo[(r, c)] -= h;
            g[(r, c)] = (f(&hi) - f(&lo)) / (2.0 * h);
        }
        g
    }

    fn assert_close(analytic: &Array2<f64>, numeric: &Array2<f64>, tol: f64) {
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            let err = (a - n).abs() / f64::max(1.0, f64::max(a.abs(), n.abs()));
            assert!(
                err <= tol,
                "gradient mismatch: analytic {a} vs numeric {n} (rel {err:.3e})"
            );
        }
    }

    /// Runs `build` twice: once to get the analytic input gradient, once per
    /// perturbed entry for finite differences.
    fn check_input_grad(
        build: &dyn Fn(&mut Tape<f64>, NodeId) -> NodeId,
        x0: &Array2<f64>,
        tol: f64,
    ) {
        let f = |x: &Array2<f64>| {
            let mut tape = Tape::new();
            let leaf = tape.leaf(x.clone());
            let out = build(&mut tape, leaf);
            tape.scalar(out)
        };
        let mut tape = Tape::new();
        let leaf = tape.leaf(x0.clone());
        let out = build(&mut tape, leaf);
        let grads = tape.backward(out);
        let analytic = grads.get(leaf).expect("input grad missing");
        let numeric = fd_grad(&f, x0, 1e-5);
        assert_close(analytic, &numeric, tol);
    }

    fn readout(tape: &mut Tape<f64>, x: NodeId, seed: u64) -> NodeId {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = tape.value(x).dim();
        let w = Array2::from_shape_fn(dim, |_| rng.random::<f64>() - 0.5);
        tape.weighted_sum(x, w)
    }

    #[test]
    fn linear_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = randn(&mut rng, 5, 4);
        let w0 = randn(&mut rng, 3, 4);
        let b0 = randn(&mut rng, 1, 3);

        // d/dx
        let w = w0.clone();
        let b = b0.clone();
        check_input_grad(
            &move |tape, leaf| {
                let wn = tape.leaf(w.clone());
                let bn = tape.leaf(b.clone());
                let y = tape.linear(leaf, wn, Some(bn));
                readout(tape, y, 7)
            },
            &x0,
            1e-7,
        );

        // d/dw and d/db via leaf-first construction
        let x = x0.clone();
        let b = b0.clone();
        check_input_grad(
            &move |tape, leaf| {
                let xn = tape.leaf(x.clone());
                let bn = tape.leaf(b.clone());
                let y = tape.linear(xn, leaf, Some(bn));
                readout(tape, y, 7)
            },
            &w0,
            1e-7,
        );
        let x = x0.clone();
        let w = w0.clone();
        check_input_grad(
            &move |tape, leaf| {
                let xn = tape.leaf(x.clone());
                let wn = tape.leaf(w.clone());
                let y = tape.linear(xn, wn, Some(leaf));
                readout(tape, y, 7)
            },
            &b0,
            1e-7,
        );
    }

    #[test]
    fn elementwise_and_row_op_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = randn(&mut rng, 6, 5);

        check_input_grad(
            &|tape, leaf| {
                let y = tape.gelu(leaf);
                readout(tape, y, 11)
            },
            &x0,
            1e-7,
        );

        let weights = Array1::from_iter((0..6).map(|i| 0.3 + 0.2 * i as f64));
        check_input_grad(
            &move |tape, leaf| {
                let y = tape.scale_rows(leaf, weights.clone());
                readout(tape, y, 12)
            },
            &x0,
            1e-7,
        );

        let mask = Array2::from_shape_fn((6, 5), |(i, j)| {
            if (i + j) % 3 == 0 {
                0.0
            } else {
                1.0 / 0.9
            }
        });
        check_input_grad(
            &move |tape, leaf| {
                let y = tape.dropout(leaf, mask.clone());
                readout(tape, y, 13)
            },
            &x0,
            1e-7,
        );

        check_input_grad(
            &|tape, leaf| {
                let y = tape.row_normalize(leaf);
                readout(tape, y, 14)
            },
            &x0,
            1e-6,
        );
    }

    #[test]
    fn layer_norm_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = randn(&mut rng, 4, 6);
        let g0 = randn(&mut rng, 1, 6);
        let b0 = randn(&mut rng, 1, 6);

        let (g, b) = (g0.clone(), b0.clone());
        check_input_grad(
            &move |tape, leaf| {
                let gn = tape.leaf(g.clone());
                let bn = tape.leaf(b.clone());
                let y = tape.layer_norm(leaf, gn, bn);
                readout(tape, y, 21)
            },
            &x0,
            1e-6,
        );
        let (x, b) = (x0.clone(), b0.clone());
        check_input_grad(
            &move |tape, leaf| {
                let xn = tape.leaf(x.clone());
                let bn = tape.leaf(b.clone());
                let y = tape.layer_norm(xn, leaf, bn);
                readout(tape, y, 21)
            },
            &g0,
            1e-7,
        );
        let (x, g) = (x0.clone(), g0.clone());
        check_input_grad(
            &move |tape, leaf| {
                let xn = tape.leaf(x.clone());
                let gn = tape.leaf(g.clone());
                let y = tape.layer_norm(xn, gn, leaf);
                readout(tape, y, 21)
            },
            &b0,
            1e-7,
        );
    }

    #[test]
    fn attention_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // 2 samples, 3 tokens, d = 4, 2 heads.
        let x0 = randn(&mut rng, 6, 12);
        check_input_grad(
            &|tape, leaf| {
                let y = tape.attention(leaf, 2, 3);
                readout(tape, y, 31)
            },
            &x0,
            1e-6,
        );
    }

    #[test]
    fn token_block_op_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = randn(&mut rng, 8, 3); // 2 samples x 4 tokens
        check_input_grad(
            &|tape, leaf| {
                let y = tape.merge_token_pairs(leaf, 4);
                readout(tape, y, 41)
            },
            &x0,
            1e-7,
        );
        check_input_grad(
            &|tape, leaf| {
                let y = tape.mean_tokens(leaf, 4);
                readout(tape, y, 42)
            },
            &x0,
            1e-7,
        );
        let pos0 = randn(&mut rng, 4, 3);
        let x = x0.clone();
        check_input_grad(
            &move |tape, leaf| {
                let xn = tape.leaf(x.clone());
                let y = tape.add_pos(xn, leaf, 4);
                readout(tape, y, 43)
            },
            &pos0,
            1e-7,
        );
    }

    #[test]
    fn margin_and_cross_entropy_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let labels = vec![0usize, 2, 1, 3];
        // Raw cosine-like inputs kept inside (-1, 1).
        let c0 = randn(&mut rng, 4, 5).mapv(|v| 0.8 * (v / 3.0).tanh());

        for additive_angle in [true, false] {
            let spec = MarginSpec {
                additive_angle,
                margin: if additive_angle { 0.5 } else { 0.35 },
                scale: 16.0,
            };
            let labels = labels.clone();
            check_input_grad(
                &move |tape, leaf| {
                    let logits = tape.margin_adjust(leaf, labels.clone(), spec);
                    tape.cross_entropy_mean(logits, labels.clone())
                },
                &c0,
                1e-6,
            );
        }

        let logits0 = randn(&mut rng, 4, 6);
        let labels = vec![5usize, 0, 3, 3];
        check_input_grad(
            &move |tape, leaf| tape.cross_entropy_mean(leaf, labels.clone()),
            &logits0,
            1e-6,
        );
    }

    #[test]
    fn composite_graph_grad_matches_finite_differences() {
        // A miniature block: linear -> layer_norm -> attention -> mean ->
        // normalize -> cosine -> margin -> cross-entropy. Catches chain-rule
        // wiring bugs that per-op tests cannot.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w_qkv = randn(&mut rng, 9, 4); // 3*d with d=3... use d=3, heads=1
        let gamma = randn(&mut rng, 1, 4);
        let beta = randn(&mut rng, 1, 4);
        let classes = randn(&mut rng, 3, 3);
        let labels = vec![0usize, 2];
        let x0 = randn(&mut rng, 4, 4); // 2 samples x 2 tokens, width 4

        check_input_grad(
            &move |tape, leaf| {
                let gn = tape.leaf(gamma.clone());
                let bn = tape.leaf(beta.clone());
                let normed = tape.layer_norm(leaf, gn, bn);
                let wn = tape.leaf(w_qkv.clone());
                let qkv = tape.linear(normed, wn, None);
                let attn = tape.attention(qkv, 1, 2);
                let pooled = tape.mean_tokens(attn, 2);
                let emb = tape.row_normalize(pooled);
                let cn = tape.leaf(classes.clone());
                let cw = tape.row_normalize(cn);
                let cos = tape.matmul_nt(emb, cw);
                let logits = tape.margin_adjust(
                    cos,
                    labels.clone(),
                    MarginSpec {
                        additive_angle: true,
                        margin: 0.4,
                        scale: 8.0,
                    },
                );
                tape.cross_entropy_mean(logits, labels.clone())
            },
            &x0,
            1e-6,
        );
    }

    #[test]
    fn add_accumulates_both_branches() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Array2::from_elem((2, 2), 3.0));
        let y = tape.add(x, x); // both inputs alias the same leaf
        let w = Array2::from_elem((2, 2), 1.0);
        let out = tape.weighted_sum(y, w);
        let grads = tape.backward(out);
        let gx = grads.get(x).unwrap();
        assert!(gx.iter().all(|&v| v == 2.0), "aliased add must sum grads");
    }

    #[test]
    fn backward_skips_untouched_nodes() {
        let mut tape = Tape::<f64>::new();
        let used = tape.leaf(Array2::from_elem((1, 2), 1.0));
        let unused = tape.leaf(Array2::from_elem((4, 4), 9.0));
        let out = tape.weighted_sum(used, Array2::from_elem((1, 2), 2.0));
        let grads = tape.backward(out);
        assert!(grads.get(used).is_some());
        assert!(grads.get(unused).is_none(), "unused leaf must have no grad");
    }
}
