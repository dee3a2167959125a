//! Quality-gated twin low-rank adapters for face recognition under mixed
//! image quality, exercised end to end on a synthetic desk-scale benchmark.
//!
//! The core idea: a frozen backbone gets a pair of low-rank adapters on
//! selected linear layers. A per-image quality score, calibrated on the
//! fine-tuning dataset, blends the two adapter outputs so that one adapter
//! specializes toward high-quality inputs and the other toward degraded
//! inputs. Everything here is CPU-sized: a toy transformer backbone,
//! procedural identity images, and exact reference oracles for the math.
//!
//! Module map:
//! - [`adapters`]: low-rank adapter pairs, blending algebra, checkpoints
//! - [`quality`]: quality estimators, gate calibration, the alpha transform
//! - [`backbone`]: the toy vision transformer and its parameter store
//! - [`injection`]: model surgery (wrap linear layers in adapter pairs)
//! - [`losses`]: angular-margin softmax heads (additive-angle and
//!   additive-cosine variants)
//! - [`datasim`]: procedural identities, degradations, dataset manifests
//! - [`trainer`]: AdamW fine-tuning loop, LR schedule, gradient probe
//! - [`evalmetrics`]: retrieval, verification, open-set metrics + oracles
//! - [`cli`]: the `petal` binary's subcommands over JSON run configs
//!
//! Each major capability has a runnable demo under `examples/`:
//!
//! ```text
//! cargo run --example adapter_math        # init, delta, blend algebra
//! cargo run --example quality_gate       # estimator, calibration, alpha
//! cargo run --example model_surgery      # inject/strip, param counting
//! cargo run --example margin_losses      # margin logits + loss descent
//! cargo run --example gen_benchmark      # synthetic identities on disk
//! cargo run --example finetune_loop      # adapter fine-tuning, report
//! cargo run --example evaluate_metrics   # rank-k / TAR@FAR / TPIR@FPIR
//! cargo run --example grad_probe         # first-step gradient magnitudes
//! ```

pub mod adapters;
pub mod autodiff;
pub mod backbone;
pub mod cli;
pub mod datasim;
pub mod error;
pub mod evalmetrics;
pub mod imaging;
pub mod injection;
pub mod losses;
pub mod quality;
pub mod trainer;

pub use error::{PetalError, Result};
