//! Attention-map guided pruning of vision transformer heads and tokens.
//!
//! The crate carries its own small reverse-mode autodiff tape ([`tape`]), a
//! plain ViT on top of it ([`vit`]), the pruning criteria ([`criteria`]), the
//! layer-weighted global ranking and structural surgery ([`prune`]), cost
//! accounting ([`cost`]) and distillation fine-tuning ([`train`]).
//!
//! ```
//! use amg_core::{cost, ModelSpec};
//!
//! let report = cost::analytical_cost(&ModelSpec::vit_base()).unwrap();
//! assert_eq!(report.totals.msa_params, 28_311_552);
//! ```

pub mod capture;
pub mod checkpoint;
pub mod cost;
pub mod criteria;
pub mod data;
pub mod error;
pub mod export;
pub mod prune;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vit;

pub use capture::{AttentionCapture, AttentionMap};
pub use criteria::{ImportanceScore, UnitKind};
pub use data::{Dataset, SyntheticSpec};
pub use error::{Error, Result};
pub use prune::{PruneConfig, PrunePlan};
pub use tape::Tape;
pub use tensor::Tensor;
pub use train::TrainConfig;
pub use vit::{ModelSpec, VitModel};
