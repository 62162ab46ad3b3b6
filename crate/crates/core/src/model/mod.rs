//! Domain types and the closed-form mean-field math.
//!
//! Expression lives in a [`GeneExpressionMatrix`] (spots x genes). A fitted
//! [`InteractionModel`] carries the symmetric intra-spot coupling `g_intra`
//! and one inter-spot coupling per hop shell. The data enter the likelihood
//! only through [`SufficientStatistics`].

mod likelihood;
mod one_gene;
mod partition;
mod types;

pub use likelihood::{nll, nll_grad, nll_raw, ModelGradient};
pub use one_gene::{one_gene_derivatives, one_gene_root_exists, OneGeneDerivatives};
pub use partition::{
    effective_field, effective_field_raw, ln_sinhc, log_partition, log_partition_raw,
    sphere_log_volume, EffectiveField,
};
pub use types::{
    sufficient_statistics, GeneExpressionMatrix, InteractionModel, SufficientStatistics,
    SYMMETRY_TOLERANCE,
};
