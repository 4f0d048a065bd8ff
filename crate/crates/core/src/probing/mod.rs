//! Hessian approximation from a handful of operator applications.
//!
//! Three routes to a low-rank symbol:
//! - PSF: delta probing samples symbol rows, interpolated in space;
//! - PDO: sinusoid probing samples symbol columns, interpolated in frequency;
//! - PSF+: SVD basis from the rows, coefficients refined against the columns.
//!
//! Plus the high-pass filter applied around operators before probing and the
//! pointwise square-root transform used to approximate operator square roots.

pub mod filter;
pub mod pdo;
pub mod psf;
pub mod psfplus;

pub use filter::{apply_highpass, pointwise_sqrt_samples, wrap_highpass, HighPassSpec};
pub use pdo::{
    assemble_pdo_operator, build_pdo_weights, build_sinusoid_probe, choose_probe_frequencies,
    eval_pdo_weight, extract_symbol_columns, pdo_probe, FrequencyChoice, PdoProbePlan,
    SymbolColumns,
};
pub use psf::{
    assemble_psf_operator, build_delta_probes, build_psf_weights, extract_psfs, psf_probe,
    PsfProbePlan, PsfSet,
};
pub use psfplus::{build_psf_plus, rank_by_threshold, row_singular_values, PsfPlusBuild};
