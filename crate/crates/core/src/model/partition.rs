//! Mean-field log-partition function.
//!
//! Linearising the Hamiltonian around the per-gene mean `m` turns every spot
//! into an independent unit vector in an external field. The field is
//! `F m` with
//!
//! ```text
//! F = 2 (g' + g'^T) + sum_k q_k (g_k + g_k^T)
//! ```
//!
//! and integrating over the sphere gives
//!
//! ```text
//! log Z = -S m^T (g' + sum_k q_k/2 g_k) m + log|S^{N-1}| + S log(2 sinh(H/2) / (H/2)),
//! ```
//!
//! where `H = |F m|`.

use ndarray::{Array1, Array2, ArrayView1};
use statrs::function::gamma::ln_gamma;

use super::InteractionModel;
use crate::error::{Error, Result};

const SERIES_BELOW: f64 = 1e-3;
const ASYMPTOTIC_ABOVE: f64 = 30.0;

/// Log surface area of the unit sphere in `R^n`, `log(2 pi^{n/2} / Gamma(n/2))`.
pub fn sphere_log_volume(n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "sphere dimension must be at least 1".into(),
        ));
    }
    let half = n as f64 / 2.0;
    Ok(std::f64::consts::LN_2 + half * std::f64::consts::PI.ln() - ln_gamma(half))
}

/// `log(2 sinh(x/2) / (x/2))`, even in `x`, finite for every finite input.
pub fn ln_sinhc(x: f64) -> f64 {
    let x = x.abs();
    if x < SERIES_BELOW {
        let x2 = x * x;
        std::f64::consts::LN_2 + x2 / 24.0 - x2 * x2 / 2880.0
    } else if x > ASYMPTOTIC_ABOVE {
        x / 2.0 - (x / 2.0).ln() + (-(-x).exp()).ln_1p()
    } else {
        (2.0 * (x / 2.0).sinh() / (x / 2.0)).ln()
    }
}

/// `ln_sinhc'(x) / x`, smooth through `x = 0` where it equals 1/12.
pub(crate) fn ln_sinhc_slope_over_x(x: f64) -> f64 {
    let x = x.abs();
    if x < 1e-2 {
        let x2 = x * x;
        1.0 / 12.0 - x2 / 720.0 + x2 * x2 / 30240.0
    } else {
        (0.5 / (x / 2.0).tanh() - 1.0 / x) / x
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveField {
    /// Symmetric `F`.
    pub matrix: Array2<f64>,
    /// `F m`.
    pub vector: Array1<f64>,
    /// `|F m|`.
    pub norm: f64,
}

fn check_dims(g_intra: &Array2<f64>, g_shells: &[Array2<f64>], q: &[f64], n: usize) -> Result<()> {
    if g_intra.dim() != (n, n) || g_shells.iter().any(|g| g.dim() != (n, n)) {
        return Err(Error::Dimension(format!(
            "coupling matrices must be {n}x{n} to match the mean vector"
        )));
    }
    if g_shells.len() != q.len() {
        return Err(Error::Dimension(format!(
            "{} shell couplings but {} shell degrees",
            g_shells.len(),
            q.len()
        )));
    }
    Ok(())
}

/// Effective field for possibly non-symmetric coupling matrices.
pub fn effective_field_raw(
    g_intra: &Array2<f64>,
    g_shells: &[Array2<f64>],
    q_shells: &[f64],
    m: ArrayView1<f64>,
) -> Result<EffectiveField> {
    check_dims(g_intra, g_shells, q_shells, m.len())?;
    let mut matrix = (g_intra + &g_intra.t()) * 2.0;
    for (g, &q) in g_shells.iter().zip(q_shells) {
        matrix.scaled_add(q, g);
        matrix.scaled_add(q, &g.t());
    }
    let vector = matrix.dot(&m);
    let norm = vector.dot(&vector).sqrt();
    Ok(EffectiveField {
        matrix,
        vector,
        norm,
    })
}

pub fn effective_field(model: &InteractionModel, m: &Array1<f64>) -> Result<EffectiveField> {
    effective_field_raw(model.g_intra(), model.g_shells(), model.q_shells(), m.view())
}

/// Mean-field `log Z` for possibly non-symmetric coupling matrices.
pub fn log_partition_raw(
    g_intra: &Array2<f64>,
    g_shells: &[Array2<f64>],
    q_shells: &[f64],
    m: ArrayView1<f64>,
    n_spots: usize,
) -> Result<f64> {
    if n_spots == 0 {
        return Err(Error::InvalidArgument("n_spots must be at least 1".into()));
    }
    let field = effective_field_raw(g_intra, g_shells, q_shells, m)?;
    let mut coupling = g_intra.clone();
    for (g, &q) in g_shells.iter().zip(q_shells) {
        coupling.scaled_add(q / 2.0, g);
    }
    let quadratic = m.dot(&coupling.dot(&m));
    let s = n_spots as f64;
    Ok(-s * quadratic + sphere_log_volume(m.len())? + s * ln_sinhc(field.norm))
}

pub fn log_partition(model: &InteractionModel, m: &Array1<f64>, n_spots: usize) -> Result<f64> {
    log_partition_raw(model.g_intra(), model.g_shells(), model.q_shells(), m.view(), n_spots)
}
