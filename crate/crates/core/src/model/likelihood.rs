//! Negative log-likelihood `L = log Z - Tr(g' C') - sum_k Tr(g_k C_k)` and its
//! analytic gradient.

use ndarray::{Array2, ArrayView1};

use super::partition::{effective_field_raw, ln_sinhc_slope_over_x, log_partition_raw};
use super::{InteractionModel, SufficientStatistics};
use crate::error::{Error, Result};

/// `Tr(a b) = sum_ij a_ij b_ji`.
fn trace_product(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += a[[i, j]] * b[[j, i]];
        }
    }
    acc
}

fn check_stats(stats: &SufficientStatistics, n_genes: usize, n_shells: usize) -> Result<()> {
    if stats.n_genes() != n_genes {
        return Err(Error::Dimension(format!(
            "statistics cover {} genes, model has {n_genes}",
            stats.n_genes()
        )));
    }
    if stats.c_shells.len() != n_shells {
        return Err(Error::Dimension(format!(
            "statistics cover {} shells, model has {n_shells}",
            stats.c_shells.len()
        )));
    }
    Ok(())
}

/// NLL for possibly non-symmetric coupling matrices.
pub fn nll_raw(
    stats: &SufficientStatistics,
    g_intra: &Array2<f64>,
    g_shells: &[Array2<f64>],
    q_shells: &[f64],
) -> Result<f64> {
    check_stats(stats, g_intra.nrows(), g_shells.len())?;
    let log_z = log_partition_raw(g_intra, g_shells, q_shells, stats.m.view(), stats.n_spots)?;
    let mut value = log_z - trace_product(g_intra, &stats.c_intra);
    for (g, c) in g_shells.iter().zip(&stats.c_shells) {
        value -= trace_product(g, c);
    }
    Ok(value)
}

pub fn nll(stats: &SufficientStatistics, model: &InteractionModel) -> Result<f64> {
    nll_raw(stats, model.g_intra(), model.g_shells(), model.q_shells())
}

/// Partial derivatives of the NLL with respect to every matrix entry.
///
/// The loss depends on each coupling only through `g + g^T` and through
/// traces against symmetric statistics, so the partials with respect to
/// entries `(a, b)` and `(b, a)` coincide and both outputs are symmetric.
/// A descent step `g - eta * d_g` therefore stays inside the symmetric
/// parameter space.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradient {
    pub d_g_intra: Array2<f64>,
    pub d_g_shells: Vec<Array2<f64>>,
}

impl ModelGradient {
    /// Infinity norm over the shell blocks and, if `intra` is set, the intra block.
    pub fn inf_norm(&self, intra: bool) -> f64 {
        let shells = self
            .d_g_shells
            .iter()
            .flat_map(|d| d.iter())
            .fold(0.0f64, |acc, v| acc.max(v.abs()));
        if intra {
            self.d_g_intra.iter().fold(shells, |acc, v| acc.max(v.abs()))
        } else {
            shells
        }
    }

    pub fn is_finite(&self) -> bool {
        self.d_g_intra.iter().all(|v| v.is_finite())
            && self.d_g_shells.iter().all(|d| d.iter().all(|v| v.is_finite()))
    }
}

fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

pub fn nll_grad(stats: &SufficientStatistics, model: &InteractionModel) -> Result<ModelGradient> {
    check_stats(stats, model.n_genes(), model.n_shells())?;
    let m = stats.m.view();
    let s = stats.n_spots as f64;
    let field = effective_field_raw(model.g_intra(), model.g_shells(), model.q_shells(), m)?;

    // d|Fm| / dF_cd = v_c m_d / |Fm|; the 1/|Fm| is folded into `psi`.
    let psi = ln_sinhc_slope_over_x(field.norm);
    let v_m: Array2<f64> = {
        let vm = outer(field.vector.view(), m);
        &vm + &vm.t()
    };
    let mm = outer(m, m);

    let mut d_g_intra = &mm * (-s) + &v_m * (2.0 * s * psi);
    d_g_intra -= &stats.c_intra.t();

    let d_g_shells = model
        .q_shells()
        .iter()
        .zip(&stats.c_shells)
        .map(|(&q, c)| {
            let mut d = &mm * (-s * q / 2.0) + &v_m * (q * s * psi);
            d -= &c.t();
            d
        })
        .collect();

    Ok(ModelGradient {
        d_g_intra,
        d_g_shells,
    })
}
