//! Closed forms for a single gene with inter-spot coupling `g` and no intra
//! coupling. These are written in the log-likelihood sign convention (the
//! quantity to maximise); the fitted NLL is their negation.

use super::partition::ln_sinhc;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneGeneDerivatives {
    /// Mean-field log-likelihood `<log P>` at `g`.
    pub logp: f64,
    /// `d<log P>/dg`.
    pub d1: f64,
    /// `d^2<log P>/dg^2`; never positive.
    pub d2: f64,
}

const SERIES_BELOW: f64 = 1e-2;

/// `a coth(a g) - 1/g`, odd in `g`, zero at `g = 0`.
fn langevin_term(a: f64, g: f64) -> f64 {
    let x = a * g;
    if x.abs() < SERIES_BELOW {
        let x2 = x * x;
        a * x * (1.0 / 3.0 - x2 / 45.0 + 2.0 * x2 * x2 / 945.0)
    } else {
        a / x.tanh() - 1.0 / g
    }
}

/// `1/g^2 - a^2 / sinh^2(a g)`, even in `g`, equal to `a^2/3` at `g = 0`.
fn curvature_term(a: f64, g: f64) -> f64 {
    let x = a * g;
    if x.abs() < SERIES_BELOW {
        let x2 = x * x;
        a * a * (1.0 / 3.0 - x2 / 15.0 + 2.0 * x2 * x2 / 189.0)
    } else {
        1.0 / (g * g) - (a / x.sinh()).powi(2)
    }
}

/// Mean-field log-likelihood of one gene and its first two derivatives in `g`.
///
/// With `a = q |m|`:
///
/// ```text
/// logp = (q/2) S g m^2 - log 2 - S log(2 sinh(a|g|) / (a|g|)) + g C
/// d1   = (q/2) S m^2 - S (a coth(a g) - 1/g) + C
/// d2   = -S (1/g^2 - a^2 / sinh^2(a g))
/// ```
///
/// At `g = 0` the removable singularities are evaluated by their series limits,
/// `d1 = (q/2) S m^2 + C` and `d2 = -S a^2 / 3`.
pub fn one_gene_derivatives(g: f64, m: f64, q: f64, n_spots: usize, c_exp: f64) -> OneGeneDerivatives {
    let s = n_spots as f64;
    let a = q * m.abs();
    let logp = q / 2.0 * s * g * m * m - std::f64::consts::LN_2 - s * ln_sinhc(2.0 * a * g) + g * c_exp;
    let d1 = q / 2.0 * s * m * m - s * langevin_term(a, g) + c_exp;
    let d2 = -s * curvature_term(a, g);
    OneGeneDerivatives { logp, d1, d2 }
}

/// Whether `d1` changes sign on the real line, i.e. whether the one-gene
/// likelihood has a finite maximiser: `|C + (q/2) S m^2| < S q |m|`.
pub fn one_gene_root_exists(m: f64, q: f64, n_spots: usize, c_exp: f64) -> bool {
    let s = n_spots as f64;
    (c_exp + q / 2.0 * s * m * m).abs() < s * q * m.abs()
}
