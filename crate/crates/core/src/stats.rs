//! Rank statistics used by the validation workflows.
//!
//! Exact p-values are computed by full enumeration on small samples
//! (Spearman: n <= 8, Mann-Whitney: n_a + n_b <= 12 without ties); larger
//! samples use the usual t and normal approximations. The `method` field
//! of every [`TestResult`] records which path ran.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::exec::{stream_rng, Execution};

pub const SPEARMAN_EXACT_MAX_N: usize = 8;
pub const MWU_EXACT_MAX_N: usize = 12;

/// Relative slack when comparing a permuted statistic against the observed one.
const TIE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Exact,
    Approximate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alternative {
    #[default]
    TwoSided,
    /// First sample tends to be larger.
    Greater,
    /// First sample tends to be smaller.
    Less,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub method: Method,
    pub n: Vec<usize>,
}

/// 1-based ranks with ties replaced by their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    sxy / (sxx * syy).sqrt()
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!(
            "samples differ in length: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 paired observations, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("correlation input".into()));
    }
    let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
    if constant(x) || constant(y) {
        return Err(Error::Degenerate("Spearman rho of a constant vector".into()));
    }
    Ok(())
}

/// Spearman's rho alone (no p-value). Inputs must already be valid.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    Ok(pearson(&average_ranks(x), &average_ranks(y)).clamp(-1.0, 1.0))
}

/// Visit every permutation of `items` (Heap's algorithm).
fn for_each_permutation(items: &mut [f64], mut visit: impl FnMut(&[f64])) {
    let n = items.len();
    let mut c = vec![0usize; n];
    visit(items);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                items.swap(0, i);
            } else {
                items.swap(c[i], i);
            }
            visit(items);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<TestResult> {
    check_pair(x, y)?;
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let rho = pearson(&rx, &ry).clamp(-1.0, 1.0);
    let n = x.len();
    let (p_value, method) = if n <= SPEARMAN_EXACT_MAX_N {
        let threshold = rho.abs() * (1.0 - TIE_EPS) - TIE_EPS;
        // permuting y keeps its mean and spread, so only the cross term moves
        let centred = |v: &[f64]| {
            let mean = v.iter().sum::<f64>() / n as f64;
            v.iter().map(|a| a - mean).collect::<Vec<_>>()
        };
        let (cx, mut perm) = (centred(&rx), centred(&ry));
        let scale = (cx.iter().map(|a| a * a).sum::<f64>() * perm.iter().map(|b| b * b).sum::<f64>()).sqrt();
        let (mut hits, mut total) = (0u64, 0u64);
        for_each_permutation(&mut perm, |p| {
            total += 1;
            let r = cx.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() / scale;
            if r.abs() >= threshold {
                hits += 1;
            }
        });
        (hits as f64 / total as f64, Method::Exact)
    } else {
        let df = (n - 2) as f64;
        let p = if rho.abs() >= 1.0 {
            0.0
        } else {
            let t = rho * (df / (1.0 - rho * rho)).sqrt();
            let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
            2.0 * (1.0 - dist.cdf(t.abs()))
        };
        (p.clamp(0.0, 1.0), Method::Approximate)
    };
    Ok(TestResult {
        statistic: rho,
        p_value,
        method,
        n: vec![n],
    })
}

/// Mann-Whitney U for sample `a`: the number of pairs with `a_i > b_j`,
/// counting ties as one half.
pub fn mann_whitney_u(a: &[f64], b: &[f64], alternative: Alternative) -> Result<TestResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyGroup("Mann-Whitney U needs two nonempty samples".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Mann-Whitney input".into()));
    }
    let (na, nb) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = average_ranks(&pooled);
    let rank_sum_a: f64 = ranks[..na].iter().sum();
    let u = rank_sum_a - (na * (na + 1)) as f64 / 2.0;

    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut has_ties = false;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        if t > 1.0 {
            has_ties = true;
            tie_term += t * t * t - t;
        }
        i = j + 1;
    }

    let n = na + nb;
    let (p_value, method) = if n <= MWU_EXACT_MAX_N && !has_ties {
        let counts = exact_u_distribution(na, nb);
        let total: f64 = counts.iter().sum();
        let u_idx = u.round() as usize;
        let le: f64 = counts[..=u_idx].iter().sum::<f64>() / total;
        let ge: f64 = counts[u_idx..].iter().sum::<f64>() / total;
        let p = match alternative {
            Alternative::TwoSided => (2.0 * le.min(ge)).min(1.0),
            Alternative::Greater => ge,
            Alternative::Less => le,
        };
        (p, Method::Exact)
    } else {
        let (naf, nbf, nf) = (na as f64, nb as f64, n as f64);
        let mean = naf * nbf / 2.0;
        let var = naf * nbf / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
        let p = if var <= 0.0 {
            1.0
        } else {
            let sd = var.sqrt();
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            let upper = |z: f64| 1.0 - normal.cdf(z);
            match alternative {
                Alternative::TwoSided => {
                    let z = ((u - mean).abs() - 0.5).max(0.0) / sd;
                    (2.0 * upper(z)).min(1.0)
                }
                Alternative::Greater => upper((u - mean - 0.5) / sd),
                Alternative::Less => normal.cdf((u - mean + 0.5) / sd),
            }
        };
        (p.clamp(0.0, 1.0), Method::Approximate)
    };
    Ok(TestResult {
        statistic: u,
        p_value,
        method,
        n: vec![na, nb],
    })
}

/// Number of rank assignments yielding each U value `0..=na*nb`, by the
/// standard recurrence over the largest pooled observation.
fn exact_u_distribution(na: usize, nb: usize) -> Vec<f64> {
    // table[i][j][u] = count of arrangements of i a's and j b's with statistic u
    let max_u = na * nb;
    let mut table = vec![vec![Vec::new(); nb + 1]; na + 1];
    for i in 0..=na {
        for j in 0..=nb {
            let mut counts = vec![0.0; i * j + 1];
            if i == 0 || j == 0 {
                counts[0] = 1.0;
            } else {
                // largest element is an `a`: it beats all j b's
                for (u, &c) in table[i - 1][j].iter().enumerate() {
                    counts[u + j] += c;
                }
                // largest element is a `b`
                for (u, &c) in table[i][j - 1].iter().enumerate() {
                    counts[u] += c;
                }
            }
            table[i][j] = counts;
        }
    }
    let out = table[na][nb].clone();
    debug_assert_eq!(out.len(), max_u + 1);
    out
}

/// Summary of a permutation null for Spearman's rho.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullSummary {
    pub observed: f64,
    pub n_perm: usize,
    pub mean: f64,
    pub percentile_2_5: f64,
    pub percentile_95: f64,
    pub percentile_97_5: f64,
    /// Two-sided, `(1 + #{|rho_perm| >= |rho_obs|}) / (n_perm + 1)`.
    pub empirical_p: f64,
    /// One-sided upper tail, `(1 + #{rho_perm >= rho_obs}) / (n_perm + 1)`.
    pub empirical_p_greater: f64,
    #[serde(skip)]
    pub null: Vec<f64>,
}

/// Linear-interpolation percentile of a sorted sample, `q` in `[0, 100]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Shuffle `y` `n_perm` times and recompute rho against `x`. Permutation `i`
/// draws from its own random stream, so the result does not depend on `exec`.
pub fn permutation_null(x: &[f64], y: &[f64], n_perm: usize, seed: u64, exec: Execution) -> Result<NullSummary> {
    check_pair(x, y)?;
    if n_perm == 0 {
        return Err(Error::InvalidArgument("n_perm must be at least 1".into()));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let observed = pearson(&rx, &ry).clamp(-1.0, 1.0);
    let null: Vec<f64> = exec.map(n_perm, |i| {
        let mut rng = stream_rng(seed, i as u64);
        let mut perm = ry.clone();
        perm.shuffle(&mut rng);
        pearson(&rx, &perm).clamp(-1.0, 1.0)
    });
    let threshold = observed.abs() * (1.0 - TIE_EPS) - TIE_EPS;
    let extreme = null.iter().filter(|r| r.abs() >= threshold).count();
    let upper = null.iter().filter(|&&r| r >= observed - TIE_EPS).count();
    let mut sorted = null.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(NullSummary {
        observed,
        n_perm,
        mean: null.iter().sum::<f64>() / n_perm as f64,
        percentile_2_5: percentile(&sorted, 2.5),
        percentile_95: percentile(&sorted, 95.0),
        percentile_97_5: percentile(&sorted, 97.5),
        empirical_p: (1 + extreme) as f64 / (n_perm + 1) as f64,
        empirical_p_greater: (1 + upper) as f64 / (n_perm + 1) as f64,
        null,
    })
}

/// Median of a sample (NaN for an empty one).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    percentile(&v, 50.0)
}
