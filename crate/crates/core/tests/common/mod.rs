//! Independent oracles and random-instance builders shared by the integration
//! tests (and pulled into the CLI acceptance suite by path). Nothing here calls
//! the library routine it is used to check.

#![allow(dead_code)]

use cellcomm::exec::stream_rng;
use cellcomm::graph::{khop_shells, Adjacency};
use cellcomm::{Execution, GeneExpressionMatrix, InteractionModel, SpatialGraph};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    stream_rng(seed, 0xC0FFEE)
}

/// `|a - b| / max(|a|, |b|, 1)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

pub fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, half_width: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-half_width..half_width))
}

/// Random unit-norm rows (not necessarily uniform on the sphere).
pub fn unit_field(rng: &mut ChaCha8Rng, n_spots: usize, n_genes: usize) -> GeneExpressionMatrix {
    let mut v = uniform_matrix(rng, n_spots, n_genes, 1.0);
    for mut row in v.rows_mut() {
        let norm = row.dot(&row).sqrt().max(1e-3);
        row.mapv_inplace(|x| x / norm);
    }
    GeneExpressionMatrix::from_values(v).unwrap().project_to_sphere().unwrap()
}

/// Erdos-Renyi base graph plus a spanning chain, expanded to `n_shells` hop shells.
pub fn random_graph(rng: &mut ChaCha8Rng, n_spots: usize, n_shells: usize, p: f64) -> SpatialGraph {
    let mut edges: Vec<(usize, usize)> = (1..n_spots).map(|i| (i - 1, i)).collect();
    for i in 0..n_spots {
        for j in (i + 2)..n_spots {
            if rng.random_bool(p) {
                edges.push((i, j));
            }
        }
    }
    let base = Adjacency::from_edges(n_spots, edges).unwrap();
    khop_shells(&base, n_shells, Execution::Sequential).unwrap()
}

pub fn chain(n_spots: usize) -> SpatialGraph {
    let base = Adjacency::from_edges(n_spots, (1..n_spots).map(|i| (i - 1, i))).unwrap();
    SpatialGraph::new(vec![base], None).unwrap()
}

pub fn random_model(rng: &mut ChaCha8Rng, n_genes: usize, q_shells: Vec<f64>, half_width: f64) -> InteractionModel {
    let gi = uniform_matrix(rng, n_genes, n_genes, half_width);
    let gs: Vec<_> = q_shells
        .iter()
        .map(|_| uniform_matrix(rng, n_genes, n_genes, half_width))
        .collect();
    let names = (0..n_genes).map(|j| format!("g{j}")).collect();
    InteractionModel::symmetrized(&gi, &gs, q_shells, names).unwrap()
}

/// A random (field, graph, model) triple with model entries in `[-1, 1]`.
pub struct Instance {
    pub expr: GeneExpressionMatrix,
    pub graph: SpatialGraph,
    pub model: InteractionModel,
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let n_spots = rng.random_range(3..=30);
    let n_genes = rng.random_range(1..=4);
    let n_shells = rng.random_range(1..=2);
    let graph = random_graph(rng, n_spots, n_shells, 0.15);
    let expr = unit_field(rng, n_spots, n_genes);
    let model = random_model(rng, n_genes, graph.q_shells(), 1.0);
    Instance { expr, graph, model }
}

/// `Tr(a b)`.
pub fn trace_product(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.dot(b).diag().sum()
}

/// Mean-field one-gene `log Z` written out from the closed form with plain
/// exponentials: `-(q/2) S g m^2 + ln 2 + S ln((e^x - e^-x) / x)`, `x = q|g m|`.
pub fn one_gene_log_z(g: f64, m: f64, q: f64, n_spots: usize) -> f64 {
    let s = n_spots as f64;
    let x = q * (g * m).abs();
    let sinh_term = if x == 0.0 { 2.0 } else { (x.exp() - (-x).exp()) / x };
    -(q / 2.0) * s * g * m * m + std::f64::consts::LN_2 + s * sinh_term.ln()
}

/// Derivative in `g` of the one-gene log-likelihood, written out directly:
/// `(q/2) S m^2 - S (a coth(a g) - 1/g) + C` with `a = q|m|`.
pub fn one_gene_score(g: f64, m: f64, q: f64, n_spots: usize, c: f64) -> f64 {
    let s = n_spots as f64;
    let a = q * m.abs();
    let x = a * g;
    // a coth(x) - 1/g = a (coth x - 1/x); coth x - 1/x ~ x/3 near 0
    let langevin = if x.abs() < 1e-4 { a * x / 3.0 } else { a * (1.0 / x.tanh() - 1.0 / x) };
    (q / 2.0) * s * m * m - s * langevin + c
}

/// Root of a decreasing function by bracketing then bisection.
pub fn bisect_decreasing(f: impl Fn(f64) -> f64) -> f64 {
    let (mut lo, mut hi) = (-1.0, 1.0);
    while f(lo) < 0.0 {
        lo *= 2.0;
        assert!(lo > -1e12, "no sign change below");
    }
    while f(hi) > 0.0 {
        hi *= 2.0;
        assert!(hi < 1e12, "no sign change above");
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Exact one-gene `log Z` on the sign fields `s_i = +-1`:
/// `ln sum_s exp(g' S + g sum_{i~j ordered} s_i s_j)`.
pub fn enumerate_log_z(edges: &[(usize, usize)], n_spots: usize, g_intra: f64, g: f64) -> f64 {
    let energies: Vec<f64> = (0u32..1 << n_spots)
        .map(|bits| {
            let spin = |i: usize| if bits & (1 << i) != 0 { -1.0 } else { 1.0 };
            let pair: f64 = edges.iter().map(|&(i, j)| spin(i) * spin(j)).sum();
            g_intra * n_spots as f64 + 2.0 * g * pair
        })
        .collect();
    let max = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + energies.iter().map(|e| (e - max).exp()).sum::<f64>().ln()
}

/// Next lexicographic permutation in place; false once the last one is passed.
pub fn next_permutation(v: &mut [usize]) -> bool {
    if v.len() < 2 {
        return false;
    }
    let mut i = v.len() - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = v.len() - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

/// Twice the average ranks, as integers (exact with ties).
pub fn doubled_ranks(x: &[f64]) -> Vec<i64> {
    x.iter()
        .map(|&a| {
            let below = x.iter().filter(|&&b| b < a).count() as i64;
            let equal = x.iter().filter(|&&b| b == a).count() as i64;
            // average of ranks below+1 ..= below+equal, doubled
            2 * below + equal + 1
        })
        .collect()
}

/// `n * sum(rx ry) - sum(rx) sum(ry)`; proportional to the rank correlation
/// with a permutation-invariant positive factor.
fn rank_covariance(rx: &[i64], ry: &[i64]) -> i64 {
    let n = rx.len() as i64;
    let sxy: i64 = rx.iter().zip(ry).map(|(a, b)| a * b).sum();
    n * sxy - rx.iter().sum::<i64>() * ry.iter().sum::<i64>()
}

/// Two-sided exact Spearman p by enumerating all `n!` reorderings of `y`'s
/// ranks in integer arithmetic.
pub fn brute_spearman_p(x: &[f64], y: &[f64]) -> f64 {
    let rx = doubled_ranks(x);
    let ry = doubled_ranks(y);
    let observed = rank_covariance(&rx, &ry).abs();
    let mut idx: Vec<usize> = (0..y.len()).collect();
    let (mut hits, mut total) = (0u64, 0u64);
    loop {
        let perm: Vec<i64> = idx.iter().map(|&i| ry[i]).collect();
        total += 1;
        if rank_covariance(&rx, &perm).abs() >= observed {
            hits += 1;
        }
        if !next_permutation(&mut idx) {
            break;
        }
    }
    hits as f64 / total as f64
}

/// Histogram of the no-tie Spearman statistic `sum d^2` over all `n!`
/// permutations against the identity.
pub fn spearman_d2_histogram(n: usize) -> Vec<u64> {
    let max = n * (n * n - 1) / 3;
    let mut hist = vec![0u64; max + 1];
    let mut idx: Vec<usize> = (0..n).collect();
    loop {
        let d2: usize = idx.iter().enumerate().map(|(i, &j)| (i as i64 - j as i64).pow(2) as usize).sum();
        hist[d2] += 1;
        if !next_permutation(&mut idx) {
            break;
        }
    }
    hist
}

/// Exact two-sided p for a no-tie permutation with statistic `d2` from its histogram:
/// `|rho| >= |rho_obs|` iff `|n(n^2-1) - 6 D| >= |n(n^2-1) - 6 D_obs|`.
pub fn spearman_p_from_histogram(hist: &[u64], n: usize, d2: usize) -> f64 {
    let c = (n * (n * n - 1)) as i64;
    let obs = (c - 6 * d2 as i64).abs();
    let total: u64 = hist.iter().sum();
    let hits: u64 = hist
        .iter()
        .enumerate()
        .filter(|&(d, _)| (c - 6 * d as i64).abs() >= obs)
        .map(|(_, &h)| h)
        .sum();
    hits as f64 / total as f64
}

/// Mann-Whitney U for `a` counted pairwise (ties as one half).
pub fn u_pairwise(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .flat_map(|&x| b.iter().map(move |&y| if x > y { 1.0 } else if x == y { 0.5 } else { 0.0 }))
        .sum()
}

/// Exact U tail probabilities `(P(U <= u), P(U >= u))` for tie-free samples
/// of sizes `na`, `nb`, by enumerating every choice of `na` of the `na + nb`
/// pooled ranks.
pub fn brute_u_tails(na: usize, nb: usize, u: f64) -> (f64, f64) {
    let n = na + nb;
    let (mut le, mut ge, mut total) = (0u64, 0u64, 0u64);
    for bits in 0u32..1 << n {
        if bits.count_ones() as usize != na {
            continue;
        }
        // U = number of (a, b) pairs with a ranked above b
        let mut stat = 0u64;
        let mut bs_below = 0u64;
        for r in 0..n {
            if bits & (1 << r) != 0 {
                stat += bs_below;
            } else {
                bs_below += 1;
            }
        }
        total += 1;
        let s = stat as f64;
        if s <= u + 1e-9 {
            le += 1;
        }
        if s >= u - 1e-9 {
            ge += 1;
        }
    }
    (le as f64 / total as f64, ge as f64 / total as f64)
}

/// Synthetic one-gene statistics `(q, m, S, C)` satisfying the root diagnostic.
pub fn one_gene_tuple(r: &mut ChaCha8Rng) -> (f64, f64, usize, f64) {
    let q = r.random_range(1.0..6.0);
    let m = r.random_range(0.2..1.0) * if r.random_bool(0.5) { 1.0 } else { -1.0 };
    let s = r.random_range(10..200);
    let u = r.random_range(-0.8..0.8);
    let c = -(q / 2.0) * s as f64 * m * m + u * s as f64 * q * f64::abs(m);
    (q, m, s, c)
}

/// Exact expectation of `C = sum_{i~j ordered} s_i s_j` under the one-gene
/// sign model with coupling `g` (and any `g'`, which cancels).
pub fn enumerate_expected_c(edges: &[(usize, usize)], n_spots: usize, g: f64) -> f64 {
    let pairs: Vec<f64> = (0u32..1 << n_spots)
        .map(|bits| {
            let spin = |i: usize| if bits & (1 << i) != 0 { -1.0 } else { 1.0 };
            edges.iter().map(|&(i, j)| 2.0 * spin(i) * spin(j)).sum()
        })
        .collect();
    let max = pairs.iter().map(|c| g * c).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = pairs.iter().map(|c| (g * c - max).exp()).collect();
    let z: f64 = weights.iter().sum();
    pairs.iter().zip(&weights).map(|(c, w)| c * w).sum::<f64>() / z
}

/// Grid point minimising `values`, first on ties.
pub fn argmin(grid: &[f64], values: &[f64]) -> f64 {
    let i = (0..values.len()).fold(0, |best, i| if values[i] < values[best] { i } else { best });
    grid[i]
}
