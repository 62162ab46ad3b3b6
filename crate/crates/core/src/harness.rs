//! Identifiability experiments: simulate-then-infer recovery, agreement
//! between models fitted on disjoint parts of one tissue, and an exact
//! enumeration oracle for one-gene models on tiny graphs.
//!
//! Recovery is scored on the shell-1 coupling `g`. The intra block is
//! reported too, but it is not a useful target: with unit-norm rows the
//! mean-field objective keeps decreasing along `g' = t I`, so fitted `g'`
//! is dominated by a growing multiple of the identity.

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{derive_seed, stream_rng, Execution};
use crate::generation::{generate_observed, GenerateConfig, GenerateInit};
use crate::graph::{grid_coordinates, radius_graph, SpatialGraph};
use crate::inference::{fit_from, init_model, FitConfig, InitScheme, StopReason};
use crate::model::{log_partition, nll, sufficient_statistics, GeneExpressionMatrix, InteractionModel};
use crate::stats::{mann_whitney_u, median, permutation_null, spearman, spearman_rho, Alternative, NullSummary, TestResult};

pub const MIN_SPLIT_SPOTS: usize = 10;
pub const ORACLE_MAX_SPOTS: usize = 10;
pub const GRID_RADIUS: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelfConsistencyConfig {
    pub n_genes: usize,
    pub grid_side: usize,
    /// Ground-truth entries are drawn uniform on `(-a, a)` before symmetrizing.
    pub coupling_scale: f64,
    pub generation: GenerateConfig,
    pub fit: FitConfig,
    pub n_repeats: usize,
    pub n_perm: usize,
    pub seed: u64,
}

impl Default for SelfConsistencyConfig {
    fn default() -> Self {
        Self {
            n_genes: 4,
            grid_side: 20,
            coupling_scale: 0.1,
            generation: GenerateConfig {
                max_steps: 500,
                ..GenerateConfig::default()
            },
            fit: FitConfig {
                init: InitScheme::Uniform { half_width: 0.1 },
                ..FitConfig::default()
            },
            n_repeats: 10,
            n_perm: 1000,
            seed: 0,
        }
    }
}

impl SelfConsistencyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_genes < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 genes, got {}", self.n_genes)));
        }
        if self.grid_side < 3 {
            return Err(Error::InvalidArgument(format!("grid side must be >= 3, got {}", self.grid_side)));
        }
        if !(self.coupling_scale >= 0.0 && self.coupling_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "coupling scale must be finite and nonnegative, got {}",
                self.coupling_scale
            )));
        }
        if self.n_repeats == 0 || self.n_perm == 0 {
            return Err(Error::InvalidArgument("n_repeats and n_perm must be positive".into()));
        }
        self.generation.validate()?;
        self.fit.validate()
    }
}

/// One correlation against the truth, with its permutation null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rho: f64,
    pub p_value: f64,
    pub null: NullSummary,
}

impl Comparison {
    /// `None` when either side is constant and rho is undefined.
    fn of(truth: &[f64], estimate: &[f64], n_perm: usize, seed: u64, exec: Execution) -> Result<Option<Self>> {
        match spearman(truth, estimate) {
            Ok(r) => Ok(Some(Self {
                rho: r.statistic,
                p_value: r.p_value,
                null: permutation_null(truth, estimate, n_perm, seed, exec)?,
            })),
            Err(Error::Degenerate(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn is_significant(&self, alpha: f64) -> bool {
        self.null.empirical_p < alpha
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatResult {
    pub repeat: usize,
    pub seed: u64,
    /// Fit to the generated field vs truth.
    pub fitted: Option<Comparison>,
    /// Fit to the projected noise the generator started from vs truth.
    pub raw: Option<Comparison>,
    pub intra_rho: Option<f64>,
    pub degenerate: bool,
    pub fitted_max_abs: f64,
    pub fit_stop: StopReason,
    pub raw_stop: StopReason,
    pub generation_steps: usize,
    pub truth: Vec<f64>,
    pub fitted_coupling: Vec<f64>,
    pub raw_coupling: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub config: SelfConsistencyConfig,
    pub repeats: Vec<RepeatResult>,
    pub median_fitted_rho: Option<f64>,
    pub median_raw_rho: Option<f64>,
    /// Repeats whose fitted rho has permutation-null empirical p < 0.05.
    pub n_significant: usize,
    pub n_degenerate: usize,
}

/// Symmetric ground truth: intra block then one shell block, each
/// `(M + M^T) / 2` with `M_ij ~ U(-a, a)`.
pub fn sample_truth(n_genes: usize, q_shells: Vec<f64>, scale: f64, seed: u64) -> Result<InteractionModel> {
    let k = q_shells.len();
    if scale == 0.0 {
        return InteractionModel::zeros(n_genes, q_shells, None);
    }
    let dist = Uniform::new(-scale, scale).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = stream_rng(seed, 0);
    let mut draw = || Array2::from_shape_simple_fn((n_genes, n_genes), || dist.sample(&mut rng));
    let intra = draw();
    let shells: Vec<Array2<f64>> = (0..k).map(|_| draw()).collect();
    let names = (0..n_genes).map(|j| format!("gene_{j}")).collect();
    InteractionModel::symmetrized(&intra, &shells, q_shells, names)
}

/// Unit-spaced `side x side` lattice joined within radius 1.5 (8-neighbour).
pub fn grid_graph(side: usize) -> Result<SpatialGraph> {
    radius_graph(grid_coordinates(side, 1.0).view(), GRID_RADIUS)
}

fn shell_coupling(model: &InteractionModel) -> Vec<f64> {
    model.g_shells()[0].iter().copied().collect()
}

fn run_repeat(config: &SelfConsistencyConfig, graph: &SpatialGraph, repeat: usize) -> Result<RepeatResult> {
    let seed = derive_seed(config.seed, repeat as u64);
    let truth = sample_truth(config.n_genes, graph.q_shells(), config.coupling_scale, derive_seed(seed, 1))?;
    let gen_cfg = GenerateConfig {
        seed: derive_seed(seed, 2),
        ..config.generation
    };
    let mut start = None;
    let (generated, gen_trace) = generate_observed(&truth, graph, &gen_cfg, &GenerateInit::Noise, None, |step, s| {
        if step == 0 {
            start = Some(s.to_owned());
        }
    })?;
    let raw = GeneExpressionMatrix::from_values(start.expect("step 0 is always observed"))?.into_sphere_normalized()?;

    let fit_cfg = FitConfig {
        seed: derive_seed(seed, 3),
        ..config.fit
    };
    let fit_one = |expr: &GeneExpressionMatrix| -> Result<(InteractionModel, StopReason)> {
        let stats = sufficient_statistics(expr, graph)?;
        let init = init_model(config.n_genes, graph.q_shells(), fit_cfg.init, fit_cfg.seed, None)?;
        let (model, trace) = fit_from(&stats, init, &fit_cfg, |_, _| {})?;
        Ok((model, trace.stop))
    };
    let (fitted, fit_stop) = fit_one(&generated)?;
    let (raw_fit, raw_stop) = fit_one(&raw)?;

    let truth_flat = shell_coupling(&truth);
    let fitted_flat = shell_coupling(&fitted);
    let raw_flat = shell_coupling(&raw_fit);
    let null_seed = derive_seed(seed, 4);
    let fitted_cmp = Comparison::of(&truth_flat, &fitted_flat, config.n_perm, null_seed, Execution::Sequential)?;
    let raw_cmp = Comparison::of(&truth_flat, &raw_flat, config.n_perm, derive_seed(seed, 5), Execution::Sequential)?;
    let truth_intra: Vec<f64> = truth.g_intra().iter().copied().collect();
    let fitted_intra: Vec<f64> = fitted.g_intra().iter().copied().collect();
    let intra_rho = spearman_rho(&truth_intra, &fitted_intra).ok();
    let fitted_max_abs = fitted_flat
        .iter()
        .chain(fitted.g_intra().iter())
        .fold(0.0f64, |a, v| a.max(v.abs()));
    Ok(RepeatResult {
        repeat,
        seed,
        degenerate: fitted_cmp.is_none(),
        fitted: fitted_cmp,
        raw: raw_cmp,
        intra_rho,
        fitted_max_abs,
        fit_stop,
        raw_stop,
        generation_steps: gen_trace.hamiltonian.len() - 1,
        truth: truth_flat,
        fitted_coupling: fitted_flat,
        raw_coupling: raw_flat,
    })
}

/// Sample a truth, generate a field from noise, refit, and compare — once per
/// repeat. Repeats run through `exec`; each derives its own seeds, so the
/// report is identical for either execution mode.
pub fn self_consistency(config: &SelfConsistencyConfig, exec: Execution) -> Result<ConsistencyReport> {
    config.validate()?;
    let graph = grid_graph(config.grid_side)?;
    let repeats = exec
        .map(config.n_repeats, |r| run_repeat(config, &graph, r))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let fitted: Vec<f64> = repeats.iter().filter_map(|r| r.fitted.as_ref().map(|c| c.rho)).collect();
    let raw: Vec<f64> = repeats.iter().filter_map(|r| r.raw.as_ref().map(|c| c.rho)).collect();
    let median_of = |v: &[f64]| (!v.is_empty()).then(|| median(v));
    Ok(ConsistencyReport {
        config: *config,
        median_fitted_rho: median_of(&fitted),
        median_raw_rho: median_of(&raw),
        n_significant: repeats
            .iter()
            .filter(|r| r.fitted.as_ref().is_some_and(|c| c.is_significant(0.05)))
            .count(),
        n_degenerate: repeats.iter().filter(|r| r.degenerate).count(),
        repeats,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Split {
    /// Even spot indices vs odd spot indices.
    Parity,
    /// A uniformly random half (rounded down) vs the rest.
    RandomHalves { seed: u64 },
    Masks { first: Vec<usize>, second: Vec<usize> },
}

impl Split {
    pub fn parts(&self, n_spots: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let (a, b) = match self {
            Split::Parity => ((0..n_spots).step_by(2).collect(), (1..n_spots).step_by(2).collect()),
            Split::RandomHalves { seed } => {
                use rand::seq::SliceRandom;
                let mut order: Vec<usize> = (0..n_spots).collect();
                order.shuffle(&mut stream_rng(*seed, 0));
                let (a, b) = order.split_at(n_spots / 2);
                let (mut a, mut b) = (a.to_vec(), b.to_vec());
                a.sort_unstable();
                b.sort_unstable();
                (a, b)
            }
            Split::Masks { first, second } => (first.clone(), second.clone()),
        };
        for part in [&a, &b] {
            if part.is_empty() {
                return Err(Error::EmptyGroup("a split part has no spots".into()));
            }
            if part.len() < MIN_SPLIT_SPOTS {
                return Err(Error::InvalidArgument(format!(
                    "split parts need at least {MIN_SPLIT_SPOTS} spots, got {}",
                    part.len()
                )));
            }
            if let Some(&bad) = part.iter().find(|&&i| i >= n_spots) {
                return Err(Error::InvalidArgument(format!("spot index {bad} out of range")));
            }
        }
        Ok((a, b))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub fit: FitConfig,
    pub n_perm: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            fit: FitConfig {
                init: InitScheme::Uniform { half_width: 0.1 },
                ..FitConfig::default()
            },
            n_perm: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub n_spots: [usize; 2],
    /// Spearman between the two fitted shell-1 couplings.
    pub final_rho: f64,
    pub final_p: f64,
    /// `rho` after each epoch; `None` where a coupling is still constant.
    pub rho_curve: Vec<Option<f64>>,
    pub null: NullSummary,
    /// Observed rho against the shuffled rhos, one-sided (greater).
    pub mann_whitney: TestResult,
    pub stops: [StopReason; 2],
}

/// Fit one model per part on the induced subgraph and compare the fits.
pub fn split_consistency(
    expr: &GeneExpressionMatrix,
    graph: &SpatialGraph,
    split: &Split,
    config: &SplitConfig,
    exec: Execution,
) -> Result<SplitReport> {
    if expr.n_spots() != graph.n_spots() {
        return Err(Error::Dimension(format!(
            "expression has {} spots, graph has {}",
            expr.n_spots(),
            graph.n_spots()
        )));
    }
    let (a, b) = split.parts(expr.n_spots())?;
    let part = |keep: &[usize]| -> Result<(GeneExpressionMatrix, SpatialGraph)> {
        Ok((expr.select_spots(keep), graph.induced(keep)?))
    };
    paired_consistency([part(&a)?, part(&b)?], config, exec)
}

/// Fit one model per `(expression, graph)` pair and compare the fitted
/// shell-1 couplings. Both fits start from the same initial model so their
/// epoch-wise snapshots are comparable.
pub fn paired_consistency(
    parts: [(GeneExpressionMatrix, SpatialGraph); 2],
    config: &SplitConfig,
    exec: Execution,
) -> Result<SplitReport> {
    if config.n_perm == 0 {
        return Err(Error::InvalidArgument("n_perm must be positive".into()));
    }
    for (expr, graph) in &parts {
        if expr.n_spots() < MIN_SPLIT_SPOTS {
            return Err(Error::InvalidArgument(format!(
                "each part needs at least {MIN_SPLIT_SPOTS} spots, got {}",
                expr.n_spots()
            )));
        }
        if expr.n_spots() != graph.n_spots() {
            return Err(Error::Dimension("part expression and graph sizes differ".into()));
        }
        if expr.gene_names() != parts[0].0.gene_names() {
            return Err(Error::GeneMismatch {
                first: "first part".into(),
                second: "second part".into(),
            });
        }
        if graph.n_shells() != parts[0].1.n_shells() {
            return Err(Error::Dimension("parts have different shell counts".into()));
        }
    }
    let fits = exec.map(2, |p| -> Result<_> {
        let (expr, graph) = &parts[p];
        let stats = sufficient_statistics(expr, graph)?;
        let init = init_model(
            expr.n_genes(),
            graph.q_shells(),
            config.fit.init,
            config.fit.seed,
            Some(expr.gene_names().to_vec()),
        )?;
        let mut snapshots = Vec::new();
        let (model, trace) = fit_from(&stats, init, &config.fit, |_, m| snapshots.push(shell_coupling(m)))?;
        Ok((shell_coupling(&model), snapshots, trace.stop))
    });
    let mut fits = fits.into_iter().collect::<Result<Vec<_>>>()?;
    let (gb, snaps_b, stop_b) = fits.pop().expect("two fits");
    let (ga, snaps_a, stop_a) = fits.pop().expect("two fits");

    // a fit that stopped early keeps its last coupling for the remaining epochs
    let n_epochs = snaps_a.len().max(snaps_b.len());
    let at = |s: &[Vec<f64>], e: usize| s[e.min(s.len() - 1)].clone();
    let rho_curve = (0..n_epochs)
        .map(|e| spearman_rho(&at(&snaps_a, e), &at(&snaps_b, e)).ok())
        .collect();
    let observed = spearman(&ga, &gb)?;
    let null = permutation_null(&ga, &gb, config.n_perm, config.seed, exec)?;
    let mann_whitney = mann_whitney_u(&[observed.statistic], &null.null, Alternative::Greater)?;
    Ok(SplitReport {
        n_spots: [parts[0].0.n_spots(), parts[1].0.n_spots()],
        final_rho: observed.statistic,
        final_p: observed.p_value,
        rho_curve,
        null,
        mann_whitney,
        stops: [stop_a, stop_b],
    })
}

/// Several random-halves splits, pooled: observed final rhos against all
/// shuffled rhos.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatedSplitReport {
    pub splits: Vec<SplitReport>,
    pub observed: Vec<f64>,
    pub mann_whitney: TestResult,
    pub n_above_95th: usize,
    pub null_mean: f64,
}

pub fn repeated_split_consistency(
    expr: &GeneExpressionMatrix,
    graph: &SpatialGraph,
    n_splits: usize,
    config: &SplitConfig,
    exec: Execution,
) -> Result<RepeatedSplitReport> {
    if n_splits == 0 {
        return Err(Error::InvalidArgument("need at least one split".into()));
    }
    let splits = exec
        .map(n_splits, |r| {
            let seed = derive_seed(config.seed, r as u64);
            let cfg = SplitConfig {
                seed: derive_seed(seed, 1),
                ..config.clone()
            };
            split_consistency(expr, graph, &Split::RandomHalves { seed }, &cfg, Execution::Sequential)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let observed: Vec<f64> = splits.iter().map(|s| s.final_rho).collect();
    let pooled: Vec<f64> = splits.iter().flat_map(|s| s.null.null.iter().copied()).collect();
    Ok(RepeatedSplitReport {
        mann_whitney: mann_whitney_u(&observed, &pooled, Alternative::Greater)?,
        n_above_95th: splits.iter().filter(|s| s.final_rho > s.null.percentile_95).count(),
        null_mean: pooled.iter().sum::<f64>() / pooled.len() as f64,
        observed,
        splits,
    })
}

fn check_oracle(model: &InteractionModel, graph: &SpatialGraph) -> Result<()> {
    if model.n_genes() != 1 {
        return Err(Error::InvalidArgument(format!(
            "the exact oracle handles one gene, got {}",
            model.n_genes()
        )));
    }
    if graph.n_spots() > ORACLE_MAX_SPOTS {
        return Err(Error::InvalidArgument(format!(
            "the exact oracle handles at most {ORACLE_MAX_SPOTS} spots, got {}",
            graph.n_spots()
        )));
    }
    if graph.n_shells() != model.n_shells() {
        return Err(Error::Dimension("model and graph shell counts differ".into()));
    }
    Ok(())
}

/// `ln sum_s exp H(s)` over all `2^S` fields with `s_i = +-1`, the one-gene
/// unit sphere.
pub fn exact_log_partition(model: &InteractionModel, graph: &SpatialGraph) -> Result<f64> {
    check_oracle(model, graph)?;
    let n = graph.n_spots();
    let gi = model.g_intra()[[0, 0]];
    let energies: Vec<f64> = (0..1u32 << n)
        .map(|bits| {
            let s = |i: usize| if bits >> i & 1 == 1 { -1.0 } else { 1.0 };
            let mut h = gi * n as f64;
            for (shell, g) in graph.shells().iter().zip(model.g_shells()) {
                for i in 0..n {
                    for &j in shell.neighbors(i) {
                        h += g[[0, 0]] * s(i) * s(j);
                    }
                }
            }
            h
        })
        .collect();
    let max = energies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(max + energies.iter().map(|e| (e - max).exp()).sum::<f64>().ln())
}

/// Exact negative log-likelihood of `expr` (one gene, entries `+-1`).
pub fn exact_oracle_nll(expr: &GeneExpressionMatrix, model: &InteractionModel, graph: &SpatialGraph) -> Result<f64> {
    check_oracle(model, graph)?;
    let stats = sufficient_statistics(expr, graph)?;
    let mut loss = exact_log_partition(model, graph)? - model.g_intra()[[0, 0]] * stats.c_intra[[0, 0]];
    for (g, c) in model.g_shells().iter().zip(&stats.c_shells) {
        loss -= g[[0, 0]] * c[[0, 0]];
    }
    Ok(loss)
}

/// Exact and mean-field losses along `g' = 0`, `g = grid[i]` for a
/// one-gene, one-shell field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleScan {
    pub grid: Vec<f64>,
    pub exact_log_z: Vec<f64>,
    pub exact_nll: Vec<f64>,
    pub mft_nll: Vec<f64>,
    pub exact_argmin: f64,
    pub mft_argmin: f64,
    /// Smallest second difference of the exact `log Z` along the grid.
    pub min_second_difference: f64,
}

pub fn oracle_scan(expr: &GeneExpressionMatrix, graph: &SpatialGraph, grid: &[f64]) -> Result<OracleScan> {
    if grid.len() < 3 {
        return Err(Error::InvalidArgument("oracle grid needs at least 3 points".into()));
    }
    if graph.n_shells() != 1 {
        return Err(Error::InvalidArgument("oracle scan expects a single shell".into()));
    }
    let stats = sufficient_statistics(expr, graph)?;
    let q = graph.q_shells();
    let one = |g: f64| {
        InteractionModel::new(
            Array2::zeros((1, 1)),
            vec![Array2::from_elem((1, 1), g)],
            q.clone(),
            expr.gene_names().to_vec(),
        )
    };
    let (mut exact_log_z, mut exact_nll, mut mft_nll) = (Vec::new(), Vec::new(), Vec::new());
    for &g in grid {
        let model = one(g)?;
        let log_z = exact_log_partition(&model, graph)?;
        exact_log_z.push(log_z);
        exact_nll.push(log_z - g * stats.c_shells[0][[0, 0]]);
        mft_nll.push(nll(&stats, &model)?);
    }
    let argmin = |v: &[f64]| {
        let i = (0..v.len()).fold(0, |best, i| if v[i] < v[best] { i } else { best });
        grid[i]
    };
    let min_second_difference = exact_log_z
        .windows(3)
        .map(|w| w[0] - 2.0 * w[1] + w[2])
        .fold(f64::INFINITY, f64::min);
    Ok(OracleScan {
        grid: grid.to_vec(),
        exact_argmin: argmin(&exact_nll),
        mft_argmin: argmin(&mft_nll),
        exact_log_z,
        exact_nll,
        mft_nll,
        min_second_difference,
    })
}

/// Mean-field `log Z` for comparison with [`exact_log_partition`].
pub fn mft_log_partition(model: &InteractionModel, m: f64, n_spots: usize) -> Result<f64> {
    log_partition(model, &ndarray::arr1(&[m]), n_spots)
}

/// Rows drawn from a standard normal and projected to the unit sphere.
pub fn noise_field(n_spots: usize, n_genes: usize, seed: u64) -> Result<GeneExpressionMatrix> {
    let mut rng = stream_rng(seed, 0);
    let values = Array2::from_shape_simple_fn((n_spots, n_genes), || StandardNormal.sample(&mut rng));
    GeneExpressionMatrix::from_values(values)?.project_to_sphere()
}

/// Field with `s_i = +-1` from the bit pattern `bits` (bit `i` set means -1).
pub fn sign_field(n_spots: usize, bits: u32) -> Result<GeneExpressionMatrix> {
    let values = Array2::from_shape_fn((n_spots, 1), |(i, _)| if bits >> i & 1 == 1 { -1.0 } else { 1.0 });
    GeneExpressionMatrix::from_values(values)?.into_sphere_normalized()
}
