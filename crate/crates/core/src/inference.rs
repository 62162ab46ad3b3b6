//! Fitting an [`InteractionModel`] to data by gradient descent on the NLL.
//!
//! The statistics are computed once and held fixed. Each epoch takes a step
//! of the base learning rate along the negative gradient; a step that would
//! increase the loss is halved (at most 30 times) and the base rate is
//! restored after every accepted step. The recorded loss is therefore
//! non-increasing.

use ndarray::Array2;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::stream_rng;
use crate::graph::SpatialGraph;
use crate::model::{
    nll, nll_grad, sufficient_statistics, GeneExpressionMatrix, InteractionModel,
    SufficientStatistics,
};

const MAX_HALVINGS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "lowercase")]
pub enum InitScheme {
    Zeros,
    /// Entries i.i.d. uniform on `(-half_width, half_width)`, then `(M + M^T) / 2`.
    Uniform { half_width: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Stop once the gradient infinity norm falls below this.
    pub grad_tolerance: f64,
    pub init: InitScheme,
    pub seed: u64,
    /// When false, `g_intra` is held at its initial value and only the shell
    /// couplings are fitted.
    pub train_intra: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            max_epochs: 1000,
            grad_tolerance: 1e-6,
            init: InitScheme::Zeros,
            seed: 0,
            train_intra: true,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.grad_tolerance > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "grad_tolerance must be positive, got {}",
                self.grad_tolerance
            )));
        }
        if let InitScheme::Uniform { half_width } = self.init {
            if !(half_width >= 0.0 && half_width.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "uniform init half-width must be finite and nonnegative, got {half_width}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub nll: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIterations,
    /// No step size down to `lr / 2^30` decreased the loss.
    Stalled,
}

/// Loss and gradient norm at the initial point (epoch 0) and after every
/// accepted step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    pub records: Vec<EpochRecord>,
    pub stop: StopReason,
}

impl FitTrace {
    pub fn final_nll(&self) -> f64 {
        self.records.last().map(|r| r.nll).unwrap_or(f64::NAN)
    }

    pub fn is_non_increasing(&self) -> bool {
        self.records.windows(2).all(|w| w[1].nll <= w[0].nll)
    }
}

/// Initial coupling model with `q_shells.len()` shells.
pub fn init_model(
    n_genes: usize,
    q_shells: Vec<f64>,
    scheme: InitScheme,
    seed: u64,
    gene_names: Option<Vec<String>>,
) -> Result<InteractionModel> {
    if n_genes == 0 {
        return Err(Error::InvalidArgument("n_genes must be at least 1".into()));
    }
    let names = gene_names.unwrap_or_else(|| (0..n_genes).map(|j| format!("gene_{j}")).collect());
    match scheme {
        InitScheme::Zeros | InitScheme::Uniform { half_width: 0.0 } => {
            InteractionModel::zeros(n_genes, q_shells, Some(names))
        }
        InitScheme::Uniform { half_width } => {
            let dist = Uniform::new(-half_width, half_width)
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let mut rng = stream_rng(seed, 0);
            let mut draw = || Array2::from_shape_simple_fn((n_genes, n_genes), || dist.sample(&mut rng));
            let g_intra = draw();
            let g_shells: Vec<_> = (0..q_shells.len()).map(|_| draw()).collect();
            InteractionModel::symmetrized(&g_intra, &g_shells, q_shells, names)
        }
    }
}

/// Fit a model to sphere-normalized expression on `graph`.
pub fn fit(
    expr: &GeneExpressionMatrix,
    graph: &SpatialGraph,
    config: &FitConfig,
) -> Result<(InteractionModel, FitTrace)> {
    if !expr.is_sphere_normalized() {
        return Err(Error::NotSphereNormalized);
    }
    let stats = sufficient_statistics(expr, graph)?;
    fit_statistics(&stats, graph.q_shells(), Some(expr.gene_names().to_vec()), config)
}

/// Fit directly from precomputed statistics.
pub fn fit_statistics(
    stats: &SufficientStatistics,
    q_shells: Vec<f64>,
    gene_names: Option<Vec<String>>,
    config: &FitConfig,
) -> Result<(InteractionModel, FitTrace)> {
    config.validate()?;
    let init = init_model(stats.n_genes(), q_shells, config.init, config.seed, gene_names)?;
    fit_from(stats, init, config, |_, _| {})
}

/// Run gradient descent from `init`, calling `observer(epoch, model)` at epoch 0
/// and after every accepted step. `config.init` and `config.seed` are ignored.
pub fn fit_from<F>(
    stats: &SufficientStatistics,
    init: InteractionModel,
    config: &FitConfig,
    mut observer: F,
) -> Result<(InteractionModel, FitTrace)>
where
    F: FnMut(usize, &InteractionModel),
{
    config.validate()?;
    let train_intra = config.train_intra;
    let mut model = init;
    let mut loss = nll(stats, &model)?;
    let mut grad = nll_grad(stats, &model)?;
    if !loss.is_finite() || !grad.is_finite() {
        return Err(Error::FitDiverged { epoch: 0 });
    }
    let mut records = vec![EpochRecord {
        epoch: 0,
        nll: loss,
        grad_norm: grad.inf_norm(train_intra),
    }];
    observer(0, &model);

    let mut stop = StopReason::MaxIterations;
    for epoch in 1..=config.max_epochs {
        if grad.inf_norm(train_intra) < config.grad_tolerance {
            stop = StopReason::Converged;
            break;
        }
        let mut step = config.learning_rate;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let candidate = model.descend(&grad, step, train_intra);
            let candidate_loss = nll(stats, &candidate)?;
            if candidate_loss.is_finite() && candidate_loss <= loss {
                accepted = Some((candidate, candidate_loss));
                break;
            }
            step /= 2.0;
        }
        let Some((next, next_loss)) = accepted else {
            stop = StopReason::Stalled;
            break;
        };
        let next_grad = nll_grad(stats, &next)?;
        if !next_grad.is_finite() {
            return Err(Error::FitDiverged { epoch });
        }
        model = next;
        loss = next_loss;
        grad = next_grad;
        records.push(EpochRecord {
            epoch,
            nll: loss,
            grad_norm: grad.inf_norm(train_intra),
        });
        observer(epoch, &model);
    }
    if stop == StopReason::MaxIterations && grad.inf_norm(train_intra) < config.grad_tolerance {
        stop = StopReason::Converged;
    }
    Ok((model, FitTrace { records, stop }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{sphere_log_volume, SYMMETRY_TOLERANCE};
    use ndarray::array;

    #[test]
    fn zeros_init_has_constant_nll() {
        let model = init_model(3, vec![2.0], InitScheme::Zeros, 1, None).unwrap();
        let stats = SufficientStatistics::from_parts(
            Array2::eye(3) * 4.0,
            vec![Array2::eye(3)],
            array![0.1, 0.2, 0.3],
            12,
        )
        .unwrap();
        let expected = sphere_log_volume(3).unwrap() + 12.0 * std::f64::consts::LN_2;
        assert!((nll(&stats, &model).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn uniform_init_is_seeded_and_symmetric() {
        let scheme = InitScheme::Uniform { half_width: 0.5 };
        let a = init_model(4, vec![1.0, 2.0], scheme, 9, None).unwrap();
        let b = init_model(4, vec![1.0, 2.0], scheme, 9, None).unwrap();
        let c = init_model(4, vec![1.0, 2.0], scheme, 10, None).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for seed in 0..100 {
            let m = init_model(5, vec![1.0], scheme, seed, None).unwrap();
            for g in std::iter::once(m.g_intra()).chain(m.g_shells()) {
                assert!(g.iter().all(|v| v.abs() <= 0.5));
                for i in 0..5 {
                    for j in 0..5 {
                        assert!((g[[i, j]] - g[[j, i]]).abs() <= SYMMETRY_TOLERANCE);
                    }
                }
            }
        }
    }

    #[test]
    fn unnormalized_input_is_rejected() {
        let expr = GeneExpressionMatrix::from_values(array![[1.0, 2.0], [3.0, 1.0]]).unwrap();
        let graph = SpatialGraph::new(
            vec![crate::graph::Adjacency::from_edges(2, [(0, 1)]).unwrap()],
            None,
        )
        .unwrap();
        assert!(matches!(
            fit(&expr, &graph, &FitConfig::default()),
            Err(Error::NotSphereNormalized)
        ));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = FitConfig {
            learning_rate: 0.0,
            ..FitConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = FitConfig {
            grad_tolerance: -1.0,
            ..FitConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn frozen_intra_block_is_untouched() {
        let stats = SufficientStatistics::from_parts(
            array![[3.0, 0.5], [0.5, 2.0]],
            vec![array![[1.0, 0.2], [0.2, 0.4]]],
            array![0.3, 0.1],
            5,
        )
        .unwrap();
        let init = init_model(2, vec![2.0], InitScheme::Uniform { half_width: 0.1 }, 3, None).unwrap();
        let cfg = FitConfig {
            train_intra: false,
            max_epochs: 20,
            ..FitConfig::default()
        };
        let (model, trace) = fit_from(&stats, init.clone(), &cfg, |_, _| {}).unwrap();
        assert_eq!(model.g_intra(), init.g_intra());
        assert_ne!(model.g_shells(), init.g_shells());
        assert!(trace.is_non_increasing());
    }
}
