//! Generating expression fields under a fixed coupling model.
//!
//! With the model fixed, `log P(s) = H(s) - log Z` and `log Z` does not depend
//! on `s`, so the most likely field is the maximiser of the Hamiltonian
//! `H(s) = sum_i s_i^T g' s_i + sum_k sum_ij J^k_ij s_i^T g_k s_j` over fields
//! whose rows lie on the unit sphere. We run projected gradient ascent with
//! step halving. Entries covered by a [`FreezeMask`] keep their values; only
//! the free part of each row is rescaled during projection.

use ndarray::{Array2, ArrayView2, Zip};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::stream_rng;
use crate::graph::SpatialGraph;
use crate::inference::StopReason;
use crate::model::{GeneExpressionMatrix, InteractionModel};

const MAX_HALVINGS: usize = 30;
const FEASIBILITY_SLACK: f64 = 1e-12;
const UNIT_NORM_SLACK: f64 = 4.0 * f64::EPSILON;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub step_size: f64,
    pub max_steps: usize,
    /// Stop once no entry moves by more than this in one step.
    pub change_tolerance: f64,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-2,
            max_steps: 500,
            change_tolerance: 1e-7,
            seed: 0,
        }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "step_size must be positive, got {}",
                self.step_size
            )));
        }
        if !(self.change_tolerance > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "change_tolerance must be positive, got {}",
                self.change_tolerance
            )));
        }
        Ok(())
    }
}

/// Starting field for [`generate`].
#[derive(Debug, Clone)]
pub enum GenerateInit {
    /// i.i.d. standard normal entries, rows normalised (uniform on the sphere).
    Noise,
    Provided(GeneExpressionMatrix),
}

/// Entries held fixed during generation, with the values they are held at.
#[derive(Debug, Clone, PartialEq)]
pub struct FreezeMask {
    frozen: Array2<bool>,
    values: Array2<f64>,
}

impl FreezeMask {
    /// Freeze `frozen` entries at the corresponding entries of `source`.
    pub fn from_matrix(frozen: Array2<bool>, source: ArrayView2<f64>) -> Result<Self> {
        if frozen.dim() != source.dim() {
            return Err(Error::Dimension("freeze mask and source differ in shape".into()));
        }
        let values = Zip::from(&frozen)
            .and(source)
            .map_collect(|&f, &v| if f { v } else { 0.0 });
        Self::checked(frozen, values)
    }

    /// Freeze `(spot, gene, value)` triples.
    pub fn from_entries(n_spots: usize, n_genes: usize, entries: &[(usize, usize, f64)]) -> Result<Self> {
        let mut frozen = Array2::from_elem((n_spots, n_genes), false);
        let mut values = Array2::zeros((n_spots, n_genes));
        for &(i, j, v) in entries {
            if i >= n_spots || j >= n_genes {
                return Err(Error::Dimension(format!(
                    "frozen entry ({i}, {j}) outside {n_spots}x{n_genes}"
                )));
            }
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("frozen value at ({i}, {j})")));
            }
            frozen[[i, j]] = true;
            values[[i, j]] = v;
        }
        Self::checked(frozen, values)
    }

    fn checked(frozen: Array2<bool>, values: Array2<f64>) -> Result<Self> {
        for (i, row) in values.outer_iter().enumerate() {
            let norm2 = row.dot(&row);
            if norm2 > 1.0 + FEASIBILITY_SLACK {
                return Err(Error::InfeasibleMask {
                    spot: i.to_string(),
                    norm: norm2.sqrt(),
                });
            }
        }
        Ok(Self { frozen, values })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.frozen.dim()
    }

    pub fn is_frozen(&self, spot: usize, gene: usize) -> bool {
        self.frozen[[spot, gene]]
    }

    pub fn frozen(&self) -> &Array2<bool> {
        &self.frozen
    }

    pub fn n_frozen(&self) -> usize {
        self.frozen.iter().filter(|&&f| f).count()
    }

    fn apply(&self, s: &mut Array2<f64>) {
        Zip::from(s)
            .and(&self.frozen)
            .and(&self.values)
            .for_each(|x, &f, &v| {
                if f {
                    *x = v;
                }
            });
    }
}

fn check_dims(s: ArrayView2<f64>, graph: &SpatialGraph, model: &InteractionModel) -> Result<()> {
    if s.nrows() != graph.n_spots() {
        return Err(Error::Dimension(format!(
            "field has {} spots, graph has {}",
            s.nrows(),
            graph.n_spots()
        )));
    }
    if s.ncols() != model.n_genes() {
        return Err(Error::Dimension(format!(
            "field has {} genes, model has {}",
            s.ncols(),
            model.n_genes()
        )));
    }
    if graph.n_shells() != model.n_shells() {
        return Err(Error::Dimension(format!(
            "graph has {} shells, model has {}",
            graph.n_shells(),
            model.n_shells()
        )));
    }
    Ok(())
}

fn hamiltonian_of(s: ArrayView2<f64>, graph: &SpatialGraph, model: &InteractionModel) -> f64 {
    let mut total = (&s.dot(model.g_intra()) * &s).sum();
    for (shell, g) in graph.shells().iter().zip(model.g_shells()) {
        total += (&s.dot(g) * &shell.propagate(s)).sum();
    }
    total
}

fn gradient_of(
    s: ArrayView2<f64>,
    graph: &SpatialGraph,
    model: &InteractionModel,
    mask: Option<&FreezeMask>,
) -> Array2<f64> {
    let gi = model.g_intra();
    let mut grad = s.dot(&(gi + &gi.t()));
    for (shell, g) in graph.shells().iter().zip(model.g_shells()) {
        grad += &shell.propagate(s).dot(&(g + &g.t()));
    }
    if let Some(mask) = mask {
        Zip::from(&mut grad).and(&mask.frozen).for_each(|d, &f| {
            if f {
                *d = 0.0;
            }
        });
    }
    grad
}

/// Hamiltonian of an expression field.
pub fn hamiltonian(expr: &GeneExpressionMatrix, graph: &SpatialGraph, model: &InteractionModel) -> Result<f64> {
    check_dims(expr.values().view(), graph, model)?;
    Ok(hamiltonian_of(expr.values().view(), graph, model))
}

/// `dH/ds`, zero at frozen entries.
pub fn hamiltonian_grad_s(
    expr: &GeneExpressionMatrix,
    graph: &SpatialGraph,
    model: &InteractionModel,
    mask: Option<&FreezeMask>,
) -> Result<Array2<f64>> {
    check_dims(expr.values().view(), graph, model)?;
    if let Some(mask) = mask {
        if mask.dim() != expr.values().dim() {
            return Err(Error::Dimension("freeze mask shape differs from the field".into()));
        }
    }
    Ok(gradient_of(expr.values().view(), graph, model, mask))
}

/// Rescale the free part of every row so that the full row has unit norm.
fn project(s: &mut Array2<f64>, mask: Option<&FreezeMask>, spot_name: &dyn Fn(usize) -> String) -> Result<()> {
    for (i, mut row) in s.outer_iter_mut().enumerate() {
        let (mut fixed, mut free) = (0.0, 0.0);
        for (j, v) in row.iter().enumerate() {
            if mask.is_some_and(|m| m.frozen[[i, j]]) {
                fixed += v * v;
            } else {
                free += v * v;
            }
        }
        if free == 0.0 {
            if (fixed - 1.0).abs() <= FEASIBILITY_SLACK {
                continue;
            }
            return Err(Error::CannotProject { spot: spot_name(i) });
        }
        // rows already on the sphere up to rounding are left bit-identical
        if (fixed + free - 1.0).abs() <= UNIT_NORM_SLACK {
            continue;
        }
        let scale = ((1.0 - fixed).max(0.0) / free).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            if !mask.is_some_and(|m| m.frozen[[i, j]]) {
                *v *= scale;
            }
        }
    }
    Ok(())
}

/// Hamiltonian after projection and after every accepted step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub hamiltonian: Vec<f64>,
    pub stop: StopReason,
}

impl GenerationTrace {
    pub fn is_non_decreasing(&self) -> bool {
        self.hamiltonian.windows(2).all(|w| w[1] >= w[0])
    }
}

pub fn generate(
    model: &InteractionModel,
    graph: &SpatialGraph,
    config: &GenerateConfig,
    init: &GenerateInit,
    mask: Option<&FreezeMask>,
) -> Result<(GeneExpressionMatrix, GenerationTrace)> {
    generate_observed(model, graph, config, init, mask, |_, _| {})
}

/// [`generate`], calling `observer(step, field)` after projection (step 0)
/// and after every accepted step.
pub fn generate_observed<F>(
    model: &InteractionModel,
    graph: &SpatialGraph,
    config: &GenerateConfig,
    init: &GenerateInit,
    mask: Option<&FreezeMask>,
    mut observer: F,
) -> Result<(GeneExpressionMatrix, GenerationTrace)>
where
    F: FnMut(usize, ArrayView2<f64>),
{
    config.validate()?;
    let (n_spots, n_genes) = (graph.n_spots(), model.n_genes());
    let (mut s, spot_ids) = match init {
        GenerateInit::Noise => {
            let mut rng = stream_rng(config.seed, 0);
            let s = Array2::from_shape_simple_fn((n_spots, n_genes), || StandardNormal.sample(&mut rng));
            (s, (0..n_spots).map(|i| format!("spot_{i}")).collect::<Vec<_>>())
        }
        GenerateInit::Provided(expr) => (expr.values().clone(), expr.spot_ids().to_vec()),
    };
    check_dims(s.view(), graph, model)?;
    if let Some(mask) = mask {
        if mask.dim() != s.dim() {
            return Err(Error::Dimension("freeze mask shape differs from the field".into()));
        }
        mask.apply(&mut s);
    }
    let name = |i: usize| spot_ids[i].clone();
    project(&mut s, mask, &name)?;

    let mut h = hamiltonian_of(s.view(), graph, model);
    let mut trace = vec![h];
    observer(0, s.view());
    let mut stop = StopReason::MaxIterations;
    for step in 1..=config.max_steps {
        let grad = gradient_of(s.view(), graph, model, mask);
        let mut eta = config.step_size;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let mut candidate = &s + &(&grad * eta);
            project(&mut candidate, mask, &name)?;
            let hc = hamiltonian_of(candidate.view(), graph, model);
            let change = Zip::from(&candidate)
                .and(&s)
                .fold(0.0f64, |acc, a, b| acc.max((a - b).abs()));
            // a move that does not raise H is only taken once it is negligible;
            // otherwise plateau moves (e.g. swapping sign domains) could cycle
            if hc.is_finite() && (hc > h || (hc == h && change < config.change_tolerance)) {
                accepted = Some((candidate, hc, change));
                break;
            }
            eta /= 2.0;
        }
        let Some((next, next_h, change)) = accepted else {
            stop = StopReason::Stalled;
            break;
        };
        s = next;
        h = next_h;
        trace.push(h);
        observer(step, s.view());
        if change < config.change_tolerance {
            stop = StopReason::Converged;
            break;
        }
    }

    let mut out = GeneExpressionMatrix::new(s, spot_ids, model.gene_names().to_vec())?
        .with_provenance(vec!["generated".into()]);
    out.set_sphere_flag(true);
    Ok((
        out,
        GenerationTrace {
            hamiltonian: trace,
            stop,
        },
    ))
}
