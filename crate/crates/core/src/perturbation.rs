//! In-silico knockouts: freeze one gene at zero in one spot, relax the tissue
//! under a fitted model, and summarise how the change spreads by distance.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::stream_rng;
use crate::generation::{generate_observed, FreezeMask, GenerateConfig, GenerateInit, GenerationTrace};
use crate::graph::SpatialGraph;
use crate::model::{GeneExpressionMatrix, InteractionModel};
use crate::stats::{average_ranks, spearman, TestResult};

/// Distance class of a spot relative to the perturbed spot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShellClass {
    Perturbed,
    /// 1-based distance shell.
    Neighbor(usize),
    Unperturbed,
}

impl ShellClass {
    pub fn label(&self) -> String {
        match self {
            ShellClass::Perturbed => "perturbed".into(),
            ShellClass::Neighbor(k) => format!("neighbor{k}"),
            ShellClass::Unperturbed => "unperturbed".into(),
        }
    }
}

/// Classify every spot by its Euclidean distance to `center`. Shell 1 holds
/// spots with `0 < d < radii[0]`, shell `j` those with
/// `radii[j-2] <= d < radii[j-1]`; everything farther is unperturbed. A spot
/// sharing the centre's coordinates (d = 0) is also treated as unperturbed:
/// it cannot be told apart from the centre by distance.
pub fn neighbor_shells_by_distance(coords: ArrayView2<f64>, center: usize, radii: &[f64]) -> Result<Vec<ShellClass>> {
    if coords.ncols() != 2 {
        return Err(Error::Dimension(format!("coordinates need 2 columns, got {}", coords.ncols())));
    }
    if center >= coords.nrows() {
        return Err(Error::InvalidArgument(format!(
            "centre index {center} out of range for {} spots",
            coords.nrows()
        )));
    }
    if radii.iter().any(|r| !r.is_finite() || *r <= 0.0) || radii.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("radii must be positive and strictly increasing".into()));
    }
    let c = coords.row(center);
    Ok((0..coords.nrows())
        .map(|i| {
            if i == center {
                return ShellClass::Perturbed;
            }
            let p = coords.row(i);
            let d = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt();
            if d == 0.0 {
                return ShellClass::Unperturbed;
            }
            match radii.iter().position(|&r| d < r) {
                Some(k) => ShellClass::Neighbor(k + 1),
                None => ShellClass::Unperturbed,
            }
        })
        .collect())
}

/// Genes most up-regulated in marker-positive (value > 0) versus marker-zero
/// spots, by difference of means; ties go to the lower gene index and the
/// marker itself is never returned.
pub fn derive_signature(expr: &GeneExpressionMatrix, marker: &str, top_n: usize) -> Result<Vec<usize>> {
    let marker_idx = expr.gene_index(marker)?;
    let n = expr.n_genes();
    if top_n == 0 || top_n >= n {
        return Err(Error::InvalidArgument(format!(
            "signature size must be in 1..{n}, got {top_n}"
        )));
    }
    let values = expr.values();
    let column = values.column(marker_idx);
    let positive: Vec<usize> = (0..expr.n_spots()).filter(|&i| column[i] > 0.0).collect();
    let zero: Vec<usize> = (0..expr.n_spots()).filter(|&i| column[i] == 0.0).collect();
    if positive.is_empty() {
        return Err(Error::EmptyGroup(format!("no spots express marker {marker}")));
    }
    if zero.is_empty() {
        return Err(Error::EmptyGroup(format!("every spot expresses marker {marker}")));
    }
    let mean_pos = values.select(Axis(0), &positive).mean_axis(Axis(0)).expect("nonempty");
    let mean_zero = values.select(Axis(0), &zero).mean_axis(Axis(0)).expect("nonempty");
    let diff = &mean_pos - &mean_zero;
    let mut genes: Vec<usize> = (0..n).filter(|&j| j != marker_idx).collect();
    genes.sort_by(|&a, &b| diff[b].total_cmp(&diff[a]).then(a.cmp(&b)));
    genes.truncate(top_n);
    Ok(genes)
}

fn check_gene_set(n_genes: usize, genes: &[usize]) -> Result<()> {
    if genes.is_empty() {
        return Err(Error::EmptyGroup("signature gene set is empty".into()));
    }
    if let Some(&bad) = genes.iter().find(|&&j| j >= n_genes) {
        return Err(Error::GeneNotFound(format!("gene index {bad}")));
    }
    Ok(())
}

/// Per-spot mean over `genes`.
pub fn signature_score(expr: &GeneExpressionMatrix, genes: &[usize]) -> Result<Vec<f64>> {
    check_gene_set(expr.n_genes(), genes)?;
    Ok(score_rows(expr.values().view(), genes))
}

fn score_rows(values: ArrayView2<f64>, genes: &[usize]) -> Vec<f64> {
    values
        .rows()
        .into_iter()
        .map(|row| genes.iter().map(|&j| row[j]).sum::<f64>() / genes.len() as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KnockoutTarget {
    Spot { id: String },
    /// A uniformly drawn spot among those expressing the gene.
    Random { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub gene: String,
    pub target: KnockoutTarget,
}

impl PerturbationSpec {
    /// Resolve to `(spot, gene)` indices, checking that the spot expresses the gene.
    pub fn resolve(&self, expr: &GeneExpressionMatrix) -> Result<(usize, usize)> {
        let gene = expr.gene_index(&self.gene)?;
        let column = expr.values().column(gene);
        let spot = match &self.target {
            KnockoutTarget::Spot { id } => {
                let spot = expr.spot_index(id)?;
                if column[spot] <= 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "spot {id} does not express {} (value {})",
                        self.gene, column[spot]
                    )));
                }
                spot
            }
            KnockoutTarget::Random { seed } => {
                let candidates: Vec<usize> = (0..expr.n_spots()).filter(|&i| column[i] > 0.0).collect();
                let mut rng = stream_rng(*seed, 0);
                *candidates
                    .choose(&mut rng)
                    .ok_or_else(|| Error::EmptyGroup(format!("no spot expresses {}", self.gene)))?
            }
        };
        Ok((spot, gene))
    }
}

/// Mean signature score of one shell class at every generation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTrace {
    pub group: ShellClass,
    pub n_spots: usize,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationResult {
    pub target_spot: usize,
    pub target_gene: usize,
    pub before: GeneExpressionMatrix,
    pub after: GeneExpressionMatrix,
    pub delta: Array2<f64>,
    pub shells: Vec<ShellClass>,
    pub signature: Vec<usize>,
    /// One entry per shell class present, ordered perturbed, neighbours, unperturbed.
    pub score_trace: Vec<GroupTrace>,
    pub generation: GenerationTrace,
}

impl PerturbationResult {
    pub fn group(&self, class: ShellClass) -> Vec<usize> {
        (0..self.shells.len()).filter(|&i| self.shells[i] == class).collect()
    }

    pub fn trace_of(&self, class: ShellClass) -> Option<&GroupTrace> {
        self.score_trace.iter().find(|t| t.group == class)
    }
}

/// Knock out `spec` in `expr`, relax with [`generate_observed`], and record
/// shell-wise signature scores at every accepted step. Shells come from the
/// graph's coordinates.
pub fn run_knockout(
    expr: &GeneExpressionMatrix,
    graph: &SpatialGraph,
    model: &InteractionModel,
    spec: &PerturbationSpec,
    config: &GenerateConfig,
    radii: &[f64],
    signature: &[usize],
) -> Result<PerturbationResult> {
    if expr.n_genes() != model.n_genes() {
        return Err(Error::Dimension(format!(
            "expression has {} genes, model has {}",
            expr.n_genes(),
            model.n_genes()
        )));
    }
    check_gene_set(expr.n_genes(), signature)?;
    let coords = graph
        .coordinates()
        .ok_or_else(|| Error::InvalidArgument("knockout shells need spot coordinates".into()))?;
    let (spot, gene) = spec.resolve(expr)?;
    let shells = neighbor_shells_by_distance(coords.view(), spot, radii)?;

    let mut classes: Vec<ShellClass> = shells.clone();
    classes.sort();
    classes.dedup();
    let members: Vec<Vec<usize>> = classes
        .iter()
        .map(|c| (0..shells.len()).filter(|&i| shells[i] == *c).collect())
        .collect();
    let mut score_trace: Vec<GroupTrace> = classes
        .iter()
        .zip(&members)
        .map(|(&group, m)| GroupTrace { group, n_spots: m.len(), scores: Vec::new() })
        .collect();

    let mask = FreezeMask::from_entries(expr.n_spots(), expr.n_genes(), &[(spot, gene, 0.0)])?;
    let init = GenerateInit::Provided(expr.clone());
    let (generated, generation) = generate_observed(model, graph, config, &init, Some(&mask), |_, field| {
        let scores = score_rows(field, signature);
        for (trace, m) in score_trace.iter_mut().zip(&members) {
            trace.scores.push(m.iter().map(|&i| scores[i]).sum::<f64>() / m.len() as f64);
        }
    })?;
    let after = GeneExpressionMatrix::new(
        generated.values().clone(),
        expr.spot_ids().to_vec(),
        expr.gene_names().to_vec(),
    )?
    .into_sphere_normalized()?
    .with_provenance(
        expr.provenance()
            .iter()
            .cloned()
            .chain([format!("knockout:{}@{}", spec.gene, expr.spot_ids()[spot])])
            .collect(),
    );
    let delta = after.values() - expr.values();
    Ok(PerturbationResult {
        target_spot: spot,
        target_gene: gene,
        before: expr.clone(),
        after,
        delta,
        shells,
        signature: signature.to_vec(),
        score_trace,
        generation,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneScore {
    pub gene: usize,
    pub name: String,
    pub score: f64,
}

/// Rank genes by `mean delta over group_a - mean delta over group_b`,
/// descending, ties by gene index.
pub fn rank_delta_by_groups(
    delta: ArrayView2<f64>,
    gene_names: &[String],
    group_a: &[usize],
    group_b: &[usize],
) -> Result<Vec<GeneScore>> {
    if group_a.is_empty() || group_b.is_empty() {
        return Err(Error::EmptyGroup("delta ranking needs two nonempty spot groups".into()));
    }
    if gene_names.len() != delta.ncols() {
        return Err(Error::Dimension("gene names do not match delta columns".into()));
    }
    if let Some(&bad) = group_a.iter().chain(group_b).find(|&&i| i >= delta.nrows()) {
        return Err(Error::InvalidArgument(format!("spot index {bad} out of range")));
    }
    let mean = |group: &[usize]| delta.select(Axis(0), group).mean_axis(Axis(0)).expect("nonempty");
    let diff = mean(group_a) - mean(group_b);
    let mut out: Vec<GeneScore> = diff
        .iter()
        .enumerate()
        .map(|(gene, &score)| GeneScore { gene, name: gene_names[gene].clone(), score })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.gene.cmp(&b.gene)));
    Ok(out)
}

pub fn delta_rankings(result: &PerturbationResult, group_a: ShellClass, group_b: ShellClass) -> Result<Vec<GeneScore>> {
    rank_delta_by_groups(
        result.delta.view(),
        result.after.gene_names(),
        &result.group(group_a),
        &result.group(group_b),
    )
}

/// Spearman correlation between two rankings of the same genes. Each list is
/// ordered best-first; genes are matched by name.
pub fn validate_against_observed(predicted: &[String], observed: &[String]) -> Result<TestResult> {
    let (pv, ov) = ranking_vectors(predicted, observed)?;
    spearman(&average_ranks(&pv), &average_ranks(&ov))
}

/// Positions of each gene (in `predicted` order) within both rankings.
pub fn ranking_vectors(predicted: &[String], observed: &[String]) -> Result<(Vec<f64>, Vec<f64>)> {
    use std::collections::HashMap;
    let index = |list: &[String], what: &str| -> Result<HashMap<String, usize>> {
        let mut map = HashMap::with_capacity(list.len());
        for (i, g) in list.iter().enumerate() {
            if map.insert(g.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("gene {g} appears twice in the {what} ranking")));
            }
        }
        Ok(map)
    };
    let pred = index(predicted, "predicted")?;
    let obs = index(observed, "observed")?;
    if pred.len() != obs.len() || pred.keys().any(|g| !obs.contains_key(g)) {
        return Err(Error::GeneMismatch {
            first: "predicted ranking".into(),
            second: "observed ranking".into(),
        });
    }
    let pv: Vec<f64> = (0..predicted.len()).map(|i| i as f64).collect();
    let ov: Vec<f64> = predicted.iter().map(|g| obs[g] as f64).collect();
    Ok((pv, ov))
}

/// Indices of spots farther than `distance` from every spot in `exclusion`.
pub fn exclude_near(coords: ArrayView2<f64>, exclusion: &[usize], distance: f64) -> Result<Vec<usize>> {
    if let Some(&bad) = exclusion.iter().find(|&&i| i >= coords.nrows()) {
        return Err(Error::InvalidArgument(format!("spot index {bad} out of range")));
    }
    if !(distance >= 0.0) {
        return Err(Error::InvalidArgument(format!("exclusion distance must be >= 0, got {distance}")));
    }
    Ok((0..coords.nrows())
        .filter(|&i| {
            exclusion.iter().all(|&e| {
                let d2: f64 = coords
                    .row(i)
                    .iter()
                    .zip(coords.row(e).iter())
                    .map(|(a, b)| (a - b).powi(2))
                    .sum();
                d2.sqrt() > distance
            })
        })
        .collect())
}
