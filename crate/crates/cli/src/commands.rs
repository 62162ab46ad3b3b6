use std::path::Path;

use anyhow::{bail, Context, Result};
use ndarray::Array2;
use serde::Serialize;

use cellcomm::generation::{generate, FreezeMask, GenerateConfig, GenerateInit};
use cellcomm::graph::{build_graph, grid_coordinates, GraphConfig};
use cellcomm::harness::{self, SelfConsistencyConfig, Split, SplitConfig};
use cellcomm::inference::{fit, FitConfig, InitScheme, StopReason};
use cellcomm::io::{self, ModelMeta, NormalizationConfig, RawDataset};
use cellcomm::perturbation::{self, KnockoutTarget, PerturbationSpec, ShellClass};
use cellcomm::{Error, Execution, GeneExpressionMatrix, SpatialGraph};

use crate::report;
use crate::{
    ConsistencyArgs, GraphArgs, GraphOverride, InferArgs, NormalizeArgs, PerturbArgs, SelfcheckArgs, SimulateArgs,
    SplitArg,
};

const UNBOUNDED_NOTE: &str = "fit stopped at the epoch limit; with unit-norm rows the mean-field objective \
                              decreases without bound along the intra-spot identity direction";

fn graph_config(radius: Option<f64>, knn: Option<usize>) -> Option<GraphConfig> {
    match (radius, knn) {
        (Some(r), _) => Some(GraphConfig::radius(r)),
        (None, Some(k)) => Some(GraphConfig::knn(k)),
        (None, None) => None,
    }
}

impl GraphArgs {
    fn config(&self) -> GraphConfig {
        graph_config(self.radius, self.knn).expect("clap requires one of --radius / --knn")
    }
}

impl GraphOverride {
    /// The requested graph, else the one saved with the model.
    fn resolve(&self, meta: &ModelMeta) -> Result<GraphConfig> {
        let shells = meta.n_shells;
        match graph_config(self.radius, self.knn).or(meta.graph_config) {
            Some(cfg) => Ok(cfg.with_max_shell(shells)),
            None => bail!("the model records no graph; pass --radius or --knn"),
        }
    }
}

impl NormalizeArgs {
    fn config(&self) -> NormalizationConfig {
        NormalizationConfig {
            cpm: !self.no_cpm,
            log1p: !self.no_log1p,
            min_cells_per_gene: self.min_cells,
            sphere_project: true,
        }
    }

    fn crop(&self, raw: RawDataset) -> Result<RawDataset> {
        if self.crop_x.is_none() && self.crop_y.is_none() {
            return Ok(raw);
        }
        let bounds = |b: &Option<Vec<f64>>| b.as_ref().map_or((f64::NEG_INFINITY, f64::INFINITY), |v| (v[0], v[1]));
        Ok(io::crop_to_bbox(&raw, bounds(&self.crop_x), bounds(&self.crop_y))?)
    }
}

fn coordinates_of(raw: &RawDataset) -> Result<&Array2<f64>> {
    raw.coordinates().context("dataset has no coordinates")
}

#[derive(Serialize)]
struct InferConfig<'a> {
    args: &'a InferArgs,
    graph: GraphConfig,
    fit: FitConfig,
    normalization: NormalizationConfig,
    execution: Execution,
}

#[derive(Serialize)]
struct InferResults {
    n_spots: usize,
    n_genes: usize,
    genes: Vec<String>,
    dropped_genes: Vec<String>,
    zero_rows: Vec<String>,
    q_shells: Vec<f64>,
    n_edges: usize,
    epochs: usize,
    final_nll: f64,
    final_grad_norm: f64,
    stop: StopReason,
}

pub fn infer(args: &InferArgs, exec: Execution) -> Result<()> {
    let raw = io::load_dataset(&args.counts, Some(&args.coords), args.format.into())?;
    let raw = args.normalize.crop(raw)?;
    let norm = args.normalize.config();
    let (expr, norm_report) = io::normalize_with_report(&raw, &norm)?;
    let graph_cfg = args.graph.config().with_max_shell(args.khops);
    let graph = build_graph(coordinates_of(&raw)?.view(), &graph_cfg, exec)?;
    let fit_cfg = FitConfig {
        learning_rate: args.lr,
        max_epochs: args.epochs,
        grad_tolerance: args.grad_tol,
        init: if args.init_scale > 0.0 {
            InitScheme::Uniform { half_width: args.init_scale }
        } else {
            InitScheme::Zeros
        },
        seed: args.seed,
        train_intra: !args.freeze_intra,
    };
    let (model, trace) = fit(&expr, &graph, &fit_cfg)?;

    let mut meta = ModelMeta::for_model(&model);
    meta.fit_config = Some(fit_cfg);
    meta.graph_config = Some(graph_cfg);
    meta.normalization = Some(norm);
    meta.provenance = expr.provenance().to_vec();
    meta.seed = Some(args.seed);
    io::save_model(&args.out, &model, Some(&trace), &meta)?;

    let mut warnings = Vec::new();
    if !norm_report.zero_rows.is_empty() {
        warnings.push(format!("{} spots have zero counts", norm_report.zero_rows.len()));
    }
    if trace.stop == StopReason::MaxIterations && fit_cfg.train_intra {
        warnings.push(UNBOUNDED_NOTE.into());
    }
    let last = trace.records.last().expect("epoch 0 is always recorded");
    let results = InferResults {
        n_spots: expr.n_spots(),
        n_genes: expr.n_genes(),
        genes: expr.gene_names().to_vec(),
        dropped_genes: norm_report.dropped_genes,
        zero_rows: norm_report.zero_rows,
        q_shells: graph.q_shells(),
        n_edges: graph.base().edge_count(),
        epochs: last.epoch,
        final_nll: last.nll,
        final_grad_norm: last.grad_norm,
        stop: trace.stop,
    };
    let config = InferConfig {
        args,
        graph: graph_cfg,
        fit: fit_cfg,
        normalization: norm,
        execution: exec,
    };
    report::write(&args.out.join("report.json"), "infer", config, results, warnings)
}

#[derive(Serialize)]
struct SimulateConfig<'a> {
    args: &'a SimulateArgs,
    graph: GraphConfig,
    generation: GenerateConfig,
}

#[derive(Serialize)]
struct SimulateResults {
    n_spots: usize,
    n_genes: usize,
    n_frozen: usize,
    steps: usize,
    hamiltonian_initial: f64,
    hamiltonian_final: f64,
    stop: StopReason,
    q_shells: Vec<f64>,
}

pub fn simulate(args: &SimulateArgs, exec: Execution) -> Result<()> {
    let saved = io::load_model(&args.model)?;
    let model = &saved.model;
    let (spot_ids, coords, graph_cfg) = match (&args.coords, args.grid) {
        (Some(path), _) => {
            let (ids, coords) = io::read_coordinates(path)?;
            (ids, coords, args.graph.resolve(&saved.meta)?)
        }
        (None, Some(side)) => {
            let coords = grid_coordinates(side, 1.0);
            let ids = (0..side * side).map(|i| format!("spot_{i}")).collect();
            (ids, coords, GraphConfig::radius(harness::GRID_RADIUS).with_max_shell(model.n_shells()))
        }
        (None, None) => unreachable!("clap requires --coords or --grid"),
    };
    let graph = build_graph(coords.view(), &graph_cfg, exec)?;

    let init = match &args.init {
        Some(path) => {
            let expr = io::read_expression_csv(path)?;
            if expr.spot_ids() != spot_ids.as_slice() {
                bail!("spot ids in {} must match the layout, in order", path.display());
            }
            if expr.gene_names() != model.gene_names() {
                return Err(Error::GeneMismatch {
                    first: path.display().to_string(),
                    second: "model".into(),
                }
                .into());
            }
            GenerateInit::Provided(expr.project_to_sphere()?)
        }
        None => GenerateInit::Noise,
    };
    let mask = match &args.freeze {
        Some(path) => Some(freeze_mask(path, &spot_ids, model.gene_names())?),
        None => None,
    };
    let gen_cfg = GenerateConfig {
        step_size: args.step_size,
        max_steps: args.steps,
        seed: args.seed,
        ..GenerateConfig::default()
    };
    let (field, trace) = generate(model, &graph, &gen_cfg, &init, mask.as_ref())?;
    let field = GeneExpressionMatrix::new(field.values().clone(), spot_ids, model.gene_names().to_vec())?;
    io::write_expression_csv(&args.out, &field)?;

    let mut warnings = Vec::new();
    if trace.stop == StopReason::MaxIterations {
        warnings.push("generation stopped at the step limit before the field settled".into());
    }
    let results = SimulateResults {
        n_spots: field.n_spots(),
        n_genes: field.n_genes(),
        n_frozen: mask.as_ref().map_or(0, FreezeMask::n_frozen),
        steps: trace.hamiltonian.len() - 1,
        hamiltonian_initial: trace.hamiltonian[0],
        hamiltonian_final: *trace.hamiltonian.last().expect("nonempty"),
        stop: trace.stop,
        q_shells: graph.q_shells(),
    };
    let config = SimulateConfig {
        args,
        graph: graph_cfg,
        generation: gen_cfg,
    };
    report::write(&args.out.with_extension("json"), "simulate", config, results, warnings)
}

fn freeze_mask(path: &Path, spot_ids: &[String], genes: &[String]) -> Result<FreezeMask> {
    let entries = io::read_freeze_entries(path)?;
    let resolved = entries
        .iter()
        .map(|(spot, gene, v)| {
            let i = spot_ids
                .iter()
                .position(|s| s == spot)
                .ok_or_else(|| Error::SpotNotFound(spot.clone()))?;
            let j = genes
                .iter()
                .position(|g| g == gene)
                .ok_or_else(|| Error::GeneNotFound(gene.clone()))?;
            Ok((i, j, *v))
        })
        .collect::<std::result::Result<Vec<_>, Error>>()?;
    Ok(FreezeMask::from_entries(spot_ids.len(), genes.len(), &resolved)?)
}

#[derive(Serialize)]
struct PerturbConfig<'a> {
    args: &'a PerturbArgs,
    graph: GraphConfig,
    generation: GenerateConfig,
    normalization: NormalizationConfig,
    /// Marker-high cells are those with a detected (> 0) marker value.
    signature_rule: &'static str,
    ranking_statistic: &'static str,
}

#[derive(Serialize)]
struct ShellCount {
    class: String,
    n_spots: usize,
    score_initial: f64,
    score_final: f64,
}

#[derive(Serialize)]
struct RankingValidation {
    rho: f64,
    p_value: f64,
    method: cellcomm::stats::Method,
}

#[derive(Serialize)]
struct PerturbResults {
    target_spot: String,
    target_gene: String,
    signature: Vec<String>,
    shells: Vec<ShellCount>,
    steps: usize,
    stop: StopReason,
    hamiltonian_initial: f64,
    hamiltonian_final: f64,
    top_ranked: Vec<cellcomm::perturbation::GeneScore>,
    validation: Option<RankingValidation>,
}

pub fn perturb(args: &PerturbArgs, exec: Execution) -> Result<()> {
    let saved = io::load_model(&args.model)?;
    let model = &saved.model;
    if !model.gene_names().contains(&args.gene) {
        return Err(Error::GeneNotFound(format!("{} (not in the model's gene panel)", args.gene)).into());
    }
    let raw = io::load_dataset(&args.counts, Some(&args.coords), args.format.into())?;
    let raw = raw.select_genes(model.gene_names())?;
    // the gene panel is fixed by the model, so no detection filter here
    let norm = NormalizationConfig {
        cpm: !args.no_cpm,
        log1p: !args.no_log1p,
        min_cells_per_gene: 0,
        sphere_project: true,
    };
    let expr = io::normalize(&raw, &norm)?;
    let graph_cfg = args.graph.resolve(&saved.meta)?;
    let graph = build_graph(coordinates_of(&raw)?.view(), &graph_cfg, exec)?;

    let mut warnings = Vec::new();
    let marker = args.signature_marker.as_deref().unwrap_or(&args.gene);
    let mut top = args.signature_top;
    if top >= expr.n_genes() {
        top = expr.n_genes() - 1;
        warnings.push(format!(
            "signature size {} exceeds the panel; using all {top} non-marker genes",
            args.signature_top
        ));
    }
    let signature = perturbation::derive_signature(&expr, marker, top)?;
    let target = if args.target == "random" {
        KnockoutTarget::Random { seed: args.seed }
    } else {
        KnockoutTarget::Spot { id: args.target.clone() }
    };
    let spec = PerturbationSpec {
        gene: args.gene.clone(),
        target,
    };
    let gen_cfg = GenerateConfig {
        step_size: args.step_size,
        max_steps: args.steps,
        seed: args.seed,
        ..GenerateConfig::default()
    };
    let result = perturbation::run_knockout(&expr, &graph, model, &spec, &gen_cfg, &args.radii, &signature)?;

    let first = ShellClass::Neighbor(1);
    let rankings = match perturbation::delta_rankings(&result, first, ShellClass::Unperturbed) {
        Ok(r) => r,
        Err(Error::EmptyGroup(_)) => {
            warnings.push("shell 1 or the unperturbed group is empty; ranking perturbed vs all other spots".into());
            let rest: Vec<usize> = (0..expr.n_spots()).filter(|&i| i != result.target_spot).collect();
            perturbation::rank_delta_by_groups(
                result.delta.view(),
                expr.gene_names(),
                &[result.target_spot],
                &rest,
            )?
        }
        Err(e) => return Err(e.into()),
    };
    let validation = match &args.observed_ranking {
        Some(path) => {
            let observed = io::read_name_list(path)?;
            let predicted: Vec<String> = rankings.iter().map(|g| g.name.clone()).collect();
            let t = perturbation::validate_against_observed(&predicted, &observed)?;
            Some(RankingValidation {
                rho: t.statistic,
                p_value: t.p_value,
                method: t.method,
            })
        }
        None => None,
    };

    let out = &args.out;
    io::write_expression_csv(&out.join("before.csv"), &result.before)?;
    io::write_expression_csv(&out.join("after.csv"), &result.after)?;
    io::write_labelled_matrix(
        &out.join("delta.csv"),
        "spot_id",
        expr.spot_ids(),
        expr.gene_names(),
        &result.delta,
    )?;
    let labels: Vec<String> = result.score_trace.iter().map(|t| t.group.label()).collect();
    let steps = result.generation.hamiltonian.len();
    let traces = Array2::from_shape_fn((steps, labels.len()), |(s, g)| result.score_trace[g].scores[s]);
    let step_ids: Vec<String> = (0..steps).map(|s| s.to_string()).collect();
    io::write_labelled_matrix(&out.join("score_trace.csv"), "step", &step_ids, &labels, &traces)?;
    write_table(
        &out.join("shells.csv"),
        &["spot_id", "class"],
        expr.spot_ids().iter().zip(&result.shells).map(|(id, c)| vec![id.clone(), c.label()]),
    )?;
    write_table(
        &out.join("rankings.csv"),
        &["rank", "gene", "score"],
        rankings
            .iter()
            .enumerate()
            .map(|(r, g)| vec![(r + 1).to_string(), g.name.clone(), g.score.to_string()]),
    )?;

    if result.generation.stop == StopReason::MaxIterations {
        warnings.push("generation stopped at the step limit before the field settled".into());
    }
    let results = PerturbResults {
        target_spot: expr.spot_ids()[result.target_spot].clone(),
        target_gene: args.gene.clone(),
        signature: signature.iter().map(|&j| expr.gene_names()[j].clone()).collect(),
        shells: result
            .score_trace
            .iter()
            .map(|t| ShellCount {
                class: t.group.label(),
                n_spots: t.n_spots,
                score_initial: t.scores[0],
                score_final: *t.scores.last().expect("nonempty"),
            })
            .collect(),
        steps: steps - 1,
        stop: result.generation.stop,
        hamiltonian_initial: result.generation.hamiltonian[0],
        hamiltonian_final: *result.generation.hamiltonian.last().expect("nonempty"),
        top_ranked: rankings.into_iter().take(25).collect(),
        validation,
    };
    let config = PerturbConfig {
        args,
        graph: graph_cfg,
        generation: gen_cfg,
        normalization: norm,
        signature_rule: "marker > 0 vs marker == 0",
        ranking_statistic: "mean delta (neighbor1) - mean delta (unperturbed)",
    };
    report::write(&out.join("report.json"), "perturb", config, results, warnings)
}

fn write_table(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut text = header.join(",");
    text.push('\n');
    for row in rows {
        text.push_str(&row.join(","));
        text.push('\n');
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct SelfcheckConfig<'a> {
    args: &'a SelfcheckArgs,
    harness: SelfConsistencyConfig,
    graph: GraphConfig,
}

pub fn selfcheck(args: &SelfcheckArgs, exec: Execution) -> Result<()> {
    let defaults = SelfConsistencyConfig::default();
    let cfg = SelfConsistencyConfig {
        n_genes: args.genes,
        grid_side: args.grid,
        coupling_scale: args.scale,
        generation: GenerateConfig {
            max_steps: args.steps,
            ..defaults.generation
        },
        fit: FitConfig {
            learning_rate: args.lr,
            max_epochs: args.epochs,
            init: InitScheme::Uniform { half_width: args.scale },
            ..defaults.fit
        },
        n_repeats: args.repeats,
        n_perm: args.perms,
        seed: args.seed,
    };
    let report = harness::self_consistency(&cfg, exec)?;
    let mut warnings = Vec::new();
    if report.n_degenerate > 0 {
        warnings.push(format!(
            "{} repeats have a constant truth or fit; their rho is undefined and was not computed",
            report.n_degenerate
        ));
    }
    if report.repeats.iter().any(|r| r.fit_stop == StopReason::MaxIterations) {
        warnings.push(UNBOUNDED_NOTE.into());
    }
    let config = SelfcheckConfig {
        args,
        harness: cfg,
        graph: GraphConfig::radius(harness::GRID_RADIUS),
    };
    report::write(&args.out, "selfcheck", config, report, warnings)
}

#[derive(Serialize)]
struct ConsistencyConfig<'a> {
    args: &'a ConsistencyArgs,
    graph: GraphConfig,
    split: SplitConfig,
    normalization: NormalizationConfig,
}

#[derive(Serialize)]
struct ConsistencyResults {
    genes: Vec<String>,
    above_95th_percentile: bool,
    #[serde(flatten)]
    split: harness::SplitReport,
}

pub fn consistency(args: &ConsistencyArgs, exec: Execution) -> Result<()> {
    if args.counts.len() != args.coords.len() {
        bail!(
            "{} counts files but {} coordinates files",
            args.counts.len(),
            args.coords.len()
        );
    }
    let expected = match args.split {
        SplitArg::Parity => 1,
        SplitArg::ByFile => 2,
    };
    if args.counts.len() != expected {
        bail!(
            "--split {} needs exactly {expected} counts file(s), got {}",
            match args.split {
                SplitArg::Parity => "parity",
                SplitArg::ByFile => "by-file",
            },
            args.counts.len()
        );
    }
    let datasets = args
        .counts
        .iter()
        .zip(&args.coords)
        .map(|(c, x)| args.normalize.crop(io::load_dataset(c, Some(x), args.format.into())?))
        .collect::<Result<Vec<_>>>()?;

    // genes passing the detection filter in every input, in first-file order
    let mut genes = datasets[0].detected_genes(args.normalize.min_cells);
    for d in &datasets[1..] {
        let kept = d.detected_genes(args.normalize.min_cells);
        genes.retain(|g| kept.contains(g));
    }
    if genes.is_empty() {
        return Err(Error::AllGenesFiltered.into());
    }
    let norm = NormalizationConfig {
        min_cells_per_gene: 0,
        ..args.normalize.config()
    };
    let graph_cfg = args.graph.config().with_max_shell(args.khops);
    let parts = datasets
        .iter()
        .map(|d| -> Result<(GeneExpressionMatrix, SpatialGraph)> {
            let d = d.select_genes(&genes)?;
            let expr = io::normalize(&d, &norm)?;
            let graph = build_graph(coordinates_of(&d)?.view(), &graph_cfg, exec)?;
            Ok((expr, graph))
        })
        .collect::<Result<Vec<_>>>()?;
    let split_cfg = SplitConfig {
        fit: FitConfig {
            learning_rate: args.lr,
            max_epochs: args.epochs,
            init: if args.init_scale > 0.0 {
                InitScheme::Uniform { half_width: args.init_scale }
            } else {
                InitScheme::Zeros
            },
            seed: args.seed,
            ..FitConfig::default()
        },
        n_perm: args.perms,
        seed: args.seed,
    };
    let mut parts = parts.into_iter();
    let split = match args.split {
        SplitArg::Parity => {
            let (expr, graph) = parts.next().expect("one dataset");
            harness::split_consistency(&expr, &graph, &Split::Parity, &split_cfg, exec)?
        }
        SplitArg::ByFile => {
            let a = parts.next().expect("two datasets");
            let b = parts.next().expect("two datasets");
            harness::paired_consistency([a, b], &split_cfg, exec)?
        }
    };
    let mut warnings = Vec::new();
    if split.stops.contains(&StopReason::MaxIterations) {
        warnings.push(UNBOUNDED_NOTE.into());
    }
    let results = ConsistencyResults {
        genes,
        above_95th_percentile: split.final_rho > split.null.percentile_95,
        split,
    };
    let config = ConsistencyConfig {
        args,
        graph: graph_cfg,
        split: split_cfg,
        normalization: norm,
    };
    report::write(&args.out, "consistency", config, results, warnings)
}
