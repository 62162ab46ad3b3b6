use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SpatialGraph;

/// Maximum absolute asymmetry accepted for coupling matrices.
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;

const UNIT_NORM_TOLERANCE: f64 = 1e-9;

/// Spots x genes expression values with their identifiers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneExpressionMatrix {
    values: Array2<f64>,
    spot_ids: Vec<String>,
    gene_names: Vec<String>,
    sphere_normalized: bool,
    provenance: Vec<String>,
}

impl GeneExpressionMatrix {
    pub fn new(values: Array2<f64>, spot_ids: Vec<String>, gene_names: Vec<String>) -> Result<Self> {
        if values.nrows() != spot_ids.len() || values.ncols() != gene_names.len() {
            return Err(Error::Dimension(format!(
                "values are {}x{} but {} spot ids and {} gene names were given",
                values.nrows(),
                values.ncols(),
                spot_ids.len(),
                gene_names.len()
            )));
        }
        if let Some(((i, j), v)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite(format!("expression[{i}, {j}] = {v}")));
        }
        Ok(Self {
            values,
            spot_ids,
            gene_names,
            sphere_normalized: false,
            provenance: Vec::new(),
        })
    }

    /// Wrap a matrix with generated identifiers `spot_<i>` / `gene_<j>`.
    pub fn from_values(values: Array2<f64>) -> Result<Self> {
        let spots = (0..values.nrows()).map(|i| format!("spot_{i}")).collect();
        let genes = (0..values.ncols()).map(|j| format!("gene_{j}")).collect();
        Self::new(values, spots, genes)
    }

    /// Mark the matrix as sphere-normalized after checking every row has unit norm.
    pub fn into_sphere_normalized(mut self) -> Result<Self> {
        for (i, row) in self.values.outer_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(Error::InvalidArgument(format!(
                    "row {} has norm {norm}, expected 1",
                    self.spot_ids[i]
                )));
            }
        }
        self.sphere_normalized = true;
        Ok(self)
    }

    /// Divide every row by its L2 norm.
    pub fn project_to_sphere(mut self) -> Result<Self> {
        for (i, mut row) in self.values.outer_iter_mut().enumerate() {
            let norm = row.dot(&row).sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroRow(self.spot_ids[i].clone()));
            }
            row.mapv_inplace(|v| v / norm);
        }
        self.sphere_normalized = true;
        self.provenance.push("sphere_project".into());
        Ok(self)
    }

    pub fn with_provenance(mut self, steps: Vec<String>) -> Self {
        self.provenance = steps;
        self
    }

    pub(crate) fn set_sphere_flag(&mut self, flag: bool) {
        self.sphere_normalized = flag;
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn spot_ids(&self) -> &[String] {
        &self.spot_ids
    }

    pub fn gene_names(&self) -> &[String] {
        &self.gene_names
    }

    pub fn is_sphere_normalized(&self) -> bool {
        self.sphere_normalized
    }

    pub fn provenance(&self) -> &[String] {
        &self.provenance
    }

    pub fn n_spots(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_genes(&self) -> usize {
        self.values.ncols()
    }

    pub fn gene_index(&self, name: &str) -> Result<usize> {
        self.gene_names
            .iter()
            .position(|g| g == name)
            .ok_or_else(|| Error::GeneNotFound(name.to_string()))
    }

    pub fn spot_index(&self, id: &str) -> Result<usize> {
        self.spot_ids
            .iter()
            .position(|s| s == id)
            .ok_or_else(|| Error::SpotNotFound(id.to_string()))
    }

    /// Rows `keep` (in the given order), preserving flags and provenance.
    pub fn select_spots(&self, keep: &[usize]) -> Self {
        Self {
            values: self.values.select(Axis(0), keep),
            spot_ids: keep.iter().map(|&i| self.spot_ids[i].clone()).collect(),
            gene_names: self.gene_names.clone(),
            sphere_normalized: self.sphere_normalized,
            provenance: self.provenance.clone(),
        }
    }

    /// Columns `keep` (in the given order). Clears the sphere flag, since
    /// dropping genes breaks unit row norms.
    pub fn select_genes(&self, keep: &[usize]) -> Self {
        Self {
            values: self.values.select(Axis(1), keep),
            spot_ids: self.spot_ids.clone(),
            gene_names: keep.iter().map(|&j| self.gene_names[j].clone()).collect(),
            sphere_normalized: false,
            provenance: self.provenance.clone(),
        }
    }
}

/// Symmetric intra-spot coupling plus one symmetric coupling per hop shell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionModel {
    g_intra: Array2<f64>,
    g_shells: Vec<Array2<f64>>,
    q_shells: Vec<f64>,
    gene_names: Vec<String>,
}

fn check_coupling(name: &str, m: &Array2<f64>, n: usize) -> Result<()> {
    if m.dim() != (n, n) {
        return Err(Error::Dimension(format!(
            "{name} is {:?}, expected {n}x{n}",
            m.dim()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(name.to_string()));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[[i, j]] - m[[j, i]]).abs() > SYMMETRY_TOLERANCE {
                return Err(Error::NotSymmetric(name.to_string()));
            }
        }
    }
    Ok(())
}

fn symmetrize(m: &Array2<f64>) -> Array2<f64> {
    (m + &m.t()) * 0.5
}

impl InteractionModel {
    /// Build a model from already-symmetric matrices.
    pub fn new(
        g_intra: Array2<f64>,
        g_shells: Vec<Array2<f64>>,
        q_shells: Vec<f64>,
        gene_names: Vec<String>,
    ) -> Result<Self> {
        let n = gene_names.len();
        if g_shells.len() != q_shells.len() {
            return Err(Error::Dimension(format!(
                "{} shell couplings but {} shell degrees",
                g_shells.len(),
                q_shells.len()
            )));
        }
        if let Some(q) = q_shells.iter().find(|q| !q.is_finite() || **q < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "shell degree must be finite and nonnegative, got {q}"
            )));
        }
        check_coupling("g_intra", &g_intra, n)?;
        for (k, g) in g_shells.iter().enumerate() {
            check_coupling(&format!("g_shell{}", k + 1), g, n)?;
        }
        let mut model = Self {
            g_intra,
            g_shells,
            q_shells,
            gene_names,
        };
        model.force_exact_symmetry();
        Ok(model)
    }

    /// Build a model from arbitrary square matrices, replacing each by `(M + M^T) / 2`.
    pub fn symmetrized(
        g_intra: &Array2<f64>,
        g_shells: &[Array2<f64>],
        q_shells: Vec<f64>,
        gene_names: Vec<String>,
    ) -> Result<Self> {
        let n = gene_names.len();
        let check_square = |name: &str, m: &Array2<f64>| {
            if m.dim() != (n, n) {
                Err(Error::Dimension(format!("{name} is {:?}, expected {n}x{n}", m.dim())))
            } else {
                Ok(())
            }
        };
        check_square("g_intra", g_intra)?;
        for g in g_shells {
            check_square("g_shell", g)?;
        }
        Self::new(
            symmetrize(g_intra),
            g_shells.iter().map(symmetrize).collect(),
            q_shells,
            gene_names,
        )
    }

    pub fn zeros(n_genes: usize, q_shells: Vec<f64>, gene_names: Option<Vec<String>>) -> Result<Self> {
        let names =
            gene_names.unwrap_or_else(|| (0..n_genes).map(|j| format!("gene_{j}")).collect());
        let k = q_shells.len();
        Self::new(
            Array2::zeros((n_genes, n_genes)),
            vec![Array2::zeros((n_genes, n_genes)); k],
            q_shells,
            names,
        )
    }

    /// Copy the upper triangle onto the lower one so that symmetry is exact.
    fn force_exact_symmetry(&mut self) {
        for m in std::iter::once(&mut self.g_intra).chain(self.g_shells.iter_mut()) {
            let n = m.nrows();
            for i in 0..n {
                for j in (i + 1)..n {
                    m[[j, i]] = m[[i, j]];
                }
            }
        }
    }

    pub fn g_intra(&self) -> &Array2<f64> {
        &self.g_intra
    }

    pub fn g_shells(&self) -> &[Array2<f64>] {
        &self.g_shells
    }

    pub fn q_shells(&self) -> &[f64] {
        &self.q_shells
    }

    pub fn gene_names(&self) -> &[String] {
        &self.gene_names
    }

    pub fn n_genes(&self) -> usize {
        self.gene_names.len()
    }

    pub fn n_shells(&self) -> usize {
        self.g_shells.len()
    }

    pub fn with_q_shells(mut self, q_shells: Vec<f64>) -> Result<Self> {
        if q_shells.len() != self.g_shells.len() {
            return Err(Error::Dimension("shell degree count changed".into()));
        }
        self.q_shells = q_shells;
        Ok(self)
    }

    /// All entries (intra first, then each shell) in row-major order.
    pub fn flatten(&self) -> Vec<f64> {
        std::iter::once(&self.g_intra)
            .chain(self.g_shells.iter())
            .flat_map(|m| m.iter().copied())
            .collect()
    }

    /// `self - step * grad`, restricted to the blocks selected by `intra` and `shells`.
    pub(crate) fn descend(&self, grad: &crate::model::ModelGradient, step: f64, intra: bool) -> Self {
        let mut out = self.clone();
        if intra {
            out.g_intra.scaled_add(-step, &grad.d_g_intra);
        }
        for (g, d) in out.g_shells.iter_mut().zip(&grad.d_g_shells) {
            g.scaled_add(-step, d);
        }
        out.force_exact_symmetry();
        out
    }
}

/// Empirical second moments the model must reproduce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficientStatistics {
    /// `s^T s`.
    pub c_intra: Array2<f64>,
    /// `s^T J_k s` for each hop shell.
    pub c_shells: Vec<Array2<f64>>,
    /// Per-gene column means.
    pub m: Array1<f64>,
    pub n_spots: usize,
}

impl SufficientStatistics {
    pub fn n_genes(&self) -> usize {
        self.m.len()
    }

    /// Statistics from raw parts; matrices are checked for shape only.
    pub fn from_parts(
        c_intra: Array2<f64>,
        c_shells: Vec<Array2<f64>>,
        m: Array1<f64>,
        n_spots: usize,
    ) -> Result<Self> {
        let n = m.len();
        if c_intra.dim() != (n, n) || c_shells.iter().any(|c| c.dim() != (n, n)) {
            return Err(Error::Dimension("statistics matrices must be NxN".into()));
        }
        if n_spots == 0 {
            return Err(Error::InvalidArgument("n_spots must be at least 1".into()));
        }
        Ok(Self {
            c_intra,
            c_shells,
            m,
            n_spots,
        })
    }
}

fn exact_symmetric(m: Array2<f64>) -> Array2<f64> {
    let mut out = (&m + &m.t()) * 0.5;
    let n = out.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            out[[j, i]] = out[[i, j]];
        }
    }
    out
}

/// Compute `C' = s^T s`, `C_k = s^T J_k s`, column means and spot count.
pub fn sufficient_statistics(
    expr: &GeneExpressionMatrix,
    graph: &SpatialGraph,
) -> Result<SufficientStatistics> {
    statistics_of(expr.values().view(), graph)
}

pub(crate) fn statistics_of(s: ArrayView2<f64>, graph: &SpatialGraph) -> Result<SufficientStatistics> {
    if s.nrows() != graph.n_spots() {
        return Err(Error::Dimension(format!(
            "expression has {} spots but the graph has {}",
            s.nrows(),
            graph.n_spots()
        )));
    }
    if s.nrows() == 0 {
        return Err(Error::InvalidArgument("expression matrix has no spots".into()));
    }
    let c_intra = exact_symmetric(s.t().dot(&s));
    let c_shells = graph
        .shells()
        .iter()
        .map(|shell| exact_symmetric(s.t().dot(&shell.propagate(s))))
        .collect();
    let m = s.mean_axis(Axis(0)).expect("nonempty");
    Ok(SufficientStatistics {
        c_intra,
        c_shells,
        m,
        n_spots: s.nrows(),
    })
}
