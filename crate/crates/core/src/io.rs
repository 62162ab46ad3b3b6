//! Reading and writing datasets, normalizing counts, and persisting models.
//!
//! Formats:
//! - dense CSV: header `<corner>,gene_1,...,gene_N`, then one row per spot
//!   starting with the spot id;
//! - Matrix Market coordinate files with `genes.txt` / `spots.txt` (one name per
//!   line) next to the `.mtx` file. The matrix may be stored spots x genes or
//!   genes x spots; the sidecar lengths decide, and a square matrix is read as
//!   spots x genes;
//! - coordinates CSV with header `spot_id,x,y`.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so reading
//! back what was written is bit-exact.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GraphConfig;
use crate::inference::{EpochRecord, FitConfig, FitTrace, StopReason};
use crate::model::{GeneExpressionMatrix, InteractionModel};

pub const GENES_SIDECAR: &str = "genes.txt";
pub const SPOTS_SIDECAR: &str = "spots.txt";
pub const CPM_TARGET: f64 = 1e6;

/// Raw counts with identifiers and optional spot coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    counts: Array2<f64>,
    spot_ids: Vec<String>,
    gene_names: Vec<String>,
    coordinates: Option<Array2<f64>>,
}

impl RawDataset {
    pub fn new(
        counts: Array2<f64>,
        spot_ids: Vec<String>,
        gene_names: Vec<String>,
        coordinates: Option<Array2<f64>>,
    ) -> Result<Self> {
        if counts.nrows() != spot_ids.len() || counts.ncols() != gene_names.len() {
            return Err(Error::Dimension(format!(
                "counts are {}x{} but {} spot ids and {} gene names were given",
                counts.nrows(),
                counts.ncols(),
                spot_ids.len(),
                gene_names.len()
            )));
        }
        if let Some(((i, j), v)) = counts.indexed_iter().find(|(_, v)| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "count at spot {} gene {} is {v}; counts must be finite and nonnegative",
                spot_ids[i], gene_names[j]
            )));
        }
        if let Some(c) = &coordinates {
            if c.dim() != (spot_ids.len(), 2) {
                return Err(Error::Dimension(format!(
                    "coordinates are {:?}, expected {}x2",
                    c.dim(),
                    spot_ids.len()
                )));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("spot coordinates".into()));
            }
        }
        check_unique("spot", &spot_ids, Path::new("<memory>"))?;
        check_unique("gene", &gene_names, Path::new("<memory>"))?;
        Ok(Self {
            counts,
            spot_ids,
            gene_names,
            coordinates,
        })
    }

    pub fn counts(&self) -> &Array2<f64> {
        &self.counts
    }

    pub fn spot_ids(&self) -> &[String] {
        &self.spot_ids
    }

    pub fn gene_names(&self) -> &[String] {
        &self.gene_names
    }

    pub fn coordinates(&self) -> Option<&Array2<f64>> {
        self.coordinates.as_ref()
    }

    pub fn n_spots(&self) -> usize {
        self.counts.nrows()
    }

    pub fn n_genes(&self) -> usize {
        self.counts.ncols()
    }

    pub fn with_coordinates(self, coordinates: Array2<f64>) -> Result<Self> {
        Self::new(self.counts, self.spot_ids, self.gene_names, Some(coordinates))
    }

    /// Columns named in `genes`, in that order.
    pub fn select_genes(&self, genes: &[String]) -> Result<Self> {
        let index: HashMap<&str, usize> = self.gene_names.iter().enumerate().map(|(j, g)| (g.as_str(), j)).collect();
        let keep = genes
            .iter()
            .map(|g| index.get(g.as_str()).copied().ok_or_else(|| Error::GeneNotFound(g.clone())))
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            self.counts.select(Axis(1), &keep),
            self.spot_ids.clone(),
            genes.to_vec(),
            self.coordinates.clone(),
        )
    }

    /// Genes detected (count > 0) in at least `min_cells` spots.
    pub fn detected_genes(&self, min_cells: usize) -> Vec<String> {
        (0..self.n_genes())
            .filter(|&j| self.counts.column(j).iter().filter(|v| **v > 0.0).count() >= min_cells)
            .map(|j| self.gene_names[j].clone())
            .collect()
    }

    pub fn select_spots(&self, keep: &[usize]) -> Self {
        Self {
            counts: self.counts.select(Axis(0), keep),
            spot_ids: keep.iter().map(|&i| self.spot_ids[i].clone()).collect(),
            gene_names: self.gene_names.clone(),
            coordinates: self.coordinates.as_ref().map(|c| c.select(Axis(0), keep)),
        }
    }
}

fn check_unique(kind: &'static str, ids: &[String], path: &Path) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateId {
                kind,
                id: id.clone(),
                path: path.to_path_buf(),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    DenseCsv,
    MatrixMarket,
}

impl std::str::FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense-csv" | "csv" => Ok(DataFormat::DenseCsv),
            "mtx" | "matrix-market" => Ok(DataFormat::MatrixMarket),
            other => Err(Error::InvalidArgument(format!(
                "unknown format `{other}` (expected dense-csv or mtx)"
            ))),
        }
    }
}

fn parse_error(path: &Path, line: u64, column: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        column,
        message: message.into(),
    }
}

fn csv_error(path: &Path, err: csv::Error) -> Error {
    let line = err.position().map_or(0, |p| p.line());
    match err.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => parse_error(
            path,
            line,
            len + 1,
            format!("expected {expected_len} fields, found {len}"),
        ),
        other => parse_error(path, line, 0, format!("{other:?}")),
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn parse_number(path: &Path, line: u64, column: u64, field: &str) -> Result<f64> {
    match field.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(parse_error(path, line, column, format!("expected a finite number, found `{field}`"))),
    }
}

/// Rows of a CSV with a header: `(header, [(line, record)])`.
fn read_csv_table(path: &Path) -> Result<(csv::StringRecord, Vec<(u64, csv::StringRecord)>)> {
    let mut reader = csv_reader(path)?;
    let mut records = reader.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| csv_error(path, e))?,
        None => return Err(parse_error(path, 1, 1, "file is empty")),
    };
    let mut rows = Vec::new();
    for record in records {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        rows.push((line, record));
    }
    Ok((header, rows))
}

/// Spot-labelled dense table: returns `(row ids, column names, values)`.
fn read_labelled_matrix(path: &Path) -> Result<(Vec<String>, Vec<String>, Array2<f64>)> {
    let (header, rows) = read_csv_table(path)?;
    if header.len() < 2 {
        return Err(parse_error(path, 1, 1, "header needs an id column and at least one value column"));
    }
    let columns: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut ids = Vec::with_capacity(rows.len());
    let mut values = Vec::with_capacity(rows.len() * columns.len());
    for (line, record) in &rows {
        ids.push(record[0].to_string());
        for (c, field) in record.iter().enumerate().skip(1) {
            values.push(parse_number(path, *line, c as u64 + 1, field)?);
        }
    }
    let matrix = Array2::from_shape_vec((ids.len(), columns.len()), values).expect("row lengths checked by csv");
    Ok((ids, columns, matrix))
}

fn read_dense_counts(path: &Path) -> Result<(Array2<f64>, Vec<String>, Vec<String>)> {
    let (spots, genes, counts) = read_labelled_matrix(path)?;
    check_unique("gene", &genes, path)?;
    check_unique("spot", &spots, path)?;
    if let Some(((i, j), v)) = counts.indexed_iter().find(|(_, v)| **v < 0.0) {
        return Err(parse_error(
            path,
            i as u64 + 2,
            j as u64 + 2,
            format!("negative count {v}"),
        ));
    }
    Ok((counts, spots, genes))
}

fn read_names(path: &Path, kind: &'static str) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let names: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    check_unique(kind, &names, path)?;
    Ok(names)
}

fn sidecar(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or_else(|| Path::new(".")).join(name)
}

fn read_matrix_market(path: &Path) -> Result<(Array2<f64>, Vec<String>, Vec<String>)> {
    let genes = read_names(&sidecar(path, GENES_SIDECAR), "gene")?;
    let spots = read_names(&sidecar(path, SPOTS_SIDECAR), "spot")?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i as u64 + 1, l));

    let (_, banner) = lines.next().ok_or_else(|| parse_error(path, 1, 1, "file is empty"))?;
    let banner_fields: Vec<String> = banner.split_whitespace().map(str::to_lowercase).collect();
    if banner_fields.len() < 4 || banner_fields[0] != "%%matrixmarket" || banner_fields[1] != "matrix" {
        return Err(parse_error(path, 1, 1, "missing %%MatrixMarket matrix header"));
    }
    if banner_fields[2] != "coordinate" {
        return Err(parse_error(path, 1, 1, "only coordinate matrices are supported"));
    }
    let pattern = match banner_fields[3].as_str() {
        "real" | "integer" => false,
        "pattern" => true,
        other => return Err(parse_error(path, 1, 1, format!("unsupported field type `{other}`"))),
    };
    if banner_fields.get(4).is_some_and(|s| s != "general") {
        return Err(parse_error(path, 1, 1, "only general (unsymmetric) storage is supported"));
    }

    let mut body = lines.filter(|(_, l)| !l.trim_start().starts_with('%') && !l.trim().is_empty());
    let (size_line, size) = body.next().ok_or_else(|| parse_error(path, 2, 1, "missing size line"))?;
    let dims: Vec<usize> = size
        .split_whitespace()
        .enumerate()
        .map(|(c, f)| {
            f.parse::<usize>()
                .map_err(|_| parse_error(path, size_line, c as u64 + 1, format!("expected an integer, found `{f}`")))
        })
        .collect::<Result<_>>()?;
    if dims.len() != 3 {
        return Err(parse_error(path, size_line, 1, "size line needs rows, columns and entry count"));
    }
    let (rows, cols, nnz) = (dims[0], dims[1], dims[2]);
    let transposed = if rows == spots.len() && cols == genes.len() {
        false
    } else if rows == genes.len() && cols == spots.len() {
        true
    } else {
        return Err(Error::Dimension(format!(
            "{} is {rows}x{cols} but the sidecars list {} spots and {} genes",
            path.display(),
            spots.len(),
            genes.len()
        )));
    };

    let mut counts = Array2::<f64>::zeros((spots.len(), genes.len()));
    let mut seen = HashSet::with_capacity(nnz);
    let mut n_entries = 0usize;
    for (line, entry) in body {
        let fields: Vec<&str> = entry.split_whitespace().collect();
        let expected = if pattern { 2 } else { 3 };
        if fields.len() != expected {
            return Err(parse_error(path, line, 1, format!("expected {expected} fields, found {}", fields.len())));
        }
        let index = |c: usize, bound: usize| -> Result<usize> {
            match fields[c].parse::<usize>() {
                Ok(v) if v >= 1 && v <= bound => Ok(v - 1),
                _ => Err(parse_error(
                    path,
                    line,
                    c as u64 + 1,
                    format!("expected an index in 1..={bound}, found `{}`", fields[c]),
                )),
            }
        };
        let (r, c) = (index(0, rows)?, index(1, cols)?);
        let v = if pattern { 1.0 } else { parse_number(path, line, 3, fields[2])? };
        if v < 0.0 {
            return Err(parse_error(path, line, 3, format!("negative count {v}")));
        }
        if !seen.insert((r, c)) {
            return Err(parse_error(path, line, 1, format!("duplicate entry ({}, {})", r + 1, c + 1)));
        }
        let (spot, gene) = if transposed { (c, r) } else { (r, c) };
        counts[[spot, gene]] = v;
        n_entries += 1;
    }
    if n_entries != nnz {
        return Err(parse_error(
            path,
            size_line,
            3,
            format!("size line announces {nnz} entries but {n_entries} were found"),
        ));
    }
    Ok((counts, spots, genes))
}

/// `spot_id,x,y` rows keyed by spot id.
pub fn read_coordinates(path: &Path) -> Result<(Vec<String>, Array2<f64>)> {
    let (header, rows) = read_csv_table(path)?;
    let names: Vec<&str> = header.iter().collect();
    if names != ["spot_id", "x", "y"] {
        return Err(parse_error(path, 1, 1, "coordinates header must be `spot_id,x,y`"));
    }
    let (ids, _, coords) = read_labelled_matrix(path)?;
    check_unique("spot", &ids, path)?;
    debug_assert_eq!(ids.len(), rows.len());
    Ok((ids, coords))
}

/// Reorder coordinates to follow `spot_ids`. Every counts spot must have
/// coordinates and vice versa.
fn join_coordinates(spot_ids: &[String], coord_ids: &[String], coords: &Array2<f64>) -> Result<Array2<f64>> {
    let index: HashMap<&str, usize> = coord_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut out = Array2::zeros((spot_ids.len(), 2));
    for (i, id) in spot_ids.iter().enumerate() {
        let &row = index.get(id.as_str()).ok_or_else(|| Error::IdMismatch {
            spot: id.clone(),
            problem: "missing from the coordinates file".into(),
        })?;
        out.row_mut(i).assign(&coords.row(row));
    }
    if coord_ids.len() != spot_ids.len() {
        let known: HashSet<&str> = spot_ids.iter().map(String::as_str).collect();
        let extra = coord_ids.iter().find(|id| !known.contains(id.as_str())).expect("lengths differ");
        return Err(Error::IdMismatch {
            spot: extra.clone(),
            problem: "in the coordinates file but not in the counts".into(),
        });
    }
    Ok(out)
}

pub fn load_dataset(counts_path: &Path, coords_path: Option<&Path>, format: DataFormat) -> Result<RawDataset> {
    let (counts, spots, genes) = match format {
        DataFormat::DenseCsv => read_dense_counts(counts_path)?,
        DataFormat::MatrixMarket => read_matrix_market(counts_path)?,
    };
    let coordinates = match coords_path {
        Some(p) => {
            let (ids, coords) = read_coordinates(p)?;
            Some(join_coordinates(&spots, &ids, &coords)?)
        }
        None => None,
    };
    RawDataset::new(counts, spots, genes, coordinates)
}

fn create(path: &Path) -> Result<fs::File> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::WriterBuilder::new().has_headers(false).from_writer(create(path)?))
}

fn write_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| csv_error(path, e)
}

/// Write a labelled matrix: header `corner,col...`, then `row_id,value...`.
pub fn write_labelled_matrix(
    path: &Path,
    corner: &str,
    row_ids: &[String],
    columns: &[String],
    values: &Array2<f64>,
) -> Result<()> {
    if values.dim() != (row_ids.len(), columns.len()) {
        return Err(Error::Dimension("labels do not match the matrix shape".into()));
    }
    let mut w = csv_writer(path)?;
    w.write_record(std::iter::once(corner).chain(columns.iter().map(String::as_str)))
        .map_err(write_err(path))?;
    for (id, row) in row_ids.iter().zip(values.outer_iter()) {
        w.write_record(std::iter::once(id.clone()).chain(row.iter().map(|v| v.to_string())))
            .map_err(write_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Dense expression values (any sign) in the dense CSV layout.
pub fn read_expression_csv(path: &Path) -> Result<GeneExpressionMatrix> {
    let (spots, genes, values) = read_labelled_matrix(path)?;
    check_unique("spot", &spots, path)?;
    check_unique("gene", &genes, path)?;
    GeneExpressionMatrix::new(values, spots, genes)
}

/// Nonempty trimmed lines, e.g. a gene ranking.
pub fn read_name_list(path: &Path) -> Result<Vec<String>> {
    read_names(path, "name")
}

pub fn write_dense_csv(path: &Path, data: &RawDataset) -> Result<()> {
    write_labelled_matrix(path, "spot_id", &data.spot_ids, &data.gene_names, &data.counts)
}

pub fn write_expression_csv(path: &Path, expr: &GeneExpressionMatrix) -> Result<()> {
    write_labelled_matrix(path, "spot_id", expr.spot_ids(), expr.gene_names(), expr.values())
}

/// Write `path` (spots x genes, coordinate format) plus the two sidecars in
/// the same directory.
pub fn write_matrix_market(path: &Path, data: &RawDataset) -> Result<()> {
    use std::io::Write;
    let mut out = String::from("%%MatrixMarket matrix coordinate real general\n");
    let nnz = data.counts.iter().filter(|v| **v != 0.0).count();
    out.push_str(&format!("{} {} {}\n", data.n_spots(), data.n_genes(), nnz));
    for ((i, j), v) in data.counts.indexed_iter() {
        if *v != 0.0 {
            out.push_str(&format!("{} {} {}\n", i + 1, j + 1, v));
        }
    }
    create(path)?.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    for (name, ids) in [(GENES_SIDECAR, &data.gene_names), (SPOTS_SIDECAR, &data.spot_ids)] {
        let p = sidecar(path, name);
        let mut text = ids.join("\n");
        text.push('\n');
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

pub fn write_coordinates(path: &Path, spot_ids: &[String], coords: &Array2<f64>) -> Result<()> {
    write_labelled_matrix(path, "spot_id", spot_ids, &["x".to_string(), "y".to_string()], coords)
}

/// `(spot_id, gene, value)` triples from a CSV with header `spot_id,gene,value`.
pub fn read_freeze_entries(path: &Path) -> Result<Vec<(String, String, f64)>> {
    let (header, rows) = read_csv_table(path)?;
    let names: Vec<&str> = header.iter().collect();
    if names != ["spot_id", "gene", "value"] {
        return Err(parse_error(path, 1, 1, "freeze file header must be `spot_id,gene,value`"));
    }
    rows.iter()
        .map(|(line, r)| Ok((r[0].to_string(), r[1].to_string(), parse_number(path, *line, 3, &r[2])?)))
        .collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    use std::io::Write;
    create(path)?.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Keep spots whose coordinates fall in the closed box `[x0, x1] x [y0, y1]`.
pub fn crop_to_bbox(data: &RawDataset, x: (f64, f64), y: (f64, f64)) -> Result<RawDataset> {
    let coords = data
        .coordinates()
        .ok_or_else(|| Error::InvalidArgument("cropping needs spot coordinates".into()))?;
    if !(x.0 <= x.1 && y.0 <= y.1) {
        return Err(Error::InvalidArgument(format!("empty bounding box x {x:?}, y {y:?}")));
    }
    let keep: Vec<usize> = (0..data.n_spots())
        .filter(|&i| {
            let (px, py) = (coords[[i, 0]], coords[[i, 1]]);
            (x.0..=x.1).contains(&px) && (y.0..=y.1).contains(&py)
        })
        .collect();
    Ok(data.select_spots(&keep))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationConfig {
    pub cpm: bool,
    /// Natural-log `ln(1 + x)`.
    pub log1p: bool,
    pub min_cells_per_gene: usize,
    pub sphere_project: bool,
}

impl Default for NormalizationConfig {
    fn default() -> Self {
        Self {
            cpm: true,
            log1p: true,
            min_cells_per_gene: 100,
            sphere_project: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationReport {
    pub dropped_genes: Vec<String>,
    /// Spots whose counts were all zero after gene filtering.
    pub zero_rows: Vec<String>,
}

pub fn normalize(raw: &RawDataset, config: &NormalizationConfig) -> Result<GeneExpressionMatrix> {
    normalize_with_report(raw, config).map(|(expr, _)| expr)
}

/// Filter genes, CPM, `ln(1 + x)`, sphere projection — in that order, each
/// step optional except the filter.
pub fn normalize_with_report(
    raw: &RawDataset,
    config: &NormalizationConfig,
) -> Result<(GeneExpressionMatrix, NormalizationReport)> {
    let counts = raw.counts();
    let (keep, dropped): (Vec<usize>, Vec<usize>) = (0..raw.n_genes())
        .partition(|&j| counts.column(j).iter().filter(|v| **v > 0.0).count() >= config.min_cells_per_gene);
    if keep.is_empty() {
        return Err(Error::AllGenesFiltered);
    }
    let mut values = counts.select(Axis(1), &keep);
    let mut provenance = vec![format!(
        "filter_genes(min_cells={}, dropped={})",
        config.min_cells_per_gene,
        dropped.len()
    )];

    let zero_rows: Vec<String> = values
        .outer_iter()
        .zip(raw.spot_ids())
        .filter(|(row, _)| row.iter().all(|v| *v == 0.0))
        .map(|(_, id)| id.clone())
        .collect();

    if config.cpm {
        for mut row in values.outer_iter_mut() {
            let total = row.sum();
            if total > 0.0 {
                row.mapv_inplace(|v| v / total * CPM_TARGET);
            }
        }
        provenance.push(format!("cpm(target=1e6, zero_rows={})", zero_rows.len()));
    }
    if config.log1p {
        values.mapv_inplace(f64::ln_1p);
        provenance.push("log1p(base=e)".into());
    }
    let genes: Vec<String> = keep.iter().map(|&j| raw.gene_names()[j].clone()).collect();
    let expr = GeneExpressionMatrix::new(values, raw.spot_ids().to_vec(), genes)?.with_provenance(provenance);
    let expr = if config.sphere_project {
        expr.project_to_sphere()?
    } else {
        expr
    };
    let report = NormalizationReport {
        dropped_genes: dropped.iter().map(|&j| raw.gene_names()[j].clone()).collect(),
        zero_rows,
    };
    Ok((expr, report))
}

/// Everything recorded next to a saved model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub version: String,
    pub gene_names: Vec<String>,
    pub q_shells: Vec<f64>,
    pub n_shells: usize,
    pub fit_config: Option<FitConfig>,
    pub graph_config: Option<GraphConfig>,
    pub normalization: Option<NormalizationConfig>,
    pub provenance: Vec<String>,
    pub seed: Option<u64>,
    pub stop: Option<StopReason>,
}

impl ModelMeta {
    pub fn for_model(model: &InteractionModel) -> Self {
        Self {
            version: crate::VERSION.to_string(),
            gene_names: model.gene_names().to_vec(),
            q_shells: model.q_shells().to_vec(),
            n_shells: model.n_shells(),
            fit_config: None,
            graph_config: None,
            normalization: None,
            provenance: Vec::new(),
            seed: None,
            stop: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SavedModel {
    pub model: InteractionModel,
    pub trace: Option<FitTrace>,
    pub meta: ModelMeta,
}

pub const META_FILE: &str = "meta.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const INTRA_FILE: &str = "g_intra.csv";

pub fn shell_file(k: usize) -> String {
    format!("g_shell{k}.csv")
}

/// Write `g_intra.csv`, `g_shell<k>.csv`, `meta.json` and (if given) `trace.csv`.
/// The gene names and shell degrees in `meta` are overwritten from `model`.
pub fn save_model(dir: &Path, model: &InteractionModel, trace: Option<&FitTrace>, meta: &ModelMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let genes = model.gene_names();
    write_labelled_matrix(&dir.join(INTRA_FILE), "gene", genes, genes, model.g_intra())?;
    for (k, g) in model.g_shells().iter().enumerate() {
        write_labelled_matrix(&dir.join(shell_file(k + 1)), "gene", genes, genes, g)?;
    }
    let mut meta = meta.clone();
    meta.gene_names = genes.to_vec();
    meta.q_shells = model.q_shells().to_vec();
    meta.n_shells = model.n_shells();
    if let Some(t) = trace {
        meta.stop = Some(t.stop);
        let path = dir.join(TRACE_FILE);
        let mut w = csv_writer(&path)?;
        w.write_record(["epoch", "nll", "grad_norm"]).map_err(write_err(&path))?;
        for r in &t.records {
            w.write_record([r.epoch.to_string(), r.nll.to_string(), r.grad_norm.to_string()])
                .map_err(write_err(&path))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    write_json(&dir.join(META_FILE), &meta)
}

fn read_coupling(path: &Path, genes: &[String]) -> Result<Array2<f64>> {
    let (rows, cols, values) = read_labelled_matrix(path)?;
    if cols != genes || rows != genes {
        return Err(Error::GeneMismatch {
            first: INTRA_FILE.into(),
            second: path.file_name().map_or_else(String::new, |f| f.to_string_lossy().into_owned()),
        });
    }
    Ok(values)
}

pub fn load_model(dir: &Path) -> Result<SavedModel> {
    let meta: ModelMeta = read_json(&dir.join(META_FILE))?;
    let intra_path = dir.join(INTRA_FILE);
    let (rows, genes, g_intra) = read_labelled_matrix(&intra_path)?;
    if rows != genes {
        return Err(Error::GeneMismatch {
            first: "g_intra.csv header".into(),
            second: "g_intra.csv row labels".into(),
        });
    }
    if genes != meta.gene_names {
        return Err(Error::GeneMismatch {
            first: INTRA_FILE.into(),
            second: META_FILE.into(),
        });
    }
    if meta.q_shells.len() != meta.n_shells {
        return Err(Error::InvalidArgument(format!(
            "{META_FILE} lists {} shell degrees for {} shells",
            meta.q_shells.len(),
            meta.n_shells
        )));
    }
    let g_shells = (1..=meta.n_shells)
        .map(|k| read_coupling(&dir.join(shell_file(k)), &genes))
        .collect::<Result<Vec<_>>>()?;
    let model = InteractionModel::new(g_intra, g_shells, meta.q_shells.clone(), genes)?;

    let trace_path = dir.join(TRACE_FILE);
    let trace = if trace_path.exists() {
        let (header, rows) = read_csv_table(&trace_path)?;
        if header.iter().collect::<Vec<_>>() != ["epoch", "nll", "grad_norm"] {
            return Err(parse_error(&trace_path, 1, 1, "trace header must be `epoch,nll,grad_norm`"));
        }
        let records = rows
            .iter()
            .map(|(line, r)| {
                let epoch = r[0]
                    .parse::<usize>()
                    .map_err(|_| parse_error(&trace_path, *line, 1, format!("bad epoch `{}`", &r[0])))?;
                Ok(EpochRecord {
                    epoch,
                    nll: parse_number(&trace_path, *line, 2, &r[1])?,
                    grad_norm: parse_number(&trace_path, *line, 3, &r[2])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Some(FitTrace {
            records,
            stop: meta.stop.unwrap_or(StopReason::MaxIterations),
        })
    } else {
        None
    };
    Ok(SavedModel { model, trace, meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy() -> RawDataset {
        RawDataset::new(
            array![[1.0, 0.0, 3.0], [0.0, 0.0, 2.0], [5.0, 7.0, 0.0]],
            vec!["a".into(), "b".into(), "c".into()],
            vec!["G1".into(), "G2".into(), "G3".into()],
            Some(array![[0.0, 0.0], [1.0, 0.5], [2.0, 2.0]]),
        )
        .unwrap()
    }

    #[test]
    fn gene_filter_hand_count() {
        let cfg = NormalizationConfig {
            min_cells_per_gene: 2,
            ..Default::default()
        };
        let (expr, report) = normalize_with_report(&toy(), &cfg).unwrap();
        assert_eq!(expr.gene_names(), ["G1", "G3"]);
        assert_eq!(report.dropped_genes, ["G2"]);
        assert!(expr.is_sphere_normalized());
        assert_eq!(expr.provenance().len(), 4);
    }

    #[test]
    fn cpm_rows_sum_to_a_million() {
        let cfg = NormalizationConfig {
            log1p: false,
            sphere_project: false,
            min_cells_per_gene: 0,
            ..Default::default()
        };
        let expr = normalize(&toy(), &cfg).unwrap();
        for row in expr.values().outer_iter() {
            assert!((row.sum() - 1e6).abs() / 1e6 < 1e-12);
        }
    }

    #[test]
    fn zero_rows_flagged_or_rejected() {
        let raw = RawDataset::new(
            array![[0.0, 0.0], [1.0, 2.0]],
            vec!["z".into(), "n".into()],
            vec!["A".into(), "B".into()],
            None,
        )
        .unwrap();
        let soft = NormalizationConfig {
            min_cells_per_gene: 0,
            sphere_project: false,
            ..Default::default()
        };
        let (expr, report) = normalize_with_report(&raw, &soft).unwrap();
        assert_eq!(report.zero_rows, ["z"]);
        assert!(expr.values().row(0).iter().all(|v| *v == 0.0));
        let strict = NormalizationConfig {
            min_cells_per_gene: 0,
            ..Default::default()
        };
        assert!(matches!(normalize(&raw, &strict), Err(Error::ZeroRow(id)) if id == "z"));
        let all = NormalizationConfig::default();
        assert!(matches!(normalize(&raw, &all), Err(Error::AllGenesFiltered)));
    }

    #[test]
    fn rejects_negative_counts_and_duplicates() {
        assert!(RawDataset::new(array![[-1.0]], vec!["a".into()], vec!["g".into()], None).is_err());
        assert!(matches!(
            RawDataset::new(array![[1.0, 2.0]], vec!["a".into()], vec!["g".into(), "g".into()], None),
            Err(Error::DuplicateId { kind: "gene", .. })
        ));
    }

    #[test]
    fn bbox_crop_is_inclusive() {
        let cropped = crop_to_bbox(&toy(), (0.0, 1.0), (0.0, 0.5)).unwrap();
        assert_eq!(cropped.spot_ids(), ["a", "b"]);
    }

    #[test]
    fn format_names_parse() {
        assert_eq!("dense-csv".parse::<DataFormat>().unwrap(), DataFormat::DenseCsv);
        assert_eq!("mtx".parse::<DataFormat>().unwrap(), DataFormat::MatrixMarket);
        assert!("h5ad".parse::<DataFormat>().is_err());
    }
}
