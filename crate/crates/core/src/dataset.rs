//! Score-space data model: per-model query x gallery similarity matrices,
//! subject labels, optional per-query features, plus file ingestion and
//! validation.
//!
//! All stored scores are similarities. Models whose files hold Euclidean
//! distances are transformed once at load time, so downstream code never
//! sees a distance.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of 64-bit scores, one row per query.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Validation(format!(
                "matrix data length {} != {} rows x {} cols",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(ScoreMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        ScoreMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// First (row, col) holding a non-finite value, if any.
    pub fn find_non_finite(&self) -> Option<(usize, usize)> {
        self.data
            .iter()
            .position(|v| !v.is_finite())
            .map(|p| (p / self.cols, p % self.cols))
    }
}

/// How a model's raw score files are expressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    /// Values are similarities already (higher is more similar).
    Cosine,
    /// Values are distances; converted to similarities at ingestion.
    Euclidean,
}

/// Convert a nonnegative distance to a similarity in (0, 1].
///
/// Strictly decreasing in `d`: 0 maps to 1, large distances approach 0.
pub fn distance_to_similarity(d: f64) -> Result<f64> {
    if !d.is_finite() || d < 0.0 {
        return Err(Error::Domain(format!(
            "distance must be finite and nonnegative, got {d}"
        )));
    }
    Ok(1.0 / (1.0 + d))
}

/// One model entry in a dataset manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestModel {
    pub name: String,
    pub metric: MetricKind,
    pub score_file: PathBuf,
}

/// On-disk description of a dataset; all paths are relative to the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub models: Vec<ManifestModel>,
    pub query_labels_file: PathBuf,
    pub gallery_labels_file: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_features_file: Option<PathBuf>,
}

/// In-memory dataset: per-model |Q| x |G| similarity matrices plus labels.
///
/// Immutable after construction by convention; every constructor and loader
/// runs [`Dataset::validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub model_names: Vec<String>,
    pub metric_kinds: Vec<MetricKind>,
    /// One matrix per model, same order as `model_names`. Always similarities.
    pub scores: Vec<ScoreMatrix>,
    pub query_labels: Vec<String>,
    pub gallery_labels: Vec<String>,
    /// Optional per-query feature vectors, all of one dimension.
    pub query_features: Option<Vec<Vec<f64>>>,
}

impl Dataset {
    pub fn new(
        model_names: Vec<String>,
        metric_kinds: Vec<MetricKind>,
        scores: Vec<ScoreMatrix>,
        query_labels: Vec<String>,
        gallery_labels: Vec<String>,
        query_features: Option<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let d = Dataset {
            model_names,
            metric_kinds,
            scores,
            query_labels,
            gallery_labels,
            query_features,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn n_models(&self) -> usize {
        self.model_names.len()
    }

    pub fn n_queries(&self) -> usize {
        self.query_labels.len()
    }

    pub fn n_gallery(&self) -> usize {
        self.gallery_labels.len()
    }

    pub fn model_index(&self, name: &str) -> Option<usize> {
        self.model_names.iter().position(|n| n == name)
    }

    /// Check every structural invariant, reporting the first violation with
    /// enough indices to locate it.
    pub fn validate(&self) -> Result<()> {
        if self.model_names.is_empty() {
            return Err(Error::Validation("dataset has no models".into()));
        }
        if self.metric_kinds.len() != self.model_names.len() {
            return Err(Error::Validation(format!(
                "metric_kinds count {} != model count {}",
                self.metric_kinds.len(),
                self.model_names.len()
            )));
        }
        if self.scores.len() != self.model_names.len() {
            return Err(Error::Validation(format!(
                "matrix count {} != model count {}",
                self.scores.len(),
                self.model_names.len()
            )));
        }
        let mut seen = HashSet::new();
        for name in &self.model_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Validation(format!("duplicate model name {name:?}")));
            }
        }
        let nq = self.query_labels.len();
        let ng = self.gallery_labels.len();
        if nq == 0 {
            return Err(Error::Validation("dataset has no queries".into()));
        }
        if ng == 0 {
            return Err(Error::Validation("dataset has no gallery entries".into()));
        }
        for (m, mat) in self.scores.iter().enumerate() {
            if mat.rows() != nq {
                return Err(Error::Validation(format!(
                    "model {} ({}): {} rows != query label count {}",
                    m, self.model_names[m], mat.rows(), nq
                )));
            }
            if mat.cols() != ng {
                return Err(Error::Validation(format!(
                    "model {} ({}): {} cols != gallery label count {}",
                    m, self.model_names[m], mat.cols(), ng
                )));
            }
            if let Some((q, g)) = mat.find_non_finite() {
                return Err(Error::Validation(format!(
                    "model {} ({}): non-finite score at query {}, gallery {}",
                    m, self.model_names[m], q, g
                )));
            }
        }
        if let Some(features) = &self.query_features {
            if features.len() != nq {
                return Err(Error::Validation(format!(
                    "feature row count {} != query count {}",
                    features.len(),
                    nq
                )));
            }
            let dim = features.first().map(Vec::len).unwrap_or(0);
            for (q, row) in features.iter().enumerate() {
                if row.len() != dim {
                    return Err(Error::Validation(format!(
                        "feature row {} has dimension {} != {}",
                        q,
                        row.len(),
                        dim
                    )));
                }
                if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Validation(format!(
                        "non-finite feature at query {q}, component {j}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Standalone validation entry point; mirrors [`Dataset::validate`].
pub fn validate_dataset(d: &Dataset) -> Result<()> {
    d.validate()
}

/// Per-query model selection: a |Q| x |M| boolean mask plus a per-query
/// anchor model index.
///
/// Invariants: each row selects its anchor (hence at least one model).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionMask {
    n_queries: usize,
    n_models: usize,
    mask: Vec<bool>,
    anchors: Vec<usize>,
}

impl SelectionMask {
    /// Build from per-row data, enforcing the anchor-selected invariant.
    pub fn new(n_queries: usize, n_models: usize, mask: Vec<bool>, anchors: Vec<usize>) -> Result<Self> {
        if mask.len() != n_queries * n_models {
            return Err(Error::Contract(format!(
                "mask length {} != {} queries x {} models",
                mask.len(),
                n_queries,
                n_models
            )));
        }
        if anchors.len() != n_queries {
            return Err(Error::Contract(format!(
                "anchor count {} != query count {}",
                anchors.len(),
                n_queries
            )));
        }
        let m = SelectionMask {
            n_queries,
            n_models,
            mask,
            anchors,
        };
        for q in 0..n_queries {
            let a = m.anchors[q];
            if a >= n_models {
                return Err(Error::Contract(format!(
                    "query {q}: anchor {a} out of range for {n_models} models"
                )));
            }
            if !m.is_selected(q, a) {
                return Err(Error::Contract(format!(
                    "query {q}: anchor {a} is not in the selected set"
                )));
            }
        }
        Ok(m)
    }

    /// Same (subset, anchor) for every query.
    pub fn uniform(n_queries: usize, n_models: usize, subset: &[usize], anchor: usize) -> Result<Self> {
        if subset.is_empty() {
            return Err(Error::Contract("selection subset is empty".into()));
        }
        let mut row = vec![false; n_models];
        for &j in subset {
            if j >= n_models {
                return Err(Error::Contract(format!(
                    "model index {j} out of range for {n_models} models"
                )));
            }
            row[j] = true;
        }
        let mut mask = Vec::with_capacity(n_queries * n_models);
        for _ in 0..n_queries {
            mask.extend_from_slice(&row);
        }
        SelectionMask::new(n_queries, n_models, mask, vec![anchor; n_queries])
    }

    /// All models selected, one fixed anchor.
    pub fn all_models(n_queries: usize, n_models: usize, anchor: usize) -> Result<Self> {
        let subset: Vec<usize> = (0..n_models).collect();
        SelectionMask::uniform(n_queries, n_models, &subset, anchor)
    }

    pub fn n_queries(&self) -> usize {
        self.n_queries
    }

    pub fn n_models(&self) -> usize {
        self.n_models
    }

    pub fn is_selected(&self, q: usize, m: usize) -> bool {
        self.mask[q * self.n_models + m]
    }

    pub fn anchor(&self, q: usize) -> usize {
        self.anchors[q]
    }

    /// Selected model indices for a query, ascending.
    pub fn selected(&self, q: usize) -> Vec<usize> {
        (0..self.n_models).filter(|&m| self.is_selected(q, m)).collect()
    }

    /// Shape check against a dataset.
    pub fn validate_for(&self, d: &Dataset) -> Result<()> {
        if self.n_queries != d.n_queries() || self.n_models != d.n_models() {
            return Err(Error::Contract(format!(
                "mask shape {}x{} does not match dataset {}x{}",
                self.n_queries,
                self.n_models,
                d.n_queries(),
                d.n_models()
            )));
        }
        Ok(())
    }
}

/// Fused |Q| x |G| similarity matrix produced by a fusion method.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedScores {
    pub matrix: ScoreMatrix,
}

impl FusedScores {
    pub fn n_queries(&self) -> usize {
        self.matrix.rows()
    }

    pub fn n_gallery(&self) -> usize {
        self.matrix.cols()
    }

    pub fn row(&self, q: usize) -> &[f64] {
        self.matrix.row(q)
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Parse a dense score file: one query per line, comma-separated decimals.
fn parse_score_file(path: &Path) -> Result<ScoreMatrix> {
    let text = read_to_string(path)?;
    let mut data = Vec::new();
    let mut cols: Option<usize> = None;
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut count = 0;
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::parse(path, i + 1, format!("cannot parse {:?} as a number", field.trim()))
            })?;
            if !v.is_finite() {
                return Err(Error::parse(path, i + 1, format!("non-finite score {v}")));
            }
            data.push(v);
            count += 1;
        }
        match cols {
            None => cols = Some(count),
            Some(c) if c != count => {
                return Err(Error::parse(
                    path,
                    i + 1,
                    format!("row has {count} values, expected {c}"),
                ));
            }
            _ => {}
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::parse(path, 1, "score file is empty".to_string()));
    }
    ScoreMatrix::new(rows, cols.unwrap(), data)
}

/// Parse a label file: one subject id per line.
fn parse_label_file(path: &Path) -> Result<Vec<String>> {
    let text = read_to_string(path)?;
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let id = line.trim();
        if id.is_empty() {
            return Err(Error::parse(path, i + 1, "empty subject id".to_string()));
        }
        labels.push(id.to_string());
    }
    if labels.is_empty() {
        return Err(Error::parse(path, 1, "label file is empty".to_string()));
    }
    Ok(labels)
}

/// Parse a feature file: one comma-separated real vector per query.
fn parse_feature_file(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = read_to_string(path)?;
    let mut out = Vec::new();
    let mut dim: Option<usize> = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::parse(path, i + 1, format!("cannot parse {:?} as a number", field.trim()))
            })?;
            if !v.is_finite() {
                return Err(Error::parse(path, i + 1, format!("non-finite feature {v}")));
            }
            row.push(v);
        }
        match dim {
            None => dim = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(Error::parse(
                    path,
                    i + 1,
                    format!("feature row has {} values, expected {d}", row.len()),
                ));
            }
            _ => {}
        }
        out.push(row);
    }
    Ok(out)
}

/// Load a dataset from a manifest document.
///
/// Referenced paths resolve relative to the manifest's directory. Matrices
/// for euclidean-metric models are converted elementwise with
/// [`distance_to_similarity`]; the result always stores similarities.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = read_to_string(manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::parse(manifest_path, e.line(), format!("invalid manifest: {e}")))?;
    if manifest.models.is_empty() {
        return Err(Error::parse(manifest_path, 1, "manifest lists no models".to_string()));
    }
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let query_labels = parse_label_file(&base.join(&manifest.query_labels_file))?;
    let gallery_labels = parse_label_file(&base.join(&manifest.gallery_labels_file))?;

    let mut model_names = Vec::new();
    let mut metric_kinds = Vec::new();
    let mut scores = Vec::new();
    for model in &manifest.models {
        let path = base.join(&model.score_file);
        let mut mat = parse_score_file(&path)?;
        if mat.rows() != query_labels.len() {
            return Err(Error::Validation(format!(
                "{}: {} rows != query label count {}",
                path.display(),
                mat.rows(),
                query_labels.len()
            )));
        }
        if mat.cols() != gallery_labels.len() {
            return Err(Error::Validation(format!(
                "{}: gallery label count != |G| ({} cols vs {} labels)",
                path.display(),
                mat.cols(),
                gallery_labels.len()
            )));
        }
        if model.metric == MetricKind::Euclidean {
            for q in 0..mat.rows() {
                for g in 0..mat.cols() {
                    let d = mat.get(q, g);
                    let s = distance_to_similarity(d).map_err(|_| {
                        Error::parse(
                            &path,
                            q + 1,
                            format!("invalid euclidean distance {d} at column {}", g + 1),
                        )
                    })?;
                    mat.set(q, g, s);
                }
            }
        }
        model_names.push(model.name.clone());
        metric_kinds.push(model.metric);
        scores.push(mat);
    }

    let query_features = match &manifest.query_features_file {
        Some(p) => {
            let path = base.join(p);
            let features = parse_feature_file(&path)?;
            Some(features)
        }
        None => None,
    };

    Dataset::new(
        model_names,
        metric_kinds,
        scores,
        query_labels,
        gallery_labels,
        query_features,
    )
}

/// Render a matrix in the ingestion text format. `f64` values print in
/// shortest round-trip form, so save then load is bit-exact.
pub fn format_score_matrix(mat: &ScoreMatrix) -> String {
    let mut out = String::new();
    for q in 0..mat.rows() {
        let row: Vec<String> = mat.row(q).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn sanitize_file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Write a dataset into `dir` as manifest.json plus score/label/feature files.
///
/// Stored matrices are already similarities, so every model is recorded with
/// the cosine metric kind regardless of its ingestion provenance; this keeps
/// save then load bit-exact.
pub fn save_dataset(d: &Dataset, dir: &Path) -> Result<()> {
    d.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |rel: &Path, content: &str| -> Result<()> {
        let path = dir.join(rel);
        fs::write(&path, content).map_err(|e| Error::io(&path, e))
    };

    let mut models = Vec::new();
    for (m, name) in d.model_names.iter().enumerate() {
        let file = PathBuf::from(format!("scores_{m}_{}.csv", sanitize_file_stem(name)));
        write(&file, &format_score_matrix(&d.scores[m]))?;
        models.push(ManifestModel {
            name: name.clone(),
            metric: MetricKind::Cosine,
            score_file: file,
        });
    }

    write(Path::new("query_labels.txt"), &(d.query_labels.join("\n") + "\n"))?;
    write(Path::new("gallery_labels.txt"), &(d.gallery_labels.join("\n") + "\n"))?;

    let query_features_file = match &d.query_features {
        Some(features) => {
            let mut text = String::new();
            for row in features {
                let fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                text.push_str(&fields.join(","));
                text.push('\n');
            }
            let file = PathBuf::from("query_features.csv");
            write(&file, &text)?;
            Some(file)
        }
        None => None,
    };

    let manifest = Manifest {
        models,
        query_labels_file: PathBuf::from("query_labels.txt"),
        gallery_labels_file: PathBuf::from("gallery_labels.txt"),
        query_features_file,
    };
    let manifest_text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Validation(format!("manifest serialization failed: {e}")))?;
    write(Path::new("manifest.json"), &(manifest_text + "\n"))
}
