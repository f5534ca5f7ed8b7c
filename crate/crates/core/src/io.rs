//! On-disk formats: atomic file writes, fitted-model bundles and network
//! exports (adjacency CSV, edge list, DOT).

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::associations::{BioticContextSpec, EmbeddingPair};
use crate::data::read_matrix;
use crate::distributions::{FamilyKind, ResponseFamily};
use crate::error::{Error, Result};
use crate::model::{AggregationMode, EpochRecord, FittedModel, HabitatModel, OccupancyTreatment};
use crate::network::{AssociationNetwork, GroupStructure, SummaryEdge};

pub const BUNDLE_SCHEMA_VERSION: u32 = 1;
pub const BUNDLE_FILE: &str = "model.json";

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Invalid(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// CSV bytes for a list of records.
pub fn csv_bytes<S: AsRef<str>>(header: &[&str], rows: impl IntoIterator<Item = Vec<S>>) -> Result<Vec<u8>> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(header)?;
    for row in rows {
        wtr.write_record(row.iter().map(|s| s.as_ref()))?;
    }
    wtr.into_inner().map_err(|e| Error::Invalid(format!("csv buffer: {e}")))
}

/// CSV bytes for a labelled matrix (first column holds row ids).
pub fn matrix_csv<T: std::fmt::Display>(
    id_header: &str,
    row_ids: &[String],
    col_names: &[String],
    values: &Array2<T>,
) -> Result<Vec<u8>> {
    let mut header = vec![id_header];
    header.extend(col_names.iter().map(String::as_str));
    csv_bytes(
        &header,
        values.outer_iter().enumerate().map(|(k, row)| {
            let mut rec = vec![row_ids[k].clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            rec
        }),
    )
}

pub fn write_matrix_csv<T: std::fmt::Display>(
    path: &Path,
    id_header: &str,
    row_ids: &[String],
    col_names: &[String],
    values: &Array2<T>,
) -> Result<()> {
    write_atomic(path, &matrix_csv(id_header, row_ids, col_names, values)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleFiles {
    pub habitat: String,
    pub response: String,
    pub effect: String,
    pub training_log: String,
}

/// `model.json`: scalar settings inline, matrices in sibling CSV files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub schema_version: u32,
    pub species_ids: Vec<String>,
    pub covariate_names: Vec<String>,
    pub family: FamilyKind,
    pub dispersion: Option<Vec<f64>>,
    pub mode: AggregationMode,
    pub occupancy: OccupancyTreatment,
    pub context: BioticContextSpec,
    pub dim: usize,
    pub offsets: Vec<f64>,
    pub groups: Option<Vec<usize>>,
    pub learned_offsets: bool,
    pub frozen_habitat: bool,
    pub seed: u64,
    pub files: BundleFiles,
}

/// A fitted model plus the names needed to read its matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub model: FittedModel,
    pub species_ids: Vec<String>,
    pub covariate_names: Vec<String>,
}

fn component_names(d: usize) -> Vec<String> {
    (0..d).map(|l| format!("c{l}")).collect()
}

fn log_csv(log: &[EpochRecord]) -> Result<Vec<u8>> {
    csv_bytes(
        &["epoch", "train_loss", "validation_loss"],
        log.iter().map(|r| {
            vec![
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.validation_loss.map_or(String::new(), |v| v.to_string()),
            ]
        }),
    )
}

pub fn save_bundle(bundle: &ModelBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let model = &bundle.model;
    let files = BundleFiles {
        habitat: "habitat.csv".into(),
        response: "response.csv".into(),
        effect: "effect.csv".into(),
        training_log: "training_log.csv".into(),
    };
    let mut habitat_cols = bundle.covariate_names.clone();
    habitat_cols.push("intercept".into());
    write_matrix_csv(&dir.join(&files.habitat), "species", &bundle.species_ids, &habitat_cols, &model.habitat.weights)?;
    let comps = component_names(model.dim());
    write_matrix_csv(&dir.join(&files.response), "species", &bundle.species_ids, &comps, &model.emb.response)?;
    write_matrix_csv(&dir.join(&files.effect), "species", &bundle.species_ids, &comps, &model.emb.effect)?;
    write_atomic(&dir.join(&files.training_log), &log_csv(&model.training_log)?)?;
    let manifest = BundleManifest {
        schema_version: BUNDLE_SCHEMA_VERSION,
        species_ids: bundle.species_ids.clone(),
        covariate_names: bundle.covariate_names.clone(),
        family: model.family.kind,
        dispersion: model.family.dispersion.clone(),
        mode: model.mode,
        occupancy: model.occupancy,
        context: model.context_spec.clone(),
        dim: model.dim(),
        offsets: model.offsets.clone(),
        groups: model.groups.clone(),
        learned_offsets: model.learned_offsets,
        frozen_habitat: model.frozen_habitat,
        seed: model.seed,
        files,
    };
    write_json(&dir.join(BUNDLE_FILE), &manifest)
}

fn read_shaped(path: &Path, rows: &[String], cols: usize) -> Result<Array2<f64>> {
    let (ids, header, values) = read_matrix(path)?;
    if ids != rows || header.len() != cols {
        return Err(Error::Dimension(format!(
            "{}: expected {} rows x {} columns matching the bundle, found {} x {}",
            path.display(),
            rows.len(),
            cols,
            ids.len(),
            header.len()
        )));
    }
    Ok(values)
}

fn read_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |c: usize| Error::Cell {
            path: path.display().to_string(),
            row: r + 2,
            column: c + 1,
            message: "not a number".into(),
        };
        let field = |c: usize| rec.get(c).ok_or_else(|| bad(c));
        out.push(EpochRecord {
            epoch: field(0)?.parse().map_err(|_| bad(0))?,
            train_loss: field(1)?.parse().map_err(|_| bad(1))?,
            validation_loss: match field(2)? {
                "" => None,
                v => Some(v.parse().map_err(|_| bad(2))?),
            },
        });
    }
    Ok(out)
}

/// Loads a bundle written by [`save_bundle`]; `path` is the bundle
/// directory or its `model.json`.
pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    let (dir, json): (PathBuf, PathBuf) = if path.is_dir() {
        (path.to_path_buf(), path.join(BUNDLE_FILE))
    } else {
        (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
    };
    let manifest: BundleManifest = read_json(&json)?;
    if manifest.schema_version != BUNDLE_SCHEMA_VERSION {
        return Err(Error::Invalid(format!(
            "{}: schema version {} (this build reads {})",
            json.display(),
            manifest.schema_version,
            BUNDLE_SCHEMA_VERSION
        )));
    }
    let m = manifest.species_ids.len();
    let ids = &manifest.species_ids;
    let habitat = read_shaped(&dir.join(&manifest.files.habitat), ids, manifest.covariate_names.len() + 1)?;
    let response = read_shaped(&dir.join(&manifest.files.response), ids, manifest.dim)?;
    let effect = read_shaped(&dir.join(&manifest.files.effect), ids, manifest.dim)?;
    let training_log = read_log(&dir.join(&manifest.files.training_log))?;
    if manifest.offsets.len() != m {
        return Err(Error::Dimension(format!("{} offsets for {m} species", manifest.offsets.len())));
    }
    let family = ResponseFamily { kind: manifest.family, dispersion: manifest.dispersion };
    family.validate()?;
    if family.dispersion.as_ref().is_some_and(|d| d.len() != m) {
        return Err(Error::Dimension(format!("dispersion length differs from {m} species")));
    }
    manifest.mode.check_family(family.kind)?;
    let model = FittedModel {
        habitat: HabitatModel { weights: habitat },
        emb: EmbeddingPair::new(response, effect)?,
        offsets: manifest.offsets,
        family,
        mode: manifest.mode,
        occupancy: manifest.occupancy,
        context_spec: manifest.context,
        groups: manifest.groups,
        learned_offsets: manifest.learned_offsets,
        frozen_habitat: manifest.frozen_habitat,
        training_log,
        seed: manifest.seed,
    };
    Ok(ModelBundle { model, species_ids: manifest.species_ids, covariate_names: manifest.covariate_names })
}

/// Rows are targets, columns sources.
pub fn adjacency_csv(species: &[String], strengths: &Array2<f64>) -> Result<Vec<u8>> {
    matrix_csv("target", species, species, strengths)
}

pub fn label_name(label: i8) -> &'static str {
    match label {
        1 => "positive",
        -1 => "negative",
        _ => "neutral",
    }
}

pub fn edge_list_csv(species: &[String], network: &AssociationNetwork) -> Result<Vec<u8>> {
    csv_bytes(
        &["source", "target", "strength", "label"],
        network.edges().into_iter().map(|(i, j, s, l)| {
            vec![species[j].clone(), species[i].clone(), s.to_string(), label_name(l).to_string()]
        }),
    )
}

fn dot_quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

/// Directed graph (source -> target); nodes carry their module when known.
pub fn network_dot(species: &[String], network: &AssociationNetwork, modules: Option<&[usize]>) -> String {
    let mut out = String::from("digraph associations {\n");
    for (i, name) in species.iter().enumerate() {
        match modules {
            Some(m) => out.push_str(&format!("  {} [module={}];\n", dot_quote(name), m[i])),
            None => out.push_str(&format!("  {};\n", dot_quote(name))),
        }
    }
    for (i, j, s, l) in network.edges() {
        let color = if l > 0 { "blue" } else { "red" };
        out.push_str(&format!(
            "  {} -> {} [weight={s}, label={}, color={color}];\n",
            dot_quote(&species[j]),
            dot_quote(&species[i]),
            dot_quote(label_name(l))
        ));
    }
    out.push_str("}\n");
    out
}

pub fn groups_csv(species: &[String], groups: &GroupStructure) -> Result<Vec<u8>> {
    csv_bytes(
        &["species", "response_group", "effect_group", "module"],
        species.iter().enumerate().map(|(i, s)| {
            vec![
                s.clone(),
                groups.response_groups[i].to_string(),
                groups.effect_groups[i].to_string(),
                groups.modules[i].to_string(),
            ]
        }),
    )
}

pub fn summary_csv(edges: &[SummaryEdge]) -> Result<Vec<u8>> {
    csv_bytes(
        &["effect_group", "response_group", "label", "proportion", "signed_pairs"],
        edges.iter().map(|e| {
            vec![
                e.effect_group.to_string(),
                e.response_group.to_string(),
                label_name(e.label).to_string(),
                e.proportion.to_string(),
                e.signed_pairs.to_string(),
            ]
        }),
    )
}
