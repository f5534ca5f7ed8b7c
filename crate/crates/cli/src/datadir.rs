//! Dataset directory layout shared by the simulators and the fitting
//! commands.
//!
//! ```text
//! abundance.csv     site × species
//! covariates.csv    site × covariate (raw)
//! preprocess.json   optional covariate recipe
//! groups.csv        optional species,group
//! truth.csv         optional target × source labels in {-1, 0, 1}
//! ```

use std::path::Path;

use assocnet::data::{read_matrix, Preprocessor};
use assocnet::io::{csv_bytes, matrix_csv};
use assocnet::{CommunityData, Error, PreprocessSpec, Result};
use ndarray::Array2;

use crate::run::{parse_json, Run};

pub const ABUNDANCE: &str = "abundance.csv";
pub const COVARIATES: &str = "covariates.csv";
pub const PREPROCESS: &str = "preprocess.json";
pub const GROUPS: &str = "groups.csv";
pub const TRUTH: &str = "truth.csv";

pub struct Loaded {
    pub data: CommunityData,
    pub preprocessor: Preprocessor,
}

/// Loads a dataset directory. `preprocess` overrides `preprocess.json`.
pub fn load(dir: &Path, preprocess: Option<PreprocessSpec>, run: &mut Run) -> Result<Loaded> {
    let abundance_path = dir.join(ABUNDANCE);
    let covariates_path = dir.join(COVARIATES);
    run.read_input(&abundance_path)?;
    run.read_input(&covariates_path)?;
    let spec = match preprocess {
        Some(s) => s,
        None if dir.join(PREPROCESS).exists() => {
            let bytes = run.read_input(&dir.join(PREPROCESS))?;
            parse_json(&bytes, PREPROCESS)?
        }
        None => PreprocessSpec::default(),
    };
    let (mut data, preprocessor) = assocnet::data::load_community(&abundance_path, &covariates_path, &spec)?;
    let groups_path = dir.join(GROUPS);
    if groups_path.exists() {
        run.read_input(&groups_path)?;
        let groups = read_groups(&groups_path, &data.species_ids)?;
        data = data.with_groups(groups)?;
    }
    Ok(Loaded { data, preprocessor })
}

fn read_groups(path: &Path, species: &[String]) -> Result<Vec<usize>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let cell = |c: usize, message: &str| Error::Cell {
            path: path.display().to_string(),
            row: r + 2,
            column: c + 1,
            message: message.into(),
        };
        let name = rec.get(0).ok_or_else(|| cell(0, "missing species"))?;
        if species.get(r).map(String::as_str) != Some(name) {
            return Err(cell(0, "species must follow the abundance column order"));
        }
        let g = rec
            .get(1)
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| cell(1, "group must be a non-negative integer"))?;
        out.push(g);
    }
    if out.len() != species.len() {
        return Err(Error::Dimension(format!("{} lists {} species, expected {}", path.display(), out.len(), species.len())));
    }
    Ok(out)
}

/// Reads a square matrix CSV (strengths or labels).
pub fn read_square(path: &Path, run: &mut Run) -> Result<(Vec<String>, Array2<f64>)> {
    run.read_input(path)?;
    let (rows, cols, values) = read_matrix(path)?;
    if rows != cols {
        return Err(Error::Dimension(format!("{}: row and column species differ", path.display())));
    }
    Ok((rows, values))
}

/// Writes the abundance/covariate pair plus optional extras, recording every
/// file in the run.
pub fn write(
    run: &mut Run,
    prefix: &str,
    data: &CommunityData,
    preprocess: &PreprocessSpec,
) -> Result<()> {
    let p = |name: &str| if prefix.is_empty() { name.to_string() } else { format!("{prefix}/{name}") };
    run.write(&p(ABUNDANCE), &matrix_csv("site", &data.site_ids, &data.species_ids, &data.abundance)?)?;
    run.write(&p(COVARIATES), &matrix_csv("site", &data.site_ids, &data.covariate_names, &data.covariates)?)?;
    run.write_json(&p(PREPROCESS), preprocess)?;
    if let Some(groups) = &data.group_labels {
        let rows = data.species_ids.iter().zip(groups).map(|(s, g)| vec![s.clone(), g.to_string()]);
        run.write(&p(GROUPS), &csv_bytes(&["species", "group"], rows)?)?;
    }
    Ok(())
}

/// The simulated gradient enters the habitat model standardized and with
/// its square, so a Gaussian niche is representable.
pub fn gradient_preprocess() -> PreprocessSpec {
    PreprocessSpec { categorical_columns: vec![], scale_columns: vec![0], add_quadratic: vec![0] }
}
