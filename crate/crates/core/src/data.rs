//! Observational data: the site × species matrix, environmental covariates,
//! CSV ingestion, covariate preprocessing and stratified splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use log::warn;
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Site × species abundances plus everything attached to sites or species.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommunityData {
    /// n_sites × m_species, non-negative.
    pub abundance: Array2<f64>,
    /// n_sites × p, already preprocessed.
    pub covariates: Array2<f64>,
    pub covariate_names: Vec<String>,
    pub site_ids: Vec<String>,
    pub species_ids: Vec<String>,
    /// n × 2 planar coordinates.
    pub coordinates: Option<Array2<f64>>,
    pub time_index: Option<Vec<i64>>,
    /// Per-species offsets `o_i`.
    pub offsets: Option<Vec<f64>>,
    /// Prior trophic / functional group per species.
    pub group_labels: Option<Vec<usize>>,
    /// Declared presence/absence data.
    pub binary: bool,
}

impl CommunityData {
    /// Builds and validates a dataset with generated site and species ids.
    pub fn new(abundance: Array2<f64>, covariates: Array2<f64>) -> Result<Self> {
        let (n, m) = abundance.dim();
        let p = covariates.ncols();
        Self::with_ids(
            abundance,
            covariates,
            (0..n).map(|k| format!("site{k}")).collect(),
            (0..m).map(|i| format!("sp{i}")).collect(),
            (0..p).map(|c| format!("x{c}")).collect(),
        )
    }

    pub fn with_ids(
        abundance: Array2<f64>,
        covariates: Array2<f64>,
        site_ids: Vec<String>,
        species_ids: Vec<String>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let data = CommunityData {
            abundance,
            covariates,
            covariate_names,
            site_ids,
            species_ids,
            coordinates: None,
            time_index: None,
            offsets: None,
            group_labels: None,
            binary: false,
        };
        data.validate()?;
        Ok(data)
    }

    pub fn binary(mut self) -> Result<Self> {
        self.binary = true;
        self.validate()?;
        Ok(self)
    }

    pub fn with_coordinates(mut self, coordinates: Array2<f64>) -> Result<Self> {
        self.coordinates = Some(coordinates);
        self.validate()?;
        Ok(self)
    }

    pub fn with_time_index(mut self, time: Vec<i64>) -> Result<Self> {
        self.time_index = Some(time);
        self.validate()?;
        Ok(self)
    }

    pub fn with_offsets(mut self, offsets: Vec<f64>) -> Result<Self> {
        self.offsets = Some(offsets);
        self.validate()?;
        Ok(self)
    }

    pub fn with_groups(mut self, groups: Vec<usize>) -> Result<Self> {
        self.group_labels = Some(groups);
        self.validate()?;
        Ok(self)
    }

    pub fn n_sites(&self) -> usize {
        self.abundance.nrows()
    }

    pub fn n_species(&self) -> usize {
        self.abundance.ncols()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.ncols()
    }

    /// True when every abundance is a non-negative integer.
    pub fn is_count(&self) -> bool {
        self.abundance.iter().all(|&y| y.fract() == 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = self.abundance.dim();
        if self.covariates.nrows() != n {
            return Err(Error::Dimension(format!(
                "covariates have {} rows but abundance has {n}",
                self.covariates.nrows()
            )));
        }
        if self.site_ids.len() != n {
            return Err(Error::Dimension(format!(
                "{} site ids for {n} sites",
                self.site_ids.len()
            )));
        }
        if self.species_ids.len() != m {
            return Err(Error::Dimension(format!(
                "{} species ids for {m} species",
                self.species_ids.len()
            )));
        }
        if self.covariate_names.len() != self.covariates.ncols() {
            return Err(Error::Dimension(format!(
                "{} covariate names for {} covariate columns",
                self.covariate_names.len(),
                self.covariates.ncols()
            )));
        }
        for ((k, i), &y) in self.abundance.indexed_iter() {
            if !y.is_finite() || y < 0.0 {
                return Err(Error::Invalid(format!(
                    "abundance at site {k}, species {i} is {y}; must be finite and non-negative"
                )));
            }
            if self.binary && y != 0.0 && y != 1.0 {
                return Err(Error::Invalid(format!(
                    "binary data has value {y} at site {k}, species {i}"
                )));
            }
        }
        if let Some((k, c)) = self
            .covariates
            .indexed_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(ix, _)| ix)
        {
            return Err(Error::Invalid(format!(
                "covariate at site {k}, column {c} is not finite"
            )));
        }
        let unique: BTreeSet<&String> = self.species_ids.iter().collect();
        if unique.len() != m {
            return Err(Error::Invalid("species ids are not unique".into()));
        }
        if let Some(c) = &self.coordinates {
            if c.dim() != (n, 2) {
                return Err(Error::Dimension(format!(
                    "coordinates are {:?}, expected ({n}, 2)",
                    c.dim()
                )));
            }
        }
        if let Some(t) = &self.time_index {
            if t.len() != n {
                return Err(Error::Dimension(format!(
                    "{} time indices for {n} sites",
                    t.len()
                )));
            }
        }
        if let Some(o) = &self.offsets {
            if o.len() != m {
                return Err(Error::Dimension(format!("{} offsets for {m} species", o.len())));
            }
        }
        if let Some(g) = &self.group_labels {
            if g.len() != m {
                return Err(Error::Dimension(format!(
                    "{} group labels for {m} species",
                    g.len()
                )));
            }
        }
        Ok(())
    }

    /// Restriction to the given sites (in the given order).
    pub fn subset_sites(&self, sites: &[usize]) -> CommunityData {
        CommunityData {
            abundance: self.abundance.select(Axis(0), sites),
            covariates: self.covariates.select(Axis(0), sites),
            covariate_names: self.covariate_names.clone(),
            site_ids: sites.iter().map(|&k| self.site_ids[k].clone()).collect(),
            species_ids: self.species_ids.clone(),
            coordinates: self.coordinates.as_ref().map(|c| c.select(Axis(0), sites)),
            time_index: self
                .time_index
                .as_ref()
                .map(|t| sites.iter().map(|&k| t[k]).collect()),
            offsets: self.offsets.clone(),
            group_labels: self.group_labels.clone(),
            binary: self.binary,
        }
    }

    /// Presence matrix `y > 0`.
    pub fn presence(&self) -> Array2<bool> {
        self.abundance.mapv(|y| y > 0.0)
    }
}

/// Covariate preprocessing recipe. Column indices refer to the raw covariate
/// file (0-based, site-id column excluded).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSpec {
    pub categorical_columns: Vec<usize>,
    pub scale_columns: Vec<usize>,
    pub add_quadratic: Vec<usize>,
}

impl PreprocessSpec {
    pub fn validate(&self, n_columns: usize) -> Result<()> {
        let all = self
            .categorical_columns
            .iter()
            .chain(&self.scale_columns)
            .chain(&self.add_quadratic);
        if let Some(c) = all.clone().find(|&&c| c >= n_columns) {
            return Err(Error::Invalid(format!(
                "preprocess column {c} out of range (file has {n_columns} covariate columns)"
            )));
        }
        for c in &self.categorical_columns {
            if self.scale_columns.contains(c) || self.add_quadratic.contains(c) {
                return Err(Error::Invalid(format!(
                    "column {c} is categorical and cannot be scaled or squared"
                )));
            }
        }
        Ok(())
    }
}

/// Raw covariate table before preprocessing: text cells, parsed lazily.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCovariates {
    pub names: Vec<String>,
    /// Row-major cells.
    pub cells: Vec<Vec<String>>,
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleStat {
    pub column: usize,
    pub mean: f64,
    pub std: f64,
}

/// A fitted preprocessing transform. Statistics are frozen at fit time and
/// reused for every later transform (e.g. held-out rows).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub spec: PreprocessSpec,
    pub input_names: Vec<String>,
    pub scaling: Vec<ScaleStat>,
    /// Sorted levels of each categorical column.
    pub levels: BTreeMap<usize, Vec<String>>,
    pub output_names: Vec<String>,
}

impl Preprocessor {
    /// Learns scaling statistics and categorical levels from `rows` (all rows
    /// when `None`).
    pub fn fit(raw: &RawCovariates, spec: &PreprocessSpec, rows: Option<&[usize]>) -> Result<Self> {
        let p = raw.names.len();
        spec.validate(p)?;
        let all: Vec<usize> = (0..raw.cells.len()).collect();
        let rows = rows.unwrap_or(&all);

        let mut levels = BTreeMap::new();
        for &c in &spec.categorical_columns {
            let set: BTreeSet<String> = raw.cells.iter().map(|r| r[c].clone()).collect();
            levels.insert(c, set.into_iter().collect::<Vec<_>>());
        }
        let mut scaling = Vec::new();
        for &c in &spec.scale_columns {
            let values = rows
                .iter()
                .map(|&k| parse_cell(raw, k, c))
                .collect::<Result<Vec<f64>>>()?;
            let n = values.len().max(1) as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let std = if var > 0.0 {
                var.sqrt()
            } else {
                warn!("covariate column {c} is constant; left unscaled");
                1.0
            };
            scaling.push(ScaleStat { column: c, mean, std });
        }

        let mut output_names = Vec::new();
        for c in 0..p {
            if !spec.categorical_columns.contains(&c) {
                output_names.push(raw.names[c].clone());
            }
        }
        for (&c, lv) in &levels {
            for l in lv {
                output_names.push(format!("{}={l}", raw.names[c]));
            }
        }
        for &c in &spec.add_quadratic {
            output_names.push(format!("{}^2", raw.names[c]));
        }

        Ok(Preprocessor {
            spec: spec.clone(),
            input_names: raw.names.clone(),
            scaling,
            levels,
            output_names,
        })
    }

    pub fn transform(&self, raw: &RawCovariates) -> Result<Array2<f64>> {
        if raw.names != self.input_names {
            return Err(Error::Invalid(format!(
                "covariate columns {:?} differ from the fitted columns {:?}",
                raw.names, self.input_names
            )));
        }
        let n = raw.cells.len();
        let p = raw.names.len();
        let mut out = Array2::zeros((n, self.output_names.len()));
        for k in 0..n {
            let mut col = 0;
            let mut numeric = vec![0.0; p];
            for c in 0..p {
                if self.spec.categorical_columns.contains(&c) {
                    continue;
                }
                let mut v = parse_cell(raw, k, c)?;
                if let Some(s) = self.scaling.iter().find(|s| s.column == c) {
                    v = (v - s.mean) / s.std;
                }
                numeric[c] = v;
                out[(k, col)] = v;
                col += 1;
            }
            for (&c, lv) in &self.levels {
                let cell = &raw.cells[k][c];
                let pos = lv.iter().position(|l| l == cell).ok_or_else(|| Error::Cell {
                    path: raw.path.clone(),
                    row: k + 2,
                    column: c + 2,
                    message: format!("unknown category {cell:?}"),
                })?;
                out[(k, col + pos)] = 1.0;
                col += lv.len();
            }
            for &c in &self.spec.add_quadratic {
                out[(k, col)] = numeric[c] * numeric[c];
                col += 1;
            }
        }
        Ok(out)
    }
}

fn parse_cell(raw: &RawCovariates, k: usize, c: usize) -> Result<f64> {
    let s = raw.cells[k][c].trim();
    s.parse::<f64>().map_err(|_| Error::Cell {
        path: raw.path.clone(),
        // 1-based file coordinates: header is line 1, site id is column 1.
        row: k + 2,
        column: c + 2,
        message: format!("cannot parse {s:?} as a number"),
    })
}

/// Table with a header line, first column holding row ids.
struct Table {
    header: Vec<String>,
    ids: Vec<String>,
    cells: Vec<Vec<String>>,
}

fn read_table(path: &Path) -> Result<Table> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.len() < 2 {
        return Err(Error::Invalid(format!(
            "{}: header must name an id column and at least one data column",
            path.display()
        )));
    }
    let mut ids = Vec::new();
    let mut cells = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::Cell {
                path: path.display().to_string(),
                row: r + 2,
                column: rec.len(),
                message: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        ids.push(rec[0].to_string());
        cells.push(rec.iter().skip(1).map(str::to_string).collect());
    }
    Ok(Table {
        header: header[1..].to_vec(),
        ids,
        cells,
    })
}

pub fn read_raw_covariates(path: &Path) -> Result<(Vec<String>, RawCovariates)> {
    let t = read_table(path)?;
    Ok((
        t.ids,
        RawCovariates {
            names: t.header,
            cells: t.cells,
            path: path.display().to_string(),
        },
    ))
}

/// Reads a numeric matrix CSV: header row of column names, first column ids.
pub fn read_matrix(path: &Path) -> Result<(Vec<String>, Vec<String>, Array2<f64>)> {
    let t = read_table(path)?;
    let n = t.ids.len();
    let p = t.header.len();
    let mut out = Array2::zeros((n, p));
    for (k, row) in t.cells.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            out[(k, c)] = cell.trim().parse::<f64>().map_err(|_| Error::Cell {
                path: path.display().to_string(),
                row: k + 2,
                column: c + 2,
                message: format!("cannot parse {cell:?} as a number"),
            })?;
        }
    }
    Ok((t.ids, t.header, out))
}

/// Writes a numeric matrix with the same layout `read_matrix` expects.
/// Values use the shortest representation that parses back to the same f64.
pub fn write_matrix(
    path: &Path,
    id_header: &str,
    row_ids: &[String],
    col_names: &[String],
    values: &Array2<f64>,
) -> Result<()> {
    crate::io::write_matrix_csv(path, id_header, row_ids, col_names, values)
}

/// Loads abundance and covariate CSVs and applies `options` (statistics
/// fitted on all rows). Returns the fitted preprocessor for reuse.
pub fn load_community(
    abundance_path: &Path,
    covariates_path: &Path,
    options: &PreprocessSpec,
) -> Result<(CommunityData, Preprocessor)> {
    let (site_ids, species_ids, abundance) = read_matrix(abundance_path)?;
    let (cov_sites, raw) = read_raw_covariates(covariates_path)?;
    if cov_sites.len() != site_ids.len() {
        return Err(Error::Dimension(format!(
            "{} has {} rows but {} has {}",
            covariates_path.display(),
            cov_sites.len(),
            abundance_path.display(),
            site_ids.len()
        )));
    }
    if let Some(k) = (0..site_ids.len()).find(|&k| site_ids[k] != cov_sites[k]) {
        return Err(Error::Cell {
            path: covariates_path.display().to_string(),
            row: k + 2,
            column: 1,
            message: format!(
                "site id {:?} does not match abundance site id {:?}",
                cov_sites[k], site_ids[k]
            ),
        });
    }
    if let Some(((k, i), y)) = abundance.indexed_iter().find(|(_, &y)| y < 0.0) {
        return Err(Error::Cell {
            path: abundance_path.display().to_string(),
            row: k + 2,
            column: i + 2,
            message: format!("negative abundance {y}"),
        });
    }
    let pre = Preprocessor::fit(&raw, options, None)?;
    let covariates = pre.transform(&raw)?;
    let data = CommunityData::with_ids(
        abundance,
        covariates,
        site_ids,
        species_ids,
        pre.output_names.clone(),
    )?;
    Ok((data, pre))
}

/// Writes the abundance and (preprocessed) covariate matrices.
pub fn write_community(
    data: &CommunityData,
    abundance_path: &Path,
    covariates_path: &Path,
) -> Result<()> {
    write_matrix(
        abundance_path,
        "site",
        &data.site_ids,
        &data.species_ids,
        &data.abundance,
    )?;
    write_matrix(
        covariates_path,
        "site",
        &data.site_ids,
        &data.covariate_names,
        &data.covariates,
    )
}

/// Outcome of a two-way stratified split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Species present at exactly one site; their site went to train.
    pub singleton_species: Vec<usize>,
    /// max over species of |test occurrence share − test_fraction|.
    pub max_proportion_deviation: f64,
}

/// Iterative multi-label stratification: sites are examples, species
/// presences are labels. Returns the split index for every site.
///
/// The site holding the currently rarest unallocated label is assigned to the
/// split with the largest remaining demand for that label; ties go to the split
/// with the largest remaining total demand, then to a seeded random choice.
pub fn iterative_stratification(
    labels: &Array2<bool>,
    ratios: &[f64],
    pinned: &[(usize, usize)],
    seed: u64,
) -> Vec<usize> {
    let (n, m) = labels.dim();
    let s = ratios.len();
    let mut rng = rng::stream(seed, "stratify", 0);
    let mut assign: Vec<Option<usize>> = vec![None; n];

    let mut demand_total: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut demand: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            let count = labels.column(i).iter().filter(|&&b| b).count() as f64;
            ratios.iter().map(|r| r * count).collect()
        })
        .collect();

    let take = |k: usize, split: usize, assign: &mut Vec<Option<usize>>, demand: &mut Vec<Vec<f64>>, demand_total: &mut Vec<f64>| {
        assign[k] = Some(split);
        demand_total[split] -= 1.0;
        for i in 0..m {
            if labels[(k, i)] {
                demand[i][split] -= 1.0;
            }
        }
    };

    for &(k, split) in pinned {
        if assign[k].is_none() {
            take(k, split, &mut assign, &mut demand, &mut demand_total);
        }
    }

    loop {
        // remaining unassigned examples per label
        let mut best: Option<(usize, usize)> = None;
        let mut ties = Vec::new();
        for i in 0..m {
            let c = (0..n).filter(|&k| assign[k].is_none() && labels[(k, i)]).count();
            if c == 0 {
                continue;
            }
            match best {
                Some((_, bc)) if c > bc => {}
                Some((_, bc)) if c == bc => ties.push(i),
                _ => {
                    best = Some((i, c));
                    ties = vec![i];
                }
            }
        }
        let Some(_) = best else { break };
        let label = ties[rng.random_range(0..ties.len())];
        let mut sites: Vec<usize> = (0..n)
            .filter(|&k| assign[k].is_none() && labels[(k, label)])
            .collect();
        sites.shuffle(&mut rng);
        for k in sites {
            let split = pick_split(&demand[label], &demand_total, &mut rng, s);
            take(k, split, &mut assign, &mut demand, &mut demand_total);
        }
    }

    let mut rest: Vec<usize> = (0..n).filter(|&k| assign[k].is_none()).collect();
    rest.shuffle(&mut rng);
    for k in rest {
        let split = pick_split(&demand_total.clone(), &demand_total, &mut rng, s);
        take(k, split, &mut assign, &mut demand, &mut demand_total);
    }
    assign.into_iter().map(|a| a.unwrap_or(0)).collect()
}

fn pick_split(primary: &[f64], total: &[f64], rng: &mut rng::Rng, s: usize) -> usize {
    let max_p = primary.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let cand: Vec<usize> = (0..s).filter(|&j| primary[j] == max_p).collect();
    if cand.len() == 1 {
        return cand[0];
    }
    let max_t = cand.iter().map(|&j| total[j]).fold(f64::NEG_INFINITY, f64::max);
    let cand: Vec<usize> = cand.into_iter().filter(|&j| total[j] == max_t).collect();
    cand[rng.random_range(0..cand.len())]
}

/// Two-way split of sites preserving each species' occurrence share.
pub fn stratified_split(data: &CommunityData, test_fraction: f64, seed: u64) -> Result<SplitReport> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Invalid(format!(
            "test fraction {test_fraction} must lie in (0, 1)"
        )));
    }
    let labels = data.presence();
    let (n, m) = labels.dim();
    let mut singleton_species = Vec::new();
    let mut pinned = Vec::new();
    for i in 0..m {
        let sites: Vec<usize> = (0..n).filter(|&k| labels[(k, i)]).collect();
        if sites.len() == 1 {
            singleton_species.push(i);
            pinned.push((sites[0], 0));
        }
    }
    if !singleton_species.is_empty() {
        warn!(
            "species {:?} occur at a single site and cannot be stratified; assigned to train",
            singleton_species
                .iter()
                .map(|&i| data.species_ids[i].as_str())
                .collect::<Vec<_>>()
        );
    }
    let assign = iterative_stratification(&labels, &[1.0 - test_fraction, test_fraction], &pinned, seed);
    let train: Vec<usize> = (0..n).filter(|&k| assign[k] == 0).collect();
    let test: Vec<usize> = (0..n).filter(|&k| assign[k] == 1).collect();
    let mut dev: f64 = 0.0;
    for i in 0..m {
        let total = labels.column(i).iter().filter(|&&b| b).count();
        if total < 2 {
            continue;
        }
        let in_test = test.iter().filter(|&&k| labels[(k, i)]).count();
        dev = dev.max((in_test as f64 / total as f64 - test_fraction).abs());
    }
    Ok(SplitReport {
        train,
        test,
        singleton_species,
        max_proportion_deviation: dev,
    })
}

/// Stratified k-fold assignment of sites; returns the fold of every site.
pub fn stratified_folds(data: &CommunityData, folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 || folds > data.n_sites() {
        return Err(Error::Invalid(format!(
            "{folds} folds requested for {} sites",
            data.n_sites()
        )));
    }
    let ratios = vec![1.0 / folds as f64; folds];
    Ok(iterative_stratification(&data.presence(), &ratios, &[], seed))
}

/// Per-species offsets: mean abundance over the sites where the species is
/// present. Absent species get 0; their indices are returned as warnings.
pub fn species_offsets(data: &CommunityData) -> (Vec<f64>, Vec<usize>) {
    let mut offsets = Vec::with_capacity(data.n_species());
    let mut absent = Vec::new();
    for (i, col) in data.abundance.axis_iter(Axis(1)).enumerate() {
        let (sum, count) = col
            .iter()
            .filter(|&&y| y > 0.0)
            .fold((0.0, 0usize), |(s, c), &y| (s + y, c + 1));
        if count == 0 {
            warn!("species {} is never present; offset set to 0", data.species_ids[i]);
            absent.push(i);
            offsets.push(0.0);
        } else {
            offsets.push(sum / count as f64);
        }
    }
    (offsets, absent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn loads_small_community() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(dir.path(), "a.csv", "site,A,B\ns1,0,2\ns2,1,0\ns3,3,4\n");
        let c = write(dir.path(), "c.csv", "site,temp\ns1,1.5\ns2,2\ns3,-1\n");
        let (data, _) = load_community(&a, &c, &PreprocessSpec::default()).unwrap();
        assert_eq!((data.n_sites(), data.n_species()), (3, 2));
        assert_eq!(data.abundance[(2, 1)], 4.0);
        assert_eq!(data.covariates[(0, 0)], 1.5);
        assert_eq!(data.species_ids, vec!["A", "B"]);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(dir.path(), "a.csv", "site,A,B\ns1,0,2\ns2,1,0\ns3,3,4\n");
        let c = write(dir.path(), "c.csv", "site,temp\ns1,1.5\ns2,2\n");
        let err = load_community(&a, &c, &PreprocessSpec::default()).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)), "{err}");
    }

    #[test]
    fn negative_and_unparseable_cells_report_location() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(dir.path(), "a.csv", "site,A,B\ns1,0,2\ns2,-1,0\n");
        let c = write(dir.path(), "c.csv", "site,temp\ns1,1\ns2,2\n");
        match load_community(&a, &c, &PreprocessSpec::default()).unwrap_err() {
            Error::Cell { row, column, .. } => assert_eq!((row, column), (3, 2)),
            e => panic!("unexpected {e}"),
        }
        let a = write(dir.path(), "a.csv", "site,A,B\ns1,0,2\ns2,1,0\n");
        let c = write(dir.path(), "c.csv", "site,temp\ns1,1\ns2,warm\n");
        match load_community(&a, &c, &PreprocessSpec::default()).unwrap_err() {
            Error::Cell { row, column, .. } => assert_eq!((row, column), (3, 2)),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn one_hot_expansion_matches_enumeration() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(dir.path(), "a.csv", "site,A\ns1,1\ns2,0\ns3,2\ns4,1\n");
        let c = write(
            dir.path(),
            "c.csv",
            "site,aspect,slope\ns1,N,1\ns2,S,2\ns3,E,3\ns4,N,4\n",
        );
        let spec = PreprocessSpec {
            categorical_columns: vec![0],
            ..Default::default()
        };
        let (data, pre) = load_community(&a, &c, &spec).unwrap();
        assert_eq!(pre.levels[&0], vec!["E", "N", "S"]);
        assert_eq!(data.covariate_names, vec!["slope", "aspect=E", "aspect=N", "aspect=S"]);
        // brute-force: indicator for (site, level) is 1 iff the raw cell equals the level
        let raw = ["N", "S", "E", "N"];
        for (k, cell) in raw.iter().enumerate() {
            let row = data.covariates.row(k);
            assert_eq!(row.slice(ndarray::s![1..]).sum(), 1.0);
            for (l, level) in ["E", "N", "S"].iter().enumerate() {
                assert_eq!(row[1 + l], if cell == level { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn scaling_and_quadratic_terms() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(dir.path(), "a.csv", "site,A\ns1,1\ns2,0\ns3,2\ns4,1\ns5,0\n");
        let c = write(dir.path(), "c.csv", "site,e\ns1,10\ns2,20\ns3,35\ns4,40\ns5,90\n");
        let spec = PreprocessSpec {
            scale_columns: vec![0],
            add_quadratic: vec![0],
            ..Default::default()
        };
        let (data, _) = load_community(&a, &c, &spec).unwrap();
        let col = data.covariates.column(0);
        let mean = col.mean().unwrap();
        let var = col.mapv(|v| (v - mean).powi(2)).mean().unwrap();
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-9);
        for k in 0..5 {
            assert_eq!(data.covariates[(k, 1)], data.covariates[(k, 0)].powi(2));
        }
    }

    #[test]
    fn scaling_statistics_come_from_training_rows() {
        let raw = RawCovariates {
            names: vec!["e".into()],
            cells: vec![vec!["0".into()], vec!["2".into()], vec!["100".into()]],
            path: "mem".into(),
        };
        let spec = PreprocessSpec {
            scale_columns: vec![0],
            ..Default::default()
        };
        let pre = Preprocessor::fit(&raw, &spec, Some(&[0, 1])).unwrap();
        let x = pre.transform(&raw).unwrap();
        assert_eq!(x[(0, 0)], -1.0);
        assert_eq!(x[(1, 0)], 1.0);
        assert_eq!(x[(2, 0)], 99.0);
    }

    #[test]
    fn overlapping_categorical_and_scaled_columns_rejected() {
        let spec = PreprocessSpec {
            categorical_columns: vec![0],
            scale_columns: vec![0],
            add_quadratic: vec![],
        };
        assert!(spec.validate(2).is_err());
        assert!(PreprocessSpec { scale_columns: vec![3], ..Default::default() }
            .validate(2)
            .is_err());
    }

    #[test]
    fn write_then_load_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let data = CommunityData::new(
            array![[0.0, 1.5], [3.0, 0.1], [2.0, 7.25]],
            array![[0.1 + 0.2], [-1e-300], [123456.789]],
        )
        .unwrap();
        let (a, c) = (dir.path().join("a.csv"), dir.path().join("c.csv"));
        write_community(&data, &a, &c).unwrap();
        let (back, _) = load_community(&a, &c, &PreprocessSpec::default()).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn binary_flag_rejects_counts() {
        let d = CommunityData::new(array![[0.0, 2.0]], array![[1.0]]).unwrap();
        assert!(d.binary().is_err());
        let d = CommunityData::new(array![[0.0, 1.0]], array![[1.0]]).unwrap();
        assert!(d.binary().is_ok());
    }

    #[test]
    fn duplicate_species_and_bad_groups_rejected() {
        let r = CommunityData::with_ids(
            array![[0.0, 1.0]],
            array![[1.0]],
            vec!["s".into()],
            vec!["a".into(), "a".into()],
            vec!["x".into()],
        );
        assert!(r.is_err());
        let d = CommunityData::new(array![[0.0, 1.0]], array![[1.0]]).unwrap();
        assert!(d.with_groups(vec![0]).is_err());
    }

    #[test]
    fn offsets_average_over_presences() {
        let d = CommunityData::new(
            array![[0.0, 0.0, 5.0], [2.0, 0.0, 5.0], [4.0, 0.0, 5.0]],
            array![[0.0], [0.0], [0.0]],
        )
        .unwrap();
        let (o, absent) = species_offsets(&d);
        assert_eq!(o, vec![3.0, 0.0, 5.0]);
        assert_eq!(absent, vec![1]);
    }

    #[test]
    fn split_full_occupancy_is_balanced() {
        let d = CommunityData::new(Array2::ones((10, 3)), Array2::zeros((10, 1))).unwrap();
        let r = stratified_split(&d, 0.5, 3).unwrap();
        assert_eq!(r.test.len(), 5);
        assert_eq!(r.max_proportion_deviation, 0.0);
    }

    #[test]
    fn split_rare_species_gets_nearest_integer_share() {
        // 10 sites, species A at 4 of them, test fraction 0.25.
        // Feasible test allocations of A's 4 occurrences are 0..=4; the
        // nearest to 4 * 0.25 = 1 is exactly 1.
        let mut y = Array2::zeros((10, 1));
        for k in [1, 4, 6, 9] {
            y[(k, 0)] = 1.0;
        }
        let d = CommunityData::new(y, Array2::zeros((10, 1))).unwrap();
        let target = (0..=4)
            .min_by(|a, b| {
                let da = (*a as f64 - 1.0f64).abs();
                let db = (*b as f64 - 1.0f64).abs();
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        for seed in 0..20 {
            let r = stratified_split(&d, 0.25, seed).unwrap();
            let hits = r.test.iter().filter(|&&k| d.abundance[(k, 0)] > 0.0).count();
            assert_eq!(hits, target, "seed {seed}");
        }
    }

    #[test]
    fn split_is_deterministic_partition() {
        let y = Array2::from_shape_fn((30, 4), |(k, i)| ((k * 7 + i * 3) % 5 == 0) as u8 as f64);
        let d = CommunityData::new(y, Array2::zeros((30, 1))).unwrap();
        let a = stratified_split(&d, 0.3, 11).unwrap();
        let b = stratified_split(&d, 0.3, 11).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<usize> = a.train.iter().chain(&a.test).cloned().collect();
        all.sort();
        assert_eq!(all, (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn singleton_species_go_to_train() {
        let mut y = Array2::zeros((6, 2));
        y[(3, 0)] = 1.0;
        for k in 0..6 {
            y[(k, 1)] = (k % 2) as f64;
        }
        let d = CommunityData::new(y, Array2::zeros((6, 1))).unwrap();
        let r = stratified_split(&d, 0.5, 0).unwrap();
        assert_eq!(r.singleton_species, vec![0]);
        assert!(r.train.contains(&3));
    }

    #[test]
    fn folds_cover_sites() {
        let y = Array2::from_shape_fn((20, 3), |(k, i)| ((k + i) % 3 == 0) as u8 as f64);
        let d = CommunityData::new(y, Array2::zeros((20, 1))).unwrap();
        let f = stratified_folds(&d, 4, 1).unwrap();
        for fold in 0..4 {
            assert_eq!(f.iter().filter(|&&x| x == fold).count(), 5);
        }
        assert!(stratified_folds(&d, 21, 1).is_err());
    }
}
