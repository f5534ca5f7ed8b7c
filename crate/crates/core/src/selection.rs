//! Choosing the embedding dimension and the L1 penalty, by information
//! criteria on full-data fits or by k-fold cross-validation.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use log::{info, warn};
use ndarray::Axis;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::associations::{BioticContextSpec, EmbeddingPair};
use crate::data::{stratified_folds, CommunityData};
use crate::distributions::{poisson_deviance, FamilyKind};
use crate::error::{Error, Result};
use crate::eval::roc_auc;
use crate::inference::{train, TrainConfig};
use crate::model::{FittedModel, ModelSpec};
use crate::rng;

pub const EFFECTIVE_DIMENSION_THRESHOLD: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Aic,
    Bic,
    Ebic,
    Cv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    PoissonDeviance,
    Auc,
    Accuracy,
}

impl Metric {
    pub fn higher_is_better(self) -> bool {
        !matches!(self, Metric::PoissonDeviance)
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::Aic => "aic",
            Criterion::Bic => "bic",
            Criterion::Ebic => "ebic",
            Criterion::Cv => "cv",
        })
    }
}

impl FromStr for Criterion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "aic" => Ok(Criterion::Aic),
            "bic" => Ok(Criterion::Bic),
            "ebic" => Ok(Criterion::Ebic),
            "cv" => Ok(Criterion::Cv),
            _ => Err(Error::Invalid(format!("unknown criterion '{s}' (aic, bic, ebic, cv)"))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::PoissonDeviance => "poisson_deviance",
            Metric::Auc => "auc",
            Metric::Accuracy => "accuracy",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "poisson_deviance" | "deviance" => Ok(Metric::PoissonDeviance),
            "auc" => Ok(Metric::Auc),
            "accuracy" => Ok(Metric::Accuracy),
            _ => Err(Error::Invalid(format!("unknown metric '{s}' (poisson_deviance, auc, accuracy)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionGrid {
    pub dims: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub criterion: Criterion,
    pub folds: usize,
    pub metric: Metric,
    pub ebic_gamma: f64,
}

impl Default for SelectionGrid {
    fn default() -> Self {
        SelectionGrid {
            dims: vec![2, 4, 8, 16, 32],
            lambdas: vec![0.01, 0.015, 0.02, 0.025],
            criterion: Criterion::Cv,
            folds: 10,
            metric: Metric::PoissonDeviance,
            ebic_gamma: 0.5,
        }
    }
}

impl SelectionGrid {
    /// Powers of two from 2 up to `m / 2` (at most 32).
    pub fn default_dims(m: usize) -> Vec<usize> {
        let cap = (m / 2).clamp(2, 32);
        (1..=5).map(|e| 1usize << e).filter(|&d| d <= cap).collect()
    }

    pub fn for_species(m: usize) -> Self {
        SelectionGrid { dims: Self::default_dims(m), ..Self::default() }
    }

    /// Default penalties, 0.01 to 0.025 in steps of 0.005.
    pub fn text_preset() -> Self {
        SelectionGrid::default()
    }

    /// Coarser penalties, 0.01 to 0.04 in steps of 0.01.
    pub fn table_preset() -> Self {
        SelectionGrid { lambdas: vec![0.01, 0.02, 0.03, 0.04], ..Self::default() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "text" => Ok(Self::text_preset()),
            "table" => Ok(Self::table_preset()),
            _ => Err(Error::Invalid(format!("unknown grid preset '{name}' (text, table)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() || self.lambdas.is_empty() {
            return Err(Error::Invalid("selection grid must list at least one dimension and one penalty".into()));
        }
        if self.dims.contains(&0) {
            return Err(Error::Invalid("embedding dimensions must be positive".into()));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return Err(Error::Invalid(format!("penalty {l} must be non-negative")));
        }
        if self.criterion == Criterion::Cv && self.folds < 2 {
            return Err(Error::Invalid(format!("cross-validation needs at least 2 folds, got {}", self.folds)));
        }
        if !(self.ebic_gamma >= 0.0) {
            return Err(Error::Invalid(format!("eBIC gamma {} must be non-negative", self.ebic_gamma)));
        }
        Ok(())
    }

    fn cells(&self) -> Vec<(usize, f64)> {
        self.dims
            .iter()
            .flat_map(|&d| self.lambdas.iter().map(move |&l| (d, l)))
            .collect()
    }
}

/// AIC, BIC or eBIC (`BIC + 2γ k ln m`, `m` the number of species).
pub fn information_criterion(
    log_likelihood: f64,
    k_params: usize,
    n_obs: usize,
    n_species: usize,
    kind: Criterion,
    gamma: f64,
) -> Result<f64> {
    if n_obs == 0 {
        return Err(Error::Invalid("information criteria need at least one observation".into()));
    }
    let k = k_params as f64;
    let bic = k * (n_obs as f64).ln() - 2.0 * log_likelihood;
    match kind {
        Criterion::Aic => Ok(2.0 * k - 2.0 * log_likelihood),
        Criterion::Bic => Ok(bic),
        Criterion::Ebic => Ok(bic + 2.0 * gamma * k * (n_species.max(1) as f64).ln()),
        Criterion::Cv => Err(Error::Invalid("cv is not an information criterion".into())),
    }
}

/// Number of latent components that are not numerically zero for every
/// species in both the response and the effect embedding.
pub fn effective_dimension(emb: &EmbeddingPair, threshold: f64) -> usize {
    (0..emb.dim())
        .filter(|&l| {
            let col = |m: &ndarray::Array2<f64>| m.column(l).iter().fold(0.0f64, |a, v| a.max(v.abs()));
            col(&emb.response).max(col(&emb.effect)) >= threshold
        })
        .count()
}

/// The counting rule used by [`parameter_count`].
pub const PARAMETER_RULE: &str = "habitat weights (unless frozen) + nonzero embedding entries \
(one row per shared group) + nonzero conditioning weights + dispersions + learned offsets";

/// Free parameters of a fitted model, as used by the information criteria.
pub fn parameter_count(model: &FittedModel) -> usize {
    let habitat = if model.frozen_habitat { 0 } else { model.habitat.weights.len() };
    let rows: Vec<usize> = match &model.groups {
        Some(g) => {
            // First species of each group stands for the shared row.
            let mut seen = BTreeSet::new();
            (0..g.len()).filter(|&i| seen.insert(g[i])).collect()
        }
        None => (0..model.n_species()).collect(),
    };
    let nonzero = |m: &ndarray::Array2<f64>| {
        rows.iter()
            .map(|&i| m.row(i).iter().filter(|v| **v != 0.0).count())
            .sum::<usize>()
    };
    let embeddings = nonzero(&model.emb.response) + nonzero(&model.emb.effect);
    let conditioning = match &model.context_spec {
        BioticContextSpec::Conditioned { weights } => weights.iter().filter(|v| **v != 0.0).count(),
        _ => 0,
    };
    let dispersions = model.family.dispersion.as_ref().map_or(0, Vec::len);
    let offsets = if model.learned_offsets { model.n_species() } else { 0 };
    habitat + embeddings + conditioning + dispersions + offsets
}

/// Probability that a species is present under the model's prediction.
fn presence_probability(model: &FittedModel, mean: f64, p_present: Option<f64>) -> f64 {
    if let Some(p) = p_present {
        return p;
    }
    match model.family.kind {
        FamilyKind::Bernoulli => mean,
        _ => 1.0 - (-mean.max(0.0)).exp(),
    }
}

/// Held-out score of `model` on `data`, restricted to `species`.
pub fn score(model: &FittedModel, data: &CommunityData, metric: Metric, species: &[usize]) -> Result<f64> {
    if species.is_empty() {
        return Err(Error::Invalid("no species left to score".into()));
    }
    let pred = model.predict(data)?;
    let n = data.n_sites();
    match metric {
        Metric::PoissonDeviance => {
            let mut y = Vec::with_capacity(n * species.len());
            let mut mu = Vec::with_capacity(n * species.len());
            for k in 0..n {
                for &i in species {
                    y.push(data.abundance[(k, i)]);
                    mu.push(pred.mean[(k, i)].max(1e-12));
                }
            }
            Ok(poisson_deviance(&y, &mu)? / y.len() as f64)
        }
        Metric::Accuracy => {
            let mut hits = 0usize;
            for k in 0..n {
                for &i in species {
                    let p = presence_probability(model, pred.mean[(k, i)], pred.p_present.as_ref().map(|p| p[(k, i)]));
                    hits += usize::from((p > 0.5) == (data.abundance[(k, i)] > 0.0));
                }
            }
            Ok(hits as f64 / (n * species.len()) as f64)
        }
        Metric::Auc => {
            let mut total = 0.0;
            let mut count = 0usize;
            for &i in species {
                let scores: Vec<f64> = (0..n)
                    .map(|k| presence_probability(model, pred.mean[(k, i)], pred.p_present.as_ref().map(|p| p[(k, i)])))
                    .collect();
                let labels: Vec<bool> = (0..n).map(|k| data.abundance[(k, i)] > 0.0).collect();
                if let Some(a) = roc_auc(&scores, &labels) {
                    total += a;
                    count += 1;
                }
            }
            if count == 0 {
                return Err(Error::Invalid("no species has both presences and absences in the held-out sites".into()));
            }
            Ok(total / count as f64)
        }
    }
}

/// One fit within the search: a fold of a cell, or the full-data fit for
/// information criteria (`fold` is `None`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitScore {
    pub dim: usize,
    pub lambda: f64,
    pub fold: Option<usize>,
    pub score: f64,
    pub effective_dimension: usize,
    pub log_likelihood: Option<f64>,
    pub parameters: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub dim: usize,
    pub lambda: f64,
    pub scores: Vec<f64>,
    pub mean_score: f64,
    pub mean_effective_dimension: f64,
}

/// Species excluded from scoring in a fold because they never occur there.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageNote {
    pub fold: usize,
    pub excluded_species: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub criterion: Criterion,
    pub metric: Option<Metric>,
    pub fits: Vec<FitScore>,
    pub cells: Vec<CellSummary>,
    pub best_dim: usize,
    pub best_lambda: f64,
    pub coverage: Vec<CoverageNote>,
    pub parameter_rule: String,
}

/// Index of the best cell: best mean score, then smaller `d`, then larger λ.
fn best_cell(cells: &[CellSummary], higher_is_better: bool) -> usize {
    let mut best = 0;
    for (c, cell) in cells.iter().enumerate().skip(1) {
        let cur = &cells[best];
        let better = if higher_is_better { cell.mean_score > cur.mean_score } else { cell.mean_score < cur.mean_score };
        let tie = cell.mean_score == cur.mean_score;
        if better
            || (tie && cell.dim < cur.dim)
            || (tie && cell.dim == cur.dim && cell.lambda > cur.lambda)
        {
            best = c;
        }
    }
    best
}

fn cell_config(base: &TrainConfig, lambda: f64, seed: u64) -> TrainConfig {
    TrainConfig { lambda_l1: lambda, seed, ..base.clone() }
}

fn summarize(grid: &SelectionGrid, fits: &[FitScore]) -> Vec<CellSummary> {
    grid.cells()
        .into_iter()
        .enumerate()
        .map(|(c, (dim, lambda))| {
            let per = fits.len() / grid.cells().len();
            let own = &fits[c * per..(c + 1) * per];
            let scores: Vec<f64> = own.iter().map(|f| f.score).collect();
            CellSummary {
                dim,
                lambda,
                mean_score: scores.iter().sum::<f64>() / scores.len() as f64,
                mean_effective_dimension: own.iter().map(|f| f.effective_dimension as f64).sum::<f64>()
                    / own.len() as f64,
                scores,
            }
        })
        .collect()
}

/// k-fold cross-validation over the grid. Every cell uses the same fold
/// assignment and the same per-fold seeds.
pub fn cross_validate(
    data: &CommunityData,
    spec: &ModelSpec,
    grid: &SelectionGrid,
    base: &TrainConfig,
) -> Result<SelectionReport> {
    grid.validate()?;
    if grid.criterion != Criterion::Cv {
        return Err(Error::Invalid(format!("cross_validate called with criterion {}", grid.criterion)));
    }
    let assignment = stratified_folds(data, grid.folds, rng::child_seed(base.seed, "cv-folds", 0))?;
    let mut coverage = Vec::new();
    let mut folds = Vec::with_capacity(grid.folds);
    for f in 0..grid.folds {
        let test: Vec<usize> = (0..data.n_sites()).filter(|&k| assignment[k] == f).collect();
        let train_sites: Vec<usize> = (0..data.n_sites()).filter(|&k| assignment[k] != f).collect();
        let held = data.subset_sites(&test);
        let present: Vec<bool> = held
            .abundance
            .axis_iter(Axis(1))
            .map(|c| c.iter().any(|&y| y > 0.0))
            .collect();
        let scored: Vec<usize> = (0..data.n_species()).filter(|&i| present[i]).collect();
        let excluded: Vec<String> = (0..data.n_species())
            .filter(|&i| !present[i])
            .map(|i| data.species_ids[i].clone())
            .collect();
        if !excluded.is_empty() {
            warn!("fold {f}: {} species absent from the held-out sites are not scored", excluded.len());
            coverage.push(CoverageNote { fold: f, excluded_species: excluded });
        }
        folds.push((data.subset_sites(&train_sites), held, scored));
    }

    let jobs: Vec<(usize, f64, usize)> = grid
        .cells()
        .into_iter()
        .flat_map(|(d, l)| (0..grid.folds).map(move |f| (d, l, f)))
        .collect();
    let fits: Vec<FitScore> = jobs
        .par_iter()
        .map(|&(dim, lambda, f)| {
            let (train_data, held, scored) = &folds[f];
            let cell_spec = ModelSpec { dim, ..spec.clone() };
            let config = cell_config(base, lambda, rng::child_seed(base.seed, "cv-fit", f as u64));
            let model = train(train_data, &cell_spec, &config)?;
            Ok(FitScore {
                dim,
                lambda,
                fold: Some(f),
                score: score(&model, held, grid.metric, scored)?,
                effective_dimension: effective_dimension(&model.emb, EFFECTIVE_DIMENSION_THRESHOLD),
                log_likelihood: None,
                parameters: None,
            })
        })
        .collect::<Result<_>>()?;

    let cells = summarize(grid, &fits);
    let best = best_cell(&cells, grid.metric.higher_is_better());
    info!("cross-validation picked d = {}, lambda = {}", cells[best].dim, cells[best].lambda);
    Ok(SelectionReport {
        criterion: Criterion::Cv,
        metric: Some(grid.metric),
        best_dim: cells[best].dim,
        best_lambda: cells[best].lambda,
        fits,
        cells,
        coverage,
        parameter_rule: PARAMETER_RULE.into(),
    })
}

/// Full-data fits scored by AIC, BIC or eBIC; the log-likelihood is the
/// unpenalized one at the fitted parameters and there is one observation
/// per (site, species) pair.
pub fn select_by_information(
    data: &CommunityData,
    spec: &ModelSpec,
    grid: &SelectionGrid,
    base: &TrainConfig,
) -> Result<SelectionReport> {
    grid.validate()?;
    if grid.criterion == Criterion::Cv {
        return Err(Error::Invalid("use cross_validate for criterion cv".into()));
    }
    let n_obs = data.n_sites() * data.n_species();
    let fits: Vec<FitScore> = grid
        .cells()
        .par_iter()
        .map(|&(dim, lambda)| {
            let cell_spec = ModelSpec { dim, ..spec.clone() };
            let model = train(data, &cell_spec, &cell_config(base, lambda, base.seed))?;
            let log_likelihood = -model.nll(data, None)?;
            let k = parameter_count(&model);
            Ok(FitScore {
                dim,
                lambda,
                fold: None,
                score: information_criterion(log_likelihood, k, n_obs, data.n_species(), grid.criterion, grid.ebic_gamma)?,
                effective_dimension: effective_dimension(&model.emb, EFFECTIVE_DIMENSION_THRESHOLD),
                log_likelihood: Some(log_likelihood),
                parameters: Some(k),
            })
        })
        .collect::<Result<_>>()?;
    let cells = summarize(grid, &fits);
    let best = best_cell(&cells, false);
    Ok(SelectionReport {
        criterion: grid.criterion,
        metric: None,
        best_dim: cells[best].dim,
        best_lambda: cells[best].lambda,
        fits,
        cells,
        coverage: Vec::new(),
        parameter_rule: PARAMETER_RULE.into(),
    })
}

/// Dispatches on the grid's criterion.
pub fn select(data: &CommunityData, spec: &ModelSpec, grid: &SelectionGrid, base: &TrainConfig) -> Result<SelectionReport> {
    match grid.criterion {
        Criterion::Cv => cross_validate(data, spec, grid, base),
        _ => select_by_information(data, spec, grid, base),
    }
}
