//! Conditional likelihood: habitat predictor, biotic predictor and the three
//! aggregation modes, plus prediction from a fitted model.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::associations::{conditioning_vector, BioticContextSpec, ContextIndex, EmbeddingPair};
use crate::data::CommunityData;
use crate::distributions::{
    clamp_eta, dispersion_gradient, nll_eta, nll_gradient, sigmoid, softplus, FamilyKind,
    ResponseFamily, ETA_CLAMP, PROB_EPS,
};
use crate::error::{Error, Result};

/// Per-species linear habitat model over preprocessed covariates. Row i holds
/// the coefficients of species i; the last column is the intercept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HabitatModel {
    pub weights: Array2<f64>,
}

impl HabitatModel {
    pub fn zeros(m: usize, n_covariates: usize) -> Self {
        HabitatModel {
            weights: Array2::zeros((m, n_covariates + 1)),
        }
    }

    pub fn n_species(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_covariates(&self) -> usize {
        self.weights.ncols() - 1
    }

    /// `η^A` without dimension checks.
    pub fn predictor(&self, species: usize, x: ArrayView1<'_, f64>) -> f64 {
        let w = self.weights.row(species);
        let p = x.len();
        w.slice(ndarray::s![..p]).dot(&x) + w[p]
    }
}

/// `η^A = w_i · (x_k, 1)`.
pub fn abiotic_predictor(hab: &HabitatModel, species: usize, x: ArrayView1<'_, f64>) -> Result<f64> {
    if x.len() != hab.n_covariates() {
        return Err(Error::Dimension(format!(
            "{} covariates for a habitat model over {}",
            x.len(),
            hab.n_covariates()
        )));
    }
    if species >= hab.n_species() {
        return Err(Error::Dimension(format!("species index {species} out of range")));
    }
    Ok(hab.predictor(species, x))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// `g⁻¹(η^A + η^B)`
    #[default]
    Additive,
    /// `σ(η^A)·σ(η^B)`, presence/absence only.
    Multiplicative,
    /// Occupancy `σ(η^A)`, abundance mean `exp(η^B)` when present.
    Hierarchical,
}

impl AggregationMode {
    pub fn name(self) -> &'static str {
        match self {
            AggregationMode::Additive => "additive",
            AggregationMode::Multiplicative => "multiplicative",
            AggregationMode::Hierarchical => "hierarchical",
        }
    }

    pub fn check_family(self, family: FamilyKind) -> Result<()> {
        let ok = match self {
            AggregationMode::Additive => family != FamilyKind::ZeroInflatedNb,
            AggregationMode::Multiplicative => family == FamilyKind::Bernoulli,
            AggregationMode::Hierarchical => matches!(
                family,
                FamilyKind::Poisson | FamilyKind::NegativeBinomial | FamilyKind::ZeroInflatedNb
            ),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::ModeFamily {
                mode: self.name().into(),
                family: family.name().into(),
            })
        }
    }

    pub fn check_data(self, data: &CommunityData) -> Result<()> {
        match self {
            AggregationMode::Multiplicative if !data.binary && !is_binary(data) => Err(
                Error::Invalid("multiplicative aggregation requires presence/absence data".into()),
            ),
            AggregationMode::Hierarchical if !data.is_count() => Err(Error::Invalid(
                "hierarchical aggregation requires count data".into(),
            )),
            _ => Ok(()),
        }
    }
}

fn is_binary(data: &CommunityData) -> bool {
    data.abundance.iter().all(|&y| y == 0.0 || y == 1.0)
}

impl fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AggregationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "additive" => Ok(AggregationMode::Additive),
            "multiplicative" => Ok(AggregationMode::Multiplicative),
            "hierarchical" => Ok(AggregationMode::Hierarchical),
            other => Err(Error::Invalid(format!("unknown aggregation mode '{other}'"))),
        }
    }
}

/// How the hierarchical mode treats the occupancy state during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OccupancyTreatment {
    /// `s = 1{y > 0}` is taken as observed and the likelihood factorizes.
    #[default]
    Observed,
    /// Zero counts are a mixture of absence and a sampled zero (full ZINB).
    Latent,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ConditionalMean {
    Mean(f64),
    Hurdle { p_present: f64, abundance: f64 },
}

impl ConditionalMean {
    /// Expected response.
    pub fn expected(self) -> f64 {
        match self {
            ConditionalMean::Mean(m) => m,
            ConditionalMean::Hurdle { p_present, abundance } => p_present * abundance,
        }
    }
}

pub fn conditional_mean(
    mode: AggregationMode,
    family: FamilyKind,
    eta_a: f64,
    eta_b: f64,
) -> Result<ConditionalMean> {
    mode.check_family(family)?;
    Ok(match mode {
        AggregationMode::Additive => ConditionalMean::Mean(family.inverse_link(clamp_eta(eta_a + eta_b))),
        AggregationMode::Multiplicative => {
            ConditionalMean::Mean(sigmoid(clamp_eta(eta_a)) * sigmoid(clamp_eta(eta_b)))
        }
        AggregationMode::Hierarchical => ConditionalMean::Hurdle {
            p_present: sigmoid(clamp_eta(eta_a)),
            abundance: clamp_eta(eta_b).exp(),
        },
    })
}

/// Loss of one (site, species) pair and its derivatives with respect to the
/// two predictors and the log-dispersion.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PairLoss {
    pub loss: f64,
    pub grad_a: f64,
    pub grad_b: f64,
    pub grad_log_dispersion: f64,
}

fn count_kernel(family: FamilyKind) -> FamilyKind {
    match family {
        FamilyKind::ZeroInflatedNb => FamilyKind::NegativeBinomial,
        other => other,
    }
}

pub fn pair_loss(
    mode: AggregationMode,
    family: FamilyKind,
    occupancy: OccupancyTreatment,
    y: f64,
    eta_a: f64,
    eta_b: f64,
    dispersion: Option<f64>,
) -> PairLoss {
    match mode {
        AggregationMode::Additive => {
            let eta = eta_a + eta_b;
            let g = nll_gradient(family, y, eta, dispersion);
            PairLoss {
                loss: nll_eta(family, y, eta, dispersion),
                grad_a: g,
                grad_b: g,
                grad_log_dispersion: dispersion_gradient(family, y, eta, dispersion),
            }
        }
        AggregationMode::Multiplicative => multiplicative_loss(y, eta_a, eta_b),
        AggregationMode::Hierarchical => {
            let kernel = count_kernel(family);
            let in_a = eta_a.abs() <= ETA_CLAMP;
            let a = clamp_eta(eta_a);
            let p = sigmoid(a);
            if y > 0.0 {
                return PairLoss {
                    loss: softplus(-a) + nll_eta(kernel, y, eta_b, dispersion),
                    grad_a: if in_a { p - 1.0 } else { 0.0 },
                    grad_b: nll_gradient(kernel, y, eta_b, dispersion),
                    grad_log_dispersion: dispersion_gradient(kernel, y, eta_b, dispersion),
                };
            }
            match occupancy {
                OccupancyTreatment::Observed => PairLoss {
                    loss: softplus(a),
                    grad_a: if in_a { p } else { 0.0 },
                    ..PairLoss::default()
                },
                OccupancyTreatment::Latent => latent_zero_loss(kernel, p, in_a, eta_b, dispersion),
            }
        }
    }
}

fn multiplicative_loss(y: f64, eta_a: f64, eta_b: f64) -> PairLoss {
    let (a, b) = (clamp_eta(eta_a), clamp_eta(eta_b));
    let (sa, sb) = (sigmoid(a), sigmoid(b));
    let mu = sa * sb;
    let (da, db) = (
        if eta_a.abs() <= ETA_CLAMP { 1.0 } else { 0.0 },
        if eta_b.abs() <= ETA_CLAMP { 1.0 } else { 0.0 },
    );
    if y > 0.0 {
        // −ln μ = softplus(−a) + softplus(−b)
        PairLoss {
            loss: softplus(-a) + softplus(-b),
            grad_a: -(1.0 - sa) * da,
            grad_b: -(1.0 - sb) * db,
            grad_log_dispersion: 0.0,
        }
    } else {
        let q = (1.0 - mu).max(PROB_EPS);
        PairLoss {
            loss: -q.ln(),
            grad_a: mu * (1.0 - sa) / q * da,
            grad_b: mu * (1.0 - sb) / q * db,
            grad_log_dispersion: 0.0,
        }
    }
}

fn latent_zero_loss(kernel: FamilyKind, p: f64, in_a: bool, eta_b: f64, dispersion: Option<f64>) -> PairLoss {
    let in_b = eta_b.abs() <= ETA_CLAMP;
    let m = clamp_eta(eta_b).exp();
    let (f0, dm, dtheta) = match kernel {
        FamilyKind::Poisson => {
            let f0 = (-m).exp();
            (f0, -f0, 0.0)
        }
        _ => {
            let theta = dispersion.unwrap_or(1.0);
            let r = theta / (theta + m);
            let f0 = r.powf(theta);
            (f0, -theta * f0 / (theta + m), f0 * (r.ln() + m / (theta + m)))
        }
    };
    let d = (1.0 - p + p * f0).max(PROB_EPS);
    PairLoss {
        loss: -d.ln(),
        grad_a: if in_a { (1.0 - f0) / d * p * (1.0 - p) } else { 0.0 },
        grad_b: if in_b { -p * dm * m / d } else { 0.0 },
        grad_log_dispersion: -p * dtheta * dispersion.unwrap_or(1.0) / d,
    }
}

/// Static description of a model before fitting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub family: FamilyKind,
    pub mode: AggregationMode,
    pub context: BioticContextSpec,
    pub dim: usize,
    pub occupancy: OccupancyTreatment,
    /// Train the per-species offsets. Defaults to true except in additive
    /// mode, where the offset is confounded with the habitat intercept.
    pub learn_offsets: Option<bool>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            family: FamilyKind::NegativeBinomial,
            mode: AggregationMode::Additive,
            context: BioticContextSpec::Basic,
            dim: 2,
            occupancy: OccupancyTreatment::Observed,
            learn_offsets: None,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self, data: &CommunityData) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Invalid("embedding dimension must be at least 1".into()));
        }
        self.mode.check_family(self.family)?;
        self.mode.check_data(data)?;
        check_outcomes(self.family, data)?;
        self.context.validate(data, self.dim)
    }

    pub fn learns_offsets(&self) -> bool {
        self.learn_offsets.unwrap_or(self.mode != AggregationMode::Additive)
    }
}

/// Checks every outcome lies in the support of `family`.
pub fn check_outcomes(family: FamilyKind, data: &CommunityData) -> Result<()> {
    for ((k, i), &y) in data.abundance.indexed_iter() {
        let ok = match family {
            FamilyKind::Bernoulli => y == 0.0 || y == 1.0,
            FamilyKind::Normal => y.is_finite(),
            _ => y >= 0.0 && y.fract() == 0.0,
        };
        if !ok {
            return Err(Error::Domain(format!(
                "outcome {y} at site {}, species {} is outside the {} support",
                data.site_ids[k],
                data.species_ids[i],
                family.name()
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub habitat: HabitatModel,
    pub emb: EmbeddingPair,
    /// Link-scale offsets `o_i`.
    pub offsets: Vec<f64>,
    pub family: ResponseFamily,
    pub mode: AggregationMode,
    pub occupancy: OccupancyTreatment,
    pub context_spec: BioticContextSpec,
    /// Embedding group of each species when rows are shared.
    pub groups: Option<Vec<usize>>,
    pub learned_offsets: bool,
    pub frozen_habitat: bool,
    pub training_log: Vec<EpochRecord>,
    pub seed: u64,
}

/// Per-site means; `p_present` and `abundance` are filled in hierarchical mode.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub mean: Array2<f64>,
    pub p_present: Option<Array2<f64>>,
    pub abundance: Option<Array2<f64>>,
}

impl FittedModel {
    pub fn n_species(&self) -> usize {
        self.emb.n_species()
    }

    pub fn dim(&self) -> usize {
        self.emb.dim()
    }

    pub fn association_matrix(&self) -> Array2<f64> {
        self.emb.association_matrix()
    }

    /// Same model with `A = 0`.
    pub fn without_associations(&self) -> FittedModel {
        let mut out = self.clone();
        out.emb = EmbeddingPair::zeros(self.n_species(), self.dim());
        out
    }

    pub fn check_data(&self, data: &CommunityData) -> Result<()> {
        if data.n_species() != self.n_species() {
            return Err(Error::Dimension(format!(
                "model has {} species, data has {}",
                self.n_species(),
                data.n_species()
            )));
        }
        if data.n_covariates() != self.habitat.n_covariates() {
            return Err(Error::Dimension(format!(
                "model expects {} covariates, data has {}",
                self.habitat.n_covariates(),
                data.n_covariates()
            )));
        }
        self.mode.check_family(self.family.kind)?;
        check_outcomes(self.family.kind, data)?;
        self.context_spec.validate(data, self.dim())
    }

    /// `(η^A, η^B)` for one pair.
    pub fn predictors(&self, index: &ContextIndex, data: &CommunityData, site: usize, species: usize) -> (f64, f64) {
        let eta_a = self.habitat.predictor(species, data.covariates.row(site));
        let mut z = index.raw_context(site, species, &self.emb.effect, |j| j);
        if let BioticContextSpec::Conditioned { weights } = &self.context_spec {
            z *= &conditioning_vector(weights, index.conditioning_input(site).expect("conditioned"));
        }
        (eta_a, self.offsets[species] + self.emb.response.row(species).dot(&z))
    }

    /// Summed negative log-likelihood over `pairs` (all pairs when `None`).
    pub fn nll(&self, data: &CommunityData, pairs: Option<&[(usize, usize)]>) -> Result<f64> {
        self.check_data(data)?;
        let index = ContextIndex::build(data, &self.context_spec)?;
        let term = |k: usize, i: usize| {
            let (a, b) = self.predictors(&index, data, k, i);
            pair_loss(
                self.mode,
                self.family.kind,
                self.occupancy,
                data.abundance[(k, i)],
                a,
                b,
                self.family.dispersion_of(i),
            )
            .loss
        };
        let partial: Vec<f64> = match pairs {
            Some(pairs) => {
                for &(k, i) in pairs {
                    if k >= data.n_sites() || i >= data.n_species() {
                        return Err(Error::Dimension(format!("pair ({k}, {i}) out of range")));
                    }
                }
                pairs.par_iter().map(|&(k, i)| term(k, i)).collect()
            }
            None => (0..data.n_sites())
                .into_par_iter()
                .map(|k| (0..data.n_species()).map(|i| term(k, i)).sum())
                .collect(),
        };
        let total: f64 = partial.iter().sum();
        if !total.is_finite() {
            return Err(Error::Domain(format!("negative log-likelihood is {total}")));
        }
        Ok(total)
    }

    /// Conditional means given the observed abundances of the other species.
    pub fn predict(&self, data: &CommunityData) -> Result<Prediction> {
        if data.n_species() != self.n_species() || data.n_covariates() != self.habitat.n_covariates() {
            return Err(Error::Dimension("data does not match the fitted model".into()));
        }
        self.context_spec.validate(data, self.dim())?;
        let index = ContextIndex::build(data, &self.context_spec)?;
        let (n, m) = data.abundance.dim();
        let rows: Vec<Vec<ConditionalMean>> = (0..n)
            .into_par_iter()
            .map(|k| {
                (0..m)
                    .map(|i| {
                        let (a, b) = self.predictors(&index, data, k, i);
                        conditional_mean(self.mode, self.family.kind, a, b).expect("checked mode")
                    })
                    .collect()
            })
            .collect();
        let mean = Array2::from_shape_fn((n, m), |(k, i)| rows[k][i].expected());
        let (p_present, abundance) = if self.mode == AggregationMode::Hierarchical {
            let pick = |f: fn(ConditionalMean) -> f64| Array2::from_shape_fn((n, m), |(k, i)| f(rows[k][i]));
            (
                Some(pick(|c| match c {
                    ConditionalMean::Hurdle { p_present, .. } => p_present,
                    ConditionalMean::Mean(_) => unreachable!(),
                })),
                Some(pick(|c| match c {
                    ConditionalMean::Hurdle { abundance, .. } => abundance,
                    ConditionalMean::Mean(_) => unreachable!(),
                })),
            )
        } else {
            (None, None)
        };
        Ok(Prediction {
            mean,
            p_present,
            abundance,
        })
    }
}
