//! Training by mini-batch stochastic gradient descent on the penalized
//! negative log-likelihood.
//!
//! All trainable quantities live in one flat parameter vector so the
//! optimizers, the proximal step and the finite-difference checker share a
//! single gradient routine. The training objective is
//!
//! ```text
//! F = (1/n) Σ_k Σ_i nll_ki + λ1 (‖P‖₁ + ‖Q‖₁) + λ2 (‖P‖² + ‖Q‖²)
//! ```
//!
//! with `n` the number of training sites. The L1 part is handled by a
//! proximal soft-threshold after each step, never through the gradient.

use std::collections::BTreeMap;
use std::ops::Range;

use log::{debug, info, warn};
use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::associations::{BioticContextSpec, ContextIndex, EmbeddingPair};
use crate::data::{species_offsets, stratified_split, CommunityData};
use crate::distributions::{nll_eta, sigmoid, FamilyKind, Link, ResponseFamily};
use crate::error::{Error, Result};
use crate::model::{pair_loss, AggregationMode, EpochRecord, FittedModel, HabitatModel, ModelSpec};
use crate::rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    SgdMomentum,
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub tolerance: f64,
    pub lambda_l1: f64,
    pub lambda_l2: f64,
    pub non_negative: bool,
    pub share_groups: bool,
    /// Fraction of zero cells drawn into each epoch.
    pub negative_subsample: f64,
    pub seed: u64,
    pub freeze_habitat: bool,
    /// Initialize the habitat weights from per-species GLM fits.
    pub pretrain_habitat: bool,
    /// Share of sites held out for early stopping when no validation set is
    /// given. Zero disables the holdout.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: Optimizer::Adam,
            learning_rate: 0.01,
            momentum: 0.8,
            batch_size: 16,
            max_epochs: 200,
            patience: 5,
            tolerance: 1e-3,
            lambda_l1: 0.0,
            lambda_l2: 0.0,
            non_negative: false,
            share_groups: false,
            negative_subsample: 1.0,
            seed: 0,
            freeze_habitat: false,
            pretrain_habitat: true,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Invalid(what.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.tolerance >= 0.0) {
            return bad("tolerance must be non-negative");
        }
        if !(self.lambda_l1 >= 0.0 && self.lambda_l2 >= 0.0) {
            return bad("penalties must be non-negative");
        }
        if !(self.negative_subsample > 0.0 && self.negative_subsample <= 1.0) {
            return bad("negative_subsample must lie in (0, 1]");
        }
        if !(0.0..0.5).contains(&self.validation_fraction) {
            return bad("validation_fraction must lie in [0, 0.5)");
        }
        Ok(())
    }
}

/// `λ1 (Σ|P| + Σ|Q|) + λ2 (Σ P² + Σ Q²)`.
pub fn penalty(emb: &EmbeddingPair, lambda_l1: f64, lambda_l2: f64) -> f64 {
    let entries = || emb.response.iter().chain(emb.effect.iter());
    lambda_l1 * entries().map(|v| v.abs()).sum::<f64>() + lambda_l2 * entries().map(|v| v * v).sum::<f64>()
}

/// Offsets on the link scale derived from the mean positive abundance (or
/// the user-supplied offsets).
pub fn link_offsets(data: &CommunityData, family: FamilyKind) -> Vec<f64> {
    let raw = match &data.offsets {
        Some(o) => o.clone(),
        None => species_offsets(data).0,
    };
    raw.into_iter()
        .map(|o| match family.link() {
            Link::Log if o > 0.0 => o.ln(),
            Link::Log => 0.0,
            Link::Logit => 0.0,
            Link::Identity => o,
        })
        .collect()
}

fn with_intercept(x: &Array2<f64>) -> Array2<f64> {
    let (n, p) = x.dim();
    let mut out = Array2::ones((n, p + 1));
    out.slice_mut(ndarray::s![.., ..p]).assign(x);
    out
}

/// Maximum-likelihood GLM for one species by iteratively reweighted least
/// squares, with a fixed offset on the link scale and fixed dispersion.
/// `x` must already carry the intercept column. Returns the coefficients.
pub fn fit_glm(
    x: &Array2<f64>,
    y: ArrayView1<'_, f64>,
    family: FamilyKind,
    offset: f64,
    dispersion: f64,
) -> Result<Array1<f64>> {
    let (n, q) = x.dim();
    if y.len() != n {
        return Err(Error::Dimension(format!("{} outcomes for {n} rows", y.len())));
    }
    let disp = family.has_dispersion().then_some(dispersion);
    let objective = |beta: &Array1<f64>| -> f64 {
        let eta = x.dot(beta);
        (0..n).map(|k| nll_eta(family, y[k], eta[k] + offset, disp)).sum()
    };
    let mut beta = Array1::zeros(q);
    let mut current = objective(&beta);
    for _ in 0..100 {
        let eta = x.dot(&beta);
        let mut xtwx = DMatrix::<f64>::zeros(q, q);
        let mut xtwz = DVector::<f64>::zeros(q);
        for k in 0..n {
            let e = (eta[k] + offset).clamp(-30.0, 30.0);
            let (mu, dmu) = match family.link() {
                Link::Log => (e.exp(), e.exp()),
                Link::Logit => {
                    let s = sigmoid(e);
                    (s, s * (1.0 - s))
                }
                Link::Identity => (e, 1.0),
            };
            let var = match family {
                FamilyKind::Bernoulli => mu * (1.0 - mu),
                FamilyKind::Poisson => mu,
                FamilyKind::NegativeBinomial | FamilyKind::ZeroInflatedNb => mu + mu * mu / dispersion,
                FamilyKind::Normal => 1.0,
            };
            let w = (dmu * dmu / var.max(1e-12)).max(1e-12);
            let z = eta[k] + (y[k] - mu) / dmu.max(1e-12);
            for a in 0..q {
                xtwz[a] += w * x[(k, a)] * z;
                for b in 0..q {
                    xtwx[(a, b)] += w * x[(k, a)] * x[(k, b)];
                }
            }
        }
        for a in 0..q {
            xtwx[(a, a)] += 1e-8;
        }
        let solved = xtwx
            .cholesky()
            .ok_or_else(|| Error::Invalid("singular design matrix in habitat GLM".into()))?
            .solve(&xtwz);
        let proposal = Array1::from_iter(solved.iter().copied());
        // Step halving keeps separated or near-separated fits from diverging.
        let mut step = 1.0;
        let mut accepted = None;
        while step > 1e-6 {
            let candidate = &beta + &((&proposal - &beta) * step);
            let value = objective(&candidate);
            if value.is_finite() && value <= current + 1e-12 {
                accepted = Some((candidate, value));
                break;
            }
            step *= 0.5;
        }
        let Some((candidate, value)) = accepted else { break };
        let delta = current - value;
        beta = candidate;
        current = value;
        if delta.abs() <= 1e-12 * (1.0 + current.abs()) {
            break;
        }
    }
    Ok(beta)
}

/// Per-species habitat GLMs. In the multiplicative and hierarchical modes the
/// habitat term models occupancy, so the fit is a logistic regression on
/// presence without offset.
pub fn pretrain_habitat(data: &CommunityData, spec: &ModelSpec, offsets: &[f64]) -> Result<HabitatModel> {
    let x = with_intercept(&data.covariates);
    let presence = data.abundance.mapv(|y| if y > 0.0 { 1.0 } else { 0.0 });
    let m = data.n_species();
    let mut weights = Array2::zeros((m, x.ncols()));
    for i in 0..m {
        let beta = match spec.mode {
            AggregationMode::Additive => fit_glm(&x, data.abundance.column(i), spec.family, offsets[i], 1.0)?,
            _ => fit_glm(&x, presence.column(i), FamilyKind::Bernoulli, 0.0, 1.0)?,
        };
        weights.row_mut(i).assign(&beta);
    }
    Ok(HabitatModel { weights })
}

fn group_rows(data: &CommunityData, share: bool) -> Result<Option<Vec<usize>>> {
    if !share {
        return Ok(None);
    }
    let labels = data
        .group_labels
        .as_ref()
        .ok_or_else(|| Error::Invalid("share_groups requires group labels".into()))?;
    let mut compact = BTreeMap::new();
    for &g in labels {
        let next = compact.len();
        compact.entry(g).or_insert(next);
    }
    Ok(Some(labels.iter().map(|g| compact[g]).collect()))
}

/// Untrained model: small uniform embeddings, link-scale offsets, unit
/// dispersions and (optionally) GLM-initialized habitat weights.
pub fn initialize(data: &CommunityData, spec: &ModelSpec, config: &TrainConfig) -> Result<FittedModel> {
    spec.validate(data)?;
    config.validate()?;
    let m = data.n_species();
    let d = spec.dim;
    if d > m {
        warn!("embedding dimension {d} exceeds the number of species {m}");
    }
    let groups = group_rows(data, config.share_groups)?;
    let rows = groups.as_ref().map_or(m, |g| g.iter().max().map_or(0, |&r| r + 1));
    let mut rng = rng::stream(config.seed, "initialize", 0);
    let mut draw = |rows: usize| {
        Array2::from_shape_fn((rows, d), |_| {
            let v: f64 = rng.random_range(-0.01..0.01);
            if config.non_negative {
                v.max(0.0)
            } else {
                v
            }
        })
    };
    let (p_rows, q_rows) = (draw(rows), draw(rows));
    let expand = |a: &Array2<f64>| match &groups {
        Some(g) => a.select(Axis(0), g),
        None => a.clone(),
    };
    let emb = EmbeddingPair::new(expand(&p_rows), expand(&q_rows))?;
    let offsets = link_offsets(data, spec.family);
    let habitat = if config.pretrain_habitat {
        pretrain_habitat(data, spec, &offsets)?
    } else {
        HabitatModel::zeros(m, data.n_covariates())
    };
    Ok(FittedModel {
        habitat,
        emb,
        offsets,
        family: ResponseFamily::new(spec.family, m),
        mode: spec.mode,
        occupancy: spec.occupancy,
        context_spec: spec.context.clone(),
        groups,
        learned_offsets: spec.learns_offsets(),
        frozen_habitat: config.freeze_habitat,
        training_log: Vec::new(),
        seed: config.seed,
    })
}

/// Positions of each parameter block inside the flat vector.
#[derive(Clone, Debug)]
struct Layout {
    d: usize,
    /// Habitat columns (covariates + intercept).
    q: usize,
    habitat: Range<usize>,
    response: Range<usize>,
    effect: Range<usize>,
    offsets: Range<usize>,
    dispersion: Range<usize>,
    conditioning: Range<usize>,
}

impl Layout {
    fn new(m: usize, q: usize, rows: usize, d: usize, w_rows: usize) -> Self {
        let mut at = 0;
        let mut block = |len: usize| {
            let r = at..at + len;
            at += len;
            r
        };
        Layout {
            d,
            q,
            habitat: block(m * q),
            response: block(rows * d),
            effect: block(rows * d),
            offsets: block(m),
            dispersion: block(m),
            conditioning: block(w_rows * d),
        }
    }

    fn len(&self) -> usize {
        self.conditioning.end
    }

    fn embeddings(&self) -> Range<usize> {
        self.response.start..self.effect.end
    }
}

/// Immutable view of one dataset prepared for gradient evaluation.
struct Problem<'a> {
    data: &'a CommunityData,
    index: ContextIndex,
    x1: Array2<f64>,
    mode: AggregationMode,
    family: FamilyKind,
    occupancy: crate::model::OccupancyTreatment,
    row_of: Vec<usize>,
    conditioned: bool,
    layout: Layout,
}

impl<'a> Problem<'a> {
    fn new(data: &'a CommunityData, model: &FittedModel) -> Result<Self> {
        model.check_data(data)?;
        let m = data.n_species();
        let row_of = model.groups.clone().unwrap_or_else(|| (0..m).collect());
        let rows = row_of.iter().max().map_or(0, |&r| r + 1);
        let w_rows = match &model.context_spec {
            BioticContextSpec::Conditioned { weights } => weights.nrows(),
            _ => 0,
        };
        let layout = Layout::new(m, data.n_covariates() + 1, rows, model.dim(), w_rows);
        Ok(Problem {
            data,
            index: ContextIndex::build(data, &model.context_spec)?,
            x1: with_intercept(&data.covariates),
            mode: model.mode,
            family: model.family.kind,
            occupancy: model.occupancy,
            row_of,
            conditioned: w_rows > 0,
            layout,
        })
    }

    fn rows(&self) -> usize {
        self.layout.response.len() / self.layout.d
    }

    fn pack(&self, model: &FittedModel) -> Vec<f64> {
        let l = &self.layout;
        let mut theta = vec![0.0; l.len()];
        theta[l.habitat.clone()].copy_from_slice(model.habitat.weights.as_standard_layout().as_slice().unwrap());
        for r in 0..self.rows() {
            let i = self.row_of.iter().position(|&g| g == r).expect("every row has a species");
            for c in 0..l.d {
                theta[l.response.start + r * l.d + c] = model.emb.response[(i, c)];
                theta[l.effect.start + r * l.d + c] = model.emb.effect[(i, c)];
            }
        }
        theta[l.offsets.clone()].copy_from_slice(&model.offsets);
        for (i, slot) in theta[l.dispersion.clone()].iter_mut().enumerate() {
            *slot = model.family.dispersion_of(i).map_or(0.0, f64::ln);
        }
        if let BioticContextSpec::Conditioned { weights } = &model.context_spec {
            theta[l.conditioning.clone()].copy_from_slice(weights.as_standard_layout().as_slice().unwrap());
        }
        theta
    }

    fn unpack(&self, theta: &[f64], template: &FittedModel) -> FittedModel {
        let l = &self.layout;
        let m = self.data.n_species();
        let mut out = template.clone();
        out.habitat.weights = Array2::from_shape_vec((m, l.q), theta[l.habitat.clone()].to_vec()).unwrap();
        let rows = |range: &Range<usize>| {
            let compact = Array2::from_shape_vec((self.rows(), l.d), theta[range.clone()].to_vec()).unwrap();
            compact.select(Axis(0), &self.row_of)
        };
        out.emb = EmbeddingPair::new(rows(&l.response), rows(&l.effect)).unwrap();
        out.offsets = theta[l.offsets.clone()].to_vec();
        if self.family.has_dispersion() {
            out.family.dispersion = Some(theta[l.dispersion.clone()].iter().map(|v| v.exp()).collect());
        }
        if let BioticContextSpec::Conditioned { weights } = &mut out.context_spec {
            *weights = Array2::from_shape_vec(weights.dim(), theta[l.conditioning.clone()].to_vec()).unwrap();
        }
        out
    }

    fn dispersion(&self, theta: &[f64], i: usize) -> Option<f64> {
        self.family
            .has_dispersion()
            .then(|| theta[self.layout.dispersion.start + i].exp())
    }

    /// Loss of pair (k, i) scaled by `weight`; accumulates `weight · ∇` into
    /// `grad` when given.
    fn pair(&self, theta: &[f64], k: usize, i: usize, weight: f64, grad: Option<&mut [f64]>) -> f64 {
        let l = &self.layout;
        let d = l.d;
        let x = self.x1.row(k);
        let h0 = l.habitat.start + i * l.q;
        let eta_a: f64 = (0..l.q).map(|c| theta[h0 + c] * x[c]).sum();

        let mut zbar = vec![0.0; d];
        self.index.for_each_coefficient(k, i, |j, c| {
            let q0 = l.effect.start + self.row_of[j] * d;
            for (t, z) in zbar.iter_mut().enumerate() {
                *z += c * theta[q0 + t];
            }
        });
        let beta: Vec<f64> = if self.conditioned {
            let v = self.index.conditioning_input(k).expect("conditioned");
            (0..d)
                .map(|t| (0..v.len()).map(|r| theta[l.conditioning.start + r * d + t] * v[r]).sum())
                .collect()
        } else {
            vec![1.0; d]
        };
        let p0 = l.response.start + self.row_of[i] * d;
        let eta_b = theta[l.offsets.start + i]
            + (0..d).map(|t| theta[p0 + t] * beta[t] * zbar[t]).sum::<f64>();

        let y = self.data.abundance[(k, i)];
        let disp = self.dispersion(theta, i);
        let out = pair_loss(self.mode, self.family, self.occupancy, y, eta_a, eta_b, disp);
        if let Some(grad) = grad {
            let ga = weight * out.grad_a;
            let gb = weight * out.grad_b;
            for c in 0..l.q {
                grad[h0 + c] += ga * x[c];
            }
            grad[l.offsets.start + i] += gb;
            for t in 0..d {
                grad[p0 + t] += gb * beta[t] * zbar[t];
            }
            let u: Vec<f64> = (0..d).map(|t| gb * theta[p0 + t] * beta[t]).collect();
            self.index.for_each_coefficient(k, i, |j, c| {
                let q0 = l.effect.start + self.row_of[j] * d;
                for t in 0..d {
                    grad[q0 + t] += c * u[t];
                }
            });
            if self.conditioned {
                let v = self.index.conditioning_input(k).expect("conditioned");
                for r in 0..v.len() {
                    for t in 0..d {
                        grad[l.conditioning.start + r * d + t] += gb * theta[p0 + t] * zbar[t] * v[r];
                    }
                }
            }
            grad[l.dispersion.start + i] += weight * out.grad_log_dispersion;
        }
        weight * out.loss
    }

    fn total_nll(&self, theta: &[f64]) -> f64 {
        let (n, m) = self.data.abundance.dim();
        let mut total = 0.0;
        for k in 0..n {
            for i in 0..m {
                total += self.pair(theta, k, i, 1.0, None);
            }
        }
        total
    }

    fn penalty(&self, theta: &[f64], l1: f64, l2: f64) -> f64 {
        let e = &theta[self.layout.embeddings()];
        l1 * e.iter().map(|v| v.abs()).sum::<f64>() + l2 * e.iter().map(|v| v * v).sum::<f64>()
    }

    fn trainable_mask(&self, model: &FittedModel) -> Vec<bool> {
        let l = &self.layout;
        let mut mask = vec![false; l.len()];
        let mut set = |r: Range<usize>| mask[r].iter_mut().for_each(|b| *b = true);
        if !model.frozen_habitat {
            set(l.habitat.clone());
        }
        set(l.embeddings());
        if model.learned_offsets {
            set(l.offsets.clone());
        }
        if self.family.has_dispersion() {
            set(l.dispersion.clone());
        }
        set(l.conditioning.clone());
        mask
    }
}

struct OptimizerState {
    kind: Optimizer,
    lr: f64,
    momentum: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    step: i32,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl OptimizerState {
    fn new(config: &TrainConfig, len: usize) -> Self {
        OptimizerState {
            kind: config.optimizer,
            lr: config.learning_rate,
            momentum: config.momentum,
            first: vec![0.0; len],
            second: vec![0.0; len],
            step: 0,
        }
    }

    /// One update. Entries inside `prox` get the soft-threshold with
    /// parameter `l1` and, when `non_negative`, the projection onto `[0, ∞)`.
    fn apply(&mut self, theta: &mut [f64], grad: &[f64], mask: &[bool], prox: &Range<usize>, l1: f64, non_negative: bool) {
        self.step += 1;
        let (bc1, bc2) = (1.0 - ADAM_BETA1.powi(self.step), 1.0 - ADAM_BETA2.powi(self.step));
        for idx in 0..theta.len() {
            if !mask[idx] {
                continue;
            }
            let g = grad[idx];
            let scale = match self.kind {
                Optimizer::Adam => {
                    self.first[idx] = ADAM_BETA1 * self.first[idx] + (1.0 - ADAM_BETA1) * g;
                    self.second[idx] = ADAM_BETA2 * self.second[idx] + (1.0 - ADAM_BETA2) * g * g;
                    let rate = self.lr / ((self.second[idx] / bc2).sqrt() + ADAM_EPS);
                    theta[idx] -= rate * self.first[idx] / bc1;
                    rate
                }
                Optimizer::SgdMomentum => {
                    self.first[idx] = self.momentum * self.first[idx] + g;
                    theta[idx] -= self.lr * self.first[idx];
                    self.lr / (1.0 - self.momentum)
                }
            };
            if prox.contains(&idx) {
                let t = l1 * scale;
                let v = theta[idx];
                theta[idx] = v.signum() * (v.abs() - t).max(0.0);
                if non_negative && theta[idx] < 0.0 {
                    theta[idx] = 0.0;
                }
            }
        }
    }
}

/// Initializes and trains in one call.
pub fn train(data: &CommunityData, spec: &ModelSpec, config: &TrainConfig) -> Result<FittedModel> {
    let init = initialize(data, spec, config)?;
    fit(data, init, config)
}

/// Trains `model` on `data`, holding out `validation_fraction` of the sites
/// for early stopping.
pub fn fit(data: &CommunityData, model: FittedModel, config: &TrainConfig) -> Result<FittedModel> {
    config.validate()?;
    if config.validation_fraction > 0.0 && config.patience > 0 && data.n_sites() >= 10 {
        let split = stratified_split(data, config.validation_fraction, rng::child_seed(config.seed, "validation", 0))?;
        if !split.test.is_empty() {
            let train = data.subset_sites(&split.train);
            let valid = data.subset_sites(&split.test);
            return fit_with_validation(&train, Some(&valid), model, config);
        }
    }
    fit_with_validation(data, None, model, config)
}

/// Trains with an explicit validation set (or none: the best training
/// objective is returned and `patience` applies to it).
pub fn fit_with_validation(
    data: &CommunityData,
    validation: Option<&CommunityData>,
    model: FittedModel,
    config: &TrainConfig,
) -> Result<FittedModel> {
    config.validate()?;
    let problem = Problem::new(data, &model)?;
    let valid = validation.map(|v| Problem::new(v, &model)).transpose()?;
    let mut theta = problem.pack(&model);
    let mask = problem.trainable_mask(&model);
    let prox = problem.layout.embeddings();
    if config.non_negative {
        for v in &mut theta[prox.clone()] {
            *v = v.max(0.0);
        }
    }

    let (n, m) = data.abundance.dim();
    let scale = 1.0 / n as f64;
    let objective = |theta: &[f64]| problem.total_nll(theta) * scale + problem.penalty(theta, config.lambda_l1, config.lambda_l2);
    // Same normalization and penalty as the training objective.
    let validation_loss = |theta: &[f64]| {
        valid.as_ref().map(|v| {
            v.total_nll(theta) / v.data.n_sites() as f64 + v.penalty(theta, config.lambda_l1, config.lambda_l2)
        })
    };

    let (presences, absences): (Vec<(usize, usize)>, Vec<(usize, usize)>) = (0..n)
        .flat_map(|k| (0..m).map(move |i| (k, i)))
        .partition(|&(k, i)| data.abundance[(k, i)] > 0.0);

    let mut log = Vec::new();
    let initial = objective(&theta);
    let initial_valid = validation_loss(&theta);
    if !initial.is_finite() {
        return Err(Error::Divergence { epoch: 0, learning_rate: config.learning_rate });
    }
    log.push(EpochRecord { epoch: 0, train_loss: initial, validation_loss: initial_valid });
    let monitor = |train: f64, valid: Option<f64>| valid.unwrap_or(train);
    let mut best_theta = theta.clone();
    let mut best = monitor(initial, initial_valid);
    let mut reference = best;
    let mut wait = 0;

    let mut opt = OptimizerState::new(config, theta.len());
    let mut grad = vec![0.0; theta.len()];
    for epoch in 1..=config.max_epochs {
        let mut erng = rng::stream(config.seed, "epoch", epoch as u64);
        let mut pairs: Vec<(usize, usize, f64)> = presences.iter().map(|&(k, i)| (k, i, 1.0)).collect();
        if config.negative_subsample < 1.0 {
            let mut zeros = absences.clone();
            zeros.shuffle(&mut erng);
            let keep = (config.negative_subsample * zeros.len() as f64).round() as usize;
            let w = 1.0 / config.negative_subsample;
            pairs.extend(zeros[..keep].iter().map(|&(k, i)| (k, i, w)));
        } else {
            pairs.extend(absences.iter().map(|&(k, i)| (k, i, 1.0)));
        }
        pairs.shuffle(&mut erng);
        let epoch_size = pairs.len() as f64;
        for batch in pairs.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &(k, i, w) in batch {
                problem.pair(&theta, k, i, w, Some(&mut grad));
            }
            // Unbiased for the gradient of (1/n) Σ nll over all pairs.
            let factor = scale * epoch_size / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= factor);
            if config.lambda_l2 > 0.0 {
                for idx in prox.clone() {
                    grad[idx] += 2.0 * config.lambda_l2 * theta[idx];
                }
            }
            opt.apply(&mut theta, &grad, &mask, &prox, config.lambda_l1, config.non_negative);
        }
        let train_loss = objective(&theta);
        let valid_loss = validation_loss(&theta);
        if !train_loss.is_finite() || valid_loss.is_some_and(|v| !v.is_finite()) {
            return Err(Error::Divergence { epoch, learning_rate: config.learning_rate });
        }
        debug!("epoch {epoch}: train {train_loss:.6}, validation {valid_loss:?}");
        log.push(EpochRecord { epoch, train_loss, validation_loss: valid_loss });
        let current = monitor(train_loss, valid_loss);
        if current < best {
            best = current;
            best_theta.copy_from_slice(&theta);
        }
        if current < reference - config.tolerance {
            reference = current;
            wait = 0;
        } else {
            wait += 1;
            if config.patience > 0 && wait >= config.patience {
                info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    let mut fitted = problem.unpack(&best_theta, &model);
    fitted.training_log = log;
    fitted.seed = config.seed;
    Ok(fitted)
}

/// Worst relative error `|g − fd| / max(1, |g|)` between the analytic
/// gradient of the summed nll and central finite differences, over every
/// parameter of the model.
pub fn gradient_check(model: &FittedModel, data: &CommunityData, h: f64) -> Result<f64> {
    let problem = Problem::new(data, model)?;
    let mut theta = problem.pack(model);
    let (n, m) = data.abundance.dim();
    let mut grad = vec![0.0; theta.len()];
    for k in 0..n {
        for i in 0..m {
            problem.pair(&theta, k, i, 1.0, Some(&mut grad));
        }
    }
    let mut worst: f64 = 0.0;
    for idx in 0..theta.len() {
        if idx >= problem.layout.dispersion.start
            && idx < problem.layout.dispersion.end
            && !problem.family.has_dispersion()
        {
            continue;
        }
        let orig = theta[idx];
        theta[idx] = orig + h;
        let up = problem.total_nll(&theta);
        theta[idx] = orig - h;
        let down = problem.total_nll(&theta);
        theta[idx] = orig;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((grad[idx] - fd).abs() / grad[idx].abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::OccupancyTreatment;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;

    fn random_counts(seed: u64, n: usize, m: usize, p: usize) -> CommunityData {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let y = Array2::from_shape_fn((n, m), |_| if r.random_bool(0.6) { r.random_range(1..7) as f64 } else { 0.0 });
        let x = Array2::from_shape_fn((n, p), |_| r.random_range(-1.0..1.0));
        CommunityData::new(y, x).unwrap()
    }

    #[test]
    fn penalty_hand_values() {
        assert_eq!(penalty(&EmbeddingPair::zeros(3, 2), 1.0, 1.0), 0.0);
        let one = EmbeddingPair::new(array![[1.0]], array![[1.0]]).unwrap();
        assert_eq!(penalty(&one, 1.0, 0.0), 2.0);
        let e = EmbeddingPair::new(array![[1.0, -2.0]], array![[0.0, 3.0]]).unwrap();
        assert_abs_diff_eq!(penalty(&e, 0.5, 0.1), 4.4, epsilon = 1e-12);
    }

    #[test]
    fn initialize_contract() {
        let data = random_counts(1, 12, 3, 2);
        let spec = ModelSpec { dim: 2, ..ModelSpec::default() };
        let config = TrainConfig { seed: 9, ..TrainConfig::default() };
        let a = initialize(&data, &spec, &config).unwrap();
        let b = initialize(&data, &spec, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.emb.response.dim(), (3, 2));
        assert!(a.emb.response.iter().all(|v| v.abs() <= 0.01));
        let nn = initialize(&data, &spec, &TrainConfig { non_negative: true, ..config.clone() }).unwrap();
        assert!(nn.emb.is_non_negative());
        assert_eq!(a.family.dispersion, Some(vec![1.0; 3]));
    }

    #[test]
    fn glm_matches_closed_form_intercept() {
        // Intercept-only Poisson GLM: exp(β) = mean(y).
        let x = Array2::ones((5, 1));
        let y = array![1.0, 3.0, 0.0, 2.0, 4.0];
        let beta = fit_glm(&x, y.view(), FamilyKind::Poisson, 0.0, 1.0).unwrap();
        assert_abs_diff_eq!(beta[0].exp(), 2.0, epsilon = 1e-8);
        // Logistic: logit of the prevalence.
        let y = array![1.0, 0.0, 0.0, 1.0, 1.0];
        let beta = fit_glm(&x, y.view(), FamilyKind::Bernoulli, 0.0, 1.0).unwrap();
        assert_abs_diff_eq!(sigmoid(beta[0]), 0.6, epsilon = 1e-8);
        // Normal with offset: β = mean(y) − offset.
        let beta = fit_glm(&x, y.view(), FamilyKind::Normal, 0.25, 1.0).unwrap();
        assert_abs_diff_eq!(beta[0], 0.35, epsilon = 1e-8);
    }

    #[test]
    fn gradient_check_on_every_mode() {
        let cases = [
            (AggregationMode::Additive, FamilyKind::NegativeBinomial, OccupancyTreatment::Observed),
            (AggregationMode::Additive, FamilyKind::Normal, OccupancyTreatment::Observed),
            (AggregationMode::Hierarchical, FamilyKind::ZeroInflatedNb, OccupancyTreatment::Observed),
            (AggregationMode::Hierarchical, FamilyKind::ZeroInflatedNb, OccupancyTreatment::Latent),
        ];
        for (mode, family, occupancy) in cases {
            let data = random_counts(3, 20, 5, 2);
            let spec = ModelSpec { family, mode, dim: 2, occupancy, ..ModelSpec::default() };
            let mut model = initialize(&data, &spec, &TrainConfig { pretrain_habitat: false, ..TrainConfig::default() }).unwrap();
            model.emb.response.mapv_inplace(|v| v * 30.0);
            model.emb.effect.mapv_inplace(|v| v * 30.0);
            model.family.dispersion = Some(vec![0.7, 1.3, 2.0, 0.9, 1.1]);
            let err = gradient_check(&model, &data, 1e-5).unwrap();
            assert!(err < 1e-4, "{mode:?}/{family:?}: {err}");
        }
    }

    #[test]
    fn conditioned_and_shared_gradients() {
        let mut data = random_counts(5, 20, 5, 2).binary_from_presence();
        data.group_labels = Some(vec![0, 0, 1, 1, 2]);
        let w = array![[0.3, -0.2], [0.1, 0.4], [1.0, 1.0]];
        let spec = ModelSpec {
            family: FamilyKind::Bernoulli,
            mode: AggregationMode::Multiplicative,
            context: BioticContextSpec::Conditioned { weights: w },
            dim: 2,
            ..ModelSpec::default()
        };
        let config = TrainConfig { share_groups: true, ..TrainConfig::default() };
        let mut model = initialize(&data, &spec, &config).unwrap();
        model.emb.response.mapv_inplace(|v| v * 50.0);
        model.emb.effect.mapv_inplace(|v| v * 50.0);
        assert!(gradient_check(&model, &data, 1e-5).unwrap() < 1e-4);
    }

    #[test]
    fn huge_l1_zeroes_the_associations() {
        let data = random_counts(7, 40, 4, 1);
        let spec = ModelSpec { dim: 2, ..ModelSpec::default() };
        let config = TrainConfig { lambda_l1: 10.0, max_epochs: 5, ..TrainConfig::default() };
        let fitted = train(&data, &spec, &config).unwrap();
        assert!(fitted.emb.response.iter().chain(fitted.emb.effect.iter()).all(|v| v.abs() < 1e-5));
        assert!(fitted.association_matrix().iter().all(|&a| a == 0.0));
    }

    #[test]
    fn frozen_habitat_with_dead_embeddings_keeps_glm_nll() {
        let data = random_counts(8, 30, 3, 2);
        let spec = ModelSpec { family: FamilyKind::Poisson, dim: 1, ..ModelSpec::default() };
        let config = TrainConfig {
            freeze_habitat: true,
            lambda_l1: 10.0,
            max_epochs: 3,
            validation_fraction: 0.0,
            ..TrainConfig::default()
        };
        let init = initialize(&data, &spec, &config).unwrap();
        let glm_nll = init.without_associations().nll(&data, None).unwrap();
        let fitted = fit(&data, init, &config).unwrap();
        assert_abs_diff_eq!(fitted.nll(&data, None).unwrap(), glm_nll, epsilon = 1e-9);
    }

    #[test]
    fn fit_is_reproducible_and_logged() {
        let data = random_counts(11, 40, 4, 1);
        let spec = ModelSpec { dim: 2, ..ModelSpec::default() };
        let config = TrainConfig { max_epochs: 8, seed: 4, negative_subsample: 0.5, ..TrainConfig::default() };
        let a = train(&data, &spec, &config).unwrap();
        let b = train(&data, &spec, &config).unwrap();
        assert_eq!(a, b);
        assert!(!a.training_log.is_empty());
        assert_eq!(a.training_log[0].epoch, 0);
    }

    #[test]
    fn non_negative_and_shared_rows_hold_after_training() {
        let mut data = random_counts(12, 40, 4, 1).binary_from_presence();
        data.group_labels = Some(vec![3, 3, 1, 1]);
        let spec = ModelSpec {
            family: FamilyKind::Bernoulli,
            mode: AggregationMode::Multiplicative,
            dim: 2,
            ..ModelSpec::default()
        };
        let config = TrainConfig { non_negative: true, share_groups: true, max_epochs: 10, ..TrainConfig::default() };
        let fitted = train(&data, &spec, &config).unwrap();
        assert!(fitted.emb.is_non_negative());
        assert_eq!(fitted.emb.response.row(0), fitted.emb.response.row(1));
        assert_eq!(fitted.emb.effect.row(2), fitted.emb.effect.row(3));
    }

    #[test]
    fn divergence_names_epoch_and_rate() {
        let data = random_counts(13, 30, 3, 1);
        let spec = ModelSpec { family: FamilyKind::Normal, dim: 2, ..ModelSpec::default() };
        let config = TrainConfig {
            optimizer: Optimizer::SgdMomentum,
            learning_rate: 1e6,
            max_epochs: 3,
            validation_fraction: 0.0,
            ..TrainConfig::default()
        };
        match train(&data, &spec, &config) {
            Err(Error::Divergence { epoch, learning_rate }) => {
                assert!(epoch >= 1);
                assert_eq!(learning_rate, 1e6);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn config_rejects_bad_values() {
        assert!(TrainConfig { negative_subsample: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: -1.0, ..TrainConfig::default() }.validate().is_err());
        let parsed: TrainConfig = serde_json::from_str(r#"{"lambda_l1": 0.02, "optimizer": "sgd_momentum"}"#).unwrap();
        assert_eq!(parsed.lambda_l1, 0.02);
        assert_eq!(parsed.batch_size, 16);
    }

    trait FromPresence {
        fn binary_from_presence(self) -> CommunityData;
    }

    impl FromPresence for CommunityData {
        fn binary_from_presence(mut self) -> CommunityData {
            self.abundance.mapv_inplace(|y| if y > 0.0 { 1.0 } else { 0.0 });
            self.binary = true;
            self
        }
    }
}
