//! Stochastic community assembly along an environmental gradient.
//!
//! Every site holds exactly `K` individuals. At each step the next community
//! is one multinomial draw of `K` individuals with weights combining an
//! abiotic filter, competition, facilitation and reproduction (current
//! relative abundance), plus a small immigration floor. Sites never exchange
//! individuals.
//!
//! Interaction matrices are indexed `I[source][target]`: `I[j][i] < 0` means
//! species j competes with species i.

use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::CommunityData;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const GRADIENT_MAX: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssemblyConfig {
    pub n_sites: usize,
    /// Carrying capacity `K`.
    pub capacity: u32,
    pub optima: Vec<f64>,
    pub breadths: Vec<f64>,
    pub interactions: Array2<f64>,
    pub b_env: f64,
    pub b_comp: f64,
    pub b_fac: f64,
    pub b_abun: f64,
    pub immigration: f64,
    pub epochs: usize,
    /// Equilibrium when the L1 change stays below `tolerance · K` for
    /// `stable_steps` consecutive steps.
    pub tolerance: f64,
    pub stable_steps: usize,
    pub seed: u64,
}

impl AssemblyConfig {
    /// Pool of `m` species with optima uniform on the gradient, common niche
    /// breadth and no interactions.
    pub fn random_pool(m: usize, breadth: f64, seed: u64) -> Self {
        let mut r = rng::stream(seed, "pool", 0);
        AssemblyConfig {
            n_sites: 300,
            capacity: 100,
            optima: (0..m).map(|_| r.random_range(0.0..GRADIENT_MAX)).collect(),
            breadths: vec![breadth; m],
            interactions: Array2::zeros((m, m)),
            b_env: 1.0,
            b_comp: 1.0,
            b_fac: 1.0,
            b_abun: 1.0,
            immigration: 1e-3,
            epochs: 200,
            tolerance: 0.02,
            stable_steps: 10,
            seed,
        }
    }

    pub fn n_species(&self) -> usize {
        self.optima.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.n_species();
        if self.breadths.len() != m || self.interactions.dim() != (m, m) {
            return Err(Error::Dimension(format!(
                "{m} optima, {} breadths, {:?} interactions",
                self.breadths.len(),
                self.interactions.dim()
            )));
        }
        if self.capacity == 0 {
            return Err(Error::Invalid("carrying capacity must be at least 1".into()));
        }
        if self.breadths.iter().any(|&b| !(b > 0.0)) {
            return Err(Error::Invalid("niche breadths must be positive".into()));
        }
        if self.interactions.iter().any(|v| !(v.abs() <= 1.0)) {
            return Err(Error::Invalid("interaction strengths must lie in [-1, 1]".into()));
        }
        let weights = [self.b_env, self.b_comp, self.b_fac, self.b_abun];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Invalid("filter weights must be finite and non-negative".into()));
        }
        if !(self.immigration > 0.0) {
            return Err(Error::Invalid("immigration floor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterProbabilities {
    pub env: Vec<f64>,
    pub comp: Vec<f64>,
    pub fac: Vec<f64>,
    pub abund: Vec<f64>,
}

pub fn filter_probabilities(config: &AssemblyConfig, site_value: f64, counts: &[u32]) -> FilterProbabilities {
    let m = config.n_species();
    let k = config.capacity as f64;
    let mut out = FilterProbabilities {
        env: Vec::with_capacity(m),
        comp: Vec::with_capacity(m),
        fac: Vec::with_capacity(m),
        abund: Vec::with_capacity(m),
    };
    for i in 0..m {
        let dev = site_value - config.optima[i];
        out.env.push((-dev * dev / (2.0 * config.breadths[i].powi(2))).exp());
        let (mut harm, mut help) = (0.0, 0.0);
        for (j, &n) in counts.iter().enumerate() {
            let v = config.interactions[(j, i)];
            harm += n as f64 * (-v).max(0.0);
            help += n as f64 * v.max(0.0);
        }
        out.comp.push((-harm / k).exp());
        out.fac.push(1.0 - (-help / k).exp());
        out.abund.push(counts[i] as f64 / k);
    }
    out
}

/// Multinomial draw as a chain of conditional binomials.
pub fn multinomial(total: u32, weights: &[f64], rng: &mut Rng) -> Vec<u32> {
    let mut left = total as u64;
    let mut mass: f64 = weights.iter().sum();
    let mut out = vec![0u32; weights.len()];
    for (i, &w) in weights.iter().enumerate() {
        if left == 0 {
            break;
        }
        if i + 1 == weights.len() {
            out[i] = left as u32;
            break;
        }
        let p = if mass > 0.0 { (w / mass).clamp(0.0, 1.0) } else { 0.0 };
        let draw = Binomial::new(left, p).expect("valid binomial").sample(rng);
        out[i] = draw as u32;
        left -= draw;
        mass -= w;
    }
    out
}

pub fn assembly_weights(config: &AssemblyConfig, site_value: f64, counts: &[u32]) -> Vec<f64> {
    let f = filter_probabilities(config, site_value, counts);
    (0..config.n_species())
        .map(|i| {
            config.b_env * f.env[i]
                + config.b_comp * f.comp[i]
                + config.b_fac * f.fac[i]
                + config.b_abun * f.abund[i]
                + config.immigration
        })
        .collect()
}

pub fn assembly_step(config: &AssemblyConfig, site_value: f64, counts: &[u32], rng: &mut Rng) -> Vec<u32> {
    let w = assembly_weights(config, site_value, counts);
    multinomial(config.capacity, &w, rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SiteRun {
    pub counts: Vec<u32>,
    pub steps: usize,
    pub converged: bool,
}

pub fn run_site(config: &AssemblyConfig, site: usize, site_value: f64) -> SiteRun {
    let mut r = rng::stream(config.seed, "assembly-site", site as u64);
    let m = config.n_species();
    let mut counts = multinomial(config.capacity, &vec![1.0; m], &mut r);
    let limit = config.tolerance * config.capacity as f64;
    let mut calm = 0;
    for step in 1..=config.epochs {
        let next = assembly_step(config, site_value, &counts, &mut r);
        let change: u32 = next.iter().zip(&counts).map(|(a, b)| a.abs_diff(*b)).sum();
        counts = next;
        calm = if (change as f64) < limit { calm + 1 } else { 0 };
        if calm >= config.stable_steps {
            return SiteRun { counts, steps: step, converged: true };
        }
    }
    SiteRun { counts, steps: config.epochs, converged: config.epochs == 0 }
}

#[derive(Clone, Debug)]
pub struct AssemblyOutput {
    /// Final counts with the gradient value as the only covariate.
    pub data: CommunityData,
    pub steps: Vec<usize>,
    pub converged: Vec<bool>,
}

pub fn run_assembly(config: &AssemblyConfig) -> Result<AssemblyOutput> {
    config.validate()?;
    let mut g = rng::stream(config.seed, "gradient", 0);
    let gradient: Vec<f64> = (0..config.n_sites).map(|_| g.random_range(0.0..GRADIENT_MAX)).collect();
    let runs: Vec<SiteRun> = gradient
        .par_iter()
        .enumerate()
        .map(|(k, &e)| run_site(config, k, e))
        .collect();
    let (n, m) = (config.n_sites, config.n_species());
    let abundance = Array2::from_shape_fn((n, m), |(k, i)| runs[k].counts[i] as f64);
    let covariates = Array1::from(gradient).into_shape_with_order((n, 1)).expect("column");
    let data = CommunityData::with_ids(
        abundance,
        covariates,
        (0..n).map(|k| format!("site{k}")).collect(),
        (0..m).map(|i| format!("sp{i}")).collect(),
        vec!["E".into()],
    )?;
    Ok(AssemblyOutput {
        data,
        steps: runs.iter().map(|r| r.steps).collect(),
        converged: runs.iter().map(|r| r.converged).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AssociationMode {
    Env,
    Pos,
    Neg,
    PosNeg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Density {
    Sparse,
    Dense,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Symmetry {
    Symmetric,
    Asymmetric,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExperimentDesign {
    pub mode: AssociationMode,
    pub density: Density,
    pub symmetry: Symmetry,
    pub pool_size: usize,
}

impl ExperimentDesign {
    pub fn label(&self) -> String {
        let mode = match self.mode {
            AssociationMode::Env => return format!("Env_m{}", self.pool_size),
            AssociationMode::Pos => "Pos",
            AssociationMode::Neg => "Neg",
            AssociationMode::PosNeg => "PosNeg",
        };
        let density = match self.density {
            Density::Sparse => "sparse",
            Density::Dense => "dense",
        };
        let symmetry = match self.symmetry {
            Symmetry::Symmetric => "sym",
            Symmetry::Asymmetric => "asym",
        };
        format!("{mode}_{density}_{symmetry}_m{}", self.pool_size)
    }

    /// Number of associated unordered pairs.
    pub fn associated_pairs(&self) -> usize {
        let all = self.pool_size * (self.pool_size.saturating_sub(1)) / 2;
        match (self.mode, self.density) {
            (AssociationMode::Env, _) => 0,
            (_, Density::Sparse) => all / 3,
            (_, Density::Dense) => all * 2 / 3,
        }
    }
}

/// The 33 designs: for each pool size in {10, 20, 50}, one Env design, Pos
/// and Neg under both densities and symmetries, and symmetric PosNeg under
/// both densities.
pub fn experiment1_designs() -> Vec<ExperimentDesign> {
    let mut out = Vec::new();
    for pool_size in [10, 20, 50] {
        let d = |mode, density, symmetry| ExperimentDesign { mode, density, symmetry, pool_size };
        out.push(d(AssociationMode::Env, Density::Sparse, Symmetry::Symmetric));
        for mode in [AssociationMode::Pos, AssociationMode::Neg] {
            for density in [Density::Sparse, Density::Dense] {
                for symmetry in [Symmetry::Symmetric, Symmetry::Asymmetric] {
                    out.push(d(mode, density, symmetry));
                }
            }
        }
        for density in [Density::Sparse, Density::Dense] {
            out.push(d(AssociationMode::PosNeg, density, Symmetry::Symmetric));
        }
    }
    out
}

/// Interaction matrix `I[source][target]` for one design.
pub fn design_interactions(design: &ExperimentDesign, rng: &mut Rng) -> Array2<f64> {
    let m = design.pool_size;
    let mut inter = Array2::zeros((m, m));
    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|a| (a + 1..m).map(move |b| (a, b))).collect();
    let chosen = sample(rng, pairs.len(), design.associated_pairs());
    for idx in chosen.iter() {
        let (a, b) = pairs[idx];
        let sign = match design.mode {
            AssociationMode::Env => 0.0,
            AssociationMode::Pos => 1.0,
            AssociationMode::Neg => -1.0,
            AssociationMode::PosNeg => {
                if rng.random_bool(0.5) {
                    1.0
                } else {
                    -1.0
                }
            }
        };
        match design.symmetry {
            Symmetry::Symmetric => {
                inter[(a, b)] = sign;
                inter[(b, a)] = sign;
            }
            Symmetry::Asymmetric => {
                let (s, t) = if rng.random_bool(0.5) { (a, b) } else { (b, a) };
                inter[(s, t)] = sign;
            }
        }
    }
    inter
}

/// Ground-truth association labels `T[target][source]` ∈ {−1, 0, 1}.
pub fn truth_labels(interactions: &Array2<f64>) -> Array2<i8> {
    Array2::from_shape_fn(interactions.dim(), |(i, j)| {
        let v = interactions[(j, i)];
        if v > 0.0 {
            1
        } else if v < 0.0 {
            -1
        } else {
            0
        }
    })
}

#[derive(Clone, Debug)]
pub struct SimulatedCommunity {
    pub design: ExperimentDesign,
    pub config: AssemblyConfig,
    pub output: AssemblyOutput,
    pub truth: Array2<i8>,
}

/// Simulates one design. `base` supplies everything except the pool (optima,
/// breadths, interactions), which is drawn from `seed`.
pub fn simulate_design(design: &ExperimentDesign, base: &AssemblyConfig, seed: u64) -> Result<SimulatedCommunity> {
    let breadth = base.breadths.first().copied().unwrap_or(15.0);
    let mut config = AssemblyConfig::random_pool(design.pool_size, breadth, seed);
    config.n_sites = base.n_sites;
    config.capacity = base.capacity;
    config.b_env = base.b_env;
    config.b_comp = base.b_comp;
    config.b_fac = base.b_fac;
    config.b_abun = base.b_abun;
    config.immigration = base.immigration;
    config.epochs = base.epochs;
    config.tolerance = base.tolerance;
    config.stable_steps = base.stable_steps;
    let mut r = rng::stream(seed, "design", 0);
    config.interactions = design_interactions(design, &mut r);
    let output = run_assembly(&config)?;
    let truth = truth_labels(&config.interactions);
    Ok(SimulatedCommunity { design: *design, config, output, truth })
}

pub fn generate_experiment1(designs: &[ExperimentDesign], base: &AssemblyConfig, seed: u64) -> Result<Vec<SimulatedCommunity>> {
    designs
        .par_iter()
        .enumerate()
        .map(|(d, design)| simulate_design(design, base, rng::child_seed(seed, "experiment1", d as u64)))
        .collect()
}
