//! Response/effect embeddings, the factorized association matrix and the
//! biotic-context constructions (basic, covariate-conditioned, temporal,
//! spatial).

use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::data::CommunityData;
use crate::error::{Error, Result};

/// Response embeddings `P` (rows ρ_i) and effect embeddings `Q` (rows α_j).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingPair {
    pub response: Array2<f64>,
    pub effect: Array2<f64>,
}

impl EmbeddingPair {
    pub fn new(response: Array2<f64>, effect: Array2<f64>) -> Result<Self> {
        if response.dim() != effect.dim() {
            return Err(Error::Dimension(format!(
                "response {:?} and effect {:?} embeddings differ in shape",
                response.dim(),
                effect.dim()
            )));
        }
        if response.ncols() == 0 {
            return Err(Error::Invalid("embedding dimension must be at least 1".into()));
        }
        Ok(EmbeddingPair { response, effect })
    }

    pub fn zeros(m: usize, d: usize) -> Self {
        EmbeddingPair {
            response: Array2::zeros((m, d)),
            effect: Array2::zeros((m, d)),
        }
    }

    pub fn n_species(&self) -> usize {
        self.response.nrows()
    }

    pub fn dim(&self) -> usize {
        self.response.ncols()
    }

    /// Directed influence of `source` on `target`: `ρ_target · α_source`.
    pub fn association_strength(&self, target: usize, source: usize) -> f64 {
        self.response.row(target).dot(&self.effect.row(source))
    }

    /// `A = P Qᵀ`; entry (i, j) is the effect of species j on species i.
    pub fn association_matrix(&self) -> Array2<f64> {
        self.response.dot(&self.effect.t())
    }

    pub fn is_non_negative(&self) -> bool {
        self.response.iter().chain(self.effect.iter()).all(|&v| v >= 0.0)
    }
}

/// How the biotic context of a (site, target species) pair is built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case", deny_unknown_fields)]
pub enum BioticContextSpec {
    /// Other species present at the same site.
    Basic,
    /// Basic context rescaled per latent dimension by `β_k = Wᵀ (v_k, 1)`,
    /// with `v_k` the site covariates. `weights` is (p + 1) × d, the last row
    /// multiplying the intercept.
    Conditioned { weights: Array2<f64> },
    /// Species (target included) present at the same site one time step
    /// earlier.
    Temporal,
    /// Species present at sites within `radius`, weighted by
    /// `exp(−decay · distance)`; not normalized by the context size.
    Spatial { radius: f64, decay: f64 },
}

impl Default for BioticContextSpec {
    fn default() -> Self {
        BioticContextSpec::Basic
    }
}

impl BioticContextSpec {
    pub fn validate(&self, data: &CommunityData, dim: usize) -> Result<()> {
        match self {
            BioticContextSpec::Basic => Ok(()),
            BioticContextSpec::Conditioned { weights } => {
                let want = (data.n_covariates() + 1, dim);
                if weights.dim() != want {
                    return Err(Error::Dimension(format!(
                        "conditioning weights are {:?}, expected {want:?}",
                        weights.dim()
                    )));
                }
                Ok(())
            }
            BioticContextSpec::Temporal => {
                if data.time_index.is_none() {
                    return Err(Error::Invalid(
                        "temporal biotic context requires a time index".into(),
                    ));
                }
                Ok(())
            }
            BioticContextSpec::Spatial { radius, decay } => {
                if data.coordinates.is_none() {
                    return Err(Error::Invalid(
                        "spatial biotic context requires site coordinates".into(),
                    ));
                }
                if !(*radius > 0.0) || !(*decay >= 0.0) {
                    return Err(Error::Invalid(format!(
                        "spatial context needs radius > 0 and decay >= 0 (got {radius}, {decay})"
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BioticContextSpec::Basic => "basic",
            BioticContextSpec::Conditioned { .. } => "conditioned",
            BioticContextSpec::Temporal => "temporal",
            BioticContextSpec::Spatial { .. } => "spatial",
        }
    }
}

/// One element of a biotic context: `species` observed at `site`, entering
/// with `weight` (before abundance weighting).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContextMember {
    pub species: usize,
    pub site: usize,
    pub weight: f64,
}

fn distance(c: &Array2<f64>, a: usize, b: usize) -> f64 {
    let dx = c[(a, 0)] - c[(b, 0)];
    let dy = c[(a, 1)] - c[(b, 1)];
    (dx * dx + dy * dy).sqrt()
}

fn previous_rows(data: &CommunityData) -> Vec<Option<usize>> {
    let time = data.time_index.as_ref().expect("validated");
    let mut lookup = HashMap::new();
    for (k, (site, t)) in data.site_ids.iter().zip(time).enumerate() {
        lookup.insert((site.as_str(), *t), k);
    }
    (0..data.n_sites())
        .map(|k| lookup.get(&(data.site_ids[k].as_str(), time[k] - 1)).copied())
        .collect()
}

/// Explicit member list of the context of `target` at `site`.
pub fn biotic_context_members(
    data: &CommunityData,
    site: usize,
    target: usize,
    spec: &BioticContextSpec,
) -> Result<Vec<ContextMember>> {
    let m = data.n_species();
    let y = &data.abundance;
    let mut out = Vec::new();
    match spec {
        BioticContextSpec::Basic | BioticContextSpec::Conditioned { .. } => {
            for j in 0..m {
                if j != target && y[(site, j)] > 0.0 {
                    out.push(ContextMember { species: j, site, weight: 1.0 });
                }
            }
        }
        BioticContextSpec::Temporal => {
            if data.time_index.is_none() {
                return Err(Error::Invalid("temporal biotic context requires a time index".into()));
            }
            if let Some(prev) = previous_rows(data)[site] {
                for j in 0..m {
                    if y[(prev, j)] > 0.0 {
                        out.push(ContextMember { species: j, site: prev, weight: 1.0 });
                    }
                }
            }
        }
        BioticContextSpec::Spatial { radius, decay } => {
            let coords = data.coordinates.as_ref().ok_or_else(|| {
                Error::Invalid("spatial biotic context requires site coordinates".into())
            })?;
            for l in 0..data.n_sites() {
                let dist = distance(coords, site, l);
                if dist > *radius {
                    continue;
                }
                for j in 0..m {
                    if (l == site && j == target) || y[(l, j)] <= 0.0 {
                        continue;
                    }
                    out.push(ContextMember {
                        species: j,
                        site: l,
                        weight: (-decay * dist).exp(),
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Precomputed per-site context coefficients.
///
/// For a pair (k, i) the context vector is `Σ_j c_kij α_j`. `c` combines the
/// abundance weighting, the distance kernel and the `1/|C|` normalization.
/// Entries from the focal site can exclude the target; `shared` entries never
/// do.
#[derive(Clone, Debug)]
pub struct ContextIndex {
    sites: Vec<SiteContext>,
    normalize: bool,
    /// Site covariates with a trailing 1 for the conditioned variant.
    conditioning_inputs: Option<Array2<f64>>,
}

#[derive(Clone, Debug, Default)]
struct SiteContext {
    /// (species, weighted abundance) at the focal site; target excluded.
    focal: Vec<(usize, f64)>,
    /// (species, aggregated weighted abundance) never excluded.
    shared: Vec<(usize, f64)>,
    /// Number of (species, site) members before target exclusion.
    shared_count: usize,
}

impl ContextIndex {
    pub fn build(data: &CommunityData, spec: &BioticContextSpec) -> Result<Self> {
        let (n, m) = data.abundance.dim();
        let y = &data.abundance;
        let mut sites = vec![SiteContext::default(); n];
        let mut normalize = true;
        let mut conditioning_inputs = None;
        match spec {
            BioticContextSpec::Basic | BioticContextSpec::Conditioned { .. } => {
                for (k, sc) in sites.iter_mut().enumerate() {
                    sc.focal = (0..m).filter(|&j| y[(k, j)] > 0.0).map(|j| (j, y[(k, j)])).collect();
                }
                if let BioticContextSpec::Conditioned { weights } = spec {
                    if weights.nrows() != data.n_covariates() + 1 {
                        return Err(Error::Dimension(format!(
                            "conditioning weights have {} rows, expected {}",
                            weights.nrows(),
                            data.n_covariates() + 1
                        )));
                    }
                    let mut v = Array2::ones((n, data.n_covariates() + 1));
                    v.slice_mut(ndarray::s![.., ..data.n_covariates()]).assign(&data.covariates);
                    conditioning_inputs = Some(v);
                }
            }
            BioticContextSpec::Temporal => {
                if data.time_index.is_none() {
                    return Err(Error::Invalid("temporal biotic context requires a time index".into()));
                }
                for (k, prev) in previous_rows(data).into_iter().enumerate() {
                    if let Some(p) = prev {
                        let s: Vec<(usize, f64)> =
                            (0..m).filter(|&j| y[(p, j)] > 0.0).map(|j| (j, y[(p, j)])).collect();
                        sites[k].shared_count = s.len();
                        sites[k].shared = s;
                    }
                }
            }
            BioticContextSpec::Spatial { radius, decay } => {
                normalize = false;
                let coords = data.coordinates.as_ref().ok_or_else(|| {
                    Error::Invalid("spatial biotic context requires site coordinates".into())
                })?;
                for (k, sc) in sites.iter_mut().enumerate() {
                    sc.focal = (0..m).filter(|&j| y[(k, j)] > 0.0).map(|j| (j, y[(k, j)])).collect();
                    let mut acc = vec![0.0; m];
                    let mut count = 0;
                    for l in 0..n {
                        if l == k {
                            continue;
                        }
                        let dist = distance(coords, k, l);
                        if dist > *radius {
                            continue;
                        }
                        let w = (-decay * dist).exp();
                        for j in 0..m {
                            if y[(l, j)] > 0.0 {
                                acc[j] += w * y[(l, j)];
                                count += 1;
                            }
                        }
                    }
                    sc.shared = (0..m).filter(|&j| acc[j] != 0.0).map(|j| (j, acc[j])).collect();
                    sc.shared_count = count;
                }
            }
        }
        Ok(ContextIndex {
            sites,
            normalize,
            conditioning_inputs,
        })
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    /// Calls `f(j, c_kij)` for every context member of (site, target).
    pub fn for_each_coefficient(&self, site: usize, target: usize, mut f: impl FnMut(usize, f64)) {
        let sc = &self.sites[site];
        let target_in_focal = sc.focal.iter().any(|&(j, _)| j == target);
        let size = sc.focal.len() - usize::from(target_in_focal) + sc.shared_count;
        if size == 0 {
            return;
        }
        let scale = if self.normalize { 1.0 / size as f64 } else { 1.0 };
        for &(j, w) in &sc.focal {
            if j != target {
                f(j, w * scale);
            }
        }
        for &(j, w) in &sc.shared {
            f(j, w * scale);
        }
    }

    /// Context effect before conditioning, `Σ_j c_kij α_row(j)`.
    pub fn raw_context(
        &self,
        site: usize,
        target: usize,
        effect: &Array2<f64>,
        row_of: impl Fn(usize) -> usize,
    ) -> Array1<f64> {
        let mut z = Array1::zeros(effect.ncols());
        self.for_each_coefficient(site, target, |j, c| {
            z.scaled_add(c, &effect.row(row_of(j)));
        });
        z
    }

    /// `(v_k, 1)` for the conditioned variant.
    pub fn conditioning_input(&self, site: usize) -> Option<ArrayView1<'_, f64>> {
        self.conditioning_inputs.as_ref().map(|v| v.row(site))
    }
}

/// `β_k = Wᵀ (v_k, 1)`.
pub fn conditioning_vector(weights: &Array2<f64>, input: ArrayView1<'_, f64>) -> Array1<f64> {
    weights.t().dot(&input)
}

/// Context effect `z_ki` for one pair.
pub fn context_effect(
    data: &CommunityData,
    site: usize,
    target: usize,
    emb: &EmbeddingPair,
    spec: &BioticContextSpec,
) -> Result<Array1<f64>> {
    spec.validate(data, emb.dim())?;
    let index = ContextIndex::build(data, spec)?;
    let mut z = index.raw_context(site, target, &emb.effect, |j| j);
    if let BioticContextSpec::Conditioned { weights } = spec {
        z *= &conditioning_vector(weights, index.conditioning_input(site).expect("conditioned"));
    }
    Ok(z)
}

/// Biotic predictor `η^B_ki = o_i + ρ_i · z_ki`.
pub fn biotic_predictor(
    data: &CommunityData,
    site: usize,
    target: usize,
    emb: &EmbeddingPair,
    offsets: &[f64],
    spec: &BioticContextSpec,
) -> Result<f64> {
    let z = context_effect(data, site, target, emb, spec)?;
    Ok(offsets[target] + emb.response.row(target).dot(&z))
}
