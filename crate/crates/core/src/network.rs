//! From a fitted association matrix to a discrete network: thresholding,
//! bootstrap filtering, response/effect co-clustering, modularity
//! communities and the group-level summary network.

use std::collections::BTreeMap;

use log::warn;
use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::CommunityData;
use crate::error::{Error, Result};
use crate::inference::{train, TrainConfig};
use crate::model::ModelSpec;
use crate::rng;
use rand::Rng as _;

/// Labels: 1 if `a > ε⁺`, −1 if `a < −ε⁻`, 0 otherwise; the diagonal is 0.
pub fn discretize(strengths: &Array2<f64>, eps_pos: f64, eps_neg: f64) -> Result<Array2<i8>> {
    if !(eps_pos >= 0.0 && eps_neg >= 0.0) {
        return Err(Error::Invalid(format!("thresholds must be non-negative (got {eps_pos}, {eps_neg})")));
    }
    Ok(Array2::from_shape_fn(strengths.dim(), |(i, j)| {
        let a = strengths[(i, j)];
        if i == j {
            0
        } else if a > eps_pos {
            1
        } else if a < -eps_neg {
            -1
        } else {
            0
        }
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssociationNetwork {
    pub strengths: Array2<f64>,
    pub labels: Array2<i8>,
    pub eps_pos: f64,
    pub eps_neg: f64,
}

impl AssociationNetwork {
    pub fn new(strengths: &Array2<f64>, eps_pos: f64, eps_neg: f64) -> Result<Self> {
        if strengths.nrows() != strengths.ncols() {
            return Err(Error::Dimension(format!("association matrix is {:?}", strengths.dim())));
        }
        let mut s = strengths.clone();
        s.diag_mut().fill(0.0);
        let labels = discretize(&s, eps_pos, eps_neg)?;
        Ok(AssociationNetwork { strengths: s, labels, eps_pos, eps_neg })
    }

    /// Non-neutral edges as (target, source, strength, label).
    pub fn edges(&self) -> Vec<(usize, usize, f64, i8)> {
        self.labels
            .indexed_iter()
            .filter(|(_, &l)| l != 0)
            .map(|((i, j), &l)| (i, j, self.strengths[(i, j)], l))
            .collect()
    }
}

/// Linear-interpolation percentile of sorted values (`q` in [0, 1]).
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapNetwork {
    pub mean: Array2<f64>,
    pub ci_low: Array2<f64>,
    pub ci_high: Array2<f64>,
    pub kept: Array2<bool>,
    /// Mean strength where the interval excludes zero, else 0.
    pub strengths: Array2<f64>,
    pub replicates: usize,
}

/// Percentile intervals over replicate matrices; pairs whose interval
/// contains zero are set to zero.
pub fn filter_by_intervals(replicates: &[Array2<f64>], ci: f64) -> Result<BootstrapNetwork> {
    let first = replicates
        .first()
        .ok_or_else(|| Error::Invalid("no bootstrap replicate".into()))?;
    if !(ci > 0.0 && ci < 1.0) {
        return Err(Error::Invalid(format!("confidence level {ci} outside (0, 1)")));
    }
    let dim = first.dim();
    let (lo_q, hi_q) = ((1.0 - ci) / 2.0, 1.0 - (1.0 - ci) / 2.0);
    let mut out = BootstrapNetwork {
        mean: Array2::zeros(dim),
        ci_low: Array2::zeros(dim),
        ci_high: Array2::zeros(dim),
        kept: Array2::from_elem(dim, false),
        strengths: Array2::zeros(dim),
        replicates: replicates.len(),
    };
    for idx in ndarray::indices(dim) {
        let mut v: Vec<f64> = replicates.iter().map(|r| r[idx]).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.sort_by(f64::total_cmp);
        let (lo, hi) = (percentile(&v, lo_q), percentile(&v, hi_q));
        let keep = lo > 0.0 || hi < 0.0;
        out.mean[idx] = mean;
        out.ci_low[idx] = lo;
        out.ci_high[idx] = hi;
        out.kept[idx] = keep;
        out.strengths[idx] = if keep { mean } else { 0.0 };
    }
    Ok(out)
}

/// Refits the model (without L1 penalty) on `b` site bootstrap resamples and
/// keeps the associations whose percentile interval excludes zero.
pub fn bootstrap_network(
    data: &CommunityData,
    spec: &ModelSpec,
    config: &TrainConfig,
    b: usize,
    ci: f64,
    seed: u64,
) -> Result<BootstrapNetwork> {
    if b < 2 {
        return Err(Error::Invalid("at least two bootstrap replicates are needed".into()));
    }
    let n = data.n_sites();
    let fits: Vec<Option<Array2<f64>>> = (0..b)
        .into_par_iter()
        .map(|r| {
            let mut g = rng::stream(seed, "bootstrap", r as u64);
            let sites: Vec<usize> = (0..n).map(|_| g.random_range(0..n)).collect();
            let sample = data.subset_sites(&sites);
            let cfg = TrainConfig {
                lambda_l1: 0.0,
                seed: rng::child_seed(seed, "bootstrap-fit", r as u64),
                ..config.clone()
            };
            match train(&sample, spec, &cfg) {
                Ok(model) => Some(model.association_matrix()),
                Err(e) => {
                    warn!("bootstrap replicate {r} dropped: {e}");
                    None
                }
            }
        })
        .collect();
    let survivors: Vec<Array2<f64>> = fits.into_iter().flatten().collect();
    if 2 * survivors.len() < b {
        return Err(Error::Invalid(format!("only {} of {b} bootstrap replicates converged", survivors.len())));
    }
    filter_by_intervals(&survivors, ci)
}

/// Relabels so that groups are numbered 0, 1, … by first appearance.
pub fn contiguous_labels(raw: &[usize]) -> Vec<usize> {
    let mut map = BTreeMap::new();
    raw.iter()
        .map(|&r| {
            let next = map.len();
            *map.entry(r).or_insert(next)
        })
        .collect()
}

/// Ward agglomerative clustering of the rows of `points`, cut at `k`
/// clusters. Ties merge the lowest-indexed pair first.
pub fn ward_clusters(points: &Array2<f64>, k: usize) -> Result<Vec<usize>> {
    let n = points.nrows();
    if k == 0 || k > n {
        return Err(Error::Invalid(format!("cannot cut {n} items into {k} groups")));
    }
    let mut dist = Array2::from_shape_fn((n, n), |(a, b)| {
        points.row(a).iter().zip(points.row(b)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    });
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut owner: Vec<usize> = (0..n).collect();
    for _ in 0..n - k {
        let mut best = (f64::INFINITY, 0, 0);
        for a in 0..n {
            if !active[a] {
                continue;
            }
            for b in a + 1..n {
                if active[b] && dist[(a, b)] < best.0 {
                    best = (dist[(a, b)], a, b);
                }
            }
        }
        let (dab, a, b) = best;
        for c in 0..n {
            if !active[c] || c == a || c == b {
                continue;
            }
            let (na, nb, nc) = (size[a] as f64, size[b] as f64, size[c] as f64);
            let d2 = ((na + nc) * dist[(a, c)].powi(2) + (nb + nc) * dist[(b, c)].powi(2) - nc * dab * dab)
                / (na + nb + nc);
            let d = d2.max(0.0).sqrt();
            dist[(a, c)] = d;
            dist[(c, a)] = d;
        }
        size[a] += size[b];
        active[b] = false;
        for o in owner.iter_mut() {
            if *o == b {
                *o = a;
            }
        }
    }
    Ok(contiguous_labels(&owner))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStructure {
    pub response_groups: Vec<usize>,
    pub effect_groups: Vec<usize>,
    pub modules: Vec<usize>,
    pub modularity: f64,
}

/// Rows (responses) and columns (effects) of the strength matrix clustered
/// independently.
pub fn coclusters(strengths: &Array2<f64>, n_row_groups: usize, n_col_groups: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let rows = ward_clusters(strengths, n_row_groups)?;
    let cols = ward_clusters(&strengths.t().to_owned(), n_col_groups)?;
    Ok((rows, cols))
}

/// Symmetric non-negative weights `max(|a_ij|, |a_ji|)`, zero diagonal.
pub fn undirected_weights(strengths: &Array2<f64>) -> Array2<f64> {
    Array2::from_shape_fn(strengths.dim(), |(i, j)| {
        if i == j {
            0.0
        } else {
            strengths[(i, j)].abs().max(strengths[(j, i)].abs())
        }
    })
}

/// Newman modularity of a partition of a weighted undirected graph.
pub fn modularity(weights: &Array2<f64>, labels: &[usize]) -> f64 {
    let total: f64 = weights.sum();
    if total == 0.0 {
        return 0.0;
    }
    let degree: Vec<f64> = weights.axis_iter(Axis(0)).map(|r| r.sum()).collect();
    let mut q = 0.0;
    for i in 0..labels.len() {
        for j in 0..labels.len() {
            if labels[i] == labels[j] {
                q += weights[(i, j)] - degree[i] * degree[j] / total;
            }
        }
    }
    q / total
}

/// Greedy agglomerative modularity maximization: starting from singletons,
/// merge the pair of communities with the largest gain while it is positive.
/// A partition scoring below the single community is replaced by it.
pub fn modularity_communities(strengths: &Array2<f64>) -> (Vec<usize>, f64) {
    let w = undirected_weights(strengths);
    let n = w.nrows();
    let total: f64 = w.sum();
    if total == 0.0 {
        return (vec![0; n], 0.0);
    }
    // e[c][d]: fraction of edge weight between communities; a[c]: degree share.
    let mut e = w.mapv(|v| v / total);
    let mut a: Vec<f64> = e.axis_iter(Axis(0)).map(|r| r.sum()).collect();
    let mut active = vec![true; n];
    let mut owner: Vec<usize> = (0..n).collect();
    loop {
        let mut best = (0.0, usize::MAX, usize::MAX);
        for c in 0..n {
            if !active[c] {
                continue;
            }
            for d in c + 1..n {
                if active[d] {
                    let gain = 2.0 * (e[(c, d)] - a[c] * a[d]);
                    if gain > best.0 + 1e-15 {
                        best = (gain, c, d);
                    }
                }
            }
        }
        let (_, c, d) = best;
        if c == usize::MAX {
            break;
        }
        for x in 0..n {
            let v = e[(d, x)];
            e[(c, x)] += v;
        }
        for x in 0..n {
            let v = e[(x, d)];
            e[(x, c)] += v;
        }
        a[c] += a[d];
        active[d] = false;
        for o in owner.iter_mut() {
            if *o == d {
                *o = c;
            }
        }
    }
    let labels = contiguous_labels(&owner);
    let q = modularity(&w, &labels);
    if q < 0.0 {
        return (vec![0; n], 0.0);
    }
    (labels, q)
}

/// Co-clusters and modules; group counts default to the number of modules.
pub fn group_structure(strengths: &Array2<f64>, n_row_groups: Option<usize>, n_col_groups: Option<usize>) -> Result<GroupStructure> {
    let (modules, q) = modularity_communities(strengths);
    let n_modules = modules.iter().max().map_or(1, |&g| g + 1);
    let (response_groups, effect_groups) = coclusters(
        strengths,
        n_row_groups.unwrap_or(n_modules),
        n_col_groups.unwrap_or(n_modules),
    )?;
    Ok(GroupStructure { response_groups, effect_groups, modules, modularity: q })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryEdge {
    pub effect_group: usize,
    pub response_group: usize,
    pub label: i8,
    pub proportion: f64,
    pub signed_pairs: usize,
}

/// Group-level network: for each (effect group, response group), the
/// majority non-neutral label among member pairs (ties count as positive).
pub fn summary_network(labels: &Array2<i8>, response_groups: &[usize], effect_groups: &[usize]) -> Vec<SummaryEdge> {
    let mut counts: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
    for ((i, j), &l) in labels.indexed_iter() {
        if i == j || l == 0 {
            continue;
        }
        let entry = counts.entry((effect_groups[j], response_groups[i])).or_default();
        if l > 0 {
            entry.0 += 1;
        } else {
            entry.1 += 1;
        }
    }
    counts
        .into_iter()
        .map(|((g, h), (pos, neg))| {
            let total = pos + neg;
            let (label, major) = if pos >= neg { (1, pos) } else { (-1, neg) };
            SummaryEdge {
                effect_group: g,
                response_group: h,
                label,
                proportion: major as f64 / total as f64,
                signed_pairs: total,
            }
        })
        .collect()
}
