//! Bottom-up occurrence simulation on trophic-group food webs.
//!
//! Groups are indexed by trophic position, group 0 being basal. Adjacency
//! entry `(g, h) = 1` means group g preys on group h; every generator only
//! links a group to groups below it, so the result is always a DAG.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::CommunityData;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    Anarchy,
    Democracy,
    Cascade,
    Gcascade,
    Niche,
    Pniche,
}

impl Topology {
    pub const ALL: [Topology; 6] = [
        Topology::Anarchy,
        Topology::Democracy,
        Topology::Cascade,
        Topology::Gcascade,
        Topology::Niche,
        Topology::Pniche,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Topology::Anarchy => "anarchy",
            Topology::Democracy => "democracy",
            Topology::Cascade => "cascade",
            Topology::Gcascade => "gcascade",
            Topology::Niche => "niche",
            Topology::Pniche => "pniche",
        }
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Topology::ALL
            .into_iter()
            .find(|t| t.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Invalid(format!("unknown topology '{s}'")))
    }
}

const MAX_ATTEMPTS: usize = 100;

fn niche_web(g: usize, r: &mut rng::Rng) -> Array2<u8> {
    let mut values: Vec<f64> = (0..g).map(|_| r.random_range(0.0..1.0)).collect();
    values.sort_by(f64::total_cmp);
    let mut adj = Array2::zeros((g, g));
    for c in 1..g {
        let width = values[c] * r.random_range(0.0..1.0);
        let centre = r.random_range(width / 2.0..=values[c].max(width / 2.0));
        let (lo, hi) = (centre - width / 2.0, centre + width / 2.0);
        let mut any = false;
        for h in 0..c {
            if values[h] >= lo && values[h] <= hi {
                adj[(c, h)] = 1;
                any = true;
            }
        }
        if !any {
            adj[(c, c - 1)] = 1;
        }
    }
    adj
}

/// Group adjacency for `kind` with `g` groups.
pub fn generate_topology(kind: Topology, g: usize, seed: u64) -> Result<Array2<u8>> {
    if g < 2 {
        return Err(Error::Invalid("a food web needs at least two groups".into()));
    }
    let mut r = rng::stream(seed, "topology", kind as u64);
    let mut adj = Array2::zeros((g, g));
    match kind {
        Topology::Cascade => {
            for c in 1..g {
                adj[(c, c - 1)] = 1;
            }
        }
        Topology::Gcascade => {
            for c in 1..g {
                for h in 0..c {
                    adj[(c, h)] = 1;
                }
            }
        }
        Topology::Democracy => {
            for c in 1..g {
                adj[(c, c - 1)] = 1;
                if c >= 2 {
                    adj[(c, c - 2)] = 1;
                }
            }
        }
        Topology::Anarchy => {
            let mut attempts = 0;
            loop {
                attempts += 1;
                adj.fill(0);
                for c in 1..g {
                    for h in 0..c {
                        if r.random_bool(0.5) {
                            adj[(c, h)] = 1;
                        }
                    }
                }
                if adj.iter().any(|&v| v == 1) {
                    break;
                }
                if attempts >= MAX_ATTEMPTS {
                    return Err(Error::Invalid("anarchy generator produced no edge".into()));
                }
            }
        }
        Topology::Niche => adj = niche_web(g, &mut r),
        Topology::Pniche => {
            adj = niche_web(g, &mut r);
            let edges: Vec<(usize, usize)> = adj
                .indexed_iter()
                .filter(|(_, &v)| v == 1)
                .map(|(e, _)| e)
                .collect();
            for (c, h) in edges {
                if r.random_bool(0.2) {
                    let target = r.random_range(0..c);
                    adj[(c, h)] = 0;
                    adj[(c, target)] = 1;
                }
            }
        }
    }
    Ok(adj)
}

/// Topological order (prey before predators), or an error on a cycle.
pub fn topological_order(adj: &Array2<u8>) -> Result<Vec<usize>> {
    let g = adj.nrows();
    let mut remaining: Vec<usize> = (0..g).map(|c| adj.row(c).iter().filter(|&&v| v == 1).count()).collect();
    let mut done = vec![false; g];
    let mut order = Vec::with_capacity(g);
    while order.len() < g {
        let next = (0..g)
            .find(|&c| !done[c] && remaining[c] == 0)
            .ok_or_else(|| Error::Invalid("group adjacency contains a cycle".into()))?;
        done[next] = true;
        order.push(next);
        for c in 0..g {
            if adj[(c, next)] == 1 {
                remaining[c] -= 1;
            }
        }
    }
    Ok(order)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoodWebConfig {
    pub topology: Topology,
    pub groups: usize,
    pub species_per_group: usize,
    pub n_sites: usize,
    /// Common niche breadth `δ` on the 0–100 gradient.
    pub breadth: f64,
    pub seed: u64,
}

impl Default for FoodWebConfig {
    fn default() -> Self {
        FoodWebConfig {
            topology: Topology::Cascade,
            groups: 5,
            species_per_group: 5,
            n_sites: 500,
            breadth: 15.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FoodWebOutput {
    /// Binary occurrences with the gradient as covariate and group labels.
    pub data: CommunityData,
    pub adjacency: Array2<u8>,
    /// Species-level predator × prey links.
    pub metaweb: Array2<u8>,
    /// Metaweb links whose two species co-occur at least once.
    pub realized: Array2<u8>,
    pub optima: Vec<f64>,
}

pub fn expand_metaweb(adj: &Array2<u8>, species_per_group: usize) -> Array2<u8> {
    let m = adj.nrows() * species_per_group;
    Array2::from_shape_fn((m, m), |(i, j)| adj[(i / species_per_group, j / species_per_group)])
}

pub fn simulate_occurrences(config: &FoodWebConfig, adjacency: &Array2<u8>) -> Result<FoodWebOutput> {
    let g = config.groups;
    if adjacency.dim() != (g, g) {
        return Err(Error::Dimension(format!("adjacency {:?} for {g} groups", adjacency.dim())));
    }
    if config.species_per_group == 0 || !(config.breadth > 0.0) {
        return Err(Error::Invalid("species_per_group and breadth must be positive".into()));
    }
    let order = topological_order(adjacency)?;
    let mg = config.species_per_group;
    let m = g * mg;
    let mut r = rng::stream(config.seed, "optima", 0);
    let optima: Vec<f64> = (0..m).map(|_| r.random_range(0.0..100.0)).collect();
    let mut r = rng::stream(config.seed, "gradient", 0);
    let gradient: Vec<f64> = (0..config.n_sites).map(|_| r.random_range(0.0..100.0)).collect();
    let rows: Vec<Vec<f64>> = gradient
        .par_iter()
        .enumerate()
        .map(|(k, &e)| {
            let mut sr = rng::stream(config.seed, "foodweb-site", k as u64);
            let mut present = vec![0.0; m];
            for &grp in &order {
                let prey_groups: Vec<usize> = (0..g).filter(|&h| adjacency[(grp, h)] == 1).collect();
                let fed = prey_groups.is_empty()
                    || prey_groups
                        .iter()
                        .any(|&h| (h * mg..(h + 1) * mg).any(|j| present[j] > 0.0));
                for i in grp * mg..(grp + 1) * mg {
                    let q = (-(e - optima[i]).powi(2) / (2.0 * config.breadth.powi(2))).exp();
                    let u: f64 = sr.random_range(0.0..1.0);
                    if fed && u < q {
                        present[i] = 1.0;
                    }
                }
            }
            present
        })
        .collect();
    let n = config.n_sites;
    let abundance = Array2::from_shape_fn((n, m), |(k, i)| rows[k][i]);
    let metaweb = expand_metaweb(adjacency, mg);
    let realized = Array2::from_shape_fn((m, m), |(i, j)| {
        let co = metaweb[(i, j)] == 1 && (0..n).any(|k| abundance[(k, i)] > 0.0 && abundance[(k, j)] > 0.0);
        u8::from(co)
    });
    let data = CommunityData::with_ids(
        abundance,
        Array1::from(gradient).into_shape_with_order((n, 1)).expect("column"),
        (0..n).map(|k| format!("site{k}")).collect(),
        (0..m).map(|i| format!("g{}s{}", i / mg, i % mg)).collect(),
        vec!["E".into()],
    )?
    .binary()?
    .with_groups((0..m).map(|i| i / mg).collect())?;
    Ok(FoodWebOutput {
        data,
        adjacency: adjacency.clone(),
        metaweb,
        realized,
        optima,
    })
}

pub fn simulate_foodweb(config: &FoodWebConfig) -> Result<FoodWebOutput> {
    let adj = generate_topology(config.topology, config.groups, config.seed)?;
    simulate_occurrences(config, &adj)
}
