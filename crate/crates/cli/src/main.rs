//! `assocnet` command-line interface.
//!
//! Exit codes: 0 success, 2 usage or validation error, 3 numerical failure.

mod datadir;
mod run;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use assocnet::eval::evaluate;
use assocnet::inference::train;
use assocnet::io::{
    adjacency_csv, edge_list_csv, groups_csv, matrix_csv, network_dot, save_bundle, summary_csv, load_bundle,
    ModelBundle, BUNDLE_FILE,
};
use assocnet::model::OccupancyTreatment;
use assocnet::network::{bootstrap_network, group_structure, summary_network, AssociationNetwork};
use assocnet::selection::{select, Criterion, SelectionGrid};
use assocnet::sim_community::{
    experiment1_designs, generate_experiment1, run_assembly, truth_labels, AssemblyConfig, ExperimentDesign,
};
use assocnet::sim_foodweb::{simulate_foodweb, FoodWebConfig, Topology};
use assocnet::{AggregationMode, Error, FamilyKind, ModelSpec, PreprocessSpec, Result, TrainConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use run::{json_arg, Run};

#[derive(Parser, Debug)]
#[command(name = "assocnet", version, long_version = run_long_version(), about = "Directed species association networks from community data")]
struct Cli {
    /// Seed for every random stream of the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

fn run_long_version() -> &'static str {
    Box::leak(run::artifact_version().into_boxed_str())
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate communities with the lottery assembly model.
    SimulateCommunity {
        /// Simulation config (inline JSON or path).
        #[arg(long, conflicts_with = "preset")]
        config: Option<String>,
        /// Named preset: exp1-full (all 33 designs).
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate occurrences over food-web topologies.
    SimulateFoodweb {
        #[arg(long)]
        config: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a model to a dataset directory.
    Fit {
        #[command(flatten)]
        model: ModelArgs,
        /// Training config (inline JSON or path).
        #[arg(long)]
        train: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Choose the embedding dimension and L1 penalty.
    Select {
        #[command(flatten)]
        model: ModelArgs,
        /// Grid (inline JSON, path, or preset: alpine, text, table).
        #[arg(long, default_value = "text")]
        grid: String,
        #[arg(long)]
        train: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract the discrete association network from a fitted bundle.
    Network {
        /// Bundle directory or its model.json.
        #[arg(long)]
        model: PathBuf,
        /// Threshold for positive labels (and negative unless --eps-neg).
        #[arg(long, default_value_t = 0.05)]
        eps: f64,
        #[arg(long)]
        eps_neg: Option<f64>,
        /// Number of bootstrap refits; needs --data.
        #[arg(long)]
        bootstrap: Option<usize>,
        #[arg(long, default_value_t = 0.95)]
        ci: f64,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        train: Option<String>,
        #[arg(long)]
        row_groups: Option<usize>,
        #[arg(long)]
        col_groups: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted associations against a reference network.
    Evaluate {
        /// Strength matrix CSV or a bundle directory.
        #[arg(long)]
        pred: PathBuf,
        /// Truth labels or reference adjacency CSV.
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, value_enum, default_value_t = Reference::Labels)]
        reference: Reference,
        #[arg(long, default_value_t = 0.05)]
        eps: f64,
        #[arg(long)]
        eps_neg: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Model spec (inline JSON or path); flags below override its fields.
    #[arg(long = "model-spec")]
    spec: Option<String>,
    #[arg(long)]
    mode: Option<AggregationMode>,
    #[arg(long)]
    family: Option<FamilyKind>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, value_enum)]
    occupancy: Option<Occupancy>,
    /// Covariate preprocessing (inline JSON or path); overrides the
    /// dataset's preprocess.json.
    #[arg(long)]
    preprocess: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Occupancy {
    Observed,
    Latent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Reference {
    Labels,
    Metaweb,
    Realized,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
            eprintln!("error: cannot configure {jobs} worker threads: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::SimulateCommunity { config, preset, out } => simulate_community(config, preset, &out, seed),
        Command::SimulateFoodweb { config, out } => simulate_foodweb_cmd(config, &out, seed),
        Command::Fit { model, train, out } => fit(model, train, &out, seed),
        Command::Select { model, grid, train, out } => select_cmd(model, &grid, train, &out, seed),
        Command::Network { model, eps, eps_neg, bootstrap, ci, data, train, row_groups, col_groups, out } => network(
            NetworkArgs { model, eps, eps_neg, bootstrap, ci, data, train, row_groups, col_groups },
            &out,
            seed,
        ),
        Command::Evaluate { pred, truth, reference, eps, eps_neg, out } => {
            evaluate_cmd(&pred, &truth, reference, eps, eps_neg.unwrap_or(eps), &out, seed)
        }
    }
}

/// Community simulation settings. Either `designs` (each drawn as a random
/// pool) or an explicit `pool`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CommunitySimConfig {
    designs: Vec<ExperimentDesign>,
    pool: Option<AssemblyConfig>,
    n_sites: usize,
    capacity: u32,
    breadth: f64,
    b_env: f64,
    b_comp: f64,
    b_fac: f64,
    b_abun: f64,
    immigration: f64,
    epochs: usize,
    tolerance: f64,
    stable_steps: usize,
}

impl Default for CommunitySimConfig {
    fn default() -> Self {
        let base = AssemblyConfig::random_pool(0, 15.0, 0);
        CommunitySimConfig {
            designs: Vec::new(),
            pool: None,
            n_sites: base.n_sites,
            capacity: base.capacity,
            breadth: 15.0,
            b_env: base.b_env,
            b_comp: base.b_comp,
            b_fac: base.b_fac,
            b_abun: base.b_abun,
            immigration: base.immigration,
            epochs: base.epochs,
            tolerance: base.tolerance,
            stable_steps: base.stable_steps,
        }
    }
}

impl CommunitySimConfig {
    fn base(&self, seed: u64) -> AssemblyConfig {
        AssemblyConfig {
            n_sites: self.n_sites,
            capacity: self.capacity,
            b_env: self.b_env,
            b_comp: self.b_comp,
            b_fac: self.b_fac,
            b_abun: self.b_abun,
            immigration: self.immigration,
            epochs: self.epochs,
            tolerance: self.tolerance,
            stable_steps: self.stable_steps,
            ..AssemblyConfig::random_pool(1, self.breadth, seed)
        }
    }
}

fn simulate_community(config: Option<String>, preset: Option<String>, out: &Path, seed: u64) -> Result<()> {
    let mut run = Run::new("simulate-community", seed, out)?;
    let cfg: CommunitySimConfig = match (config, preset.as_deref()) {
        (Some(c), _) => json_arg(&c, "simulation config", &mut run)?,
        (None, Some("exp1-full")) => CommunitySimConfig { designs: experiment1_designs(), ..Default::default() },
        (None, Some(p)) => return Err(Error::Invalid(format!("unknown preset '{p}' (exp1-full)"))),
        (None, None) => return Err(Error::Invalid("give --config or --preset".into())),
    };
    let base = cfg.base(seed);
    base.validate()?;
    if cfg.designs.is_empty() == cfg.pool.is_none() {
        return Err(Error::Invalid("simulation config needs exactly one of `designs` or `pool`".into()));
    }
    run.write_config(&cfg)?;
    let pre = datadir::gradient_preprocess();
    if let Some(pool) = &cfg.pool {
        let pool = AssemblyConfig { seed, ..pool.clone() };
        let output = run_assembly(&pool)?;
        datadir::write(&mut run, "", &output.data, &pre)?;
        let truth = truth_labels(&pool.interactions);
        write_labels(&mut run, datadir::TRUTH, &output.data.species_ids, &truth)?;
        return run.finish().map(|_| ());
    }
    let sims = generate_experiment1(&cfg.designs, &base, seed)?;
    for sim in &sims {
        let dir = sim.design.label();
        datadir::write(&mut run, &dir, &sim.output.data, &pre)?;
        write_labels(&mut run, &format!("{dir}/{}", datadir::TRUTH), &sim.output.data.species_ids, &sim.truth)?;
        let ids = &sim.output.data.species_ids;
        run.write(
            &format!("{dir}/interactions.csv"),
            &matrix_csv("source", ids, ids, &sim.config.interactions)?,
        )?;
        let not_converged = sim.output.converged.iter().filter(|c| !**c).count();
        run.write_json(
            &format!("{dir}/dataset.json"),
            &serde_json::json!({
                "design": sim.design,
                "label": dir,
                "seed": sim.config.seed,
                "optima": sim.config.optima,
                "breadths": sim.config.breadths,
                "truth": datadir::TRUTH,
                "interactions": "interactions.csv",
                "sites_not_converged": not_converged,
            }),
        )?;
        info!("{dir}: {} sites, {not_converged} not at equilibrium", sim.output.data.n_sites());
    }
    run.finish().map(|_| ())
}

fn write_labels(run: &mut Run, path: &str, species: &[String], labels: &Array2<i8>) -> Result<()> {
    run.write(path, &matrix_csv("target", species, species, labels)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FoodWebSimConfig {
    topologies: Vec<Topology>,
    groups: usize,
    species_per_group: usize,
    n_sites: usize,
    breadth: f64,
}

impl Default for FoodWebSimConfig {
    fn default() -> Self {
        let d = FoodWebConfig::default();
        FoodWebSimConfig {
            topologies: Topology::ALL.to_vec(),
            groups: d.groups,
            species_per_group: d.species_per_group,
            n_sites: d.n_sites,
            breadth: d.breadth,
        }
    }
}

fn simulate_foodweb_cmd(config: Option<String>, out: &Path, seed: u64) -> Result<()> {
    let mut run = Run::new("simulate-foodweb", seed, out)?;
    let cfg: FoodWebSimConfig = match config {
        Some(c) => json_arg(&c, "food-web config", &mut run)?,
        None => FoodWebSimConfig::default(),
    };
    if cfg.topologies.is_empty() {
        return Err(Error::Invalid("food-web config lists no topology".into()));
    }
    run.write_config(&cfg)?;
    let pre = datadir::gradient_preprocess();
    for &topology in &cfg.topologies {
        let fw = FoodWebConfig {
            topology,
            groups: cfg.groups,
            species_per_group: cfg.species_per_group,
            n_sites: cfg.n_sites,
            breadth: cfg.breadth,
            seed,
        };
        let output = simulate_foodweb(&fw)?;
        let dir = topology.name();
        let ids = &output.data.species_ids;
        datadir::write(&mut run, dir, &output.data, &pre)?;
        run.write(&format!("{dir}/metaweb.csv"), &matrix_csv("target", ids, ids, &output.metaweb)?)?;
        run.write(&format!("{dir}/realized.csv"), &matrix_csv("target", ids, ids, &output.realized)?)?;
        let gnames: Vec<String> = (0..cfg.groups).map(|g| format!("g{g}")).collect();
        run.write(&format!("{dir}/group_adjacency.csv"), &matrix_csv("consumer", &gnames, &gnames, &output.adjacency)?)?;
        run.write_json(
            &format!("{dir}/dataset.json"),
            &serde_json::json!({
                "config": fw,
                "optima": output.optima,
                "metaweb": "metaweb.csv",
                "realized": "realized.csv",
            }),
        )?;
    }
    run.finish().map(|_| ())
}

#[derive(Clone, Debug, Serialize)]
struct FitConfig {
    data: String,
    model: ModelSpec,
    train: TrainConfig,
    preprocess: PreprocessSpec,
}

/// Resolves the model spec, training config and dataset for fit/select.
fn prepare(
    args: &ModelArgs,
    train_arg: Option<&str>,
    seed: u64,
    run: &mut Run,
) -> Result<(ModelSpec, TrainConfig, datadir::Loaded)> {
    let mut spec: ModelSpec = match &args.spec {
        Some(s) => json_arg(s, "model spec", run)?,
        None => ModelSpec::default(),
    };
    if let Some(m) = args.mode {
        spec.mode = m;
    }
    if let Some(f) = args.family {
        spec.family = f;
    }
    if let Some(d) = args.dim {
        spec.dim = d;
    }
    if let Some(o) = args.occupancy {
        spec.occupancy = match o {
            Occupancy::Observed => OccupancyTreatment::Observed,
            Occupancy::Latent => OccupancyTreatment::Latent,
        };
    }
    spec.mode.check_family(spec.family)?;
    let mut config: TrainConfig = match train_arg {
        Some(t) => json_arg(t, "training config", run)?,
        None => TrainConfig::default(),
    };
    config.seed = seed;
    config.validate()?;
    let preprocess = match &args.preprocess {
        Some(p) => Some(json_arg::<PreprocessSpec>(p, "preprocess spec", run)?),
        None => None,
    };
    let loaded = datadir::load(&args.data, preprocess, run)?;
    spec.validate(&loaded.data)?;
    Ok((spec, config, loaded))
}

fn bundle_files(prefix: &str) -> Vec<String> {
    ["model.json", "habitat.csv", "response.csv", "effect.csv", "training_log.csv"]
        .iter()
        .map(|f| if prefix.is_empty() { f.to_string() } else { format!("{prefix}/{f}") })
        .collect()
}

fn fit(args: ModelArgs, train_arg: Option<String>, out: &Path, seed: u64) -> Result<()> {
    let mut run = Run::new("fit", seed, out)?;
    let (spec, config, loaded) = prepare(&args, train_arg.as_deref(), seed, &mut run)?;
    run.write_config(&FitConfig {
        data: args.data.display().to_string(),
        model: spec.clone(),
        train: config.clone(),
        preprocess: loaded.preprocessor.spec.clone(),
    })?;
    let model = train(&loaded.data, &spec, &config)?;
    let bundle = ModelBundle {
        model,
        species_ids: loaded.data.species_ids.clone(),
        covariate_names: loaded.data.covariate_names.clone(),
    };
    save_bundle(&bundle, out)?;
    run.note_outputs(bundle_files(""));
    run.write_json("preprocessor.json", &loaded.preprocessor)?;
    run.finish().map(|_| ())
}

fn grid_arg(arg: &str, m: usize, run: &mut Run) -> Result<SelectionGrid> {
    match arg {
        "alpine" => Ok(SelectionGrid::text_preset()),
        "text" | "table" => {
            let mut g = SelectionGrid::preset(arg)?;
            g.dims = SelectionGrid::default_dims(m);
            Ok(g)
        }
        _ => json_arg(arg, "selection grid", run),
    }
}

#[derive(Clone, Debug, Serialize)]
struct SelectConfig {
    data: String,
    model: ModelSpec,
    train: TrainConfig,
    preprocess: PreprocessSpec,
    grid: SelectionGrid,
}

fn select_cmd(args: ModelArgs, grid_arg_s: &str, train_arg: Option<String>, out: &Path, seed: u64) -> Result<()> {
    let mut run = Run::new("select", seed, out)?;
    let (spec, config, loaded) = prepare(&args, train_arg.as_deref(), seed, &mut run)?;
    let grid = grid_arg(grid_arg_s, loaded.data.n_species(), &mut run)?;
    grid.validate()?;
    run.write_config(&SelectConfig {
        data: args.data.display().to_string(),
        model: spec.clone(),
        train: config.clone(),
        preprocess: loaded.preprocessor.spec.clone(),
        grid: grid.clone(),
    })?;
    let report = select(&loaded.data, &spec, &grid, &config)?;
    let rows = report.fits.iter().map(|f| {
        vec![
            f.dim.to_string(),
            f.lambda.to_string(),
            f.fold.map_or(String::new(), |v| v.to_string()),
            f.score.to_string(),
            f.effective_dimension.to_string(),
            f.log_likelihood.map_or(String::new(), |v| v.to_string()),
            f.parameters.map_or(String::new(), |v| v.to_string()),
        ]
    });
    run.write(
        "selection.csv",
        &assocnet::io::csv_bytes(
            &["dim", "lambda", "fold", "score", "effective_dimension", "log_likelihood", "parameters"],
            rows,
        )?,
    )?;
    run.write_json(
        "selection.json",
        &serde_json::json!({
            "criterion": report.criterion,
            "metric": report.metric,
            "best": { "dim": report.best_dim, "lambda": report.best_lambda },
            "cells": report.cells,
            "coverage": report.coverage,
            "parameter_rule": report.parameter_rule,
        }),
    )?;
    let best_spec = ModelSpec { dim: report.best_dim, ..spec };
    let best_config = TrainConfig { lambda_l1: report.best_lambda, ..config };
    let model = train(&loaded.data, &best_spec, &best_config)?;
    let bundle = ModelBundle {
        model,
        species_ids: loaded.data.species_ids.clone(),
        covariate_names: loaded.data.covariate_names.clone(),
    };
    save_bundle(&bundle, &out.join("best"))?;
    run.note_outputs(bundle_files("best"));
    info!(
        "{} picked d = {}, lambda = {}",
        if grid.criterion == Criterion::Cv { "cross-validation" } else { "information criterion" },
        report.best_dim,
        report.best_lambda
    );
    run.finish().map(|_| ())
}

struct NetworkArgs {
    model: PathBuf,
    eps: f64,
    eps_neg: Option<f64>,
    bootstrap: Option<usize>,
    ci: f64,
    data: Option<PathBuf>,
    train: Option<String>,
    row_groups: Option<usize>,
    col_groups: Option<usize>,
}

#[derive(Clone, Debug, Serialize)]
struct NetworkConfig {
    model: String,
    eps_pos: f64,
    eps_neg: f64,
    bootstrap: Option<usize>,
    ci: f64,
    data: Option<String>,
    train: Option<TrainConfig>,
    row_groups: Option<usize>,
    col_groups: Option<usize>,
}

fn read_bundle(path: &Path, run: &mut Run) -> Result<ModelBundle> {
    let json = if path.is_dir() { path.join(BUNDLE_FILE) } else { path.to_path_buf() };
    run.read_input(&json)?;
    load_bundle(path)
}

fn network(args: NetworkArgs, out: &Path, seed: u64) -> Result<()> {
    let mut run = Run::new("network", seed, out)?;
    let bundle = read_bundle(&args.model, &mut run)?;
    let eps_neg = args.eps_neg.unwrap_or(args.eps);
    let train_config = match &args.train {
        Some(t) => Some(TrainConfig { seed, ..json_arg(t, "training config", &mut run)? }),
        None => args.bootstrap.map(|_| TrainConfig { seed, ..TrainConfig::default() }),
    };
    run.write_config(&NetworkConfig {
        model: args.model.display().to_string(),
        eps_pos: args.eps,
        eps_neg,
        bootstrap: args.bootstrap,
        ci: args.ci,
        data: args.data.as_ref().map(|d| d.display().to_string()),
        train: train_config.clone(),
        row_groups: args.row_groups,
        col_groups: args.col_groups,
    })?;
    let species = bundle.species_ids.clone();
    let mut strengths = bundle.model.association_matrix();
    if let Some(b) = args.bootstrap {
        let data_dir = args
            .data
            .as_ref()
            .ok_or_else(|| Error::Invalid("--bootstrap needs --data".into()))?;
        let loaded = datadir::load(data_dir, None, &mut run)?;
        if loaded.data.species_ids != species {
            return Err(Error::Dimension("dataset species differ from the bundle's".into()));
        }
        let model = &bundle.model;
        let spec = ModelSpec {
            family: model.family.kind,
            mode: model.mode,
            context: model.context_spec.clone(),
            dim: model.dim(),
            occupancy: model.occupancy,
            learn_offsets: Some(model.learned_offsets),
        };
        let boot = bootstrap_network(&loaded.data, &spec, train_config.as_ref().expect("set with bootstrap"), b, args.ci, seed)?;
        run.write("bootstrap_low.csv", &adjacency_csv(&species, &boot.ci_low)?)?;
        run.write("bootstrap_high.csv", &adjacency_csv(&species, &boot.ci_high)?)?;
        strengths = boot.strengths;
    }
    let net = AssociationNetwork::new(&strengths, args.eps, eps_neg)?;
    let groups = group_structure(&net.strengths, args.row_groups, args.col_groups)?;
    let summary = summary_network(&net.labels, &groups.response_groups, &groups.effect_groups);
    run.write("adjacency.csv", &adjacency_csv(&species, &net.strengths)?)?;
    run.write("labels.csv", &matrix_csv("target", &species, &species, &net.labels)?)?;
    run.write("edges.csv", &edge_list_csv(&species, &net)?)?;
    run.write("groups.csv", &groups_csv(&species, &groups)?)?;
    run.write("summary.csv", &summary_csv(&summary)?)?;
    run.write("network.dot", network_dot(&species, &net, Some(&groups.modules)).as_bytes())?;
    let count = |l: i8| net.labels.iter().filter(|&&v| v == l).count();
    run.write_json(
        "network.json",
        &serde_json::json!({
            "species": species.len(),
            "positive_edges": count(1),
            "negative_edges": count(-1),
            "modules": groups.modules.iter().max().map_or(0, |g| g + 1),
            "modularity": groups.modularity,
            "summary": summary,
        }),
    )?;
    run.finish().map(|_| ())
}

#[derive(Clone, Debug, Serialize)]
struct EvaluateConfig {
    pred: String,
    truth: String,
    reference: Reference,
    eps_pos: f64,
    eps_neg: f64,
}

fn evaluate_cmd(pred: &Path, truth: &Path, reference: Reference, eps_pos: f64, eps_neg: f64, out: &Path, seed: u64) -> Result<()> {
    let mut run = Run::new("evaluate", seed, out)?;
    run.write_config(&EvaluateConfig {
        pred: pred.display().to_string(),
        truth: truth.display().to_string(),
        reference,
        eps_pos,
        eps_neg,
    })?;
    let (pred_species, strengths) = if pred.is_dir() {
        let b = read_bundle(pred, &mut run)?;
        let a = b.model.association_matrix();
        (b.species_ids, a)
    } else {
        datadir::read_square(pred, &mut run)?
    };
    let (truth_species, truth_values) = datadir::read_square(truth, &mut run)?;
    if pred_species != truth_species {
        return Err(Error::Dimension(format!(
            "prediction has {} species, truth has {} (or their order differs)",
            pred_species.len(),
            truth_species.len()
        )));
    }
    if let Some(v) = truth_values.iter().find(|v| ![-1.0, 0.0, 1.0].contains(*v)) {
        return Err(Error::Invalid(format!("truth value {v} is not one of -1, 0, 1")));
    }
    if reference != Reference::Labels && truth_values.iter().any(|&v| v < 0.0) {
        return Err(Error::Invalid("metaweb and realized references are 0/1 adjacencies".into()));
    }
    let labels = truth_values.mapv(|v| v as i8);
    let name = match reference {
        Reference::Labels => "labels",
        Reference::Metaweb => "metaweb",
        Reference::Realized => "realized",
    };
    let report = evaluate(&strengths, &labels, eps_pos, eps_neg, name)?;
    run.write_json("report.json", &report)?;
    let mut flat: BTreeMap<String, String> = BTreeMap::new();
    for (class, m) in &report.classes {
        flat.insert(format!("{class}.precision"), m.precision.to_string());
        flat.insert(format!("{class}.recall"), m.recall.to_string());
        flat.insert(format!("{class}.f1"), m.f1.to_string());
        flat.insert(format!("{class}.support"), m.support.to_string());
    }
    for (class, v) in &report.pr_auc {
        flat.insert(format!("{class}.pr_auc"), v.map_or(String::new(), |v| v.to_string()));
    }
    let b = &report.binary;
    for (k, v) in [
        ("accuracy", b.accuracy),
        ("precision", b.precision),
        ("sensitivity", b.sensitivity),
        ("specificity", b.specificity),
        ("f2", b.f2),
        ("tss", b.tss),
    ] {
        flat.insert(format!("binary.{k}"), v.to_string());
    }
    flat.insert("binary.auc".into(), b.auc.map_or(String::new(), |v| v.to_string()));
    run.write(
        "report.csv",
        &assocnet::io::csv_bytes(&["metric", "value"], flat.into_iter().map(|(k, v)| vec![k, v]))?,
    )?;
    run.finish().map(|_| ())
}
