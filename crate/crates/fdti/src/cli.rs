//! Command-line front end: one binary, subcommand per pipeline stage,
//! reproducibility manifest next to every artifact.
//!
//! Exit codes: 0 success, 2 usage (argument parsing), 3 input validation,
//! 4 runtime divergence (non-finite training loss or predictions).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::evaluation::{self, EvalError, PredRow, Predictions};
use crate::ftstg::{build_ftstg, EdgeWeighting, FeatureBuilder, FtstgError};
use crate::manifest::ManifestBuilder;
use crate::model::{rollout, ModelError, RolloutContext};
use crate::roadnet::parse_roadnet;
use crate::simulator::{self, import_dataset, parse_volumes_csv, SimConfig, SimError};
use crate::training::{
    chronological_split, load_checkpoint, save_checkpoint, train, window_anchors, CheckpointError,
    RunConfig, TrainError,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Diverged(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) | CliError::Io(_) => 3,
            CliError::Diverged(_) => 4,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::Diverged(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<FtstgError> for CliError {
    fn from(e: FtstgError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<crate::roadnet::RoadnetError> for CliError {
    fn from(e: crate::roadnet::RoadnetError) -> Self {
        CliError::Validation(e.to_string())
    }
}

/// Fine-grained traffic volume inference pipeline.
#[derive(Debug, Parser)]
#[command(name = "fdti", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic signalized-grid dataset.
    Simulate {
        /// Simulation config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset directory and write a checkpoint.
    Train {
        /// Dataset directory (from `simulate`).
        #[arg(long)]
        data: PathBuf,
        /// Training config (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Roll a trained model forward and write multi-horizon predictions.
    Predict {
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint from `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated horizons in minutes, e.g. `1,3,5`.
        #[arg(long, default_value = "1,3,5")]
        horizons: String,
        /// Override the rollout discount (e.g. `1.0` disables discounting).
        #[arg(long)]
        lambda: Option<f64>,
        /// Predictions CSV output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a predictions file against ground-truth volumes.
    Evaluate {
        /// Predictions CSV (`t_min,node_id,horizon,volume`).
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth volumes CSV (`t_min,node_id,volume`).
        #[arg(long)]
        truth: PathBuf,
        /// Comma-separated horizons to score.
        #[arg(long, default_value = "1,3,5")]
        horizons: String,
        /// Metrics CSV output path; prints to stdout only when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Spatio-temporal smoothness of a volumes series over a movement graph.
    Stmad {
        /// Volumes CSV (`t_min,node_id,volume`).
        #[arg(long)]
        data: PathBuf,
        /// Movement graph JSON.
        #[arg(long)]
        graph: PathBuf,
        /// Comma-separated neighborhood radii.
        #[arg(long, default_value = "1,2,3")]
        k: String,
        /// Window length in minutes.
        #[arg(long, default_value_t = 5)]
        window: usize,
        /// Use downstream edges only for neighborhoods.
        #[arg(long)]
        directed: bool,
        /// Report CSV output path; prints to stdout only when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Layered-graph inspection utilities.
    Ftstg {
        #[command(subcommand)]
        command: FtstgCommand,
    },
}

#[derive(Debug, Subcommand)]
pub enum FtstgCommand {
    /// Dump the layered edge list as `t,src,dst,weight`.
    Dump {
        /// Dataset directory (graph + signal plan).
        #[arg(long)]
        data: PathBuf,
        /// Start minute and frame count.
        #[arg(long, num_args = 2, value_names = ["T0", "T"])]
        window: Vec<u32>,
        /// Fix every edge weight to 1 (static graph).
        #[arg(long, conflicts_with = "raw_green_weights")]
        no_dynamic_edges: bool,
        /// Use raw green seconds instead of green/60.
        #[arg(long)]
        raw_green_weights: bool,
        /// Edge-list CSV output path; prints to stdout only when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// CLI overrides for training config values; flags win over the config file
/// and the manifest records the merged result.
#[derive(Debug, Args, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Rollout discount recorded for inference.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Allow negative predicted volumes (no clamping).
    #[arg(long)]
    pub no_clamp: bool,
    /// Disable residual connections.
    #[arg(long)]
    pub no_residual: bool,
    /// Ablation: zero signal/length/turn features, keeping only volume.
    #[arg(long)]
    pub no_roadnet_features: bool,
    /// Ablation: fix every layered-graph edge weight to 1.
    #[arg(long, conflicts_with = "raw_green_weights")]
    pub no_dynamic_edges: bool,
    /// Ablation: raw green seconds as edge weights.
    #[arg(long)]
    pub raw_green_weights: bool,
}

impl TrainOverrides {
    fn apply(&self, mut run: RunConfig) -> RunConfig {
        if let Some(v) = self.lr {
            run.lr = v;
        }
        if let Some(v) = self.epochs {
            run.epochs = v;
        }
        if let Some(v) = self.patience {
            run.patience = v;
        }
        if let Some(v) = self.lambda {
            run.lambda = v;
        }
        if let Some(v) = self.hidden_dim {
            run.hidden_dim = v;
        }
        if let Some(v) = self.layers {
            run.layers = v;
        }
        if let Some(v) = self.window {
            run.window = v;
        }
        if let Some(v) = self.seed {
            run.seed = v;
        }
        if self.no_clamp {
            run.clamp = false;
        }
        if self.no_residual {
            run.residual = false;
        }
        if self.no_roadnet_features {
            run.no_roadnet_features = true;
        }
        if self.no_dynamic_edges {
            run.no_dynamic_edges = true;
        }
        if self.raw_green_weights {
            run.raw_green_weights = true;
        }
        run
    }
}

/// Parses a comma-separated list of positive integers, e.g. horizons or
/// neighborhood radii.
fn parse_u32_list(text: &str, what: &str) -> Result<Vec<u32>, CliError> {
    let mut out = Vec::new();
    for part in text.split(',') {
        let v: u32 = part.trim().parse().map_err(|e| {
            CliError::Validation(format!("bad {what} entry {part:?}: {e}"))
        })?;
        if v == 0 {
            return Err(CliError::Validation(format!("{what} must be at least 1")));
        }
        out.push(v);
    }
    out.sort_unstable();
    out.dedup();
    if out.is_empty() {
        return Err(CliError::Validation(format!("empty {what} list")));
    }
    Ok(out)
}

fn read_to_string(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))
}

/// Hashes the dataset directory's files into the manifest (meta is optional).
fn hash_dataset_inputs(b: &mut ManifestBuilder, dir: &Path) -> Result<(), CliError> {
    for name in ["roadnet.json", "signal.csv", "volumes.csv", "flows.csv"] {
        b.input(&dir.join(name))
            .map_err(|e| CliError::Validation(format!("dataset file {name}: {e}")))?;
    }
    let meta = dir.join("meta.toml");
    if meta.exists() {
        b.input(&meta)?;
    }
    Ok(())
}

pub fn run(cli: Cli, argv: Vec<String>) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { config, out } => cmd_simulate(&config, &out, argv),
        Command::Train {
            data,
            config,
            out,
            overrides,
        } => cmd_train(&data, config.as_deref(), &out, &overrides, argv),
        Command::Predict {
            data,
            checkpoint,
            horizons,
            lambda,
            out,
        } => cmd_predict(&data, &checkpoint, &horizons, lambda, &out, argv),
        Command::Evaluate {
            pred,
            truth,
            horizons,
            out,
        } => cmd_evaluate(&pred, &truth, &horizons, out.as_deref(), argv),
        Command::Stmad {
            data,
            graph,
            k,
            window,
            directed,
            out,
        } => cmd_stmad(&data, &graph, &k, window, directed, out.as_deref(), argv),
        Command::Ftstg {
            command:
                FtstgCommand::Dump {
                    data,
                    window,
                    no_dynamic_edges,
                    raw_green_weights,
                    out,
                },
        } => cmd_ftstg_dump(
            &data,
            &window,
            no_dynamic_edges,
            raw_green_weights,
            out.as_deref(),
            argv,
        ),
    }
}

fn cmd_simulate(config_path: &Path, out: &Path, argv: Vec<String>) -> Result<(), CliError> {
    let text = read_to_string(config_path)?;
    let cfg: SimConfig = toml::from_str(&text)
        .map_err(|e| CliError::Validation(format!("simulation config: {e}")))?;
    let dataset = simulator::run(&cfg)?;
    simulator::export_dataset(&dataset, out)?;

    let mut m = ManifestBuilder::new("simulate", argv);
    m.config(&cfg).seed("simulator", cfg.seed);
    m.input(config_path)?;
    for name in ["roadnet.json", "signal.csv", "volumes.csv", "flows.csv", "meta.toml"] {
        m.output(&out.join(name));
    }
    m.write(&out.join("manifest.json"))?;
    println!(
        "simulated {} movements x {} minutes (warm-up {}) -> {}",
        dataset.n_movements(),
        dataset.n_minutes(),
        dataset.warmup_min,
        out.display()
    );
    Ok(())
}

fn cmd_train(
    data: &Path,
    config_path: Option<&Path>,
    out: &Path,
    overrides: &TrainOverrides,
    argv: Vec<String>,
) -> Result<(), CliError> {
    let base = match config_path {
        Some(p) => RunConfig::from_toml(&read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    let run_cfg = overrides.apply(base);
    run_cfg.validate()?;

    let dataset = import_dataset(data)?;
    let outcome = train(&dataset, &run_cfg)?;
    save_checkpoint(&outcome.params, &run_cfg, out)
        .map_err(|e| CliError::Validation(format!("checkpoint write: {e}")))?;

    let history_path = PathBuf::from(format!("{}.history.csv", out.display()));
    let mut hist = String::from("epoch,train_loss,val_rmse,best_val_rmse\n");
    for e in &outcome.history {
        hist.push_str(&format!(
            "{},{},{},{}\n",
            e.epoch,
            crate::fmt_f64(e.train_loss),
            crate::fmt_f64(e.val_rmse),
            crate::fmt_f64(e.best_val_rmse)
        ));
    }
    std::fs::write(&history_path, hist)?;

    let mut m = ManifestBuilder::new("train", argv);
    m.config(&run_cfg)
        .seed("init", run_cfg.seed)
        .parameter_count(outcome.params.count());
    if let Some(p) = config_path {
        m.input(p)?;
    }
    hash_dataset_inputs(&mut m, data)?;
    m.output(out).output(&history_path);
    m.write(&PathBuf::from(format!("{}.manifest.json", out.display())))?;

    println!(
        "trained {} epochs; best validation RMSE {:.6} at epoch {}; {} parameters -> {}",
        outcome.history.len(),
        outcome.best_val_rmse,
        outcome.best_epoch,
        outcome.params.count(),
        out.display()
    );
    Ok(())
}

fn cmd_predict(
    data: &Path,
    checkpoint: &Path,
    horizons_text: &str,
    lambda: Option<f64>,
    out: &Path,
    argv: Vec<String>,
) -> Result<(), CliError> {
    let horizons = parse_u32_list(horizons_text, "horizon")?;
    let max_h = *horizons.last().expect("nonempty") as usize;
    let ckpt = load_checkpoint(checkpoint)?;
    let mut model_cfg = ckpt.run.model_config();
    if let Some(l) = lambda {
        model_cfg.discount = l;
    }
    model_cfg.validate()?;
    ckpt.ensure_model_matches(&model_cfg)?;

    let dataset = import_dataset(data)?;
    let split = chronological_split(dataset.t_range(), dataset.warmup_min)?;
    let features = FeatureBuilder::new(&dataset.graph, ckpt.run.no_roadnet_features);
    let ctx = RolloutContext {
        features: &features,
        signal: &dataset.signal,
        volumes: dataset.volumes.view(),
        weighting: ckpt.run.edge_weighting(),
    };

    // Anchors whose input window and deepest target both sit inside the
    // held-out test range.
    let anchors: Vec<u32> = window_anchors(&split.test, model_cfg.window)
        .into_iter()
        .filter(|&a| a + (max_h as u32) < split.test.end)
        .collect();
    if anchors.is_empty() {
        return Err(CliError::Validation(format!(
            "test range {:?} cannot host any window of {} with horizon {max_h}",
            split.test, model_cfg.window
        )));
    }

    let mut table = Predictions::default();
    for &a in &anchors {
        let pred = rollout(&ctx, a as usize, max_h, &ckpt.params, &model_cfg)?;
        if pred.iter().any(|v| !v.is_finite()) {
            return Err(CliError::Diverged(format!(
                "non-finite prediction at anchor minute {a}"
            )));
        }
        for &q in &horizons {
            let row = pred.row(q as usize - 1);
            for (i, &v) in row.iter().enumerate() {
                table.rows.push(PredRow {
                    t_min: a,
                    node_id: i as u32,
                    horizon: q,
                    volume: v,
                });
            }
        }
    }
    table.sort();
    std::fs::write(out, table.to_csv())?;

    let mut m = ManifestBuilder::new("predict", argv);
    m.config(&serde_json::json!({
        "run": ckpt.run,
        "lambda_override": lambda,
        "horizons": horizons,
        "anchors": { "start": anchors.first(), "end": anchors.last() },
    }))
    .seed("init", ckpt.run.seed)
    .parameter_count(ckpt.params.count());
    m.input(checkpoint)?;
    hash_dataset_inputs(&mut m, data)?;
    m.output(out);
    m.write(&PathBuf::from(format!("{}.manifest.json", out.display())))?;

    println!(
        "predicted {} anchors x {} horizons x {} movements -> {}",
        anchors.len(),
        horizons.len(),
        dataset.n_movements(),
        out.display()
    );
    Ok(())
}

fn cmd_evaluate(
    pred_path: &Path,
    truth_path: &Path,
    horizons_text: &str,
    out: Option<&Path>,
    argv: Vec<String>,
) -> Result<(), CliError> {
    let horizons = parse_u32_list(horizons_text, "horizon")?;
    let predictions = Predictions::parse(&read_to_string(pred_path)?)?;
    let truth = parse_volumes_csv(&read_to_string(truth_path)?)?;
    let report = evaluation::evaluate(&predictions, truth.view(), &horizons)?;

    for h in &report.horizons {
        println!(
            "horizon {:>2}: RMSE {:.6}  MAPE {:.3}% over {} cells ({} zero-target cells excluded)",
            h.horizon, h.rmse, h.mape_percent, h.n_cells, h.n_excluded
        );
    }
    if let Some(out) = out {
        std::fs::write(out, report.to_csv())?;
        let mut m = ManifestBuilder::new("evaluate", argv);
        m.config(&serde_json::json!({ "horizons": horizons }));
        m.input(pred_path)?;
        m.input(truth_path)?;
        m.output(out);
        m.write(&PathBuf::from(format!("{}.manifest.json", out.display())))?;
    }
    Ok(())
}

fn cmd_stmad(
    data: &Path,
    graph_path: &Path,
    k_text: &str,
    window: usize,
    directed: bool,
    out: Option<&Path>,
    argv: Vec<String>,
) -> Result<(), CliError> {
    let ks = parse_u32_list(k_text, "k")?;
    let volumes = parse_volumes_csv(&read_to_string(data)?)?;
    let graph = parse_roadnet(&read_to_string(graph_path)?)?;
    if volumes.ncols() > graph.n() {
        return Err(CliError::Validation(format!(
            "volumes cover {} movements but the graph has {}",
            volumes.ncols(),
            graph.n()
        )));
    }

    let mut csv = String::from("k,stmad,window,n_subgraphs,skipped_pairs\n");
    for &k in &ks {
        let e = evaluation::stmad(volumes.view(), &graph, k as usize, window, directed)?;
        println!(
            "k={}: STMAD {:.6} over {} windows of {} minutes ({} zero-norm pairs skipped)",
            e.k, e.stmad, e.n_subgraphs, e.window, e.skipped_pairs
        );
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            e.k,
            crate::fmt_f64(e.stmad),
            e.window,
            e.n_subgraphs,
            e.skipped_pairs
        ));
    }
    if let Some(out) = out {
        std::fs::write(out, csv)?;
        let mut m = ManifestBuilder::new("stmad", argv);
        m.config(&serde_json::json!({ "k": ks, "window": window, "directed": directed }));
        m.input(data)?;
        m.input(graph_path)?;
        m.output(out);
        m.write(&PathBuf::from(format!("{}.manifest.json", out.display())))?;
    }
    Ok(())
}

fn cmd_ftstg_dump(
    data: &Path,
    window: &[u32],
    no_dynamic_edges: bool,
    raw_green_weights: bool,
    out: Option<&Path>,
    argv: Vec<String>,
) -> Result<(), CliError> {
    let [t0, t_len] = window else {
        return Err(CliError::Validation(
            "--window takes exactly two values: start minute and frame count".into(),
        ));
    };
    let weighting = if no_dynamic_edges {
        EdgeWeighting::Ones
    } else if raw_green_weights {
        EdgeWeighting::RawGreen
    } else {
        EdgeWeighting::NormalizedGreen
    };
    let dataset = import_dataset(data)?;
    let g = build_ftstg(
        &dataset.graph,
        &dataset.signal,
        *t0,
        *t_len as usize,
        weighting,
    )?;

    let mut text = String::from("t,src,dst,weight\n");
    for (transition, src, dst, w) in g.edges() {
        // `t` is the absolute minute of the source frame.
        text.push_str(&format!(
            "{},{},{},{}\n",
            *t0 + transition as u32,
            src,
            dst,
            crate::fmt_f64(w)
        ));
    }
    match out {
        Some(out) => {
            std::fs::write(out, text)?;
            let mut m = ManifestBuilder::new("ftstg-dump", argv);
            m.config(&serde_json::json!({
                "t0": t0, "frames": t_len,
                "no_dynamic_edges": no_dynamic_edges,
                "raw_green_weights": raw_green_weights,
            }));
            hash_dataset_inputs(&mut m, data)?;
            m.output(out);
            m.write(&PathBuf::from(format!("{}.manifest.json", out.display())))?;
        }
        None => print!("{text}"),
    }
    Ok(())
}
