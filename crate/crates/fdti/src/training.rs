//! Chronological splitting, the Adam loop with early stopping, and
//! checkpointing.
//!
//! Training supervises one-step flows: each sample is a `T`-minute window
//! plus the following minute's (inflow, outflow) targets, batched over the
//! whole graph. Validation selects parameters by one-step *volume* RMSE after
//! the conservative transition, since volume is the reported task metric.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::ftstg::{build_ftstg, EdgeWeighting, FeatureBuilder, Ftstg};
use crate::model::{
    backward, forward, init_params, transition_one_step, ModelConfig, ModelError, ModelParams,
};
use crate::simulator::Dataset;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset has {have} post-warm-up minutes; the chronological split needs at least {need}")]
    DatasetTooShort { have: u32, need: u32 },
    #[error("chronological split leaves the {which} split empty (post-warm-up length {m})")]
    EmptySplit { which: &'static str, m: u32 },
    #[error("the {which} split ({range:?}) is too short to hold any window of {window} minutes plus a target")]
    NoWindows {
        which: &'static str,
        range: Range<u32>,
        window: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(
        "training diverged at epoch {epoch} (window anchored at minute {anchor}): loss = {loss}"
    )]
    Diverged { epoch: usize, anchor: u32, loss: f64 },
}

/// Errors specific to the checkpoint file format.
#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported checkpoint version line: {found:?} (expected {expected:?})")]
    Version { found: String, expected: String },
    #[error("checkpoint parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("checkpoint shape mismatch for {name}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint was trained with {field} = {found}, but {expected} was requested")]
    ConfigMismatch {
        field: &'static str,
        expected: String,
        found: String,
    },
    #[error("invalid config echoed in checkpoint: {0}")]
    Config(String),
}

/// Disjoint, chronologically ordered minute ranges (warm-up excluded).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Range<u32>,
    pub val: Range<u32>,
    pub test: Range<u32>,
}

/// Splits the post-warm-up minutes 6:2:2 in chronological order: train gets
/// `floor(0.6 M)` minutes, validation `floor(0.2 M)`, test the remainder.
pub fn chronological_split(t_range: Range<u32>, warmup_min: u32) -> Result<Split, TrainError> {
    let total = t_range.end.saturating_sub(t_range.start);
    if warmup_min >= total {
        return Err(TrainError::DatasetTooShort {
            have: 0,
            need: 4 + warmup_min,
        });
    }
    let start = t_range.start + warmup_min;
    let m = t_range.end - start;
    let n_train = (0.6 * m as f64).floor() as u32;
    let n_val = (0.2 * m as f64).floor() as u32;
    let n_test = m - n_train - n_val;
    for (which, n) in [("train", n_train), ("val", n_val), ("test", n_test)] {
        if n == 0 {
            return Err(TrainError::EmptySplit { which, m });
        }
    }
    let train = start..start + n_train;
    let val = train.end..train.end + n_val;
    let test = val.end..t_range.end;
    Ok(Split { train, val, test })
}

/// Anchors `a` such that the input window `[a-T+1 ..= a]` and the target
/// minute `a+1` both lie inside `range`. Empty when the range is too short.
pub fn window_anchors(range: &Range<u32>, window: usize) -> Vec<u32> {
    let lo = range.start as i64 + window as i64 - 1;
    let hi = range.end as i64 - 2;
    (lo..=hi).map(|a| a as u32).collect()
}

/// The training configuration file: optimizer, model, and ablation switches.
/// Every key has a default, and unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub lr: f64,
    pub epochs: usize,
    pub patience: usize,
    /// Rollout discount; inference-time only (training is one-step).
    pub lambda: f64,
    pub hidden_dim: usize,
    pub layers: usize,
    pub window: usize,
    pub seed: u64,
    pub clamp: bool,
    pub residual: bool,
    /// Zero out signal/length/turn features, keeping only volume.
    pub no_roadnet_features: bool,
    /// Fix every layered-graph edge weight to 1 (static graph).
    pub no_dynamic_edges: bool,
    /// Use raw green seconds as edge weights instead of green/60.
    pub raw_green_weights: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            lr: 0.0005,
            epochs: 500,
            patience: 20,
            lambda: 0.9,
            hidden_dim: 256,
            layers: 4,
            window: 5,
            seed: 1,
            clamp: true,
            residual: true,
            no_roadnet_features: false,
            no_dynamic_edges: false,
            raw_green_weights: false,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TrainError::Config(format!(
                "lr must be positive and finite, got {}",
                self.lr
            )));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(TrainError::Config("patience must be at least 1".into()));
        }
        if self.no_dynamic_edges && self.raw_green_weights {
            return Err(TrainError::Config(
                "no_dynamic_edges and raw_green_weights are mutually exclusive edge weightings"
                    .into(),
            ));
        }
        self.model_config().validate()?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            hidden_dim: self.hidden_dim,
            n_layers: self.layers,
            window: self.window,
            discount: self.lambda,
            clamp_nonneg: self.clamp,
            use_residual: self.residual,
            seed: self.seed,
        }
    }

    pub fn edge_weighting(&self) -> EdgeWeighting {
        if self.no_dynamic_edges {
            EdgeWeighting::Ones
        } else if self.raw_green_weights {
            EdgeWeighting::RawGreen
        } else {
            EdgeWeighting::NormalizedGreen
        }
    }
}

/// Adam accumulators; shape-aligned with the parameters they update.
pub struct OptimizerState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        OptimizerState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut ModelParams, grads: &ModelParams, state: &mut OptimizerState) {
    state.step += 1;
    let b1 = state.beta1;
    let b2 = state.beta2;
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    let lr = state.lr;
    let eps = state.eps;
    let mut p = params.tensor_slices_mut();
    let g = grads.tensor_views();
    let mut m = state.m.tensor_slices_mut();
    let mut v = state.v.tensor_slices_mut();
    for ti in 0..p.len() {
        let gs = g[ti].data;
        for k in 0..p[ti].len() {
            let gk = gs[k];
            m[ti][k] = b1 * m[ti][k] + (1.0 - b1) * gk;
            v[ti][k] = b2 * v[ti][k] + (1.0 - b2) * gk * gk;
            let m_hat = m[ti][k] / bc1;
            let v_hat = v[ti][k] / bc2;
            p[ti][k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// One precomputed training/validation sample: the window's feature frames,
/// its layered graph, and the targets for the following minute.
struct SampleWindow {
    anchor: u32,
    frames: Vec<Array2<f64>>,
    graph_t: Ftstg,
    inflow: Array1<f64>,
    outflow: Array1<f64>,
    x_anchor: Array1<f64>,
    x_next: Array1<f64>,
}

fn build_windows(
    dataset: &Dataset,
    anchors: &[u32],
    window: usize,
    weighting: EdgeWeighting,
    fb: &FeatureBuilder<'_>,
) -> Result<Vec<SampleWindow>, TrainError> {
    let mut out = Vec::with_capacity(anchors.len());
    for &a in anchors {
        let t0 = a + 1 - window as u32;
        let graph_t = build_ftstg(&dataset.graph, &dataset.signal, t0, window, weighting)
            .map_err(ModelError::from)?;
        let frames: Vec<Array2<f64>> = (0..window)
            .map(|ft| {
                let m = t0 + ft as u32;
                fb.frame(
                    dataset.volumes.row(m as usize),
                    &fb.green_row(&dataset.signal, m),
                )
            })
            .collect();
        out.push(SampleWindow {
            anchor: a,
            frames,
            graph_t,
            inflow: dataset.inflow.row(a as usize).to_owned(),
            outflow: dataset.outflow.row(a as usize).to_owned(),
            x_anchor: dataset.volumes.row(a as usize).to_owned(),
            x_next: dataset.volumes.row(a as usize + 1).to_owned(),
        });
    }
    Ok(out)
}

/// Per-epoch record: mean train loss over windows, one-step validation volume
/// RMSE, and the best validation RMSE seen so far.
#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_rmse: f64,
    pub best_val_rmse: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Best-validation parameters.
    pub params: ModelParams,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_rmse: f64,
    pub split: Split,
}

/// Runs the full training loop on a dataset. Deterministic for a fixed
/// (dataset, config): windows are visited in chronological order, one Adam
/// update per window.
pub fn train(dataset: &Dataset, run: &RunConfig) -> Result<TrainOutcome, TrainError> {
    run.validate()?;
    let split = chronological_split(dataset.t_range(), dataset.warmup_min)?;
    let window = run.window;
    let train_anchors = window_anchors(&split.train, window);
    if train_anchors.is_empty() {
        return Err(TrainError::NoWindows {
            which: "train",
            range: split.train.clone(),
            window,
        });
    }
    let val_anchors = window_anchors(&split.val, window);
    if val_anchors.is_empty() {
        return Err(TrainError::NoWindows {
            which: "val",
            range: split.val.clone(),
            window,
        });
    }
    let model_cfg = run.model_config();
    let weighting = run.edge_weighting();
    let fb = FeatureBuilder::new(&dataset.graph, run.no_roadnet_features);
    let train_windows = build_windows(dataset, &train_anchors, window, weighting, &fb)?;
    let val_windows = build_windows(dataset, &val_anchors, window, weighting, &fb)?;

    let mut params = init_params(&model_cfg)?;
    let mut opt = OptimizerState::new(&params, run.lr);
    let mut best_params = params.clone();
    let mut best_val_rmse = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut epochs_since_best = 0usize;
    let mut history = Vec::new();

    for epoch in 0..run.epochs {
        let mut loss_sum = 0.0;
        for w in &train_windows {
            let (loss, grads) = backward(
                &w.frames,
                &w.graph_t,
                &params,
                &model_cfg,
                w.inflow.view(),
                w.outflow.view(),
            )?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    anchor: w.anchor,
                    loss,
                });
            }
            adam_step(&mut params, &grads, &mut opt);
            loss_sum += loss;
        }
        let train_loss = loss_sum / train_windows.len() as f64;

        let mut se = 0.0;
        let mut cells = 0usize;
        for w in &val_windows {
            let acts = forward(&w.frames, &w.graph_t, &params, &model_cfg)?;
            let pred = transition_one_step(
                w.x_anchor.view(),
                acts.inflow.view(),
                acts.outflow.view(),
                model_cfg.clamp_nonneg,
            );
            for (p, t) in pred.iter().zip(w.x_next.iter()) {
                se += (p - t) * (p - t);
                cells += 1;
            }
        }
        let val_rmse = (se / cells as f64).sqrt();
        if !val_rmse.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                anchor: val_windows[0].anchor,
                loss: val_rmse,
            });
        }
        if val_rmse < best_val_rmse {
            best_val_rmse = val_rmse;
            best_params = params.clone();
            best_epoch = epoch;
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
        }
        history.push(EpochStats {
            epoch,
            train_loss,
            val_rmse,
            best_val_rmse,
        });
        if epochs_since_best >= run.patience {
            break;
        }
    }

    Ok(TrainOutcome {
        params: best_params,
        history,
        best_epoch,
        best_val_rmse,
        split,
    })
}

const CHECKPOINT_VERSION: &str = "fdti-checkpoint v1";

/// A loaded checkpoint: the echoed training configuration and the parameters.
pub struct Checkpoint {
    pub run: RunConfig,
    pub params: ModelParams,
}

impl Checkpoint {
    /// Verifies that the checkpoint's architecture matches an expected model
    /// configuration (e.g. before predicting under explicit overrides).
    pub fn ensure_model_matches(&self, expected: &ModelConfig) -> Result<(), CheckpointError> {
        let own = self.run.model_config();
        let fields: [(&'static str, usize, usize); 3] = [
            ("hidden_dim", own.hidden_dim, expected.hidden_dim),
            ("layers", own.n_layers, expected.n_layers),
            ("window", own.window, expected.window),
        ];
        for (field, found, want) in fields {
            if found != want {
                return Err(CheckpointError::ConfigMismatch {
                    field,
                    expected: want.to_string(),
                    found: found.to_string(),
                });
            }
        }
        if own.use_residual != expected.use_residual {
            return Err(CheckpointError::ConfigMismatch {
                field: "residual",
                expected: expected.use_residual.to_string(),
                found: own.use_residual.to_string(),
            });
        }
        Ok(())
    }
}

/// Serializes parameters as a versioned line-oriented text document: a version
/// line, the training config echoed as one JSON line, then per tensor a
/// header line (`tensor <name> <dims...>`) and one line of 17-significant-
/// digit values, closed by an `end` line.
pub fn save_checkpoint(
    params: &ModelParams,
    run: &RunConfig,
    path: &Path,
) -> Result<(), CheckpointError> {
    let mut text = String::new();
    text.push_str(CHECKPOINT_VERSION);
    text.push('\n');
    let config_json = serde_json::to_string(run)
        .map_err(|e| CheckpointError::Config(e.to_string()))?;
    text.push_str("config ");
    text.push_str(&config_json);
    text.push('\n');
    for t in params.tensor_views() {
        write!(text, "tensor {}", t.name).expect("string write");
        for dim in &t.shape {
            write!(text, " {dim}").expect("string write");
        }
        text.push('\n');
        let mut first = true;
        for v in t.data {
            if !first {
                text.push(' ');
            }
            text.push_str(&crate::fmt_f64(*v));
            first = false;
        }
        text.push('\n');
    }
    text.push_str("end\n");
    std::fs::write(path, text)?;
    Ok(())
}

/// Parses a checkpoint file, validating the version, the echoed config, and
/// every tensor's name and shape against that config.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, version) = lines.next().ok_or_else(|| CheckpointError::Parse {
        line: 1,
        message: "empty file".into(),
    })?;
    if version.trim() != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version.trim().to_string(),
            expected: CHECKPOINT_VERSION.to_string(),
        });
    }
    let (_, config_line) = lines.next().ok_or_else(|| CheckpointError::Parse {
        line: 2,
        message: "missing config line".into(),
    })?;
    let config_json = config_line
        .strip_prefix("config ")
        .ok_or_else(|| CheckpointError::Parse {
            line: 2,
            message: "expected `config <json>`".into(),
        })?;
    let run: RunConfig = serde_json::from_str(config_json)
        .map_err(|e| CheckpointError::Config(e.to_string()))?;
    run.validate()
        .map_err(|e| CheckpointError::Config(e.to_string()))?;
    let model_cfg = run.model_config();
    let mut params = ModelParams::zeros(
        model_cfg.hidden_dim,
        model_cfg.n_layers,
        crate::ftstg::NODE_FEATURE_DIM,
    );
    // Expected tensor names and shapes in canonical order.
    let expected: Vec<(String, Vec<usize>)> = params
        .tensor_views()
        .iter()
        .map(|t| (t.name.to_string(), t.shape.clone()))
        .collect();
    let n_tensors = expected.len();
    let mut slices = params.tensor_slices_mut();
    for ti in 0..n_tensors {
        let (line_no, header) = lines.next().ok_or_else(|| CheckpointError::Parse {
            line: 2 + 2 * ti + 1,
            message: format!("truncated: missing tensor header for {}", expected[ti].0),
        })?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("tensor") {
            return Err(CheckpointError::Parse {
                line: line_no + 1,
                message: format!("expected `tensor ...`, found {header:?}"),
            });
        }
        let name = parts.next().unwrap_or_default().to_string();
        let found_shape: Vec<usize> = parts
            .map(|p| {
                p.parse::<usize>().map_err(|_| CheckpointError::Parse {
                    line: line_no + 1,
                    message: format!("bad dimension {p:?}"),
                })
            })
            .collect::<Result<_, _>>()?;
        if name != expected[ti].0 || found_shape != expected[ti].1 {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: expected[ti].1.clone(),
                found: found_shape,
            });
        }
        let (line_no, data_line) = lines.next().ok_or_else(|| CheckpointError::Parse {
            line: line_no + 2,
            message: format!("truncated: missing values for {}", expected[ti].0),
        })?;
        let dst = &mut slices[ti];
        let mut count = 0usize;
        for tok in data_line.split_whitespace() {
            if count >= dst.len() {
                return Err(CheckpointError::Parse {
                    line: line_no + 1,
                    message: format!(
                        "too many values for {} (expected {})",
                        expected[ti].0,
                        dst.len()
                    ),
                });
            }
            dst[count] = tok.parse::<f64>().map_err(|_| CheckpointError::Parse {
                line: line_no + 1,
                message: format!("bad value {tok:?}"),
            })?;
            count += 1;
        }
        if count != dst.len() {
            return Err(CheckpointError::Parse {
                line: line_no + 1,
                message: format!(
                    "truncated values for {}: got {count}, expected {}",
                    expected[ti].0,
                    dst.len()
                ),
            });
        }
    }
    match lines.next() {
        Some((_, l)) if l.trim() == "end" => {}
        Some((line_no, l)) => {
            return Err(CheckpointError::Parse {
                line: line_no + 1,
                message: format!("expected `end`, found {l:?}"),
            });
        }
        None => {
            return Err(CheckpointError::Parse {
                line: 0,
                message: "truncated: missing `end` line".into(),
            });
        }
    }
    drop(slices);
    Ok(Checkpoint { run, params })
}
