//! Time-layered movement graph with signal-dependent edge weights, and the
//! per-frame node feature encoding consumed by the model.
//!
//! For a window of `T` consecutive minutes the layered graph replicates all
//! `N` movements once per minute ("frame"). Edges connect *adjacent frames
//! only*: frame `ft` node `j` feeds frame `ft+1` node `i` whenever `j -> i`
//! is a stored road edge or `j == i` (vehicles staying queued). There are no
//! intra-frame edges. Each edge carries a mobility weight derived from the
//! source movement's effective green time during the source minute.

use std::ops::Range;

use ndarray::{Array2, ArrayView1};

use crate::roadnet::{MovementGraph, MovementId, SignalPlan};

/// How transition-edge weights are derived. `NormalizedGreen` is the default
/// pipeline behavior; the other two exist for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EdgeWeighting {
    /// `(green_s / 60) / frame_gap` — green fraction discounted by temporal
    /// distance (adjacent frames have gap 1).
    #[default]
    NormalizedGreen,
    /// `green_s / frame_gap` without the per-minute normalization.
    RawGreen,
    /// Constant `1.0`, ignoring the signal plan entirely.
    Ones,
}

#[derive(Debug, thiserror::Error)]
pub enum FtstgError {
    #[error("frame gap must be >= 1, got {0}")]
    NonCausalGap(u32),
    #[error("window must span at least 2 frames, got {0}")]
    WindowTooShort(usize),
    #[error("signal plan covers {covered:?} but the window needs minutes {needed:?}")]
    SignalCoverage {
        covered: Range<u32>,
        needed: Range<u32>,
    },
    #[error("signal plan has {plan} movements but the graph has {graph}")]
    SizeMismatch { plan: usize, graph: usize },
}

/// Mobility weight of an edge whose source frame lies `frame_gap` minutes
/// before the target frame, given the source movement's green seconds.
///
/// Weight = `(green_s / 60) / frame_gap`. A zero gap would make the edge
/// non-causal and is rejected.
pub fn edge_weight(green_s: f64, frame_gap: u32) -> Result<f64, FtstgError> {
    if frame_gap == 0 {
        return Err(FtstgError::NonCausalGap(0));
    }
    Ok(green_s / 60.0 / frame_gap as f64)
}

fn weight_for(mode: EdgeWeighting, green_s: f64, frame_gap: u32) -> Result<f64, FtstgError> {
    if frame_gap == 0 {
        return Err(FtstgError::NonCausalGap(0));
    }
    Ok(match mode {
        EdgeWeighting::NormalizedGreen => green_s / 60.0 / frame_gap as f64,
        EdgeWeighting::RawGreen => green_s / frame_gap as f64,
        EdgeWeighting::Ones => 1.0,
    })
}

/// One frame-to-frame transition stored compressed by target node: for each
/// target `i`, the sources are the stored upstream of `i` plus `i` itself,
/// in ascending id order.
#[derive(Debug, Clone)]
struct Transition {
    /// CSR offsets, length `N + 1`.
    offsets: Vec<usize>,
    sources: Vec<MovementId>,
    weights: Vec<f64>,
}

/// The layered graph for one window of consecutive minutes.
#[derive(Debug, Clone)]
pub struct Ftstg {
    n_nodes: usize,
    t_start: u32,
    transitions: Vec<Transition>,
}

impl Ftstg {
    /// Number of frames `T` in the window.
    pub fn n_frames(&self) -> usize {
        self.transitions.len() + 1
    }

    /// Number of movements `N` per frame.
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// Total vertex count `N * T`.
    pub fn n_vertices(&self) -> usize {
        self.n_nodes * self.n_frames()
    }

    /// Total edge count across all transitions.
    pub fn n_edges(&self) -> usize {
        self.transitions.iter().map(|t| t.sources.len()).sum()
    }

    /// First minute covered by the window.
    pub fn t_start(&self) -> u32 {
        self.t_start
    }

    /// Incoming edges of target node `i` on the transition from frame
    /// `frame_gap_origin` (0-based: transition `k` connects frame `k` to
    /// frame `k+1`). Returns parallel `(sources, weights)` slices sorted by
    /// source id.
    pub fn in_edges(&self, transition: usize, target: MovementId) -> (&[MovementId], &[f64]) {
        let tr = &self.transitions[transition];
        let lo = tr.offsets[target as usize];
        let hi = tr.offsets[target as usize + 1];
        (&tr.sources[lo..hi], &tr.weights[lo..hi])
    }

    /// All edges as `(transition, source, target, weight)` in deterministic
    /// `(transition, target, source)` order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, MovementId, MovementId, f64)> + '_ {
        self.transitions.iter().enumerate().flat_map(move |(k, tr)| {
            (0..self.n_nodes).flat_map(move |i| {
                let lo = tr.offsets[i];
                let hi = tr.offsets[i + 1];
                (lo..hi).map(move |e| (k, tr.sources[e], i as MovementId, tr.weights[e]))
            })
        })
    }
}

/// Builds the layered graph for the window of `t_len` minutes starting at
/// `t_start`, weighting edges by `mode`.
///
/// The signal plan must cover the source minutes `t_start .. t_start+t_len-1`
/// (the final frame only receives, so its minute's greens are not needed for
/// edges — but coverage of the full window is required since callers also
/// need final-frame node features).
pub fn build_ftstg(
    graph: &MovementGraph,
    signal: &SignalPlan,
    t_start: u32,
    t_len: usize,
    mode: EdgeWeighting,
) -> Result<Ftstg, FtstgError> {
    if t_len < 2 {
        return Err(FtstgError::WindowTooShort(t_len));
    }
    if signal.n_movements() != graph.n() {
        return Err(FtstgError::SizeMismatch {
            plan: signal.n_movements(),
            graph: graph.n(),
        });
    }
    let needed = t_start..t_start + t_len as u32;
    if !signal.covers(needed.clone()) {
        return Err(FtstgError::SignalCoverage {
            covered: signal.t_range(),
            needed,
        });
    }
    let n = graph.n();
    let mut transitions = Vec::with_capacity(t_len - 1);
    for k in 0..t_len - 1 {
        let src_minute = t_start + k as u32;
        let mut offsets = Vec::with_capacity(n + 1);
        let mut sources = Vec::new();
        let mut weights = Vec::new();
        offsets.push(0);
        for i in 0..n as MovementId {
            // Upstream of i, with the self-transition merged in id order.
            let ups = graph.upstream(i).expect("id in range");
            let mut inserted_self = false;
            for &j in ups {
                if !inserted_self && i < j {
                    sources.push(i);
                    weights.push(weight_for(mode, signal.green_s(src_minute, i), 1)?);
                    inserted_self = true;
                }
                sources.push(j);
                weights.push(weight_for(mode, signal.green_s(src_minute, j), 1)?);
            }
            if !inserted_self {
                sources.push(i);
                weights.push(weight_for(mode, signal.green_s(src_minute, i), 1)?);
            }
            offsets.push(sources.len());
        }
        transitions.push(Transition {
            offsets,
            sources,
            weights,
        });
    }
    Ok(Ftstg {
        n_nodes: n,
        t_start,
        transitions,
    })
}

/// Per-node input feature width: volume, green seconds, lane length, and the
/// 3-way turn-direction one-hot.
pub const NODE_FEATURE_DIM: usize = 6;

/// Encodes one node's features for one frame.
///
/// Layout: `[volume, green_s / 60, length_m / max_length_m, dir_L, dir_S,
/// dir_R]`. `max_length_m` must be positive.
pub fn node_features(
    volume: f64,
    green_s: f64,
    length_m: f64,
    max_length_m: f64,
    direction: crate::roadnet::Direction,
) -> [f64; NODE_FEATURE_DIM] {
    debug_assert!(max_length_m > 0.0);
    let one_hot = direction.one_hot();
    [
        volume,
        green_s / 60.0,
        length_m / max_length_m,
        one_hot[0],
        one_hot[1],
        one_hot[2],
    ]
}

/// Builds `N x NODE_FEATURE_DIM` frame matrices for a fixed graph.
#[derive(Debug, Clone)]
pub struct FeatureBuilder<'a> {
    graph: &'a MovementGraph,
    max_length_m: f64,
    /// Ablation switch: zero out everything except the volume column.
    zero_roadnet: bool,
}

impl<'a> FeatureBuilder<'a> {
    pub fn new(graph: &'a MovementGraph, zero_roadnet: bool) -> Self {
        let max_length_m = if graph.max_length_m() > 0.0 {
            graph.max_length_m()
        } else {
            1.0
        };
        FeatureBuilder {
            graph,
            max_length_m,
            zero_roadnet,
        }
    }

    pub fn graph(&self) -> &'a MovementGraph {
        self.graph
    }

    /// Feature matrix for one frame given that minute's volumes and greens.
    pub fn frame(&self, volumes: ArrayView1<'_, f64>, green_row: &[f64]) -> Array2<f64> {
        let n = self.graph.n();
        assert_eq!(volumes.len(), n);
        assert_eq!(green_row.len(), n);
        let mut out = Array2::<f64>::zeros((n, NODE_FEATURE_DIM));
        for (idx, m) in self.graph.movements().iter().enumerate() {
            let f = node_features(
                volumes[idx],
                green_row[idx],
                m.length_m,
                self.max_length_m,
                m.direction,
            );
            for (c, v) in f.into_iter().enumerate() {
                out[[idx, c]] = v;
            }
        }
        if self.zero_roadnet {
            for r in 0..n {
                for c in 1..NODE_FEATURE_DIM {
                    out[[r, c]] = 0.0;
                }
            }
        }
        out
    }

    /// Green-seconds row for `t_min` pulled from a signal plan.
    pub fn green_row(&self, signal: &SignalPlan, t_min: u32) -> Vec<f64> {
        (0..self.graph.n() as MovementId)
            .map(|i| signal.green_s(t_min, i))
            .collect()
    }
}
