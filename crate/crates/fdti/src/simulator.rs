//! Deterministic mesoscopic queue simulator over synthetic signalized grids.
//!
//! Vehicles live in per-movement queues. Each second, every movement with a
//! green indication discharges up to `saturation_vps` vehicles from its
//! start-of-second queue; discharged vehicles split across the downstream
//! movements by turn ratios (or leave the network at boundary exits), and
//! boundary entries receive Poisson arrivals. Per-second events aggregate
//! into per-minute volume/inflow/outflow series.
//!
//! All vehicle quantities are held in binary fixed point (units of 2^-20
//! vehicle) so that conservation — `entered - exited - Σ queues = 0` and the
//! per-minute identity `volumes[t+1] = volumes[t] + inflow[t] - outflow[t]`
//! — holds *exactly*, and runs are bit-identical for a fixed seed. Fractional
//! vehicle counts (e.g. a 0.5 veh/s saturation discharge) stay exact because
//! every quantity is a dyadic rational well inside `f64` integer range.

use std::ops::Range;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::roadnet::{
    boundary_entries, parse_roadnet, parse_signal_plan, Direction, MovementGraph, MovementId,
    RoadnetError, SignalError, SignalPlan, TrafficMovement,
};

/// Fixed-point scale: one vehicle = `2^20` units.
const FP_SHIFT: u32 = 20;
const FP_ONE: i64 = 1 << FP_SHIFT;

fn fp_from_f64(x: f64) -> i64 {
    (x * FP_ONE as f64).round() as i64
}

fn fp_to_f64(v: i64) -> f64 {
    v as f64 / FP_ONE as f64
}

/// Turn-ratio mapping used to split discharged vehicles across downstream
/// movements by their turn direction.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct TurnRatios {
    pub left: f64,
    pub straight: f64,
    pub right: f64,
}

impl TurnRatios {
    pub fn get(&self, d: Direction) -> f64 {
        match d {
            Direction::Left => self.left,
            Direction::Straight => self.straight,
            Direction::Right => self.right,
        }
    }

    fn sum(&self) -> f64 {
        self.left + self.straight + self.right
    }
}

impl Default for TurnRatios {
    fn default() -> Self {
        TurnRatios {
            left: 0.25,
            straight: 0.5,
            right: 0.25,
        }
    }
}

/// Full configuration of one simulation run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Grid height in intersections.
    pub rows: u32,
    /// Grid width in intersections.
    pub cols: u32,
    /// Max discharge per movement per green second, vehicles/second.
    pub saturation_vps: f64,
    /// Mean arrival rate at each boundary-entry movement, vehicles/minute.
    pub demand_vpm: f64,
    pub turn_ratios: TurnRatios,
    /// Signal cycle length in seconds.
    pub cycle_s: u32,
    /// Fraction of the cycle given to the north/south movement group.
    pub split: f64,
    pub duration_min: u32,
    /// Leading minutes kept in the dataset but flagged as warm-up.
    pub warmup_min: u32,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            rows: 2,
            cols: 2,
            saturation_vps: 0.5,
            demand_vpm: 6.0,
            turn_ratios: TurnRatios::default(),
            cycle_s: 60,
            split: 0.5,
            duration_min: 60,
            warmup_min: 10,
            seed: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::Config(msg));
        if self.rows < 1 || self.cols < 1 {
            return bad(format!("grid must be at least 1x1, got {}x{}", self.rows, self.cols));
        }
        if !(self.saturation_vps > 0.0) || !self.saturation_vps.is_finite() {
            return bad(format!("saturation_vps must be positive, got {}", self.saturation_vps));
        }
        if self.demand_vpm < 0.0 || !self.demand_vpm.is_finite() {
            return bad(format!("demand_vpm must be non-negative, got {}", self.demand_vpm));
        }
        let r = &self.turn_ratios;
        if r.left < 0.0 || r.straight < 0.0 || r.right < 0.0 {
            return bad("turn_ratios must be non-negative".into());
        }
        if (r.sum() - 1.0).abs() > 1e-9 {
            return bad(format!("turn_ratios must sum to 1 within 1e-9, got {}", r.sum()));
        }
        if self.cycle_s < 1 {
            return bad("cycle_s must be a positive number of seconds".into());
        }
        if !(0.0..=1.0).contains(&self.split) {
            return bad(format!("split must lie in [0, 1], got {}", self.split));
        }
        if self.duration_min < 1 {
            return bad("duration_min must be positive".into());
        }
        if self.warmup_min >= self.duration_min {
            return bad(format!(
                "warmup_min ({}) must be smaller than duration_min ({})",
                self.warmup_min, self.duration_min
            ));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let cfg: SimConfig =
            toml::from_str(text).map_err(|e| SimError::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Roadnet(#[from] RoadnetError),
    #[error("{file}:{line}: {message}")]
    Format {
        file: String,
        line: usize,
        message: String,
    },
    #[error("{file}: {message}")]
    Coverage { file: String, message: String },
}

// ---------------------------------------------------------------------------
// Grid geometry
// ---------------------------------------------------------------------------

/// Approach indices in movement-id order: the side of the intersection the
/// vehicle enters from.
const APPROACH_N: usize = 0;

/// Travel heading `(d_row, d_col)` of a vehicle entering from `approach`.
fn heading(approach: usize) -> (i64, i64) {
    match approach {
        0 => (1, 0),   // from north, traveling south
        1 => (0, -1),  // from east, traveling west
        2 => (-1, 0),  // from south, traveling north
        3 => (0, 1),   // from west, traveling east
        _ => unreachable!("approach index"),
    }
}

/// Heading after a turn.
fn turn_heading(h: (i64, i64), turn: usize) -> (i64, i64) {
    match turn {
        0 => (-h.1, h.0), // left
        1 => h,           // straight
        2 => (h.1, -h.0), // right
        _ => unreachable!("turn index"),
    }
}

/// Entry approach at the destination intersection for a given travel heading.
fn entry_approach(h: (i64, i64)) -> usize {
    match h {
        (1, 0) => 0,
        (0, -1) => 1,
        (-1, 0) => 2,
        (0, 1) => 3,
        _ => unreachable!("heading"),
    }
}

fn turn_direction(turn: usize) -> Direction {
    match turn {
        0 => Direction::Left,
        1 => Direction::Straight,
        2 => Direction::Right,
        _ => unreachable!("turn index"),
    }
}

/// Approach lane lengths: north/south approaches are 300 m, east/west 240 m,
/// giving the normalized-length feature some variation.
fn approach_length_m(approach: usize) -> f64 {
    if approach % 2 == 0 {
        300.0
    } else {
        240.0
    }
}

/// A grid network plus the per-second signal schedule that generated its
/// per-minute plan.
#[derive(Debug, Clone)]
pub struct GridNetwork {
    pub graph: MovementGraph,
    pub signal: SignalPlan,
    /// Per movement: cycle offset of its intersection, in seconds.
    offset_s: Vec<u32>,
    /// Per movement: true if it belongs to the north/south phase group.
    ns_phase: Vec<bool>,
    cycle_s: u32,
    /// Green seconds per cycle for the north/south group.
    green_ns_s: u32,
}

impl GridNetwork {
    /// Whether movement `i` has a green indication at absolute second `s`.
    pub fn is_green(&self, s: u64, i: usize) -> bool {
        let pos = ((s + self.offset_s[i] as u64) % self.cycle_s as u64) as u32;
        if self.ns_phase[i] {
            pos < self.green_ns_s
        } else {
            pos >= self.green_ns_s
        }
    }
}

/// Builds the rows x cols grid: every intersection has four approaches
/// (N, E, S, W), each carrying left/straight/right movements; downstream
/// wiring follows turn geometry, and movements leaving the grid are boundary
/// exits. The signal plan counts each movement's green seconds per minute
/// under a two-phase controller (north/south group vs east/west group) with
/// a half-cycle offset on checkerboard-alternating intersections.
pub fn build_grid_network(config: &SimConfig) -> Result<GridNetwork, SimError> {
    config.validate()?;
    let (rows, cols) = (config.rows as i64, config.cols as i64);
    let n = (rows * cols * 12) as usize;
    let inter = |r: i64, c: i64| (r * cols + c) as usize;
    let movement_id =
        |i: usize, approach: usize, turn: usize| ((i * 4 + approach) * 3 + turn) as MovementId;

    let mut movements = Vec::with_capacity(n);
    let mut downstream: Vec<Vec<MovementId>> = vec![Vec::new(); n];
    let mut offset_s = vec![0u32; n];
    let mut ns_phase = vec![false; n];
    let half_cycle = config.cycle_s / 2;

    for r in 0..rows {
        for c in 0..cols {
            let i = inter(r, c);
            for approach in 0..4 {
                for turn in 0..3 {
                    let id = movement_id(i, approach, turn);
                    movements.push(TrafficMovement {
                        id,
                        direction: turn_direction(turn),
                        length_m: approach_length_m(approach),
                    });
                    offset_s[id as usize] = if (r + c) % 2 == 1 { half_cycle } else { 0 };
                    ns_phase[id as usize] = approach % 2 == APPROACH_N % 2;
                    let h = turn_heading(heading(approach), turn);
                    let (dr, dc) = (r + h.0, c + h.1);
                    if dr < 0 || dr >= rows || dc < 0 || dc >= cols {
                        continue; // leaves the grid: boundary exit
                    }
                    let dest = inter(dr, dc);
                    let dest_approach = entry_approach(h);
                    downstream[id as usize] = (0..3)
                        .map(|t| movement_id(dest, dest_approach, t))
                        .collect();
                }
            }
        }
    }
    let graph = MovementGraph::new(movements, downstream)?;

    // Per-minute green seconds, counted second by second from the schedule so
    // the plan agrees exactly with the gating used during simulation.
    let minutes = config.duration_min as usize;
    let mut green = Array2::<f64>::zeros((minutes, n));
    let net_wo_signal = GridNetwork {
        graph,
        signal: SignalPlan::new(0..1, Array2::zeros((1, n.max(1))))?,
        offset_s,
        ns_phase,
        cycle_s: config.cycle_s,
        green_ns_s: (config.split * config.cycle_s as f64).round() as u32,
    };
    for t in 0..minutes {
        for i in 0..n {
            let mut count = 0u32;
            for s in 0..60u64 {
                if net_wo_signal.is_green(t as u64 * 60 + s, i) {
                    count += 1;
                }
            }
            green[[t, i]] = count as f64;
        }
    }
    let signal = SignalPlan::new(0..config.duration_min, green)?;
    Ok(GridNetwork {
        signal,
        ..net_wo_signal
    })
}

// ---------------------------------------------------------------------------
// Simulation state and stepping
// ---------------------------------------------------------------------------

/// Mutable simulation state: queues plus the conservation ledger.
#[derive(Debug, Clone)]
pub struct SimState {
    queue_fp: Vec<i64>,
    entered_fp: i64,
    exited_fp: i64,
    pub clock_s: u64,
}

impl SimState {
    fn new(n: usize) -> Self {
        SimState {
            queue_fp: vec![0; n],
            entered_fp: 0,
            exited_fp: 0,
            clock_s: 0,
        }
    }

    pub fn queue(&self, i: usize) -> f64 {
        fp_to_f64(self.queue_fp[i])
    }

    pub fn entered(&self) -> f64 {
        fp_to_f64(self.entered_fp)
    }

    pub fn exited(&self) -> f64 {
        fp_to_f64(self.exited_fp)
    }

    pub fn total_queued(&self) -> f64 {
        fp_to_f64(self.queue_fp.iter().sum())
    }

    /// `entered - exited - Σ queues`, which is exactly 0 for a simulation
    /// started from an empty network.
    pub fn ledger_residual(&self) -> f64 {
        fp_to_f64(self.entered_fp - self.exited_fp - self.queue_fp.iter().sum::<i64>())
    }
}

/// Discharge rule for one movement over one second: up to the saturation cap
/// when green, nothing when red, never more than is queued.
fn discharge_fp(queue_fp: i64, sat_fp: i64, green: bool) -> i64 {
    if green {
        queue_fp.min(sat_fp)
    } else {
        0
    }
}

/// Splits a discharged amount across receivers by cumulative-rounded shares,
/// so the parts always sum exactly to `total_fp`.
///
/// `cum_fracs` are non-decreasing cumulative fractions ending at exactly 1.0.
fn split_discharge(total_fp: i64, cum_fracs: &[f64], out: &mut Vec<i64>) {
    out.clear();
    let total_f = total_fp as f64;
    let mut prev = 0i64;
    for &f in cum_fracs {
        let cum = (total_f * f).round() as i64;
        out.push(cum - prev);
        prev = cum;
    }
}

struct EntryStream {
    movement: usize,
    rng: ChaCha8Rng,
}

/// A stepping simulation over a grid network.
pub struct Simulation<'a> {
    net: &'a GridNetwork,
    state: SimState,
    sat_fp: i64,
    /// Per movement: receiver ids and cumulative turn-ratio fractions.
    split_targets: Vec<Vec<usize>>,
    split_cum: Vec<Vec<f64>>,
    entries: Vec<EntryStream>,
    arrivals: Option<Poisson<f64>>,
    /// Per-minute flow accumulators, reset by `take_minute_flows`.
    in_acc_fp: Vec<i64>,
    out_acc_fp: Vec<i64>,
    scratch_discharge: Vec<i64>,
    scratch_parts: Vec<i64>,
}

impl<'a> Simulation<'a> {
    pub fn new(net: &'a GridNetwork, config: &SimConfig) -> Result<Self, SimError> {
        config.validate()?;
        let n = net.graph.n();
        let mut split_targets = Vec::with_capacity(n);
        let mut split_cum = Vec::with_capacity(n);
        for i in 0..n as MovementId {
            let down = net.graph.downstream(i)?;
            let weights: Vec<f64> = down
                .iter()
                .map(|&d| {
                    config
                        .turn_ratios
                        .get(net.graph.movement(d).expect("valid id").direction)
                })
                .collect();
            let total: f64 = weights.iter().sum();
            let mut cum = Vec::with_capacity(down.len());
            let mut acc = 0.0;
            for (k, &w) in weights.iter().enumerate() {
                // A downstream set whose directions all have ratio 0 still
                // must conserve vehicles: fall back to an even split.
                acc += if total > 0.0 { w / total } else { 1.0 / down.len() as f64 };
                cum.push(if k + 1 == down.len() { 1.0 } else { acc });
            }
            split_targets.push(down.iter().map(|&d| d as usize).collect());
            split_cum.push(cum);
        }
        // One independent, movement-keyed arrival stream per boundary entry,
        // so streams never shift when the network grows.
        let entries = boundary_entries(&net.graph)
            .into_iter()
            .map(|e| {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(e as u64);
                EntryStream {
                    movement: e as usize,
                    rng,
                }
            })
            .collect();
        let rate_per_s = config.demand_vpm / 60.0;
        let arrivals = if rate_per_s > 0.0 {
            Some(Poisson::new(rate_per_s).expect("positive finite rate"))
        } else {
            None
        };
        Ok(Simulation {
            net,
            state: SimState::new(n),
            sat_fp: fp_from_f64(config.saturation_vps),
            split_targets,
            split_cum,
            entries,
            arrivals,
            in_acc_fp: vec![0; n],
            out_acc_fp: vec![0; n],
            scratch_discharge: vec![0; n],
            scratch_parts: Vec::new(),
        })
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    /// Adds vehicles to a queue from outside the network (counted as entered),
    /// e.g. to set up a specific scenario.
    pub fn inject(&mut self, movement: usize, vehicles: f64) {
        let fp = fp_from_f64(vehicles);
        assert!(fp >= 0, "cannot inject negative vehicles");
        self.state.queue_fp[movement] += fp;
        self.state.entered_fp += fp;
        self.in_acc_fp[movement] += fp;
    }

    /// Advances the simulation by one second: simultaneous gated discharges
    /// computed from start-of-second queues, turn-ratio routing, then Poisson
    /// arrivals at boundary entries. All in fixed point; exactly conservative.
    pub fn step(&mut self) {
        let clock = self.state.clock_s;
        // Phase 1: discharges from the start-of-second snapshot.
        for i in 0..self.state.queue_fp.len() {
            self.scratch_discharge[i] = discharge_fp(
                self.state.queue_fp[i],
                self.sat_fp,
                self.net.is_green(clock, i),
            );
        }
        // Phase 2: apply discharges and route them downstream.
        for i in 0..self.state.queue_fp.len() {
            let d = self.scratch_discharge[i];
            if d == 0 {
                continue;
            }
            self.state.queue_fp[i] -= d;
            self.out_acc_fp[i] += d;
            if self.split_targets[i].is_empty() {
                self.state.exited_fp += d;
                continue;
            }
            split_discharge(d, &self.split_cum[i], &mut self.scratch_parts);
            for (k, &tgt) in self.split_targets[i].iter().enumerate() {
                let part = self.scratch_parts[k];
                self.state.queue_fp[tgt] += part;
                self.in_acc_fp[tgt] += part;
            }
        }
        // Phase 3: external arrivals.
        if let Some(poisson) = &self.arrivals {
            for e in &mut self.entries {
                let k = poisson.sample(&mut e.rng) as i64;
                if k > 0 {
                    let fp = k << FP_SHIFT;
                    self.state.queue_fp[e.movement] += fp;
                    self.in_acc_fp[e.movement] += fp;
                    self.state.entered_fp += fp;
                }
            }
        }
        self.state.clock_s += 1;
        debug_assert_eq!(self.state.ledger_residual(), 0.0);
    }

    /// Drains the per-minute inflow/outflow accumulators.
    fn take_minute_flows(&mut self) -> (Vec<f64>, Vec<f64>) {
        let inflow = self.in_acc_fp.iter().map(|&v| fp_to_f64(v)).collect();
        let outflow = self.out_acc_fp.iter().map(|&v| fp_to_f64(v)).collect();
        self.in_acc_fp.iter_mut().for_each(|v| *v = 0);
        self.out_acc_fp.iter_mut().for_each(|v| *v = 0);
        (inflow, outflow)
    }
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// Aligned per-minute series over a movement graph: volumes sampled at minute
/// boundaries, and the inflow/outflow totals of each minute.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub graph: MovementGraph,
    pub signal: SignalPlan,
    /// `duration x N`; `volumes[t]` is the queue state at the start of minute `t`.
    pub volumes: Array2<f64>,
    /// `duration x N`; `inflow[t]` sums arrivals during minute `t` (between
    /// volume snapshots `t` and `t+1`).
    pub inflow: Array2<f64>,
    pub outflow: Array2<f64>,
    /// Leading minutes flagged as warm-up (retained, not evaluated).
    pub warmup_min: u32,
}

impl Dataset {
    /// Minute range covered, starting at 0.
    pub fn t_range(&self) -> Range<u32> {
        0..self.volumes.nrows() as u32
    }

    pub fn n_minutes(&self) -> usize {
        self.volumes.nrows()
    }

    pub fn n_movements(&self) -> usize {
        self.graph.n()
    }

    /// Largest per-cell violation of `volumes[t+1] = volumes[t] + inflow[t]
    /// - outflow[t]`. Zero for simulator output.
    pub fn max_conservation_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for t in 0..self.n_minutes().saturating_sub(1) {
            for i in 0..self.n_movements() {
                let r = self.volumes[[t + 1, i]]
                    - (self.volumes[[t, i]] + self.inflow[[t, i]] - self.outflow[[t, i]]);
                worst = worst.max(r.abs());
            }
        }
        worst
    }
}

/// Runs a full simulation: `duration_min * 60` one-second steps from an empty
/// network, recording volumes at minute boundaries and per-minute flows.
pub fn run(config: &SimConfig) -> Result<Dataset, SimError> {
    config.validate()?;
    let net = build_grid_network(config)?;
    let n = net.graph.n();
    let minutes = config.duration_min as usize;
    let mut sim = Simulation::new(&net, config)?;
    let mut volumes = Array2::<f64>::zeros((minutes, n));
    let mut inflow = Array2::<f64>::zeros((minutes, n));
    let mut outflow = Array2::<f64>::zeros((minutes, n));
    for t in 0..minutes {
        for i in 0..n {
            volumes[[t, i]] = sim.state().queue(i);
        }
        for _ in 0..60 {
            sim.step();
        }
        let (fin, fout) = sim.take_minute_flows();
        for i in 0..n {
            inflow[[t, i]] = fin[i];
            outflow[[t, i]] = fout[i];
        }
    }
    Ok(Dataset {
        graph: net.graph,
        signal: net.signal,
        volumes,
        inflow,
        outflow,
        warmup_min: config.warmup_min,
    })
}

// ---------------------------------------------------------------------------
// Dataset files
// ---------------------------------------------------------------------------

const ROADNET_FILE: &str = "roadnet.json";
const SIGNAL_FILE: &str = "signal.csv";
const VOLUMES_FILE: &str = "volumes.csv";
const FLOWS_FILE: &str = "flows.csv";
const META_FILE: &str = "meta.toml";

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    warmup_min: u32,
    duration_min: u32,
    movements: u32,
}

/// Writes `roadnet.json`, `signal.csv`, `volumes.csv`, `flows.csv`, and
/// `meta.toml` (which carries the warm-up flag) into `dir`.
pub fn export_dataset(d: &Dataset, dir: &Path) -> Result<(), SimError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(ROADNET_FILE), d.graph.to_json())?;
    if d.n_minutes() > 0 {
        std::fs::write(dir.join(SIGNAL_FILE), d.signal.to_csv())?;
    } else {
        std::fs::write(dir.join(SIGNAL_FILE), "t_min,node_id,green_s\n")?;
    }
    let mut vol = String::from("t_min,node_id,volume\n");
    let mut flows = String::from("t_min,node_id,inflow,outflow\n");
    for t in 0..d.n_minutes() {
        for i in 0..d.n_movements() {
            vol.push_str(&format!("{t},{i},{}\n", crate::fmt_f64(d.volumes[[t, i]])));
            flows.push_str(&format!(
                "{t},{i},{},{}\n",
                crate::fmt_f64(d.inflow[[t, i]]),
                crate::fmt_f64(d.outflow[[t, i]])
            ));
        }
    }
    std::fs::write(dir.join(VOLUMES_FILE), vol)?;
    std::fs::write(dir.join(FLOWS_FILE), flows)?;
    let meta = DatasetMeta {
        warmup_min: d.warmup_min,
        duration_min: d.n_minutes() as u32,
        movements: d.n_movements() as u32,
    };
    std::fs::write(
        dir.join(META_FILE),
        toml::to_string(&meta).expect("meta serialization"),
    )?;
    Ok(())
}

/// Parses a `t_min,node_id,<values...>` CSV into dense per-minute arrays,
/// requiring exactly one row per (minute, movement) cell.
fn parse_cell_csv(
    text: &str,
    file: &str,
    header: &str,
    n: usize,
    n_values: usize,
) -> Result<Vec<Array2<f64>>, SimError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == header => {}
        other => {
            return Err(SimError::Format {
                file: file.into(),
                line: 1,
                message: format!(
                    "expected header {header:?}, found {:?}",
                    other.map(|(_, l)| l).unwrap_or("")
                ),
            })
        }
    }
    let mut rows: Vec<(u32, u32, Vec<f64>)> = Vec::new();
    let mut max_t = 0u32;
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 2 + n_values {
            return Err(SimError::Format {
                file: file.into(),
                line: line_no,
                message: format!("expected {} fields, found {}", 2 + n_values, parts.len()),
            });
        }
        let err = |message: String| SimError::Format {
            file: file.into(),
            line: line_no,
            message,
        };
        let t: u32 = parts[0]
            .trim()
            .parse()
            .map_err(|e| err(format!("bad t_min: {e}")))?;
        let id: u32 = parts[1]
            .trim()
            .parse()
            .map_err(|e| err(format!("bad node_id: {e}")))?;
        if id as usize >= n {
            return Err(err(format!("node_id {id} out of range (n={n})")));
        }
        let mut vals = Vec::with_capacity(n_values);
        for p in &parts[2..] {
            vals.push(
                p.trim()
                    .parse::<f64>()
                    .map_err(|e| err(format!("bad value: {e}")))?,
            );
        }
        max_t = max_t.max(t);
        rows.push((t, id, vals));
    }
    let minutes = if rows.is_empty() { 0 } else { max_t as usize + 1 };
    let mut arrays = vec![Array2::<f64>::zeros((minutes, n)); n_values];
    let mut filled = vec![false; minutes * n];
    for (t, id, vals) in rows {
        let cell = t as usize * n + id as usize;
        if filled[cell] {
            return Err(SimError::Coverage {
                file: file.into(),
                message: format!("duplicate row for minute {t}, movement {id}"),
            });
        }
        filled[cell] = true;
        for (v, arr) in vals.into_iter().zip(arrays.iter_mut()) {
            arr[[t as usize, id as usize]] = v;
        }
    }
    if let Some(pos) = filled.iter().position(|f| !f) {
        return Err(SimError::Coverage {
            file: file.into(),
            message: format!(
                "missing row for minute {}, movement {}",
                pos / n,
                pos % n
            ),
        });
    }
    Ok(arrays)
}

/// Reads a dataset directory written by [`export_dataset`] (bit-exact
/// round-trip). `meta.toml` is optional; without it warm-up defaults to 0.
pub fn import_dataset(dir: &Path) -> Result<Dataset, SimError> {
    let graph = parse_roadnet(&std::fs::read_to_string(dir.join(ROADNET_FILE))?)?;
    let n = graph.n();
    let vol_text = std::fs::read_to_string(dir.join(VOLUMES_FILE))?;
    let volumes = parse_cell_csv(&vol_text, VOLUMES_FILE, "t_min,node_id,volume", n, 1)?
        .pop()
        .expect("one array");
    let flow_text = std::fs::read_to_string(dir.join(FLOWS_FILE))?;
    let mut flow_arrays = parse_cell_csv(
        &flow_text,
        FLOWS_FILE,
        "t_min,node_id,inflow,outflow",
        n,
        2,
    )?;
    let outflow = flow_arrays.pop().expect("two arrays");
    let inflow = flow_arrays.pop().expect("two arrays");
    if inflow.nrows() != volumes.nrows() {
        return Err(SimError::Coverage {
            file: FLOWS_FILE.into(),
            message: format!(
                "flows cover {} minutes but volumes cover {}",
                inflow.nrows(),
                volumes.nrows()
            ),
        });
    }
    let minutes = volumes.nrows() as u32;
    let signal_text = std::fs::read_to_string(dir.join(SIGNAL_FILE))?;
    let signal = if minutes > 0 {
        parse_signal_plan(&signal_text, &graph, 0..minutes)?
    } else {
        // Placeholder for an empty dataset; never consulted.
        SignalPlan::new(0..1, Array2::zeros((1, n)))?
    };
    let warmup_min = match std::fs::read_to_string(dir.join(META_FILE)) {
        Ok(text) => {
            let meta: DatasetMeta = toml::from_str(&text).map_err(|e| SimError::Coverage {
                file: META_FILE.into(),
                message: format!("meta parse: {e}"),
            })?;
            meta.warmup_min
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => 0,
        Err(e) => return Err(e.into()),
    };
    Ok(Dataset {
        graph,
        signal,
        volumes,
        inflow,
        outflow,
        warmup_min,
    })
}

/// Parses a standalone `volumes.csv` (header `t_min,node_id,volume`) into a
/// dense minutes-by-movements array, inferring the movement count from the
/// largest node id and requiring full rectangular coverage.
pub fn parse_volumes_csv(text: &str) -> Result<Array2<f64>, SimError> {
    let mut max_id: Option<u32> = None;
    for line in text.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        if let Some(id) = line
            .split(',')
            .nth(1)
            .and_then(|f| f.trim().parse::<u32>().ok())
        {
            max_id = Some(max_id.map_or(id, |m| m.max(id)));
        }
    }
    let n = max_id.map_or(0, |m| m as usize + 1);
    if n == 0 {
        return Err(SimError::Coverage {
            file: VOLUMES_FILE.into(),
            message: "no volume rows".into(),
        });
    }
    Ok(
        parse_cell_csv(text, VOLUMES_FILE, "t_min,node_id,volume", n, 1)?
            .pop()
            .expect("one array"),
    )
}

/// Independent conservation audit over an exported flows file: recomputes
/// total inflow at entries minus total outflow at exits from the raw text and
/// compares with the in-system count implied by the volumes file.
pub fn audit_exported_ledger(dir: &Path) -> Result<f64, SimError> {
    let d = import_dataset(dir)?;
    let entries = boundary_entries(&d.graph);
    let exits: Vec<MovementId> = (0..d.graph.n() as MovementId)
        .filter(|&i| d.graph.downstream(i).map(|v| v.is_empty()).unwrap_or(false))
        .collect();
    let mut entered = 0.0;
    let mut exited = 0.0;
    for t in 0..d.n_minutes() {
        for &e in &entries {
            entered += d.inflow[[t, e as usize]];
        }
        for &x in &exits {
            exited += d.outflow[[t, x as usize]];
        }
    }
    // Final in-system count = last volume snapshot advanced by the last
    // minute's flows.
    let last = d.n_minutes() - 1;
    let mut in_system = 0.0;
    for i in 0..d.n_movements() {
        in_system += d.volumes[[last, i]] + d.inflow[[last, i]] - d.outflow[[last, i]];
    }
    Ok(entered - exited - in_system)
}

/// Volumes of one minute as a view.
pub fn minute_volumes(d: &Dataset, t: usize) -> ArrayView1<'_, f64> {
    d.volumes.row(t)
}
