//! Static road-network description: traffic movements, their downstream
//! connectivity, and the per-minute signal timing plan.
//!
//! A *traffic movement* is the unit of spatial modeling: one approach-and-turn
//! pair at an intersection (e.g. "northbound left"). Movement `j` is
//! *upstream* of movement `i` when vehicles discharged from `j` join the queue
//! of `i`, written as a directed edge `j -> i`.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Movement identifier. Ids in a graph are contiguous `0..N`.
pub type MovementId = u32;

/// Turn direction of a movement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "L")]
    Left,
    #[serde(rename = "S")]
    Straight,
    #[serde(rename = "R")]
    Right,
}

impl Direction {
    /// One-hot encoding in fixed order `[L, S, R]`.
    pub fn one_hot(self) -> [f64; 3] {
        match self {
            Direction::Left => [1.0, 0.0, 0.0],
            Direction::Straight => [0.0, 1.0, 0.0],
            Direction::Right => [0.0, 0.0, 1.0],
        }
    }

    /// Single-letter code used in the JSON format.
    pub fn code(self) -> &'static str {
        match self {
            Direction::Left => "L",
            Direction::Straight => "S",
            Direction::Right => "R",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// One approach-and-turn movement at an intersection.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficMovement {
    pub id: MovementId,
    pub direction: Direction,
    /// Length of the approach lane segment in meters. Strictly positive.
    pub length_m: f64,
}

/// Errors raised while building or parsing a movement graph.
#[derive(Debug, thiserror::Error)]
pub enum RoadnetError {
    #[error("malformed roadnet JSON: {0}")]
    Malformed(String),
    #[error("duplicate movement id {0}")]
    DuplicateId(MovementId),
    #[error("movement ids must be contiguous 0..{expected}, found id {found}")]
    NonContiguousIds { expected: usize, found: MovementId },
    #[error("edge references unknown movement id {0}")]
    UnknownId(MovementId),
    #[error("movement {id} has non-positive length {length_m}")]
    NonPositiveLength { id: MovementId, length_m: f64 },
    #[error("movement {0} lists itself as downstream (self-loops are implicit, not stored)")]
    SelfLoop(MovementId),
    #[error("duplicate edge {src} -> {dst}")]
    DuplicateEdge { src: MovementId, dst: MovementId },
    #[error("movement id {0} out of range")]
    IdOutOfRange(MovementId),
}

/// Directed graph of traffic movements.
///
/// Stores the static (`j -> i`) connectivity; self-transitions (vehicles that
/// stay queued) are implicit everywhere downstream and never stored as edges.
#[derive(Debug, Clone)]
pub struct MovementGraph {
    movements: Vec<TrafficMovement>,
    /// `downstream[i]` = sorted ids receiving vehicles discharged from `i`.
    downstream: Vec<Vec<MovementId>>,
    /// `upstream[i]` = sorted ids whose discharge can join queue `i`.
    upstream: Vec<Vec<MovementId>>,
    n_edges: usize,
    max_length_m: f64,
}

impl MovementGraph {
    /// Builds a graph from movements plus downstream adjacency, validating
    /// id contiguity, positive lengths, edge endpoints, and edge uniqueness.
    pub fn new(
        movements: Vec<TrafficMovement>,
        downstream: Vec<Vec<MovementId>>,
    ) -> Result<Self, RoadnetError> {
        let n = movements.len();
        assert_eq!(
            downstream.len(),
            n,
            "downstream adjacency must have one entry per movement"
        );
        let mut seen = vec![false; n];
        for m in &movements {
            let idx = m.id as usize;
            if idx >= n {
                return Err(RoadnetError::NonContiguousIds {
                    expected: n,
                    found: m.id,
                });
            }
            if seen[idx] {
                return Err(RoadnetError::DuplicateId(m.id));
            }
            seen[idx] = true;
            if !(m.length_m > 0.0) || !m.length_m.is_finite() {
                return Err(RoadnetError::NonPositiveLength {
                    id: m.id,
                    length_m: m.length_m,
                });
            }
        }
        let mut by_id: Vec<TrafficMovement> = movements;
        by_id.sort_by_key(|m| m.id);

        let mut down_sorted: Vec<Vec<MovementId>> = vec![Vec::new(); n];
        let mut upstream: Vec<Vec<MovementId>> = vec![Vec::new(); n];
        let mut n_edges = 0usize;
        for (src_idx, outs) in downstream.iter().enumerate() {
            let src = src_idx as MovementId;
            let mut sorted = outs.clone();
            sorted.sort_unstable();
            for pair in sorted.windows(2) {
                if pair[0] == pair[1] {
                    return Err(RoadnetError::DuplicateEdge {
                        src,
                        dst: pair[0],
                    });
                }
            }
            for &dst in &sorted {
                if dst as usize >= n {
                    return Err(RoadnetError::UnknownId(dst));
                }
                if dst == src {
                    return Err(RoadnetError::SelfLoop(src));
                }
                upstream[dst as usize].push(src);
                n_edges += 1;
            }
            down_sorted[src_idx] = sorted;
        }
        for ups in &mut upstream {
            ups.sort_unstable();
        }
        let max_length_m = by_id
            .iter()
            .map(|m| m.length_m)
            .fold(0.0_f64, f64::max);
        Ok(MovementGraph {
            movements: by_id,
            downstream: down_sorted,
            upstream,
            n_edges,
            max_length_m,
        })
    }

    /// Number of movements `N`.
    pub fn n(&self) -> usize {
        self.movements.len()
    }

    /// Total number of stored directed edges.
    pub fn n_edges(&self) -> usize {
        self.n_edges
    }

    /// Longest lane length in the graph (0.0 for an empty graph).
    pub fn max_length_m(&self) -> f64 {
        self.max_length_m
    }

    pub fn movement(&self, id: MovementId) -> Result<&TrafficMovement, RoadnetError> {
        self.movements
            .get(id as usize)
            .ok_or(RoadnetError::IdOutOfRange(id))
    }

    pub fn movements(&self) -> &[TrafficMovement] {
        &self.movements
    }

    /// Sorted downstream ids of `id`.
    pub fn downstream(&self, id: MovementId) -> Result<&[MovementId], RoadnetError> {
        self.downstream
            .get(id as usize)
            .map(Vec::as_slice)
            .ok_or(RoadnetError::IdOutOfRange(id))
    }

    /// Sorted upstream ids of `id`: every `j` with a stored edge `j -> id`.
    pub fn upstream(&self, id: MovementId) -> Result<&[MovementId], RoadnetError> {
        self.upstream
            .get(id as usize)
            .map(Vec::as_slice)
            .ok_or(RoadnetError::IdOutOfRange(id))
    }

    /// All stored edges as `(src, dst)`, sorted by `(src, dst)`.
    pub fn edges(&self) -> impl Iterator<Item = (MovementId, MovementId)> + '_ {
        self.downstream
            .iter()
            .enumerate()
            .flat_map(|(src, outs)| outs.iter().map(move |&dst| (src as MovementId, dst)))
    }

    /// Serializes to the canonical JSON document (movements sorted by id).
    pub fn to_json(&self) -> String {
        let doc = RoadnetDoc {
            movements: self
                .movements
                .iter()
                .map(|m| MovementEntry {
                    id: m.id,
                    direction: m.direction,
                    length_m: m.length_m,
                    downstream: self.downstream[m.id as usize].clone(),
                })
                .collect(),
        };
        let mut out = serde_json::to_string_pretty(&doc).expect("roadnet serialization");
        out.push('\n');
        out
    }
}

/// On-disk JSON document shape.
#[derive(Serialize, Deserialize)]
struct RoadnetDoc {
    movements: Vec<MovementEntry>,
}

#[derive(Serialize, Deserialize)]
struct MovementEntry {
    id: MovementId,
    direction: Direction,
    length_m: f64,
    downstream: Vec<MovementId>,
}

/// Parses a movement graph from its JSON document.
///
/// Validates: well-formed JSON, unique contiguous ids, positive lengths,
/// downstream references to existing ids, no self-loops, no duplicate edges.
pub fn parse_roadnet(text: &str) -> Result<MovementGraph, RoadnetError> {
    let doc: RoadnetDoc =
        serde_json::from_str(text).map_err(|e| RoadnetError::Malformed(e.to_string()))?;
    let n = doc.movements.len();
    let mut movements = Vec::with_capacity(n);
    let mut downstream = vec![Vec::new(); n];
    // Two passes: ids must be validated before downstream lists are keyed on them.
    let mut seen = vec![false; n];
    for e in &doc.movements {
        let idx = e.id as usize;
        if idx >= n {
            return Err(RoadnetError::NonContiguousIds {
                expected: n,
                found: e.id,
            });
        }
        if seen[idx] {
            return Err(RoadnetError::DuplicateId(e.id));
        }
        seen[idx] = true;
    }
    for e in doc.movements {
        movements.push(TrafficMovement {
            id: e.id,
            direction: e.direction,
            length_m: e.length_m,
        });
        downstream[e.id as usize] = e.downstream;
    }
    MovementGraph::new(movements, downstream)
}

/// Errors raised while building or parsing a signal plan.
#[derive(Debug, thiserror::Error)]
pub enum SignalError {
    #[error("malformed signal CSV at line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("green time {value} for movement {id} at minute {t_min} outside [0, 60]")]
    GreenOutOfRange {
        t_min: u32,
        id: MovementId,
        value: f64,
    },
    #[error("signal row references unknown movement id {0}")]
    UnknownId(MovementId),
    #[error("duplicate signal row for minute {t_min}, movement {id}")]
    DuplicateEntry { t_min: u32, id: MovementId },
    #[error("missing signal row for minute {t_min}, movement {id}")]
    MissingEntry { t_min: u32, id: MovementId },
    #[error("signal plan time range {start}..{end} is empty or reversed")]
    EmptyRange { start: u32, end: u32 },
}

/// Per-minute effective green seconds for every movement.
///
/// Covers a contiguous minute range `[t_start, t_end)`; every `(minute,
/// movement)` cell holds one value in `[0, 60]`.
#[derive(Debug, Clone)]
pub struct SignalPlan {
    t_start: u32,
    /// Row-major `(t_end - t_start) x N`.
    green: Array2<f64>,
}

impl SignalPlan {
    pub fn new(t_range: Range<u32>, green: Array2<f64>) -> Result<Self, SignalError> {
        if t_range.end <= t_range.start {
            return Err(SignalError::EmptyRange {
                start: t_range.start,
                end: t_range.end,
            });
        }
        assert_eq!(
            green.nrows(),
            (t_range.end - t_range.start) as usize,
            "green matrix rows must match the minute range"
        );
        for ((row, col), &v) in green.indexed_iter() {
            if !(0.0..=60.0).contains(&v) || !v.is_finite() {
                return Err(SignalError::GreenOutOfRange {
                    t_min: t_range.start + row as u32,
                    id: col as MovementId,
                    value: v,
                });
            }
        }
        Ok(SignalPlan {
            t_start: t_range.start,
            green,
        })
    }

    /// Covered minute range `[start, end)`.
    pub fn t_range(&self) -> Range<u32> {
        self.t_start..self.t_start + self.green.nrows() as u32
    }

    pub fn n_movements(&self) -> usize {
        self.green.ncols()
    }

    /// Effective green seconds of movement `id` during minute `t_min`.
    ///
    /// Panics if `(t_min, id)` lies outside the declared coverage; callers
    /// validate coverage up front.
    pub fn green_s(&self, t_min: u32, id: MovementId) -> f64 {
        assert!(
            self.t_range().contains(&t_min),
            "minute {t_min} outside signal plan range {:?}",
            self.t_range()
        );
        self.green[[(t_min - self.t_start) as usize, id as usize]]
    }

    /// Whether every minute of `range` is covered.
    pub fn covers(&self, range: Range<u32>) -> bool {
        range.is_empty()
            || (range.start >= self.t_start && range.end <= self.t_range().end)
    }

    /// Serializes to CSV with header `t_min,node_id,green_s`, rows sorted by
    /// `(t_min, node_id)`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t_min,node_id,green_s\n");
        for (row, minute) in self.t_range().enumerate() {
            for id in 0..self.green.ncols() {
                out.push_str(&format!(
                    "{minute},{id},{}\n",
                    crate::fmt_f64(self.green[[row, id]])
                ));
            }
        }
        out
    }
}

/// Parses a signal plan CSV and checks it fully covers `graph` over `t_range`.
pub fn parse_signal_plan(
    text: &str,
    graph: &MovementGraph,
    t_range: Range<u32>,
) -> Result<SignalPlan, SignalError> {
    if t_range.end <= t_range.start {
        return Err(SignalError::EmptyRange {
            start: t_range.start,
            end: t_range.end,
        });
    }
    let n = graph.n();
    let minutes = (t_range.end - t_range.start) as usize;
    let mut green = Array2::<f64>::zeros((minutes, n));
    let mut filled = vec![false; minutes * n];
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "t_min,node_id,green_s" => {}
        other => {
            return Err(SignalError::Malformed {
                line: 1,
                message: format!(
                    "expected header 't_min,node_id,green_s', found {:?}",
                    other.map(|(_, l)| l).unwrap_or("")
                ),
            })
        }
    }
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let (t_s, id_s, g_s) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), Some(c), None) => (a, b, c),
            _ => {
                return Err(SignalError::Malformed {
                    line: line_no,
                    message: "expected 3 comma-separated fields".into(),
                })
            }
        };
        let t_min: u32 = t_s.trim().parse().map_err(|e| SignalError::Malformed {
            line: line_no,
            message: format!("bad t_min: {e}"),
        })?;
        let id: MovementId = id_s.trim().parse().map_err(|e| SignalError::Malformed {
            line: line_no,
            message: format!("bad node_id: {e}"),
        })?;
        let g: f64 = g_s.trim().parse().map_err(|e| SignalError::Malformed {
            line: line_no,
            message: format!("bad green_s: {e}"),
        })?;
        if id as usize >= n {
            return Err(SignalError::UnknownId(id));
        }
        if !t_range.contains(&t_min) {
            // Rows outside the requested range are ignored so a long plan can
            // serve a shorter query window.
            continue;
        }
        if !(0.0..=60.0).contains(&g) || !g.is_finite() {
            return Err(SignalError::GreenOutOfRange {
                t_min,
                id,
                value: g,
            });
        }
        let row = (t_min - t_range.start) as usize;
        let cell = row * n + id as usize;
        if filled[cell] {
            return Err(SignalError::DuplicateEntry { t_min, id });
        }
        filled[cell] = true;
        green[[row, id as usize]] = g;
    }
    if let Some(pos) = filled.iter().position(|&f| !f) {
        return Err(SignalError::MissingEntry {
            t_min: t_range.start + (pos / n) as u32,
            id: (pos % n) as MovementId,
        });
    }
    SignalPlan::new(t_range, green)
}

/// Stable set of boundary-entry movements (empty upstream) of a graph.
pub fn boundary_entries(graph: &MovementGraph) -> Vec<MovementId> {
    (0..graph.n() as MovementId)
        .filter(|&i| graph.upstream(i).map(|u| u.is_empty()).unwrap_or(false))
        .collect()
}

/// Stable set of boundary-exit movements (empty downstream) of a graph.
pub fn boundary_exits(graph: &MovementGraph) -> Vec<MovementId> {
    (0..graph.n() as MovementId)
        .filter(|&i| graph.downstream(i).map(|d| d.is_empty()).unwrap_or(false))
        .collect()
}

/// Sorted union of all ids reachable within one stored hop of `i`, plus `i`.
pub fn closed_in_neighborhood(graph: &MovementGraph, i: MovementId) -> Vec<MovementId> {
    let mut set: BTreeSet<MovementId> = graph
        .upstream(i)
        .map(|u| u.iter().copied().collect())
        .unwrap_or_default();
    set.insert(i);
    set.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny_graph() -> MovementGraph {
        // 0 -> 2, 1 -> 2, 2 -> (exit); 0 and 1 are boundary entries.
        MovementGraph::new(
            vec![
                TrafficMovement {
                    id: 0,
                    direction: Direction::Straight,
                    length_m: 100.0,
                },
                TrafficMovement {
                    id: 1,
                    direction: Direction::Left,
                    length_m: 80.0,
                },
                TrafficMovement {
                    id: 2,
                    direction: Direction::Right,
                    length_m: 120.0,
                },
            ],
            vec![vec![2], vec![2], vec![]],
        )
        .unwrap()
    }

    #[test]
    fn upstream_is_sorted_and_complete() {
        let g = tiny_graph();
        assert_eq!(g.upstream(2).unwrap(), &[0, 1]);
        assert_eq!(g.upstream(0).unwrap(), &[] as &[MovementId]);
        assert_eq!(g.n_edges(), 2);
        assert_eq!(g.max_length_m(), 120.0);
        assert_eq!(boundary_entries(&g), vec![0, 1]);
        assert_eq!(boundary_exits(&g), vec![2]);
        assert_eq!(closed_in_neighborhood(&g, 2), vec![0, 1, 2]);
    }

    #[test]
    fn upstream_of_unknown_id_errors() {
        let g = tiny_graph();
        assert!(matches!(g.upstream(3), Err(RoadnetError::IdOutOfRange(3))));
    }

    #[test]
    fn roadnet_json_round_trip_preserves_structure() {
        let g = tiny_graph();
        let json = g.to_json();
        let back = parse_roadnet(&json).unwrap();
        assert_eq!(back.n(), g.n());
        assert_eq!(back.movements(), g.movements());
        assert_eq!(
            back.edges().collect::<Vec<_>>(),
            g.edges().collect::<Vec<_>>()
        );
    }

    #[test]
    fn parses_two_movement_document() {
        let doc = r#"{"movements":[
            {"id":0,"direction":"S","length_m":100.0,"downstream":[1]},
            {"id":1,"direction":"L","length_m":80.0,"downstream":[]}]}"#;
        let g = parse_roadnet(doc).unwrap();
        assert_eq!(g.n(), 2);
        assert_eq!(g.edges().collect::<Vec<_>>(), vec![(0, 1)]);
        assert_eq!(g.movement(0).unwrap().direction, Direction::Straight);
        assert_eq!(g.movement(1).unwrap().length_m, 80.0);
        assert_eq!(g.upstream(1).unwrap(), &[0]);
    }

    #[test]
    fn parses_two_row_signal_plan() {
        let doc = r#"{"movements":[
            {"id":0,"direction":"S","length_m":100.0,"downstream":[1]},
            {"id":1,"direction":"L","length_m":80.0,"downstream":[]}]}"#;
        let g = parse_roadnet(doc).unwrap();
        let csv = "t_min,node_id,green_s\n0,0,30\n0,1,60\n";
        let plan = parse_signal_plan(csv, &g, 0..1).unwrap();
        assert_eq!(plan.green_s(0, 0), 30.0);
        assert_eq!(plan.green_s(0, 1), 60.0);
    }

    #[test]
    fn parse_roadnet_rejects_structural_defects() {
        // Duplicate id.
        let dup = r#"{"movements":[
            {"id":0,"direction":"S","length_m":10.0,"downstream":[]},
            {"id":0,"direction":"L","length_m":10.0,"downstream":[]}]}"#;
        assert!(matches!(
            parse_roadnet(dup),
            Err(RoadnetError::DuplicateId(0))
        ));
        // Non-contiguous ids.
        let gap = r#"{"movements":[
            {"id":0,"direction":"S","length_m":10.0,"downstream":[]},
            {"id":2,"direction":"L","length_m":10.0,"downstream":[]}]}"#;
        assert!(matches!(
            parse_roadnet(gap),
            Err(RoadnetError::NonContiguousIds { .. })
        ));
        // Unknown downstream reference.
        let unknown = r#"{"movements":[
            {"id":0,"direction":"S","length_m":10.0,"downstream":[7]}]}"#;
        assert!(matches!(
            parse_roadnet(unknown),
            Err(RoadnetError::UnknownId(7))
        ));
        // Self-loop.
        let selfloop = r#"{"movements":[
            {"id":0,"direction":"S","length_m":10.0,"downstream":[0]}]}"#;
        assert!(matches!(
            parse_roadnet(selfloop),
            Err(RoadnetError::SelfLoop(0))
        ));
        // Non-positive length.
        let zl = r#"{"movements":[
            {"id":0,"direction":"S","length_m":0.0,"downstream":[]}]}"#;
        assert!(matches!(
            parse_roadnet(zl),
            Err(RoadnetError::NonPositiveLength { .. })
        ));
        // Duplicate edge.
        let dupe = r#"{"movements":[
            {"id":0,"direction":"S","length_m":10.0,"downstream":[1,1]},
            {"id":1,"direction":"L","length_m":10.0,"downstream":[]}]}"#;
        assert!(matches!(
            parse_roadnet(dupe),
            Err(RoadnetError::DuplicateEdge { src: 0, dst: 1 })
        ));
        // Malformed JSON.
        assert!(matches!(
            parse_roadnet("{"),
            Err(RoadnetError::Malformed(_))
        ));
    }

    #[test]
    fn direction_one_hot_is_fixed_order() {
        assert_eq!(Direction::Left.one_hot(), [1.0, 0.0, 0.0]);
        assert_eq!(Direction::Straight.one_hot(), [0.0, 1.0, 0.0]);
        assert_eq!(Direction::Right.one_hot(), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn signal_plan_round_trip_and_lookup() {
        let g = tiny_graph();
        let plan = SignalPlan::new(
            5..7,
            array![[30.0, 0.0, 60.0], [15.0, 45.0, 22.5]],
        )
        .unwrap();
        assert_eq!(plan.green_s(5, 2), 60.0);
        assert_eq!(plan.green_s(6, 1), 45.0);
        assert!(plan.covers(5..7));
        assert!(!plan.covers(4..7));
        assert!(!plan.covers(5..8));

        let csv = plan.to_csv();
        let back = parse_signal_plan(&csv, &g, 5..7).unwrap();
        assert_eq!(back.green_s(6, 2).to_bits(), 22.5_f64.to_bits());
    }

    #[test]
    fn parse_signal_plan_validates_rows() {
        let g = tiny_graph();
        let ok = "t_min,node_id,green_s\n0,0,30\n0,1,30\n0,2,30\n";
        assert!(parse_signal_plan(ok, &g, 0..1).is_ok());

        let out_of_range = "t_min,node_id,green_s\n0,0,61\n0,1,30\n0,2,30\n";
        assert!(matches!(
            parse_signal_plan(out_of_range, &g, 0..1),
            Err(SignalError::GreenOutOfRange { value, .. }) if value == 61.0
        ));

        let unknown = "t_min,node_id,green_s\n0,0,30\n0,1,30\n0,9,30\n";
        assert!(matches!(
            parse_signal_plan(unknown, &g, 0..1),
            Err(SignalError::UnknownId(9))
        ));

        let missing = "t_min,node_id,green_s\n0,0,30\n0,1,30\n";
        assert!(matches!(
            parse_signal_plan(missing, &g, 0..1),
            Err(SignalError::MissingEntry { t_min: 0, id: 2 })
        ));

        let dup = "t_min,node_id,green_s\n0,0,30\n0,0,31\n0,1,30\n0,2,30\n";
        assert!(matches!(
            parse_signal_plan(dup, &g, 0..1),
            Err(SignalError::DuplicateEntry { t_min: 0, id: 0 })
        ));

        let bad_header = "time,node,green\n0,0,30\n";
        assert!(matches!(
            parse_signal_plan(bad_header, &g, 0..1),
            Err(SignalError::Malformed { line: 1, .. })
        ));
    }

    #[test]
    fn signal_rows_outside_requested_range_are_ignored() {
        let g = tiny_graph();
        let csv = "t_min,node_id,green_s\n0,0,1\n0,1,2\n0,2,3\n1,0,4\n1,1,5\n1,2,6\n";
        let plan = parse_signal_plan(csv, &g, 1..2).unwrap();
        assert_eq!(plan.green_s(1, 0), 4.0);
        assert_eq!(plan.t_range(), 1..2);
    }
}
