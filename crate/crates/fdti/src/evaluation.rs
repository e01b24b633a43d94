//! Metrics (RMSE, MAPE), the spatio-temporal smoothness metric, naive
//! baselines (historical average, persistence, pooled linear regression), and
//! the prediction-table format shared by the CLI and the evaluation harness.
//!
//! The smoothness metric cuts a minutes-by-nodes series into disjoint windows
//! of length `P`, and within each window measures the mean cosine distance
//! between every node's window-long feature vector and those of its exact
//! k-hop neighbors; the final value averages the per-window means. Smooth
//! (neighbor-alike) series score near 0; heterogeneous series score higher,
//! up to 2.

use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::roadnet::{MovementGraph, MovementId};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("empty input")]
    EmptyInput,
    #[error("length mismatch: {0}")]
    Misaligned(String),
    #[error("all targets are zero; MAPE is undefined")]
    AllTargetsZero,
    #[error("unknown movement id {0}")]
    UnknownId(MovementId),
    #[error("k must be at least 1, got {0}")]
    InvalidK(usize),
    #[error("window length must be at least 1, got {0}")]
    InvalidWindow(usize),
    #[error("series has {t_len} minutes, fewer than the window length {window}")]
    SeriesTooShort { t_len: usize, window: usize },
    #[error("no measurable pairs: every node is isolated or has all-zero features")]
    AllIsolatedOrZero,
    #[error("prediction file format error at line {line}: {message}")]
    Format { line: usize, message: String },
}

/// Root mean squared error over aligned cells.
pub fn rmse(y: &[f64], y_hat: &[f64]) -> Result<f64, EvalError> {
    if y.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if y.len() != y_hat.len() {
        return Err(EvalError::Misaligned(format!(
            "rmse over {} targets vs {} predictions",
            y.len(),
            y_hat.len()
        )));
    }
    let se: f64 = y
        .iter()
        .zip(y_hat)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((se / y.len() as f64).sqrt())
}

/// Mean absolute percentage error over cells with nonzero targets, as a
/// percentage. Returns the error and the number of excluded (zero-target)
/// cells.
pub fn mape(y: &[f64], y_hat: &[f64]) -> Result<(f64, usize), EvalError> {
    if y.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if y.len() != y_hat.len() {
        return Err(EvalError::Misaligned(format!(
            "mape over {} targets vs {} predictions",
            y.len(),
            y_hat.len()
        )));
    }
    let mut sum = 0.0;
    let mut counted = 0usize;
    for (a, b) in y.iter().zip(y_hat) {
        if *a != 0.0 {
            sum += ((a - b) / a).abs();
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(EvalError::AllTargetsZero);
    }
    Ok((100.0 * sum / counted as f64, y.len() - counted))
}

/// Nodes at shortest-path distance exactly `k` from `i`, over the undirected
/// movement graph by default (`directed` restricts to downstream edges).
pub fn khop_neighbors(
    graph: &MovementGraph,
    i: MovementId,
    k: usize,
    directed: bool,
) -> Result<Vec<MovementId>, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidK(k));
    }
    let n = graph.n();
    if i as usize >= n {
        return Err(EvalError::UnknownId(i));
    }
    let mut dist = vec![usize::MAX; n];
    dist[i as usize] = 0;
    let mut frontier = vec![i];
    for step in 1..=k {
        let mut next = Vec::new();
        for &u in &frontier {
            let mut push = |v: MovementId| {
                if dist[v as usize] == usize::MAX {
                    dist[v as usize] = step;
                    next.push(v);
                }
            };
            for &v in graph.downstream(u).expect("id in range") {
                push(v);
            }
            if !directed {
                for &v in graph.upstream(u).expect("id in range") {
                    push(v);
                }
            }
        }
        frontier = next;
        if frontier.is_empty() {
            break;
        }
    }
    let mut out: Vec<MovementId> = (0..n as MovementId)
        .filter(|&v| dist[v as usize] == k)
        .collect();
    out.sort_unstable();
    Ok(out)
}

/// Cosine distance `1 - cos(a, b)`, clamped into [0, 2] against float noise;
/// `None` when either vector has zero norm.
fn cosine_distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Option<f64> {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let cos = a.dot(&b) / (na * nb);
    Some((1.0 - cos).clamp(0.0, 2.0))
}

/// One window's mean-average-distance value plus skip accounting.
#[derive(Debug, Clone, Copy)]
pub struct MadValue {
    pub mad: f64,
    /// (node, neighbor) pairs skipped because either side had zero norm.
    pub skipped_pairs: usize,
}

/// Mean over nodes (with nonempty exact-k neighborhoods) of the mean cosine
/// distance to those neighbors, on `N x P` window features.
pub fn mad_k(
    features: ArrayView2<'_, f64>,
    graph: &MovementGraph,
    k: usize,
    directed: bool,
) -> Result<MadValue, EvalError> {
    if features.ncols() == 0 {
        return Err(EvalError::InvalidWindow(0));
    }
    if features.nrows() != graph.n() {
        return Err(EvalError::Misaligned(format!(
            "{} feature rows for a graph of {} movements",
            features.nrows(),
            graph.n()
        )));
    }
    let mut node_means = Vec::new();
    let mut skipped_pairs = 0usize;
    for i in 0..graph.n() as MovementId {
        let neighbors = khop_neighbors(graph, i, k, directed)?;
        if neighbors.is_empty() {
            continue;
        }
        let mut sum = 0.0;
        let mut counted = 0usize;
        for &j in &neighbors {
            match cosine_distance(features.row(i as usize), features.row(j as usize)) {
                Some(d) => {
                    sum += d;
                    counted += 1;
                }
                None => skipped_pairs += 1,
            }
        }
        if counted > 0 {
            node_means.push(sum / counted as f64);
        }
    }
    if node_means.is_empty() {
        return Err(EvalError::AllIsolatedOrZero);
    }
    Ok(MadValue {
        mad: node_means.iter().sum::<f64>() / node_means.len() as f64,
        skipped_pairs,
    })
}

/// The smoothness value for one k: the mean of per-window MAD values.
#[derive(Debug, Clone)]
pub struct SmoothnessEntry {
    pub k: usize,
    pub stmad: f64,
    pub window: usize,
    pub n_subgraphs: usize,
    pub per_window_mad: Vec<f64>,
    pub skipped_pairs: usize,
}

/// Computes the smoothness metric on a `T x N` minutes-by-nodes series: cut
/// into `floor(T / P)` disjoint windows, apply [`mad_k`] per window, average.
pub fn stmad(
    series: ArrayView2<'_, f64>,
    graph: &MovementGraph,
    k: usize,
    window: usize,
    directed: bool,
) -> Result<SmoothnessEntry, EvalError> {
    if window == 0 {
        return Err(EvalError::InvalidWindow(window));
    }
    let t_len = series.nrows();
    if t_len < window {
        return Err(EvalError::SeriesTooShort { t_len, window });
    }
    let n_subgraphs = t_len / window;
    let mut per_window_mad = Vec::with_capacity(n_subgraphs);
    let mut skipped_pairs = 0usize;
    for m in 0..n_subgraphs {
        // Window features: node i's vector is its series over the window.
        let slab = series.slice(ndarray::s![m * window..(m + 1) * window, ..]);
        let features = slab.t();
        let v = mad_k(features.view(), graph, k, directed)?;
        per_window_mad.push(v.mad);
        skipped_pairs += v.skipped_pairs;
    }
    Ok(SmoothnessEntry {
        k,
        stmad: per_window_mad.iter().sum::<f64>() / n_subgraphs as f64,
        window,
        n_subgraphs,
        per_window_mad,
        skipped_pairs,
    })
}

/// Historical average: each node's prediction is the mean of its training
/// series, for every test minute and horizon.
pub fn baseline_ha(train: ArrayView2<'_, f64>) -> Result<Array1<f64>, EvalError> {
    if train.nrows() == 0 {
        return Err(EvalError::EmptyInput);
    }
    Ok(train.mean_axis(ndarray::Axis(0)).expect("nonempty"))
}

/// Persistence: the last observed state is the prediction at every horizon.
pub fn baseline_persistence(x_t: ArrayView1<'_, f64>) -> Array1<f64> {
    x_t.to_owned()
}

/// A pooled one-step linear autoregressor with intercept.
#[derive(Debug, Clone)]
pub struct LinReg {
    /// One coefficient per lag, oldest first (length = window).
    pub coef: Array1<f64>,
    pub intercept: f64,
    /// True when the normal equations were rank-deficient and a ridge term
    /// of 1e-8 was added.
    pub ridge_used: bool,
}

/// Fits `y ~ X beta + intercept` by normal equations; falls back to ridge
/// (1e-8) when the Gram matrix is not positive definite.
pub fn fit_linreg(x: ArrayView2<'_, f64>, y: ArrayView1<'_, f64>) -> Result<LinReg, EvalError> {
    let n = x.nrows();
    let f = x.ncols();
    if n == 0 || f == 0 {
        return Err(EvalError::EmptyInput);
    }
    if y.len() != n {
        return Err(EvalError::Misaligned(format!(
            "{n} design rows vs {} targets",
            y.len()
        )));
    }
    // Augmented design [X | 1]; Gram = A^T A, rhs = A^T y.
    let p = f + 1;
    let mut gram = nalgebra::DMatrix::<f64>::zeros(p, p);
    let mut rhs = nalgebra::DVector::<f64>::zeros(p);
    for r in 0..n {
        for a in 0..p {
            let xa = if a < f { x[[r, a]] } else { 1.0 };
            rhs[a] += xa * y[r];
            for b in a..p {
                let xb = if b < f { x[[r, b]] } else { 1.0 };
                gram[(a, b)] += xa * xb;
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }
    let (solution, ridge_used) = match nalgebra::Cholesky::new(gram.clone()) {
        Some(ch) => (ch.solve(&rhs), false),
        None => {
            let mut ridged = gram;
            for a in 0..p {
                ridged[(a, a)] += 1e-8;
            }
            let ch = nalgebra::Cholesky::new(ridged).ok_or_else(|| {
                EvalError::Misaligned("ridge-regularized normal equations still singular".into())
            })?;
            (ch.solve(&rhs), true)
        }
    };
    Ok(LinReg {
        coef: Array1::from_iter(solution.iter().take(f).copied()),
        intercept: solution[f],
        ridge_used,
    })
}

impl LinReg {
    /// Predicts one step from a lag window (oldest first).
    pub fn predict(&self, lags: ArrayView1<'_, f64>) -> f64 {
        self.coef.dot(&lags) + self.intercept
    }
}

/// One prediction cell: the anchor minute `t_min` (last observed minute), the
/// movement, the horizon `q >= 1`, and the predicted volume for minute
/// `t_min + q`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredRow {
    pub t_min: u32,
    pub node_id: MovementId,
    pub horizon: u32,
    pub volume: f64,
}

/// A prediction table, ordered by (t_min, horizon, node_id).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Predictions {
    pub rows: Vec<PredRow>,
}

pub const PREDICTIONS_HEADER: &str = "t_min,node_id,horizon,volume";

impl Predictions {
    pub fn sort(&mut self) {
        self.rows
            .sort_by_key(|r| (r.t_min, r.horizon, r.node_id));
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(PREDICTIONS_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.t_min,
                r.node_id,
                r.horizon,
                crate::fmt_f64(r.volume)
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Predictions, EvalError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == PREDICTIONS_HEADER => {}
            other => {
                return Err(EvalError::Format {
                    line: 1,
                    message: format!(
                        "expected header {PREDICTIONS_HEADER:?}, found {:?}",
                        other.map(|(_, h)| h).unwrap_or_default()
                    ),
                });
            }
        }
        let mut rows = Vec::new();
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                return Err(EvalError::Format {
                    line: idx + 1,
                    message: format!("expected 4 fields, found {}", parts.len()),
                });
            }
            let field = |i: usize, what: &str| -> Result<&str, EvalError> {
                parts.get(i).copied().ok_or_else(|| EvalError::Format {
                    line: idx + 1,
                    message: format!("missing {what}"),
                })
            };
            let t_min = field(0, "t_min")?
                .trim()
                .parse::<u32>()
                .map_err(|e| EvalError::Format {
                    line: idx + 1,
                    message: format!("bad t_min: {e}"),
                })?;
            let node_id =
                field(1, "node_id")?
                    .trim()
                    .parse::<u32>()
                    .map_err(|e| EvalError::Format {
                        line: idx + 1,
                        message: format!("bad node_id: {e}"),
                    })?;
            let horizon =
                field(2, "horizon")?
                    .trim()
                    .parse::<u32>()
                    .map_err(|e| EvalError::Format {
                        line: idx + 1,
                        message: format!("bad horizon: {e}"),
                    })?;
            if horizon == 0 {
                return Err(EvalError::Format {
                    line: idx + 1,
                    message: "horizon must be at least 1".into(),
                });
            }
            let volume =
                field(3, "volume")?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| EvalError::Format {
                        line: idx + 1,
                        message: format!("bad volume: {e}"),
                    })?;
            rows.push(PredRow {
                t_min,
                node_id,
                horizon,
                volume,
            });
        }
        Ok(Predictions { rows })
    }

    /// Reassembles the horizon-`q` predictions as a minutes-by-nodes series
    /// over the *target* minutes (`t_min + q`), requiring rectangular
    /// coverage: every present anchor must carry all `n_nodes` cells.
    pub fn series_for_horizon(
        &self,
        horizon: u32,
        n_nodes: usize,
    ) -> Result<(Vec<u32>, Array2<f64>), EvalError> {
        let mut anchors: Vec<u32> = self
            .rows
            .iter()
            .filter(|r| r.horizon == horizon)
            .map(|r| r.t_min)
            .collect();
        anchors.sort_unstable();
        anchors.dedup();
        if anchors.is_empty() {
            return Err(EvalError::Misaligned(format!(
                "no predictions at horizon {horizon}"
            )));
        }
        let mut series = Array2::<f64>::zeros((anchors.len(), n_nodes));
        let mut filled = vec![0usize; anchors.len()];
        for r in self.rows.iter().filter(|r| r.horizon == horizon) {
            let row = anchors.binary_search(&r.t_min).expect("anchor present");
            if r.node_id as usize >= n_nodes {
                return Err(EvalError::UnknownId(r.node_id));
            }
            series[[row, r.node_id as usize]] = r.volume;
            filled[row] += 1;
        }
        for (row, &count) in filled.iter().enumerate() {
            if count != n_nodes {
                return Err(EvalError::Misaligned(format!(
                    "anchor {} has {count} cells at horizon {horizon}, expected {n_nodes}",
                    anchors[row]
                )));
            }
        }
        let targets = anchors.iter().map(|a| a + horizon).collect();
        Ok((targets, series))
    }
}

/// Per-horizon metric bundle.
#[derive(Debug, Clone)]
pub struct HorizonMetrics {
    pub horizon: u32,
    pub rmse: f64,
    pub mape_percent: f64,
    pub n_cells: usize,
    pub n_excluded: usize,
}

#[derive(Debug, Clone, Default)]
pub struct MetricsReport {
    pub horizons: Vec<HorizonMetrics>,
}

impl MetricsReport {
    pub fn horizon(&self, q: u32) -> Option<&HorizonMetrics> {
        self.horizons.iter().find(|h| h.horizon == q)
    }

    /// Delimited text: one line per horizon.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("horizon,rmse,mape_percent,n_cells,n_excluded\n");
        for h in &self.horizons {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                h.horizon,
                crate::fmt_f64(h.rmse),
                crate::fmt_f64(h.mape_percent),
                h.n_cells,
                h.n_excluded
            ));
        }
        out
    }
}

/// Scores a prediction table against ground-truth volumes (row = absolute
/// minute). Every requested horizon must have predictions, and every
/// predicted cell must have a truth cell.
pub fn evaluate(
    predictions: &Predictions,
    truth_volumes: ArrayView2<'_, f64>,
    horizons: &[u32],
) -> Result<MetricsReport, EvalError> {
    if horizons.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let n_minutes = truth_volumes.nrows() as u32;
    let n_nodes = truth_volumes.ncols() as u32;
    let mut report = MetricsReport::default();
    for &q in horizons {
        if q == 0 {
            return Err(EvalError::InvalidK(0));
        }
        let mut y = Vec::new();
        let mut y_hat = Vec::new();
        for r in predictions.rows.iter().filter(|r| r.horizon == q) {
            let target_minute = r.t_min + q;
            if target_minute >= n_minutes {
                return Err(EvalError::Misaligned(format!(
                    "prediction targets minute {target_minute} but truth ends at {}",
                    n_minutes - 1
                )));
            }
            if r.node_id >= n_nodes {
                return Err(EvalError::UnknownId(r.node_id));
            }
            y.push(truth_volumes[[target_minute as usize, r.node_id as usize]]);
            y_hat.push(r.volume);
        }
        if y.is_empty() {
            return Err(EvalError::Misaligned(format!(
                "no predictions at requested horizon {q}"
            )));
        }
        let rmse_v = rmse(&y, &y_hat)?;
        let (mape_v, n_excluded) = mape(&y, &y_hat)?;
        report.horizons.push(HorizonMetrics {
            horizon: q,
            rmse: rmse_v,
            mape_percent: mape_v,
            n_cells: y.len(),
            n_excluded,
        });
    }
    Ok(report)
}

/// Neighbor-averaging predictor: at every horizon, predicts the mean of the
/// anchor-minute volumes over the node's closed 1-hop (undirected)
/// neighborhood. Deliberately over-smooth; used as the smoothness foil.
pub fn neighbor_average_row(
    graph: &MovementGraph,
    x_t: ArrayView1<'_, f64>,
) -> Result<Array1<f64>, EvalError> {
    if x_t.len() != graph.n() {
        return Err(EvalError::Misaligned(format!(
            "{} volumes for a graph of {} movements",
            x_t.len(),
            graph.n()
        )));
    }
    let mut out = Array1::<f64>::zeros(graph.n());
    for i in 0..graph.n() as MovementId {
        let mut sum = x_t[i as usize];
        let mut count = 1usize;
        for j in khop_neighbors(graph, i, 1, false)? {
            sum += x_t[j as usize];
            count += 1;
        }
        out[i as usize] = sum / count as f64;
    }
    Ok(out)
}

/// Builds baseline prediction tables over test anchors.
///
/// `anchors` are minutes whose horizon-q targets must stay inside the truth
/// series; each baseline fills every (anchor, node, horizon) cell.
pub mod baseline_tables {
    use super::*;

    /// Historical-average table: each node's training mean everywhere.
    pub fn ha(
        train_volumes: ArrayView2<'_, f64>,
        anchors: &[u32],
        n_nodes: usize,
        horizons: &[u32],
    ) -> Result<Predictions, EvalError> {
        let means = baseline_ha(train_volumes)?;
        if means.len() != n_nodes {
            return Err(EvalError::Misaligned(format!(
                "{} training columns vs {n_nodes} nodes",
                means.len()
            )));
        }
        let mut p = Predictions::default();
        for &a in anchors {
            for &q in horizons {
                for i in 0..n_nodes {
                    p.rows.push(PredRow {
                        t_min: a,
                        node_id: i as MovementId,
                        horizon: q,
                        volume: means[i],
                    });
                }
            }
        }
        p.sort();
        Ok(p)
    }

    /// Persistence table: the anchor row repeated at every horizon.
    pub fn persistence(
        volumes: ArrayView2<'_, f64>,
        anchors: &[u32],
        horizons: &[u32],
    ) -> Result<Predictions, EvalError> {
        let n_nodes = volumes.ncols();
        let mut p = Predictions::default();
        for &a in anchors {
            if a as usize >= volumes.nrows() {
                return Err(EvalError::Misaligned(format!(
                    "anchor {a} beyond observed volumes"
                )));
            }
            let x = baseline_persistence(volumes.row(a as usize));
            for &q in horizons {
                for i in 0..n_nodes {
                    p.rows.push(PredRow {
                        t_min: a,
                        node_id: i as MovementId,
                        horizon: q,
                        volume: x[i],
                    });
                }
            }
        }
        p.sort();
        Ok(p)
    }

    /// Pooled autoregressive linear regression: fit one-step lags on the
    /// training range, roll forward autoregressively for deeper horizons.
    /// Returns the table and whether the ridge fallback fired.
    pub fn linreg(
        volumes: ArrayView2<'_, f64>,
        train_range: Range<u32>,
        window: usize,
        anchors: &[u32],
        horizons: &[u32],
    ) -> Result<(Predictions, bool), EvalError> {
        if window == 0 {
            return Err(EvalError::InvalidWindow(0));
        }
        let n_nodes = volumes.ncols();
        // Pool training cells: lag window [a-window+1 ..= a] -> target a+1,
        // entirely inside the training range.
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let lo = train_range.start as i64 + window as i64 - 1;
        let hi = train_range.end as i64 - 2;
        for a in lo..=hi {
            let a = a as usize;
            for i in 0..n_nodes {
                for l in 0..window {
                    xs.push(volumes[[a + 1 - window + l, i]]);
                }
                ys.push(volumes[[a + 1, i]]);
            }
        }
        if ys.is_empty() {
            return Err(EvalError::EmptyInput);
        }
        let x = Array2::from_shape_vec((ys.len(), window), xs).expect("shape");
        let y = Array1::from_vec(ys);
        let model = fit_linreg(x.view(), y.view())?;

        let max_h = horizons.iter().copied().max().unwrap_or(0) as usize;
        let mut p = Predictions::default();
        for &a in anchors {
            let a = a as usize;
            if a + 1 < window || a >= volumes.nrows() {
                return Err(EvalError::Misaligned(format!(
                    "anchor {a} cannot host a lag window of {window}"
                )));
            }
            for i in 0..n_nodes {
                // Rolling lag state, oldest first.
                let mut lags: Vec<f64> = (0..window)
                    .map(|l| volumes[[a + 1 - window + l, i]])
                    .collect();
                for step in 1..=max_h {
                    let pred = model.predict(ArrayView1::from(&lags[..]));
                    if horizons.contains(&(step as u32)) {
                        p.rows.push(PredRow {
                            t_min: a as u32,
                            node_id: i as MovementId,
                            horizon: step as u32,
                            volume: pred,
                        });
                    }
                    lags.rotate_left(1);
                    *lags.last_mut().expect("nonempty") = pred;
                }
            }
        }
        p.sort();
        Ok((p, model.ridge_used))
    }

    /// Neighbor-averaging table (smoothness foil): the anchor row's closed
    /// 1-hop mean at every horizon.
    pub fn neighbor_average(
        graph: &MovementGraph,
        volumes: ArrayView2<'_, f64>,
        anchors: &[u32],
        horizons: &[u32],
    ) -> Result<Predictions, EvalError> {
        let mut p = Predictions::default();
        for &a in anchors {
            if a as usize >= volumes.nrows() {
                return Err(EvalError::Misaligned(format!(
                    "anchor {a} beyond observed volumes"
                )));
            }
            let row = neighbor_average_row(graph, volumes.row(a as usize))?;
            for &q in horizons {
                for i in 0..graph.n() {
                    p.rows.push(PredRow {
                        t_min: a,
                        node_id: i as MovementId,
                        horizon: q,
                        volume: row[i],
                    });
                }
            }
        }
        p.sort();
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roadnet::{Direction, TrafficMovement};
    use crate::simulator::{run as run_sim, SimConfig};
    use ndarray::array;

    fn path_graph(n: usize) -> MovementGraph {
        let movements = (0..n)
            .map(|i| TrafficMovement {
                id: i as u32,
                direction: Direction::Straight,
                length_m: 100.0,
            })
            .collect();
        let downstream = (0..n)
            .map(|i| if i + 1 < n { vec![i as u32 + 1] } else { vec![] })
            .collect();
        MovementGraph::new(movements, downstream).unwrap()
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        let v = rmse(&[0.0, 3.0], &[4.0, 0.0]).unwrap();
        assert_eq!(v, 12.5f64.sqrt());
        assert!((v - 3.5355339059327378).abs() < 1e-15);
        assert_eq!(rmse(&[5.0], &[2.0]).unwrap(), 3.0);
        assert!(matches!(rmse(&[], &[]), Err(EvalError::EmptyInput)));
        assert!(matches!(
            rmse(&[1.0], &[1.0, 2.0]),
            Err(EvalError::Misaligned(_))
        ));
    }

    #[test]
    fn mape_examples() {
        let (v, excl) = mape(&[2.0, 4.0], &[1.0, 4.0]).unwrap();
        assert_eq!(v, 25.0);
        assert_eq!(excl, 0);
        let (v, excl) = mape(&[0.0, 2.0], &[9.0, 2.0]).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(excl, 1);
        let (v, _) = mape(&[3.0, 7.0], &[3.0, 7.0]).unwrap();
        assert_eq!(v, 0.0);
        assert!(matches!(
            mape(&[0.0, 0.0], &[1.0, 2.0]),
            Err(EvalError::AllTargetsZero)
        ));
    }

    #[test]
    fn metrics_are_permutation_invariant() {
        let y = [1.0, 5.0, 2.0, 8.0];
        let p = [2.0, 4.0, 2.5, 9.0];
        let perm = [2usize, 0, 3, 1];
        let yp: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        let pp: Vec<f64> = perm.iter().map(|&i| p[i]).collect();
        assert_eq!(rmse(&y, &p).unwrap(), rmse(&yp, &pp).unwrap());
        assert_eq!(mape(&y, &p).unwrap().0, mape(&yp, &pp).unwrap().0);
    }

    #[test]
    fn khop_on_path_graph() {
        let g = path_graph(3);
        assert_eq!(khop_neighbors(&g, 0, 1, false).unwrap(), vec![1]);
        assert_eq!(khop_neighbors(&g, 0, 2, false).unwrap(), vec![2]);
        assert_eq!(khop_neighbors(&g, 1, 1, false).unwrap(), vec![0, 2]);
        assert_eq!(khop_neighbors(&g, 0, 3, false).unwrap(), Vec::<u32>::new());
        // Directed: only downstream counts.
        assert_eq!(khop_neighbors(&g, 2, 1, true).unwrap(), Vec::<u32>::new());
        assert_eq!(khop_neighbors(&g, 2, 1, false).unwrap(), vec![1]);
        assert!(matches!(
            khop_neighbors(&g, 0, 0, false),
            Err(EvalError::InvalidK(0))
        ));
        assert!(matches!(
            khop_neighbors(&g, 9, 1, false),
            Err(EvalError::UnknownId(9))
        ));
    }

    #[test]
    fn khop_isolated_node_has_no_neighbors() {
        let movements = vec![
            TrafficMovement {
                id: 0,
                direction: Direction::Left,
                length_m: 50.0,
            },
            TrafficMovement {
                id: 1,
                direction: Direction::Right,
                length_m: 60.0,
            },
        ];
        let g = MovementGraph::new(movements, vec![vec![], vec![]]).unwrap();
        assert!(khop_neighbors(&g, 0, 1, false).unwrap().is_empty());
        assert!(khop_neighbors(&g, 0, 5, false).unwrap().is_empty());
    }

    #[test]
    fn mad_identical_rows_is_zero() {
        let g = path_graph(3);
        let features = array![[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]];
        let v = mad_k(features.view(), &g, 1, false).unwrap();
        assert!(v.mad.abs() < 1e-12, "mad = {}", v.mad);
        assert_eq!(v.skipped_pairs, 0);
    }

    #[test]
    fn mad_orthogonal_neighbors_is_one() {
        let g = path_graph(2);
        let features = array![[1.0, 0.0], [0.0, 1.0]];
        let v = mad_k(features.view(), &g, 1, false).unwrap();
        assert!((v.mad - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mad_path_example_matches_hand_computation() {
        // Path 0-1-2, features [1,0],[1,1],[0,1]: every adjacent cosine is
        // 1/sqrt(2), so each node's mean distance is 1 - 1/sqrt(2) and so is
        // the overall mean.
        let g = path_graph(3);
        let features = array![[1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let v = mad_k(features.view(), &g, 1, false).unwrap();
        let expected = 1.0 - 1.0 / 2.0f64.sqrt();
        assert!((v.mad - expected).abs() < 1e-15);
        assert!((v.mad - 0.29289321881345254).abs() < 1e-15);
    }

    #[test]
    fn mad_skips_zero_norm_pairs_and_counts_them() {
        let g = path_graph(3);
        let features = array![[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]];
        // Node 1 is all-zero: pairs (0,1), (1,0), (1,2), (2,1) are skipped;
        // nodes 0 and 2 have no other neighbors, node 1 contributes nothing.
        let err = mad_k(features.view(), &g, 1, false).unwrap_err();
        assert!(matches!(err, EvalError::AllIsolatedOrZero));
        // With k=2, nodes 0 and 2 see each other (orthogonal).
        let v = mad_k(features.view(), &g, 2, false).unwrap();
        assert!((v.mad - 1.0).abs() < 1e-15);
        assert_eq!(v.skipped_pairs, 0);
    }

    #[test]
    fn mad_is_invariant_to_positive_rescaling() {
        let g = path_graph(3);
        let features = array![[1.0, 0.5], [0.3, 1.0], [2.0, 2.0]];
        let mut scaled = features.clone();
        for (i, s) in [3.0, 0.25, 17.0].iter().enumerate() {
            for c in 0..2 {
                scaled[[i, c]] *= s;
            }
        }
        let a = mad_k(features.view(), &g, 1, false).unwrap().mad;
        let b = mad_k(scaled.view(), &g, 1, false).unwrap().mad;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn stmad_identical_series_is_zero_and_window_count_is_floor() {
        let g = path_graph(3);
        // T=10, every node shares the same nonzero series.
        let series = Array2::from_shape_fn((10, 3), |(t, _)| 1.0 + t as f64);
        let e = stmad(series.view(), &g, 1, 5, false).unwrap();
        assert_eq!(e.n_subgraphs, 2);
        assert_eq!(e.per_window_mad.len(), 2);
        assert!(e.stmad.abs() < 1e-12);
        assert!(matches!(
            stmad(series.view(), &g, 1, 11, false),
            Err(EvalError::SeriesTooShort { .. })
        ));
        // Positive scalar multiples of a common vector are also zero.
        let series = Array2::from_shape_fn((10, 3), |(t, i)| (1.0 + t as f64) * (i + 1) as f64);
        let e = stmad(series.view(), &g, 1, 5, false).unwrap();
        assert!(e.stmad.abs() < 1e-12);
    }

    #[test]
    fn stmad_stays_in_range_on_simulator_data() {
        // 2x2 grid: large enough that exact-3-hop neighborhoods exist.
        let cfg = SimConfig {
            rows: 2,
            cols: 2,
            duration_min: 30,
            warmup_min: 5,
            ..SimConfig::default()
        };
        let data = run_sim(&cfg).unwrap();
        for k in [1usize, 2, 3] {
            let e = stmad(data.volumes.view(), &data.graph, k, 5, false).unwrap();
            assert!(e.stmad >= 0.0 && e.stmad <= 2.0, "k={k}: {}", e.stmad);
        }
    }

    #[test]
    fn neighbor_averaged_series_is_smoother_than_truth() {
        // Heterogeneous signals come from the checkerboard offsets.
        let cfg = SimConfig {
            rows: 2,
            cols: 2,
            duration_min: 40,
            warmup_min: 10,
            seed: 3,
            ..SimConfig::default()
        };
        let data = run_sim(&cfg).unwrap();
        let t0 = 10usize;
        let t1 = data.volumes.nrows();
        let truth = data.volumes.slice(ndarray::s![t0..t1, ..]);
        let mut smoothed = Array2::<f64>::zeros((t1 - t0, data.graph.n()));
        for (r, t) in (t0..t1).enumerate() {
            smoothed
                .row_mut(r)
                .assign(&neighbor_average_row(&data.graph, data.volumes.row(t)).unwrap());
        }
        let s_truth = stmad(truth, &data.graph, 1, 5, false).unwrap().stmad;
        let s_smooth = stmad(smoothed.view(), &data.graph, 1, 5, false)
            .unwrap()
            .stmad;
        assert!(
            s_smooth < s_truth,
            "smoothed {s_smooth} not below truth {s_truth}"
        );
    }

    #[test]
    fn ha_examples() {
        let train = array![[1.0, 10.0], [2.0, 20.0], [3.0, 30.0]];
        let means = baseline_ha(train.view()).unwrap();
        assert_eq!(means, array![2.0, 20.0]);
        assert!(matches!(
            baseline_ha(Array2::zeros((0, 2)).view()),
            Err(EvalError::EmptyInput)
        ));
        // Constant series: zero RMSE against a constant test series.
        let c = array![[7.0], [7.0]];
        let means = baseline_ha(c.view()).unwrap();
        assert_eq!(rmse(&[7.0, 7.0], &[means[0], means[0]]).unwrap(), 0.0);
    }

    #[test]
    fn persistence_examples() {
        let x = array![4.0, 9.0];
        assert_eq!(baseline_persistence(x.view()), x);
        // Constant series: zero error at all horizons.
        let vols = Array2::from_elem((8, 2), 3.0);
        let table =
            baseline_tables::persistence(vols.view(), &[4, 5], &[1, 2]).unwrap();
        let report = evaluate(&table, vols.view(), &[1, 2]).unwrap();
        for h in &report.horizons {
            assert_eq!(h.rmse, 0.0);
        }
        // q=5 repeats the same anchor row.
        let table = baseline_tables::persistence(vols.view(), &[1], &[5]).unwrap();
        assert!(table.rows.iter().all(|r| r.volume == 3.0 && r.horizon == 5));
    }

    #[test]
    fn linreg_recovers_exact_linear_law() {
        // y = 2 x with a single lag.
        let x = Array2::from_shape_fn((20, 1), |(r, _)| r as f64 * 0.5 + 1.0);
        let y = Array1::from_shape_fn(20, |r| 2.0 * (r as f64 * 0.5 + 1.0));
        let m = fit_linreg(x.view(), y.view()).unwrap();
        assert!(!m.ridge_used);
        assert!((m.coef[0] - 2.0).abs() < 1e-9, "slope {}", m.coef[0]);
        assert!(m.intercept.abs() < 1e-9, "intercept {}", m.intercept);
        // Perfect fit implies zero test error on the same law.
        let pred = m.predict(array![100.0].view());
        assert!((pred - 200.0).abs() < 1e-7);
    }

    #[test]
    fn linreg_degenerate_design_takes_ridge_path() {
        let x = Array2::zeros((10, 1));
        let y = Array1::from_elem(10, 3.0);
        let m = fit_linreg(x.view(), y.view()).unwrap();
        assert!(m.ridge_used);
        assert!((m.intercept - 3.0).abs() < 1e-6, "intercept {}", m.intercept);
        assert!(m.coef[0].abs() < 1e-6);
    }

    #[test]
    fn linreg_autoregression_reproduces_constant_series() {
        let vols = Array2::from_elem((30, 2), 4.0);
        let (table, _) =
            baseline_tables::linreg(vols.view(), 0..18, 3, &[20, 21], &[1, 3, 5]).unwrap();
        let report = evaluate(&table, vols.view(), &[1, 3, 5]).unwrap();
        for h in &report.horizons {
            assert!(h.rmse < 1e-6, "horizon {}: rmse {}", h.horizon, h.rmse);
        }
    }

    #[test]
    fn evaluate_examples() {
        let truth = array![[1.0, 2.0], [3.0, 4.0], [5.0, 0.0], [7.0, 8.0]];
        // Exact predictions at horizon 1 from anchors 0..=2.
        let mut p = Predictions::default();
        for a in 0..3u32 {
            for i in 0..2u32 {
                p.rows.push(PredRow {
                    t_min: a,
                    node_id: i,
                    horizon: 1,
                    volume: truth[[(a + 1) as usize, i as usize]],
                });
            }
        }
        let report = evaluate(&p, truth.view(), &[1]).unwrap();
        assert_eq!(report.horizons.len(), 1);
        let h = report.horizon(1).unwrap();
        assert_eq!(h.rmse, 0.0);
        assert_eq!(h.mape_percent, 0.0);
        assert_eq!(h.n_cells, 6);
        // One zero-volume truth cell (minute 2, node 1) is excluded.
        assert_eq!(h.n_excluded, 1);
        // Horizon without predictions -> misalignment.
        assert!(matches!(
            evaluate(&p, truth.view(), &[2]),
            Err(EvalError::Misaligned(_))
        ));
        // Prediction pointing past the truth series -> misalignment.
        p.rows.push(PredRow {
            t_min: 3,
            node_id: 0,
            horizon: 1,
            volume: 1.0,
        });
        assert!(matches!(
            evaluate(&p, truth.view(), &[1]),
            Err(EvalError::Misaligned(_))
        ));
    }

    #[test]
    fn predictions_csv_round_trip() {
        let mut p = Predictions::default();
        p.rows.push(PredRow {
            t_min: 50,
            node_id: 3,
            horizon: 1,
            volume: 2.5,
        });
        p.rows.push(PredRow {
            t_min: 50,
            node_id: 1,
            horizon: 5,
            volume: 1.0 / 3.0,
        });
        p.sort();
        let text = p.to_csv();
        assert!(text.starts_with("t_min,node_id,horizon,volume\n"));
        let q = Predictions::parse(&text).unwrap();
        assert_eq!(p, q);
        // Bad header and bad rows are rejected with line numbers.
        assert!(matches!(
            Predictions::parse("nope\n1,2,3,4\n"),
            Err(EvalError::Format { line: 1, .. })
        ));
        assert!(matches!(
            Predictions::parse("t_min,node_id,horizon,volume\n1,2,0,4.0\n"),
            Err(EvalError::Format { line: 2, .. })
        ));
        assert!(matches!(
            Predictions::parse("t_min,node_id,horizon,volume\n1,2,1\n"),
            Err(EvalError::Format { line: 2, .. })
        ));
    }

    #[test]
    fn series_reassembly_requires_rectangular_coverage() {
        let mut p = Predictions::default();
        for i in 0..2u32 {
            p.rows.push(PredRow {
                t_min: 10,
                node_id: i,
                horizon: 1,
                volume: i as f64,
            });
        }
        let (targets, series) = p.series_for_horizon(1, 2).unwrap();
        assert_eq!(targets, vec![11]);
        assert_eq!(series, array![[0.0, 1.0]]);
        p.rows.push(PredRow {
            t_min: 11,
            node_id: 0,
            horizon: 1,
            volume: 5.0,
        });
        assert!(matches!(
            p.series_for_horizon(1, 2),
            Err(EvalError::Misaligned(_))
        ));
        assert!(matches!(
            p.series_for_horizon(2, 2),
            Err(EvalError::Misaligned(_))
        ));
    }
}
