//! Hand-derived reverse-mode gradients for the network in [`super`].
//!
//! The chain, mirrored from the forward pass:
//!
//! - linear heads: standard adjoints into weights, biases, and the final
//!   frame's top-layer state;
//! - residual aggregation: `tanh` backward is `1 - a^2` on the pre-residual
//!   activation; the residual link passes the output adjoint through
//!   unchanged;
//! - the concatenated linear layer splits into self and propagated halves;
//! - the weighted max-pool routes each component's adjoint to the single
//!   recorded argmax edge, scaled by that edge's weight (nothing flows on
//!   empty in-edge sets);
//! - frame 0 of every layer is a carried copy, so its adjoint passes straight
//!   down;
//! - the embedding accumulates over all frames.
//!
//! Correctness is enforced by central finite differences (see
//! [`gradient_check`]).

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    forward, init_params, loss, Activations, ModelConfig, ModelError, ModelParams,
};
use crate::ftstg::{build_ftstg, EdgeWeighting, Ftstg, NODE_FEATURE_DIM};
use crate::roadnet::{Direction, MovementGraph, SignalPlan, TrafficMovement};

/// Computes the one-step flow loss and its exact gradients with respect to
/// every parameter, aligned tensor-for-tensor with [`ModelParams`].
pub fn backward(
    frames: &[Array2<f64>],
    graph_t: &Ftstg,
    params: &ModelParams,
    config: &ModelConfig,
    inflow_true: ArrayView1<'_, f64>,
    outflow_true: ArrayView1<'_, f64>,
) -> Result<(f64, ModelParams), ModelError> {
    let acts = forward(frames, graph_t, params, config)?;
    let value = loss(
        acts.inflow.view(),
        acts.outflow.view(),
        inflow_true,
        outflow_true,
    )?;
    let grads = accumulate_grads(
        frames,
        graph_t,
        params,
        config,
        &acts,
        inflow_true,
        outflow_true,
    );
    Ok((value, grads))
}

fn accumulate_grads(
    frames: &[Array2<f64>],
    graph_t: &Ftstg,
    params: &ModelParams,
    config: &ModelConfig,
    acts: &Activations,
    inflow_true: ArrayView1<'_, f64>,
    outflow_true: ArrayView1<'_, f64>,
) -> ModelParams {
    let t = frames.len();
    let n = graph_t.n_nodes();
    let d = config.hidden_dim;
    let mut grads = params.zeros_like();

    // Loss and head adjoints. loss = mean((iota - ihat)^2) + mean((o - ohat)^2),
    // so d loss / d ihat_i = 2 (ihat_i - iota_i) / n.
    let scale = 2.0 / n as f64;
    let d_in = (&acts.inflow - &inflow_true) * scale;
    let d_out = (&acts.outflow - &outflow_true) * scale;
    let h_final = acts.final_state();
    grads.w_in = h_final.t().dot(&d_in);
    grads.b_in = d_in.sum();
    grads.w_out = h_final.t().dot(&d_out);
    grads.b_out = d_out.sum();

    // Adjoint of h[L][*]: only the final frame receives head gradient.
    let mut grad_h: Vec<Array2<f64>> = (0..t).map(|_| Array2::zeros((n, d))).collect();
    for i in 0..n {
        for k in 0..d {
            grad_h[t - 1][[i, k]] = d_in[i] * params.w_in[k] + d_out[i] * params.w_out[k];
        }
    }

    for l in (1..=config.n_layers).rev() {
        let w = &params.w_agg[l - 1];
        let w_top = w.slice(s![0..d, ..]);
        let w_bot = w.slice(s![d..2 * d, ..]);
        let mut grad_prev: Vec<Array2<f64>> = (0..t).map(|_| Array2::zeros((n, d))).collect();
        for ft in 1..t {
            let dout = &grad_h[ft];
            let a = &acts.pre_res[l - 1][ft - 1];
            let mut dz = dout.clone();
            dz.zip_mut_with(a, |g, &av| *g *= 1.0 - av * av);
            if config.use_residual {
                grad_prev[ft] += dout;
            }
            let h_self = &acts.h[l - 1][ft];
            let prop = &acts.prop[l - 1][ft - 1];
            {
                let gw = &mut grads.w_agg[l - 1];
                let mut top = gw.slice_mut(s![0..d, ..]);
                top += &h_self.t().dot(&dz);
                let mut bot = gw.slice_mut(s![d..2 * d, ..]);
                bot += &prop.t().dot(&dz);
            }
            grads.b_agg[l - 1] += &dz.sum_axis(Axis(0));
            grad_prev[ft] += &dz.dot(&w_top.t());
            // Max-pool routing: each component's adjoint goes to its argmax
            // edge, scaled by the edge weight.
            let dprop = dz.dot(&w_bot.t());
            let arg = &acts.argmax[l - 1][ft - 1];
            let target = &mut grad_prev[ft - 1];
            for i in 0..n {
                let (srcs, ws) = graph_t.in_edges(ft - 1, i as u32);
                for k in 0..d {
                    let e = arg[[i, k]];
                    if e != u32::MAX {
                        let e = e as usize;
                        target[[srcs[e] as usize, k]] += dprop[[i, k]] * ws[e];
                    }
                }
            }
        }
        // Frame 0 is a carried copy of the layer below.
        grad_prev[0] += &grad_h[0];
        grad_h = grad_prev;
    }

    // Embedding: accumulate over every frame's adjoint.
    for ft in 0..t {
        let a0 = &acts.h[0][ft];
        let mut dz0 = grad_h[ft].clone();
        dz0.zip_mut_with(a0, |g, &av| *g *= 1.0 - av * av);
        grads.w_emb += &frames[ft].t().dot(&dz0);
        grads.b_emb += &dz0.sum_axis(Axis(0));
    }
    grads
}

/// Result of one finite-difference verification run.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// Maximum guarded relative error over all parameters.
    pub max_rel_err: f64,
    /// Number of scalar parameters checked.
    pub n_params: usize,
}

/// Guarded relative error: `|a - n| / max(|a|, |n|, 1e-3)`. The floor makes
/// the comparison absolute (at 1e-7 for the 1e-4 threshold) for parameters
/// whose gradients are tiny, where the finite-difference oracle's own
/// rounding noise would otherwise dominate a naive ratio.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

fn loss_on(
    frames: &[Array2<f64>],
    graph_t: &Ftstg,
    params: &ModelParams,
    config: &ModelConfig,
    inflow_true: ArrayView1<'_, f64>,
    outflow_true: ArrayView1<'_, f64>,
) -> f64 {
    let acts = forward(frames, graph_t, params, config).expect("forward in gradient check");
    loss(
        acts.inflow.view(),
        acts.outflow.view(),
        inflow_true,
        outflow_true,
    )
    .expect("loss in gradient check")
}

/// Verifies [`backward`] against central finite differences with the given
/// step over every scalar parameter.
pub fn gradient_check(
    frames: &[Array2<f64>],
    graph_t: &Ftstg,
    params: &ModelParams,
    config: &ModelConfig,
    inflow_true: ArrayView1<'_, f64>,
    outflow_true: ArrayView1<'_, f64>,
    step: f64,
) -> Result<GradCheckReport, ModelError> {
    let (_, grads) = backward(
        frames,
        graph_t,
        params,
        config,
        inflow_true,
        outflow_true,
    )?;
    let analytic: Vec<f64> = grads
        .tensor_views()
        .iter()
        .flat_map(|t| t.data.iter().copied())
        .collect();
    let mut p = params.clone();
    let n_tensors = p.tensor_views().len();
    let mut max_rel_err = 0.0f64;
    let mut flat = 0usize;
    for ti in 0..n_tensors {
        let len = p.tensor_views()[ti].data.len();
        for k in 0..len {
            let orig = p.tensor_views()[ti].data[k];
            p.tensor_slices_mut()[ti][k] = orig + step;
            let up = loss_on(frames, graph_t, &p, config, inflow_true, outflow_true);
            p.tensor_slices_mut()[ti][k] = orig - step;
            let down = loss_on(frames, graph_t, &p, config, inflow_true, outflow_true);
            p.tensor_slices_mut()[ti][k] = orig;
            let numeric = (up - down) / (2.0 * step);
            max_rel_err = max_rel_err.max(rel_err(analytic[flat], numeric));
            flat += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        n_params: flat,
    })
}

/// One randomized small instance for gradient verification: a sparse movement
/// graph, a random signal plan, random feature frames, and random flow
/// targets. Dimensions are drawn within the stated bounds from the seed.
pub struct CheckInstance {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub frames: Vec<Array2<f64>>,
    pub graph_t: Ftstg,
    pub inflow_true: Array1<f64>,
    pub outflow_true: Array1<f64>,
}

/// Builds a [`CheckInstance`] with `N <= 10`, `T <= 5`, `L <= 3`, `d <= 8`.
pub fn random_check_instance(seed: u64) -> CheckInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=10usize);
    let l = rng.random_range(1..=3usize);
    let t = rng.random_range(l + 1..=5usize);
    let d = rng.random_range(2..=8usize);
    random_check_instance_with(seed.wrapping_add(0x9e37), n, t, l, d)
}

/// Same as [`random_check_instance`] but with explicit dimensions.
pub fn random_check_instance_with(
    seed: u64,
    n: usize,
    t: usize,
    l: usize,
    d: usize,
) -> CheckInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let movements: Vec<TrafficMovement> = (0..n)
        .map(|i| TrafficMovement {
            id: i as u32,
            direction: match i % 3 {
                0 => Direction::Left,
                1 => Direction::Straight,
                _ => Direction::Right,
            },
            length_m: rng.random_range(50.0..400.0),
        })
        .collect();
    // Sparse forward wiring: every node feeds its successor; every other node
    // also skips one ahead, so some nodes pool several in-edges.
    let downstream: Vec<Vec<u32>> = (0..n)
        .map(|i| {
            let mut d = Vec::new();
            if i + 1 < n {
                d.push((i + 1) as u32);
            }
            if i % 2 == 0 && i + 2 < n {
                d.push((i + 2) as u32);
            }
            d
        })
        .collect();
    let graph = MovementGraph::new(movements, downstream).expect("valid check graph");
    let green = Array2::from_shape_fn((t, n), |_| rng.random_range(0.0..60.0));
    let plan = SignalPlan::new(0..t as u32, green).expect("valid check plan");
    let graph_t =
        build_ftstg(&graph, &plan, 0, t, EdgeWeighting::NormalizedGreen).expect("layered graph");
    let config = ModelConfig {
        hidden_dim: d,
        n_layers: l,
        window: t,
        discount: 0.9,
        clamp_nonneg: true,
        use_residual: rng.random_range(0..4usize) != 0,
        seed: seed ^ 0xabcd,
    };
    let params = init_params(&config).expect("init");
    let frames: Vec<Array2<f64>> = (0..t)
        .map(|_| Array2::from_shape_fn((n, NODE_FEATURE_DIM), |_| rng.random_range(-2.0..2.0)))
        .collect();
    let inflow_true = Array1::from_shape_fn(n, |_| rng.random_range(0.0..4.0));
    let outflow_true = Array1::from_shape_fn(n, |_| rng.random_range(0.0..4.0));
    CheckInstance {
        config,
        params,
        frames,
        graph_t,
        inflow_true,
        outflow_true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FD_STEP: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    #[test]
    fn zero_loss_means_zero_gradients() {
        let inst = random_check_instance_with(42, 5, 4, 2, 4);
        let acts = forward(&inst.frames, &inst.graph_t, &inst.params, &inst.config).unwrap();
        // Targets equal to predictions: the loss is exactly stationary.
        let (value, grads) = backward(
            &inst.frames,
            &inst.graph_t,
            &inst.params,
            &inst.config,
            acts.inflow.view(),
            acts.outflow.view(),
        )
        .unwrap();
        assert_eq!(value, 0.0);
        for t in grads.tensor_views() {
            assert!(
                t.data.iter().all(|&g| g == 0.0),
                "tensor {} has nonzero gradient at exact fit",
                t.name
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences_on_reference_instance() {
        // The canonical verification shape: N=6, T=3, L=2, d=4.
        let inst = random_check_instance_with(7, 6, 3, 2, 4);
        let report = gradient_check(
            &inst.frames,
            &inst.graph_t,
            &inst.params,
            &inst.config,
            inst.inflow_true.view(),
            inst.outflow_true.view(),
            FD_STEP,
        )
        .unwrap();
        assert_eq!(
            report.n_params,
            ModelParams::count_formula(4, 2, NODE_FEATURE_DIM)
        );
        assert!(
            report.max_rel_err < TOL,
            "max relative error {} exceeds {}",
            report.max_rel_err,
            TOL
        );
    }

    #[test]
    fn gradients_match_finite_differences_across_varied_instances() {
        for seed in [1u64, 2, 3, 11, 12] {
            let inst = random_check_instance(seed);
            let report = gradient_check(
                &inst.frames,
                &inst.graph_t,
                &inst.params,
                &inst.config,
                inst.inflow_true.view(),
                inst.outflow_true.view(),
                FD_STEP,
            )
            .unwrap();
            assert!(
                report.max_rel_err < TOL,
                "seed {seed}: max relative error {} exceeds {}",
                report.max_rel_err,
                TOL
            );
        }
    }

    #[test]
    fn gradients_match_without_residual_and_with_unit_weights() {
        // Residual off.
        let mut inst = random_check_instance_with(21, 4, 4, 3, 3);
        inst.config.use_residual = false;
        let report = gradient_check(
            &inst.frames,
            &inst.graph_t,
            &inst.params,
            &inst.config,
            inst.inflow_true.view(),
            inst.outflow_true.view(),
            FD_STEP,
        )
        .unwrap();
        assert!(report.max_rel_err < TOL, "residual off: {}", report.max_rel_err);

        // Unit edge weights (static-graph ablation) change the pooling
        // landscape; gradients must still route exactly.
        let base = random_check_instance_with(22, 6, 3, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(505);
        let movements: Vec<TrafficMovement> = (0..6)
            .map(|i| TrafficMovement {
                id: i as u32,
                direction: Direction::Straight,
                length_m: 100.0 + i as f64,
            })
            .collect();
        let downstream: Vec<Vec<u32>> =
            (0..6).map(|i| if i + 1 < 6 { vec![i as u32 + 1] } else { vec![] }).collect();
        let graph = MovementGraph::new(movements, downstream).unwrap();
        let green = Array2::from_shape_fn((3, 6), |_| rng.random_range(0.0..60.0));
        let plan = SignalPlan::new(0..3, green).unwrap();
        let graph_t = build_ftstg(&graph, &plan, 0, 3, EdgeWeighting::Ones).unwrap();
        let report = gradient_check(
            &base.frames,
            &graph_t,
            &base.params,
            &base.config,
            base.inflow_true.view(),
            base.outflow_true.view(),
            FD_STEP,
        )
        .unwrap();
        assert!(report.max_rel_err < TOL, "unit weights: {}", report.max_rel_err);
    }

    #[test]
    fn cell_error_contribution_is_linear() {
        // The backward pass is linear in the output adjoint, and the adjoint
        // is linear in each cell's error; doubling one cell's error doubles
        // every gradient it induces, bit for bit.
        let inst = random_check_instance_with(33, 5, 3, 2, 4);
        let acts = forward(&inst.frames, &inst.graph_t, &inst.params, &inst.config).unwrap();
        let pred = acts.inflow[2];
        assert!(pred != 0.0 && pred.is_finite());
        // Error only on node 2's inflow cell. Target pred/2 gives error
        // pred/2 exactly (Sterbenz), target 0 gives error pred exactly —
        // so the second error is bitwise double the first.
        let mut t1_in = acts.inflow.clone();
        t1_in[2] = pred * 0.5;
        let mut t2_in = acts.inflow.clone();
        t2_in[2] = 0.0;
        let t_out = acts.outflow.clone();
        let (_, g1) = backward(
            &inst.frames,
            &inst.graph_t,
            &inst.params,
            &inst.config,
            t1_in.view(),
            t_out.view(),
        )
        .unwrap();
        let (_, g2) = backward(
            &inst.frames,
            &inst.graph_t,
            &inst.params,
            &inst.config,
            t2_in.view(),
            t_out.view(),
        )
        .unwrap();
        for (a, b) in g1.tensor_views().iter().zip(g2.tensor_views().iter()) {
            for (x, y) in a.data.iter().zip(b.data.iter()) {
                assert_eq!(
                    (2.0 * x).to_bits(),
                    y.to_bits(),
                    "tensor {} not exactly linear in the cell error",
                    a.name
                );
            }
        }
    }
}
