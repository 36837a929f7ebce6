//! Distributed projected-gradient optimization of node inputs.
//!
//! Each iteration projects the current inputs, captures the charts once,
//! broadcasts the residual, and lets every node update itself independently:
//!
//!   e      = r - y
//!   dG/dx_n = -sum_m sum_i p_n^i e^i
//!   x_n    <- clamp01( x_n + (eps / K) * sum_m sum_i p_n^i e^i )
//!
//! with K the patch count per chart. Channels are optimized independently.
//!
//! The virtual camera hands back values in [0, 1]; physical pipelines work
//! in sensor digital numbers. `residual_scale` (default 255, the 8-bit DN
//! per capture unit) converts both factors of the p*e product inside the
//! update, so `epsilon` keeps the magnitude it has in a DN-based setup.

use crate::calibration::{AttenuationTensor, BlackOffset, CalibrationBundle, ChartSet, TargetAppearance};
use crate::capture::{CaptureError, LightingState, NoiseModel, Simulator};
use crate::color::{Rgb, CHANNELS};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("capture failed at iteration {iteration}: {source}")]
    Capture {
        iteration: usize,
        #[source]
        source: CaptureError,
    },
    #[error("objective became non-finite at iteration {0}")]
    NonFinite(usize),
}

/// Step size, iteration budget, stopping rule.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub epsilon: f64,
    pub max_iterations: usize,
    /// Stop when G improves by less than this between iterations.
    pub stop_tolerance: f64,
    /// Sensor digital numbers per capture unit (see module docs).
    pub residual_scale: f64,
    /// Channels are independent; kept explicit for the record.
    pub per_channel: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            epsilon: 1e-5,
            max_iterations: 25,
            stop_tolerance: 1e-8,
            residual_scale: 255.0,
            per_channel: true,
        }
    }
}

impl OptimizerConfig {
    pub fn from_settings(s: &crate::config::OptimizerSettings) -> Self {
        OptimizerConfig {
            epsilon: s.epsilon,
            max_iterations: s.max_iterations,
            stop_tolerance: s.stop_tolerance,
            residual_scale: s.residual_scale,
            per_channel: true,
        }
    }
}

/// Per-chart-patch error e = r - y.
#[derive(Debug, Clone)]
pub struct Residual {
    pub e: Vec<Rgb>,
}

/// Evaluate the objective: e = r - y and G = 1/2 sum e^2, per channel.
/// Returns the residual, the per-channel objective, and its total.
pub fn evaluate(r: &[Rgb], y: &[Rgb]) -> (Residual, Rgb, f64) {
    assert_eq!(r.len(), y.len());
    let e: Vec<Rgb> = r.iter().zip(y).map(|(ri, yi)| *ri - *yi).collect();
    let mut g = Rgb::ZERO;
    for ei in &e {
        for c in 0..CHANNELS {
            g[c] += 0.5 * ei[c] * ei[c];
        }
    }
    let total = g.sum();
    (Residual { e }, g, total)
}

/// Analytic gradient dG/dx_n = -sum_i p_n^i e^i for every node, per channel.
/// Each node's entry depends only on its own attenuation column and the
/// shared residual broadcast.
pub fn gradient(p: &AttenuationTensor, residual: &Residual) -> Vec<Rgb> {
    p.p.iter()
        .map(|column| {
            let mut g = Rgb::ZERO;
            for (pi, ei) in column.iter().zip(&residual.e) {
                for c in 0..CHANNELS {
                    g[c] -= pi[c] * ei[c];
                }
            }
            g
        })
        .collect()
}

/// One projected update of a single node:
/// `clamp01(x + (eps / k) * correction)` where `correction` is the node's
/// accumulated sum of p*e terms.
pub fn step(x: Rgb, correction: Rgb, epsilon: f64, k: usize) -> Rgb {
    assert!(epsilon > 0.0 && k >= 1);
    let scale = epsilon / k as f64;
    x.zip(correction, |xi, ci| (xi + scale * ci).clamp(0.0, 1.0))
}

/// Conventional radiometric compensation as the initializer: per node, the
/// per-channel median over its assigned chart of (r - d) / p, clamped.
/// Nodes without a usable column start at zero.
pub fn conventional_init(
    r: &TargetAppearance,
    d: &BlackOffset,
    p: &AttenuationTensor,
    nodes_assigned_chart: &[Option<usize>],
    charts: &ChartSet,
) -> Vec<Rgb> {
    nodes_assigned_chart
        .iter()
        .enumerate()
        .map(|(n, assigned)| {
            let Some(chart) = assigned else {
                return Rgb::ZERO;
            };
            let range = charts.chart_range(*chart);
            let mut x = Rgb::ZERO;
            for c in 0..CHANNELS {
                let mut ratios: Vec<f64> = range
                    .clone()
                    .filter(|&i| p.p[n][i][c] > 1e-9)
                    .map(|i| (r.r[i][c] - d.d[i][c]) / p.p[n][i][c])
                    .collect();
                if ratios.is_empty() {
                    // All-zero column on the assigned chart; stay dark.
                    x[c] = 0.0;
                    continue;
                }
                ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let mid = ratios.len() / 2;
                let median = if ratios.len() % 2 == 1 {
                    ratios[mid]
                } else {
                    0.5 * (ratios[mid - 1] + ratios[mid])
                };
                x[c] = median.clamp(0.0, 1.0);
            }
            x
        })
        .collect()
}

/// How a run ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StopReason {
    MaxIterations,
    Converged { at_iteration: usize },
    CaptureFailed { at_iteration: usize, message: String },
    NonFinite { at_iteration: usize },
}

/// Node membership change, logged in the trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum MembershipEvent {
    Added { node_id: usize },
    Removed { node_id: usize },
    RemoveIgnored { node_id: usize },
}

/// One iteration record: inputs, objective, per-chart mean absolute error.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    /// (node_id, input) for every active node.
    pub inputs: Vec<(usize, Rgb)>,
    pub g_channels: Rgb,
    pub g_total: f64,
    /// Mean |e| per chart, per channel.
    pub chart_mean_abs_e: Vec<Rgb>,
}

/// Append-only record of a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerTrace {
    pub iterations: Vec<IterationRecord>,
    pub events: Vec<(usize, MembershipEvent)>,
    pub stop: StopReason,
}

impl OptimizerTrace {
    pub fn final_g(&self) -> f64 {
        self.iterations.last().map(|it| it.g_total).unwrap_or(f64::NAN)
    }

    pub fn initial_g(&self) -> f64 {
        self.iterations.first().map(|it| it.g_total).unwrap_or(f64::NAN)
    }
}

/// Where captures come from during a run: the closed-loop simulator or the
/// open-loop linear model.
pub trait CaptureSource {
    /// Chart-patch readout (flat order) for the given full node-input vector.
    fn capture_charts(&mut self, inputs: &[Rgb]) -> Result<Vec<Rgb>, CaptureError>;
}

/// Closed loop: drive the simulator, read the chart patches back.
pub struct SimulatorSource<'a> {
    pub sim: &'a Simulator,
    pub charts: &'a ChartSet,
    pub noise: NoiseModel,
    pub captures_taken: u64,
}

impl<'a> SimulatorSource<'a> {
    pub fn new(sim: &'a Simulator, charts: &'a ChartSet, noise: NoiseModel) -> Self {
        SimulatorSource {
            sim,
            charts,
            noise,
            captures_taken: 0,
        }
    }
}

impl CaptureSource for SimulatorSource<'_> {
    fn capture_charts(&mut self, inputs: &[Rgb]) -> Result<Vec<Rgb>, CaptureError> {
        let mut state = LightingState::dark(inputs.len());
        state.node_inputs = inputs.to_vec();
        self.captures_taken += 1;
        let frame = self
            .sim
            .capture(&state, &self.noise.derive(0x10_0000 + self.captures_taken))?;
        Ok(frame.select(&self.charts.flat_patch_ids()))
    }
}

/// Open loop: y = p x + d, noiseless and unclipped. Descent is provable here.
pub struct LinearModelSource<'a> {
    pub p: &'a AttenuationTensor,
    pub d: &'a BlackOffset,
}

impl CaptureSource for LinearModelSource<'_> {
    fn capture_charts(&mut self, inputs: &[Rgb]) -> Result<Vec<Rgb>, CaptureError> {
        let m = self.d.d.len();
        let mut y = self.d.d.clone();
        for (column, x) in self.p.p.iter().zip(inputs) {
            debug_assert_eq!(column.len(), m);
            for (yi, pi) in y.iter_mut().zip(column) {
                for c in 0..CHANNELS {
                    yi[c] += pi[c] * x[c];
                }
            }
        }
        Ok(y)
    }
}

/// An in-progress distributed run; supports node membership changes between
/// iterations.
pub struct DistributedRun {
    config: OptimizerConfig,
    charts_per_patch: usize,
    chart_count: usize,
    r: Vec<Rgb>,
    /// Attenuation columns for every node id ever seen (dense by node id).
    columns: Vec<Vec<Rgb>>,
    /// Active node ids, sorted.
    active: Vec<usize>,
    /// Current input per node id (inactive ids hold zero).
    x: Vec<Rgb>,
    trace: OptimizerTrace,
    t: usize,
    last_g: Option<f64>,
}

impl DistributedRun {
    /// Start a run over the calibrated node set with the given initial
    /// inputs (`x0` aligned with node ids 0..N).
    pub fn new(
        config: OptimizerConfig,
        charts: &ChartSet,
        r: &TargetAppearance,
        p: &AttenuationTensor,
        x0: Vec<Rgb>,
    ) -> Self {
        assert_eq!(p.node_count(), x0.len());
        DistributedRun {
            config,
            charts_per_patch: charts.patches_per_chart(),
            chart_count: charts.charts.len(),
            r: r.r.clone(),
            columns: p.p.clone(),
            active: (0..x0.len()).collect(),
            x: x0,
            trace: OptimizerTrace {
                iterations: Vec::new(),
                events: Vec::new(),
                stop: StopReason::MaxIterations,
            },
            t: 0,
        last_g: None,
        }
    }

    pub fn active_inputs(&self) -> Vec<(usize, Rgb)> {
        self.active.iter().map(|&n| (n, self.x[n])).collect()
    }

    /// Full input vector over all known node ids (inactive nodes at zero).
    pub fn full_inputs(&self) -> Vec<Rgb> {
        let mut inputs = vec![Rgb::ZERO; self.columns.len()];
        for &n in &self.active {
            inputs[n] = self.x[n];
        }
        inputs
    }

    /// Register a new node with its freshly measured attenuation column and
    /// add it to the active set.
    pub fn add_node(&mut self, column: Vec<Rgb>, x0: Rgb) -> usize {
        let node_id = self.columns.len();
        self.columns.push(column);
        self.x.push(x0);
        self.active.push(node_id);
        self.active.sort_unstable();
        self.trace
            .events
            .push((self.t, MembershipEvent::Added { node_id }));
        node_id
    }

    /// Drop a node from the active set; unknown ids are a logged no-op.
    pub fn remove_node(&mut self, node_id: usize) {
        if let Some(pos) = self.active.iter().position(|&n| n == node_id) {
            self.active.remove(pos);
            self.x[node_id] = Rgb::ZERO;
            self.trace
                .events
                .push((self.t, MembershipEvent::Removed { node_id }));
        } else {
            self.trace
                .events
                .push((self.t, MembershipEvent::RemoveIgnored { node_id }));
        }
    }

    /// Run one project-capture-update cycle. Returns the recorded iteration
    /// or the stop reason that ended the run.
    pub fn iterate(&mut self, source: &mut dyn CaptureSource) -> Result<Option<&IterationRecord>, OptimizerError> {
        if self.t >= self.config.max_iterations {
            self.trace.stop = StopReason::MaxIterations;
            return Ok(None);
        }
        let inputs = self.full_inputs();
        let y = match source.capture_charts(&inputs) {
            Ok(y) => y,
            Err(source) => {
                self.trace.stop = StopReason::CaptureFailed {
                    at_iteration: self.t,
                    message: source.to_string(),
                };
                return Err(OptimizerError::Capture {
                    iteration: self.t,
                    source,
                });
            }
        };
        let (residual, g_channels, g_total) = evaluate(&self.r, &y);
        if !g_total.is_finite() {
            self.trace.stop = StopReason::NonFinite { at_iteration: self.t };
            return Err(OptimizerError::NonFinite(self.t));
        }

        // Per-node updates: each node needs only its own column and the
        // broadcast residual. The DN scale applies to both factors of p*e.
        let s2 = self.config.residual_scale * self.config.residual_scale;
        for &n in &self.active {
            let column = &self.columns[n];
            let mut correction = Rgb::ZERO;
            for (pi, ei) in column.iter().zip(&residual.e) {
                for c in 0..CHANNELS {
                    correction[c] += s2 * pi[c] * ei[c];
                }
            }
            self.x[n] = step(self.x[n], correction, self.config.epsilon, self.charts_per_patch);
        }

        // Per-chart mean |e| per channel.
        let k = self.charts_per_patch;
        let chart_mean_abs_e = (0..self.chart_count)
            .map(|m| {
                let mut acc = Rgb::ZERO;
                for i in m * k..(m + 1) * k {
                    acc += residual.e[i].abs();
                }
                acc * (1.0 / k as f64)
            })
            .collect();

        self.trace.iterations.push(IterationRecord {
            t: self.t + 1,
            inputs: self.active_inputs(),
            g_channels,
            g_total,
            chart_mean_abs_e,
        });
        self.t += 1;

        let converged = matches!(self.last_g, Some(prev) if (prev - g_total).abs() < self.config.stop_tolerance);
        self.last_g = Some(g_total);
        if converged {
            self.trace.stop = StopReason::Converged { at_iteration: self.t };
            return Ok(None);
        }
        Ok(Some(self.trace.iterations.last().unwrap()))
    }

    /// Drive iterations until convergence or the iteration budget runs out.
    pub fn run(&mut self, source: &mut dyn CaptureSource) -> Result<(), OptimizerError> {
        while self.iterate(source)?.is_some() {}
        Ok(())
    }

    pub fn trace(&self) -> &OptimizerTrace {
        &self.trace
    }

    pub fn into_trace(self) -> OptimizerTrace {
        self.trace
    }

    pub fn current_inputs(&self) -> &[Rgb] {
        &self.x
    }
}

/// Calibration-driven convenience wrapper: initialize, run to completion,
/// return the trace (preserved even on capture failure).
pub fn run_distributed(
    source: &mut dyn CaptureSource,
    bundle: &CalibrationBundle,
    config: OptimizerConfig,
    x0: Vec<Rgb>,
) -> (OptimizerTrace, Result<Vec<Rgb>, OptimizerError>) {
    let charts = bundle.chart_set();
    let reference = &bundle.references[0];
    let mut run = DistributedRun::new(config, &charts, reference, &bundle.attenuation, x0);
    match run.run(source) {
        Ok(()) => {
            let x = run.current_inputs().to_vec();
            (run.into_trace(), Ok(x))
        }
        Err(err) => (run.into_trace(), Err(err)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::ColorChart;

    fn tiny_charts(chart_count: usize, k: usize) -> ChartSet {
        let charts = (0..chart_count)
            .map(|id| ColorChart {
                id,
                patch_ids: (id * k..(id + 1) * k).collect(),
                reflectances: vec![Rgb::splat(0.5); k],
                centroid: [id as f64, 0.0, 0.0],
            })
            .collect();
        ChartSet { charts }
    }

    fn splat_all(vals: &[f64]) -> Vec<Rgb> {
        vals.iter().map(|&v| Rgb::splat(v)).collect()
    }

    #[test]
    fn evaluate_matches_hand_values() {
        // y = r gives zero.
        let r = splat_all(&[0.3, 0.7]);
        let (_, g, total) = evaluate(&r, &r);
        assert_eq!(g, Rgb::ZERO);
        assert_eq!(total, 0.0);
        // Single patch, e = 1 per channel: G = 0.5 per channel.
        let (_, g, _) = evaluate(&splat_all(&[1.0]), &splat_all(&[0.0]));
        assert_eq!(g, Rgb::splat(0.5));
        // e = {0.1, -0.2}: G = 0.5 * (0.01 + 0.04) = 0.025.
        let (_, g, _) = evaluate(&splat_all(&[0.1, 0.0]), &splat_all(&[0.0, 0.2]));
        assert!((g[0] - 0.025).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_hand_values_and_zero_residual() {
        let p = AttenuationTensor {
            p: vec![vec![Rgb::splat(0.5)]],
        };
        let zero = Residual {
            e: vec![Rgb::ZERO],
        };
        assert_eq!(gradient(&p, &zero)[0], Rgb::ZERO);
        let res = Residual {
            e: vec![Rgb::splat(0.2)],
        };
        let g = gradient(&p, &res);
        assert!((g[0][0] - (-0.1)).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_central_finite_differences() {
        // Random instance, rel. err < 1e-6 against (G(x+h)-G(x-h))/2h.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let (n_nodes, n_patches) = (5, 12);
        let p = AttenuationTensor {
            p: (0..n_nodes)
                .map(|_| {
                    (0..n_patches)
                        .map(|_| Rgb::splat(rng.random::<f64>()))
                        .collect()
                })
                .collect(),
        };
        let d = BlackOffset {
            d: (0..n_patches).map(|_| Rgb::splat(0.05)).collect(),
        };
        let r: Vec<Rgb> = (0..n_patches)
            .map(|_| Rgb::splat(rng.random::<f64>()))
            .collect();
        let x: Vec<Rgb> = (0..n_nodes)
            .map(|_| Rgb::splat(rng.random::<f64>()))
            .collect();

        let g_of = |x: &[Rgb]| -> f64 {
            let mut src = LinearModelSource { p: &p, d: &d };
            let y = src.capture_charts(x).unwrap();
            evaluate(&r, &y).2 / 3.0 // per-channel value; channels identical
        };
        let mut src = LinearModelSource { p: &p, d: &d };
        let y = src.capture_charts(&x).unwrap();
        let (res, _, _) = evaluate(&r, &y);
        let grad = gradient(&p, &res);

        let h = 1e-6;
        for n in 0..n_nodes {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[n][0] += h;
            xp[n][1] += h;
            xp[n][2] += h;
            xm[n][0] -= h;
            xm[n][1] -= h;
            xm[n][2] -= h;
            let fd = (g_of(&xp) - g_of(&xm)) / (2.0 * h);
            let rel = (grad[n][0] - fd).abs() / fd.abs().max(1e-12);
            assert!(rel < 1e-6, "node {n}: analytic {} vs fd {fd}", grad[n][0]);
        }
    }

    #[test]
    fn step_examples() {
        // Zero residual -> fixed point.
        assert_eq!(step(Rgb::splat(0.5), Rgb::ZERO, 0.01, 1), Rgb::splat(0.5));
        // x=0.5, K=1, p=1, e=1, eps=0.01 -> 0.51.
        let next = step(Rgb::splat(0.5), Rgb::splat(1.0), 0.01, 1);
        assert!((next[0] - 0.51).abs() < 1e-15);
        // Clamp at the top.
        let next = step(Rgb::splat(0.999), Rgb::splat(1000.0), 0.01, 1);
        assert_eq!(next, Rgb::ONE);
    }

    #[test]
    fn conventional_init_examples() {
        let charts = tiny_charts(1, 1);
        let p = AttenuationTensor {
            p: vec![vec![Rgb::splat(0.5)]],
        };
        let d = BlackOffset {
            d: vec![Rgb::splat(0.10)],
        };
        let mk_r = |v: f64| TargetAppearance {
            r: vec![Rgb::splat(v)],
            provenance: "test".into(),
        };
        // (0.35 - 0.10) / 0.5 = 0.5
        let x = conventional_init(&mk_r(0.35), &d, &p, &[Some(0)], &charts);
        assert!((x[0][0] - 0.5).abs() < 1e-15);
        // (0.60 - 0.10) / 0.5 = 1.0 exactly at the boundary.
        let x = conventional_init(&mk_r(0.60), &d, &p, &[Some(0)], &charts);
        assert_eq!(x[0], Rgb::ONE);
        // r below d everywhere clamps to zero.
        let x = conventional_init(&mk_r(0.05), &d, &p, &[Some(0)], &charts);
        assert_eq!(x[0], Rgb::ZERO);
        // All-zero column: dark with a warning (stays zero).
        let p0 = AttenuationTensor {
            p: vec![vec![Rgb::ZERO]],
        };
        let x = conventional_init(&mk_r(0.35), &d, &p0, &[Some(0)], &charts);
        assert_eq!(x[0], Rgb::ZERO);
    }

    /// Build a reachable synthetic instance: r = p x* + d with interior x*.
    fn synthetic_instance(
        seed: u64,
        nodes: usize,
        charts: usize,
        k: usize,
    ) -> (ChartSet, AttenuationTensor, BlackOffset, TargetAppearance, Vec<Rgb>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let chart_set = tiny_charts(charts, k);
        let m = charts * k;
        let p = AttenuationTensor {
            p: (0..nodes)
                .map(|_| {
                    (0..m)
                        .map(|_| Rgb::splat(0.05 + 0.9 * rng.random::<f64>()))
                        .collect()
                })
                .collect(),
        };
        let d = BlackOffset {
            d: (0..m).map(|_| Rgb::splat(0.02)).collect(),
        };
        let x_star: Vec<Rgb> = (0..nodes)
            .map(|_| Rgb::splat(0.15 + 0.7 * rng.random::<f64>()))
            .collect();
        let mut src = LinearModelSource { p: &p, d: &d };
        let r = TargetAppearance {
            r: src.capture_charts(&x_star).unwrap(),
            provenance: "synthetic".into(),
        };
        (chart_set, p, d, r, x_star)
    }

    #[test]
    fn reachable_target_converges_to_ground_truth() {
        let (charts, p, d, r, x_star) = synthetic_instance(3, 3, 2, 4);
        let cfg = OptimizerConfig {
            epsilon: 1e-5,
            max_iterations: 5000,
            stop_tolerance: 1e-16,
            residual_scale: 255.0,
            per_channel: true,
        };
        let mut run = DistributedRun::new(cfg, &charts, &r, &p, vec![Rgb::ZERO; 3]);
        let mut src = LinearModelSource { p: &p, d: &d };
        run.run(&mut src).unwrap();
        assert!(run.trace().final_g() < 1e-6, "G = {}", run.trace().final_g());
        for (x, xs) in run.current_inputs().iter().zip(&x_star) {
            for c in 0..3 {
                assert!((x[c] - xs[c]).abs() < 1e-3, "{} vs {}", x[c], xs[c]);
            }
        }
    }

    #[test]
    fn unreachable_bright_target_saturates_all_inputs() {
        let (charts, p, d, _, _) = synthetic_instance(4, 2, 1, 4);
        // Target brighter than everything the nodes can deliver.
        let m = charts.total_patches();
        let r = TargetAppearance {
            r: vec![Rgb::splat(5.0); m],
            provenance: "unreachable".into(),
        };
        let cfg = OptimizerConfig {
            epsilon: 1e-5,
            max_iterations: 3000,
            stop_tolerance: 0.0,
            residual_scale: 255.0,
            per_channel: true,
        };
        let mut run = DistributedRun::new(cfg, &charts, &r, &p, vec![Rgb::ZERO; 2]);
        let mut src = LinearModelSource { p: &p, d: &d };
        run.run(&mut src).unwrap();
        for x in run.current_inputs() {
            assert_eq!(*x, Rgb::ONE);
        }
    }

    #[test]
    fn descent_is_monotone_below_the_step_bound() {
        let (charts, p, d, r, _) = synthetic_instance(9, 4, 2, 6);
        // Largest eigenvalue bound via the trace of p^T p (channel 0).
        let lambda_bound: f64 = p
            .p
            .iter()
            .map(|col| col.iter().map(|v| v[0] * v[0]).sum::<f64>())
            .sum();
        let k = charts.patches_per_chart() as f64;
        let scale: f64 = 255.0;
        let eps_max = k / (lambda_bound * scale * scale);
        let cfg = OptimizerConfig {
            epsilon: eps_max * 0.9,
            max_iterations: 400,
            stop_tolerance: 0.0,
            residual_scale: scale,
            per_channel: true,
        };
        let mut run = DistributedRun::new(cfg, &charts, &r, &p, vec![Rgb::ZERO; 4]);
        let mut src = LinearModelSource { p: &p, d: &d };
        run.run(&mut src).unwrap();
        let gs: Vec<f64> = run.trace().iterations.iter().map(|it| it.g_total).collect();
        for w in gs.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "G must not increase: {w:?}");
        }
    }

    #[test]
    fn per_node_update_equals_centralized_coordinate() {
        // Decomposition: updating one node in isolation (given the residual)
        // is bit-identical to that coordinate of the full-gradient update.
        let (charts, p, d, r, _) = synthetic_instance(11, 3, 1, 8);
        let x: Vec<Rgb> = vec![Rgb::splat(0.3), Rgb::splat(0.6), Rgb::splat(0.1)];
        let mut src = LinearModelSource { p: &p, d: &d };
        let y = src.capture_charts(&x).unwrap();
        let (res, _, _) = evaluate(&r.r, &y);
        let grad = gradient(&p, &res);
        let k = charts.patches_per_chart();
        let eps = 1e-3;
        // Centralized: apply step to every coordinate of the full gradient.
        let centralized: Vec<Rgb> = (0..3)
            .map(|n| step(x[n], grad[n] * -1.0, eps, k))
            .collect();
        // Distributed: each node recomputes only its own correction term.
        for n in 0..3 {
            let mut corr = Rgb::ZERO;
            for (pi, ei) in p.p[n].iter().zip(&res.e) {
                for c in 0..CHANNELS {
                    corr[c] += pi[c] * ei[c];
                }
            }
            let isolated = step(x[n], corr, eps, k);
            assert_eq!(isolated, centralized[n], "node {n}");
        }
    }

    #[test]
    fn channel_permutation_permutes_solution() {
        let (charts, p, d, r, _) = synthetic_instance(13, 2, 1, 6);
        let permute = |v: Rgb| Rgb::new(v[1], v[2], v[0]);
        let p2 = AttenuationTensor {
            p: p.p
                .iter()
                .map(|col| col.iter().map(|v| permute(*v)).collect())
                .collect(),
        };
        let d2 = BlackOffset {
            d: d.d.iter().map(|v| permute(*v)).collect(),
        };
        let r2 = TargetAppearance {
            r: r.r.iter().map(|v| permute(*v)).collect(),
            provenance: r.provenance.clone(),
        };
        let cfg = OptimizerConfig {
            epsilon: 2e-5,
            max_iterations: 500,
            stop_tolerance: 0.0,
            residual_scale: 255.0,
            per_channel: true,
        };
        let run_one = |p: &AttenuationTensor, d: &BlackOffset, r: &TargetAppearance| {
            let mut run = DistributedRun::new(cfg, &charts, r, p, vec![Rgb::ZERO; 2]);
            let mut src = LinearModelSource { p, d };
            run.run(&mut src).unwrap();
            run.current_inputs().to_vec()
        };
        let base = run_one(&p, &d, &r);
        let perm = run_one(&p2, &d2, &r2);
        for (b, q) in base.iter().zip(&perm) {
            assert_eq!(permute(*b), *q);
        }
    }

    #[test]
    fn interior_zero_gradient_point_is_fixed() {
        let (charts, p, d, r, x_star) = synthetic_instance(17, 2, 1, 5);
        let mut src = LinearModelSource { p: &p, d: &d };
        let y = src.capture_charts(&x_star).unwrap();
        let (res, _, _) = evaluate(&r.r, &y);
        // Residual is zero at x*; the step must not move.
        for n in 0..2 {
            let mut corr = Rgb::ZERO;
            for (pi, ei) in p.p[n].iter().zip(&res.e) {
                for c in 0..CHANNELS {
                    corr[c] += 255.0 * 255.0 * pi[c] * ei[c];
                }
            }
            let next = step(x_star[n], corr, 1e-5, charts.patches_per_chart());
            for c in 0..CHANNELS {
                assert!((next[c] - x_star[n][c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn inert_node_does_not_change_the_run() {
        let (charts, p, d, r, _) = synthetic_instance(23, 2, 1, 4);
        let cfg = OptimizerConfig {
            epsilon: 1e-5,
            max_iterations: 800,
            stop_tolerance: 0.0,
            residual_scale: 255.0,
            per_channel: true,
        };
        let baseline = {
            let mut run = DistributedRun::new(cfg, &charts, &r, &p, vec![Rgb::ZERO; 2]);
            let mut src = LinearModelSource { p: &p, d: &d };
            run.run(&mut src).unwrap();
            run.trace().final_g()
        };
        // Same run plus an all-zero column node added at the start.
        let mut p3 = p.clone();
        p3.p.push(vec![Rgb::ZERO; charts.total_patches()]);
        let with_inert = {
            let mut run = DistributedRun::new(cfg, &charts, &r, &p3, vec![Rgb::ZERO; 3]);
            let mut src = LinearModelSource { p: &p3, d: &d };
            run.run(&mut src).unwrap();
            run.trace().final_g()
        };
        assert!((baseline - with_inert).abs() < 1e-9);
    }

    #[test]
    fn removing_node_mid_run_matches_fresh_run_of_remaining_set() {
        let (charts, p, d, r, _) = synthetic_instance(29, 2, 1, 4);
        let cfg = OptimizerConfig {
            epsilon: 4e-5,
            max_iterations: 4000,
            stop_tolerance: 0.0,
            residual_scale: 255.0,
            per_channel: true,
        };
        // Run with both nodes, drop node 1 at t=5, continue to convergence.
        let mut run = DistributedRun::new(cfg, &charts, &r, &p, vec![Rgb::ZERO; 2]);
        let mut src = LinearModelSource { p: &p, d: &d };
        for _ in 0..5 {
            run.iterate(&mut src).unwrap();
        }
        run.remove_node(1);
        run.run(&mut src).unwrap();
        let x_after = run.current_inputs()[0];

        // Fresh 1-node run over the same target.
        let p1 = AttenuationTensor {
            p: vec![p.p[0].clone()],
        };
        let mut fresh = DistributedRun::new(cfg, &charts, &r, &p1, vec![Rgb::ZERO; 1]);
        let mut src1 = LinearModelSource { p: &p1, d: &d };
        fresh.run(&mut src1).unwrap();
        let x_fresh = fresh.current_inputs()[0];
        for c in 0..CHANNELS {
            assert!(
                (x_after[c] - x_fresh[c]).abs() < 1e-3,
                "channel {c}: {} vs {}",
                x_after[c],
                x_fresh[c]
            );
        }
        // Removing an unknown id is a logged no-op.
        run.remove_node(99);
        assert!(matches!(
            run.trace().events.last(),
            Some((_, MembershipEvent::RemoveIgnored { node_id: 99 }))
        ));
    }

    #[test]
    fn adding_helpful_node_mid_run_beats_frozen_membership() {
        // One node cannot reach the target on chart 2; adding a node with
        // transport there must strictly reduce the final G.
        let charts = tiny_charts(2, 3);
        let m = 6;
        let col_a: Vec<Rgb> = (0..m)
            .map(|i| Rgb::splat(if i < 3 { 0.8 } else { 0.0 }))
            .collect();
        let col_b: Vec<Rgb> = (0..m)
            .map(|i| Rgb::splat(if i < 3 { 0.0 } else { 0.7 }))
            .collect();
        let d = BlackOffset {
            d: vec![Rgb::splat(0.01); m],
        };
        let r = TargetAppearance {
            r: vec![Rgb::splat(0.5); m],
            provenance: "split".into(),
        };
        let cfg = OptimizerConfig {
            epsilon: 4e-5,
            max_iterations: 2000,
            stop_tolerance: 0.0,
            residual_scale: 255.0,
            per_channel: true,
        };
        let frozen = {
            let p = AttenuationTensor {
                p: vec![col_a.clone()],
            };
            let mut run = DistributedRun::new(cfg, &charts, &r, &p, vec![Rgb::ZERO]);
            let mut src = LinearModelSource { p: &p, d: &d };
            run.run(&mut src).unwrap();
            run.trace().final_g()
        };
        let with_added = {
            let p = AttenuationTensor {
                p: vec![col_a.clone()],
            };
            let mut run = DistributedRun::new(cfg, &charts, &r, &p, vec![Rgb::ZERO]);
            // The capture source must know the added node's column too, so
            // it models both and pads the input vector as needed.
            let p_full = AttenuationTensor {
                p: vec![col_a, col_b.clone()],
            };
            struct PadSource<'a> {
                inner: LinearModelSource<'a>,
                width: usize,
            }
            impl CaptureSource for PadSource<'_> {
                fn capture_charts(&mut self, inputs: &[Rgb]) -> Result<Vec<Rgb>, CaptureError> {
                    let mut padded = inputs.to_vec();
                    padded.resize(self.width, Rgb::ZERO);
                    self.inner.capture_charts(&padded)
                }
            }
            let mut padded = PadSource {
                inner: LinearModelSource { p: &p_full, d: &d },
                width: 2,
            };
            for _ in 0..5 {
                run.iterate(&mut padded).unwrap();
            }
            run.add_node(col_b, Rgb::ZERO);
            run.run(&mut padded).unwrap();
            run.trace().final_g()
        };
        assert!(
            with_added < frozen - 1e-6,
            "adding transport must help: {with_added} vs {frozen}"
        );
    }

    #[test]
    fn capture_failure_preserves_trace() {
        struct FailingSource {
            after: usize,
            calls: usize,
        }
        impl CaptureSource for FailingSource {
            fn capture_charts(&mut self, inputs: &[Rgb]) -> Result<Vec<Rgb>, CaptureError> {
                self.calls += 1;
                if self.calls > self.after {
                    Err(CaptureError::NodeCountMismatch { got: 0, want: 1 })
                } else {
                    Ok(vec![Rgb::splat(0.4); 4])
                }
            }
        }
        let charts = tiny_charts(1, 4);
        let p = AttenuationTensor {
            p: vec![vec![Rgb::splat(0.5); 4]],
        };
        let r = TargetAppearance {
            r: vec![Rgb::splat(0.6); 4],
            provenance: "x".into(),
        };
        let cfg = OptimizerConfig {
            stop_tolerance: 0.0,
            ..OptimizerConfig::default()
        };
        let mut run = DistributedRun::new(cfg, &charts, &r, &p, vec![Rgb::ZERO]);
        let mut src = FailingSource { after: 3, calls: 0 };
        let err = run.run(&mut src).unwrap_err();
        assert!(matches!(err, OptimizerError::Capture { iteration: 3, .. }));
        assert_eq!(run.trace().iterations.len(), 3, "trace preserved");
        assert!(matches!(
            run.trace().stop,
            StopReason::CaptureFailed { at_iteration: 3, .. }
        ));
    }
}
