use relight_core::calibration::*;
use relight_core::capture::*;
use relight_core::config::*;
use relight_core::optimizer::*;
use relight_core::pipeline::*;

#[test]
fn dbg_tune() {
    let cfg = SceneConfig::default();
    let mut sim = Simulator::from_config(&cfg, 7).unwrap();
    let bundle = calibrate(&mut sim, &cfg, 7).unwrap();
    println!("nodes: {}", bundle.nodes.len());
    for n in &bundle.nodes {
        println!(
            "  node {} proj {} region ({},{})-({},{}) chart {:?}",
            n.node_id, n.projector_id, n.pixel_region.u0, n.pixel_region.v0,
            n.pixel_region.u1, n.pixel_region.v1, n.assigned_chart
        );
    }
    // charts covered per projector
    let charts = ChartSet::from_scene(&sim.scene).unwrap();
    for (pi, foot) in sim.footprints.iter().enumerate() {
        let mut covered = std::collections::BTreeSet::new();
        for hit in foot.central.iter().flatten() {
            if let Some((m, _)) = sim.scene.patches[*hit].chart_tag() {
                covered.insert(m);
            }
        }
        println!("proj {pi} covers charts {covered:?}");
    }
    // long-run convergence floor (closed loop)
    let opt = OptimizerConfig { max_iterations: 400, stop_tolerance: 0.0, ..OptimizerConfig::default() };
    let outcome = reproduce(&sim, &bundle, 0, opt, NoiseModel::NONE).unwrap();
    let gs: Vec<f64> = outcome.trace.iterations.iter().map(|it| it.g_total).collect();
    println!("G[0]={:.4} G[5]={:.4} G[25]={:.4} G[50]={:.4} G[100]={:.4} G[400]={:.4}",
        gs[0], gs[5], gs[25.min(gs.len()-1)], gs[50.min(gs.len()-1)], gs[100.min(gs.len()-1)], gs[gs.len()-1]);
    println!("reduction@25 = {:.2}%", 100.0*(1.0 - gs[25.min(gs.len()-1)]/gs[0]));
    println!("final x:");
    for (nid, x) in &outcome.trace.iterations.last().unwrap().inputs {
        println!("  node {nid}: {:.3} {:.3} {:.3}", x[0], x[1], x[2]);
    }
    // per chart residual at the end
    for (m, e) in outcome.trace.iterations.last().unwrap().chart_mean_abs_e.iter().enumerate() {
        println!("chart {m}: |e| = {:.4} {:.4} {:.4}", e[0], e[1], e[2]);
    }
}
