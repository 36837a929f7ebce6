//! End-to-end orchestration: calibrate, reproduce, and the
//! projection-mapping evaluation with margin masking and compensation.

use crate::calibration::{
    assign_compensation, capture_reference_target, check_chart_coverage, feather_weights,
    measure_attenuation, measure_attenuation_columns, measure_black_offset, segment_nodes,
    AttenuationTensor, CalibrationBundle, CalibrationError, ChartSet, NodeRecord, BUNDLE_VERSION,
};
use crate::capture::{LightingState, NoiseModel, Simulator};
use crate::color::Rgb;
use crate::config::{ProjectorRole, SceneConfig};
use crate::emitters::{mask_target_with_margin, LedLuminaire, ProjectorKind, ProjectorNode};
use crate::metrics::{checker_layout, checker_ratio, checker_texture, rms_contrast_of, Condition,
    ContrastReport, MetricsError};
use crate::optimizer::{
    conventional_init, evaluate, DistributedRun, OptimizerConfig, OptimizerError, OptimizerTrace,
    SimulatorSource,
};
use crate::raster::Image;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Capture(#[from] crate::capture::CaptureError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("scene has no large-aperture projector for masking")]
    NoApertureProjector,
    #[error("scene has no texture projector")]
    NoTextureProjector,
}

/// Segment every luminaire projector into nodes with globally dense ids and
/// install them on the simulator.
pub fn segment_all_nodes(sim: &mut Simulator, charts: &ChartSet) -> usize {
    let mut nodes: Vec<ProjectorNode> = Vec::new();
    for (pi, proj) in sim.projectors.iter().enumerate() {
        if proj.role != ProjectorRole::Luminaire {
            continue;
        }
        for mut node in segment_nodes(proj, &sim.footprints[pi], charts) {
            node.node_id = nodes.len();
            nodes.push(node);
        }
    }
    let count = nodes.len();
    sim.set_nodes(nodes);
    count
}

/// Run the full measurement protocol and assemble the calibration bundle:
/// segmentation, black offset, attenuation, reference appearances (base LED
/// plus configured variants), feather weights.
pub fn calibrate(
    sim: &mut Simulator,
    config: &SceneConfig,
    seed: u64,
) -> Result<CalibrationBundle, PipelineError> {
    let charts = ChartSet::from_scene(&sim.scene)?;
    segment_all_nodes(sim, &charts);
    let feather = feather_weights(&sim.projectors, &sim.footprints, &sim.scene);
    sim.set_feather(feather.clone());
    check_chart_coverage(sim, &charts)?;

    let noise = NoiseModel::seeded(config.capture.noise_stddev, seed);
    let black = measure_black_offset(sim, &charts, &noise)?;
    let attenuation = measure_attenuation(sim, &charts, &black, &noise)?;

    let mut references =
        vec![capture_reference_target(sim, &charts, "base", &noise)?];
    let base_led = sim.led.clone();
    for (vi, variant) in config.reference_variants.iter().enumerate() {
        if let (Some(led_cfg), Some(_)) = (config.led.as_ref(), base_led.as_ref()) {
            let mut cfg = led_cfg.clone();
            if let Some(pos) = variant.position {
                cfg.position = pos;
            }
            if let Some(t) = variant.color_temperature {
                cfg.color_temperature = t;
            }
            sim.set_led(LedLuminaire::from_config(&cfg));
            references.push(capture_reference_target(
                sim,
                &charts,
                &variant.name,
                &noise.derive(0x0e0 + vi as u64),
            )?);
        }
    }
    if let Some(led) = base_led {
        sim.set_led(led);
    }

    Ok(CalibrationBundle {
        version: BUNDLE_VERSION,
        seed,
        charts: charts.charts,
        nodes: sim.nodes.iter().map(NodeRecord::from_node).collect(),
        black_offset: black,
        attenuation,
        references,
        feather,
    })
}

/// Everything a reproduction run produces.
pub struct ReproduceOutcome {
    pub trace: OptimizerTrace,
    pub x_init: Vec<Rgb>,
    pub x_final: Vec<Rgb>,
    /// Objective at the conventional initializer (first trace entry).
    pub g_init: f64,
    pub g_final: f64,
    pub reference_name: String,
}

/// Install the bundle's nodes and feathering on a freshly built simulator.
pub fn install_bundle(sim: &mut Simulator, bundle: &CalibrationBundle) {
    sim.set_nodes(bundle.nodes.iter().map(NodeRecord::to_node).collect());
    sim.set_feather(bundle.feather.clone());
}

/// Conventional initializer followed by the distributed run against the
/// given reference appearance.
pub fn reproduce(
    sim: &Simulator,
    bundle: &CalibrationBundle,
    reference_index: usize,
    opt: OptimizerConfig,
    noise: NoiseModel,
) -> Result<ReproduceOutcome, PipelineError> {
    let charts = bundle.chart_set();
    let reference = &bundle.references[reference_index];
    let assignments: Vec<Option<usize>> = bundle.nodes.iter().map(|n| n.assigned_chart).collect();
    let x_init = conventional_init(
        reference,
        &bundle.black_offset,
        &bundle.attenuation,
        &assignments,
        &charts,
    );
    let mut run = DistributedRun::new(opt, &charts, reference, &bundle.attenuation, x_init.clone());
    let mut source = SimulatorSource::new(sim, &charts, noise);
    run.run(&mut source)?;
    let x_final = run.current_inputs().to_vec();
    let trace = run.into_trace();
    Ok(ReproduceOutcome {
        g_init: trace.initial_g(),
        g_final: trace.final_g(),
        x_init,
        x_final,
        reference_name: reference.provenance.clone(),
        trace,
    })
}

/// Masking plus compensation state for the projection-mapping stage.
pub struct PmSetup {
    pub aperture_projector: usize,
    pub texture_projector: usize,
    pub masked_pixels: usize,
    pub darkened_patches: Vec<usize>,
    pub uncompensatable: Vec<usize>,
    pub compensation_nodes: Vec<usize>,
}

/// Apply margin masking to the large-aperture projector, register
/// compensation nodes on the texture projector, and re-measure the affected
/// attenuation columns. Mutates both the simulator and the bundle.
pub fn apply_masking_and_compensation(
    sim: &mut Simulator,
    bundle: &mut CalibrationBundle,
    config: &SceneConfig,
    noise: &NoiseModel,
) -> Result<PmSetup, PipelineError> {
    install_bundle(sim, bundle);
    let aperture = sim
        .projectors
        .iter()
        .position(|p| matches!(p.kind, ProjectorKind::LargeAperture(_)))
        .ok_or(PipelineError::NoApertureProjector)?;
    let texture = sim
        .texture_projector
        .ok_or(PipelineError::NoTextureProjector)?;
    let targets = sim.scene.target_patches();

    let mask_result = mask_target_with_margin(
        &sim.projectors[aperture],
        &sim.footprints[aperture],
        &sim.scene,
        &targets,
        config.masking.darkened_fraction,
    );
    let masked_pixels = mask_result.mask.off_count();
    sim.set_mask(aperture, mask_result.mask);

    let assignment = assign_compensation(
        &mask_result.darkened_patches,
        &sim.projectors[texture],
        &sim.footprints[texture],
        sim.nodes.len(),
    );
    let mut nodes = sim.nodes.clone();
    let mut compensation_nodes = Vec::new();
    for mut node in assignment.nodes {
        node.node_id = nodes.len();
        // Hand the compensation node the chart its pixels serve, if any:
        // the chart with most of its patches in the darkened set.
        node.assigned_chart = dominant_chart(&bundle.chart_set(), &mask_result.darkened_patches);
        compensation_nodes.push(node.node_id);
        nodes.push(node);
    }
    sim.set_nodes(nodes);

    // Columns affected by the mask (nodes of the aperture projector) plus
    // the freshly added compensation nodes get re-measured.
    let charts = bundle.chart_set();
    let mut stale: Vec<usize> = sim
        .nodes
        .iter()
        .filter(|n| n.projector_id == aperture)
        .map(|n| n.node_id)
        .collect();
    stale.extend(&compensation_nodes);
    let columns =
        measure_attenuation_columns(sim, &charts, &bundle.black_offset, &stale, noise)?;
    let mut p = bundle.attenuation.p.clone();
    p.resize(sim.nodes.len(), Vec::new());
    for (node_id, column) in stale.iter().zip(columns) {
        p[*node_id] = column;
    }
    bundle.attenuation = AttenuationTensor { p };
    bundle.nodes = sim.nodes.iter().map(NodeRecord::from_node).collect();

    Ok(PmSetup {
        aperture_projector: aperture,
        texture_projector: texture,
        masked_pixels,
        darkened_patches: mask_result.darkened_patches,
        uncompensatable: assignment.uncompensatable,
        compensation_nodes,
    })
}

/// Chart with the largest overlap with the given patch set, if any overlap.
fn dominant_chart(charts: &ChartSet, patches: &[usize]) -> Option<usize> {
    let set: std::collections::BTreeSet<usize> = patches.iter().copied().collect();
    charts
        .charts
        .iter()
        .map(|c| (c.id, c.patch_ids.iter().filter(|p| set.contains(p)).count()))
        .filter(|&(_, n)| n > 0)
        .max_by_key(|&(_, n)| n)
        .map(|(id, _)| id)
}

/// The three lighting conditions of the contrast experiments, all with the
/// texture projector showing `content`.
pub fn condition_state(
    sim: &Simulator,
    condition: Condition,
    x_proposed: &[Rgb],
    content: Option<Image>,
) -> LightingState {
    let mut state = LightingState::dark(sim.nodes.len());
    state.texture = content;
    match condition {
        Condition::Dark => {}
        Condition::Typical => state.led_scale = 1.0,
        Condition::Proposed => state.node_inputs = x_proposed.to_vec(),
    }
    state
}

/// RMS contrast over the target region of a content frame under one
/// condition. Also returns the full captured frame.
pub fn rms_under_condition(
    sim: &Simulator,
    condition: Condition,
    x_proposed: &[Rgb],
    content: &Image,
) -> Result<(f64, Vec<Rgb>), PipelineError> {
    let targets = sim.scene.target_patches();
    let state = condition_state(sim, condition, x_proposed, Some(content.clone()));
    let frame = sim.capture(&state, &NoiseModel::NONE)?;
    Ok((rms_contrast_of(&frame.values, &targets), frame.values))
}

/// ANSI checker ratio under one condition: a 4x4 checker is rendered into
/// the texture projector's image plane over the (planar) target and the
/// white/black cell luminances are compared.
pub fn ansi_under_condition(
    sim: &Simulator,
    condition: Condition,
    x_proposed: &[Rgb],
) -> Result<f64, PipelineError> {
    let targets = sim.scene.target_patches();
    let layout = checker_layout(&sim.scene, &targets)?;
    let checker = checker_texture(sim, &layout)?;
    let state = condition_state(sim, condition, x_proposed, Some(checker));
    let frame = sim.capture(&state, &NoiseModel::NONE)?;
    Ok(checker_ratio(&frame.values, &layout))
}

/// Both contrast figures from a single scene (planar target required for a
/// meaningful ANSI number).
pub fn contrast_report(
    sim: &Simulator,
    condition: Condition,
    x_proposed: &[Rgb],
    content: &Image,
) -> Result<(ContrastReport, Vec<Rgb>), PipelineError> {
    let (rms, frame) = rms_under_condition(sim, condition, x_proposed, content)?;
    let ansi = ansi_under_condition(sim, condition, x_proposed)?;
    Ok((
        ContrastReport {
            condition,
            rms_contrast: rms,
            ansi_ratio: ansi,
        },
        frame,
    ))
}

/// Mean signed and absolute per-channel error of a captured frame against a
/// reference frame, over the given patches.
pub fn frame_error(
    frame: &[Rgb],
    reference: &[Rgb],
    patches: &[usize],
) -> (f64, f64) {
    let mut signed = 0.0;
    let mut absolute = 0.0;
    let mut n = 0usize;
    for &pid in patches {
        for c in 0..3 {
            let e = frame[pid][c] - reference[pid][c];
            signed += e;
            absolute += e.abs();
            n += 1;
        }
    }
    (signed / n as f64, absolute / n as f64)
}

/// Objective value of a node input vector under the bundle's forward model
/// captured through the simulator (closed loop, noiseless).
pub fn objective_of(
    sim: &Simulator,
    bundle: &CalibrationBundle,
    reference_index: usize,
    x: &[Rgb],
) -> Result<f64, PipelineError> {
    let charts = bundle.chart_set();
    let mut state = LightingState::dark(sim.nodes.len());
    state.node_inputs = x.to_vec();
    let frame = sim.capture(&state, &NoiseModel::NONE)?;
    let y = frame.select(&charts.flat_patch_ids());
    let (_, _, g) = evaluate(&bundle.references[reference_index].r, &y);
    Ok(g)
}
