//! The three pipeline stages behind the subcommands. Each stage reads its
//! inputs from files (config, bundle) and writes its outputs under --out,
//! so stages are independently rerunnable.

use anyhow::{anyhow, bail, Context, Result};
use relight_core::calibration::{CalibrationBundle, CalibrationError};
use relight_core::capture::{CaptureError, NoiseModel, Simulator};
use relight_core::color::Rgb;
use relight_core::config::{ConfigError, SceneConfig, TargetKind, ViewCameraConfig};
use relight_core::metrics::{export_trace, render_view, Condition, ViewCamera};
use relight_core::optimizer::{OptimizerConfig, OptimizerError};
use relight_core::pipeline::{
    self, apply_masking_and_compensation, calibrate, condition_state, install_bundle, reproduce,
    PipelineError,
};
use relight_core::raster::Image;
use serde::Serialize;
use std::path::{Path, PathBuf};

/// Map an error chain to the documented exit codes.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return crate::EXIT_CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<OptimizerError>() {
            return match e {
                OptimizerError::NonFinite(_) => crate::EXIT_NUMERICAL,
                OptimizerError::Capture { .. } => crate::EXIT_PRECONDITION,
            };
        }
        if let Some(e) = cause.downcast_ref::<PipelineError>() {
            return match e {
                PipelineError::Optimizer(OptimizerError::NonFinite(_)) => crate::EXIT_NUMERICAL,
                _ => crate::EXIT_PRECONDITION,
            };
        }
        if cause.downcast_ref::<CalibrationError>().is_some()
            || cause.downcast_ref::<CaptureError>().is_some()
        {
            return crate::EXIT_PRECONDITION;
        }
    }
    1
}

fn load_config(path: &Option<PathBuf>) -> Result<SceneConfig> {
    let cfg = match path {
        Some(p) => SceneConfig::load(p)?,
        None => SceneConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn bundle_path(out: &Path) -> PathBuf {
    out.join("bundle.json")
}

fn build_sim(cfg: &SceneConfig, seed: u64) -> Result<Simulator> {
    Simulator::from_config(cfg, seed).context("building the simulator")
}

fn optimizer_config(
    cfg: &SceneConfig,
    iterations: Option<usize>,
    epsilon: Option<f64>,
) -> Result<OptimizerConfig> {
    let mut opt = OptimizerConfig::from_settings(&cfg.optimizer);
    if let Some(it) = iterations {
        opt.max_iterations = it;
    }
    if let Some(eps) = epsilon {
        if eps <= 0.0 {
            return Err(anyhow!(ConfigError::Invalid(format!(
                "epsilon must be > 0, got {eps}"
            ))));
        }
        opt.epsilon = eps;
    }
    Ok(opt)
}

fn view_camera(cfg: &SceneConfig) -> ViewCamera {
    let fallback = ViewCameraConfig {
        position: [
            cfg.room.size[0] / 2.0,
            0.12,
            cfg.room.size[2] * 0.65,
        ],
        look_at: [cfg.room.size[0] / 2.0, cfg.room.size[1] * 0.8, cfg.room.size[2] * 0.3],
        fov_deg: 70.0,
    };
    ViewCamera::from_config(cfg.view_camera.as_ref().unwrap_or(&fallback))
}

fn write_render(
    sim: &Simulator,
    camera: &ViewCamera,
    state: &relight_core::capture::LightingState,
    path: &Path,
) -> Result<()> {
    let outgoing = sim.outgoing(state)?;
    let img = render_view(&sim.scene, &outgoing, camera, (320, 240));
    img.write_ppm(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn cmd_calibrate(config: &Option<PathBuf>, seed: u64, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut sim = build_sim(&cfg, seed)?;
    let bundle = calibrate(&mut sim, &cfg, seed)?;
    let path = bundle_path(out);
    bundle.save(&path)?;
    println!(
        "calibrated: {} nodes, {} charts x {} patches, {} reference(s) -> {}",
        bundle.nodes.len(),
        bundle.charts.len(),
        bundle.charts.first().map(|c| c.patch_ids.len()).unwrap_or(0),
        bundle.references.len(),
        path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct ReproduceReport {
    reference: String,
    iterations: usize,
    g_init: f64,
    g_final: f64,
    g_reduction: f64,
    per_chart_mean_abs_e: Vec<[f64; 3]>,
}

pub fn cmd_reproduce(
    config: &Option<PathBuf>,
    seed: u64,
    out: &Path,
    iterations: Option<usize>,
    epsilon: Option<f64>,
    reference: &str,
) -> Result<()> {
    let cfg = load_config(config)?;
    let opt = optimizer_config(&cfg, iterations, epsilon)?;
    let path = bundle_path(out);
    if !path.exists() {
        bail!(CalibrationError::BundleIo {
            action: "read",
            path: path.display().to_string(),
            source: std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "run `relight calibrate` first",
            ),
        });
    }
    let bundle = CalibrationBundle::load(&path)?;
    let mut sim = build_sim(&cfg, seed)?;
    install_bundle(&mut sim, &bundle);
    let camera = view_camera(&cfg);
    let noise = NoiseModel::seeded(cfg.capture.noise_stddev, seed ^ 0x5eed);

    let selected: Vec<usize> = if reference == "all" {
        (0..bundle.references.len()).collect()
    } else {
        let idx = bundle
            .references
            .iter()
            .position(|r| r.provenance == reference)
            .ok_or_else(|| anyhow!("unknown reference {reference:?}"))?;
        vec![idx]
    };

    for idx in selected {
        let outcome = reproduce(&sim, &bundle, idx, opt, noise.derive(idx as u64))?;
        let name = outcome.reference_name.replace(|c: char| !c.is_alphanumeric(), "-");
        export_trace(&outcome.trace, &out.join(format!("trace_{name}.csv")))?;

        // Rendered views: reference lighting, reproduced lighting, and the
        // conventional initializer's lighting.
        let mut ref_state = relight_core::capture::LightingState::dark(sim.nodes.len());
        ref_state.led_scale = 1.0;
        ref_state.include_projector_floor = false;
        // Reference variants change the LED; rebuild per variant.
        let mut ref_sim = build_sim(&cfg, seed)?;
        install_bundle(&mut ref_sim, &bundle);
        if idx > 0 {
            if let (Some(led_cfg), Some(variant)) =
                (cfg.led.as_ref(), cfg.reference_variants.get(idx - 1))
            {
                let mut led = led_cfg.clone();
                if let Some(pos) = variant.position {
                    led.position = pos;
                }
                if let Some(t) = variant.color_temperature {
                    led.color_temperature = t;
                }
                ref_sim.set_led(relight_core::emitters::LedLuminaire::from_config(&led));
            }
        }
        write_render(&ref_sim, &camera, &ref_state, &out.join(format!("reference_{name}.ppm")))?;

        let mut repro_state = relight_core::capture::LightingState::dark(sim.nodes.len());
        repro_state.node_inputs = outcome.x_final.clone();
        write_render(&sim, &camera, &repro_state, &out.join(format!("reproduced_{name}.ppm")))?;

        let mut conv_state = relight_core::capture::LightingState::dark(sim.nodes.len());
        conv_state.node_inputs = outcome.x_init.clone();
        write_render(&sim, &camera, &conv_state, &out.join(format!("conventional_{name}.ppm")))?;

        let last = outcome
            .trace
            .iterations
            .last()
            .ok_or_else(|| anyhow!("empty trace"))?;
        let report = ReproduceReport {
            reference: outcome.reference_name.clone(),
            iterations: outcome.trace.iterations.len(),
            g_init: outcome.g_init,
            g_final: outcome.g_final,
            g_reduction: 1.0 - outcome.g_final / outcome.g_init.max(f64::MIN_POSITIVE),
            per_chart_mean_abs_e: last.chart_mean_abs_e.iter().map(|e| e.0).collect(),
        };
        let report_path = out.join(format!("report_{name}.json"));
        std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)
            .with_context(|| format!("writing {}", report_path.display()))?;
        println!(
            "reproduce[{}]: G {:.6e} -> {:.6e} ({:.1}% reduction) in {} iterations",
            outcome.reference_name,
            report.g_init,
            report.g_final,
            100.0 * report.g_reduction,
            report.iterations,
        );
        for (m, e) in last.chart_mean_abs_e.iter().enumerate() {
            println!(
                "  chart {m}: mean |e| = {:.5} / {:.5} / {:.5}",
                e[0], e[1], e[2]
            );
        }
    }
    Ok(())
}

/// Pixel-space checker over the texture projector's target footprint, used
/// as the default PM content.
fn default_content(sim: &Simulator) -> Result<Image> {
    let tex = sim
        .texture_projector
        .ok_or(PipelineError::NoTextureProjector)?;
    let proj = &sim.projectors[tex];
    let foot = &sim.footprints[tex];
    let targets: std::collections::HashSet<usize> =
        sim.scene.target_patches().into_iter().collect();
    let (w, h) = proj.image_size;
    let mut img = Image::filled(w, h, Rgb::ZERO);
    let block = (w.max(h) / 8).max(1);
    for (p, hit) in foot.central.iter().enumerate() {
        if matches!(hit, Some(k) if targets.contains(k)) {
            let (u, v) = (p as u32 % w, p as u32 / w);
            if ((u / block) + (v / block)) % 2 == 0 {
                img.data[p] = Rgb::ONE;
            }
        }
    }
    Ok(img)
}

/// Clamp provided content to the target silhouette so PM content lights
/// only the target.
fn mask_content_to_target(sim: &Simulator, mut img: Image) -> Result<Image> {
    let tex = sim
        .texture_projector
        .ok_or(PipelineError::NoTextureProjector)?;
    let proj = &sim.projectors[tex];
    if (img.width, img.height) != proj.image_size {
        bail!(CaptureError::TextureSizeMismatch {
            got: (img.width, img.height),
            want: proj.image_size,
        });
    }
    let foot = &sim.footprints[tex];
    let targets: std::collections::HashSet<usize> =
        sim.scene.target_patches().into_iter().collect();
    for (p, hit) in foot.central.iter().enumerate() {
        if !matches!(hit, Some(k) if targets.contains(k)) {
            img.data[p] = Rgb::ZERO;
        }
    }
    Ok(img)
}

#[derive(Serialize)]
struct PmReport {
    masked_pixels: usize,
    darkened_patches: usize,
    uncompensatable_patches: usize,
    compensation_nodes: usize,
    reports: Vec<ContrastEntry>,
}

#[derive(Serialize)]
struct ContrastEntry {
    condition: Condition,
    rms_contrast: f64,
    /// From the planar-target variant of the scene.
    ansi_ratio: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_pm(
    config: &Option<PathBuf>,
    seed: u64,
    out: &Path,
    texture: Option<&Path>,
    conditions: &[Condition],
    iterations: Option<usize>,
    epsilon: Option<f64>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let opt = optimizer_config(&cfg, iterations, epsilon)?;
    let path = bundle_path(out);
    if !path.exists() {
        bail!(CalibrationError::BundleIo {
            action: "read",
            path: path.display().to_string(),
            source: std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "run `relight calibrate` first",
            ),
        });
    }
    let mut bundle = CalibrationBundle::load(&path)?;
    let mut sim = build_sim(&cfg, seed)?;
    let noise = NoiseModel::seeded(cfg.capture.noise_stddev, seed ^ 0x9a5e);

    // Margin masking + compensation on the content scene, then reoptimize.
    let setup = apply_masking_and_compensation(&mut sim, &mut bundle, &cfg, &noise)?;
    println!(
        "masking: {} pixels off, {} darkened patches, {} compensation node(s), {} uncompensatable",
        setup.masked_pixels,
        setup.darkened_patches.len(),
        setup.compensation_nodes.len(),
        setup.uncompensatable.len()
    );
    let outcome = reproduce(&sim, &bundle, 0, opt, noise.derive(1))?;
    let x_pm = outcome.x_final.clone();

    let content = match texture {
        Some(p) => {
            let img = Image::read_ppm(p).with_context(|| format!("reading {}", p.display()))?;
            mask_content_to_target(&sim, img)?
        }
        None => default_content(&sim)?,
    };

    // ANSI variant: the block target replaced by a planar surface, with its
    // own calibration and optimization.
    let mut plane_cfg = cfg.clone();
    if let Some(t) = plane_cfg.target.as_mut() {
        // The plane sits where the block target's base was.
        t.center[2] -= t.half_extents[2];
        t.kind = TargetKind::Plane;
        t.half_extents = [0.1, 0.1, 0.0];
        t.subdiv = t.subdiv.max(8);
    }
    let mut plane_sim = build_sim(&plane_cfg, seed)?;
    let mut plane_bundle = calibrate(&mut plane_sim, &plane_cfg, seed)?;
    let plane_setup =
        apply_masking_and_compensation(&mut plane_sim, &mut plane_bundle, &plane_cfg, &noise)?;
    let _ = plane_setup;
    let plane_outcome = reproduce(&plane_sim, &plane_bundle, 0, opt, noise.derive(2))?;

    let camera = view_camera(&cfg);
    let mut entries = Vec::new();
    for &condition in conditions {
        let (rms, _frame) = pipeline::rms_under_condition(&sim, condition, &x_pm, &content)?;
        let ansi =
            pipeline::ansi_under_condition(&plane_sim, condition, &plane_outcome.x_final)?;
        let state = condition_state(&sim, condition, &x_pm, Some(content.clone()));
        write_render(&sim, &camera, &state, &out.join(format!("pm_{condition}.ppm")))?;
        println!("{condition}: RMS contrast {rms:.4}, ANSI ratio {ansi:.2}");
        entries.push(ContrastEntry {
            condition,
            rms_contrast: rms,
            ansi_ratio: ansi,
        });
    }
    let report = PmReport {
        masked_pixels: setup.masked_pixels,
        darkened_patches: setup.darkened_patches.len(),
        uncompensatable_patches: setup.uncompensatable.len(),
        compensation_nodes: setup.compensation_nodes.len(),
        reports: entries,
    };
    let report_path = out.join("contrast_report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)
        .with_context(|| format!("writing {}", report_path.display()))?;
    Ok(())
}
