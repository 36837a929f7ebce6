//! Evaluation: RMS contrast, ANSI-style checker contrast, rendered views,
//! and trace export.

use crate::capture::{CaptureError, LightingState, NoiseModel, Simulator};
use crate::color::Rgb;
use crate::config::ViewCameraConfig;
use crate::emitters::Pose;
use crate::optimizer::OptimizerTrace;
use crate::raster::Image;
use crate::scene::{Pt3, SceneGraph};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Capture(#[from] CaptureError),
    #[error("target plane has {0} patches; a 4x4 checker needs at least 16")]
    TargetTooCoarse(usize),
}

/// Lighting conditions compared in the contrast experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Dark,
    Typical,
    Proposed,
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Condition::Dark => "dark",
            Condition::Typical => "typical",
            Condition::Proposed => "proposed",
        };
        f.write_str(s)
    }
}

/// Contrast measurements under one condition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContrastReport {
    pub condition: Condition,
    pub rms_contrast: f64,
    /// White:black mean luminance ratio; `f64::INFINITY` when the black
    /// cells read exactly zero.
    pub ansi_ratio: f64,
}

/// RMS contrast of a set of patch colors: population standard deviation of
/// luminance divided by its mean; zero mean defines zero contrast.
pub fn rms_contrast(values: &[Rgb]) -> f64 {
    assert!(!values.is_empty(), "region must be nonempty");
    let lum: Vec<f64> = values.iter().map(|v| v.luminance()).collect();
    let mean = lum.iter().sum::<f64>() / lum.len() as f64;
    if mean == 0.0 {
        return 0.0;
    }
    let var = lum.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / lum.len() as f64;
    var.sqrt() / mean
}

/// RMS contrast over a patch subset of a captured frame.
pub fn rms_contrast_of(frame_values: &[Rgb], region: &[usize]) -> f64 {
    let selected: Vec<Rgb> = region.iter().map(|&i| frame_values[i]).collect();
    rms_contrast(&selected)
}

/// Assignment of a planar target's patches to 4x4 checker cells.
/// Patches are binned by their position on the plane; a cell is "white"
/// when its (row + column) is even.
#[derive(Debug, Clone)]
pub struct CheckerLayout {
    pub white: Vec<usize>,
    pub black: Vec<usize>,
    /// cell index (0..16) per target patch, aligned with `patches`.
    pub cells: Vec<u32>,
    pub patches: Vec<usize>,
}

pub fn checker_layout(scene: &SceneGraph, target_patches: &[usize]) -> Result<CheckerLayout, MetricsError> {
    if target_patches.len() < 16 {
        return Err(MetricsError::TargetTooCoarse(target_patches.len()));
    }
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for &t in target_patches {
        let c = scene.patches[t].centroid;
        min_x = min_x.min(c.x);
        max_x = max_x.max(c.x);
        min_y = min_y.min(c.y);
        max_y = max_y.max(c.y);
    }
    let bin = |v: f64, lo: f64, hi: f64| -> u32 {
        if hi - lo < 1e-12 {
            return 0;
        }
        (((v - lo) / (hi - lo) * 4.0).floor() as i64).clamp(0, 3) as u32
    };
    let mut white = Vec::new();
    let mut black = Vec::new();
    let mut cells = Vec::with_capacity(target_patches.len());
    for &t in target_patches {
        let c = scene.patches[t].centroid;
        let col = bin(c.x, min_x, max_x);
        let row = bin(c.y, min_y, max_y);
        cells.push(row * 4 + col);
        if (row + col) % 2 == 0 {
            white.push(t);
        } else {
            black.push(t);
        }
    }
    Ok(CheckerLayout {
        white,
        black,
        cells,
        patches: target_patches.to_vec(),
    })
}

/// Mean-white over mean-black luminance ratio of a captured frame.
pub fn checker_ratio(frame_values: &[Rgb], layout: &CheckerLayout) -> f64 {
    let mean = |ids: &[usize]| -> f64 {
        ids.iter().map(|&i| frame_values[i].luminance()).sum::<f64>() / ids.len() as f64
    };
    let white = mean(&layout.white);
    let black = mean(&layout.black);
    if black == 0.0 {
        f64::INFINITY
    } else {
        white / black
    }
}

/// Render the 4x4 checker into the texture projector's image plane so white
/// cells land on white checker patches.
pub fn checker_texture(sim: &Simulator, layout: &CheckerLayout) -> Result<Image, MetricsError> {
    let tex = sim.texture_projector.ok_or(CaptureError::NoTextureProjector)?;
    let proj = &sim.projectors[tex];
    let foot = &sim.footprints[tex];
    let mut img = Image::filled(proj.image_size.0, proj.image_size.1, Rgb::ZERO);
    let mut cell_of = vec![None; sim.scene.patch_count()];
    for (i, &patch) in layout.patches.iter().enumerate() {
        cell_of[patch] = Some(layout.cells[i]);
    }
    for (p, hit) in foot.central.iter().enumerate() {
        if let Some(patch) = hit {
            if let Some(cell) = cell_of[*patch] {
                let (row, col) = (cell / 4, cell % 4);
                if (row + col) % 2 == 0 {
                    img.data[p] = Rgb::ONE;
                }
            }
        }
    }
    Ok(img)
}

/// Measure the ANSI-style checker contrast under a given lighting state.
/// The state should already include the checker texture.
pub fn ansi_contrast(
    sim: &Simulator,
    layout: &CheckerLayout,
    state: &LightingState,
) -> Result<f64, MetricsError> {
    let frame = sim.capture(state, &NoiseModel::NONE)?;
    Ok(checker_ratio(&frame.values, layout))
}

/// Pinhole camera for rendered views.
#[derive(Debug, Clone)]
pub struct ViewCamera {
    pub pose: Pose,
    pub fov: f64,
}

impl ViewCamera {
    pub fn from_config(cfg: &ViewCameraConfig) -> Self {
        ViewCamera {
            pose: Pose::look_at(Pt3::from(cfg.position), Pt3::from(cfg.look_at)),
            fov: cfg.fov_deg.to_radians(),
        }
    }
}

/// Splat per-patch outgoing radiosity through a pinhole view. Tone mapping
/// is a plain clamp; pixels seeing no patch are black.
pub fn render_view(
    scene: &SceneGraph,
    outgoing: &[Rgb],
    camera: &ViewCamera,
    resolution: (u32, u32),
) -> Image {
    assert!(resolution.0 >= 1 && resolution.1 >= 1);
    let (w, h) = resolution;
    let tan_h = (self::aspect_fov(camera.fov, w, h)).tan();
    let tan_v = (camera.fov / 2.0).tan();
    let data: Vec<Rgb> = (0..w as usize * h as usize)
        .into_par_iter()
        .map(|i| {
            let (u, v) = (i as u32 % w, i as u32 / w);
            let sx = (2.0 * (u as f64 + 0.5) / w as f64 - 1.0) * tan_h;
            let sy = (1.0 - 2.0 * (v as f64 + 0.5) / h as f64) * tan_v;
            let dir = camera.pose.forward.into_inner()
                + camera.pose.right.into_inner() * sx
                + camera.pose.up.into_inner() * sy;
            match scene.raycast(camera.pose.position, &dir) {
                Some(hit) => outgoing[hit.patch].clamp01(),
                None => Rgb::ZERO,
            }
        })
        .collect();
    Image {
        width: w,
        height: h,
        data,
    }
}

fn aspect_fov(fov_v: f64, w: u32, h: u32) -> f64 {
    // Horizontal half-angle from the vertical one and the aspect ratio.
    ((fov_v / 2.0).tan() * w as f64 / h as f64).atan()
}

/// Serialize a trace to comma-separated text with the stable column set
/// (t, chart, mean_abs_e, G, node, channel, x). Rows are ordered by
/// (t, node, channel, chart); floats use shortest round-trip formatting, so
/// re-export is byte-identical.
pub fn trace_to_csv(trace: &OptimizerTrace) -> String {
    let mut out = String::from("t,chart,mean_abs_e,G,node,channel,x\n");
    const CH: [&str; 3] = ["r", "g", "b"];
    for it in &trace.iterations {
        for (node, x) in &it.inputs {
            for c in 0..3 {
                for (chart, e) in it.chart_mean_abs_e.iter().enumerate() {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{},{}",
                        it.t, chart, e[c], it.g_total, node, CH[c], x[c]
                    );
                }
            }
        }
    }
    out
}

pub fn export_trace(trace: &OptimizerTrace, path: &Path) -> Result<(), MetricsError> {
    assert!(!trace.iterations.is_empty(), "trace must be nonempty");
    std::fs::write(path, trace_to_csv(trace)).map_err(|source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    })
}
