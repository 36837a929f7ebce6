//! Measurement protocol: node segmentation, black offsets, attenuation
//! factors, reference-target acquisition, feathering, and compensation
//! assignment after margin masking.

use crate::capture::{CaptureError, LightingState, NoiseModel, Simulator};
use crate::color::Rgb;
use crate::emitters::{Footprint, ProjectorModel, ProjectorNode, PixelRect};
use crate::scene::{Pt3, SceneGraph};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error(transparent)]
    Capture(#[from] CaptureError),
    #[error("chart {0} is not covered by any projector node")]
    UncoveredChart(usize),
    #[error("no color charts in the scene")]
    NoCharts,
    #[error("charts have differing patch counts ({0} vs {1})")]
    RaggedCharts(usize, usize),
    #[error("cannot {action} bundle at {path}: {source}")]
    BundleIo {
        action: &'static str,
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bundle parse error: {0}")]
    BundleFormat(#[from] serde_json::Error),
    #[error("bundle version {0} is not supported (expected {BUNDLE_VERSION})")]
    BundleVersion(u32),
}

/// One color chart: its scene patches in slot order and their reflectances.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColorChart {
    pub id: usize,
    pub patch_ids: Vec<usize>,
    pub reflectances: Vec<Rgb>,
    pub centroid: [f64; 3],
}

/// All charts of a scene, flattened into a stable patch order
/// (chart-major, slot-minor).
#[derive(Debug, Clone)]
pub struct ChartSet {
    pub charts: Vec<ColorChart>,
}

impl ChartSet {
    pub fn from_scene(scene: &SceneGraph) -> Result<ChartSet, CalibrationError> {
        let mut by_chart: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
        for p in &scene.patches {
            if let Some((chart, slot)) = p.chart_tag() {
                by_chart.entry(chart).or_default().push((slot, p.id));
            }
        }
        if by_chart.is_empty() {
            return Err(CalibrationError::NoCharts);
        }
        let mut charts = Vec::new();
        let mut expected = None;
        for (id, mut slots) in by_chart {
            slots.sort_unstable();
            let patch_ids: Vec<usize> = slots.iter().map(|&(_, pid)| pid).collect();
            match expected {
                None => expected = Some(patch_ids.len()),
                Some(k) if k != patch_ids.len() => {
                    return Err(CalibrationError::RaggedCharts(k, patch_ids.len()))
                }
                _ => {}
            }
            let reflectances = patch_ids
                .iter()
                .map(|&pid| scene.patches[pid].reflectance)
                .collect();
            let centroid = patch_ids
                .iter()
                .fold(Pt3::origin(), |acc, &pid| {
                    acc + scene.patches[pid].centroid.coords / patch_ids.len() as f64
                });
            charts.push(ColorChart {
                id,
                patch_ids,
                reflectances,
                centroid: [centroid.x, centroid.y, centroid.z],
            });
        }
        Ok(ChartSet { charts })
    }

    /// Patches per chart (uniform across charts).
    pub fn patches_per_chart(&self) -> usize {
        self.charts[0].patch_ids.len()
    }

    pub fn total_patches(&self) -> usize {
        self.charts.len() * self.patches_per_chart()
    }

    /// Scene patch ids in flat (chart-major) order.
    pub fn flat_patch_ids(&self) -> Vec<usize> {
        self.charts
            .iter()
            .flat_map(|c| c.patch_ids.iter().copied())
            .collect()
    }

    /// Chart index of a flat patch index.
    pub fn chart_of(&self, flat: usize) -> usize {
        flat / self.patches_per_chart()
    }

    /// Flat index range of one chart.
    pub fn chart_range(&self, chart: usize) -> std::ops::Range<usize> {
        let k = self.patches_per_chart();
        chart * k..(chart + 1) * k
    }
}

/// Black offset d: chart-patch readout with every node at input zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlackOffset {
    pub d: Vec<Rgb>,
}

/// Attenuation factors p[node][chart_patch]: each node's full-white readout
/// minus the black offset. Includes inter-reflection paths by construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttenuationTensor {
    pub p: Vec<Vec<Rgb>>,
}

impl AttenuationTensor {
    pub fn node_count(&self) -> usize {
        self.p.len()
    }
}

/// Chart-patch readout under a reference luminaire.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetAppearance {
    pub r: Vec<Rgb>,
    pub provenance: String,
}

/// Per-projector, per-pixel blending weights. `None` means all ones.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatherMask {
    pub weights: Vec<Option<Vec<f64>>>,
}

impl FeatherMask {
    /// All-ones mask for a projector set.
    pub fn uniform(projectors: &[ProjectorModel]) -> FeatherMask {
        FeatherMask {
            weights: vec![None; projectors.len()],
        }
    }

    pub fn weights(&self, projector_id: usize) -> Option<&[f64]> {
        self.weights[projector_id].as_deref()
    }
}

/// Divide a projector's image into rectangular nodes, one per covered chart.
/// A projector covering no chart becomes a single whole-image node.
pub fn segment_nodes(
    projector: &ProjectorModel,
    foot: &Footprint,
    charts: &ChartSet,
) -> Vec<ProjectorNode> {
    let (w, _h) = foot.image_size;
    // Pixel clusters per covered chart.
    let patch_chart: BTreeMap<usize, usize> = charts
        .charts
        .iter()
        .flat_map(|c| c.patch_ids.iter().map(move |&pid| (pid, c.id)))
        .collect();
    let mut clusters: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for (p, hit) in foot.central.iter().enumerate() {
        if let Some(patch) = hit {
            if let Some(&chart) = patch_chart.get(patch) {
                clusters
                    .entry(chart)
                    .or_default()
                    .push(((p as u32 % w) as f64, (p as u32 / w) as f64));
            }
        }
    }
    // Marginal spill onto a chart (a handful of pixels at the frustum edge)
    // does not warrant a node of its own.
    let min_pixels = 4.max(charts.patches_per_chart() / 3);
    clusters.retain(|_, px| px.len() >= min_pixels);
    let full = PixelRect::full(foot.image_size);
    if clusters.is_empty() {
        return vec![ProjectorNode {
            projector_id: projector.id,
            node_id: 0,
            pixel_region: full,
            pixel_mask: None,
            assigned_chart: None,
            input: Rgb::ZERO,
        }];
    }

    let cluster_list: Vec<Cluster> = clusters
        .into_iter()
        .map(|(chart, px)| {
            let n = px.len() as f64;
            let (su, sv) = px.iter().fold((0.0, 0.0), |(a, b), &(u, v)| (a + u, b + v));
            let (min_u, max_u) = px.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &(u, _)| {
                (a.min(u), b.max(u))
            });
            let (min_v, max_v) = px.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &(_, v)| {
                (a.min(v), b.max(v))
            });
            Cluster {
                chart,
                centroid: (su / n, sv / n),
                min: (min_u, min_v),
                max: (max_u, max_v),
            }
        })
        .collect();

    let mut regions = Vec::new();
    split_rect(full, &cluster_list, &mut regions);
    regions.sort_by_key(|(rect, _)| (rect.v0, rect.u0));
    regions
        .into_iter()
        .enumerate()
        .map(|(i, (rect, chart))| ProjectorNode {
            projector_id: projector.id,
            node_id: i,
            pixel_region: rect,
            pixel_mask: None,
            assigned_chart: Some(chart),
            input: Rgb::ZERO,
        })
        .collect()
}

/// One chart's pixel cluster in image space.
#[derive(Debug, Clone)]
struct Cluster {
    chart: usize,
    centroid: (f64, f64),
    min: (f64, f64),
    max: (f64, f64),
}

fn axis_of(c: &Cluster, along_u: bool) -> (f64, f64, f64) {
    if along_u {
        (c.centroid.0, c.min.0, c.max.0)
    } else {
        (c.centroid.1, c.min.1, c.max.1)
    }
}

/// Recursively bisect `rect` so each half keeps a whole group of chart
/// clusters, until one chart remains per rectangle. Cuts are placed in the
/// clearance between cluster extents whenever one exists, so a cut never
/// slices through a chart's pixels.
fn split_rect(rect: PixelRect, clusters: &[Cluster], out: &mut Vec<(PixelRect, usize)>) {
    if clusters.len() <= 1 {
        if let Some(c) = clusters.first() {
            out.push((rect, c.chart));
        }
        return;
    }
    if rect.u1 - rect.u0 < 2 && rect.v1 - rect.v0 < 2 {
        out.push((rect, clusters[0].chart));
        return;
    }
    let spread = |along_u: bool| {
        let (lo, hi) = clusters
            .iter()
            .map(|c| axis_of(c, along_u).0)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
                (a.min(v), b.max(v))
            });
        hi - lo
    };
    let primary_u = spread(true) >= spread(false);

    // Prefer an axis where the groups' pixel extents have real clearance.
    let mut fallback: Option<(bool, f64, usize, Vec<Cluster>)> = None;
    for along_u in [primary_u, !primary_u] {
        let thin = if along_u {
            rect.u1 - rect.u0 < 2
        } else {
            rect.v1 - rect.v0 < 2
        };
        if thin {
            continue;
        }
        let mut sorted = clusters.to_vec();
        sorted.sort_by(|a, b| {
            axis_of(a, along_u)
                .0
                .partial_cmp(&axis_of(b, along_u).0)
                .unwrap()
        });
        // Best clearance between the running max extent and the next min.
        let mut run_max = axis_of(&sorted[0], along_u).2;
        let (mut best_gap, mut best_idx, mut best_cut) = (f64::NEG_INFINITY, 1, 0.0);
        for i in 1..sorted.len() {
            let (_, min_i, max_i) = axis_of(&sorted[i], along_u);
            let gap = min_i - run_max;
            if gap > best_gap {
                best_gap = gap;
                best_idx = i;
                best_cut = 0.5 * (run_max + min_i);
            }
            run_max = run_max.max(max_i);
        }
        if best_gap >= 1.0 {
            recurse_split(rect, &sorted, along_u, best_idx, best_cut, out);
            return;
        }
        if fallback.is_none() {
            // Centroid-gap cut as a last resort (may slice a cluster).
            let coordc = |c: &Cluster| axis_of(c, along_u).0;
            let (mut g, mut idx) = (f64::NEG_INFINITY, 1);
            for i in 1..sorted.len() {
                let gap = coordc(&sorted[i]) - coordc(&sorted[i - 1]);
                if gap > g {
                    g = gap;
                    idx = i;
                }
            }
            let cut = 0.5 * (coordc(&sorted[idx - 1]) + coordc(&sorted[idx]));
            fallback = Some((along_u, cut, idx, sorted));
        }
    }
    let (along_u, cut, idx, sorted) = fallback.expect("at least one axis is cuttable");
    recurse_split(rect, &sorted, along_u, idx, cut, out);
}

fn recurse_split(
    rect: PixelRect,
    sorted: &[Cluster],
    along_u: bool,
    split_idx: usize,
    cut: f64,
    out: &mut Vec<(PixelRect, usize)>,
) {
    let (lo_list, hi_list) = sorted.split_at(split_idx);
    let (a, b) = if along_u {
        let cut_px = (cut.round() as u32).clamp(rect.u0 + 1, rect.u1.saturating_sub(1));
        (
            PixelRect { u1: cut_px, ..rect },
            PixelRect { u0: cut_px, ..rect },
        )
    } else {
        let cut_px = (cut.round() as u32).clamp(rect.v0 + 1, rect.v1.saturating_sub(1));
        (
            PixelRect { v1: cut_px, ..rect },
            PixelRect { v0: cut_px, ..rect },
        )
    };
    split_rect(a, lo_list, out);
    split_rect(b, hi_list, out);
}

/// Verify every chart is reachable by at least one node footprint.
pub fn check_chart_coverage(
    sim: &Simulator,
    charts: &ChartSet,
) -> Result<(), CalibrationError> {
    let mut covered: BTreeSet<usize> = BTreeSet::new();
    for node in &sim.nodes {
        let foot = &sim.footprints[node.projector_id];
        let w = foot.image_size.0;
        for (p, hit) in foot.central.iter().enumerate() {
            let (u, v) = (p as u32 % w, p as u32 / w);
            if !node.covers_pixel(u, v, w) {
                continue;
            }
            if let Some(patch) = hit {
                if let Some((chart, _)) = sim.scene.patches[*patch].chart_tag() {
                    covered.insert(chart);
                }
            }
        }
    }
    for chart in &charts.charts {
        if !covered.contains(&chart.id) {
            return Err(CalibrationError::UncoveredChart(chart.id));
        }
    }
    Ok(())
}

/// Capture the black offset: reference light off, every node at zero.
pub fn measure_black_offset(
    sim: &Simulator,
    charts: &ChartSet,
    noise: &NoiseModel,
) -> Result<BlackOffset, CalibrationError> {
    let state = LightingState::dark(sim.nodes.len());
    let frame = sim.capture(&state, &noise.derive(0x0b1a_c0ff))?;
    Ok(BlackOffset {
        d: frame.select(&charts.flat_patch_ids()),
    })
}

/// Capture attenuation columns for the given nodes: one capture per node
/// with that node at full white and all others at zero, minus the black
/// offset. Negative noise residue clamps to zero.
pub fn measure_attenuation_columns(
    sim: &Simulator,
    charts: &ChartSet,
    black: &BlackOffset,
    node_ids: &[usize],
    noise: &NoiseModel,
) -> Result<Vec<Vec<Rgb>>, CalibrationError> {
    let flat = charts.flat_patch_ids();
    let mut columns = Vec::with_capacity(node_ids.len());
    for &n in node_ids {
        let state = LightingState::dark(sim.nodes.len()).with_node(n, Rgb::ONE);
        let frame = sim.capture(&state, &noise.derive(0xa77e + n as u64))?;
        let column = frame
            .select(&flat)
            .into_iter()
            .zip(&black.d)
            .map(|(y, d)| (y - *d).max0())
            .collect();
        columns.push(column);
    }
    Ok(columns)
}

/// Sequential attenuation measurement over all nodes (N+1 captures total
/// including the black offset taken beforehand).
pub fn measure_attenuation(
    sim: &Simulator,
    charts: &ChartSet,
    black: &BlackOffset,
    noise: &NoiseModel,
) -> Result<AttenuationTensor, CalibrationError> {
    let all: Vec<usize> = (0..sim.nodes.len()).collect();
    Ok(AttenuationTensor {
        p: measure_attenuation_columns(sim, charts, black, &all, noise)?,
    })
}

/// Capture the reference target appearance under the LED luminaire. The
/// projectors are modeled as unpowered (no black floor), matching the
/// black-offset subtraction semantics of the forward model.
pub fn capture_reference_target(
    sim: &Simulator,
    charts: &ChartSet,
    provenance: &str,
    noise: &NoiseModel,
) -> Result<TargetAppearance, CalibrationError> {
    let mut state = LightingState::dark(sim.nodes.len());
    state.led_scale = 1.0;
    state.include_projector_floor = false;
    let frame = sim.capture(&state, &noise.derive(0x1ed))?;
    Ok(TargetAppearance {
        r: frame.select(&charts.flat_patch_ids()),
        provenance: provenance.to_string(),
    })
}

/// Compute blending weights from the projector footprints. Weights are
/// uniform within each patch: a projector's weight on a patch is its mean
/// city-block distance to its own footprint boundary, normalized across the
/// luminaire projectors covering that patch. Pixels hitting no patch keep
/// weight 1. The texture projector's content is not part of the blend.
pub fn feather_weights(
    projectors: &[ProjectorModel],
    footprints: &[Footprint],
    scene: &SceneGraph,
) -> FeatherMask {
    let n = scene.patch_count();
    // Distance transforms and per-(projector, patch) mean distances.
    let mut mean_dist: Vec<BTreeMap<usize, f64>> = Vec::with_capacity(projectors.len());
    for (pi, foot) in footprints.iter().enumerate() {
        if projectors[pi].role != crate::config::ProjectorRole::Luminaire {
            mean_dist.push(BTreeMap::new());
            continue;
        }
        let d = cityblock_distance(foot);
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for (p, hit) in foot.central.iter().enumerate() {
            if let Some(patch) = hit {
                let e = sums.entry(*patch).or_insert((0.0, 0));
                e.0 += d[p];
                e.1 += 1;
            }
        }
        mean_dist.push(
            sums.into_iter()
                .map(|(k, (s, c))| (k, s / c as f64))
                .collect(),
        );
    }
    // Per-patch normalizers across projectors.
    let mut totals = vec![0.0; n];
    for md in &mean_dist {
        for (&patch, &m) in md {
            totals[patch] += m;
        }
    }
    let weights = footprints
        .iter()
        .enumerate()
        .map(|(pi, foot)| {
            if projectors[pi].role != crate::config::ProjectorRole::Luminaire {
                return None;
            }
            let any_shared = mean_dist[pi]
                .keys()
                .any(|patch| totals[*patch] > mean_dist[pi][patch] + 1e-12);
            if !any_shared {
                return None; // sole owner of everything it covers: all ones
            }
            let w = foot
                .central
                .iter()
                .enumerate()
                .map(|(_p, hit)| match hit {
                    Some(patch) => mean_dist[pi][patch] / totals[*patch],
                    None => 1.0,
                })
                .collect();
            Some(w)
        })
        .collect();
    FeatherMask { weights }
}

/// City-block distance of each covered pixel to the footprint boundary
/// (uncovered pixels and the image border count as boundary).
fn cityblock_distance(foot: &Footprint) -> Vec<f64> {
    let (w, h) = (foot.image_size.0 as i64, foot.image_size.1 as i64);
    let covered: Vec<bool> = foot.central.iter().map(Option::is_some).collect();
    let inf = (w + h) as f64 + 1.0;
    let mut d: Vec<f64> = covered
        .iter()
        .map(|&c| if c { inf } else { 0.0 })
        .collect();
    // Two-pass chamfer sweep.
    for v in 0..h {
        for u in 0..w {
            let i = (v * w + u) as usize;
            if !covered[i] {
                continue;
            }
            let mut best: f64 = if u == 0 || v == 0 { 1.0 } else { d[i] };
            if u > 0 {
                best = best.min(d[i - 1] + 1.0);
            }
            if v > 0 {
                best = best.min(d[i - w as usize] + 1.0);
            }
            d[i] = d[i].min(best);
        }
    }
    for v in (0..h).rev() {
        for u in (0..w).rev() {
            let i = (v * w + u) as usize;
            if !covered[i] {
                continue;
            }
            let mut best: f64 = if u == w - 1 || v == h - 1 { 1.0 } else { d[i] };
            if u < w - 1 {
                best = best.min(d[i + 1] + 1.0);
            }
            if v < h - 1 {
                best = best.min(d[i + w as usize] + 1.0);
            }
            d[i] = d[i].min(best);
        }
    }
    d
}

/// Outcome of turning texture-projector pixels into luminaire nodes for the
/// patches darkened by margin masking.
#[derive(Debug, Clone)]
pub struct CompensationAssignment {
    pub nodes: Vec<ProjectorNode>,
    /// Darkened patches the texture projector cannot reach.
    pub uncompensatable: Vec<usize>,
}

/// Assign texture-projector pixels covering the darkened patches as new
/// luminaire nodes. Produces one node whose exact membership is the set of
/// pixels whose central ray hits a darkened patch.
pub fn assign_compensation(
    darkened: &[usize],
    texture_projector: &ProjectorModel,
    texture_foot: &Footprint,
    next_node_id: usize,
) -> CompensationAssignment {
    let (w, _h) = texture_foot.image_size;
    let dark: BTreeSet<usize> = darkened.iter().copied().collect();
    let mut mask = vec![false; texture_foot.pixel_count()];
    let mut reachable: BTreeSet<usize> = BTreeSet::new();
    let (mut u0, mut v0, mut u1, mut v1) = (u32::MAX, u32::MAX, 0u32, 0u32);
    for (p, hit) in texture_foot.central.iter().enumerate() {
        if let Some(patch) = hit {
            if dark.contains(patch) {
                mask[p] = true;
                reachable.insert(*patch);
                let (u, v) = (p as u32 % w, p as u32 / w);
                u0 = u0.min(u);
                v0 = v0.min(v);
                u1 = u1.max(u + 1);
                v1 = v1.max(v + 1);
            }
        }
    }
    let uncompensatable: Vec<usize> = darkened
        .iter()
        .copied()
        .filter(|p| !reachable.contains(p))
        .collect();
    let nodes = if reachable.is_empty() {
        Vec::new()
    } else {
        vec![ProjectorNode {
            projector_id: texture_projector.id,
            node_id: next_node_id,
            pixel_region: PixelRect { u0, v0, u1, v1 },
            pixel_mask: Some(mask),
            assigned_chart: None,
            input: Rgb::ZERO,
        }]
    };
    CompensationAssignment {
        nodes,
        uncompensatable,
    }
}

pub const BUNDLE_VERSION: u32 = 1;

/// Persisted node descriptor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeRecord {
    pub node_id: usize,
    pub projector_id: usize,
    pub pixel_region: PixelRect,
    #[serde(default)]
    pub pixel_mask: Option<Vec<bool>>,
    pub assigned_chart: Option<usize>,
}

impl NodeRecord {
    pub fn from_node(node: &ProjectorNode) -> Self {
        NodeRecord {
            node_id: node.node_id,
            projector_id: node.projector_id,
            pixel_region: node.pixel_region,
            pixel_mask: node.pixel_mask.clone(),
            assigned_chart: node.assigned_chart,
        }
    }

    pub fn to_node(&self) -> ProjectorNode {
        ProjectorNode {
            projector_id: self.projector_id,
            node_id: self.node_id,
            pixel_region: self.pixel_region,
            pixel_mask: self.pixel_mask.clone(),
            assigned_chart: self.assigned_chart,
            input: Rgb::ZERO,
        }
    }
}

/// Everything the optimizer needs, persisted as one structured document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationBundle {
    pub version: u32,
    pub seed: u64,
    pub charts: Vec<ColorChart>,
    pub nodes: Vec<NodeRecord>,
    pub black_offset: BlackOffset,
    pub attenuation: AttenuationTensor,
    /// Reference appearances: base LED first, then configured variants.
    pub references: Vec<TargetAppearance>,
    pub feather: FeatherMask,
}

impl CalibrationBundle {
    pub fn save(&self, path: &Path) -> Result<(), CalibrationError> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text.as_bytes()).map_err(|source| CalibrationError::BundleIo {
            action: "write",
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<CalibrationBundle, CalibrationError> {
        let text = std::fs::read_to_string(path).map_err(|source| CalibrationError::BundleIo {
            action: "read",
            path: path.display().to_string(),
            source,
        })?;
        let bundle: CalibrationBundle = serde_json::from_str(&text)?;
        if bundle.version != BUNDLE_VERSION {
            return Err(CalibrationError::BundleVersion(bundle.version));
        }
        Ok(bundle)
    }

    pub fn chart_set(&self) -> ChartSet {
        ChartSet {
            charts: self.charts.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ChartPlacement, ProjectorConfig, ProjectorRole, SceneConfig, Surface};
    use crate::emitters::footprint;
    use crate::scene::PatchTag;

    fn two_chart_config() -> SceneConfig {
        let mut cfg = SceneConfig::empty_room([2.0, 2.0, 2.0], [4, 4, 4]);
        for x in [0.55, 1.45] {
            cfg.charts.push(ChartPlacement {
                surface: Surface::BackWall,
                position: [x, 1.0],
                patch_size: 0.04,
                grid: [6, 4],
            });
        }
        cfg.projectors.push(ProjectorConfig {
            position: [1.0, 1.5, 1.5],
            look_at: [1.0, 0.0, 1.0],
            image_size: [64, 48],
            frustum_deg: [36.0, 24.0],
            black_level: Rgb::splat(0.02),
            power: 2.0,
            role: ProjectorRole::Luminaire,
            aperture: None,
        });
        cfg.transport.form_factor_samples = 8;
        cfg
    }

    fn rig() -> (Simulator, ChartSet) {
        let cfg = two_chart_config();
        let mut sim = Simulator::from_config(&cfg, 5).unwrap();
        let charts = ChartSet::from_scene(&sim.scene).unwrap();
        let nodes = segment_nodes(&sim.projectors[0], &sim.footprints[0], &charts);
        sim.set_nodes(nodes);
        (sim, charts)
    }

    #[test]
    fn footprint_over_two_charts_splits_into_two_nodes() {
        let (sim, _charts) = rig();
        assert_eq!(sim.nodes.len(), 2);
        // Regions partition the image.
        let total: usize = sim.nodes.iter().map(|n| n.pixel_region.pixel_count()).sum();
        assert_eq!(total, sim.projectors[0].pixel_count());
        let (a, b) = (&sim.nodes[0], &sim.nodes[1]);
        assert_ne!(a.assigned_chart, b.assigned_chart);
        for v in 0..48 {
            for u in 0..64 {
                let in_a = a.pixel_region.contains(u, v);
                let in_b = b.pixel_region.contains(u, v);
                assert!(in_a != in_b, "pixel ({u},{v}) must be in exactly one region");
            }
        }
    }

    #[test]
    fn projector_with_one_chart_keeps_whole_image() {
        let mut cfg = two_chart_config();
        cfg.charts.truncate(1);
        let sim = Simulator::from_config(&cfg, 5).unwrap();
        let charts = ChartSet::from_scene(&sim.scene).unwrap();
        let nodes = segment_nodes(&sim.projectors[0], &sim.footprints[0], &charts);
        assert_eq!(nodes.len(), 1);
        assert_eq!(nodes[0].pixel_region, PixelRect::full((64, 48)));
        assert_eq!(nodes[0].assigned_chart, Some(0));
    }

    #[test]
    fn projector_over_no_charts_yields_whole_image_node() {
        let mut cfg = two_chart_config();
        cfg.charts.clear();
        cfg.charts.push(ChartPlacement {
            surface: Surface::FrontWall, // behind the projector
            position: [1.0, 1.0],
            patch_size: 0.04,
            grid: [6, 4],
        });
        let sim = Simulator::from_config(&cfg, 5).unwrap();
        let charts = ChartSet::from_scene(&sim.scene).unwrap();
        let nodes = segment_nodes(&sim.projectors[0], &sim.footprints[0], &charts);
        assert_eq!(nodes.len(), 1);
        assert_eq!(nodes[0].assigned_chart, None);
    }

    #[test]
    fn black_offset_zero_when_black_levels_zero() {
        let (mut sim, charts) = rig();
        for p in sim.projectors.iter_mut() {
            p.black_level = Rgb::ZERO;
        }
        let d = measure_black_offset(&sim, &charts, &NoiseModel::NONE).unwrap();
        assert!(d.d.iter().all(|v| *v == Rgb::ZERO));
    }

    #[test]
    fn black_offset_is_repeatable() {
        let (sim, charts) = rig();
        let d1 = measure_black_offset(&sim, &charts, &NoiseModel::NONE).unwrap();
        let d2 = measure_black_offset(&sim, &charts, &NoiseModel::NONE).unwrap();
        for (a, b) in d1.d.iter().zip(&d2.d) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn black_offset_matches_single_bounce_prediction() {
        // Single projector, black level 0.02, chart reflectance 0.5: with
        // direct light only, d = rho * bl * power_factor.
        let mut cfg = two_chart_config();
        cfg.charts.clear();
        cfg.transport.bounces = 0;
        let mut sim = Simulator::from_config(&cfg, 5).unwrap();
        sim.set_nodes(vec![ProjectorNode {
            projector_id: 0,
            node_id: 0,
            pixel_region: PixelRect::full((32, 24)),
            pixel_mask: None,
            assigned_chart: None,
            input: Rgb::ZERO,
        }]);
        // Pick a wall patch squarely inside the footprint and read its
        // mean power factor from the simulator capture (the oracle).
        let frame = sim
            .capture(&LightingState::dark(1), &NoiseModel::NONE)
            .unwrap();
        let foot = &sim.footprints[0];
        let covered = foot.covered_patches();
        let patch = covered[covered.len() / 2];
        let rho = sim.scene.patches[patch].reflectance[0];
        // Reconstruct the power factor independently: readout / (rho * bl).
        let bl = 0.02;
        let power_factor = frame.values[patch][0] / (rho * bl);
        assert!(power_factor > 0.0);
        // d scales linearly with black level: doubling bl doubles d.
        for p in sim.projectors.iter_mut() {
            p.black_level = Rgb::splat(0.04);
        }
        let frame2 = sim
            .capture(&LightingState::dark(1), &NoiseModel::NONE)
            .unwrap();
        assert!(
            (frame2.values[patch][0] - 2.0 * frame.values[patch][0]).abs() < 1e-12,
            "black floor must be linear in black level"
        );
    }

    #[test]
    fn attenuation_reconstructs_forward_model() {
        let (sim, charts) = rig();
        let d = measure_black_offset(&sim, &charts, &NoiseModel::NONE).unwrap();
        let p = measure_attenuation(&sim, &charts, &d, &NoiseModel::NONE).unwrap();

        // For random x in [0,1]^N: sum p x + d equals a fresh capture.
        let x = [Rgb::new(0.31, 0.62, 0.47), Rgb::new(0.83, 0.15, 0.58)];
        let mut state = LightingState::dark(2);
        for (i, xi) in x.iter().enumerate() {
            state.node_inputs[i] = *xi;
        }
        let frame = sim.capture(&state, &NoiseModel::NONE).unwrap();
        let flat = charts.flat_patch_ids();
        for (fi, &pid) in flat.iter().enumerate() {
            for c in 0..3 {
                let model: f64 = d.d[fi][c]
                    + (0..2).map(|n| p.p[n][fi][c] * x[n][c]).sum::<f64>();
                assert!(
                    (model - frame.values[pid][c]).abs() < 1e-6,
                    "flat {fi} ch {c}: model {model} vs capture {}",
                    frame.values[pid][c]
                );
            }
        }
    }

    #[test]
    fn inter_reflection_reaches_uncovered_charts() {
        // A node covering only chart 0 still attenuates onto chart 1 when
        // bounces are enabled, and not when transport is direct-only.
        let cfg = two_chart_config();
        let mut sim = Simulator::from_config(&cfg, 5).unwrap();
        let charts = ChartSet::from_scene(&sim.scene).unwrap();
        let nodes = segment_nodes(&sim.projectors[0], &sim.footprints[0], &charts);
        sim.set_nodes(nodes);
        let d = measure_black_offset(&sim, &charts, &NoiseModel::NONE).unwrap();

        let node0_chart = sim.nodes[0].assigned_chart.unwrap();
        let other_chart = 1 - node0_chart;
        // Check a slot on the chart the node does NOT cover.
        let probe = charts.chart_range(other_chart).start;

        let p_full = measure_attenuation(&sim, &charts, &d, &NoiseModel::NONE).unwrap();
        assert!(
            p_full.p[0][probe][1] > 1e-6,
            "inter-reflection path must appear in p: {}",
            p_full.p[0][probe][1]
        );

        sim.bounces = 0;
        let d0 = measure_black_offset(&sim, &charts, &NoiseModel::NONE).unwrap();
        let p_direct = measure_attenuation(&sim, &charts, &d0, &NoiseModel::NONE).unwrap();
        assert!(
            p_full.p[0][probe][1] > p_direct.p[0][probe][1] + 1e-9,
            "bounce transport must add energy on the uncovered chart"
        );
    }

    #[test]
    fn attenuation_is_additive_over_node_subsets() {
        let (sim, charts) = rig();
        let d = measure_black_offset(&sim, &charts, &NoiseModel::NONE).unwrap();
        let p = measure_attenuation(&sim, &charts, &d, &NoiseModel::NONE).unwrap();
        let mut state = LightingState::dark(2);
        state.node_inputs[0] = Rgb::ONE;
        state.node_inputs[1] = Rgb::ONE;
        let frame = sim.capture(&state, &NoiseModel::NONE).unwrap();
        let flat = charts.flat_patch_ids();
        for (fi, &pid) in flat.iter().enumerate() {
            for c in 0..3 {
                let sum = d.d[fi][c] + p.p[0][fi][c] + p.p[1][fi][c];
                assert!(
                    (sum - frame.values[pid][c]).abs() < 1e-6,
                    "flat {fi} ch {c}"
                );
            }
        }
    }

    #[test]
    fn reference_capture_scales_linearly_in_intensity() {
        let (mut sim, charts) = rig();
        let r1 = capture_reference_target(&sim, &charts, "base", &NoiseModel::NONE).unwrap();
        if let Some(led) = &mut sim.led {
            led.intensity *= 0.5;
        }
        // Rebuilding is unnecessary: led_direct is unit-intensity.
        let r2 = capture_reference_target(&sim, &charts, "half", &NoiseModel::NONE).unwrap();
        for (a, b) in r1.r.iter().zip(&r2.r) {
            for c in 0..3 {
                assert!((a[c] - 2.0 * b[c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn reference_capture_with_dark_led_reads_zero_floor() {
        let (mut sim, charts) = rig();
        if let Some(led) = &mut sim.led {
            led.intensity = 0.0;
        }
        let r = capture_reference_target(&sim, &charts, "off", &NoiseModel::NONE).unwrap();
        // Projector floors excluded, LED dark: nothing left.
        assert!(r.r.iter().all(|v| *v == Rgb::ZERO));
    }

    #[test]
    fn single_projector_feather_is_unit() {
        let (sim, _charts) = rig();
        let mask = feather_weights(&sim.projectors, &sim.footprints, &sim.scene);
        assert!(mask.weights(0).is_none());
    }

    #[test]
    fn overlapping_projectors_feather_to_partition_of_unity() {
        let mut cfg = two_chart_config();
        // Second projector covering the same wall.
        let mut p2 = cfg.projectors[0].clone();
        p2.position = [1.2, 1.5, 1.5];
        p2.look_at = [1.2, 0.0, 1.0];
        cfg.projectors.push(p2);
        let sim = Simulator::from_config(&cfg, 5).unwrap();
        let mask = feather_weights(&sim.projectors, &sim.footprints, &sim.scene);

        // Per-patch incident weights (mean over covering pixels) sum to 1.
        let mut sums: BTreeMap<usize, f64> = BTreeMap::new();
        for pi in 0..2 {
            let foot = &sim.footprints[pi];
            let mut per_patch: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
            for (p, hit) in foot.central.iter().enumerate() {
                if let Some(patch) = hit {
                    let w = mask.weights(pi).map_or(1.0, |ws| ws[p]);
                    let e = per_patch.entry(*patch).or_insert((0.0, 0));
                    e.0 += w;
                    e.1 += 1;
                }
            }
            for (patch, (s, c)) in per_patch {
                *sums.entry(patch).or_insert(0.0) += s / c as f64;
            }
        }
        let mut shared = 0;
        for (patch, sum) in sums {
            assert!(
                (sum - 1.0).abs() < 1e-6,
                "patch {patch}: incident weight sum {sum}"
            );
            shared += 1;
        }
        assert!(shared > 0);
    }

    #[test]
    fn empty_darkened_set_adds_no_nodes() {
        let (sim, _) = rig();
        let foot = footprint(&sim.projectors[0], &sim.scene);
        let out = assign_compensation(&[], &sim.projectors[0], &foot, 10);
        assert!(out.nodes.is_empty());
        assert!(out.uncompensatable.is_empty());
    }

    #[test]
    fn unreachable_darkened_patch_is_reported() {
        let cfg = two_chart_config();
        let sim = Simulator::from_config(&cfg, 5).unwrap();
        let foot = &sim.footprints[0];
        // The ceiling is not in this projector's footprint.
        let ceiling = sim.scene.patches_with_tag(PatchTag::Ceiling);
        let out = assign_compensation(&ceiling[..1], &sim.projectors[0], foot, 3);
        assert!(out.nodes.is_empty());
        assert_eq!(out.uncompensatable, vec![ceiling[0]]);
    }

    #[test]
    fn darkened_strip_inside_footprint_becomes_one_masked_node() {
        let cfg = two_chart_config();
        let sim = Simulator::from_config(&cfg, 5).unwrap();
        let foot = &sim.footprints[0];
        let covered = foot.covered_patches();
        let darkened = &covered[..3.min(covered.len())];
        let out = assign_compensation(darkened, &sim.projectors[0], foot, 7);
        assert_eq!(out.nodes.len(), 1);
        let node = &out.nodes[0];
        assert_eq!(node.node_id, 7);
        assert!(node.pixel_mask.is_some());
        assert!(out.uncompensatable.is_empty());
        // Node pixels are exactly the pixels hitting darkened patches.
        let dark: BTreeSet<usize> = darkened.iter().copied().collect();
        let w = foot.image_size.0;
        for (p, hit) in foot.central.iter().enumerate() {
            let (u, v) = (p as u32 % w, p as u32 / w);
            let inside = node.covers_pixel(u, v, w);
            let should = matches!(hit, Some(patch) if dark.contains(patch));
            assert_eq!(inside, should, "pixel {p}");
        }
    }

    #[test]
    fn bundle_round_trip_is_byte_stable() {
        let (sim, charts) = rig();
        let d = measure_black_offset(&sim, &charts, &NoiseModel::NONE).unwrap();
        let p = measure_attenuation(&sim, &charts, &d, &NoiseModel::NONE).unwrap();
        let r = capture_reference_target(&sim, &charts, "led", &NoiseModel::NONE).unwrap();
        let bundle = CalibrationBundle {
            version: BUNDLE_VERSION,
            seed: 5,
            charts: charts.charts.clone(),
            nodes: sim.nodes.iter().map(NodeRecord::from_node).collect(),
            black_offset: d,
            attenuation: p,
            references: vec![r],
            feather: feather_weights(&sim.projectors, &sim.footprints, &sim.scene),
        };
        let dir = std::env::temp_dir().join("relight_bundle_test");
        std::fs::create_dir_all(&dir).unwrap();
        let (p1, p2) = (dir.join("a.json"), dir.join("b.json"));
        bundle.save(&p1).unwrap();
        let loaded = CalibrationBundle::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
