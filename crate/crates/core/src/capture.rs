//! Virtual camera readout and graycode correspondence acquisition.
//!
//! The `Simulator` bundles a scene with its emitters and precomputes the
//! linear transport terms, so a capture is a cheap radiosity solve instead
//! of a fresh ray cast.

use crate::calibration::FeatherMask;
use crate::color::Rgb;
use crate::config::SceneConfig;
use crate::emitters::{
    footprint, led_irradiance, pixel_emission, Footprint, LedLuminaire, ProjectorModel,
    ProjectorNode, ProjectorTransport,
};
use crate::raster::{Image, PixelMask};
use crate::scene::{
    build_scene, compute_form_factors, solve_radiosity, FormFactorMatrix, SceneError, SceneGraph,
};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CaptureError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("lighting state has {got} node inputs, simulator has {want} nodes")]
    NodeCountMismatch { got: usize, want: usize },
    #[error("texture image is {got:?}, texture projector expects {want:?}")]
    TextureSizeMismatch { got: (u32, u32), want: (u32, u32) },
    #[error("no texture projector configured")]
    NoTextureProjector,
    #[error("node input outside [0,1]: {0:?}")]
    InputOutOfRange(Rgb),
}

/// Zero-mean gaussian readout noise. `stddev = 0` reproduces the noiseless
/// capture exactly.
#[derive(Debug, Clone, Copy)]
pub struct NoiseModel {
    pub stddev: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub const NONE: NoiseModel = NoiseModel {
        stddev: 0.0,
        seed: 0,
    };

    pub fn seeded(stddev: f64, seed: u64) -> Self {
        NoiseModel { stddev, seed }
    }

    /// Derive an independent noise stream for a sub-capture.
    pub fn derive(&self, salt: u64) -> NoiseModel {
        NoiseModel {
            stddev: self.stddev,
            seed: self
                .seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(salt),
        }
    }
}

/// Which emitters are active and at which inputs.
#[derive(Debug, Clone)]
pub struct LightingState {
    /// Per-node RGB input, aligned with `Simulator::nodes`.
    pub node_inputs: Vec<Rgb>,
    /// Reference luminaire scale (0 = off, 1 = configured intensity).
    pub led_scale: f64,
    /// Content image on the texture projector, if it is projecting.
    pub texture: Option<Image>,
    /// Include the projectors' black-level floors. Disabled to model the
    /// projectors being unpowered (reference-target acquisition).
    pub include_projector_floor: bool,
}

impl LightingState {
    pub fn dark(node_count: usize) -> Self {
        LightingState {
            node_inputs: vec![Rgb::ZERO; node_count],
            led_scale: 0.0,
            texture: None,
            include_projector_floor: true,
        }
    }

    pub fn with_node(mut self, node_index: usize, input: Rgb) -> Self {
        self.node_inputs[node_index] = input;
        self
    }

    pub fn describe(&self) -> String {
        let lit: Vec<String> = self
            .node_inputs
            .iter()
            .enumerate()
            .filter(|(_, x)| x.max_channel() > 0.0)
            .map(|(i, x)| format!("n{i}={:.3}/{:.3}/{:.3}", x[0], x[1], x[2]))
            .collect();
        format!(
            "led={:.3} floor={} tex={} [{}]",
            self.led_scale,
            self.include_projector_floor,
            self.texture.is_some(),
            lit.join(" ")
        )
    }
}

/// Per-patch camera readout under one lighting state.
#[derive(Debug, Clone)]
pub struct CaptureFrame {
    pub values: Vec<Rgb>,
    pub lighting: String,
}

impl CaptureFrame {
    pub fn select(&self, patch_ids: &[usize]) -> Vec<Rgb> {
        patch_ids.iter().map(|&i| self.values[i]).collect()
    }
}

/// The assembled rig: scene, transport, projectors, nodes, reference light.
pub struct Simulator {
    pub scene: SceneGraph,
    pub form_factors: FormFactorMatrix,
    pub bounces: u32,
    pub projectors: Vec<ProjectorModel>,
    pub footprints: Vec<Footprint>,
    pub nodes: Vec<ProjectorNode>,
    pub led: Option<LedLuminaire>,
    pub texture_projector: Option<usize>,
    /// Per-pixel feather weights, applied multiplicatively to node signal.
    pub feather: FeatherMask,
    /// Margin mask per projector (None = all pixels on).
    masks: Vec<Option<PixelMask>>,
    transports: Vec<ProjectorTransport>,
    /// Unit-intensity LED direct irradiance.
    led_direct: Vec<Rgb>,
    /// Per projector: mean power factor per patch (scalar; black floor is
    /// `black_level * floor_power`).
    floor_power: Vec<Vec<f64>>,
    /// Per node: feathered, masked signal power per patch.
    node_signal: Vec<Vec<f64>>,
}

impl Simulator {
    /// Build the full rig from a config: scene, form factors, footprints.
    pub fn from_config(config: &SceneConfig, seed: u64) -> Result<Simulator, CaptureError> {
        let scene = build_scene(config)?;
        let form_factors =
            compute_form_factors(&scene, config.transport.form_factor_samples, seed);
        let projectors: Vec<ProjectorModel> = config
            .projectors
            .iter()
            .enumerate()
            .map(|(i, p)| ProjectorModel::from_config(i, p))
            .collect();
        let footprints: Vec<Footprint> = projectors.iter().map(|p| footprint(p, &scene)).collect();
        let transports: Vec<ProjectorTransport> = projectors
            .iter()
            .zip(&footprints)
            .map(|(p, f)| ProjectorTransport::build(p, f, &scene))
            .collect();
        let led = config.led.as_ref().map(LedLuminaire::from_config);
        let led_direct = match &led {
            Some(l) => {
                let mut unit = l.clone();
                unit.intensity = 1.0;
                led_irradiance(&unit, &scene)
            }
            None => vec![Rgb::ZERO; scene.patch_count()],
        };
        let floor_power = transports
            .iter()
            .map(|t| t.irradiance_scalar(|_| 1.0))
            .collect();
        let feather = FeatherMask::uniform(&projectors);
        let masks = vec![None; projectors.len()];
        let mut sim = Simulator {
            scene,
            form_factors,
            bounces: config.transport.bounces,
            projectors,
            footprints,
            nodes: Vec::new(),
            led,
            texture_projector: config.texture_projector(),
            feather,
            masks,
            transports,
            led_direct,
            floor_power,
            node_signal: Vec::new(),
        };
        sim.rebuild_node_signal();
        Ok(sim)
    }

    pub fn patch_count(&self) -> usize {
        self.scene.patch_count()
    }

    /// Replace the node set (e.g. after segmentation) and rebuild transport.
    pub fn set_nodes(&mut self, nodes: Vec<ProjectorNode>) {
        self.nodes = nodes;
        self.rebuild_node_signal();
    }

    /// Install feather weights and rebuild the node transport sums.
    pub fn set_feather(&mut self, feather: FeatherMask) {
        self.feather = feather;
        self.rebuild_node_signal();
    }

    /// Swap the reference luminaire (position/temperature variants) and
    /// rebuild its direct-irradiance cache.
    pub fn set_led(&mut self, led: LedLuminaire) {
        let mut unit = led.clone();
        unit.intensity = 1.0;
        self.led_direct = led_irradiance(&unit, &self.scene);
        self.led = Some(led);
    }

    /// Apply a margin mask to one projector; masked pixels emit only their
    /// black floor.
    pub fn set_mask(&mut self, projector_id: usize, mask: PixelMask) {
        self.masks[projector_id] = Some(mask);
        self.rebuild_node_signal();
    }

    pub fn mask(&self, projector_id: usize) -> Option<&PixelMask> {
        self.masks[projector_id].as_ref()
    }

    /// Recompute per-node signal power sums (feather and mask folded in).
    fn rebuild_node_signal(&mut self) {
        self.node_signal = self
            .nodes
            .iter()
            .map(|node| {
                let proj = &self.projectors[node.projector_id];
                let w = proj.image_size.0;
                let weights = self.feather.weights(node.projector_id);
                let mask = &self.masks[node.projector_id];
                self.transports[node.projector_id].irradiance_scalar(|p| {
                    let (u, v) = (p as u32 % w, p as u32 / w);
                    if !node.covers_pixel(u, v, w) {
                        return 0.0;
                    }
                    if let Some(m) = mask {
                        if !m.on[p] {
                            return 0.0;
                        }
                    }
                    weights.map_or(1.0, |ws| ws[p])
                })
            })
            .collect();
    }

    /// Total direct irradiance for a lighting state.
    pub fn direct_irradiance(&self, state: &LightingState) -> Result<Vec<Rgb>, CaptureError> {
        if state.node_inputs.len() != self.nodes.len() {
            return Err(CaptureError::NodeCountMismatch {
                got: state.node_inputs.len(),
                want: self.nodes.len(),
            });
        }
        for x in &state.node_inputs {
            if x.0.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(CaptureError::InputOutOfRange(*x));
            }
        }
        let n = self.patch_count();
        let mut direct = vec![Rgb::ZERO; n];

        if state.include_projector_floor {
            for (proj, floor) in self.projectors.iter().zip(&self.floor_power) {
                for k in 0..n {
                    direct[k] += proj.black_level * floor[k];
                }
            }
        }
        for (node, signal) in self.nodes.iter().zip(&self.node_signal) {
            let x = state.node_inputs[node.node_id];
            let bl = self.projectors[node.projector_id].black_level;
            // Signal above the floor: (1 - bl) * x per channel.
            let gain = bl.zip(x, |b, xi| (1.0 - b) * xi);
            for k in 0..n {
                direct[k] += gain * signal[k];
            }
        }
        if state.led_scale > 0.0 {
            let scale = state.led_scale
                * self.led.as_ref().map(|l| l.intensity).unwrap_or(0.0);
            for k in 0..n {
                direct[k] += self.led_direct[k] * scale;
            }
        }
        if let Some(image) = &state.texture {
            let tex = self
                .texture_projector
                .ok_or(CaptureError::NoTextureProjector)?;
            let proj = &self.projectors[tex];
            if (image.width, image.height) != proj.image_size {
                return Err(CaptureError::TextureSizeMismatch {
                    got: (image.width, image.height),
                    want: proj.image_size,
                });
            }
            let mask = &self.masks[tex];
            // Texture content: signal only; the floor is handled above.
            let contrib = self.transports[tex].irradiance_with(|p| {
                let on = mask.as_ref().map_or(true, |m| m.on[p]);
                if on {
                    proj.black_level.zip(image.data[p], |b, xi| (1.0 - b) * xi)
                } else {
                    Rgb::ZERO
                }
            });
            for k in 0..n {
                direct[k] += contrib[k];
            }
        }
        Ok(direct)
    }

    /// Capture with the configured bounce count.
    pub fn capture(
        &self,
        state: &LightingState,
        noise: &NoiseModel,
    ) -> Result<CaptureFrame, CaptureError> {
        self.capture_with_bounces(state, noise, self.bounces)
    }

    /// Capture with an explicit bounce count (0 = direct light only).
    pub fn capture_with_bounces(
        &self,
        state: &LightingState,
        noise: &NoiseModel,
        bounces: u32,
    ) -> Result<CaptureFrame, CaptureError> {
        let direct = self.direct_irradiance(state)?;
        let solution = solve_radiosity(&self.scene, &self.form_factors, &direct, bounces);
        let values = apply_noise_and_clip(solution.outgoing, noise);
        Ok(CaptureFrame {
            values,
            lighting: state.describe(),
        })
    }

    /// Outgoing radiosity without clipping or noise (for rendering and
    /// linearity checks).
    pub fn outgoing(&self, state: &LightingState) -> Result<Vec<Rgb>, CaptureError> {
        let direct = self.direct_irradiance(state)?;
        Ok(solve_radiosity(&self.scene, &self.form_factors, &direct, self.bounces).outgoing)
    }
}

fn apply_noise_and_clip(mut values: Vec<Rgb>, noise: &NoiseModel) -> Vec<Rgb> {
    if noise.stddev > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
        let normal = Normal::new(0.0, noise.stddev).expect("stddev >= 0");
        for v in values.iter_mut() {
            for c in 0..3 {
                v[c] += normal.sample(&mut rng);
            }
        }
    }
    values.into_iter().map(Rgb::clamp01).collect()
}

// ---------------------------------------------------------------------------
// Graycode structured light
// ---------------------------------------------------------------------------

/// One binary projector pattern.
#[derive(Debug, Clone)]
pub struct BinaryPattern {
    pub width: u32,
    pub height: u32,
    pub bits: Vec<bool>,
    /// Column pattern (encodes u) or row pattern (encodes v).
    pub axis: PatternAxis,
    pub bit_index: u32,
    pub inverted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatternAxis {
    Column,
    Row,
}

fn gray_code(x: u32) -> u32 {
    x ^ (x >> 1)
}

fn gray_decode(mut g: u32) -> u32 {
    let mut x = g;
    while g > 0 {
        g >>= 1;
        x ^= g;
    }
    x
}

fn bits_for(extent: u32) -> u32 {
    if extent <= 1 {
        0
    } else {
        32 - (extent - 1).leading_zeros()
    }
}

/// Gray-coded column and row patterns, each followed by its inverse.
/// ceil(log2 w) column planes + ceil(log2 h) row planes, MSB first.
pub fn graycode_patterns(width: u32, height: u32) -> Vec<BinaryPattern> {
    assert!(width >= 1 && height >= 1);
    let mut patterns = Vec::new();
    let mut emit = |axis: PatternAxis, bit: u32| {
        for inverted in [false, true] {
            let bits = (0..width as usize * height as usize)
                .map(|p| {
                    let (u, v) = (p as u32 % width, p as u32 / width);
                    let coord = match axis {
                        PatternAxis::Column => u,
                        PatternAxis::Row => v,
                    };
                    let on = gray_code(coord) >> bit & 1 == 1;
                    on != inverted
                })
                .collect();
            patterns.push(BinaryPattern {
                width,
                height,
                bits,
                axis,
                bit_index: bit,
                inverted,
            });
        }
    };
    for bit in (0..bits_for(width)).rev() {
        emit(PatternAxis::Column, bit);
    }
    for bit in (0..bits_for(height)).rev() {
        emit(PatternAxis::Row, bit);
    }
    patterns
}

/// Decoded correspondence of one projector: for every patch, the projector
/// pixel whose graycode word the patch read back, or None for patches the
/// projector does not reach.
#[derive(Debug, Clone)]
pub struct CorrespondenceMap {
    pub image_size: (u32, u32),
    pub patch_pixel: Vec<Option<(u32, u32)>>,
}

impl CorrespondenceMap {
    /// Inverted view: pixel -> patch for every decoded patch.
    pub fn pixel_to_patch(&self) -> Vec<Option<usize>> {
        let (w, h) = self.image_size;
        let mut map = vec![None; w as usize * h as usize];
        for (patch, px) in self.patch_pixel.iter().enumerate() {
            if let Some((u, v)) = px {
                map[(*v * w + *u) as usize] = Some(patch);
            }
        }
        map
    }

    /// Fraction of patches whose decode agrees with the analytic footprint:
    /// unreached patches must decode to None, reached patches must decode to
    /// a pixel whose central ray hits them.
    pub fn agreement_with(&self, foot: &Footprint) -> f64 {
        let (w, _) = self.image_size;
        let n = self.patch_pixel.len();
        let mut reached = vec![false; n];
        for hit in foot.central.iter().flatten() {
            reached[*hit] = true;
        }
        let ok = (0..n)
            .filter(|&k| match self.patch_pixel[k] {
                None => !reached[k],
                Some((u, v)) => foot.central[(v * w + u) as usize] == Some(k),
            })
            .count();
        ok as f64 / n as f64
    }
}

/// Capture the graycode sequence of one projector and decode it.
///
/// Acquisition uses direct light along the canonical (central) rays with all
/// other emitters off, mirroring a correspondence scan taken before any
/// photometric calibration. For large-aperture projectors the canonical ray
/// passes through the lens center.
pub fn acquire_correspondence(
    sim: &Simulator,
    projector_id: usize,
    noise: &NoiseModel,
) -> CorrespondenceMap {
    let proj = &sim.projectors[projector_id];
    let foot = &sim.footprints[projector_id];
    let patterns = graycode_patterns(proj.image_size.0, proj.image_size.1);
    let captures: Vec<CaptureFrame> = patterns
        .iter()
        .enumerate()
        .map(|(i, pat)| {
            let values = central_pattern_readout(sim, projector_id, foot, pat);
            CaptureFrame {
                values: apply_noise_and_clip(values, &noise.derive(i as u64)),
                lighting: format!("graycode p{projector_id} #{i}"),
            }
        })
        .collect();
    // Unlit patches read pure noise; gate them out with a contrast floor
    // proportional to the noise level (zero in the noiseless case, so the
    // tie rule alone decides).
    let min_mean_contrast = 2.2 * noise.stddev;
    graycode_decode(&patterns, &captures, sim.patch_count(), min_mean_contrast)
}

/// Per-patch readout of one binary pattern through the central rays:
/// hit-count-normalized power sums of the lit pixels plus the black floor.
fn central_pattern_readout(
    sim: &Simulator,
    projector_id: usize,
    foot: &Footprint,
    pattern: &BinaryPattern,
) -> Vec<Rgb> {
    let proj = &sim.projectors[projector_id];
    let n = sim.patch_count();
    let w = proj.image_size.0;
    let mut sums = vec![Rgb::ZERO; n];
    let mut counts = vec![0u32; n];
    for (p, hit) in foot.central.iter().enumerate() {
        let Some(patch) = hit else { continue };
        let (u, v) = (p as u32 % w, p as u32 / w);
        let dir = proj.pixel_dir(u, v);
        let surf = &sim.scene.patches[*patch];
        let cos_in = (-surf.normal.dot(&dir.into_inner())).max(0.0);
        let t = surf.normal.dot(&(surf.centroid - proj.pose.position))
            / surf.normal.dot(&dir.into_inner());
        let factor = proj.power * cos_in / (t * t);
        let x = if pattern.bits[p] { Rgb::ONE } else { Rgb::ZERO };
        sums[*patch] += pixel_emission(proj.black_level, x) * factor;
        counts[*patch] += 1;
    }
    (0..n)
        .map(|k| {
            if counts[k] > 0 {
                // Readout is the reflected mean irradiance.
                sums[k].mul_elem(sim.scene.patches[k].reflectance) * (1.0 / counts[k] as f64)
            } else {
                Rgb::ZERO
            }
        })
        .collect()
}

/// Decode a pattern/inverse capture sequence into per-patch projector
/// coordinates. A bit is decided by comparing the pattern readout against
/// its inverse; an exact tie marks the patch as unreached, and so does a
/// mean absolute pattern-vs-inverse difference at or below
/// `min_mean_contrast` (the unlit-patch gate for noisy captures).
pub fn graycode_decode(
    patterns: &[BinaryPattern],
    captures: &[CaptureFrame],
    patch_count: usize,
    min_mean_contrast: f64,
) -> CorrespondenceMap {
    assert_eq!(patterns.len(), captures.len());
    assert!(patterns.len() % 2 == 0, "patterns come in pattern/inverse pairs");
    let (w, h) = patterns
        .first()
        .map(|p| (p.width, p.height))
        .unwrap_or((1, 1));

    let mut gray_u = vec![0u32; patch_count];
    let mut gray_v = vec![0u32; patch_count];
    let mut valid = vec![true; patch_count];
    let mut contrast_sum = vec![0.0f64; patch_count];
    let mut plane_count = 0usize;

    for pair in patterns.chunks(2).zip(captures.chunks(2)) {
        let ([pat, inv], [cap, cap_inv]) = pair else {
            continue;
        };
        debug_assert!(!pat.inverted && inv.inverted && pat.bit_index == inv.bit_index);
        plane_count += 1;
        for k in 0..patch_count {
            let a = cap.values[k].luminance();
            let b = cap_inv.values[k].luminance();
            contrast_sum[k] += (a - b).abs();
            if a == b {
                valid[k] = false;
                continue;
            }
            let bit = (a > b) as u32;
            match pat.axis {
                PatternAxis::Column => gray_u[k] |= bit << pat.bit_index,
                PatternAxis::Row => gray_v[k] |= bit << pat.bit_index,
            }
        }
    }

    let patch_pixel = (0..patch_count)
        .map(|k| {
            if !valid[k] || plane_count == 0 && (w > 1 || h > 1) {
                return None;
            }
            if plane_count > 0 && contrast_sum[k] / plane_count as f64 <= min_mean_contrast {
                return None;
            }
            let u = gray_decode(gray_u[k]);
            let v = gray_decode(gray_v[k]);
            if u < w && v < h {
                Some((u, v))
            } else {
                None
            }
        })
        .collect();
    CorrespondenceMap {
        image_size: (w, h),
        patch_pixel,
    }
}
