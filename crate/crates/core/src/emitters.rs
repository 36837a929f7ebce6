//! Light source models: standard (point-source) projectors, the
//! large-aperture projector as an area source, the LED reference luminaire,
//! and margin masking around the projection target.

use crate::color::Rgb;
use crate::config::{LedConfig, ProjectorConfig, ProjectorRole};
use crate::raster::{Image, PixelMask};
use crate::scene::{Pt3, SceneGraph, Vec3};
use nalgebra::{Unit, Vector3};
use rayon::prelude::*;

/// Position plus an orthonormal look-at basis. `forward` points out of the
/// lens; `right`/`up` span the image plane.
#[derive(Debug, Clone, Copy)]
pub struct Pose {
    pub position: Pt3,
    pub forward: Unit<Vec3>,
    pub right: Unit<Vec3>,
    pub up: Unit<Vec3>,
}

impl Pose {
    pub fn look_at(position: Pt3, target: Pt3) -> Pose {
        let forward = Unit::new_normalize(target - position);
        // Stable up hint: +z unless looking almost straight up/down.
        let hint = if forward.z.abs() < 0.95 {
            Vector3::z()
        } else {
            Vector3::y()
        };
        let right = Unit::new_normalize(forward.cross(&hint));
        let up = Unit::new_normalize(right.cross(&forward));
        Pose {
            position,
            forward,
            right,
            up,
        }
    }
}

/// Sub-aperture sampling of a physically large square lens.
#[derive(Debug, Clone, Copy)]
pub struct ApertureModel {
    pub lens_side: f64,
    /// (rows, cols); (1, 1) degenerates to a point source.
    pub grid: (u32, u32),
    /// Distance along each pixel's central ray at which all sub-aperture
    /// rays of that pixel converge.
    pub focus_distance: f64,
}

impl ApertureModel {
    pub fn subaperture_count(&self) -> usize {
        (self.grid.0 * self.grid.1) as usize
    }
}

#[derive(Debug, Clone)]
pub enum ProjectorKind {
    Point,
    LargeAperture(ApertureModel),
}

/// One projector: pose, frustum, image plane, black floor, radiant scale.
#[derive(Debug, Clone)]
pub struct ProjectorModel {
    pub id: usize,
    pub pose: Pose,
    pub image_size: (u32, u32),
    /// Horizontal/vertical half-angles in radians, each in (0, pi/2).
    pub frustum: (f64, f64),
    /// Per-channel emission at input 0, in capture units.
    pub black_level: Rgb,
    /// Irradiance a full-white pixel deposits at 1 m head-on.
    pub power: f64,
    pub kind: ProjectorKind,
    pub role: ProjectorRole,
}

impl ProjectorModel {
    pub fn from_config(id: usize, cfg: &ProjectorConfig) -> ProjectorModel {
        let kind = match &cfg.aperture {
            Some(ap) => ProjectorKind::LargeAperture(ApertureModel {
                lens_side: ap.lens_side,
                grid: (ap.subaperture_grid[0], ap.subaperture_grid[1]),
                focus_distance: ap.focus_distance,
            }),
            None => ProjectorKind::Point,
        };
        ProjectorModel {
            id,
            pose: Pose::look_at(Pt3::from(cfg.position), Pt3::from(cfg.look_at)),
            image_size: (cfg.image_size[0], cfg.image_size[1]),
            frustum: (
                cfg.frustum_deg[0].to_radians(),
                cfg.frustum_deg[1].to_radians(),
            ),
            black_level: cfg.black_level,
            power: cfg.power,
            kind,
            role: cfg.role,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.image_size.0 as usize * self.image_size.1 as usize
    }

    /// Central ray direction of pixel (u, v). v grows downward in the image;
    /// the top image row looks "up" in the projector frame.
    pub fn pixel_dir(&self, u: u32, v: u32) -> Unit<Vec3> {
        let (w, h) = self.image_size;
        let sx = (2.0 * (u as f64 + 0.5) / w as f64 - 1.0) * self.frustum.0.tan();
        let sy = (1.0 - 2.0 * (v as f64 + 0.5) / h as f64) * self.frustum.1.tan();
        Unit::new_normalize(
            self.pose.forward.into_inner() + self.pose.right.into_inner() * sx
                + self.pose.up.into_inner() * sy,
        )
    }

    /// Number of sub-apertures sampled for emission (1 for point sources).
    pub fn subaperture_count(&self) -> usize {
        match &self.kind {
            ProjectorKind::Point => 1,
            ProjectorKind::LargeAperture(ap) => ap.subaperture_count(),
        }
    }

    /// Lens-plane origin of sub-aperture `s`.
    pub fn subaperture_origin(&self, s: usize) -> Pt3 {
        match &self.kind {
            ProjectorKind::Point => self.pose.position,
            ProjectorKind::LargeAperture(ap) => {
                let (rows, cols) = ap.grid;
                let (r, c) = (s as u32 / cols, s as u32 % cols);
                let step = ap.lens_side;
                let ox = ((c as f64 + 0.5) / cols as f64 - 0.5) * step;
                let oy = ((r as f64 + 0.5) / rows as f64 - 0.5) * step;
                self.pose.position
                    + self.pose.right.into_inner() * ox
                    + self.pose.up.into_inner() * oy
            }
        }
    }

    /// Ray of (pixel, sub-aperture): starts on the lens plane and aims at the
    /// pixel's focus point. For point sources this is the central ray.
    pub fn subray(&self, u: u32, v: u32, s: usize) -> (Pt3, Unit<Vec3>) {
        let dir = self.pixel_dir(u, v);
        match &self.kind {
            ProjectorKind::Point => (self.pose.position, dir),
            ProjectorKind::LargeAperture(ap) => {
                let focus = self.pose.position + dir.into_inner() * ap.focus_distance;
                let origin = self.subaperture_origin(s);
                (origin, Unit::new_normalize(focus - origin))
            }
        }
    }
}

/// Pixel-to-patch correspondences of one projector: the patch hit by each
/// pixel's central ray, plus per-(pixel, sub-aperture) hits for
/// large-aperture projectors.
#[derive(Debug, Clone)]
pub struct Footprint {
    pub image_size: (u32, u32),
    /// Central-ray hit per pixel (canonical correspondence).
    pub central: Vec<Option<usize>>,
    /// One map per sub-aperture; for point projectors this is the single
    /// central map.
    pub sub: Vec<Vec<Option<usize>>>,
}

impl Footprint {
    pub fn pixel_count(&self) -> usize {
        self.image_size.0 as usize * self.image_size.1 as usize
    }

    pub fn is_empty(&self) -> bool {
        self.central.iter().all(Option::is_none)
    }

    /// Patches hit by at least one central ray.
    pub fn covered_patches(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.central.iter().flatten().copied().collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Cast every (pixel, sub-aperture) ray of the projector into the scene.
pub fn footprint(projector: &ProjectorModel, scene: &SceneGraph) -> Footprint {
    let (w, h) = projector.image_size;
    let pixels = projector.pixel_count();
    let subs = projector.subaperture_count();

    let central: Vec<Option<usize>> = (0..pixels)
        .into_par_iter()
        .map(|p| {
            let (u, v) = (p as u32 % w, p as u32 / w);
            let dir = projector.pixel_dir(u, v);
            scene
                .raycast(projector.pose.position, &dir.into_inner())
                .map(|hit| hit.patch)
        })
        .collect();

    let sub: Vec<Vec<Option<usize>>> = if matches!(projector.kind, ProjectorKind::Point) {
        vec![central.clone()]
    } else {
        (0..subs)
            .map(|s| {
                (0..pixels)
                    .into_par_iter()
                    .map(|p| {
                        let (u, v) = (p as u32 % w, p as u32 / w);
                        let (origin, dir) = projector.subray(u, v, s);
                        scene.raycast(origin, &dir.into_inner()).map(|hit| hit.patch)
                    })
                    .collect()
            })
            .collect()
    };

    let _ = h;
    Footprint {
        image_size: projector.image_size,
        central,
        sub,
    }
}

/// Per-(pixel, sub-aperture) transport factor: the irradiance deposited on
/// the hit patch by a unit-value pixel, before per-patch normalization.
fn ray_factor(projector: &ProjectorModel, origin: Pt3, dir: &Unit<Vec3>, scene: &SceneGraph, patch: usize) -> f64 {
    let p = &scene.patches[patch];
    let denom = p.normal.dot(&dir.into_inner());
    // The hit point is along the ray; use the true intersection distance.
    let t = p.normal.dot(&(p.centroid - origin)) / denom;
    if t <= 0.0 {
        return 0.0;
    }
    let cos_in = (-p.normal.dot(&dir.into_inner())).max(0.0);
    projector.power * cos_in / (t * t)
}

/// Sparse transport of one projector: for each sub-aperture and pixel, the
/// (patch, factor) pair of its ray, plus the per-(sub-aperture, patch) hit
/// counts used to turn pixel sums into mean irradiance.
#[derive(Debug, Clone)]
pub struct ProjectorTransport {
    /// `rays[s][pixel] = Some((patch, factor))`.
    pub rays: Vec<Vec<Option<(usize, f64)>>>,
    /// `hits[s][patch]` = number of pixels of sub-aperture s hitting patch.
    pub hits: Vec<Vec<u32>>,
    pub patch_count: usize,
}

impl ProjectorTransport {
    pub fn build(projector: &ProjectorModel, foot: &Footprint, scene: &SceneGraph) -> Self {
        let (w, _h) = projector.image_size;
        let n = scene.patch_count();
        let subs = foot.sub.len();
        let mut rays = Vec::with_capacity(subs);
        let mut hits = Vec::with_capacity(subs);
        for s in 0..subs {
            let mut sub_rays = Vec::with_capacity(foot.pixel_count());
            let mut sub_hits = vec![0u32; n];
            for (p, hit) in foot.sub[s].iter().enumerate() {
                match hit {
                    Some(patch) => {
                        let (u, v) = (p as u32 % w, p as u32 / w);
                        let (origin, dir) = projector.subray(u, v, s);
                        let f = ray_factor(projector, origin, &dir, scene, *patch);
                        sub_rays.push(Some((*patch, f)));
                        sub_hits[*patch] += 1;
                    }
                    None => sub_rays.push(None),
                }
            }
            rays.push(sub_rays);
            hits.push(sub_hits);
        }
        ProjectorTransport {
            rays,
            hits,
            patch_count: n,
        }
    }

    /// Direct irradiance for arbitrary per-pixel emitted values. The emitted
    /// value of pixel p is `value(p)` (already includes black floor, node
    /// input, feathering, masking). Per sub-aperture, the patch irradiance is
    /// the hit-count-normalized sum of ray contributions; the final result
    /// averages over sub-apertures.
    pub fn irradiance_with(&self, value: impl Fn(usize) -> Rgb) -> Vec<Rgb> {
        let subs = self.rays.len();
        let mut total = vec![Rgb::ZERO; self.patch_count];
        for s in 0..subs {
            let mut acc = vec![Rgb::ZERO; self.patch_count];
            for (p, ray) in self.rays[s].iter().enumerate() {
                if let Some((patch, factor)) = ray {
                    acc[*patch] += value(p) * *factor;
                }
            }
            for (patch, v) in acc.into_iter().enumerate() {
                let m = self.hits[s][patch];
                if m > 0 {
                    total[patch] += v * (1.0 / m as f64);
                }
            }
        }
        let inv = 1.0 / subs as f64;
        total.into_iter().map(|v| v * inv).collect()
    }

    /// Scalar variant of [`irradiance_with`] for channel-independent weights.
    pub fn irradiance_scalar(&self, value: impl Fn(usize) -> f64) -> Vec<f64> {
        let subs = self.rays.len();
        let mut total = vec![0.0; self.patch_count];
        for s in 0..subs {
            let mut acc = vec![0.0; self.patch_count];
            for (p, ray) in self.rays[s].iter().enumerate() {
                if let Some((patch, factor)) = ray {
                    acc[*patch] += value(p) * *factor;
                }
            }
            for (patch, v) in acc.into_iter().enumerate() {
                let m = self.hits[s][patch];
                if m > 0 {
                    total[patch] += v / m as f64;
                }
            }
        }
        let inv = 1.0 / subs as f64;
        total.into_iter().map(|v| v * inv).collect()
    }
}

/// A contiguous rectangle of pixels, [u0, u1) x [v0, v1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PixelRect {
    pub u0: u32,
    pub v0: u32,
    pub u1: u32,
    pub v1: u32,
}

impl PixelRect {
    pub fn full(image_size: (u32, u32)) -> Self {
        PixelRect {
            u0: 0,
            v0: 0,
            u1: image_size.0,
            v1: image_size.1,
        }
    }

    pub fn contains(&self, u: u32, v: u32) -> bool {
        u >= self.u0 && u < self.u1 && v >= self.v0 && v < self.v1
    }

    pub fn pixel_count(&self) -> usize {
        ((self.u1 - self.u0) as usize) * ((self.v1 - self.v0) as usize)
    }
}

/// A pixel segment of a projector driven by one scalar input per channel.
#[derive(Debug, Clone)]
pub struct ProjectorNode {
    pub projector_id: usize,
    pub node_id: usize,
    pub pixel_region: PixelRect,
    /// Optional exact pixel membership (image-sized); used by compensation
    /// nodes whose region must exclude target-hitting pixels.
    pub pixel_mask: Option<Vec<bool>>,
    /// Chart this node is assigned to for the conventional initializer.
    pub assigned_chart: Option<usize>,
    pub input: Rgb,
}

impl ProjectorNode {
    pub fn covers_pixel(&self, u: u32, v: u32, width: u32) -> bool {
        if !self.pixel_region.contains(u, v) {
            return false;
        }
        match &self.pixel_mask {
            Some(mask) => mask[(v * width + u) as usize],
            None => true,
        }
    }
}

/// Direct irradiance of a single node at its current input: the projector's
/// whole-image black floor plus the node region's signal. Unfeathered.
pub fn emit_node(
    projector: &ProjectorModel,
    foot: &Footprint,
    node: &ProjectorNode,
    scene: &SceneGraph,
) -> Vec<Rgb> {
    assert_eq!(projector.id, node.projector_id, "node belongs to projector");
    debug_assert!(node.input.0.iter().all(|&x| (0.0..=1.0).contains(&x)));
    let transport = ProjectorTransport::build(projector, foot, scene);
    let w = projector.image_size.0;
    let bl = projector.black_level;
    transport.irradiance_with(|p| {
        let (u, v) = (p as u32 % w, p as u32 / w);
        if node.covers_pixel(u, v, w) {
            pixel_emission(bl, node.input)
        } else {
            bl
        }
    })
}

/// Emitted value of a pixel at input x: black floor plus the remaining range.
pub fn pixel_emission(black_level: Rgb, x: Rgb) -> Rgb {
    black_level.zip(x, |bl, xi| bl + (1.0 - bl) * xi)
}

/// Direct irradiance of a full display image projected through the
/// (possibly large-aperture) projector.
pub fn emit_aperture(
    projector: &ProjectorModel,
    display_image: &Image,
    scene: &SceneGraph,
) -> Vec<Rgb> {
    assert_eq!(
        (display_image.width, display_image.height),
        projector.image_size,
        "display image must match the projector's display plane"
    );
    let foot = footprint(projector, scene);
    let transport = ProjectorTransport::build(projector, &foot, scene);
    let bl = projector.black_level;
    transport.irradiance_with(|p| pixel_emission(bl, display_image.data[p]))
}

/// Blackbody tint for a color temperature, normalized so 6500 K maps to
/// (1, 1, 1). Piecewise fit to the Planckian locus.
pub fn kelvin_to_rgb(kelvin: f64) -> Rgb {
    fn raw(kelvin: f64) -> [f64; 3] {
        let t = kelvin / 100.0;
        let r = if t <= 66.0 {
            255.0
        } else {
            329.698727446 * (t - 60.0).powf(-0.1332047592)
        };
        let g = if t <= 66.0 {
            99.4708025861 * t.ln() - 161.1195681661
        } else {
            288.1221695283 * (t - 60.0).powf(-0.0755148492)
        };
        let b = if t >= 66.0 {
            255.0
        } else if t <= 19.0 {
            0.0
        } else {
            138.5177312231 * (t - 10.0).ln() - 305.0447927307
        };
        [r.clamp(0.0, 255.0), g.clamp(0.0, 255.0), b.clamp(0.0, 255.0)]
    }
    let v = raw(kelvin);
    let anchor = raw(6500.0);
    Rgb([v[0] / anchor[0], v[1] / anchor[1], v[2] / anchor[2]])
}

/// The LED panel used as the reference room light: a sampled rectangular
/// Lambertian area emitter with a Planckian tint.
#[derive(Debug, Clone)]
pub struct LedLuminaire {
    pub pose: Pose,
    pub emitter_size: (f64, f64),
    pub intensity: f64,
    pub color_temperature: f64,
    pub samples: (u32, u32),
}

impl LedLuminaire {
    pub fn from_config(cfg: &LedConfig) -> Self {
        LedLuminaire {
            pose: Pose::look_at(Pt3::from(cfg.position), Pt3::from(cfg.look_at)),
            emitter_size: (cfg.emitter_size[0], cfg.emitter_size[1]),
            intensity: cfg.intensity,
            color_temperature: cfg.color_temperature,
            samples: (cfg.samples[0], cfg.samples[1]),
        }
    }

    pub fn tint(&self) -> Rgb {
        kelvin_to_rgb(self.color_temperature)
    }
}

/// Direct irradiance from the LED panel at every patch centroid: emitter
/// surface sampling with double cosine, inverse square, and blocker
/// visibility.
pub fn led_irradiance(led: &LedLuminaire, scene: &SceneGraph) -> Vec<Rgb> {
    assert!(led.intensity >= 0.0);
    let (sw, sh) = led.samples;
    let total = (sw * sh) as f64;
    let tint = led.tint() * (led.intensity / total);
    scene
        .patches
        .par_iter()
        .map(|patch| {
            let mut acc = 0.0;
            for j in 0..sh {
                for i in 0..sw {
                    let ox = ((i as f64 + 0.5) / sw as f64 - 0.5) * led.emitter_size.0;
                    let oy = ((j as f64 + 0.5) / sh as f64 - 0.5) * led.emitter_size.1;
                    let src = led.pose.position
                        + led.pose.right.into_inner() * ox
                        + led.pose.up.into_inner() * oy;
                    let d = patch.centroid - src;
                    let r2 = d.norm_squared();
                    if r2 < 1e-12 {
                        continue;
                    }
                    let dn = d / r2.sqrt();
                    let cos_e = led.pose.forward.dot(&dn);
                    let cos_r = -patch.normal.dot(&dn);
                    if cos_e <= 0.0 || cos_r <= 0.0 {
                        continue;
                    }
                    if scene.segment_occluded(src, patch.centroid) {
                        continue;
                    }
                    acc += cos_e * cos_r / r2;
                }
            }
            tint * acc
        })
        .collect()
}

/// Result of margin masking: which display pixels stay on, and which
/// non-target patches lost a meaningful share of their irradiance.
#[derive(Debug, Clone)]
pub struct MaskResult {
    pub mask: PixelMask,
    pub darkened_patches: Vec<usize>,
}

/// Turn off every pixel with ANY sub-aperture ray hitting a target patch
/// (margin masking). `darkened_fraction` is the share of full-white
/// irradiance a non-target patch must lose to be reported as darkened.
pub fn mask_target_with_margin(
    projector: &ProjectorModel,
    foot: &Footprint,
    scene: &SceneGraph,
    target_patches: &[usize],
    darkened_fraction: f64,
) -> MaskResult {
    let (w, h) = foot.image_size;
    let is_target: Vec<bool> = {
        let mut v = vec![false; scene.patch_count()];
        for &t in target_patches {
            v[t] = true;
        }
        v
    };
    let mut on = vec![true; foot.pixel_count()];
    for sub in &foot.sub {
        for (p, hit) in sub.iter().enumerate() {
            if let Some(patch) = hit {
                if is_target[*patch] {
                    on[p] = false;
                }
            }
        }
    }
    let mask = PixelMask {
        width: w,
        height: h,
        on,
    };

    // Darkened set: compare full-white signal irradiance with and without
    // the mask (black floor excluded from both sides).
    let transport = ProjectorTransport::build(projector, foot, scene);
    let unmasked = transport.irradiance_scalar(|_| 1.0);
    let masked = transport.irradiance_scalar(|p| if mask.on[p] { 1.0 } else { 0.0 });
    let darkened_patches = (0..scene.patch_count())
        .filter(|&k| {
            !is_target[k]
                && unmasked[k] > 1e-12
                && (unmasked[k] - masked[k]) >= darkened_fraction * unmasked[k]
        })
        .collect();
    MaskResult {
        mask,
        darkened_patches,
    }
}

/// True if the scene's target region is fully inside this projector's
/// masked-off pixels (used as a sanity check after masking).
pub fn mask_covers_target(foot: &Footprint, mask: &PixelMask, target_patches: &[usize]) -> bool {
    let targets: std::collections::HashSet<usize> = target_patches.iter().copied().collect();
    foot.sub.iter().all(|sub| {
        sub.iter().enumerate().all(|(p, hit)| match hit {
            Some(patch) if targets.contains(patch) => !mask.on[p],
            _ => true,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SceneConfig;
    use crate::scene::build_scene;

    fn single_wall_scene() -> SceneGraph {
        // One big wall patch in front of the projector.
        let cfg = SceneConfig::empty_room([2.0, 2.0, 2.0], [1, 1, 1]);
        build_scene(&cfg).unwrap()
    }

    fn simple_projector(id: usize, aperture: Option<crate::config::ApertureConfig>) -> ProjectorModel {
        ProjectorModel::from_config(
            id,
            &ProjectorConfig {
                position: [1.0, 1.0, 1.0],
                look_at: [1.0, 2.0, 1.0],
                image_size: [2, 2],
                frustum_deg: [20.0, 20.0],
                black_level: Rgb::ZERO,
                power: 1.0,
                role: ProjectorRole::Luminaire,
                aperture,
            },
        )
    }

    #[test]
    fn outward_facing_projector_has_empty_footprint() {
        let scene = single_wall_scene();
        let mut proj = simple_projector(0, None);
        // Aim at a point outside the room, through... actually aim from
        // outside the room so rays never enter it.
        proj.pose = Pose::look_at(Pt3::new(1.0, 10.0, 1.0), Pt3::new(1.0, 20.0, 1.0));
        let f = footprint(&proj, &scene);
        assert!(f.is_empty());
    }

    #[test]
    fn narrow_projector_sees_single_wall_patch() {
        let scene = single_wall_scene();
        let proj = simple_projector(0, None);
        let f = footprint(&proj, &scene);
        let front_wall = scene
            .raycast(Pt3::new(1.0, 1.0, 1.0), &Vector3::y())
            .unwrap()
            .patch;
        assert_eq!(f.central.len(), 4);
        for hit in &f.central {
            assert_eq!(*hit, Some(front_wall));
        }
    }

    #[test]
    fn zero_input_zero_black_level_emits_nothing() {
        let scene = single_wall_scene();
        let proj = simple_projector(0, None);
        let f = footprint(&proj, &scene);
        let node = ProjectorNode {
            projector_id: 0,
            node_id: 0,
            pixel_region: PixelRect::full(proj.image_size),
            pixel_mask: None,
            assigned_chart: None,
            input: Rgb::ZERO,
        };
        let e = emit_node(&proj, &f, &node, &scene);
        assert!(e.iter().all(|v| *v == Rgb::ZERO));
    }

    #[test]
    fn emission_is_linear_in_input() {
        let scene = single_wall_scene();
        let proj = simple_projector(0, None);
        let f = footprint(&proj, &scene);
        let mk = |x: f64| ProjectorNode {
            projector_id: 0,
            node_id: 0,
            pixel_region: PixelRect::full(proj.image_size),
            pixel_mask: None,
            assigned_chart: None,
            input: Rgb::splat(x),
        };
        let e1 = emit_node(&proj, &f, &mk(0.4), &scene);
        let e2 = emit_node(&proj, &f, &mk(0.8), &scene);
        for (a, b) in e1.iter().zip(&e2) {
            for c in 0..3 {
                assert!((b[c] - 2.0 * a[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_white_matches_brute_force_ray_sum() {
        // Independent oracle: accumulate per-ray cos/r^2 directly from the
        // projector definition, then normalize per patch by hit count.
        let scene = single_wall_scene();
        let proj = simple_projector(0, None);
        let f = footprint(&proj, &scene);
        let node = ProjectorNode {
            projector_id: 0,
            node_id: 0,
            pixel_region: PixelRect::full(proj.image_size),
            pixel_mask: None,
            assigned_chart: None,
            input: Rgb::ONE,
        };
        let got = emit_node(&proj, &f, &node, &scene);

        let mut sums = vec![0.0; scene.patch_count()];
        let mut counts = vec![0u32; scene.patch_count()];
        let (w, h) = proj.image_size;
        for v in 0..h {
            for u in 0..w {
                let dir = proj.pixel_dir(u, v);
                if let Some(hit) = scene.raycast(proj.pose.position, &dir.into_inner()) {
                    let patch = &scene.patches[hit.patch];
                    let cos_in = -patch.normal.dot(&dir.into_inner());
                    sums[hit.patch] += proj.power * cos_in / (hit.t * hit.t);
                    counts[hit.patch] += 1;
                }
            }
        }
        for k in 0..scene.patch_count() {
            let expect = if counts[k] > 0 {
                sums[k] / counts[k] as f64
            } else {
                0.0
            };
            assert!(
                (got[k][0] - expect).abs() < 1e-9,
                "patch {k}: {} vs {}",
                got[k][0],
                expect
            );
        }
    }

    #[test]
    fn grid_1x1_aperture_equals_point_source_exactly() {
        let scene = single_wall_scene();
        let point = simple_projector(0, None);
        let aperture = simple_projector(
            0,
            Some(crate::config::ApertureConfig {
                lens_side: 0.5,
                subaperture_grid: [1, 1],
                focus_distance: 1.0,
            }),
        );
        let img = Image::filled(2, 2, Rgb::splat(0.37));
        let e_point = emit_aperture(&point, &img, &scene);
        let e_ap = emit_aperture(&aperture, &img, &scene);
        for (a, b) in e_point.iter().zip(&e_ap) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn blocker_leaves_partial_light_under_large_aperture() {
        let mut cfg = SceneConfig::empty_room([2.0, 2.0, 2.0], [8, 8, 1]);
        cfg.furniture.push(crate::config::FurnitureConfig {
            name: "blocker".into(),
            center: [1.0, 1.0, 1.0],
            half_extents: [0.10, 0.10, 0.02],
            reflectance: Rgb::splat(0.2),
            subdiv: 1,
        });
        let scene = build_scene(&cfg).unwrap();
        let mk = |grid| {
            ProjectorModel::from_config(
                0,
                &ProjectorConfig {
                    position: [1.0, 1.0, 1.9],
                    look_at: [1.0, 1.0, 0.0],
                    image_size: [8, 8],
                    frustum_deg: [30.0, 30.0],
                    black_level: Rgb::ZERO,
                    power: 1.0,
                    role: ProjectorRole::Luminaire,
                    aperture: Some(crate::config::ApertureConfig {
                        lens_side: 0.6,
                        subaperture_grid: grid,
                        focus_distance: 1.9,
                    }),
                },
            )
        };
        let img = Image::filled(8, 8, Rgb::ONE);
        let soft = emit_aperture(&mk([8, 8]), &img, &scene);
        let hard = emit_aperture(&mk([1, 1]), &img, &scene);

        // The floor patch straight under the blocker is fully shadowed by
        // the point source but only partially by the area source.
        let below = scene
            .raycast(Pt3::new(1.0, 1.0, 0.5), &(-Vector3::z()))
            .unwrap()
            .patch;
        assert_eq!(hard[below], Rgb::ZERO);
        assert!(soft[below][0] > 0.0);
        // Partial: strictly below the unoccluded neighbors.
        let neighbor = scene
            .raycast(Pt3::new(0.4, 1.0, 0.5), &(-Vector3::z()))
            .unwrap()
            .patch;
        assert!(soft[below][0] < soft[neighbor][0]);
    }

    #[test]
    fn led_zero_intensity_is_dark() {
        let scene = single_wall_scene();
        let led = LedLuminaire {
            pose: Pose::look_at(Pt3::new(1.0, 1.0, 1.9), Pt3::new(1.0, 1.0, 0.0)),
            emitter_size: (0.3, 0.3),
            intensity: 0.0,
            color_temperature: 6500.0,
            samples: (2, 2),
        };
        let e = led_irradiance(&led, &scene);
        assert!(e.iter().all(|v| *v == Rgb::ZERO));
    }

    #[test]
    fn kelvin_6500_is_unity_and_3000_is_warm() {
        let neutral = kelvin_to_rgb(6500.0);
        for c in 0..3 {
            assert!((neutral[c] - 1.0).abs() < 1e-12);
        }
        let warm = kelvin_to_rgb(3000.0);
        assert!(warm[0] > warm[1] && warm[1] > warm[2], "3000K: {warm:?}");
        // Regression values for the chosen Planckian fit (3000 K).
        assert!((warm[0] - 1.0).abs() < 1e-9);
        assert!((warm[1] - 0.6973366126954361).abs() < 1e-12, "g = {}", warm[1]);
        assert!((warm[2] - 0.4395952897749875).abs() < 1e-12, "b = {}", warm[2]);
    }

    #[test]
    fn masking_without_target_is_identity() {
        let scene = single_wall_scene();
        let proj = simple_projector(0, None);
        let f = footprint(&proj, &scene);
        let result = mask_target_with_margin(&proj, &f, &scene, &[], 0.05);
        assert_eq!(result.mask.off_count(), 0);
        assert!(result.darkened_patches.is_empty());
    }

    #[test]
    fn point_source_mask_is_exactly_central_target_pixels() {
        let cfg = SceneConfig::default();
        let scene = build_scene(&cfg).unwrap();
        // The texture projector is a point source aimed at the target.
        let tex_idx = cfg.texture_projector().unwrap();
        let proj = ProjectorModel::from_config(tex_idx, &cfg.projectors[tex_idx]);
        let f = footprint(&proj, &scene);
        let targets = scene.target_patches();
        let result = mask_target_with_margin(&proj, &f, &scene, &targets, 0.05);
        let tset: std::collections::HashSet<usize> = targets.iter().copied().collect();
        for (p, hit) in f.central.iter().enumerate() {
            let should_mask = matches!(hit, Some(patch) if tset.contains(patch));
            assert_eq!(!result.mask.on[p], should_mask, "pixel {p}");
        }
    }

    #[test]
    fn aperture_mask_is_superset_of_point_mask_and_kills_target_light() {
        let cfg = SceneConfig::default();
        let scene = build_scene(&cfg).unwrap();
        let ap_idx = cfg
            .projectors
            .iter()
            .position(|p| p.aperture.is_some())
            .unwrap();
        let proj = ProjectorModel::from_config(ap_idx, &cfg.projectors[ap_idx]);
        let f = footprint(&proj, &scene);
        let targets = scene.target_patches();
        let result = mask_target_with_margin(&proj, &f, &scene, &targets, 0.05);

        // Point-source mask for the same projector geometry.
        let mut point_masked = 0usize;
        let tset: std::collections::HashSet<usize> = targets.iter().copied().collect();
        for hit in &f.central {
            if matches!(hit, Some(patch) if tset.contains(patch)) {
                point_masked += 1;
            }
        }
        assert!(result.mask.off_count() >= point_masked);
        assert!(mask_covers_target(&f, &result.mask, &targets));

        // With the mask applied, the signal irradiance on target patches is
        // exactly zero (only the black floor remains).
        let transport = ProjectorTransport::build(&proj, &f, &scene);
        let masked_signal =
            transport.irradiance_scalar(|p| if result.mask.on[p] { 1.0 } else { 0.0 });
        for &t in &targets {
            assert_eq!(masked_signal[t], 0.0, "target patch {t} still lit");
        }
    }
}
