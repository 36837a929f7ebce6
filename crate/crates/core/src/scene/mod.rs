//! Room geometry as diffuse rectangular patches, with convex occluders and
//! global light transport (form factors + radiosity).

mod form_factor;
mod radiosity;

pub use form_factor::{compute_form_factors, point_to_polygon_ff, FormFactorMatrix};
pub use radiosity::{solve_radiosity, RadiositySolution};

use crate::color::Rgb;
use crate::config::{ChartPlacement, SceneConfig, Surface, TargetKind};
use nalgebra::{Point3, Unit, Vector3};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Pt3 = Point3<f64>;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("room dimensions must be positive, got {0:?}")]
    BadRoomSize([f64; 3]),
    #[error("subdivision counts must be >= 1, got {0:?}")]
    BadSubdivision([u32; 3]),
    #[error("chart {index} extends outside the room bounds")]
    ChartOutOfBounds { index: usize },
    #[error("charts {a} and {b} overlap on the same surface")]
    ChartOverlap { a: usize, b: usize },
    #[error("target lies outside the room bounds")]
    TargetOutOfBounds,
    #[error("patch {id} violates {what}")]
    BadPatch { id: usize, what: &'static str },
    #[error("reflectance channel out of [0,1]: {0:?}")]
    BadReflectance(Rgb),
}

/// Semantic labels attached to a patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PatchTag {
    Wall,
    Floor,
    Ceiling,
    Desk,
    Target,
    /// Patch `slot` of color chart `chart`.
    Chart { chart: usize, slot: usize },
}

/// A flat rectangular diffuse patch. `u_axis`/`v_axis` span the rectangle;
/// the full extent is `2*half_u` by `2*half_v` around the centroid.
#[derive(Debug, Clone)]
pub struct SurfacePatch {
    pub id: usize,
    pub centroid: Pt3,
    pub normal: Unit<Vec3>,
    pub area: f64,
    pub reflectance: Rgb,
    pub tags: Vec<PatchTag>,
    pub u_axis: Unit<Vec3>,
    pub v_axis: Unit<Vec3>,
    pub half_u: f64,
    pub half_v: f64,
}

impl SurfacePatch {
    /// Point on the rectangle at local coordinates in [-1, 1]^2.
    pub fn point_at(&self, s: f64, t: f64) -> Pt3 {
        self.centroid + self.u_axis.into_inner() * (s * self.half_u)
            + self.v_axis.into_inner() * (t * self.half_v)
    }

    pub fn has_tag(&self, tag: PatchTag) -> bool {
        self.tags.contains(&tag)
    }

    pub fn chart_tag(&self) -> Option<(usize, usize)> {
        self.tags.iter().find_map(|t| match t {
            PatchTag::Chart { chart, slot } => Some((*chart, *slot)),
            _ => None,
        })
    }

    /// Ray/rectangle intersection; returns the ray parameter t > eps.
    pub fn ray_hit(&self, origin: Pt3, dir: &Vec3) -> Option<f64> {
        let denom = self.normal.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = self.normal.dot(&(self.centroid - origin)) / denom;
        if t <= 1e-9 {
            return None;
        }
        let hit = origin + dir * t;
        let local = hit - self.centroid;
        let u = local.dot(&self.u_axis);
        let v = local.dot(&self.v_axis);
        if u.abs() <= self.half_u + 1e-9 && v.abs() <= self.half_v + 1e-9 {
            Some(t)
        } else {
            None
        }
    }
}

/// A convex blocker used for visibility tests (shadows, soft shadows).
#[derive(Debug, Clone)]
pub enum Occluder {
    Sphere { center: Pt3, radius: f64 },
    Block { center: Pt3, half_extents: Vec3 },
}

impl Occluder {
    /// Nearest positive ray parameter, if the ray hits the blocker.
    pub fn ray_hit(&self, origin: Pt3, dir: &Vec3) -> Option<f64> {
        match self {
            Occluder::Sphere { center, radius } => {
                let oc = origin - center;
                let b = oc.dot(dir);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c * dir.norm_squared();
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let n2 = dir.norm_squared();
                let t0 = (-b - sq) / n2;
                let t1 = (-b + sq) / n2;
                if t0 > 1e-9 {
                    Some(t0)
                } else if t1 > 1e-9 {
                    Some(t1)
                } else {
                    None
                }
            }
            Occluder::Block {
                center,
                half_extents,
            } => {
                // Slab test in the box's axis-aligned local frame.
                let local = origin - center;
                let mut t_min = f64::NEG_INFINITY;
                let mut t_max = f64::INFINITY;
                for axis in 0..3 {
                    let o = local[axis];
                    let d = dir[axis];
                    let h = half_extents[axis];
                    if d.abs() < 1e-15 {
                        if o.abs() > h {
                            return None;
                        }
                    } else {
                        let ta = (-h - o) / d;
                        let tb = (h - o) / d;
                        let (lo, hi) = if ta < tb { (ta, tb) } else { (tb, ta) };
                        t_min = t_min.max(lo);
                        t_max = t_max.min(hi);
                        if t_min > t_max {
                            return None;
                        }
                    }
                }
                if t_min > 1e-9 {
                    Some(t_min)
                } else if t_max > 1e-9 {
                    Some(t_max)
                } else {
                    None
                }
            }
        }
    }

    /// True if the open segment between `a` and `b` passes through the blocker.
    pub fn blocks_segment(&self, a: Pt3, b: Pt3) -> bool {
        let dir = b - a;
        match self.ray_hit(a, &dir) {
            Some(t) => t < 1.0 - 1e-9,
            None => false,
        }
    }
}

/// Axis-aligned room bounds.
#[derive(Debug, Clone, Copy)]
pub struct Aabb {
    pub min: Pt3,
    pub max: Pt3,
}

impl Aabb {
    pub fn contains(&self, p: &Pt3, slack: f64) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] - slack && p[i] <= self.max[i] + slack)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RayHit {
    pub patch: usize,
    pub t: f64,
}

/// Immutable scene: patches + occluders + bounds. Safe to share across threads.
#[derive(Debug, Clone)]
pub struct SceneGraph {
    pub patches: Vec<SurfacePatch>,
    pub occluders: Vec<Occluder>,
    pub bounds: Aabb,
}

impl SceneGraph {
    /// Assemble a scene from raw parts, validating the patch invariants.
    pub fn from_parts(
        patches: Vec<SurfacePatch>,
        occluders: Vec<Occluder>,
        bounds: Aabb,
    ) -> Result<Self, SceneError> {
        for (i, p) in patches.iter().enumerate() {
            if p.id != i {
                return Err(SceneError::BadPatch {
                    id: p.id,
                    what: "dense id ordering",
                });
            }
            if (p.normal.norm() - 1.0).abs() > 1e-9 {
                return Err(SceneError::BadPatch {
                    id: p.id,
                    what: "unit normal",
                });
            }
            if p.area <= 0.0 {
                return Err(SceneError::BadPatch {
                    id: p.id,
                    what: "positive area",
                });
            }
            if p.reflectance.0.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(SceneError::BadReflectance(p.reflectance));
            }
            if p.u_axis.cross(&p.v_axis).dot(&p.normal) < 1.0 - 1e-9 {
                return Err(SceneError::BadPatch {
                    id: p.id,
                    what: "right-handed orthonormal frame",
                });
            }
        }
        Ok(SceneGraph {
            patches,
            occluders,
            bounds,
        })
    }

    pub fn patch_count(&self) -> usize {
        self.patches.len()
    }

    /// Nearest patch hit by the ray, unless a blocker sits strictly in front.
    /// Patches coplanar with a blocker face win the tie, so faces laid onto a
    /// blocker (desk top, target shell) stay visible.
    pub fn raycast(&self, origin: Pt3, dir: &Vec3) -> Option<RayHit> {
        let mut best: Option<RayHit> = None;
        for p in &self.patches {
            if let Some(t) = p.ray_hit(origin, dir) {
                if best.map_or(true, |b| t < b.t) {
                    best = Some(RayHit { patch: p.id, t });
                }
            }
        }
        let t_occ = self
            .occluders
            .iter()
            .filter_map(|o| o.ray_hit(origin, dir))
            .fold(f64::INFINITY, f64::min);
        match best {
            Some(hit) if t_occ < hit.t - 1e-7 => None,
            Some(hit) => Some(hit),
            None => None,
        }
    }

    /// Visibility between two surface points, tested against blockers only.
    pub fn segment_occluded(&self, a: Pt3, b: Pt3) -> bool {
        self.occluders.iter().any(|o| o.blocks_segment(a, b))
    }

    pub fn patches_with_tag(&self, tag: PatchTag) -> Vec<usize> {
        self.patches
            .iter()
            .filter(|p| p.has_tag(tag))
            .map(|p| p.id)
            .collect()
    }

    pub fn target_patches(&self) -> Vec<usize> {
        self.patches_with_tag(PatchTag::Target)
    }
}

/// Subdivide a rectangle (center, axes, half sizes) into an `nu` x `nv` grid
/// of equal patches, pushing them onto `out`.
#[allow(clippy::too_many_arguments)]
fn subdivide_rect(
    out: &mut Vec<SurfacePatch>,
    center: Pt3,
    normal: Unit<Vec3>,
    u_axis: Unit<Vec3>,
    v_axis: Unit<Vec3>,
    half_u: f64,
    half_v: f64,
    nu: u32,
    nv: u32,
    reflectance: Rgb,
    tags: &[PatchTag],
) {
    // Patch frames are right-handed (u x v = normal); flip v if the caller's
    // axes are mirrored so the contour winding in form factors stays valid.
    let v_axis = if u_axis.cross(&v_axis).dot(&normal) < 0.0 {
        Unit::new_normalize(-v_axis.into_inner())
    } else {
        v_axis
    };
    let du = 2.0 * half_u / nu as f64;
    let dv = 2.0 * half_v / nv as f64;
    for j in 0..nv {
        for i in 0..nu {
            let cu = -half_u + (i as f64 + 0.5) * du;
            let cv = -half_v + (j as f64 + 0.5) * dv;
            let c = center + u_axis.into_inner() * cu + v_axis.into_inner() * cv;
            out.push(SurfacePatch {
                id: out.len(),
                centroid: c,
                normal,
                area: du * dv,
                reflectance,
                tags: tags.to_vec(),
                u_axis,
                v_axis,
                half_u: du / 2.0,
                half_v: dv / 2.0,
            });
        }
    }
}

fn unit(v: Vec3) -> Unit<Vec3> {
    Unit::new_normalize(v)
}

/// In-plane axes for a surface with the given inward normal. Picks a stable
/// horizontal-ish u axis.
fn plane_axes(normal: &Vec3) -> (Unit<Vec3>, Unit<Vec3>) {
    let helper = if normal.z.abs() < 0.9 {
        Vector3::z()
    } else {
        Vector3::y()
    };
    let u = unit(helper.cross(normal));
    let v = unit(normal.cross(&u));
    (u, v)
}

/// Offset distance for patches laid onto a host surface (charts on walls,
/// target shell on its blocker) so ray ties resolve toward the overlay.
const SURFACE_EPS: f64 = 1e-4;

/// Build the room described by `config`: closed box, furniture blocks,
/// color charts, and the projection target.
pub fn build_scene(config: &SceneConfig) -> Result<SceneGraph, SceneError> {
    let [w, d, h] = config.room.size;
    if w <= 0.0 || d <= 0.0 || h <= 0.0 {
        return Err(SceneError::BadRoomSize(config.room.size));
    }
    let [nx, ny, nz] = config.room.subdivisions;
    if nx < 1 || ny < 1 || nz < 1 {
        return Err(SceneError::BadSubdivision(config.room.subdivisions));
    }

    let mut patches = Vec::new();
    let mut occluders = Vec::new();
    let bounds = Aabb {
        min: Pt3::new(0.0, 0.0, 0.0),
        max: Pt3::new(w, d, h),
    };

    let refl = &config.room.reflectance;
    // Six faces, normals pointing inward. u/v axes chosen per-face so that
    // the grid is axis-aligned.
    struct Face {
        center: Pt3,
        normal: Vec3,
        u: Vec3,
        v: Vec3,
        hu: f64,
        hv: f64,
        nu: u32,
        nv: u32,
        rho: Rgb,
        tag: PatchTag,
    }
    let faces = [
        // floor z=0
        Face {
            center: Pt3::new(w / 2.0, d / 2.0, 0.0),
            normal: Vector3::z(),
            u: Vector3::x(),
            v: Vector3::y(),
            hu: w / 2.0,
            hv: d / 2.0,
            nu: nx,
            nv: ny,
            rho: refl.floor,
            tag: PatchTag::Floor,
        },
        // ceiling z=h
        Face {
            center: Pt3::new(w / 2.0, d / 2.0, h),
            normal: -Vector3::z(),
            u: Vector3::x(),
            v: Vector3::y(),
            hu: w / 2.0,
            hv: d / 2.0,
            nu: nx,
            nv: ny,
            rho: refl.ceiling,
            tag: PatchTag::Ceiling,
        },
        // back wall y=0
        Face {
            center: Pt3::new(w / 2.0, 0.0, h / 2.0),
            normal: Vector3::y(),
            u: Vector3::x(),
            v: Vector3::z(),
            hu: w / 2.0,
            hv: h / 2.0,
            nu: nx,
            nv: nz,
            rho: refl.walls,
            tag: PatchTag::Wall,
        },
        // front wall y=d
        Face {
            center: Pt3::new(w / 2.0, d, h / 2.0),
            normal: -Vector3::y(),
            u: Vector3::x(),
            v: Vector3::z(),
            hu: w / 2.0,
            hv: h / 2.0,
            nu: nx,
            nv: nz,
            rho: refl.walls,
            tag: PatchTag::Wall,
        },
        // left wall x=0
        Face {
            center: Pt3::new(0.0, d / 2.0, h / 2.0),
            normal: Vector3::x(),
            u: Vector3::y(),
            v: Vector3::z(),
            hu: d / 2.0,
            hv: h / 2.0,
            nu: ny,
            nv: nz,
            rho: refl.walls,
            tag: PatchTag::Wall,
        },
        // right wall x=w
        Face {
            center: Pt3::new(w, d / 2.0, h / 2.0),
            normal: -Vector3::x(),
            u: Vector3::y(),
            v: Vector3::z(),
            hu: d / 2.0,
            hv: h / 2.0,
            nu: ny,
            nv: nz,
            rho: refl.walls,
            tag: PatchTag::Wall,
        },
    ];
    for f in faces {
        subdivide_rect(
            &mut patches,
            f.center,
            unit(f.normal),
            unit(f.u),
            unit(f.v),
            f.hu,
            f.hv,
            f.nu,
            f.nv,
            f.rho,
            &[f.tag],
        );
    }

    // Furniture: each block contributes a blocker plus its exposed faces.
    for item in &config.furniture {
        let c = Pt3::from(item.center);
        let he = Vec3::from(item.half_extents);
        occluders.push(Occluder::Block {
            center: c,
            half_extents: he,
        });
        add_block_faces(&mut patches, c, he, item.reflectance, item.subdiv, PatchTag::Desk, &bounds);
    }

    // Color charts.
    let mut chart_rects: Vec<(Surface, [f64; 2], [f64; 2])> = Vec::new();
    for (m, chart) in config.charts.iter().enumerate() {
        let (center, normal) = chart_pose(chart, config)?;
        let (hu, hv) = (
            chart.patch_size * chart.grid[0] as f64 / 2.0,
            chart.patch_size * chart.grid[1] as f64 / 2.0,
        );
        // Bounds check: the whole chart rectangle must sit inside the room.
        let (u_axis, v_axis) = plane_axes(&normal);
        for (su, sv) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)] {
            let corner =
                center + u_axis.into_inner() * (su * hu) + v_axis.into_inner() * (sv * hv);
            if !bounds.contains(&corner, 1e-9) {
                return Err(SceneError::ChartOutOfBounds { index: m });
            }
        }
        // Overlap check against earlier charts on the same surface.
        let in_plane = in_plane_rect(chart, hu, hv);
        for (i, (surf, lo, hi)) in chart_rects.iter().enumerate() {
            if *surf == chart.surface
                && in_plane.0[0] < hi[0]
                && lo[0] < in_plane.1[0]
                && in_plane.0[1] < hi[1]
                && lo[1] < in_plane.1[1]
            {
                return Err(SceneError::ChartOverlap { a: i, b: m });
            }
        }
        chart_rects.push((chart.surface, in_plane.0, in_plane.1));

        let lifted = center + normal * SURFACE_EPS;
        let reflectances = chart_reflectances(chart.grid[0] * chart.grid[1]);
        let du = chart.patch_size;
        for slot in 0..(chart.grid[0] * chart.grid[1]) as usize {
            let gi = slot as u32 % chart.grid[0];
            let gj = slot as u32 / chart.grid[0];
            let cu = -hu + (gi as f64 + 0.5) * du;
            let cv = -hv + (gj as f64 + 0.5) * du;
            let c = lifted + u_axis.into_inner() * cu + v_axis.into_inner() * cv;
            patches.push(SurfacePatch {
                id: patches.len(),
                centroid: c,
                normal: unit(normal),
                area: du * du,
                reflectance: reflectances[slot],
                tags: vec![PatchTag::Chart { chart: m, slot }],
                u_axis,
                v_axis,
                half_u: du / 2.0,
                half_v: du / 2.0,
            });
        }
    }

    // Projection target: a block on the desk (5 exposed faces) or a flat
    // plane used for checker contrast measurements.
    if let Some(target) = &config.target {
        let c = Pt3::from(target.center);
        if !bounds.contains(&c, 0.0) {
            return Err(SceneError::TargetOutOfBounds);
        }
        match target.kind {
            TargetKind::Block => {
                let he = Vec3::from(target.half_extents);
                for off in [he, -he] {
                    if !bounds.contains(&(c + off), 1e-9) {
                        return Err(SceneError::TargetOutOfBounds);
                    }
                }
                occluders.push(Occluder::Block {
                    center: c,
                    half_extents: he,
                });
                add_block_faces(
                    &mut patches,
                    c,
                    he,
                    target.reflectance,
                    target.subdiv,
                    PatchTag::Target,
                    &bounds,
                );
            }
            TargetKind::Plane => {
                let he = Vec3::from(target.half_extents);
                subdivide_rect(
                    &mut patches,
                    c + Vector3::z() * SURFACE_EPS,
                    unit(Vector3::z()),
                    unit(Vector3::x()),
                    unit(Vector3::y()),
                    he.x,
                    he.y,
                    target.subdiv,
                    target.subdiv,
                    target.reflectance,
                    &[PatchTag::Target],
                );
            }
        }
    }

    SceneGraph::from_parts(patches, occluders, bounds)
}

/// Exposed faces of an axis-aligned block, lifted off the blocker surface.
/// Faces flush against a room boundary are skipped.
fn add_block_faces(
    patches: &mut Vec<SurfacePatch>,
    center: Pt3,
    he: Vec3,
    reflectance: Rgb,
    subdiv: u32,
    tag: PatchTag,
    bounds: &Aabb,
) {
    for axis in 0..3 {
        for sign in [-1.0, 1.0] {
            let mut n = Vec3::zeros();
            n[axis] = sign;
            let face_center = center + n * he[axis];
            let on_boundary = (face_center[axis] - bounds.min[axis]).abs() < 1e-6
                || (face_center[axis] - bounds.max[axis]).abs() < 1e-6;
            if on_boundary {
                continue;
            }
            let (ua, va) = ((axis + 1) % 3, (axis + 2) % 3);
            let mut u = Vec3::zeros();
            u[ua] = 1.0;
            let mut v = Vec3::zeros();
            v[va] = 1.0;
            subdivide_rect(
                patches,
                face_center + n * SURFACE_EPS,
                unit(n),
                unit(u),
                unit(v),
                he[ua],
                he[va],
                subdiv,
                subdiv,
                reflectance,
                &[tag],
            );
        }
    }
}

/// World pose (center on the surface, inward normal) of a chart placement.
fn chart_pose(chart: &ChartPlacement, config: &SceneConfig) -> Result<(Pt3, Vec3), SceneError> {
    let [w, d, h] = config.room.size;
    let [a, b] = chart.position;
    let (center, normal) = match chart.surface {
        Surface::Floor => (Pt3::new(a, b, 0.0), Vector3::z()),
        Surface::Ceiling => (Pt3::new(a, b, h), -Vector3::z()),
        Surface::BackWall => (Pt3::new(a, 0.0, b), Vector3::y()),
        Surface::FrontWall => (Pt3::new(a, d, b), -Vector3::y()),
        Surface::LeftWall => (Pt3::new(0.0, a, b), Vector3::x()),
        Surface::RightWall => (Pt3::new(w, a, b), -Vector3::x()),
        Surface::Elevated { height } => (Pt3::new(a, b, height), Vector3::z()),
    };
    Ok((center, normal))
}

/// Chart rectangle in its surface's 2D coordinates, for overlap checks.
fn in_plane_rect(chart: &ChartPlacement, hu: f64, hv: f64) -> ([f64; 2], [f64; 2]) {
    let [a, b] = chart.position;
    ([a - hu, b - hv], [a + hu, b + hv])
}

/// Default 24-patch chart reflectances: 18 chroma patches plus a 6-step
/// gray ramp, in the style of published color-rendition charts. Charts with
/// other sizes cycle the table.
pub fn chart_reflectances(count: u32) -> Vec<Rgb> {
    const TABLE: [[f64; 3]; 24] = [
        [0.400, 0.350, 0.336], // dark skin
        [0.713, 0.586, 0.524], // light skin
        [0.247, 0.251, 0.400], // blue sky
        [0.337, 0.422, 0.286], // foliage
        [0.265, 0.240, 0.329], // blue flower
        [0.261, 0.343, 0.359], // bluish green
        [0.638, 0.445, 0.164], // orange
        [0.242, 0.238, 0.475], // purplish blue
        [0.449, 0.127, 0.127], // moderate red
        [0.288, 0.187, 0.292], // purple
        [0.491, 0.484, 0.169], // yellow green
        [0.656, 0.484, 0.156], // orange yellow
        [0.153, 0.198, 0.558], // blue
        [0.283, 0.393, 0.171], // green
        [0.558, 0.158, 0.148], // red
        [0.890, 0.798, 0.196], // yellow
        [0.513, 0.301, 0.810], // magenta-ish
        [0.030, 0.273, 0.363], // cyan
        [0.950, 0.950, 0.950], // white
        [0.773, 0.773, 0.773],
        [0.304, 0.304, 0.304],
        [0.437, 0.437, 0.437],
        [0.132, 0.132, 0.132],
        [0.031, 0.031, 0.031], // black
    ];
    (0..count as usize)
        .map(|i| Rgb(TABLE[i % TABLE.len()]))
        .collect()
}
