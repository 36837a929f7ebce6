//! Monte Carlo form factors between diffuse patches.
//!
//! For each ordered pair (j, k), points are sampled on patch j and each
//! sample evaluates the exact point-to-polygon transfer to patch k (contour
//! integral over the receiver, clipped against the sample's horizon), times
//! a visibility ray to a point sampled on k. Integrating the receiver
//! analytically removes the near-edge singularity of the naive double-area
//! estimator, so closed-enclosure rows sum to one up to sampling noise in
//! the visibility term alone.

use super::{Pt3, SceneGraph, SurfacePatch, Vec3};
use nalgebra::Unit;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Dense matrix of F[j][k] = fraction of diffuse power leaving patch j that
/// arrives at patch k. Rows are clamped so no row sums above one.
#[derive(Debug, Clone)]
pub struct FormFactorMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl FormFactorMatrix {
    pub fn zero(n: usize) -> Self {
        FormFactorMatrix {
            n,
            entries: vec![0.0; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.entries[j * self.n + k]
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.entries[j * self.n..(j + 1) * self.n]
    }

    pub fn row_sum(&self, j: usize) -> f64 {
        self.row(j).iter().sum()
    }

    /// Build directly from rows; rows are clamped like in `compute_form_factors`.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let n = rows.len();
        let mut entries = Vec::with_capacity(n * n);
        for mut row in rows {
            assert_eq!(row.len(), n, "form factor rows must be square");
            clamp_row(&mut row);
            entries.extend(row);
        }
        FormFactorMatrix { n, entries }
    }
}

/// Row sums may exceed one only through sampling noise; scale such rows
/// back so the radiosity operator stays a contraction.
fn clamp_row(row: &mut [f64]) {
    let sum: f64 = row.iter().sum();
    if sum > 1.0 {
        let s = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= s;
        }
    }
}

/// Deterministic RNG stream per (seed, a, b): identical regardless of thread
/// scheduling.
fn pair_rng(seed: u64, a: usize, b: usize) -> ChaCha8Rng {
    let mut state = seed ^ 0x9e37_79b9_7f4a_7c15;
    for x in [a as u64, b as u64] {
        state ^= x
            .wrapping_add(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(state << 6)
            .wrapping_add(state >> 2);
        state = state.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    }
    ChaCha8Rng::seed_from_u64(state)
}

/// Estimate all pairwise form factors with `samples` point pairs per ordered
/// patch pair. Visibility is tested against the scene's convex blockers.
/// F[j][j] = 0 (planar patches cannot see themselves). Deterministic for a
/// fixed seed.
pub fn compute_form_factors(scene: &SceneGraph, samples: usize, seed: u64) -> FormFactorMatrix {
    assert!(samples >= 1, "samples must be >= 1");
    let n = scene.patch_count();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let pj = &scene.patches[j];
            // One set of emitter samples per row, shared by every receiver.
            let mut row_rng = pair_rng(seed, j, j);
            let xs: Vec<Pt3> = (0..samples)
                .map(|_| {
                    let s = row_rng.random::<f64>() * 2.0 - 1.0;
                    let t = row_rng.random::<f64>() * 2.0 - 1.0;
                    pj.point_at(s, t)
                })
                .collect();
            let mut row = vec![0.0; n];
            for k in 0..n {
                if k == j {
                    continue;
                }
                row[k] = estimate_pair(scene, pj, &scene.patches[k], &xs, seed, j, k);
            }
            row
        })
        .collect();
    FormFactorMatrix::from_rows(rows)
}

fn estimate_pair(
    scene: &SceneGraph,
    pj: &SurfacePatch,
    pk: &SurfacePatch,
    xs: &[Pt3],
    seed: u64,
    j: usize,
    k: usize,
) -> f64 {
    if patch_fully_behind(pj, pk) {
        return 0.0;
    }
    // Receiver corners, wound clockwise around the receiver normal so the
    // contour kernel is positive for front-facing transfer.
    let corners = [
        pk.point_at(-1.0, -1.0),
        pk.point_at(-1.0, 1.0),
        pk.point_at(1.0, 1.0),
        pk.point_at(1.0, -1.0),
    ];
    let mut vis_rng = pair_rng(seed, j, k);
    let mut acc = 0.0;
    for &x in xs {
        // Receiver visibility point, drawn unconditionally to keep the
        // stream aligned across scene variations.
        let s = vis_rng.random::<f64>() * 2.0 - 1.0;
        let t = vis_rng.random::<f64>() * 2.0 - 1.0;
        // The emitter must be on the receiver's front side.
        if pk.normal.dot(&(x - pk.centroid)) <= 0.0 {
            continue;
        }
        let kernel = point_to_polygon_ff(x, &pj.normal, &corners);
        if kernel <= 0.0 {
            continue;
        }
        let y = pk.point_at(s, t);
        if scene.segment_occluded(x, y) {
            continue;
        }
        acc += kernel;
    }
    (acc / xs.len() as f64).clamp(0.0, 1.0)
}

/// True when every corner of one patch lies behind the other's plane, so no
/// point pair can have positive cosines.
fn patch_fully_behind(pj: &SurfacePatch, pk: &SurfacePatch) -> bool {
    let corners = [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)];
    let behind_j = corners
        .iter()
        .all(|&(s, t)| pj.normal.dot(&(pk.point_at(s, t) - pj.centroid)) <= 1e-12);
    let behind_k = corners
        .iter()
        .all(|&(s, t)| pk.normal.dot(&(pj.point_at(s, t) - pk.centroid)) <= 1e-12);
    behind_j || behind_k
}

/// Exact form factor from a differential element (at `x`, normal `n`) to a
/// planar polygon, via the contour integral
///   F = (1 / 2 pi) * n . sum_i gamma_i * unit(r_i x r_{i+1})
/// after clipping the polygon against the element's horizon plane.
pub fn point_to_polygon_ff(x: Pt3, n: &Unit<Vec3>, polygon: &[Pt3]) -> f64 {
    let mut clipped = [Pt3::origin(); 8];
    let len = clip_above_plane(polygon, x, n, &mut clipped);
    if len < 3 {
        return 0.0;
    }
    let mut s = Vec3::zeros();
    for i in 0..len {
        let a = clipped[i] - x;
        let b = clipped[(i + 1) % len] - x;
        let (na, nb) = (a.norm(), b.norm());
        if na < 1e-12 || nb < 1e-12 {
            continue;
        }
        let a = a / na;
        let b = b / nb;
        let cross = a.cross(&b);
        let sin = cross.norm();
        if sin < 1e-14 {
            continue;
        }
        let gamma = sin.atan2(a.dot(&b));
        s += cross * (gamma / sin);
    }
    (n.dot(&s) / (2.0 * std::f64::consts::PI)).clamp(0.0, 1.0)
}

/// Sutherland-Hodgman clip of a polygon against n . (p - x) >= eps.
/// Writes into `out` (room for 8 vertices) and returns the vertex count.
fn clip_above_plane(polygon: &[Pt3], x: Pt3, n: &Unit<Vec3>, out: &mut [Pt3; 8]) -> usize {
    const EPS: f64 = 1e-9;
    let dist = |p: &Pt3| n.dot(&(p - x));
    let mut len = 0;
    let m = polygon.len();
    for i in 0..m {
        let (a, b) = (polygon[i], polygon[(i + 1) % m]);
        let (da, db) = (dist(&a), dist(&b));
        if da >= EPS {
            out[len] = a;
            len += 1;
        }
        if (da >= EPS) != (db >= EPS) && len < 8 {
            let t = (da - EPS) / (da - db);
            out[len] = a + (b - a) * t;
            len += 1;
        }
        if len >= 8 {
            break;
        }
    }
    len
}
