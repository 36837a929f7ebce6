//! Radiosity via a truncated Neumann series.

use super::{FormFactorMatrix, SceneGraph};
use crate::color::{Rgb, CHANNELS};

/// Per-patch outgoing RGB radiosity.
#[derive(Debug, Clone)]
pub struct RadiositySolution {
    pub outgoing: Vec<Rgb>,
    pub bounces_used: u32,
}

/// Solve outgoing radiosity for the given per-patch direct irradiance:
///
///   outgoing = sum_{b=0..bounces} T^b (rho . direct),   T(v) = rho . (F v)
///
/// `bounces = 0` returns the pure first reflection. Channels are independent.
pub fn solve_radiosity(
    scene: &SceneGraph,
    form_factors: &FormFactorMatrix,
    direct: &[Rgb],
    bounces: u32,
) -> RadiositySolution {
    let n = scene.patch_count();
    assert_eq!(direct.len(), n, "direct irradiance length mismatch");
    assert_eq!(form_factors.n(), n, "form factor size mismatch");
    debug_assert!(direct.iter().all(|v| v.0.iter().all(|&x| x >= 0.0)));

    let mut outgoing = vec![Rgb::ZERO; n];
    for c in 0..CHANNELS {
        let rho: Vec<f64> = scene.patches.iter().map(|p| p.reflectance[c]).collect();
        // b = 0: first reflection of direct light.
        let mut current: Vec<f64> = (0..n).map(|i| rho[i] * direct[i][c]).collect();
        let mut total = current.clone();
        for _ in 0..bounces {
            let mut next = vec![0.0; n];
            for (j, out) in next.iter_mut().enumerate() {
                let row = form_factors.row(j);
                let mut incident = 0.0;
                for (k, f) in row.iter().enumerate() {
                    incident += f * current[k];
                }
                *out = rho[j] * incident;
            }
            for (t, v) in total.iter_mut().zip(&next) {
                *t += v;
            }
            current = next;
        }
        for (i, v) in total.into_iter().enumerate() {
            outgoing[i][c] = v;
        }
    }
    RadiositySolution {
        outgoing,
        bounces_used: bounces,
    }
}
