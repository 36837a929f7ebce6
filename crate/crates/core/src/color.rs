//! Linear RGB triples in normalized capture units.

use serde::{Deserialize, Serialize};
use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Sub};

/// A linear RGB triple. Photometric quantities (irradiance, radiosity,
/// reflectance, camera readout) all use this, normalized so typical
/// in-scene values land in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Rgb(pub [f64; 3]);

pub const CHANNELS: usize = 3;

/// Rec.709 luminance weights, used wherever a scalar brightness is needed.
pub const LUMA_WEIGHTS: [f64; 3] = [0.2126, 0.7152, 0.0722];

impl Rgb {
    pub const ZERO: Rgb = Rgb([0.0; 3]);
    pub const ONE: Rgb = Rgb([1.0; 3]);

    pub fn new(r: f64, g: f64, b: f64) -> Self {
        Rgb([r, g, b])
    }

    /// Same value in every channel.
    pub fn splat(v: f64) -> Self {
        Rgb([v; 3])
    }

    /// Elementwise product.
    pub fn mul_elem(self, other: Rgb) -> Rgb {
        Rgb([
            self.0[0] * other.0[0],
            self.0[1] * other.0[1],
            self.0[2] * other.0[2],
        ])
    }

    pub fn clamp01(self) -> Rgb {
        Rgb(self.0.map(|v| v.clamp(0.0, 1.0)))
    }

    /// Clamp negatives to zero, keep the rest.
    pub fn max0(self) -> Rgb {
        Rgb(self.0.map(|v| v.max(0.0)))
    }

    pub fn luminance(self) -> f64 {
        self.0[0] * LUMA_WEIGHTS[0] + self.0[1] * LUMA_WEIGHTS[1] + self.0[2] * LUMA_WEIGHTS[2]
    }

    pub fn max_channel(self) -> f64 {
        self.0[0].max(self.0[1]).max(self.0[2])
    }

    pub fn abs(self) -> Rgb {
        Rgb(self.0.map(f64::abs))
    }

    pub fn sum(self) -> f64 {
        self.0[0] + self.0[1] + self.0[2]
    }

    pub fn is_finite(self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Map each channel independently.
    pub fn map(self, f: impl Fn(f64) -> f64) -> Rgb {
        Rgb(self.0.map(f))
    }

    /// Combine two triples channel by channel.
    pub fn zip(self, other: Rgb, f: impl Fn(f64, f64) -> f64) -> Rgb {
        Rgb([
            f(self.0[0], other.0[0]),
            f(self.0[1], other.0[1]),
            f(self.0[2], other.0[2]),
        ])
    }
}

impl Index<usize> for Rgb {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for Rgb {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl Add for Rgb {
    type Output = Rgb;
    fn add(self, o: Rgb) -> Rgb {
        Rgb([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }
}

impl AddAssign for Rgb {
    fn add_assign(&mut self, o: Rgb) {
        *self = *self + o;
    }
}

impl Sub for Rgb {
    type Output = Rgb;
    fn sub(self, o: Rgb) -> Rgb {
        Rgb([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }
}

impl Mul<f64> for Rgb {
    type Output = Rgb;
    fn mul(self, s: f64) -> Rgb {
        Rgb([self.0[0] * s, self.0[1] * s, self.0[2] * s])
    }
}
