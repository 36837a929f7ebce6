//! Declarative scene configuration: room, charts, emitters, solver settings.
//!
//! Loaded from a TOML document; `SceneConfig::default()` mirrors the
//! built-in living-room setup (2.8 m x 2.2 m footprint, ten charts, five
//! standard luminaire projectors, one large-aperture projector, one texture
//! projector, and an LED reference luminaire).

use crate::color::Rgb;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config invalid: {0}")]
    Invalid(String),
}

/// Which room surface a chart sits on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Surface {
    Floor,
    Ceiling,
    BackWall,
    FrontWall,
    LeftWall,
    RightWall,
    /// Horizontal surface at a fixed height (e.g. a desk top).
    Elevated { height: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoomConfig {
    /// Width (x), depth (y), height (z) in meters.
    pub size: [f64; 3],
    /// Patch grid counts along x, y, z.
    pub subdivisions: [u32; 3],
    pub reflectance: RoomReflectance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoomReflectance {
    pub walls: Rgb,
    pub floor: Rgb,
    pub ceiling: Rgb,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FurnitureConfig {
    pub name: String,
    pub center: [f64; 3],
    pub half_extents: [f64; 3],
    pub reflectance: Rgb,
    #[serde(default = "one")]
    pub subdiv: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChartPlacement {
    pub surface: Surface,
    /// 2D position of the chart center in the surface's own coordinates
    /// (walls: [along-wall, height]; floor/ceiling/elevated: [x, y]).
    pub position: [f64; 2],
    #[serde(default = "default_patch_size")]
    pub patch_size: f64,
    /// Patches per chart as [columns, rows]; 6x4 = 24 by default.
    #[serde(default = "default_chart_grid")]
    pub grid: [u32; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// Box on a surface: blocker plus tagged shell patches.
    Block,
    /// Flat horizontal plane, subdivided for checker-contrast measurements.
    Plane,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetConfig {
    pub center: [f64; 3],
    pub half_extents: [f64; 3],
    pub reflectance: Rgb,
    pub kind: TargetKind,
    #[serde(default = "target_subdiv")]
    pub subdiv: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectorRole {
    Luminaire,
    Texture,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectorConfig {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    pub image_size: [u32; 2],
    /// Horizontal/vertical half-angles in degrees, each in (0, 90).
    pub frustum_deg: [f64; 2],
    #[serde(default = "default_black_level")]
    pub black_level: Rgb,
    /// Radiant scale: peak irradiance a full-white pixel deposits at 1 m.
    #[serde(default = "default_power")]
    pub power: f64,
    pub role: ProjectorRole,
    /// Present for the large-aperture projector, absent for point sources.
    #[serde(default)]
    pub aperture: Option<ApertureConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApertureConfig {
    /// Side length of the square lens, meters.
    pub lens_side: f64,
    pub subaperture_grid: [u32; 2],
    /// Distance from the lens at which pixel rays converge.
    pub focus_distance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LedConfig {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    pub emitter_size: [f64; 2],
    pub intensity: f64,
    pub color_temperature: f64,
    #[serde(default = "default_led_samples")]
    pub samples: [u32; 2],
}

/// A reference lighting variant: overrides applied to the base LED.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceVariant {
    pub name: String,
    #[serde(default)]
    pub position: Option<[f64; 3]>,
    #[serde(default)]
    pub color_temperature: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransportConfig {
    /// Monte Carlo point pairs per ordered patch pair.
    #[serde(default = "default_ff_samples")]
    pub form_factor_samples: usize,
    /// Neumann-series bounce count for radiosity.
    #[serde(default = "default_bounces")]
    pub bounces: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaptureConfig {
    #[serde(default)]
    pub noise_stddev: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerSettings {
    /// Step size of the projected-gradient update.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_iterations")]
    pub max_iterations: usize,
    /// Stop when the objective improves by less than this.
    #[serde(default = "default_stop_tol")]
    pub stop_tolerance: f64,
    /// Digital-number scale of the virtual camera (8-bit sensor: 255).
    /// Residuals and attenuation factors are multiplied by this inside the
    /// update, so `epsilon` carries the same meaning it has for an 8-bit
    /// capture pipeline.
    #[serde(default = "default_residual_scale")]
    pub residual_scale: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViewCameraConfig {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    #[serde(default = "default_fov")]
    pub fov_deg: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskingConfig {
    /// Fraction of unmasked irradiance a patch must lose to count as darkened.
    #[serde(default = "default_darkened_fraction")]
    pub darkened_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub room: RoomConfig,
    #[serde(default)]
    pub furniture: Vec<FurnitureConfig>,
    #[serde(default)]
    pub charts: Vec<ChartPlacement>,
    #[serde(default)]
    pub target: Option<TargetConfig>,
    #[serde(default)]
    pub projectors: Vec<ProjectorConfig>,
    #[serde(default)]
    pub led: Option<LedConfig>,
    #[serde(default)]
    pub reference_variants: Vec<ReferenceVariant>,
    #[serde(default = "TransportConfig::default")]
    pub transport: TransportConfig,
    #[serde(default = "CaptureConfig::default")]
    pub capture: CaptureConfig,
    #[serde(default = "OptimizerSettings::default")]
    pub optimizer: OptimizerSettings,
    #[serde(default)]
    pub view_camera: Option<ViewCameraConfig>,
    #[serde(default = "MaskingConfig::default")]
    pub masking: MaskingConfig,
}

fn one() -> u32 {
    1
}
fn target_subdiv() -> u32 {
    2
}
fn default_patch_size() -> f64 {
    0.04
}
fn default_chart_grid() -> [u32; 2] {
    [6, 4]
}
fn default_black_level() -> Rgb {
    Rgb::splat(0.02)
}
fn default_power() -> f64 {
    2.2
}
fn default_led_samples() -> [u32; 2] {
    [4, 4]
}
fn default_ff_samples() -> usize {
    24
}
fn default_bounces() -> u32 {
    8
}
fn default_epsilon() -> f64 {
    1e-5
}
fn default_iterations() -> usize {
    25
}
fn default_stop_tol() -> f64 {
    1e-8
}
fn default_residual_scale() -> f64 {
    255.0
}
fn default_fov() -> f64 {
    70.0
}
fn default_darkened_fraction() -> f64 {
    0.05
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig {
            form_factor_samples: default_ff_samples(),
            bounces: default_bounces(),
        }
    }
}

impl Default for CaptureConfig {
    fn default() -> Self {
        CaptureConfig { noise_stddev: 0.0 }
    }
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            epsilon: default_epsilon(),
            max_iterations: default_iterations(),
            stop_tolerance: default_stop_tol(),
            residual_scale: default_residual_scale(),
        }
    }
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            darkened_fraction: default_darkened_fraction(),
        }
    }
}

impl SceneConfig {
    /// Minimal closed room with nothing in it.
    pub fn empty_room(size: [f64; 3], subdivisions: [u32; 3]) -> Self {
        SceneConfig {
            room: RoomConfig {
                size,
                subdivisions,
                reflectance: RoomReflectance {
                    walls: Rgb::splat(0.7),
                    floor: Rgb::new(0.40, 0.38, 0.36),
                    ceiling: Rgb::splat(0.8),
                },
            },
            furniture: Vec::new(),
            charts: Vec::new(),
            target: None,
            projectors: Vec::new(),
            led: None,
            reference_variants: Vec::new(),
            transport: TransportConfig::default(),
            capture: CaptureConfig::default(),
            optimizer: OptimizerSettings::default(),
            view_camera: None,
            masking: MaskingConfig::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: SceneConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        if self.room.size.iter().any(|&v| v <= 0.0) {
            return bad(format!("room.size must be positive, got {:?}", self.room.size));
        }
        if self.room.subdivisions.iter().any(|&v| v < 1) {
            return bad("room.subdivisions entries must be >= 1".into());
        }
        for (i, p) in self.projectors.iter().enumerate() {
            for &a in &p.frustum_deg {
                if !(a > 0.0 && a < 90.0) {
                    return bad(format!(
                        "projector {i}: frustum half-angles must be in (0, 90) degrees, got {a}"
                    ));
                }
            }
            if p.image_size.iter().any(|&s| s < 1) {
                return bad(format!("projector {i}: image_size must be >= 1x1"));
            }
            if p.black_level.0.iter().any(|&v| v < 0.0) {
                return bad(format!("projector {i}: black_level must be >= 0"));
            }
            if let Some(ap) = &p.aperture {
                if ap.lens_side <= 0.0 {
                    return bad(format!("projector {i}: lens_side must be > 0"));
                }
                if ap.subaperture_grid.iter().any(|&g| g < 1) {
                    return bad(format!("projector {i}: subaperture_grid dims must be >= 1"));
                }
                if ap.focus_distance <= 0.0 {
                    return bad(format!("projector {i}: focus_distance must be > 0"));
                }
            }
        }
        if let Some(led) = &self.led {
            if led.intensity < 0.0 {
                return bad("led.intensity must be >= 0".into());
            }
            if !(1000.0..=20000.0).contains(&led.color_temperature) {
                return bad(format!(
                    "led.color_temperature must be in [1000, 20000] K, got {}",
                    led.color_temperature
                ));
            }
        }
        if self.optimizer.epsilon <= 0.0 {
            return bad(format!(
                "optimizer.epsilon must be > 0, got {}",
                self.optimizer.epsilon
            ));
        }
        if self.optimizer.max_iterations < 1 {
            return bad("optimizer.max_iterations must be >= 1".into());
        }
        if self.capture.noise_stddev < 0.0 {
            return bad("capture.noise_stddev must be >= 0".into());
        }
        Ok(())
    }

    /// Texture projector index, if one is configured.
    pub fn texture_projector(&self) -> Option<usize> {
        self.projectors
            .iter()
            .position(|p| p.role == ProjectorRole::Texture)
    }
}

impl Default for SceneConfig {
    /// The built-in living-room scene: 2.8 x 2.2 m footprint, ten charts on
    /// walls / floor / desk, five standard luminaire projectors plus one
    /// large-aperture projector over the desk, a texture projector aimed at
    /// the target, and an LED panel as the reference luminaire.
    fn default() -> Self {
        let mut cfg = SceneConfig::empty_room([2.8, 2.2, 2.4], [7, 6, 6]);

        cfg.furniture.push(FurnitureConfig {
            name: "desk".into(),
            center: [1.4, 1.85, 0.35],
            half_extents: [0.6, 0.3, 0.35],
            reflectance: Rgb::new(0.35, 0.31, 0.28),
            subdiv: 2,
        });

        cfg.target = Some(TargetConfig {
            center: [1.55, 1.85, 0.80],
            half_extents: [0.07, 0.07, 0.10],
            reflectance: Rgb::splat(0.56),
            kind: TargetKind::Block,
            subdiv: 2,
        });

        let wall_chart = |surface, position| ChartPlacement {
            surface,
            position,
            patch_size: 0.04,
            grid: [6, 4],
        };
        cfg.charts = vec![
            wall_chart(Surface::FrontWall, [0.70, 1.45]),
            wall_chart(Surface::FrontWall, [2.10, 1.45]),
            wall_chart(Surface::LeftWall, [0.70, 1.30]),
            wall_chart(Surface::LeftWall, [1.50, 1.30]),
            wall_chart(Surface::RightWall, [0.70, 1.30]),
            wall_chart(Surface::RightWall, [1.50, 1.30]),
            wall_chart(Surface::Floor, [0.70, 0.60]),
            wall_chart(Surface::Floor, [0.60, 1.20]),
            wall_chart(Surface::Floor, [2.10, 0.70]),
            // Desk chart beside the projection target, inside the margin
            // zone of the large-aperture projector.
            ChartPlacement {
                surface: Surface::Elevated { height: 0.7001 },
                position: [1.32, 1.85],
                patch_size: 0.04,
                grid: [6, 4],
            },
        ];

        let proj = |position, look_at, frustum_deg: [f64; 2], power| ProjectorConfig {
            position,
            look_at,
            image_size: [96, 72],
            frustum_deg,
            black_level: default_black_level(),
            power,
            role: ProjectorRole::Luminaire,
            aperture: None,
        };
        cfg.projectors = vec![
            // Two at the side walls, one at the front wall, two at the floor.
            // Aims are slightly off-axis, as in any physical install; powers
            // are matched to the throw distance.
            proj([0.90, 1.13, 2.30], [0.0, 1.07, 1.22], [30.0, 26.0], 2.3),
            proj([1.90, 1.08, 2.30], [2.8, 1.13, 1.18], [30.0, 26.0], 2.3),
            proj([1.43, 0.95, 2.30], [1.37, 2.20, 1.50], [32.0, 18.0], 2.5),
            proj([0.73, 1.02, 2.30], [0.66, 0.93, 0.0], [18.0, 20.0], 4.4),
            proj([2.07, 0.72, 2.30], [2.13, 0.67, 0.0], [26.0, 24.0], 4.4),
            // Large-aperture projector illuminating the desk around the
            // target; slightly defocused so masking needs a real margin.
            ProjectorConfig {
                position: [1.25, 1.83, 2.25],
                look_at: [1.28, 1.88, 0.70],
                image_size: [64, 48],
                frustum_deg: [17.0, 14.0],
                black_level: default_black_level(),
                power: 2.0,
                role: ProjectorRole::Luminaire,
                aperture: Some(ApertureConfig {
                    lens_side: 0.5,
                    subaperture_grid: [8, 8],
                    focus_distance: 1.25,
                }),
            },
            // Texture projector aimed at the target.
            ProjectorConfig {
                position: [1.52, 0.95, 2.30],
                look_at: [1.56, 1.85, 0.80],
                image_size: [64, 64],
                frustum_deg: [10.0, 10.0],
                black_level: Rgb::splat(0.01),
                power: 1.6,
                role: ProjectorRole::Texture,
                aperture: None,
            },
        ];

        cfg.led = Some(LedConfig {
            position: [1.45, 1.10, 2.34],
            look_at: [1.35, 1.25, 0.0],
            emitter_size: [0.30, 0.30],
            intensity: 2.2,
            color_temperature: 5000.0,
            samples: [4, 4],
        });
        cfg.reference_variants = vec![
            ReferenceVariant {
                name: "warm-left".into(),
                position: Some([0.70, 0.70, 2.34]),
                color_temperature: Some(3000.0),
            },
            ReferenceVariant {
                name: "warm-right".into(),
                position: Some([2.30, 1.10, 2.34]),
                color_temperature: Some(3200.0),
            },
            ReferenceVariant {
                name: "cool-center".into(),
                position: None,
                color_temperature: Some(6500.0),
            },
        ];

        cfg.view_camera = Some(ViewCameraConfig {
            position: [1.4, 0.12, 1.5],
            look_at: [1.4, 1.8, 0.9],
            fov_deg: default_fov(),
        });
        cfg
    }
}
