//! Reproduces target environmental lighting with multiple virtual projector
//! nodes: a diffuse room simulator with inter-reflection, heterogeneous
//! projector models (point and large-aperture area sources), a structured
//! light calibration protocol, and a distributed projected-gradient
//! optimizer for the node inputs.
//!
//! Pipeline: [`scene`] builds the room and its light transport, [`emitters`]
//! models the light sources, [`capture`] provides the virtual camera and
//! graycode correspondence, [`calibration`] measures black offsets and
//! attenuation factors, [`optimizer`] drives the node inputs toward a
//! reference appearance, and [`metrics`] evaluates the result.

pub mod calibration;
pub mod capture;
pub mod color;
pub mod config;
pub mod emitters;
pub mod metrics;
pub mod optimizer;
pub mod pipeline;
pub mod raster;
pub mod scene;

pub use color::Rgb;
pub use config::SceneConfig;
