//! Self-calibrating phasor-field NLOS reconstruction.
//!
//! The pipeline runs `filter_H → rsd_fft → normalize_volume →
//! extract_surface → render_implicit → apply_sensor`, and [`calib`]
//! differentiates the whole chain to fit the imaging parameters.

pub mod calib;
pub mod error;
pub mod geom;
pub mod io;
pub mod phasor;
pub mod scene;
pub mod sensor;
pub mod surface;
pub mod transient;

pub use error::{Error, Result};
pub use geom::Vec3;
