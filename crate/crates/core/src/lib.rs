//! Graph-Laplacian anomaly detection (LAD) for multi-band images and 3D
//! volumes, with the RX detector as a baseline.
//!
//! The pipeline is: estimate background statistics from a cube
//! ([`stats`]), build a background graph model ([`graph`]), score every
//! pixel ([`detect`]), and compare thresholded scores with a ground truth
//! ([`eval`]). [`synth`] builds synthetic scenes and implants; [`io`] holds
//! the file formats used by the `lad` command-line tool.

pub mod cli;
pub mod cube;
pub mod detect;
pub mod error;
pub mod eval;
pub mod graph;
pub mod instrument;
pub mod io;
pub mod linalg;
pub mod stats;
pub mod synth;

pub use cube::{Dims, ImageCube, Mask, ScoreMap};
pub use error::{Error, Result};
