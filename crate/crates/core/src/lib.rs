//! Dynamic HDR radiance fields from alternating-exposure monocular video.
//!
//! A static and a time-conditioned dynamic radiance field are volume rendered
//! in linear HDR, then passed through a learnable tone curve and per-frame
//! gains to match the captured LDR frames. Scene flow links neighboring
//! frames. An analytic scene generator provides exact ground truth for
//! every quantity the model estimates.

pub mod error;
pub mod eval;
pub mod fields;
pub mod geometry;
pub mod image;
pub mod io;
pub mod losses;
pub mod math;
pub mod model;
pub mod parallel;
pub mod renderer;
pub mod synth;
pub mod tonemap;
pub mod trainer;

pub use error::{Error, Result};
