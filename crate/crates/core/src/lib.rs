//! Self-gated multi-scale prompting for 3D promptable lesion segmentation.

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod feature;
pub mod harness;
pub mod metrics;
pub mod msfb;
pub mod nn;
pub mod optim;
pub mod params;
pub mod sgpm;
pub mod synthdata;
pub mod tensor;
pub mod zoomloss;

pub use error::{Error, Result};
