//! Refinement of synthetic eye images toward a real-image distribution.
//!
//! The crate is organised by pipeline stage:
//!
//! * [`eyegen`] renders toy eyes with exact masks and gaze labels and
//!   simulates a shifted "real" domain.
//! * [`segmenter`] segments eye images into background, iris and pupil.
//! * [`percept`] holds the fixed perceptual feature extractor.
//! * [`styleloss`] implements the masked style, content and matting losses.
//! * [`refiner`] trains the two-scale generator against a feature-space
//!   discriminator.
//! * [`gazeval`] scores refined data with appearance-based gaze estimators.

pub mod config;
pub mod error;
pub mod eyegen;
pub mod gazeval;
pub mod imageops;
pub mod io;
pub mod percept;
pub mod refiner;
pub mod rng;
pub mod segmenter;
pub mod styleloss;
pub mod types;

pub use config::{load_config, RefinerConfig, StageSchedule};
pub use error::{Error, Result};
pub use types::{Class, ClassMask, Domain, FeatureStack, Gaze, GazeSample, GramMatrix, ImageTensor, LayerMask, LayerMaskSet, Tap};
