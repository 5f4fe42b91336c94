#![cfg_attr(not(test), no_std)]
extern crate alloc;

pub mod behavior;
pub mod config;
pub mod error;
pub mod grading;
pub mod hsdm;
pub mod sim;
pub mod sqfa;
pub mod types;
pub mod vindex;

pub use config::{EngineConfig, ScoreWeights};
pub use error::{Error, Result};
pub use types::{BodyPart, Door, FeatureVector, GrayImage, PartObservation, PartScore, Passage, PassengerId, StopEvent, Tracklet};
