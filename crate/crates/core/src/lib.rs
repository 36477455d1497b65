//! Allocation-only building blocks for unsupervised anomaly segmentation by
//! masked cyclic modality translation.
//!
//! Everything here is a pure function of its inputs: noise schedules and the
//! closed-form diffusion steps, strip masks and mask-weighted aggregation,
//! segmentation metrics, intensity normalization, slice selection and the
//! synthetic multi-modal phantom. Networks, training and file formats live in
//! the `mmccd` crate.
#![no_std]

extern crate alloc;
#[cfg(any(feature = "std", test))]
extern crate std;

pub mod diffusion;
pub mod error;
pub mod image;
pub mod masking;
pub mod math;
pub mod metrics;
pub mod normalize;
pub mod phantom;
pub mod resample;
pub mod schedule;
pub mod slices;

pub use error::{Error, Result};
pub use image::{BinaryMask, Image};
pub use masking::{MaskSet, MaskStrip, Orientation};
pub use schedule::{NoiseSchedule, ScheduleDescriptor, ScheduleKind};
