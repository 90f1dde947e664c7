//! Recording, time alignment, and analysis of co-registered eye-tracking and
//! EEG data from reading sessions.

// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod eeg;
pub mod gaze;
pub mod inlet;
pub mod pipeline;
pub mod sim;
pub mod stats;
pub mod stream;
pub mod xdf;
